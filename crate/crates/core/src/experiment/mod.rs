//! Experiment runner: shared setup, the fine-tuning grid, the augmentation
//! study, the forgetting probe and report rendering.

pub mod augment;
pub mod evals;
pub mod config;
pub mod grid;
pub mod plot;
pub mod report;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptation::{train, train_observed, FineTuneConfig, TextEncoderMode, TrainingSet, UNetMode};
use crate::correctness::{
    auroc_table, fingerprint, forgetting_probe, record_auroc, toy_class_names, toy_truth_matrix, EvalReport,
    ForgettingPoint, MultiLabelClassifier, OracleClassifier, ProbeTexts,
};
use crate::data::grammar::GeneralScene;
use crate::data::{general_corpus, LabelVector, Pair, ReportRecord, Splits, ToyCorpus, View};
use crate::error::{Error, Result};
use crate::fidelity::{extract_features, fid, intra_prompt_diversity, ExtractorRegistry, FeatureSet, RandomProjection};
use crate::image::GrayImage;
use crate::nn::{TextEncoder, Tokenizer};
use crate::pipeline::Pipeline;

pub use augment::{run_augmentation_study, AugmentationRow, AugmentationTable};
pub use config::{
    AugSplit, AugmentationPlan, EvalConfig, ExperimentConfig, ExperimentKind, PretrainConfig, ProbeConfig,
};
pub use evals::{eval_chexpert10, eval_classify, eval_retrieval, eval_text_metrics, eval_text_pairs};
pub use grid::{run_finetune_grid, GridRow};

/// Corpus, splits and fingerprints shared by every experiment of one config.
#[derive(Clone, Debug)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub corpus: ToyCorpus,
    pub splits: Splits,
    pub general: Vec<(GeneralScene, Pair)>,
    pub corpus_fingerprint: String,
}

fn general_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = crate::data::toy_corpus_generate(&config.corpus)?;
        let tokenizer = Tokenizer::toy(config.pipeline.max_tokens);
        let splits = corpus.curated(&tokenizer)?;
        let general = general_corpus(
            config.pretrain.general_pairs,
            config.corpus.image_size,
            general_seed(config.corpus.seed),
        );
        let ids: Vec<(&str, &str)> = splits
            .train
            .iter()
            .chain(&splits.test)
            .map(|r| (r.record_id.as_str(), r.impression.as_str()))
            .collect();
        let corpus_fingerprint = fingerprint(&(&config.corpus, ids, config.pretrain.general_pairs));
        Ok(Self {
            config,
            corpus,
            splits,
            general,
            corpus_fingerprint,
        })
    }

    pub fn images(&self, records: &[ReportRecord]) -> Result<Vec<GrayImage>> {
        records.iter().map(|r| self.corpus.image(r)).collect()
    }

    pub fn train_pa(&self) -> Vec<ReportRecord> {
        self.splits.train.iter().filter(|r| r.view == View::PA).cloned().collect()
    }

    pub fn test_pa(&self) -> Vec<ReportRecord> {
        self.splits.test.iter().filter(|r| r.view == View::PA).cloned().collect()
    }

    /// Test-split PA records used for evaluation, truncated to `eval.max_prompts`.
    pub fn eval_records(&self) -> Vec<ReportRecord> {
        let mut rs = self.test_pa();
        if self.config.eval.max_prompts > 0 {
            rs.truncate(self.config.eval.max_prompts);
        }
        rs
    }

    pub fn eval_items(&self) -> Vec<(String, LabelVector)> {
        self.eval_records().into_iter().map(|r| (r.impression, r.labels)).collect()
    }

    pub fn config_fingerprint<T: Serialize>(&self, extra: &T) -> String {
        let c = &self.config;
        fingerprint(&(&c.pipeline, &c.pretrain, &c.sampler, &c.eval, c.seed, extra))
    }

    /// Fresh pipeline with a fitted autoencoder and, if configured, a U-Net and
    /// text encoder pretrained on the general corpus.
    pub fn base_pipeline(&self) -> Result<Pipeline> {
        let c = &self.config;
        let mut p = Pipeline::new(c.pipeline, c.seed)?;
        let mut images = self.images(&self.splits.train)?;
        images.extend(self.general.iter().map(|(_, pair)| pair.image.clone()));
        p.vae.train(
            &images,
            &crate::nn::VaeTrainConfig {
                seed: c.pretrain.vae.seed ^ c.seed,
                ..c.pretrain.vae
            },
        )?;
        if c.pretrain.general_steps > 0 {
            let cfg = FineTuneConfig {
                name: "general-pretrain".into(),
                unet_mode: UNetMode::FinetunePretrained,
                text_encoder_mode: TextEncoderMode::Finetune,
                learning_rate: c.pretrain.general_lr,
                train_steps: c.pretrain.general_steps,
                batch_size: c.pretrain.batch_size,
                seed: c.seed ^ 0x6765_6e,
                ..Default::default()
            };
            let general = self.general_set(&p)?;
            train(&mut p, &cfg, &general)?;
        }
        Ok(p)
    }

    /// Medical training set (all views; configs filter by view).
    pub fn training_set(&self, p: &Pipeline) -> Result<TrainingSet> {
        TrainingSet::from_records(&self.corpus, &self.splits.train, &p.vae)
    }

    /// General-domain pairs, used for pretraining and as the DreamBooth prior.
    pub fn general_set(&self, p: &Pipeline) -> Result<TrainingSet> {
        let pairs: Vec<Pair> = self.general.iter().map(|(_, pair)| pair.clone()).collect();
        let views = vec![View::PA; pairs.len()];
        TrainingSet::from_pairs(&pairs, &views, &p.vae)
    }

    /// Oracle classifier fit on real PA training images with early stopping
    /// on a held-out fifth of them.
    pub fn oracle_classifier(&self) -> Result<OracleClassifier> {
        let mut records = self.train_pa();
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.classifier.seed ^ 0x0c1a));
        let n_val = records.len() / 5;
        let (val, train) = records.split_at(n_val);
        let mut cls = OracleClassifier::new(self.config.classifier.clone())?;
        let labels = |rs: &[ReportRecord]| rs.iter().map(|r| r.labels).collect::<Vec<_>>();
        let (vi, vt) = (self.images(val)?, toy_truth_matrix(&labels(val)));
        cls.fit(&self.images(train)?, &toy_truth_matrix(&labels(train)), Some((&vi, &vt)))?;
        Ok(cls)
    }
}

/// Extractors, real reference features and prompts for evaluating generators.
pub struct Suite {
    pub registry: ExtractorRegistry,
    pub real: BTreeMap<String, FeatureSet>,
    pub items: Vec<(String, LabelVector)>,
    pub classifier: Option<Arc<OracleClassifier>>,
    pub eval: EvalConfig,
    pub sampler: crate::diffusion::SamplerConfig,
}

/// Images produced while evaluating one generator.
pub struct SuiteOutput {
    pub images: Vec<GrayImage>,
    pub skipped: usize,
}

impl Suite {
    pub fn new(lab: &Lab, classifier: Option<Arc<OracleClassifier>>) -> Result<Self> {
        let eval = lab.config.eval.clone();
        let mut registry = ExtractorRegistry::new();
        for (i, d) in eval.projection_dims.iter().enumerate() {
            registry.register(Arc::new(RandomProjection::new(
                lab.config.corpus.image_size,
                *d,
                lab.config.seed.wrapping_add(i as u64),
            )));
        }
        if eval.classifier_features {
            let c = classifier
                .clone()
                .ok_or_else(|| Error::Config("classifier features need the oracle classifier".into()))?;
            registry.register(c);
        }
        let records = lab.eval_records();
        let items = records.iter().map(|r| (r.impression.clone(), r.labels)).collect();
        let real_images = lab.images(&records)?;
        let mut real = BTreeMap::new();
        for id in registry.ids() {
            real.insert(id.clone(), extract_features(&real_images, &registry, &id)?);
        }
        Ok(Self {
            registry,
            real,
            items,
            classifier,
            eval,
            sampler: lab.config.sampler,
        })
    }

    /// FID per extractor, intra-prompt MS-SSIM and (optionally) classifier
    /// AUROC for one generator, written into `report`.
    pub fn evaluate(&self, p: &Pipeline, report: &mut EvalReport) -> Result<SuiteOutput> {
        let kept: Vec<&(String, LabelVector)> = self.items.iter().filter(|(q, _)| p.check_prompt(q).is_ok()).collect();
        let skipped = self.items.len() - kept.len();
        let prompts: Vec<String> = kept.iter().map(|(q, _)| q.clone()).collect();
        let images = p.generate_many(&prompts, &self.sampler, 64)?;
        for (id, real) in &self.real {
            let gen = extract_features(&images, &self.registry, id)?;
            report.insert(format!("fid.{id}"), fid(real, &gen)?);
        }
        let k = self.eval.samples_per_prompt;
        if k >= 2 && self.eval.diversity_prompts > 0 {
            let mut means = Vec::new();
            for q in prompts.iter().take(self.eval.diversity_prompts) {
                let samples = p.generate_many(&vec![q.clone(); k], &self.sampler, k)?;
                means.push(intra_prompt_diversity(&samples)?.mean);
            }
            report.insert("ms_ssim", means.iter().sum::<f64>() / means.len() as f64);
        }
        if let (true, Some(c)) = (self.eval.classify, &self.classifier) {
            let labels: Vec<LabelVector> = kept.iter().map(|(_, l)| *l).collect();
            let table = auroc_table(
                &c.predict_proba(&images)?,
                &toy_truth_matrix(&labels),
                &toy_class_names(),
                None,
            )?;
            record_auroc(report, &table);
        }
        if skipped > 0 {
            report.insert("skipped_prompts", skipped as f64);
        }
        Ok(SuiteOutput { images, skipped })
    }
}

/// Fine-tunes the base pipeline on the medical corpus, snapshotting the text
/// encoder at step 0 and every `probe.every` steps, and scores each snapshot.
pub fn run_forgetting_probe(lab: &Lab, base: &Pipeline) -> Result<(Vec<ForgettingPoint>, EvalReport)> {
    let pc = &lab.config.probe;
    let mut p = base.clone();
    let data = lab.training_set(&p)?;
    let cfg = FineTuneConfig {
        name: "forgetting-probe".into(),
        train_steps: pc.train_steps,
        seed: lab.config.seed,
        ..Default::default()
    };
    let mut snaps: Vec<(usize, TextEncoder)> = vec![(0, p.text_encoder.clone())];
    train_observed(&mut p, &cfg, &data, &mut |step, pipe| {
        if step % pc.every == 0 {
            snaps.push((step, pipe.text_encoder.clone()));
        }
    })?;
    let test = lab.test_pa();
    let texts: Vec<String> = test.iter().map(|r| r.impression.clone()).collect();
    let labels = toy_truth_matrix(&test.iter().map(|r| r.labels).collect::<Vec<_>>());
    let general = general_corpus(
        pc.general_captions,
        lab.config.corpus.image_size,
        general_seed(lab.config.corpus.seed) ^ 0x7072_6f62,
    );
    let gtexts: Vec<String> = general.iter().map(|(s, _)| s.caption()).collect();
    let gidx: Vec<usize> = general.iter().map(|(s, _)| s.class_index()).collect();
    let glabels = crate::correctness::probe::one_hot(&gidx, 4);
    let refs: Vec<(usize, &TextEncoder)> = snaps.iter().map(|(s, t)| (*s, t)).collect();
    let points = forgetting_probe(
        &refs,
        &ProbeTexts {
            texts: &texts,
            labels: &labels,
        },
        &ProbeTexts {
            texts: &gtexts,
            labels: &glabels,
        },
    )?;
    let mut report = EvalReport::new(
        "probe:forgetting",
        lab.config_fingerprint(&(&lab.config.probe, &cfg)),
        lab.corpus_fingerprint.clone(),
    );
    for pt in &points {
        report.insert(format!("in_domain.step{:05}", pt.step), pt.in_domain_macro);
        report.insert(format!("general.step{:05}", pt.step), pt.general_macro);
    }
    Ok((points, report))
}
