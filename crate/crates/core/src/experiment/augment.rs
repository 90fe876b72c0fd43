//! Classifier training on mixes of real and generated images.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correctness::{
    auroc_table, fingerprint, toy_class_names, toy_truth_matrix, ClassifierConfig, EvalReport, MultiLabelClassifier,
};
use crate::data::{LabelVector, ReportRecord};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pipeline::Pipeline;

use super::config::{AugmentationPlan, REFERENCE_BASELINE_AUROC, REFERENCE_BEST_AUROC};
use super::Lab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRow {
    pub name: String,
    pub real_n: usize,
    pub synth_n: usize,
    pub auroc: f64,
    pub accuracy: f64,
    /// AUROC minus the baseline row's.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationTable {
    pub rows: Vec<AugmentationRow>,
    pub reports: Vec<EvalReport>,
    pub reference_baseline_auroc: f64,
    pub reference_best_auroc: f64,
}

impl AugmentationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Builds the classifier for a row from the plan's hyperparameters.
pub type ClassifierFactory<'a> = dyn FnMut(usize, &ClassifierConfig) -> Result<Box<dyn MultiLabelClassifier>> + 'a;
/// Loads a generator checkpoint by (resolved) path.
pub type GeneratorLoader<'a> = dyn FnMut(&Path) -> Result<Pipeline> + 'a;

/// Fraction of thresholded (0.5) predictions equal to the truth.
pub fn accuracy(probs: &crate::autograd::Mat, truths: &crate::autograd::Mat) -> f64 {
    let hits = probs
        .iter()
        .zip(truths.iter())
        .filter(|(p, t)| (**p > 0.5) == (**t > 0.5))
        .count();
    hits as f64 / probs.len().max(1) as f64
}

/// Runs every split of `plan`: draws real PA training images, generates the
/// synthetic part from the split's checkpoint conditioned on real training
/// impressions, fits a fresh classifier with early stopping on a fixed real
/// validation slice and scores it on the PA test split.
pub fn run_augmentation_study(
    lab: &Lab,
    plan: &AugmentationPlan,
    sampler: &SamplerConfig,
    make_classifier: &mut ClassifierFactory<'_>,
    load_generator: &mut GeneratorLoader<'_>,
) -> Result<AugmentationTable> {
    plan.validate()?;
    let mut pool = lab.train_pa();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(lab.config.seed ^ 0xa065));
    let n_val = ((pool.len() as f64) * plan.val_fraction).round() as usize;
    let (val, pool) = pool.split_at(n_val);
    let labels = |rs: &[ReportRecord]| rs.iter().map(|r| r.labels).collect::<Vec<LabelVector>>();
    let val_images = lab.images(val)?;
    let val_truth = toy_truth_matrix(&labels(val));
    let test = lab.test_pa();
    let test_images = lab.images(&test)?;
    let test_truth = toy_truth_matrix(&labels(&test));
    let names = toy_class_names();

    let mut generators: HashMap<PathBuf, Pipeline> = HashMap::new();
    let mut rows = Vec::with_capacity(plan.splits.len());
    let mut reports = Vec::with_capacity(plan.splits.len());
    for (i, split) in plan.splits.iter().enumerate() {
        if split.real > pool.len() {
            return Err(Error::Config(format!(
                "split {:?} asks for {} real images but only {} are available",
                split.name,
                split.real,
                pool.len()
            )));
        }
        let real = &pool[..split.real];
        let mut images: Vec<GrayImage> = lab.images(real)?;
        let mut truth_labels = labels(real);
        if split.synth > 0 {
            let path = lab.config.resolve(split.checkpoint.as_deref().expect("validated"));
            if !generators.contains_key(&path) {
                let g = load_generator(&path)?;
                generators.insert(path.clone(), g);
            }
            let generator = &generators[&path];
            let usable: Vec<&ReportRecord> =
                pool.iter().filter(|r| generator.check_prompt(&r.impression).is_ok()).collect();
            if usable.is_empty() {
                return Err(Error::Config(format!("split {:?}: no usable prompts", split.name)));
            }
            let source: Vec<&ReportRecord> = usable.iter().copied().cycle().take(split.synth).collect();
            let prompts: Vec<String> = source.iter().map(|r| r.impression.clone()).collect();
            let row_sampler = SamplerConfig {
                seed: sampler.seed ^ (i as u64 + 1),
                ..*sampler
            };
            images.extend(generator.generate_many(&prompts, &row_sampler, 64)?);
            truth_labels.extend(source.iter().map(|r| r.labels));
        }
        let mut cls = make_classifier(i, &plan.classifier)?;
        let val_arg = (n_val > 0).then_some((val_images.as_slice(), &val_truth));
        cls.fit(&images, &toy_truth_matrix(&truth_labels), val_arg)?;
        let probs = cls.predict_proba(&test_images)?;
        let table = auroc_table(&probs, &test_truth, &names, None)?;
        let auroc = table
            .macro_auroc
            .ok_or_else(|| Error::UndefinedMetric("test split has no class with both labels".into()))?;
        rows.push(AugmentationRow {
            name: split.name.clone(),
            real_n: split.real,
            synth_n: split.synth,
            auroc,
            accuracy: accuracy(&probs, &test_truth),
            delta: 0.0,
        });
        let mut report = EvalReport::new(
            format!("augment:{}", split.name),
            fingerprint(&(plan, split, sampler, lab.config.seed)),
            lab.corpus_fingerprint.clone(),
        );
        report.flags.push("constant learning rate".into());
        reports.push(report);
    }
    let base = rows[plan.baseline].auroc;
    for (row, report) in rows.iter_mut().zip(&mut reports) {
        row.delta = row.auroc - base;
        report.insert("real_n", row.real_n as f64);
        report.insert("synth_n", row.synth_n as f64);
        report.insert("auroc", row.auroc);
        report.insert("accuracy", row.accuracy);
        report.insert("delta", row.delta);
    }
    Ok(AugmentationTable {
        rows,
        reports,
        reference_baseline_auroc: REFERENCE_BASELINE_AUROC,
        reference_best_auroc: REFERENCE_BEST_AUROC,
    })
}
