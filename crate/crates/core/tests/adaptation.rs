use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use latentlab::adaptation::*;
use latentlab::autograd::Mat;
use latentlab::checkpoint::pipeline_tensors;
use latentlab::data::{general_corpus, toy_corpus_generate, CorpusSpec, View};
use latentlab::diffusion::{add_noise, training_loss, LatentTensor, SamplerConfig};
use latentlab::nn::text_encoder::token_table_name;
use latentlab::nn::{Grid, Tokenizer, VaeTrainConfig};
use latentlab::params::{bitwise_eq, ParamSet};
use latentlab::pipeline::*;
use latentlab::{Error, Result};

fn corpus_set(p: &Pipeline, n: usize) -> TrainingSet {
    let spec = CorpusSpec {
        train_size: n,
        test_size: 0,
        ..Default::default()
    };
    let c = toy_corpus_generate(&spec).unwrap();
    let splits = c.curated(&Tokenizer::default()).unwrap();
    TrainingSet::from_records(&c, &splits.train, &p.vae).unwrap()
}

fn general_set(p: &Pipeline, n: usize) -> TrainingSet {
    let pairs: Vec<_> = general_corpus(n, 32, 1).into_iter().map(|(_, p)| p).collect();
    TrainingSet::from_pairs(&pairs, &vec![View::PA; n], &p.vae).unwrap()
}

fn quick(steps: usize) -> FineTuneConfig {
    FineTuneConfig {
        train_steps: steps,
        batch_size: 4,
        seed: 11,
        ..Default::default()
    }
}

fn fresh() -> Pipeline {
    Pipeline::new(PipelineConfig::default(), 1).unwrap()
}

#[test]
fn frozen_text_encoder_is_bitwise_unchanged() {
    let mut p = fresh();
    let data = corpus_set(&p, 60);
    let before = p.text_encoder.params.clone();
    let unet_before = p.unet.params.clone();
    let cfg = FineTuneConfig {
        text_encoder_mode: TextEncoderMode::Frozen,
        ..quick(5)
    };
    let rec = train(&mut p, &cfg, &data).unwrap();
    assert!(before.diff(&p.text_encoder.params).is_empty());
    assert!(!unet_before.diff(&p.unet.params).is_empty());
    assert_eq!(rec.losses.len(), 5);
    assert_eq!(rec.hashes_before["text_encoder"], rec.hashes_after["text_encoder"]);
}

#[test]
fn training_from_random_is_deterministic() {
    let data = corpus_set(&fresh(), 60);
    let cfg = FineTuneConfig {
        unet_mode: UNetMode::TrainFromRandom,
        ..quick(4)
    };
    let run = || {
        let mut p = fresh();
        let rec = train(&mut p, &cfg, &data).unwrap();
        (rec.losses, pipeline_tensors(&p).hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_halves_over_a_toy_run() {
    let mut p = fresh();
    let spec = CorpusSpec::default();
    let c = toy_corpus_generate(&spec).unwrap();
    let splits = c.curated(&Tokenizer::default()).unwrap();
    let imgs: Vec<_> = splits.train.iter().map(|r| c.image(r).unwrap()).collect();
    let vae_cfg = VaeTrainConfig {
        steps: 600,
        ..Default::default()
    };
    p.vae.train(&imgs, &vae_cfg).unwrap();
    let data = TrainingSet::from_records(&c, &splits.train, &p.vae).unwrap();
    let cfg = FineTuneConfig {
        unet_mode: UNetMode::TrainFromRandom,
        train_steps: 2000,
        ..Default::default()
    };
    let rec = train(&mut p, &cfg, &data).unwrap();
    let first = rec.mean_loss(0..100);
    let last = rec.mean_loss(1900..2000);
    assert!(last < 0.5 * first, "first {first} last {last}");
}

#[test]
fn empty_corpus_and_nan_are_reported() {
    let mut p = fresh();
    let err = train(&mut p, &quick(2), &TrainingSet::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));

    let data = corpus_set(&p, 30);
    let name = p.unet.params.names().next().unwrap().to_string();
    p.unet.params.get_mut(&name).unwrap()[[0, 0]] = f64::NAN;
    let err = train(&mut p, &quick(3), &data).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged { step: 0, .. }), "{err}");
}

#[test]
fn textual_inversion_touches_only_the_new_row() {
    let mut p = fresh();
    let data = corpus_set(&p, 40);
    let vocab = p.text_encoder.vocab_size();
    let te_before = p.text_encoder.params.clone();
    let unet_before = p.unet.params.clone();
    let mut cfg = FineTuneConfig::preset("textual-inversion").unwrap();
    cfg.train_steps = 3;
    cfg.batch_size = 4;
    let rec = textual_inversion_train(&mut p, &cfg, &data, "<chest-xray>").unwrap();
    assert_eq!(p.text_encoder.vocab_size(), vocab + 1);
    assert_eq!(rec.trainable, vec![token_table_name()]);
    assert!(unet_before.diff(&p.unet.params).is_empty());

    let table = token_table_name();
    let diff = te_before.diff(&p.text_encoder.params);
    assert_eq!(diff, vec![table.clone()]);
    let old = te_before.get(&table);
    let new = p.text_encoder.params.get(&table);
    for r in 0..vocab {
        assert!(bitwise_eq(
            &old.row(r).to_owned().insert_axis(ndarray::Axis(0)),
            &new.row(r).to_owned().insert_axis(ndarray::Axis(0))
        ));
    }

    // the row differs from its initial value
    let mut q = fresh();
    let id = q
        .text_encoder
        .add_token("<chest-xray>", &mut step_rng(cfg.seed, Branch::Init, 0))
        .unwrap();
    let init = q.text_encoder.params.get(&table).row(id).to_owned();
    assert_ne!(init, new.row(vocab));

    let again = textual_inversion_train(&mut p, &cfg, &data, "<chest-xray>").unwrap_err();
    assert!(matches!(again, Error::InvalidArgument(_)));
}

#[test]
fn dreambooth_without_prior_matches_unet_only_training() {
    let base = fresh();
    let inst = corpus_set(&base, 20);
    let prior = general_set(&base, 20);
    let db = FineTuneConfig {
        strategy: Strategy::Dreambooth,
        text_encoder_mode: TextEncoderMode::Frozen,
        prior_weight: 0.0,
        ..quick(4)
    };
    let plain = FineTuneConfig {
        strategy: Strategy::Standard,
        ..db.clone()
    };
    let mut a = base.clone();
    let mut b = base.clone();
    let ra = dreambooth_train(&mut a, &db, &inst, &prior).unwrap();
    let rb = train(&mut b, &plain, &inst).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert!(pipeline_tensors(&a).diff(&pipeline_tensors(&b)).is_empty());
    assert!(base.text_encoder.params.diff(&a.text_encoder.params).is_empty());
    assert!(base.vae.params.diff(&a.vae.params).is_empty());

    let neg = FineTuneConfig {
        prior_weight: -1.0,
        ..db
    };
    assert!(matches!(
        dreambooth_train(&mut a, &neg, &inst, &prior),
        Err(Error::InvalidArgument(_))
    ));
}

/// Noise-prediction loss recomputed outside the training graph.
fn direct_loss(p: &Pipeline, set: &TrainingSet, draw: &StepDraw) -> f64 {
    let (_, h, w) = p.latent_shape();
    let mut total = 0.0;
    for ((&i, &t), noise) in draw.indices.iter().zip(&draw.timesteps).zip(&draw.noise) {
        let noisy = add_noise(&set.items[i].latent, noise, t, &p.schedule).unwrap();
        let (ctx, lens) = p.context_values(&[set.items[i].prompt.clone()]).unwrap();
        let grid = Grid { batch: 1, h, w };
        let out = p
            .unet
            .predict(&LatentTensor::to_rows(&[noisy]), grid, &[t as f64], &ctx, &lens)
            .unwrap();
        let pred = LatentTensor::from_rows(&out, h, w).remove(0);
        total += training_loss(&pred, noise).unwrap();
    }
    total / draw.indices.len() as f64
}

#[test]
fn dreambooth_loss_is_instance_plus_prior() {
    let mut p = fresh();
    // a live output layer so both terms depend on the prompt and input
    p.unet = latentlab::nn::UNet::new(
        latentlab::nn::UNetConfig {
            zero_init_out: false,
            ..p.config.unet
        },
        &mut step_rng(3, Branch::Init, 0),
    );
    let inst = TrainingSet {
        items: corpus_set(&p, 10).items.into_iter().filter(|i| i.view == View::PA).take(1).collect(),
    };
    let prior = general_set(&p, 1);
    let cfg = FineTuneConfig {
        strategy: Strategy::Dreambooth,
        text_encoder_mode: TextEncoderMode::Frozen,
        prior_weight: 1.0,
        prompt_dropout: 0.0,
        batch_size: 1,
        train_steps: 1,
        seed: 21,
        ..Default::default()
    };
    let before = p.clone();
    let rec = dreambooth_train(&mut p, &cfg, &inst, &prior).unwrap();
    let shape = before.latent_shape();
    let t_max = before.schedule.num_train_timesteps;
    let mut rng = step_rng(cfg.seed, Branch::Instance, 0);
    let d_inst = StepDraw::sample(&mut rng, vec![0], shape, t_max, 0.0).unwrap();
    let d_prior = StepDraw::prior(cfg.seed, 0, 1, 1, shape, t_max, 0.0).unwrap();
    let inst_loss = direct_loss(&before, &inst, &d_inst);
    let prior_loss = direct_loss(&before, &prior, &d_prior);
    assert!((rec.losses[0] - (inst_loss + prior_loss)).abs() < 1e-12);
    assert!((rec.prior_losses[0] - prior_loss).abs() < 1e-12);
}

#[test]
fn projection_head_starts_as_identity_and_plugin_stays_frozen() {
    let plugin = Arc::new(DomainBagEncoder::from_id(PLUGIN_MATCHED, PLUGIN_SEED).unwrap());
    let plugin_params = plugin.params().clone();
    let mut p = fresh();
    let data = corpus_set(&p, 60);

    let swapped = swap_text_encoder(p.clone(), plugin.clone(), 0).unwrap();
    let prompt = data.items[0].prompt.clone();
    let (ctx, _) = swapped.context_values(&[prompt.clone()]).unwrap();
    assert_eq!(ctx.ncols(), swapped.d_text());
    let raw = plugin.embed(&prompt).unwrap();
    assert_eq!(ctx, raw);

    let cfg = FineTuneConfig::preset("plugin-matched-1k").unwrap();
    let cfg = FineTuneConfig {
        train_steps: 100,
        batch_size: 4,
        ..cfg
    };
    let rec = textual_projection_train(&mut p, &cfg, &data, plugin.clone()).unwrap();
    assert!(plugin_params.diff(plugin.params()).is_empty());
    assert_eq!(rec.hashes_before["plugin"], rec.hashes_after["plugin"]);
    assert!(rec.trainable.iter().any(|n| n.starts_with("proj.")));

    let narrow = Arc::new(DomainBagEncoder::from_id(PLUGIN_NARROW, PLUGIN_SEED).unwrap());
    let q = swap_text_encoder(fresh(), narrow, 0).unwrap();
    assert_eq!(q.context_values(&[prompt]).unwrap().0.ncols(), q.d_text());
}

#[derive(Debug)]
struct Counting {
    inner: DomainBagEncoder,
    limit: usize,
    calls: AtomicUsize,
}

impl TextPlugin for Counting {
    fn id(&self) -> &str {
        "counting"
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn max_tokens(&self) -> usize {
        self.limit
    }
    fn embed(&self, text: &str) -> Result<Mat> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(text)
    }
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[test]
fn swap_consumes_plugin_and_round_trips() {
    let p = fresh();
    let plugin = Arc::new(Counting {
        inner: DomainBagEncoder::new(64, 2),
        limit: p.max_tokens(),
        calls: AtomicUsize::new(0),
    });
    let prompts = vec!["Small left-sided pleural effusion.".to_string()];
    let original = p.context_values(&prompts).unwrap();
    let swapped = swap_text_encoder(p, plugin.clone(), 0).unwrap();
    let cfg = SamplerConfig {
        num_inference_steps: 4,
        ..Default::default()
    };
    swapped.generate(&prompts[0], &cfg).unwrap();
    assert!(plugin.calls() >= 1);
    let back = restore_builtin_encoder(swapped);
    assert_eq!(back.context_values(&prompts).unwrap(), original);

    let bad = Arc::new(Counting {
        inner: DomainBagEncoder::new(64, 2),
        limit: back.max_tokens() + 1,
        calls: AtomicUsize::new(0),
    });
    assert!(matches!(swap_text_encoder(back, bad, 0), Err(Error::Contract(_))));
}

fn all_params(p: &Pipeline) -> ParamSet {
    pipeline_tensors(p)
}

#[test]
fn every_preset_changes_exactly_its_trainable_set() {
    let base = fresh();
    let data = corpus_set(&base, 80);
    let prior = general_set(&base, 20);
    for preset in presets() {
        let cfg = FineTuneConfig {
            train_steps: 3,
            batch_size: 4,
            ..preset.config.clone()
        };
        let mut p = base.clone();
        let rec = run(&mut p, &cfg, &data, Some(&prior)).unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
        let before = all_params(&base);
        let after = all_params(&p);
        let declared: BTreeSet<String> = rec.trainable.iter().cloned().collect();
        for name in before.diff(&after) {
            let fresh_unet = cfg.unet_mode == UNetMode::TrainFromRandom && name.starts_with("unet.");
            let new_tensor = !before.contains(&name);
            assert!(
                declared.contains(&name) || fresh_unet || new_tensor,
                "{}: {name} changed but is not trainable",
                cfg.name
            );
        }
    }
}
