//! Fine-tuning strategies: which components train, from which start and on
//! which text path, plus textual inversion, DreamBooth and textual projection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat};
use crate::data::{Pair, ReportRecord, ToyCorpus, View};
use crate::diffusion::{add_noise, sample_noise, LatentTensor};
use crate::error::{Error, Result};
use crate::nn::text_encoder::token_table_name;
use crate::nn::{Grid, Tokenizer, Vae};
use crate::params::{AdamW, AdamWConfig, ParamSet, Trainable};
use crate::pipeline::{DomainBagEncoder, Pipeline, TextPlugin, PLUGIN_SEED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetMode {
    Frozen,
    FinetunePretrained,
    TrainFromRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderMode {
    Frozen,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderSource {
    Builtin,
    ExternalPlugin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Standard,
    TextualInversion,
    Dreambooth,
    TextualProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub name: String,
    pub unet_mode: UNetMode,
    pub text_encoder_mode: TextEncoderMode,
    pub text_encoder_source: TextEncoderSource,
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Probability of replacing a prompt with the empty prompt.
    pub prompt_dropout: f64,
    /// Weight of the prior-preservation term (DreamBooth only).
    pub prior_weight: f64,
    pub seed: u64,
    /// Stock plugin to condition on when the source is external.
    pub plugin_id: Option<String>,
    /// Placeholder token learned by textual inversion.
    pub new_token: String,
    /// Views admitted into the training set.
    pub views: BTreeSet<View>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            unet_mode: UNetMode::FinetunePretrained,
            text_encoder_mode: TextEncoderMode::Finetune,
            text_encoder_source: TextEncoderSource::Builtin,
            strategy: Strategy::Standard,
            learning_rate: LR_LOW,
            weight_decay: 1e-2,
            train_steps: 2000,
            batch_size: 32,
            prompt_dropout: 0.1,
            prior_weight: 1.0,
            seed: 0,
            plugin_id: None,
            new_token: "<chest-xray>".into(),
            views: BTreeSet::from([View::PA]),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("fine-tune config {:?}: {m}", self.name)));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.train_steps == 0 || self.batch_size == 0 {
            return bad("train_steps and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return bad("prompt_dropout must lie in [0, 1]");
        }
        if !(self.prior_weight.is_finite() && self.prior_weight >= 0.0) {
            return bad("prior_weight must be nonnegative");
        }
        if self.views.is_empty() {
            return bad("at least one view is required");
        }
        let external = self.text_encoder_source == TextEncoderSource::ExternalPlugin;
        let te_frozen = self.text_encoder_mode == TextEncoderMode::Frozen;
        if external && !te_frozen {
            return bad("an external text encoder is always frozen");
        }
        match self.strategy {
            Strategy::Standard => {}
            Strategy::TextualInversion => {
                if self.unet_mode != UNetMode::Frozen || !te_frozen || external {
                    return bad("textual inversion trains only the new token row");
                }
                if Tokenizer::split(&self.new_token) != [self.new_token.clone()] {
                    return bad("new_token must be a single <placeholder> token");
                }
            }
            Strategy::Dreambooth => {
                if self.unet_mode == UNetMode::Frozen || !te_frozen || external {
                    return bad("DreamBooth trains the U-Net with the builtin encoder frozen");
                }
            }
            Strategy::TextualProjection => {
                if !external {
                    return bad("textual projection needs an external text encoder");
                }
            }
        }
        Ok(())
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        presets()
            .into_iter()
            .find(|p| p.config.name == name)
            .map(|p| p.config)
            .ok_or_else(|| Error::invalid(format!("unknown preset {name:?}")))
    }
}

/// Learning-rate analogs of the 5e-5 and 1e-4 settings.
pub const LR_LOW: f64 = 1e-3;
pub const LR_HIGH: f64 = 2e-3;

/// Step-count analogs of 1k, 12.5k and 60k steps.
pub const STEPS_SHORT: usize = 100;
pub const STEPS_MEDIUM: usize = 500;
pub const STEPS_LONG: usize = 2000;

/// Stock plugins standing in for two domain-specific encoders: one matching
/// the builtin width, one narrower.
pub const PLUGIN_MATCHED: &str = "domain-bag-64";
pub const PLUGIN_NARROW: &str = "domain-bag-32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetFamily {
    Baselines,
    LrSteps,
    Components,
    TextEncoders,
    MultipleViews,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub family: PresetFamily,
    pub config: FineTuneConfig,
}

/// Every preset of the strategy matrix.
pub fn presets() -> Vec<Preset> {
    let base = FineTuneConfig::default();
    let mk = |family, name: &str, f: &dyn Fn(&mut FineTuneConfig)| {
        let mut config = FineTuneConfig {
            name: name.to_string(),
            ..base.clone()
        };
        f(&mut config);
        Preset { family, config }
    };
    use PresetFamily::*;
    let mut out = vec![
        mk(Baselines, "original", &|c| {
            c.unet_mode = UNetMode::Frozen;
            c.text_encoder_mode = TextEncoderMode::Frozen;
            c.train_steps = 1;
        }),
        mk(Baselines, "dreambooth", &|c| {
            c.strategy = Strategy::Dreambooth;
            c.text_encoder_mode = TextEncoderMode::Frozen;
            c.train_steps = STEPS_SHORT;
            c.batch_size = 4;
        }),
        mk(Baselines, "textual-inversion", &|c| {
            c.strategy = Strategy::TextualInversion;
            c.unet_mode = UNetMode::Frozen;
            c.text_encoder_mode = TextEncoderMode::Frozen;
            c.train_steps = STEPS_SHORT;
            c.learning_rate = 5e-3;
        }),
    ];
    for (lr, lr_name) in [(LR_HIGH, "1e-4"), (LR_LOW, "5e-5")] {
        for (steps, s_name) in [(STEPS_SHORT, "1k"), (STEPS_MEDIUM, "12.5k"), (STEPS_LONG, "60k")] {
            out.push(mk(LrSteps, &format!("lr{lr_name}-{s_name}"), &|c| {
                c.learning_rate = lr;
                c.train_steps = steps;
            }));
        }
    }
    out.extend([
        mk(Components, "rnd-unet-1k", &|c| {
            c.unet_mode = UNetMode::TrainFromRandom;
            c.train_steps = STEPS_SHORT;
        }),
        mk(Components, "rnd-unet-60k", &|c| {
            c.unet_mode = UNetMode::TrainFromRandom;
        }),
        mk(Components, "rnd-unet-only-60k", &|c| {
            c.unet_mode = UNetMode::TrainFromRandom;
            c.text_encoder_mode = TextEncoderMode::Frozen;
        }),
        mk(Components, "unet-only-60k", &|c| {
            c.text_encoder_mode = TextEncoderMode::Frozen;
        }),
    ]);
    for (plugin, p_name, steps) in [
        (PLUGIN_MATCHED, "matched", &[(STEPS_SHORT, "1k"), (STEPS_MEDIUM, "12.5k"), (STEPS_LONG, "60k")][..]),
        (PLUGIN_NARROW, "narrow", &[(STEPS_LONG, "60k")][..]),
    ] {
        for &(n, s_name) in steps {
            out.push(mk(TextEncoders, &format!("plugin-{p_name}-{s_name}"), &|c| {
                c.strategy = Strategy::TextualProjection;
                c.unet_mode = UNetMode::TrainFromRandom;
                c.text_encoder_mode = TextEncoderMode::Frozen;
                c.text_encoder_source = TextEncoderSource::ExternalPlugin;
                c.plugin_id = Some(plugin.to_string());
                c.train_steps = n;
            }));
        }
    }
    out.push(mk(MultipleViews, "multi-view-60k", &|c| {
        c.views = View::ALL.into_iter().collect();
    }));
    out
}

/// One pre-encoded training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    pub prompt: String,
    pub latent: LatentTensor,
    pub view: View,
}

/// Prompts with VAE latents; the VAE stays frozen so latents are computed once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
}

const ENCODE_CHUNK: usize = 256;

impl TrainingSet {
    pub fn from_pairs(pairs: &[Pair], views: &[View], vae: &Vae) -> Result<Self> {
        if pairs.len() != views.len() {
            return Err(Error::invalid("one view per pair is required"));
        }
        let mut items = Vec::with_capacity(pairs.len());
        for (chunk, vchunk) in pairs.chunks(ENCODE_CHUNK).zip(views.chunks(ENCODE_CHUNK)) {
            let images: Vec<_> = chunk.iter().map(|p| p.image.clone()).collect();
            for ((p, latent), view) in chunk.iter().zip(vae.encode(&images)?).zip(vchunk) {
                items.push(TrainingItem {
                    prompt: p.prompt.clone(),
                    latent,
                    view: *view,
                });
            }
        }
        Ok(Self { items })
    }

    pub fn from_records(corpus: &ToyCorpus, records: &[ReportRecord], vae: &Vae) -> Result<Self> {
        let views: Vec<View> = records.iter().map(|r| r.view).collect();
        Self::from_pairs(&corpus.pairs(records)?, &views, vae)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn with_views(&self, views: &BTreeSet<View>) -> Self {
        Self {
            items: self.items.iter().filter(|i| views.contains(&i.view)).cloned().collect(),
        }
    }
}

/// Independent random streams used by a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Order,
    Instance,
    Prior,
    Init,
}

/// Generator for `branch` at `step` (or epoch, for [`Branch::Order`]).
pub fn step_rng(seed: u64, branch: Branch, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((branch as u64) << 48) | step);
    r
}

/// The random choices behind one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise: Vec<LatentTensor>,
    /// Samples whose prompt is replaced by the empty prompt.
    pub dropped: Vec<bool>,
}

impl StepDraw {
    pub fn sample<R: Rng>(
        rng: &mut R,
        indices: Vec<usize>,
        shape: (usize, usize, usize),
        num_train_timesteps: usize,
        dropout: f64,
    ) -> Result<Self> {
        let n = indices.len();
        let mut timesteps = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        let mut dropped = Vec::with_capacity(n);
        for _ in 0..n {
            timesteps.push(rng.gen_range(0..num_train_timesteps));
            noise.push(sample_noise(shape, rng)?);
            dropped.push(rng.gen::<f64>() < dropout);
        }
        Ok(Self {
            indices,
            timesteps,
            noise,
            dropped,
        })
    }

    /// Draw for the prior branch: examples are picked uniformly at random.
    pub fn prior(
        seed: u64,
        step: usize,
        batch: usize,
        pool: usize,
        shape: (usize, usize, usize),
        num_train_timesteps: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut rng = step_rng(seed, Branch::Prior, step as u64);
        let indices = (0..batch).map(|_| rng.gen_range(0..pool)).collect();
        Self::sample(&mut rng, indices, shape, num_train_timesteps, dropout)
    }
}

/// Epoch-wise shuffled order over `n` examples.
#[derive(Clone, Debug)]
pub struct EpochOrder {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl EpochOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    pub fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (0..size)
            .map(|k| {
                let pos = step * size + k;
                let epoch = pos / self.n;
                if self.epoch != Some(epoch) {
                    let mut rng = step_rng(self.seed, Branch::Order, epoch as u64);
                    self.perm = (0..self.n).collect();
                    self.perm.shuffle(&mut rng);
                    self.epoch = Some(epoch);
                }
                self.perm[pos % self.n]
            })
            .collect()
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub config: FineTuneConfig,
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Prior-preservation term per step (DreamBooth with λ > 0 only).
    pub prior_losses: Vec<f64>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
    pub hashes_before: BTreeMap<String, String>,
    pub hashes_after: BTreeMap<String, String>,
    pub trainable: Vec<String>,
    pub optimizer: AdamWConfig,
    pub train_examples: usize,
}

impl TrainingRunRecord {
    /// Mean loss over `range` of steps.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// `step,loss` CSV.
    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:.10}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Parameters the optimizer may modify under `config` on this pipeline.
pub fn trainable_set(pipeline: &Pipeline, config: &FineTuneConfig) -> Result<BTreeMap<String, Trainable>> {
    let mut out = BTreeMap::new();
    let mut all = |ps: &ParamSet| {
        for n in ps.names() {
            out.insert(n.to_string(), Trainable::All);
        }
    };
    if config.unet_mode != UNetMode::Frozen {
        all(&pipeline.unet.params);
    }
    match config.text_encoder_source {
        TextEncoderSource::Builtin => {
            if pipeline.plugin.is_some() {
                return Err(Error::invalid("config selects the builtin encoder but a plugin is installed"));
            }
            if config.text_encoder_mode == TextEncoderMode::Finetune {
                all(&pipeline.text_encoder.params);
            }
        }
        TextEncoderSource::ExternalPlugin => {
            let pc = pipeline
                .plugin
                .as_ref()
                .ok_or_else(|| Error::invalid("config selects an external encoder but none is installed"))?;
            if config.strategy == Strategy::TextualProjection {
                all(&pc.head);
            }
        }
    }
    if config.strategy == Strategy::TextualInversion {
        let id = pipeline
            .text_encoder
            .tokenizer
            .id(&config.new_token)
            .ok_or_else(|| Error::invalid(format!("token {} is not in the vocabulary", config.new_token)))?;
        out.insert(token_table_name(), Trainable::Rows(vec![id]));
    }
    Ok(out)
}

/// Puts the pipeline in the starting state `config` asks for: a fresh U-Net
/// when training from random, the configured plugin when external.
fn prepare(pipeline: &mut Pipeline, config: &FineTuneConfig) -> Result<()> {
    if config.unet_mode == UNetMode::TrainFromRandom {
        pipeline.reinit_unet(config.seed);
    }
    if config.text_encoder_source == TextEncoderSource::ExternalPlugin {
        let installed = pipeline.plugin.as_ref().map(|p| p.plugin.id().to_string());
        match (&config.plugin_id, installed) {
            (Some(want), Some(have)) if *want == have => {}
            (Some(want), _) => {
                let plugin = Arc::new(DomainBagEncoder::from_id(want, PLUGIN_SEED)?);
                pipeline.set_plugin(plugin, config.seed)?;
            }
            (None, Some(_)) => {}
            (None, None) => return Err(Error::invalid("no plugin installed and no plugin_id given")),
        }
    }
    Ok(())
}

/// Mean noise-prediction loss on one minibatch and its parameter gradients.
pub fn batch_loss(
    pipeline: &Pipeline,
    set: &TrainingSet,
    prompts: &[String],
    draw: &StepDraw,
) -> Result<(f64, HashMap<String, Mat>)> {
    let (_, h, w) = pipeline.latent_shape();
    let batch_prompts: Vec<String> = draw
        .indices
        .iter()
        .zip(&draw.dropped)
        .map(|(&i, &d)| if d { String::new() } else { prompts[i].clone() })
        .collect();
    let noisy = draw
        .indices
        .iter()
        .zip(&draw.timesteps)
        .zip(&draw.noise)
        .map(|((&i, &t), n)| add_noise(&set.items[i].latent, n, t, &pipeline.schedule))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let ctx = pipeline.condition(&mut g, &batch_prompts)?;
    let x = g.input(LatentTensor::to_rows(&noisy));
    let ts: Vec<f64> = draw.timesteps.iter().map(|&t| t as f64).collect();
    let grid = Grid {
        batch: noisy.len(),
        h,
        w,
    };
    let pred = pipeline.unet.forward(&mut g, x, grid, &ts, &ctx)?;
    let target = g.input(LatentTensor::to_rows(&draw.noise));
    let loss = g.mse(pred, target);
    Ok((g.scalar(loss), g.backward(loss).into_param_map()))
}

struct PriorTerm<'a> {
    set: &'a TrainingSet,
    weight: f64,
}

fn fit(
    pipeline: &mut Pipeline,
    config: &FineTuneConfig,
    data: &TrainingSet,
    prompts: Vec<String>,
    prior: Option<PriorTerm<'_>>,
    observer: &mut dyn FnMut(usize, &Pipeline),
) -> Result<TrainingRunRecord> {
    let started = Instant::now();
    for p in &prompts {
        pipeline.check_prompt(p)?;
    }
    if let Some(pt) = &prior {
        for it in &pt.set.items {
            pipeline.check_prompt(&it.prompt)?;
        }
    }
    let trainable = trainable_set(pipeline, config)?;
    let hashes_before = pipeline.component_hashes();
    let optimizer = AdamWConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(optimizer);
    let mut order = EpochOrder::new(config.seed, data.len());
    let shape = pipeline.latent_shape();
    let t_max = pipeline.schedule.num_train_timesteps;
    let prior_prompts: Vec<String> = prior
        .as_ref()
        .map(|p| p.set.items.iter().map(|i| i.prompt.clone()).collect())
        .unwrap_or_default();
    let mut losses = Vec::with_capacity(config.train_steps);
    let mut prior_losses = Vec::new();
    for step in 0..config.train_steps {
        let indices = order.batch(step, config.batch_size);
        let mut rng = step_rng(config.seed, Branch::Instance, step as u64);
        let draw = StepDraw::sample(&mut rng, indices, shape, t_max, config.prompt_dropout)?;
        let (mut loss, mut grads) = batch_loss(pipeline, data, &prompts, &draw)?;
        if let Some(pt) = prior.as_ref().filter(|p| p.weight > 0.0) {
            let pdraw = StepDraw::prior(
                config.seed,
                step,
                config.batch_size,
                pt.set.len(),
                shape,
                t_max,
                config.prompt_dropout,
            )?;
            let (pl, pg) = batch_loss(pipeline, pt.set, &prior_prompts, &pdraw)?;
            for (name, g) in pg {
                match grads.get_mut(&name) {
                    Some(acc) => acc.scaled_add(pt.weight, &g),
                    None => {
                        grads.insert(name, g * pt.weight);
                    }
                }
            }
            loss += pt.weight * pl;
            prior_losses.push(pl);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        let Pipeline {
            unet,
            text_encoder,
            plugin,
            ..
        } = pipeline;
        let mut sets: Vec<&mut ParamSet> = vec![&mut unet.params, &mut text_encoder.params];
        if let Some(pc) = plugin.as_mut() {
            sets.push(&mut pc.head);
        }
        opt.step_many(&mut sets, &grads, &trainable);
        observer(step + 1, pipeline);
    }
    Ok(TrainingRunRecord {
        config: config.clone(),
        losses,
        prior_losses,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
        hashes_before,
        hashes_after: pipeline.component_hashes(),
        trainable: trainable.keys().cloned().collect(),
        optimizer,
        train_examples: data.len(),
    })
}

fn admitted(config: &FineTuneConfig, data: &TrainingSet) -> Result<TrainingSet> {
    if data.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let kept = data.with_views(&config.views);
    if kept.is_empty() {
        return Err(Error::invalid(format!("no training example has a view in {:?}", config.views)));
    }
    Ok(kept)
}

fn expect_strategy(config: &FineTuneConfig, allowed: &[Strategy], op: &str) -> Result<()> {
    config.validate()?;
    if !allowed.contains(&config.strategy) {
        return Err(Error::invalid(format!("{op} does not run strategy {:?}", config.strategy)));
    }
    Ok(())
}

/// Minimises the noise-prediction loss over minibatches, updating only the
/// components `config` declares trainable.
pub fn train(pipeline: &mut Pipeline, config: &FineTuneConfig, data: &TrainingSet) -> Result<TrainingRunRecord> {
    train_observed(pipeline, config, data, &mut |_, _| {})
}

/// [`train`], calling `observer` with the number of completed steps and the
/// pipeline after every update.
pub fn train_observed(
    pipeline: &mut Pipeline,
    config: &FineTuneConfig,
    data: &TrainingSet,
    observer: &mut dyn FnMut(usize, &Pipeline),
) -> Result<TrainingRunRecord> {
    expect_strategy(config, &[Strategy::Standard, Strategy::TextualProjection], "train")?;
    let data = admitted(config, data)?;
    prepare(pipeline, config)?;
    let prompts = data.items.iter().map(|i| i.prompt.clone()).collect();
    fit(pipeline, config, &data, prompts, None, observer)
}

/// Adds `new_token` to the vocabulary and learns only its embedding row.
/// Prompts lacking the token get it prepended.
pub fn textual_inversion_train(
    pipeline: &mut Pipeline,
    config: &FineTuneConfig,
    data: &TrainingSet,
    new_token: &str,
) -> Result<TrainingRunRecord> {
    let config = FineTuneConfig {
        new_token: new_token.to_string(),
        ..config.clone()
    };
    expect_strategy(&config, &[Strategy::TextualInversion], "textual_inversion_train")?;
    let data = admitted(&config, data)?;
    let mut rng = step_rng(config.seed, Branch::Init, 0);
    pipeline.text_encoder.add_token(new_token, &mut rng)?;
    let prompts = data
        .items
        .iter()
        .map(|i| {
            if Tokenizer::split(&i.prompt).iter().any(|w| w == new_token) {
                i.prompt.clone()
            } else {
                format!("{new_token} {}", i.prompt)
            }
        })
        .collect();
    fit(pipeline, &config, &data, prompts, None, &mut |_, _| {})
}

/// U-Net fine-tuning on `instance` with a prior-preservation term computed on
/// examples drawn at random from `prior`.
pub fn dreambooth_train(
    pipeline: &mut Pipeline,
    config: &FineTuneConfig,
    instance: &TrainingSet,
    prior: &TrainingSet,
) -> Result<TrainingRunRecord> {
    expect_strategy(config, &[Strategy::Dreambooth], "dreambooth_train")?;
    let data = admitted(config, instance)?;
    if prior.is_empty() {
        return Err(Error::invalid("prior corpus is empty"));
    }
    prepare(pipeline, config)?;
    let prompts = data.items.iter().map(|i| i.prompt.clone()).collect();
    let term = PriorTerm {
        set: prior,
        weight: config.prior_weight,
    };
    fit(pipeline, config, &data, prompts, Some(term), &mut |_, _| {})
}

/// Conditions on `plugin` through a trainable projection head (and trains the
/// U-Net too unless frozen).
pub fn textual_projection_train(
    pipeline: &mut Pipeline,
    config: &FineTuneConfig,
    data: &TrainingSet,
    plugin: Arc<dyn TextPlugin>,
) -> Result<TrainingRunRecord> {
    expect_strategy(config, &[Strategy::TextualProjection], "textual_projection_train")?;
    pipeline.set_plugin(plugin.clone(), config.seed)?;
    let config = FineTuneConfig {
        plugin_id: Some(plugin.id().to_string()),
        ..config.clone()
    };
    train(pipeline, &config, data)
}

/// Runs whichever strategy `config` names. DreamBooth needs `prior`.
pub fn run(
    pipeline: &mut Pipeline,
    config: &FineTuneConfig,
    data: &TrainingSet,
    prior: Option<&TrainingSet>,
) -> Result<TrainingRunRecord> {
    match config.strategy {
        Strategy::Standard | Strategy::TextualProjection => train(pipeline, config, data),
        Strategy::TextualInversion => textual_inversion_train(pipeline, config, data, &config.new_token),
        Strategy::Dreambooth => {
            let prior = prior.ok_or_else(|| Error::invalid("DreamBooth needs a prior corpus"))?;
            dreambooth_train(pipeline, config, data, prior)
        }
    }
}
