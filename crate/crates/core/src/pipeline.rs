//! The assembled text-to-image pipeline: VAE, text conditioning, U-Net and
//! schedule, plus guided generation and external text-encoder plugins.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat};
use crate::data::ToyClass;
use crate::diffusion::{guided_noise, LatentTensor, NoiseSchedule, SamplerConfig, SamplerSession, ScheduleConfig};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::layers::{init_linear, linear, Grid};
use crate::nn::tokenizer::{Tokenizer, DEFAULT_MAX_TOKENS};
use crate::nn::{Context, TextEncoder, TextEncoderConfig, UNet, UNetConfig, Vae, VaeConfig};
use crate::params::{init_normal, ParamSet};

/// A frozen, externally supplied text encoder.
pub trait TextPlugin: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    /// Output embedding width.
    fn dim(&self) -> usize;
    fn max_tokens(&self) -> usize;
    /// `(token_count, dim)` embedding of `text`.
    fn embed(&self, text: &str) -> Result<Mat>;
    /// Content hash of the plugin's parameters.
    fn fingerprint(&self) -> String;
    /// Number of `embed` calls served so far.
    fn calls(&self) -> usize;
}

/// Words each toy finding is described with, used to give the domain plugin
/// its clustered vocabulary.
fn class_words(c: ToyClass) -> &'static [&'static str] {
    match c {
        ToyClass::Cardiomegaly => &["cardiomegaly"],
        ToyClass::Edema => &["edema", "pulmonary"],
        ToyClass::PleuralEffusion => &["effusion", "pleural"],
        ToyClass::Pneumonia => &["pneumonia"],
        ToyClass::Pneumothorax => &["pneumothorax"],
        ToyClass::NoFinding => &["normal", "acute", "cardiopulmonary", "process"],
    }
}

/// Domain-specific toy encoder: seeded word vectors in which the words of
/// each finding share a class direction, plus positions and a sequence mean.
#[derive(Debug)]
pub struct DomainBagEncoder {
    id: String,
    tokenizer: Tokenizer,
    params: ParamSet,
    calls: AtomicUsize,
}

impl DomainBagEncoder {
    pub const ID: &'static str = "domain-bag";

    pub fn new(dim: usize, seed: u64) -> Self {
        let tokenizer = Tokenizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = init_normal(&mut rng, tokenizer.vocab_size(), dim, 0.4);
        for c in ToyClass::ALL {
            let dir = init_normal(&mut rng, 1, dim, 1.0);
            for w in class_words(c) {
                if let Some(id) = tokenizer.id(w) {
                    let mut row = words.row_mut(id);
                    row += &dir.row(0);
                }
            }
        }
        let mut params = ParamSet::new();
        params.insert("plugin.words", words);
        params.insert("plugin.pos", init_normal(&mut rng, tokenizer.max_tokens, dim, 0.1));
        Self {
            id: format!("{}-{dim}", Self::ID),
            tokenizer,
            params,
            calls: AtomicUsize::new(0),
        }
    }

    /// Builds a plugin for one of the known ids (`domain-bag-<dim>`).
    pub fn from_id(id: &str, seed: u64) -> Result<Self> {
        let dim = id
            .strip_prefix(&format!("{}-", Self::ID))
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| Error::invalid(format!("unknown text plugin {id:?}")))?;
        Ok(Self::new(dim, seed))
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl TextPlugin for DomainBagEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.params.get("plugin.words").ncols()
    }

    fn max_tokens(&self) -> usize {
        self.tokenizer.max_tokens
    }

    fn embed(&self, text: &str) -> Result<Mat> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let ids = self.tokenizer.encode(text)?;
        let words = self.params.get("plugin.words");
        let pos = self.params.get("plugin.pos");
        let mut out = Mat::zeros((ids.len(), self.dim()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&(&words.row(id) + &pos.row(i)));
        }
        let mean = out.mean_axis(ndarray::Axis(0)).expect("nonempty");
        for mut row in out.rows_mut() {
            row.scaled_add(0.5, &mean);
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        self.params.hash()
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// A plugin plus the trainable linear head mapping its output to the U-Net's
/// context width.
#[derive(Clone, Debug)]
pub struct PluginConditioning {
    pub plugin: Arc<dyn TextPlugin>,
    pub head: ParamSet,
}

pub const HEAD_PREFIX: &str = "proj";

impl PluginConditioning {
    /// Identity-initialised when the widths match, scaled random otherwise.
    pub fn new(plugin: Arc<dyn TextPlugin>, d_text: usize, seed: u64) -> Result<Self> {
        let d = plugin.dim();
        if d == 0 || d_text == 0 {
            return Err(Error::invalid("projection head needs positive dimensions"));
        }
        let mut head = ParamSet::new();
        if d == d_text {
            head.insert(format!("{HEAD_PREFIX}.w"), Mat::eye(d));
            head.insert(format!("{HEAD_PREFIX}.b"), Mat::zeros((1, d)));
        } else {
            init_linear(&mut head, &mut ChaCha8Rng::seed_from_u64(seed), HEAD_PREFIX, d, d_text, 1.0);
        }
        Ok(Self { plugin, head })
    }

    pub fn check(&self, d_text: usize) -> Result<()> {
        let w = self.head.get(&format!("{HEAD_PREFIX}.w"));
        if w.dim() != (self.plugin.dim(), d_text) {
            return Err(Error::invalid(format!(
                "projection head {:?} cannot map plugin width {} to {d_text}",
                w.dim(),
                self.plugin.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub vae: VaeConfig,
    pub text_encoder: TextEncoderConfig,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub max_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unet.context_dim != self.text_encoder.d_model {
            return Err(Error::Config(format!(
                "unet.context_dim {} must equal text_encoder.d_model {}",
                self.unet.context_dim, self.text_encoder.d_model
            )));
        }
        if self.unet.latent_channels != self.vae.latent_channels {
            return Err(Error::Config("unet and vae disagree on latent channels".into()));
        }
        if self.vae.latent_side < 2 || self.vae.image_size == 0 {
            return Err(Error::Config("latent side must be at least 2".into()));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("max_tokens must be at least 2".into()));
        }
        NoiseSchedule::from_config(&self.schedule).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub vae: Vae,
    pub text_encoder: TextEncoder,
    pub unet: UNet,
    pub plugin: Option<PluginConditioning>,
    pub schedule: NoiseSchedule,
}

/// Per-step guided noise predictions recorded during generation.
pub type Trace = Vec<Vec<LatentTensor>>;

impl Pipeline {
    /// Fresh, randomly initialised pipeline. Each component draws from its own stream.
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Ok(Self {
            vae: Vae::new(config.vae, &mut stream(1)),
            text_encoder: TextEncoder::new(config.text_encoder, Tokenizer::toy(config.max_tokens), &mut stream(2)),
            unet: UNet::new(config.unet, &mut stream(3)),
            plugin: None,
            schedule: NoiseSchedule::from_config(&config.schedule)?,
            config,
        })
    }

    /// Replaces the U-Net with a freshly initialised one.
    pub fn reinit_unet(&mut self, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(3);
        self.unet = UNet::new(self.config.unet, &mut r);
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let v = &self.config.vae;
        (v.latent_channels, v.latent_side, v.latent_side)
    }

    pub fn image_size(&self) -> usize {
        self.config.vae.image_size
    }

    pub fn d_text(&self) -> usize {
        self.text_encoder.d_model()
    }

    pub fn max_tokens(&self) -> usize {
        self.text_encoder.tokenizer.max_tokens
    }

    /// Token count check shared by every prompt consumer.
    pub fn check_prompt(&self, prompt: &str) -> Result<usize> {
        let count = self.text_encoder.tokenizer.count(prompt);
        if count > self.max_tokens() {
            return Err(Error::PromptTooLong {
                count,
                limit: self.max_tokens(),
            });
        }
        Ok(count)
    }

    /// Conditioning context for `prompts` inside graph `g`. Parameters of the
    /// active text path enter the graph as named leaves.
    pub fn condition(&self, g: &mut Graph, prompts: &[String]) -> Result<Context> {
        for p in prompts {
            self.check_prompt(p)?;
        }
        match &self.plugin {
            None => {
                let ids = prompts
                    .iter()
                    .map(|p| self.text_encoder.tokenize(p))
                    .collect::<Result<Vec<_>>>()?;
                self.text_encoder.forward(g, &ids)
            }
            Some(pc) => {
                pc.check(self.d_text())?;
                let embs = prompts
                    .iter()
                    .map(|p| pc.plugin.embed(p))
                    .collect::<Result<Vec<_>>>()?;
                let len = embs.iter().map(Mat::nrows).max().unwrap_or(1);
                let d = pc.plugin.dim();
                let mut stacked = Mat::zeros((prompts.len() * len, d));
                for (b, e) in embs.iter().enumerate() {
                    stacked
                        .slice_mut(ndarray::s![b * len..b * len + e.nrows(), ..])
                        .assign(e);
                }
                let x = g.input(stacked);
                let var = linear(g, &pc.head, HEAD_PREFIX, x);
                Ok(Context {
                    var,
                    lens: embs.iter().map(Mat::nrows).collect(),
                    len,
                })
            }
        }
    }

    /// Context values (no gradients), `[batch*len, d_text]`.
    pub fn context_values(&self, prompts: &[String]) -> Result<(Mat, Vec<usize>)> {
        let mut g = Graph::new();
        let ctx = self.condition(&mut g, prompts)?;
        Ok((g.value(ctx.var).clone(), ctx.lens))
    }

    /// Every parameter of the pipeline (VAE, builtin encoder, U-Net, head).
    pub fn all_params(&self) -> BTreeMap<&'static str, &ParamSet> {
        let mut m = BTreeMap::new();
        m.insert("vae", &self.vae.params);
        m.insert("text_encoder", &self.text_encoder.params);
        m.insert("unet", &self.unet.params);
        if let Some(p) = &self.plugin {
            m.insert("projection", &p.head);
        }
        m
    }

    /// Content hash per component.
    pub fn component_hashes(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> = self
            .all_params()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.hash()))
            .collect();
        if let Some(p) = &self.plugin {
            m.insert("plugin".into(), p.plugin.fingerprint());
        }
        m
    }

    /// Guided noise prediction for a batch of latents at one timestep.
    fn predict_guided(
        &self,
        x: &[LatentTensor],
        t: i64,
        cond: &(Mat, Vec<usize>),
        uncond: Option<&(Mat, Vec<usize>)>,
        scale: f64,
    ) -> Result<Vec<LatentTensor>> {
        let (c, h, w) = self.latent_shape();
        let n = x.len();
        let t = t.max(0) as f64;
        let rows = LatentTensor::to_rows(x);
        match uncond {
            None => {
                let grid = Grid { batch: n, h, w };
                let out = self.unet.predict(&rows, grid, &vec![t; n], &cond.0, &cond.1)?;
                Ok(LatentTensor::from_rows(&out, h, w))
            }
            Some(u) => {
                let both = ndarray::concatenate(ndarray::Axis(0), &[rows.view(), rows.view()])
                    .expect("same width");
                let (ctx, lens) = stack_contexts(cond, u, self.d_text());
                let grid = Grid { batch: 2 * n, h, w };
                let out = self.unet.predict(&both, grid, &vec![t; 2 * n], &ctx, &lens)?;
                let all = LatentTensor::from_rows(&out, h, w);
                debug_assert_eq!(all.len(), 2 * n);
                debug_assert_eq!(all[0].channels, c);
                Ok((0..n).map(|b| guided_noise(&all[b], &all[n + b], scale)).collect())
            }
        }
    }

    /// Samples latents for `prompts` (one per prompt, sample `b` seeded by
    /// `seeds[b]`) and decodes them. `trace` receives each step's guided noise.
    pub fn generate_batch(
        &self,
        prompts: &[String],
        config: &SamplerConfig,
        seeds: &[u64],
        mut trace: Option<&mut Trace>,
    ) -> Result<Vec<GrayImage>> {
        if prompts.len() != seeds.len() {
            return Err(Error::invalid("one seed per prompt is required"));
        }
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let mut session = SamplerSession::new(*config, &self.schedule, seeds.to_vec())?;
        let cond = self.context_values(prompts)?;
        let uncond = if config.guidance_scale == 1.0 {
            None
        } else {
            Some(self.context_values(&vec![String::new(); prompts.len()])?)
        };
        let mut x = session.initial_latents(self.latent_shape())?;
        for i in 0..session.len() {
            let t = session.timestep(i)?;
            let eps = self.predict_guided(&x, t, &cond, uncond.as_ref(), config.guidance_scale)?;
            x = session.step(i, &x, &eps)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(eps);
            }
        }
        self.vae.decode(&x)
    }

    /// One image for `prompt`, seeded by `config.seed`.
    pub fn generate(&self, prompt: &str, config: &SamplerConfig) -> Result<GrayImage> {
        Ok(self
            .generate_batch(&[prompt.to_string()], config, &[config.seed], None)?
            .remove(0))
    }

    /// Generates in chunks to bound memory; seeds derive from `config.seed` and the index.
    pub fn generate_many(&self, prompts: &[String], config: &SamplerConfig, chunk: usize) -> Result<Vec<GrayImage>> {
        let mut out = Vec::with_capacity(prompts.len());
        for (k, part) in prompts.chunks(chunk.max(1)).enumerate() {
            let seeds: Vec<u64> = (0..part.len())
                .map(|i| sample_seed(config.seed, (k * chunk.max(1) + i) as u64))
                .collect();
            out.extend(self.generate_batch(part, config, &seeds, None)?);
        }
        Ok(out)
    }
}

/// Seed of the `index`-th sample of a generation run.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index + 1);
    r.gen()
}

/// Stacks two context batches, padding both to the longer sequence length.
fn stack_contexts(a: &(Mat, Vec<usize>), b: &(Mat, Vec<usize>), d: usize) -> (Mat, Vec<usize>) {
    let la = a.0.nrows() / a.1.len();
    let lb = b.0.nrows() / b.1.len();
    let len = la.max(lb);
    let n = a.1.len() + b.1.len();
    let mut out = Mat::zeros((n * len, d));
    for (src, l, offset) in [(&a.0, la, 0), (&b.0, lb, a.1.len())] {
        for s in 0..src.nrows() / l {
            out.slice_mut(ndarray::s![(offset + s) * len..(offset + s) * len + l, ..])
                .assign(&src.slice(ndarray::s![s * l..(s + 1) * l, ..]));
        }
    }
    let lens = a.1.iter().chain(&b.1).copied().collect();
    (out, lens)
}

/// Seed the stock plugins are built with when referenced by id.
pub const PLUGIN_SEED: u64 = 0x0bad_5eed;

impl Pipeline {
    /// Conditions on `plugin` from now on, with a fresh projection head.
    pub fn set_plugin(&mut self, plugin: Arc<dyn TextPlugin>, seed: u64) -> Result<()> {
        if plugin.max_tokens() != self.max_tokens() {
            return Err(Error::Contract(format!(
                "plugin {} accepts {} tokens but the pipeline limit is {}",
                plugin.id(),
                plugin.max_tokens(),
                self.max_tokens()
            )));
        }
        self.plugin = Some(PluginConditioning::new(plugin, self.d_text(), seed)?);
        Ok(())
    }
}

/// Replaces the text path with a frozen plugin and a fresh projection head.
/// The builtin encoder is kept and can be restored with [`restore_builtin_encoder`].
pub fn swap_text_encoder(mut pipeline: Pipeline, plugin: Arc<dyn TextPlugin>, seed: u64) -> Result<Pipeline> {
    pipeline.set_plugin(plugin, seed)?;
    Ok(pipeline)
}

/// Drops the plugin, conditioning on the builtin encoder again.
pub fn restore_builtin_encoder(mut pipeline: Pipeline) -> Pipeline {
    pipeline.plugin = None;
    pipeline
}
