//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::FineTuneConfig;
use crate::correctness::ClassifierConfig;
use crate::data::CorpusSpec;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::nn::VaeTrainConfig;
use crate::pipeline::PipelineConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    FinetuneGrid,
    EvalSuite,
    AugmentationStudy,
    ForgettingProbe,
    CorpusBuild,
}

/// How the shared starting pipeline is built before any fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Autoencoder fit on medical and general images together.
    pub vae: VaeTrainConfig,
    pub general_pairs: usize,
    /// Standard-objective steps on the general corpus (U-Net and text encoder).
    pub general_steps: usize,
    pub general_lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vae: VaeTrainConfig {
                steps: 1500,
                ..Default::default()
            },
            general_pairs: 1000,
            general_steps: 300,
            general_lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Output widths of the seeded random-projection extractors.
    pub projection_dims: Vec<usize>,
    /// Also compute FID in the oracle classifier's feature space.
    pub classifier_features: bool,
    /// Test prompts used for FID and AUROC; 0 uses all of them.
    pub max_prompts: usize,
    pub diversity_prompts: usize,
    pub samples_per_prompt: usize,
    pub classify: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            projection_dims: vec![64],
            classifier_features: true,
            max_prompts: 0,
            diversity_prompts: 16,
            samples_per_prompt: 4,
            classify: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_steps: usize,
    /// Snapshot interval in steps; step 0 is always included.
    pub every: usize,
    pub general_captions: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_steps: 200,
            every: 50,
            general_captions: 400,
        }
    }
}

/// One row of an augmentation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugSplit {
    pub name: String,
    pub real: usize,
    pub synth: usize,
    /// Generator checkpoint for the synthetic part; relative paths resolve
    /// against the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPlan {
    pub splits: Vec<AugSplit>,
    pub classifier: ClassifierConfig,
    /// Index of the row deltas are measured against.
    pub baseline: usize,
    /// Share of the real training pool held out for early stopping.
    pub val_fraction: f64,
}

/// Reference values for the study's baseline and best rows.
pub const REFERENCE_BASELINE_AUROC: f64 = 0.73;
pub const REFERENCE_BEST_AUROC: f64 = 0.84;

impl Default for AugmentationPlan {
    fn default() -> Self {
        let ck = || Some(PathBuf::from("generator.safetensors"));
        let split = |name: &str, real, synth, checkpoint| AugSplit {
            name: name.to_string(),
            real,
            synth,
            checkpoint,
        };
        Self {
            splits: vec![
                split("R", 150, 0, None),
                split("S", 0, 150, ck()),
                split("S x5", 0, 600, ck()),
                split("R/S", 150, 150, ck()),
                split("R/S x5", 150, 600, ck()),
                split("R large", 600, 0, None),
                split("R/S large", 600, 600, ck()),
            ],
            classifier: ClassifierConfig::default(),
            baseline: 0,
            val_fraction: 0.2,
        }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() {
            return Err(Error::Config("augmentation.splits is empty".into()));
        }
        for s in &self.splits {
            if s.real == 0 && s.synth == 0 {
                return Err(Error::Config(format!("augmentation split {:?} has no data", s.name)));
            }
            if s.synth > 0 && s.checkpoint.is_none() {
                return Err(Error::Config(format!(
                    "augmentation split {:?} needs a checkpoint for its synthetic data",
                    s.name
                )));
            }
        }
        if self.baseline >= self.splits.len() {
            return Err(Error::Config(format!("augmentation.baseline {} out of range", self.baseline)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("augmentation.val_fraction must lie in [0, 1)".into()));
        }
        self.classifier.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything an experiment run reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub pipeline: PipelineConfig,
    pub pretrain: PretrainConfig,
    /// Named fine-tuning presets for the grid.
    pub presets: Vec<String>,
    /// Inline fine-tuning configurations, run after the presets.
    pub finetune: Vec<FineTuneConfig>,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub classifier: ClassifierConfig,
    pub augmentation: AugmentationPlan,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSpec::default(),
            pipeline: PipelineConfig::default(),
            pretrain: PretrainConfig::default(),
            presets: vec!["original".into(), "rnd-unet-60k".into()],
            finetune: Vec::new(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            classifier: ClassifierConfig::default(),
            augmentation: AugmentationPlan::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are configuration errors naming the key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Checks everything that does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.corpus.validate().map_err(cfg_err)?;
        self.pipeline.validate().map_err(cfg_err)?;
        for name in &self.presets {
            FineTuneConfig::preset(name).map_err(|_| Error::Config(format!("unknown preset {name:?}")))?;
        }
        for f in &self.finetune {
            f.validate().map_err(cfg_err)?;
        }
        if self.sampler.num_inference_steps == 0 || self.sampler.num_inference_steps > self.pipeline.schedule.num_train_timesteps {
            return Err(Error::Config("sampler.num_inference_steps out of range".into()));
        }
        if self.probe.every == 0 {
            return Err(Error::Config("probe.every must be positive".into()));
        }
        if self.eval.samples_per_prompt == 1 {
            return Err(Error::Config("eval.samples_per_prompt must be 0 or at least 2".into()));
        }
        self.classifier.validate().map_err(cfg_err)?;
        self.augmentation.validate()
    }

    /// Creates the output directory and checks it is writable.
    pub fn prepare_output(&self) -> Result<PathBuf> {
        let dir = self.output_dir.clone();
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::Config(format!("output_dir {} is not writable: {e}", dir.display())))?;
        let probe = dir.join(".write-test");
        std::fs::write(&probe, b"")
            .map_err(|e| Error::Config(format!("output_dir {} is not writable: {e}", dir.display())))?;
        let _ = std::fs::remove_file(probe);
        Ok(dir)
    }

    /// Fine-tuning configurations of the grid: presets then inline entries.
    pub fn grid_configs(&self) -> Result<Vec<FineTuneConfig>> {
        let mut out = Vec::new();
        for name in &self.presets {
            out.push(FineTuneConfig::preset(name)?);
        }
        out.extend(self.finetune.iter().cloned());
        Ok(out)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }
}
