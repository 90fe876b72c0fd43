//! Multi-label image classifier used as the correctness oracle and as the
//! downstream model of the augmentation study.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{auroc_table, preprocess_for_classifier, toy_class_names, PreprocessConfig};
use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::fidelity::FeatureExtractor;
use crate::image::GrayImage;
use crate::nn::layers::{init_linear, linear};
use crate::params::{AdamW, AdamWConfig, ParamSet, Trainable};

pub const CLASSIFIER_ID: &str = "oracle-classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub side: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Std of Gaussian pixel noise added to training inputs.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            side: 32,
            hidden: vec![128, 64],
            classes: 6,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 64,
            max_epochs: 60,
            patience: 15,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.classes == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("classifier sizes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("classifier needs at least one non-empty hidden layer"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.noise_std < 0.0 {
            return Err(Error::invalid("bad classifier optimiser settings"));
        }
        Ok(())
    }
}

/// Anything that can be fit on labelled images and emit per-class probabilities.
pub trait MultiLabelClassifier {
    fn fit(&mut self, train: &[GrayImage], targets: &Mat, val: Option<(&[GrayImage], &Mat)>) -> Result<FitLog>;
    /// `(images.len(), classes)` probabilities.
    fn predict_proba(&self, images: &[GrayImage]) -> Result<Mat>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epoch_losses: Vec<f64>,
    pub val_auroc: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// MLP over preprocessed pixels with sigmoid outputs.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    pub config: ClassifierConfig,
    pub params: ParamSet,
    preprocess: PreprocessConfig,
}

impl OracleClassifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut fan_in = config.side * config.side;
        for (i, h) in config.hidden.iter().enumerate() {
            init_linear(&mut params, &mut rng, &format!("cls.h{i}"), fan_in, *h, 2f64.sqrt());
            fan_in = *h;
        }
        init_linear(&mut params, &mut rng, "cls.out", fan_in, config.classes, 1.0);
        let preprocess = PreprocessConfig::toy(config.side);
        Ok(Self {
            config,
            params,
            preprocess,
        })
    }

    fn inputs(&self, images: &[GrayImage]) -> Mat {
        let s = self.config.side;
        let mut x = Mat::zeros((images.len(), s * s));
        for (i, img) in images.iter().enumerate() {
            let img = if img.dims() == (s, s) {
                img.clone()
            } else {
                preprocess_for_classifier(img, &self.preprocess)
            };
            for (j, v) in img.to_vec().into_iter().enumerate() {
                x[[i, j]] = v - 0.5;
            }
        }
        x
    }

    /// Returns (penultimate activations, logits).
    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let mut h = x;
        for i in 0..self.config.hidden.len() {
            let z = linear(g, &self.params, &format!("cls.h{i}"), h);
            h = g.silu(z);
        }
        let out = linear(g, &self.params, "cls.out", h);
        (h, out)
    }

    fn eval(&self, images: &[GrayImage]) -> (Mat, Mat) {
        let mut feats = Mat::zeros((images.len(), *self.config.hidden.last().unwrap()));
        let mut probs = Mat::zeros((images.len(), self.config.classes));
        for (c, chunk) in images.chunks(256).enumerate() {
            let mut g = Graph::new();
            let x = g.input(self.inputs(chunk));
            let (h, out) = self.forward(&mut g, x);
            let base = c * 256;
            for (i, row) in g.value(h).rows().into_iter().enumerate() {
                feats.row_mut(base + i).assign(&row);
            }
            for (i, row) in g.value(out).rows().into_iter().enumerate() {
                probs.row_mut(base + i).assign(&row.mapv(|z| 1.0 / (1.0 + (-z).exp())));
            }
        }
        (feats, probs)
    }

    /// Penultimate-layer activations.
    pub fn features(&self, images: &[GrayImage]) -> Mat {
        self.eval(images).0
    }

    fn macro_auroc(&self, images: &[GrayImage], targets: &Mat) -> Result<f64> {
        let probs = self.eval(images).1;
        let names = toy_class_names();
        let names: Vec<&str> = if names.len() == self.config.classes {
            names
        } else {
            vec![""; self.config.classes]
        };
        let t = auroc_table(&probs, targets, &names, None)?;
        t.macro_auroc
            .ok_or_else(|| Error::UndefinedMetric("no class in the validation set has both labels".into()))
    }
}

impl MultiLabelClassifier for OracleClassifier {
    /// Mini-batch AdamW on BCE. With a validation set, keeps the parameters of
    /// the best validation macro AUROC and stops after `patience` epochs
    /// without improvement.
    fn fit(&mut self, train: &[GrayImage], targets: &Mat, val: Option<(&[GrayImage], &Mat)>) -> Result<FitLog> {
        if train.is_empty() {
            return Err(Error::invalid("classifier training set is empty"));
        }
        if targets.dim() != (train.len(), self.config.classes) {
            return Err(Error::invalid("classifier targets have the wrong shape"));
        }
        let cfg = self.config.clone();
        let x_all = self.inputs(train);
        let weights = Mat::ones((1, cfg.classes));
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        let trainable = self.params.names().map(|n| (n.to_string(), Trainable::All)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
        let mut log = FitLog::default();
        let mut best: Option<(f64, ParamSet)> = None;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut x = x_all.select(ndarray::Axis(0), batch);
                if cfg.noise_std > 0.0 {
                    x.mapv_inplace(|v| v + noise.sample(&mut rng));
                }
                let t = targets.select(ndarray::Axis(0), batch);
                let w = Mat::from_shape_fn(t.dim(), |(_, c)| weights[[0, c]]);
                let mut g = Graph::new();
                let xv = g.input(x);
                let (_, logits) = self.forward(&mut g, xv);
                let loss = g.bce_with_logits(logits, &t, &w);
                let l = g.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::TrainingDiverged { step: epoch, loss: l });
                }
                total += l * batch.len() as f64;
                let grads = g.backward(loss).into_param_map();
                opt.step(&mut self.params, &grads, &trainable);
            }
            log.epoch_losses.push(total / train.len() as f64);
            if let Some((vi, vt)) = val {
                let score = self.macro_auroc(vi, vt)?;
                log.val_auroc.push(score);
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, self.params.clone()));
                    log.best_epoch = epoch;
                } else if epoch - log.best_epoch >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            } else {
                log.best_epoch = epoch;
            }
        }
        if let Some((_, p)) = best {
            self.params = p;
        }
        Ok(log)
    }

    fn predict_proba(&self, images: &[GrayImage]) -> Result<Mat> {
        Ok(self.eval(images).1)
    }
}

impl FeatureExtractor for OracleClassifier {
    fn id(&self) -> &str {
        CLASSIFIER_ID
    }

    fn dim(&self) -> usize {
        *self.config.hidden.last().unwrap()
    }

    fn extract(&self, images: &[GrayImage]) -> Result<Mat> {
        Ok(self.features(images))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_a_brightness_rule() {
        let imgs: Vec<GrayImage> = (0..64)
            .map(|i| GrayImage::from_fn(8, 8, |(y, _)| if i % 2 == 0 && y < 4 { 0.9 } else { 0.1 }))
            .collect();
        let t = Mat::from_shape_fn((64, 2), |(i, c)| if (i % 2 == 0) == (c == 0) { 1.0 } else { 0.0 });
        let cfg = ClassifierConfig {
            side: 8,
            hidden: vec![16],
            classes: 2,
            max_epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut c = OracleClassifier::new(cfg).unwrap();
        let log = c.fit(&imgs, &t, Some((&imgs, &t))).unwrap();
        assert_eq!(log.val_auroc[log.best_epoch], 1.0);
        let p = c.predict_proba(&imgs[..2]).unwrap();
        assert!(p[[0, 0]] > 0.5 && p[[1, 0]] < 0.5);
        assert_eq!(c.features(&imgs).ncols(), 16);
    }
}
