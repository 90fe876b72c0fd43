//! Fully connected variational autoencoder between images and latents.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{init_linear, linear};
use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::latent::LatentTensor;
use crate::params::{AdamW, AdamWConfig, ParamSet, Trainable};

pub const PREFIX: &str = "vae";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub latent_side: usize,
    pub hidden: [usize; 2],
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_channels: 4,
            latent_side: 4,
            hidden: [256, 128],
        }
    }
}

impl VaeConfig {
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_side * self.latent_side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 64,
            lr: 1e-3,
            kl_weight: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamSet,
    /// Multiplier applied to encoder means so latents have roughly unit scale.
    pub scaling_factor: f64,
}

impl Vae {
    pub fn new<R: Rng>(config: VaeConfig, rng: &mut R) -> Self {
        let [h1, h2] = config.hidden;
        let (p, z) = (config.pixels(), config.latent_dim());
        let mut ps = ParamSet::new();
        init_linear(&mut ps, rng, "vae.enc1", p, h1, 1.4);
        init_linear(&mut ps, rng, "vae.enc2", h1, h2, 1.4);
        init_linear(&mut ps, rng, "vae.mu", h2, z, 1.0);
        init_linear(&mut ps, rng, "vae.logvar", h2, z, 0.1);
        init_linear(&mut ps, rng, "vae.dec1", z, h2, 1.4);
        init_linear(&mut ps, rng, "vae.dec2", h2, h1, 1.4);
        init_linear(&mut ps, rng, "vae.dec3", h1, p, 1.0);
        Self {
            config,
            params: ps,
            scaling_factor: 1.0,
        }
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        let s = self.config.image_size;
        if img.dims() != (s, s) {
            return Err(Error::invalid(format!(
                "image {:?} does not match VAE geometry {s}x{s}",
                img.dims()
            )));
        }
        Ok(())
    }

    fn image_rows(&self, images: &[&GrayImage]) -> Result<Mat> {
        let p = self.config.pixels();
        let mut m = Mat::zeros((images.len(), p));
        for (r, img) in images.iter().enumerate() {
            self.check_image(img)?;
            for (c, v) in img.pixels.iter().enumerate() {
                m[[r, c]] = *v;
            }
        }
        Ok(m)
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let ps = &self.params;
        let h = linear(g, ps, "vae.enc1", x);
        let h = g.silu(h);
        let h = linear(g, ps, "vae.enc2", h);
        let h = g.silu(h);
        (linear(g, ps, "vae.mu", h), linear(g, ps, "vae.logvar", h))
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let ps = &self.params;
        let h = linear(g, ps, "vae.dec1", z);
        let h = g.silu(h);
        let h = linear(g, ps, "vae.dec2", h);
        let h = g.silu(h);
        let o = linear(g, ps, "vae.dec3", h);
        g.sigmoid(o)
    }

    /// Unscaled posterior means, one row per image.
    fn means(&self, images: &[&GrayImage]) -> Result<Mat> {
        let mut g = Graph::new();
        let x = g.input(self.image_rows(images)?);
        let (mu, _) = self.encode_graph(&mut g, x);
        Ok(g.value(mu).clone())
    }

    /// Deterministic encoding: scaled posterior mean.
    pub fn encode(&self, images: &[GrayImage]) -> Result<Vec<LatentTensor>> {
        let refs: Vec<&GrayImage> = images.iter().collect();
        let mu = self.means(&refs)?;
        let (c, s) = (self.config.latent_channels, self.config.latent_side);
        mu.rows()
            .into_iter()
            .map(|row| LatentTensor::new(c, s, s, row.iter().map(|v| v * self.scaling_factor).collect()))
            .collect()
    }

    pub fn decode(&self, latents: &[LatentTensor]) -> Result<Vec<GrayImage>> {
        let (c, s) = (self.config.latent_channels, self.config.latent_side);
        let mut z = Mat::zeros((latents.len(), self.config.latent_dim()));
        for (r, l) in latents.iter().enumerate() {
            if l.shape() != (c, s, s) {
                return Err(Error::invalid(format!(
                    "latent {:?} does not match VAE geometry ({c},{s},{s})",
                    l.shape()
                )));
            }
            for (k, v) in l.data.iter().enumerate() {
                z[[r, k]] = v / self.scaling_factor;
            }
        }
        let mut g = Graph::new();
        let zv = g.input(z);
        let out = self.decode_graph(&mut g, zv);
        let size = self.config.image_size;
        g.value(out)
            .rows()
            .into_iter()
            .map(|row| GrayImage::from_vec(size, size, row.to_vec()))
            .collect()
    }

    pub fn reconstruction_mse(&self, images: &[GrayImage]) -> Result<f64> {
        let rec = self.decode(&self.encode(images)?)?;
        let mut total = 0.0;
        for (a, b) in images.iter().zip(&rec) {
            total += (&a.pixels - &b.pixels).mapv(|d| d * d).mean().unwrap_or(0.0);
        }
        Ok(total / images.len().max(1) as f64)
    }

    /// Trains the autoencoder, then sets the latent scaling factor to the
    /// inverse standard deviation of the training means. Returns the loss curve.
    pub fn train(&mut self, images: &[GrayImage], cfg: &VaeTrainConfig) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::invalid("VAE training needs images"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        let trainable = self
            .params
            .names()
            .map(|n| (n.to_string(), Trainable::All))
            .collect();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(cfg.steps);
        let z_dim = self.config.latent_dim();
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(images.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&images[order[cursor]]);
                cursor += 1;
            }
            let x_val = self.image_rows(&batch)?;
            let eps = Mat::from_shape_simple_fn((batch.len(), z_dim), || rng.sample(StandardNormal));
            let mut g = Graph::new();
            let x = g.input(x_val);
            let (mu, logvar) = self.encode_graph(&mut g, x);
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let e = g.input(eps);
            let noise = g.mul(std, e);
            let z = g.add(mu, noise);
            let rec = self.decode_graph(&mut g, z);
            let rec_loss = g.mse(rec, x);
            // KL(q || N(0, I)) per latent entry: 0.5 * (mu² + e^lv - lv - 1)
            let n = (batch.len() * z_dim) as f64;
            let mu2 = g.mean_square(mu);
            let ev = g.exp(logvar);
            let ev_sum = g.sum(ev);
            let ev_mean = g.scale(ev_sum, 1.0 / n);
            let lv_sum = g.sum(logvar);
            let lv_mean = g.scale(lv_sum, 1.0 / n);
            let a = g.add(mu2, ev_mean);
            let kl = g.sub(a, lv_mean);
            let kl = g.scale(kl, 0.5 * cfg.kl_weight);
            let loss = g.add(rec_loss, kl);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: value });
            }
            losses.push(g.scalar(rec_loss));
            let grads = g.backward(loss).into_param_map();
            opt.step(&mut self.params, &grads, &trainable);
        }
        let refs: Vec<&GrayImage> = images.iter().collect();
        let mut all = Vec::new();
        for chunk in refs.chunks(512) {
            all.extend(self.means(chunk)?.iter().copied());
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        self.scaling_factor = 1.0 / var.sqrt().max(1e-8);
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_degenerate_input() {
        let vae = Vae::new(VaeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let img = GrayImage::zeros(32, 32);
        let z = vae.encode(std::slice::from_ref(&img)).unwrap();
        assert_eq!(z[0].shape(), (4, 4, 4));
        assert!(z[0].is_finite());
        let back = vae.decode(&z).unwrap();
        assert_eq!(back[0].dims(), img.dims());
        assert!(back[0].pixels.iter().all(|v| v.is_finite()));
        assert!(vae.encode(&[GrayImage::zeros(16, 32)]).is_err());
    }
}
