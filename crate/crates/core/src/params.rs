//! Named parameter storage, snapshots, hashing and the AdamW optimizer.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;

/// An ordered collection of named parameter tensors.
///
/// Names are fully qualified (`"unet.down.conv1.w"`) so sets from different
/// components can be merged into one checkpoint without collisions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.tensors {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names whose tensors differ bitwise between `self` and `other`.
    pub fn diff(&self, other: &ParamSet) -> Vec<String> {
        let mut out = Vec::new();
        for (name, m) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if bitwise_eq(m, o) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.tensors.keys() {
            if !self.tensors.contains_key(name) {
                out.push(name.clone());
            }
        }
        out
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

pub fn bitwise_eq(a: &Mat, b: &Mat) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Scaled-normal initialiser for a `[fan_in, fan_out]` weight.
pub fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Mat {
    let std = gain / (fan_in as f64).sqrt();
    Mat::from_shape_simple_fn((fan_in, fan_out), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

pub fn init_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Which parts of a tensor an optimizer may touch.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    All,
    /// Only the listed rows (used for a single new token embedding).
    Rows(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Decoupled-weight-decay Adam with a constant learning rate.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Only names present in `trainable` are modified; a
    /// gradient for any other parameter is ignored.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &HashMap<String, Mat>,
        trainable: &BTreeMap<String, Trainable>,
    ) {
        self.step_many(&mut [params], grads, trainable);
    }

    /// One update over several parameter sets sharing a single step count.
    pub fn step_many(
        &mut self,
        sets: &mut [&mut ParamSet],
        grads: &HashMap<String, Mat>,
        trainable: &BTreeMap<String, Trainable>,
    ) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, mode) in trainable {
            let Some(g) = grads.get(name) else { continue };
            let Some(p) = sets.iter_mut().find_map(|s| s.get_mut(name)) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Mat::zeros(p.dim()), Mat::zeros(p.dim())));
            let rows: Vec<usize> = match mode {
                Trainable::All => (0..p.nrows()).collect(),
                Trainable::Rows(r) => r.clone(),
            };
            for r in rows {
                for col in 0..p.ncols() {
                    let gi = g[[r, col]];
                    let mi = c.beta1 * m[[r, col]] + (1.0 - c.beta1) * gi;
                    let vi = c.beta2 * v[[r, col]] + (1.0 - c.beta2) * gi * gi;
                    m[[r, col]] = mi;
                    v[[r, col]] = vi;
                    let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                    let w = p[[r, col]];
                    p[[r, col]] = w - c.lr * (update + c.weight_decay * w);
                }
            }
        }
    }
}

/// One finite-difference comparison from [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares analytic gradients against central differences of `f` for
/// `samples` scalar parameters (tensor chosen uniformly, then entry).
pub fn grad_check<R: Rng, F: FnMut(&ParamSet) -> f64>(
    ps: &ParamSet,
    analytic: &HashMap<String, Mat>,
    samples: usize,
    h: f64,
    rng: &mut R,
    mut f: F,
) -> Vec<GradCheck> {
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let mut probe = ps.clone();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let name = &names[rng.gen_range(0..names.len())];
        let (rows, cols) = ps.get(name).dim();
        let index = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let orig = ps.get(name)[index];
        probe.get_mut(name).expect("name")[index] = orig + h;
        let up = f(&probe);
        probe.get_mut(name).expect("name")[index] = orig - h;
        let down = f(&probe);
        probe.get_mut(name).expect("name")[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map_or(0.0, |g| g[index]);
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        out.push(GradCheck {
            name: name.clone(),
            index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    out
}
