//! Fidelity and diversity: Fréchet distance over pluggable feature
//! extractors, MS-SSIM, intra-prompt diversity and token-length binning.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::params::init_weight;

/// Feature rows of one image set, tagged with the extractor that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub matrix: Mat,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(matrix: Mat, extractor_id: impl Into<String>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix has non-finite entries"));
        }
        Ok(Self {
            matrix,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"LLFS";
pub const FEATURE_FILE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// Writes the binary feature file: magic, version, extractor id, n, d, dtype
/// tag, then the matrix as little-endian f32 in row order.
pub fn write_feature_set(path: &Path, fs: &FeatureSet) -> Result<()> {
    let mut out = Vec::with_capacity(32 + fs.matrix.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_FILE_VERSION.to_le_bytes());
    let id = fs.extractor_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(fs.n() as u64).to_le_bytes());
    out.extend_from_slice(&(fs.d() as u64).to_le_bytes());
    out.push(DTYPE_F32);
    for v in fs.matrix.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_feature_set(path: &Path) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Format("truncated feature file".into()))?;
        at += n;
        Ok(s)
    };
    if take(4)? != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != FEATURE_FILE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let id_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if take(1)?[0] != DTYPE_F32 {
        return Err(Error::Format("unsupported feature dtype".into()));
    }
    let body = take(n * d * 4)?;
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let m = Mat::from_shape_vec((n, d), vals).map_err(|e| Error::Format(e.to_string()))?;
    FeatureSet::new(m, id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Array1<f64>,
    pub sigma: Mat,
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(fs: &FeatureSet) -> Result<GaussianStats> {
    let n = fs.n();
    if n < 2 {
        return Err(Error::invalid(format!("fitting moments needs at least 2 samples, got {n}")));
    }
    let mu = fs.matrix.mean_axis(Axis(0)).expect("nonempty");
    let centered = &fs.matrix - &mu;
    let mut sigma = centered.t().dot(&centered) / (n - 1) as f64;
    // exact symmetry regardless of summation order
    let sym = (&sigma + &sigma.t()) * 0.5;
    sigma.assign(&sym);
    Ok(GaussianStats { mu, sigma })
}

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[[r, c]])
}

/// Tolerance on negative eigenvalues and on a negative trace residue.
const NEG_TOL: f64 = 1e-6;

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.dim() != (d, d) || b.sigma.dim() != (d, d) {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.mu.len(),
            b.mu.len()
        )));
    }
    let dm = &a.mu - &b.mu;
    let mean_term = dm.dot(&dm);

    let ea = sym_eigen(to_na(&a.sigma))?;
    let scale = ea.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if ea.eigenvalues.iter().any(|&v| v < -NEG_TOL * scale) {
        return Err(Error::Numerical("covariance is not positive semi-definite".into()));
    }
    let root_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&root_vals) * ea.eigenvectors.transpose();
    let m = &sqrt_a * to_na(&b.sigma) * &sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let em = sym_eigen(m)?;
    let mscale = em.eigenvalues.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    if em.eigenvalues.iter().any(|&v| v < -NEG_TOL * mscale) {
        return Err(Error::Numerical("product covariance has a negative eigenvalue".into()));
    }
    let tr_root: f64 = em.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr_a: f64 = a.sigma.diag().sum();
    let tr_b: f64 = b.sigma.diag().sum();
    let total = mean_term + tr_a + tr_b - 2.0 * tr_root;
    if total < 0.0 {
        if total < -NEG_TOL {
            return Err(Error::Numerical(format!("negative Fréchet distance {total}")));
        }
        return Ok(0.0);
    }
    Ok(total)
}

/// Fréchet distance between two feature sets from the same extractor.
pub fn fid(real: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    if real.extractor_id != generated.extractor_id {
        return Err(Error::invalid(format!(
            "feature sets come from different extractors ({} vs {})",
            real.extractor_id, generated.extractor_id
        )));
    }
    frechet_distance(&fit_gaussian(real)?, &fit_gaussian(generated)?)
}

/// Maps images to fixed-width feature vectors.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// `(images.len(), dim)` features.
    fn extract(&self, images: &[GrayImage]) -> Result<Mat>;
}

/// Seeded random projection of (resized) pixels followed by `tanh`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    id: String,
    side: usize,
    weights: Mat,
}

impl RandomProjection {
    pub fn new(side: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            id: format!("random-projection-{dim}-{seed}"),
            side,
            weights: init_weight(&mut rng, side * side, dim, 1.0),
        }
    }
}

impl FeatureExtractor for RandomProjection {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn extract(&self, images: &[GrayImage]) -> Result<Mat> {
        let s = self.side;
        let mut x = Mat::zeros((images.len(), s * s));
        for (i, img) in images.iter().enumerate() {
            let img = if img.dims() == (s, s) { img.clone() } else { img.resize(s, s) };
            x.row_mut(i).assign(&Array1::from(img.to_vec()));
        }
        Ok((x - 0.5).dot(&self.weights).mapv(f64::tanh))
    }
}

/// Extractors addressable by id.
#[derive(Clone, Default)]
pub struct ExtractorRegistry {
    extractors: BTreeMap<String, Arc<dyn FeatureExtractor>>,
}

impl ExtractorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, e: Arc<dyn FeatureExtractor>) {
        self.extractors.insert(e.id().to_string(), e);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn FeatureExtractor>> {
        self.extractors
            .get(id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unknown feature extractor {id:?}")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.extractors.keys().cloned().collect()
    }
}

pub fn extract_features(images: &[GrayImage], registry: &ExtractorRegistry, id: &str) -> Result<FeatureSet> {
    let e = registry.get(id)?;
    let m = e.extract(images)?;
    if m.dim() != (images.len(), e.dim()) {
        return Err(Error::Contract(format!(
            "extractor {id} returned {:?}, declared width {}",
            m.dim(),
            e.dim()
        )));
    }
    FeatureSet::new(m, id)
}

/// Canonical weights of the five-scale structural similarity.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    /// Per-scale exponents; their count is the number of scales.
    pub weights: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub data_range: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            weights: MS_SSIM_WEIGHTS.to_vec(),
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl MsSsimConfig {
    /// The first `scales` canonical weights, renormalised to sum to one.
    pub fn with_scales(scales: usize) -> Result<Self> {
        if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
            return Err(Error::invalid(format!("scales must be in 1..=5, got {scales}")));
        }
        let w = &MS_SSIM_WEIGHTS[..scales];
        let total: f64 = w.iter().sum();
        Ok(Self {
            weights: w.iter().map(|v| v / total).collect(),
            ..Self::default()
        })
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    /// Smallest side length accepted: two pixels must survive at the coarsest scale.
    pub fn min_side(&self) -> usize {
        1 << self.scales()
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Index folding for symmetric (edge-repeating) padding, valid for any offset.
fn fold(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = 2 * n;
    let m = i.rem_euclid(p);
    (if m < n { m } else { p - 1 - m }) as usize
}

/// Separable Gaussian filter with symmetric padding; output has the input's size.
fn blur(x: &Mat, w: &[f64]) -> Mat {
    let (h, wd) = x.dim();
    let r = (w.len() / 2) as isize;
    let mut tmp = Mat::zeros((h, wd));
    for y in 0..h {
        for xx in 0..wd {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * x[[y, fold(xx as isize + k as isize - r, wd)]];
            }
            tmp[[y, xx]] = acc;
        }
    }
    let mut out = Mat::zeros((h, wd));
    for y in 0..h {
        for xx in 0..wd {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * tmp[[fold(y as isize + k as isize - r, h), xx]];
            }
            out[[y, xx]] = acc;
        }
    }
    out
}

/// Mean contrast-structure term and mean SSIM (luminance times
/// contrast-structure, per pixel) at one scale.
fn ssim_terms(a: &Mat, b: &Mat, cfg: &MsSsimConfig, w: &[f64]) -> (f64, f64) {
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mu_a = blur(a, w);
    let mu_b = blur(b, w);
    let saa = blur(&(a * a), w) - &mu_a * &mu_a;
    let sbb = blur(&(b * b), w) - &mu_b * &mu_b;
    let sab = blur(&(a * b), w) - &mu_a * &mu_b;
    let n = a.len() as f64;
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * sab[[i, j]] + c2) / (saa[[i, j]] + sbb[[i, j]] + c2);
            ssim_sum += l * cs;
            cs_sum += cs;
        }
    }
    (cs_sum / n, ssim_sum / n)
}

fn pool2(x: &Mat) -> Mat {
    let (h, w) = (x.nrows() / 2, x.ncols() / 2);
    Mat::from_shape_fn((h, w), |(i, j)| {
        (x[[2 * i, 2 * j]] + x[[2 * i + 1, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j + 1]]) / 4.0
    })
}

/// Multi-scale structural similarity in `[0, 1]`.
pub fn ms_ssim_with(a: &GrayImage, b: &GrayImage, cfg: &MsSsimConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if cfg.weights.is_empty() || cfg.window == 0 || cfg.window % 2 == 0 || cfg.sigma <= 0.0 {
        return Err(Error::invalid("MS-SSIM needs an odd window, positive sigma and at least one scale"));
    }
    let (h, w) = a.dims();
    let min = cfg.min_side();
    if h.min(w) < min {
        return Err(Error::invalid(format!(
            "image side {} is below the minimum of {min} for {} scales",
            h.min(w),
            cfg.scales()
        )));
    }
    let win = gaussian_window(cfg.window, cfg.sigma);
    let mut x = a.pixels.clone();
    let mut y = b.pixels.clone();
    let mut out = 1.0;
    let last = cfg.scales() - 1;
    for (s, wt) in cfg.weights.iter().enumerate() {
        let (cs, ssim) = ssim_terms(&x, &y, cfg, &win);
        let term = if s == last { ssim } else { cs };
        out *= term.max(0.0).powf(*wt);
        if s < last {
            x = pool2(&x);
            y = pool2(&y);
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

pub fn ms_ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ms_ssim_with(a, b, &MsSsimConfig::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub mean: f64,
    /// Population standard deviation over pairs.
    pub std: f64,
    pub pairs: usize,
}

/// Mean and spread of `metric` over every unordered pair of `samples`.
pub fn pairwise_stats<T>(samples: &[T], mut metric: impl FnMut(&T, &T) -> Result<f64>) -> Result<DiversityStats> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {}", samples.len())));
    }
    let mut vals = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            vals.push(metric(&samples[i], &samples[j])?);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(DiversityStats {
        mean,
        std: var.sqrt(),
        pairs: vals.len(),
    })
}

/// Pairwise MS-SSIM among samples of one prompt (lower mean, more diverse).
pub fn intra_prompt_diversity(samples: &[GrayImage]) -> Result<DiversityStats> {
    pairwise_stats(samples, ms_ssim)
}

/// Samples generated for one prompt, with the prompt's token count.
#[derive(Clone, Debug)]
pub struct PromptGroup {
    pub token_count: usize,
    pub samples: Vec<GrayImage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityBin {
    pub bin_lo: usize,
    pub bin_hi: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    /// Fewer than two groups: the interval collapses to the mean.
    pub degenerate: bool,
}

pub const TOKEN_BIN_WIDTH: usize = 10;

/// Bins `(token_count, group_mean)` pairs into `[1,10]`, `[11,20]`, ... with
/// a normal-approximation 95% interval over the groups of each bin.
pub fn bin_by_token_length(groups: &[(usize, f64)]) -> Result<Vec<DiversityBin>> {
    let mut bins: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(count, mean) in groups {
        if count == 0 {
            return Err(Error::invalid("token count must be positive"));
        }
        bins.entry((count - 1) / TOKEN_BIN_WIDTH).or_default().push(mean);
    }
    Ok(bins
        .into_iter()
        .map(|(b, vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let half = if n < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * (var / n as f64).sqrt()
            };
            DiversityBin {
                bin_lo: b * TOKEN_BIN_WIDTH + 1,
                bin_hi: (b + 1) * TOKEN_BIN_WIDTH,
                mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
                n,
                degenerate: n < 2,
            }
        })
        .collect())
}

pub fn diversity_by_token_length(groups: &[PromptGroup]) -> Result<Vec<DiversityBin>> {
    let means = groups
        .iter()
        .map(|g| Ok((g.token_count, intra_prompt_diversity(&g.samples)?.mean)))
        .collect::<Result<Vec<_>>>()?;
    bin_by_token_length(&means)
}

/// `bin_lo,bin_hi,mean,ci_lo,ci_hi,n` CSV.
pub fn diversity_bins_csv(bins: &[DiversityBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lo", "bin_hi", "mean", "ci_lo", "ci_hi", "n"])?;
    for b in bins {
        w.write_record([
            b.bin_lo.to_string(),
            b.bin_hi.to_string(),
            format!("{:.6}", b.mean),
            format!("{:.6}", b.ci_lo),
            format!("{:.6}", b.ci_hi),
            b.n.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Features of images grouped by a key, for per-group FID.
pub fn group_features(fs: &FeatureSet, keys: &[String]) -> Result<HashMap<String, FeatureSet>> {
    if keys.len() != fs.n() {
        return Err(Error::invalid("one key per feature row is required"));
    }
    let mut rows: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        rows.entry(k.clone()).or_default().push(i);
    }
    rows.into_iter()
        .map(|(k, idx)| {
            let m = fs.matrix.select(Axis(0), &idx);
            Ok((k, FeatureSet::new(m, fs.extractor_id.clone())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats(mu: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mu: array![mu],
            sigma: array![[var]],
        }
    }

    #[test]
    fn fit_gaussian_hand_example() {
        let fs = FeatureSet::new(array![[0.0, 0.0], [2.0, 0.0]], "x").unwrap();
        let g = fit_gaussian(&fs).unwrap();
        assert_eq!(g.mu, array![1.0, 0.0]);
        assert_eq!(g.sigma, array![[2.0, 0.0], [0.0, 0.0]]);
        let one = FeatureSet::new(array![[1.0, 2.0]], "x").unwrap();
        assert!(fit_gaussian(&one).is_err());
    }

    #[test]
    fn frechet_one_dimensional_closed_forms() {
        assert!((frechet_distance(&stats(0.0, 1.0), &stats(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-8);
        assert!((frechet_distance(&stats(0.0, 1.0), &stats(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
        assert!(frechet_distance(&stats(0.3, 2.0), &stats(0.3, 2.0)).unwrap() < 1e-8);
        let wide = GaussianStats {
            mu: array![0.0, 0.0],
            sigma: Mat::eye(2),
        };
        assert!(matches!(frechet_distance(&stats(0.0, 1.0), &wide), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ms_ssim_self_is_one_and_small_images_are_rejected() {
        let img = GrayImage::from_fn(32, 32, |(y, x)| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert!((ms_ssim(&img, &img).unwrap() - 1.0).abs() < 1e-6);
        let tiny = GrayImage::zeros(16, 16);
        let err = ms_ssim(&tiny, &tiny).unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
    }

    #[test]
    fn stub_pairwise_values() {
        let vals = [1.0, 0.5, 0.5, 0.5, 0.5, 0.0];
        let mut k = 0;
        let s = pairwise_stats(&[0, 1, 2, 3], |_, _| {
            k += 1;
            Ok(vals[k - 1])
        })
        .unwrap();
        assert_eq!(s.pairs, 6);
        assert_eq!(s.mean, 0.5);
    }

    #[test]
    fn bins_and_degenerate_intervals() {
        let bins = bin_by_token_length(&[(5, 0.2), (15, 0.4), (12, 0.6)]).unwrap();
        assert_eq!((bins[0].bin_lo, bins[0].bin_hi, bins[0].n), (1, 10, 1));
        assert!(bins[0].degenerate && bins[0].ci_lo == bins[0].ci_hi);
        assert_eq!((bins[1].bin_lo, bins[1].n), (11, 2));
        assert!((bins[1].mean - 0.5).abs() < 1e-15);
        assert!(bin_by_token_length(&[]).unwrap().is_empty());
    }
}
