//! Nearest-neighbour clustering score of text embeddings and its evolution
//! over training checkpoints.

use serde::{Deserialize, Serialize};

use super::retrieval::rank_by_cosine;
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::TextEncoder;

pub const PROBE_NEIGHBOURS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    /// Percent (0-100) per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub macro_score: f64,
}

/// For every report, the share of its 10 cosine neighbours (self excluded)
/// positive for each class the report is positive for, averaged per class
/// and scaled to 0-100. `labels` is a binary `(n, classes)` matrix.
pub fn chexpert_at_10(embeddings: &Mat, labels: &Mat) -> Result<ProbeScore> {
    let n = embeddings.nrows();
    if n < PROBE_NEIGHBOURS + 1 {
        return Err(Error::invalid(format!(
            "need at least {} reports, got {n}",
            PROBE_NEIGHBOURS + 1
        )));
    }
    if labels.nrows() != n {
        return Err(Error::invalid("embedding and label counts differ"));
    }
    let classes = labels.ncols();
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for i in 0..n {
        let positive: Vec<usize> = (0..classes).filter(|c| labels[[i, *c]] > 0.5).collect();
        if positive.is_empty() {
            continue;
        }
        let neigh: Vec<usize> = rank_by_cosine(embeddings.row(i), embeddings)?
            .into_iter()
            .filter(|j| *j != i)
            .take(PROBE_NEIGHBOURS)
            .collect();
        for c in positive {
            let hits = neigh.iter().filter(|j| labels[[**j, c]] > 0.5).count();
            sums[c] += 100.0 * hits as f64 / PROBE_NEIGHBOURS as f64;
            counts[c] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, k)| (*k > 0).then(|| s / *k as f64))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive report".into()));
    }
    Ok(ProbeScore {
        macro_score: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

/// One checkpoint of the forgetting series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingPoint {
    pub step: usize,
    pub in_domain_macro: f64,
    pub general_macro: f64,
}

/// Labelled texts for one side of the probe.
pub struct ProbeTexts<'a> {
    pub texts: &'a [String],
    /// Binary `(texts.len(), classes)` matrix.
    pub labels: &'a Mat,
}

/// Scores pooled text-encoder embeddings of both corpora at each checkpoint.
pub fn forgetting_probe(
    checkpoints: &[(usize, &TextEncoder)],
    in_domain: &ProbeTexts<'_>,
    general: &ProbeTexts<'_>,
) -> Result<Vec<ForgettingPoint>> {
    if checkpoints.len() < 2 {
        return Err(Error::invalid("the forgetting probe needs at least two checkpoints"));
    }
    checkpoints
        .iter()
        .map(|(step, te)| {
            let a = chexpert_at_10(&te.pooled(in_domain.texts)?, in_domain.labels)?;
            let b = chexpert_at_10(&te.pooled(general.texts)?, general.labels)?;
            Ok(ForgettingPoint {
                step: *step,
                in_domain_macro: a.macro_score,
                general_macro: b.macro_score,
            })
        })
        .collect()
}

pub fn forgetting_csv(points: &[ForgettingPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// One-hot `(n, classes)` matrix from class indices.
pub fn one_hot(indices: &[usize], classes: usize) -> Mat {
    Mat::from_shape_fn((indices.len(), classes), |(i, c)| if indices[i] == c { 1.0 } else { 0.0 })
}
