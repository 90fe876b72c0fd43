//! Cosine retrieval between embedding sets and a ridge map between spaces.

use nalgebra::{DMatrix, DVector};

use crate::autograd::Mat;
use crate::data::{LabelVector, ToyClass};
use crate::error::{Error, Result};

pub const DEFAULT_QUERIES: usize = 200;
pub const DEFAULT_CANDIDATES: usize = 400;
pub const RETRIEVAL_KS: [usize; 3] = [5, 10, 50];

/// The single positive toy class of a label vector, or `None` for zero or
/// several positives.
pub fn single_label(labels: &LabelVector) -> Option<usize> {
    let t = labels.toy_targets();
    let pos: Vec<usize> = (0..t.len()).filter(|i| t[*i] > 0.5).collect();
    (pos.len() == 1).then(|| pos[0])
}

/// Queries and candidates with one class label each.
#[derive(Clone, Debug)]
pub struct RetrievalPool {
    pub queries: Mat,
    pub query_labels: Vec<usize>,
    pub candidates: Mat,
    pub candidate_labels: Vec<usize>,
}

impl RetrievalPool {
    pub fn new(queries: Mat, query_labels: Vec<usize>, candidates: Mat, candidate_labels: Vec<usize>) -> Result<Self> {
        if queries.nrows() != query_labels.len() || candidates.nrows() != candidate_labels.len() {
            return Err(Error::invalid("embedding and label counts differ"));
        }
        if queries.ncols() != candidates.ncols() {
            return Err(Error::invalid(format!(
                "query dim {} != candidate dim {}",
                queries.ncols(),
                candidates.ncols()
            )));
        }
        if candidates.nrows() == 0 {
            return Err(Error::invalid("empty candidate set"));
        }
        Ok(Self {
            queries,
            query_labels,
            candidates,
            candidate_labels,
        })
    }

    /// Keeps single-label items from `(embedding row, labels)` lists; the first
    /// `n_queries` usable items of `query_side` and `n_candidates` of
    /// `candidate_side`.
    pub fn from_labelled(
        query_side: (&Mat, &[LabelVector]),
        candidate_side: (&Mat, &[LabelVector]),
        n_queries: usize,
        n_candidates: usize,
    ) -> Result<Self> {
        let pick = |(m, labels): (&Mat, &[LabelVector]), n: usize| -> (Mat, Vec<usize>) {
            let rows: Vec<(usize, usize)> = labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| single_label(l).map(|c| (i, c)))
                .take(n)
                .collect();
            let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
            (m.select(ndarray::Axis(0), &idx), rows.iter().map(|r| r.1).collect())
        };
        let (q, ql) = pick(query_side, n_queries);
        let (c, cl) = pick(candidate_side, n_candidates);
        Self::new(q, ql, c, cl)
    }
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Candidate indices by descending cosine similarity to `query`; ties keep
/// ascending candidate index.
pub fn rank_by_cosine(query: ndarray::ArrayView1<f64>, candidates: &Mat) -> Result<Vec<usize>> {
    if query.len() != candidates.ncols() {
        return Err(Error::invalid(format!(
            "query dim {} != candidate dim {}",
            query.len(),
            candidates.ncols()
        )));
    }
    let sims: Vec<f64> = candidates.rows().into_iter().map(|c| cosine(query, c)).collect();
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(idx)
}

/// Mean fraction of the top-`k` candidates sharing the query's label.
pub fn retrieval_precision_at_k(pool: &RetrievalPool, k: usize) -> Result<f64> {
    if k == 0 || k > pool.candidates.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={}",
            pool.candidates.nrows()
        )));
    }
    if pool.queries.nrows() == 0 {
        return Err(Error::invalid("empty query set"));
    }
    let mut total = 0.0;
    for (q, label) in pool.queries.rows().into_iter().zip(&pool.query_labels) {
        let ranked = rank_by_cosine(q, &pool.candidates)?;
        let hits = ranked[..k]
            .iter()
            .filter(|c| pool.candidate_labels[**c] == *label)
            .count();
        total += hits as f64 / k as f64;
    }
    Ok(total / pool.queries.nrows() as f64)
}

/// Impressions ranked by cosine similarity of their embeddings to the query.
pub fn image_text_retrieve<'a>(query: ndarray::ArrayView1<f64>, impressions: &'a [String], embeddings: &Mat) -> Result<Vec<&'a str>> {
    if impressions.is_empty() || embeddings.nrows() == 0 {
        return Err(Error::invalid("empty candidate set"));
    }
    if impressions.len() != embeddings.nrows() {
        return Err(Error::invalid("impression and embedding counts differ"));
    }
    Ok(rank_by_cosine(query, embeddings)?
        .into_iter()
        .map(|i| impressions[i].as_str())
        .collect())
}

/// Linear map `x -> [x, 1] W` fitted by ridge regression.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeMap {
    pub weights: Mat,
}

impl RidgeMap {
    pub fn fit(x: &Mat, y: &Mat, lambda: f64) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() == 0 {
            return Err(Error::invalid("ridge inputs need matching, non-zero row counts"));
        }
        let (n, d) = (x.nrows(), x.ncols() + 1);
        let xa = DMatrix::from_fn(n, d, |i, j| if j + 1 == d { 1.0 } else { x[[i, j]] });
        let mut gram = xa.transpose() * &xa;
        for i in 0..d - 1 {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?;
        let mut w = Mat::zeros((d, y.ncols()));
        for c in 0..y.ncols() {
            let yc = DVector::from_iterator(n, y.column(c).iter().copied());
            let sol = chol.solve(&(xa.transpose() * yc));
            for r in 0..d {
                w[[r, c]] = sol[r];
            }
        }
        Ok(Self { weights: w })
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let d = self.weights.nrows() - 1;
        if x.ncols() != d {
            return Err(Error::invalid(format!("ridge map expects dim {d}, got {}", x.ncols())));
        }
        let bias = self.weights.row(d);
        Ok(x.dot(&self.weights.slice(ndarray::s![..d, ..])) + &bias)
    }
}

pub fn class_name(index: usize) -> &'static str {
    ToyClass::ALL[index].name()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(rows: &[usize], d: usize) -> Mat {
        Mat::from_shape_fn((rows.len(), d), |(i, j)| if rows[i] == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn two_of_top_five_match() {
        // the first five candidates tie at similarity 1
        let q = one_hot(&[0], 8);
        let c = one_hot(&[0, 0, 0, 0, 0, 1, 2, 3], 8);
        let pool = RetrievalPool::new(q, vec![7], c, vec![7, 3, 7, 3, 3, 7, 7, 7]).unwrap();
        assert_eq!(retrieval_precision_at_k(&pool, 5).unwrap(), 0.4);
        assert!(retrieval_precision_at_k(&pool, 9).is_err());
    }

    #[test]
    fn own_embedding_ranks_first() {
        let emb = Mat::from_shape_vec((3, 2), vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0]).unwrap();
        let texts = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let r = image_text_retrieve(emb.row(1), &texts, &emb).unwrap();
        assert_eq!(r[0], "b");
        assert!(image_text_retrieve(emb.row(1), &[], &Mat::zeros((0, 2))).is_err());
        assert!(image_text_retrieve(ndarray::arr1(&[1.0]).view(), &texts, &emb).is_err());
    }

    #[test]
    fn ridge_recovers_a_linear_map() {
        let x = Mat::from_shape_fn((20, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let y = Mat::from_shape_fn((20, 1), |(i, _)| 2.0 * x[[i, 0]] - x[[i, 1]] + 1.0);
        let m = RidgeMap::fit(&x, &y, 1e-9).unwrap();
        let pred = m.apply(&x).unwrap();
        assert!((pred - &y).iter().all(|e| e.abs() < 1e-6));
    }
}
