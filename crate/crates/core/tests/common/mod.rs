#![allow(dead_code)]

use latentlab::autograd::Mat;
use latentlab::data::grammar::medical_caption;
use latentlab::data::{Finding, Side, Size, ToyClass};
use rand::seq::SliceRandom;
use rand::Rng;

/// A random toy impression: each finding is present, negated or absent.
pub fn random_report<R: Rng>(rng: &mut R) -> String {
    let mut findings = Vec::new();
    let mut negated = Vec::new();
    for c in ToyClass::FINDINGS {
        match rng.gen_range(0..4) {
            0 => findings.push(Finding {
                class: c,
                side: if rng.gen_bool(0.5) { Side::Left } else { Side::Right },
                size: if rng.gen_bool(0.5) { Size::Small } else { Size::Large },
            }),
            1 => negated.push(c),
            _ => {}
        }
    }
    findings.shuffle(rng);
    medical_caption(&findings, &negated, rng)
}

/// Cosine similarity written out longhand.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Precision@k by counting, for every candidate, how many others outrank it.
pub fn brute_force_precision(q: &Mat, ql: &[usize], c: &Mat, cl: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for (i, qrow) in q.rows().into_iter().enumerate() {
        let qv = qrow.to_vec();
        let sims: Vec<f64> = c.rows().into_iter().map(|r| cosine(&qv, &r.to_vec())).collect();
        let mut hits = 0usize;
        for j in 0..sims.len() {
            let above = (0..sims.len())
                .filter(|&m| sims[m] > sims[j] || (sims[m] == sims[j] && m < j))
                .count();
            if above < k && cl[j] == ql[i] {
                hits += 1;
            }
        }
        total += hits as f64 / k as f64;
    }
    total / q.nrows() as f64
}
