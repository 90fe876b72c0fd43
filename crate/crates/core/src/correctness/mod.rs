//! Factual correctness: classifier AUROC on generated images, retrieval,
//! report-text metrics and the text-encoder clustering probe.

pub mod classifier;
pub mod probe;
pub mod retrieval;
pub mod text;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::data::{LabelVector, ToyClass};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pipeline::Pipeline;

pub use classifier::{ClassifierConfig, FitLog, MultiLabelClassifier, OracleClassifier, CLASSIFIER_ID};
pub use probe::{chexpert_at_10, forgetting_probe, ForgettingPoint, ProbeScore, ProbeTexts};
pub use retrieval::{image_text_retrieve, rank_by_cosine, retrieval_precision_at_k, RetrievalPool, RidgeMap};
pub use text::{
    bleu4, fact_ent, fact_entnli, label_f1, rouge_l, text_metric_means, toy_caption, ConstantNli, EntityExtractor, LabelF1,
    NliJudge, NliLabel, SentenceSimilarity, TextScore, TokenJaccard, ToyNer, ToyNli,
};

/// Crop and output sides of the classifier input chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub crop: usize,
    pub out: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { crop: 512, out: 224 }
    }
}

impl PreprocessConfig {
    /// The chain scaled to the toy corpus geometry.
    pub fn toy(image_size: usize) -> Self {
        Self {
            crop: image_size,
            out: image_size,
        }
    }
}

/// Scales the shorter side to `crop`, center-crops a `crop`-square and
/// resizes it to `out`×`out`.
pub fn preprocess_for_classifier(img: &GrayImage, cfg: &PreprocessConfig) -> GrayImage {
    let (h, w) = img.dims();
    let short = h.min(w) as f64;
    let nh = ((h as f64 * cfg.crop as f64 / short).round() as usize).max(cfg.crop);
    let nw = ((w as f64 * cfg.crop as f64 / short).round() as usize).max(cfg.crop);
    let scaled = img.resize(nw, nh);
    let cropped = scaled.center_crop(cfg.crop, cfg.crop).expect("crop fits after scaling");
    cropped.resize(cfg.out, cfg.out)
}

/// Rank-based area under the ROC curve; ties count one half.
pub fn auroc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::invalid("scores and truths differ in length"));
    }
    let pos = truths.iter().filter(|t| **t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if truths[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAuroc {
    pub class: String,
    /// `None` when the truth column has a single class.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocTable {
    pub classes: Vec<ClassAuroc>,
    pub macro_auroc: Option<f64>,
    pub macro_classes: Vec<String>,
}

/// Per-class AUROC over the columns of `scores`/`truths`, with the macro
/// average over `subset` (all columns when `None`). Undefined classes are
/// reported as such and left out of the macro.
pub fn auroc_table(scores: &Mat, truths: &Mat, names: &[&str], subset: Option<&[usize]>) -> Result<AurocTable> {
    if scores.dim() != truths.dim() || names.len() != scores.ncols() {
        return Err(Error::invalid("score, truth and class-name shapes disagree"));
    }
    let mut classes = Vec::with_capacity(names.len());
    for (c, name) in names.iter().enumerate() {
        let s: Vec<f64> = scores.column(c).to_vec();
        let t: Vec<bool> = truths.column(c).iter().map(|v| *v > 0.5).collect();
        let value = match auroc(&s, &t) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        classes.push(ClassAuroc {
            class: name.to_string(),
            value,
        });
    }
    let chosen: Vec<usize> = subset.map_or_else(|| (0..names.len()).collect(), <[usize]>::to_vec);
    let mut vals = Vec::new();
    let mut macro_classes = Vec::new();
    for c in chosen {
        let entry = classes
            .get(c)
            .ok_or_else(|| Error::invalid(format!("class index {c} out of range")))?;
        if let Some(v) = entry.value {
            vals.push(v);
            macro_classes.push(entry.class.clone());
        }
    }
    let macro_auroc = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(AurocTable {
        classes,
        macro_auroc,
        macro_classes,
    })
}

/// Indices of classes whose reference AUROC exceeds `threshold`.
pub fn classes_above(reference: &AurocTable, threshold: f64) -> Vec<usize> {
    reference
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.value.is_some_and(|v| v > threshold))
        .map(|(i, _)| i)
        .collect()
}

pub fn toy_class_names() -> Vec<&'static str> {
    ToyClass::ALL.iter().map(|c| c.name()).collect()
}

/// Binary toy targets, one row per label vector.
pub fn toy_truth_matrix(labels: &[LabelVector]) -> Mat {
    let mut m = Mat::zeros((labels.len(), ToyClass::ALL.len()));
    for (i, l) in labels.iter().enumerate() {
        for (c, v) in l.toy_targets().iter().enumerate() {
            m[[i, c]] = *v;
        }
    }
    m
}

/// A flat record of metric values with provenance fingerprints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    /// Free-form notes such as conventions that were applied.
    pub flags: Vec<String>,
}

/// Short SHA-256 fingerprint of any serialisable value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serialises");
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl EvalReport {
    pub fn new(task: impl Into<String>, config_fingerprint: String, corpus_fingerprint: String) -> Self {
        Self {
            task: task.into(),
            metrics: BTreeMap::new(),
            config_fingerprint,
            corpus_fingerprint,
            flags: Vec::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_fingerprint.is_empty() || self.corpus_fingerprint.is_empty() {
            return Err(Error::Integrity(format!("report {} lacks fingerprints", self.task)));
        }
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Integrity(format!("metric {k} = {v} is not finite")));
        }
        Ok(())
    }

    /// `key=value` lines: task, fingerprints, flags, then `metric.<name>`.
    pub fn to_kv(&self) -> Result<String> {
        self.validate()?;
        let mut out = format!(
            "task={}\nconfig_fingerprint={}\ncorpus_fingerprint={}\n",
            self.task, self.config_fingerprint, self.corpus_fingerprint
        );
        for f in &self.flags {
            out.push_str(&format!("flag={f}\n"));
        }
        for (k, v) in &self.metrics {
            out.push_str(&format!("metric.{k}={v}\n"));
        }
        Ok(out)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = EvalReport::new("", String::new(), String::new());
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
            match k {
                "task" => r.task = v.to_string(),
                "config_fingerprint" => r.config_fingerprint = v.to_string(),
                "corpus_fingerprint" => r.corpus_fingerprint = v.to_string(),
                "flag" => r.flags.push(v.to_string()),
                _ => {
                    let name = k
                        .strip_prefix("metric.")
                        .ok_or_else(|| Error::Format(format!("line {}: unknown key {k}", n + 1)))?;
                    let value: f64 = v
                        .parse()
                        .map_err(|_| Error::Format(format!("line {}: bad number {v}", n + 1)))?;
                    r.metrics.insert(name.to_string(), value);
                }
            }
        }
        r.validate()?;
        Ok(r)
    }
}

/// CSV with one row per report and the given metric columns (blank when absent).
pub fn reports_csv(reports: &[EvalReport], columns: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["task".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.task.clone()];
        row.extend(
            columns
                .iter()
                .map(|c| r.get(c).map(|v| format!("{v:.4}")).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Writes an AUROC table into a report as `auroc.<class>` and `auroc.macro`.
pub fn record_auroc(report: &mut EvalReport, table: &AurocTable) {
    for c in &table.classes {
        match c.value {
            Some(v) => report.insert(format!("auroc.{}", c.class), v),
            None => report.flags.push(format!("auroc undefined for {}", c.class)),
        }
    }
    if let Some(m) = table.macro_auroc {
        report.insert("auroc.macro", m);
    }
}

/// Outcome of scoring generated images with the oracle classifier.
#[derive(Clone, Debug)]
pub struct ClassifyOutcome {
    pub report: EvalReport,
    pub table: AurocTable,
    pub images: Vec<GrayImage>,
    pub skipped: usize,
}

/// Generates one image per prompt, scores it with the classifier and
/// measures AUROC against the prompts' labels. Over-long prompts are skipped.
pub fn classify_generated(
    pipeline: &Pipeline,
    items: &[(String, LabelVector)],
    classifier: &OracleClassifier,
    sampler: &SamplerConfig,
    fingerprints: (String, String),
) -> Result<ClassifyOutcome> {
    let kept: Vec<&(String, LabelVector)> = items.iter().filter(|(p, _)| pipeline.check_prompt(p).is_ok()).collect();
    let skipped = items.len() - kept.len();
    let prompts: Vec<String> = kept.iter().map(|(p, _)| p.clone()).collect();
    let labels: Vec<LabelVector> = kept.iter().map(|(_, l)| *l).collect();
    let images = pipeline.generate_many(&prompts, sampler, 64)?;
    let scores = classifier.predict_proba(&images)?;
    let table = auroc_table(&scores, &toy_truth_matrix(&labels), &toy_class_names(), None)?;
    let mut report = EvalReport::new("classify", fingerprints.0, fingerprints.1);
    record_auroc(&mut report, &table);
    report.insert("skipped_prompts", skipped as f64);
    report.insert("images", images.len() as f64);
    Ok(ClassifyOutcome {
        report,
        table,
        images,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_examples() {
        let s = [0.9, 0.4, 0.6, 0.1];
        let t = [true, true, false, false];
        assert_eq!(auroc(&s, &t).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 4], &t).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &t).unwrap(), 1.0);
        assert!(matches!(auroc(&s, &[true; 4]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn preprocess_chain_geometry() {
        let img = GrayImage::zeros(768, 1024);
        let cfg = PreprocessConfig::default();
        let (h, w) = img.dims();
        let short = h.min(w) as f64;
        assert_eq!((w as f64 * 512.0 / short).round() as usize, 683);
        assert_eq!(preprocess_for_classifier(&img, &cfg).dims(), (224, 224));
        let toy = GrayImage::from_fn(32, 32, |(y, x)| (x + y) as f64 / 64.0);
        assert_eq!(preprocess_for_classifier(&toy, &PreprocessConfig::toy(32)), toy);
    }

    #[test]
    fn report_round_trips_as_key_values() {
        let mut r = EvalReport::new("fid", "abc".into(), "def".into());
        r.insert("fid.oracle", 1.25);
        r.flags.push("note".into());
        let back = EvalReport::from_kv(&r.to_kv().unwrap()).unwrap();
        assert_eq!(back, r);
        r.insert("bad", f64::NAN);
        assert!(r.to_kv().is_err());
    }

    #[test]
    fn undefined_classes_leave_the_macro() {
        let scores = Mat::from_shape_vec((4, 2), vec![0.9, 0.1, 0.4, 0.2, 0.6, 0.3, 0.1, 0.4]).unwrap();
        let truths = Mat::from_shape_vec((4, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = auroc_table(&scores, &truths, &["a", "b"], None).unwrap();
        assert_eq!(t.classes[1].value, None);
        assert_eq!(t.macro_auroc, Some(0.75));
        assert_eq!(t.macro_classes, vec!["a".to_string()]);
    }
}
