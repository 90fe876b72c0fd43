//! Single-generator evaluations behind the `eval` subcommands.

use crate::correctness::retrieval::{single_label, DEFAULT_CANDIDATES, DEFAULT_QUERIES, RETRIEVAL_KS};
use crate::correctness::text::{text_metric_means, toy_caption};
use crate::correctness::{
    chexpert_at_10, classify_generated, fingerprint, image_text_retrieve, retrieval_precision_at_k, toy_class_names,
    toy_truth_matrix, EvalReport, MultiLabelClassifier, OracleClassifier, RetrievalPool, RidgeMap,
};
use crate::data::ReportRecord;
use crate::error::{Error, Result};
use crate::nn::TextEncoder;
use crate::pipeline::{DomainBagEncoder, Pipeline, TextPlugin, PLUGIN_SEED};

use super::Lab;

const RIDGE_LAMBDA: f64 = 1e-2;

fn report(lab: &Lab, task: &str, p: &Pipeline) -> EvalReport {
    EvalReport::new(
        task,
        lab.config_fingerprint(&(task, crate::checkpoint::checkpoint_hash(p))),
        lab.corpus_fingerprint.clone(),
    )
}

/// Per-class AUROC of the oracle classifier on one generated image per test prompt.
pub fn eval_classify(lab: &Lab, p: &Pipeline, cls: &OracleClassifier) -> Result<EvalReport> {
    let fp = report(lab, "eval:classify", p);
    let out = classify_generated(
        p,
        &lab.eval_items(),
        cls,
        &lab.config.sampler,
        (fp.config_fingerprint.clone(), fp.corpus_fingerprint.clone()),
    )?;
    let mut r = out.report;
    r.task = fp.task;
    Ok(r)
}

fn single_labelled(records: Vec<ReportRecord>, n: usize) -> Vec<(ReportRecord, usize)> {
    records
        .into_iter()
        .filter_map(|r| single_label(&r.labels).map(|c| (r, c)))
        .take(n)
        .collect()
}

/// Mean-pooled embeddings from the frozen domain text encoder.
fn text_embeddings(texts: &[String]) -> Result<crate::autograd::Mat> {
    let enc = DomainBagEncoder::new(64, PLUGIN_SEED);
    let mut out = crate::autograd::Mat::zeros((texts.len(), enc.dim()));
    for (i, t) in texts.iter().enumerate() {
        let e = enc.embed(t)?;
        out.row_mut(i).assign(&e.mean_axis(ndarray::Axis(0)).expect("nonempty"));
    }
    Ok(out)
}

/// Image-image and image-text precision@k with generated query images.
///
/// Queries are images generated from single-label test impressions;
/// candidates are real single-label training images (image-image) or their
/// impressions (image-text). Images are embedded with the classifier's
/// penultimate layer; the image-text route maps those features into the text
/// space with a ridge map fitted on real training pairs. The top-1 retrieved
/// impression is also scored against the query's own impression.
pub fn eval_retrieval(lab: &Lab, p: &Pipeline, cls: &OracleClassifier) -> Result<EvalReport> {
    let queries = single_labelled(
        lab.test_pa().into_iter().filter(|r| p.check_prompt(&r.impression).is_ok()).collect(),
        DEFAULT_QUERIES,
    );
    let candidates = single_labelled(lab.train_pa(), DEFAULT_CANDIDATES);
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::invalid("no single-label reports for retrieval"));
    }
    let prompts: Vec<String> = queries.iter().map(|(r, _)| r.impression.clone()).collect();
    let generated = p.generate_many(&prompts, &lab.config.sampler, 64)?;
    let q_feat = cls.features(&generated);
    let cand_records: Vec<ReportRecord> = candidates.iter().map(|(r, _)| r.clone()).collect();
    let c_feat = cls.features(&lab.images(&cand_records)?);
    let q_labels: Vec<usize> = queries.iter().map(|(_, c)| *c).collect();
    let c_labels: Vec<usize> = candidates.iter().map(|(_, c)| *c).collect();
    let mut r = report(lab, "eval:retrieval", p);
    let image_pool = RetrievalPool::new(q_feat.clone(), q_labels.clone(), c_feat.clone(), c_labels.clone())?;
    let cand_texts: Vec<String> = cand_records.iter().map(|r| r.impression.clone()).collect();
    let c_text = text_embeddings(&cand_texts)?;
    let map = RidgeMap::fit(&c_feat, &c_text, RIDGE_LAMBDA)?;
    let q_text = map.apply(&q_feat)?;
    let text_pool = RetrievalPool::new(q_text.clone(), q_labels, c_text.clone(), c_labels)?;
    for k in RETRIEVAL_KS.into_iter().filter(|k| *k <= c_feat.nrows()) {
        r.insert(format!("image_image.p@{k}"), retrieval_precision_at_k(&image_pool, k)?);
        r.insert(format!("image_text.p@{k}"), retrieval_precision_at_k(&text_pool, k)?);
    }
    let mut pairs = Vec::with_capacity(queries.len());
    for (i, (rec, _)) in queries.iter().enumerate() {
        let ranked = image_text_retrieve(q_text.row(i), &cand_texts, &c_text)?;
        pairs.push((ranked[0].to_string(), rec.impression.clone()));
    }
    for (k, v) in text_metric_means(&pairs) {
        if k != "bleu4" && k != "rouge_l" {
            r.insert(format!("image_text.{k}"), v);
        }
    }
    r.insert("queries", queries.len() as f64);
    r.insert("candidates", candidates.len() as f64);
    Ok(r)
}

/// Report-generation analog: the toy captioner reads the classifier's
/// probabilities on each generated image; captions are scored against the
/// prompts.
pub fn eval_text_metrics(lab: &Lab, p: &Pipeline, cls: &OracleClassifier) -> Result<EvalReport> {
    let items: Vec<(String, _)> = lab.eval_items().into_iter().filter(|(q, _)| p.check_prompt(q).is_ok()).collect();
    let prompts: Vec<String> = items.iter().map(|(q, _)| q.clone()).collect();
    let images = p.generate_many(&prompts, &lab.config.sampler, 64)?;
    let probs = cls.predict_proba(&images)?;
    let pairs: Vec<(String, String)> = probs
        .rows()
        .into_iter()
        .zip(&prompts)
        .map(|(row, q)| (toy_caption(&row.to_vec(), 0.5), q.clone()))
        .collect();
    let mut r = report(lab, "eval:text-metrics", p);
    for (k, v) in text_metric_means(&pairs) {
        r.insert(k, v);
    }
    r.flags.push(format!("bleu smoothing epsilon {}", crate::correctness::text::BLEU_EPSILON));
    Ok(r)
}

/// Text-metric means over explicit `(generated, reference)` pairs.
pub fn eval_text_pairs(pairs: &[(String, String)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no text pairs"));
    }
    let mut r = EvalReport::new("eval:text-metrics", fingerprint(&"pairs"), fingerprint(&pairs));
    for (k, v) in text_metric_means(pairs) {
        r.insert(k, v);
    }
    Ok(r)
}

/// Nearest-neighbour clustering of the text encoder's pooled test-impression embeddings.
pub fn eval_chexpert10(lab: &Lab, te: &TextEncoder) -> Result<EvalReport> {
    let test = lab.test_pa();
    let texts: Vec<String> = test.iter().map(|r| r.impression.clone()).collect();
    let labels = toy_truth_matrix(&test.iter().map(|r| r.labels).collect::<Vec<_>>());
    let score = chexpert_at_10(&te.pooled(&texts)?, &labels)?;
    let mut r = EvalReport::new(
        "eval:chexpert10",
        lab.config_fingerprint(&("chexpert10", te.params.hash())),
        lab.corpus_fingerprint.clone(),
    );
    for (name, v) in toy_class_names().iter().zip(&score.per_class) {
        match v {
            Some(v) => r.insert(format!("chexpert10.{name}"), *v),
            None => r.flags.push(format!("no positive report for {name}")),
        }
    }
    r.insert("chexpert10.macro", score.macro_score);
    Ok(r)
}
