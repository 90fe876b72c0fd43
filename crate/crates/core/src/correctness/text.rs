//! Report-text metrics: entity overlap with and without an NLI filter,
//! label F1, BLEU-4 and ROUGE-L, plus the toy NER/NLI/similarity plugins.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::data::grammar::{parse_findings, sentences, Side, Size};
use crate::data::{label_extract, ToyClass};
use crate::nn::tokenizer::Tokenizer;

pub const BLEU_EPSILON: f64 = 1e-9;

/// A metric value plus whether an empty-input convention decided it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextScore {
    pub value: f64,
    pub empty_convention: bool,
}

impl TextScore {
    fn plain(value: f64) -> Self {
        Self {
            value,
            empty_convention: false,
        }
    }
}

/// Named entities of one sentence.
pub trait EntityExtractor {
    fn entities(&self, sentence: &str) -> BTreeSet<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

pub trait NliJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> NliLabel;
}

pub trait SentenceSimilarity {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

fn is_no_finding(sentence: &str) -> bool {
    label_extract(sentence).is_positive(ToyClass::NoFinding.label())
}

fn class_word(c: ToyClass) -> &'static str {
    match c {
        ToyClass::Cardiomegaly => "cardiomegaly",
        ToyClass::Edema => "edema",
        ToyClass::PleuralEffusion => "effusion",
        ToyClass::Pneumonia => "pneumonia",
        ToyClass::Pneumothorax => "pneumothorax",
        ToyClass::NoFinding => "no finding",
    }
}

/// Entities over the medical grammar's phrase inventory: the finding noun,
/// noun|side and noun|size, plus "no finding".
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyNer;

impl EntityExtractor for ToyNer {
    fn entities(&self, sentence: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if is_no_finding(sentence) {
            out.insert(class_word(ToyClass::NoFinding).to_string());
        }
        for m in parse_findings(sentence) {
            let noun = class_word(m.class);
            out.insert(noun.to_string());
            if let Some(side) = m.side {
                let s = if side == Side::Left { "left" } else { "right" };
                out.insert(format!("{noun}|{s}"));
            }
            if let Some(size) = m.size {
                let s = if size == Size::Large { "large" } else { "small" };
                out.insert(format!("{noun}|{s}"));
            }
        }
        out
    }
}

/// Negation rule table: a class asserted on one side and negated on the other,
/// or a normal study against any positive finding, is a contradiction. Equal
/// non-empty finding sets entail; everything else is neutral.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyNli;

fn polarity(sentence: &str) -> (BTreeSet<ToyClass>, BTreeSet<ToyClass>) {
    let mut pos = BTreeSet::new();
    let mut neg = BTreeSet::new();
    for m in parse_findings(sentence) {
        if m.negated {
            neg.insert(m.class);
        } else {
            pos.insert(m.class);
        }
    }
    (pos, neg)
}

impl NliJudge for ToyNli {
    fn judge(&self, premise: &str, hypothesis: &str) -> NliLabel {
        let (pp, pn) = polarity(premise);
        let (hp, hn) = polarity(hypothesis);
        if !pp.is_disjoint(&hn) || !pn.is_disjoint(&hp) {
            return NliLabel::Contradiction;
        }
        if (is_no_finding(premise) && !hp.is_empty()) || (is_no_finding(hypothesis) && !pp.is_empty()) {
            return NliLabel::Contradiction;
        }
        if (!pp.is_empty() || !pn.is_empty()) && pp == hp && pn == hn {
            return NliLabel::Entailment;
        }
        NliLabel::Neutral
    }
}

/// Always returns the same label.
#[derive(Clone, Copy, Debug)]
pub struct ConstantNli(pub NliLabel);

impl NliJudge for ConstantNli {
    fn judge(&self, _: &str, _: &str) -> NliLabel {
        self.0
    }
}

/// Jaccard overlap of token sets.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenJaccard;

impl SentenceSimilarity for TokenJaccard {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        let a: BTreeSet<String> = Tokenizer::split(a).into_iter().collect();
        let b: BTreeSet<String> = Tokenizer::split(b).into_iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 1.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

fn harmonic(matched: usize, n_gen: usize, n_ref: usize) -> TextScore {
    match (n_gen, n_ref) {
        (0, 0) => TextScore {
            value: 1.0,
            empty_convention: true,
        },
        (0, _) | (_, 0) => TextScore {
            value: 0.0,
            empty_convention: true,
        },
        _ if matched == 0 => TextScore::plain(0.0),
        _ => {
            let p = matched as f64 / n_gen as f64;
            let r = matched as f64 / n_ref as f64;
            TextScore::plain(2.0 * p * r / (p + r))
        }
    }
}

fn entity_set(text: &str, ner: &dyn EntityExtractor) -> BTreeSet<String> {
    sentences(text).iter().flat_map(|s| ner.entities(s)).collect()
}

/// Harmonic mean of entity-set precision and recall. Both empty scores 1,
/// one side empty scores 0; both cases set `empty_convention`.
pub fn fact_ent(generated: &str, reference: &str, ner: &dyn EntityExtractor) -> TextScore {
    let g = entity_set(generated, ner);
    let r = entity_set(reference, ner);
    harmonic(g.intersection(&r).count(), g.len(), r.len())
}

/// Like [`fact_ent`], but a matched entity is only credited when at least one
/// generated sentence containing it is not contradicted by its most similar
/// reference sentence.
pub fn fact_entnli(
    generated: &str,
    reference: &str,
    ner: &dyn EntityExtractor,
    nli: &dyn NliJudge,
    sim: &dyn SentenceSimilarity,
) -> TextScore {
    let gen_sents = sentences(generated);
    let ref_sents = sentences(reference);
    let mut valid: HashMap<String, bool> = HashMap::new();
    for s in &gen_sents {
        let counterpart = ref_sents
            .iter()
            .map(|r| (r, sim.similarity(s, r)))
            .fold(None::<(&String, f64)>, |best, (r, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((r, v)),
            });
        let ok = counterpart.map_or(true, |(r, _)| nli.judge(r, s) != NliLabel::Contradiction);
        for e in ner.entities(s) {
            *valid.entry(e).or_insert(false) |= ok;
        }
    }
    let g: BTreeSet<String> = valid.keys().cloned().collect();
    let r = entity_set(reference, ner);
    let matched = g.intersection(&r).filter(|e| valid[*e]).count();
    harmonic(matched, g.len(), r.len())
}

/// Positive-label F1 over a class subset, with labels from the rule-based
/// extractor.
#[derive(Clone, Debug)]
pub struct LabelF1 {
    pub classes: Vec<ToyClass>,
}

impl Default for LabelF1 {
    fn default() -> Self {
        Self {
            classes: ToyClass::FINDINGS.to_vec(),
        }
    }
}

/// True-positive, false-positive and false-negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn f1(&self) -> TextScore {
        harmonic(self.tp, self.tp + self.fp, self.tp + self.fn_)
    }
}

impl LabelF1 {
    fn positives(&self, text: &str) -> BTreeSet<ToyClass> {
        let v = label_extract(text);
        self.classes.iter().copied().filter(|c| v.is_positive(c.label())).collect()
    }

    pub fn counts(&self, generated: &str, reference: &str) -> Counts {
        let g = self.positives(generated);
        let r = self.positives(reference);
        let tp = g.intersection(&r).count();
        Counts {
            tp,
            fp: g.len() - tp,
            fn_: r.len() - tp,
        }
    }

    /// Micro-F1 pooled over all pairs.
    pub fn corpus(&self, pairs: &[(String, String)]) -> TextScore {
        let mut total = Counts::default();
        for (g, r) in pairs {
            let c = self.counts(g, r);
            total.tp += c.tp;
            total.fp += c.fp;
            total.fn_ += c.fn_;
        }
        total.f1()
    }
}

/// F1 between positive finding sets; both empty scores 1 (flagged).
pub fn label_f1(generated: &str, reference: &str) -> TextScore {
    LabelF1::default().counts(generated, reference).f1()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with uniform weights, brevity penalty and zero n-gram
/// matches replaced by [`BLEU_EPSILON`].
pub fn bleu4(generated: &str, reference: &str) -> f64 {
    let c = Tokenizer::split(generated);
    let r = Tokenizer::split(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cg = ngrams(&c, n);
        let rg = ngrams(&r, n);
        let total: usize = cg.values().sum();
        let matched: usize = cg.iter().map(|(g, k)| (*k).min(*rg.get(g).unwrap_or(&0))).sum();
        let num = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (num / total.max(1) as f64).ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / 4.0).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1) over tokens.
pub fn rouge_l(generated: &str, reference: &str) -> f64 {
    let c = Tokenizer::split(generated);
    let r = Tokenizer::split(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let l = lcs(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Impression for classifier probabilities: one sentence per finding above
/// `threshold`, or a normal-study sentence.
pub fn toy_caption(probs: &[f64], threshold: f64) -> String {
    let found: Vec<String> = ToyClass::FINDINGS
        .iter()
        .filter(|c| probs.get(c.index()).is_some_and(|p| *p > threshold))
        .map(|c| {
            let w = class_word(*c);
            let mut ch = w.chars();
            let first = ch.next().unwrap().to_uppercase().collect::<String>();
            format!("{first}{}.", ch.as_str())
        })
        .collect();
    if found.is_empty() {
        "No acute cardiopulmonary process.".to_string()
    } else {
        found.join(" ")
    }
}

/// Mean of every text metric over `(generated, reference)` pairs, with the
/// number of pairs decided by an empty-input convention.
pub fn text_metric_means(pairs: &[(String, String)]) -> BTreeMap<String, f64> {
    let (ner, nli, sim) = (ToyNer, ToyNli, TokenJaccard);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut conventions = 0usize;
    for (g, r) in pairs {
        let fe = fact_ent(g, r, &ner);
        let fen = fact_entnli(g, r, &ner, &nli, &sim);
        let lf = label_f1(g, r);
        conventions += usize::from(fe.empty_convention) + usize::from(lf.empty_convention);
        for (k, v) in [
            ("bleu4", bleu4(g, r)),
            ("rouge_l", rouge_l(g, r)),
            ("fact_ent", fe.value),
            ("fact_entnli", fen.value),
            ("label_f1", lf.value),
        ] {
            *sums.entry(k.to_string()).or_insert(0.0) += v;
        }
    }
    let n = pairs.len().max(1) as f64;
    let mut out: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
    out.insert("label_f1_micro".into(), LabelF1::default().corpus(pairs).value);
    out.insert("empty_conventions".into(), conventions as f64);
    out
}
