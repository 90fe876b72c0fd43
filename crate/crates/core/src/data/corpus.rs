//! Corpus generation, report filtering, No-Finding capping and split construction.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{medical_caption, truth_labels, Finding, GeneralScene, Side, Size};
use super::render::{render_general, render_medical};
use super::{LabelClass, LabelVector, ReportRecord, Split, ToyClass, View};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::tokenizer::Tokenizer;

/// Minimum impression length in characters (whitespace included).
pub const MIN_IMPRESSION_CHARS: usize = 7;

/// Subgroup tags run from 10 to 19; the last one is the holdout.
pub const SUBGROUPS: std::ops::RangeInclusive<u8> = 10..=19;
pub const HOLDOUT_SUBGROUP: u8 = 19;

/// A per-record generator derived from the corpus seed and the record index.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoFindingCap {
    /// Count of the most frequent positive finding in the same split.
    Auto,
    Count(usize),
    /// Fraction of the No-Finding records to keep.
    Fraction(f64),
    None,
}

impl NoFindingCap {
    pub fn resolve(&self, records: &[ReportRecord]) -> Result<Option<usize>> {
        let nf = records.iter().filter(|r| r.is_no_finding()).count();
        match *self {
            NoFindingCap::Auto => {
                let counts = CountTable::from_records(records, None).counts;
                Ok(Some(
                    ToyClass::FINDINGS
                        .iter()
                        .map(|c| counts[c.label().index()])
                        .max()
                        .unwrap_or(0),
                ))
            }
            NoFindingCap::Count(c) => Ok(Some(c)),
            NoFindingCap::Fraction(f) if (0.0..=1.0).contains(&f) => {
                Ok(Some((f * nf as f64).round() as usize))
            }
            NoFindingCap::Fraction(f) => Err(Error::Config(format!(
                "no_finding_cap fraction {f} outside [0, 1]"
            ))),
            NoFindingCap::None => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub views_included: BTreeSet<View>,
    pub no_finding_cap: NoFindingCap,
    /// Per-finding prevalence, in [`ToyClass::FINDINGS`] order.
    pub prevalence: [f64; 5],
    /// Relative frequency of PA, AP and LAT views at generation time.
    pub view_weights: [f64; 3],
    /// Probability that an absent finding is explicitly negated in the caption.
    pub negation_rate: f64,
    /// Fraction of records given a degenerate impression (too short or too long).
    pub noise_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_size: 2000,
            test_size: 400,
            image_size: 32,
            views_included: View::ALL.into_iter().collect(),
            no_finding_cap: NoFindingCap::Auto,
            prevalence: [0.18, 0.15, 0.22, 0.18, 0.12],
            view_weights: [0.5, 0.3, 0.2],
            negation_rate: 0.15,
            noise_rate: 0.02,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_size + self.test_size == 0 {
            return Err(Error::Config("corpus size must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("prevalence values must lie in [0, 1]".into()));
        }
        for (name, p) in [("negation_rate", self.negation_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.view_weights.iter().any(|w| *w < 0.0) || self.view_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("view_weights must be nonnegative with positive sum".into()));
        }
        if let NoFindingCap::Fraction(f) = self.no_finding_cap {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("no_finding_cap fraction must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Generating truth behind one record's image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordTruth {
    pub findings: Vec<Finding>,
    pub negated: Vec<ToyClass>,
    pub render_seed: u64,
}

/// An image-caption training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub prompt: String,
    pub image: GrayImage,
    pub labels: LabelVector,
}

/// Generated records plus the ground truth needed to render their images.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub spec: CorpusSpec,
    pub records: Vec<ReportRecord>,
    pub truths: HashMap<String, RecordTruth>,
}

impl ToyCorpus {
    pub fn truth(&self, record_id: &str) -> Option<&RecordTruth> {
        self.truths.get(record_id)
    }

    /// Renders the image of a record (bitwise reproducible).
    pub fn image(&self, record: &ReportRecord) -> Result<GrayImage> {
        let t = self
            .truth(&record.record_id)
            .ok_or_else(|| Error::invalid(format!("unknown record {}", record.record_id)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(t.render_seed);
        Ok(render_medical(&t.findings, record.view, self.spec.image_size, &mut rng))
    }

    pub fn pairs(&self, records: &[ReportRecord]) -> Result<Vec<Pair>> {
        records
            .iter()
            .map(|r| {
                Ok(Pair {
                    prompt: r.impression.clone(),
                    image: self.image(r)?,
                    labels: r.labels,
                })
            })
            .collect()
    }

    /// Filtered, capped and split corpus under this corpus' own spec.
    pub fn curated(&self, tokenizer: &Tokenizer) -> Result<Splits> {
        let (kept, _) = filter_reports(&self.records, tokenizer);
        make_splits(&kept, &self.spec, tokenizer)
    }
}

fn pick_view<R: Rng>(weights: &[f64; 3], rng: &mut R) -> View {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (v, w) in View::ALL.into_iter().zip(weights) {
        if u < *w {
            return v;
        }
        u -= w;
    }
    View::LAT
}

const DEGENERATE_SHORT: &[&str] = &["Slight", "Same.", "Stable", "None."];

fn degenerate_impression<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.5) {
        DEGENERATE_SHORT[rng.gen_range(0..DEGENERATE_SHORT.len())].to_string()
    } else {
        // unmatched filler long enough to exceed the default token limit
        vec!["Unchanged view"; 40].join(", ") + "."
    }
}

/// Generates a synthetic corpus: records `0..train_size` fall in subgroups
/// 10–18, the rest in the holdout subgroup.
pub fn toy_corpus_generate(spec: &CorpusSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let n = spec.train_size + spec.test_size;
    let mut records = Vec::with_capacity(n);
    let mut truths = HashMap::with_capacity(n);
    for i in 0..n {
        let mut rng = record_rng(spec.seed, i as u64);
        let (subgroup, split) = if i < spec.train_size {
            (10 + (i % 9) as u8, Split::Train)
        } else {
            (HOLDOUT_SUBGROUP, Split::Test)
        };
        let view = pick_view(&spec.view_weights, &mut rng);
        let mut findings = Vec::new();
        let mut negated = Vec::new();
        for (c, p) in ToyClass::FINDINGS.into_iter().zip(spec.prevalence) {
            if rng.gen_bool(p) {
                findings.push(Finding {
                    class: c,
                    side: if rng.gen_bool(0.5) { Side::Left } else { Side::Right },
                    size: if rng.gen_bool(0.5) { Size::Small } else { Size::Large },
                });
            } else if rng.gen_bool(spec.negation_rate) {
                negated.push(c);
            }
        }
        let render_seed = rng.gen();
        let (impression, labels, findings) = if rng.gen_bool(spec.noise_rate) {
            let text = degenerate_impression(&mut rng);
            let labels = super::grammar::label_extract(&text);
            (text, labels, Vec::new())
        } else {
            let text = medical_caption(&findings, &negated, &mut rng);
            (text, truth_labels(&findings, &negated), findings)
        };
        let record_id = format!("r{i:06}");
        truths.insert(
            record_id.clone(),
            RecordTruth {
                findings,
                negated,
                render_seed,
            },
        );
        records.push(ReportRecord {
            record_id,
            impression,
            view,
            labels,
            split,
            subgroup,
        });
    }
    Ok(ToyCorpus {
        spec: spec.clone(),
        records,
        truths,
    })
}

/// Per-rule drop counts of [`filter_reports`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub too_short: usize,
    pub too_many_tokens: usize,
    pub kept: usize,
}

/// Keeps records whose impression has at least 7 characters and fits the
/// tokenizer's limit. A record failing both rules counts as too short.
pub fn filter_reports(records: &[ReportRecord], tokenizer: &Tokenizer) -> (Vec<ReportRecord>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for r in records {
        if r.impression.chars().count() < MIN_IMPRESSION_CHARS {
            report.too_short += 1;
        } else if tokenizer.count(&r.impression) > tokenizer.max_tokens {
            report.too_many_tokens += 1;
        } else {
            kept.push(r.clone());
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// Keeps at most `cap` No-Finding records, chosen uniformly with `seed`;
/// everything else passes through in order.
pub fn cap_no_finding(records: &[ReportRecord], cap: usize, seed: u64) -> Vec<ReportRecord> {
    let nf: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_no_finding()).collect();
    if nf.len() <= cap {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<usize> = sample(&mut rng, nf.len(), cap).into_iter().map(|k| nf[k]).collect();
    records
        .iter()
        .enumerate()
        .filter(|(i, r)| !r.is_no_finding() || chosen.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

/// Per-class positive counts plus impression length statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub records: usize,
    pub counts: [usize; 14],
    pub mean_chars: f64,
    pub mean_tokens: f64,
}

impl CountTable {
    pub fn from_records(records: &[ReportRecord], tokenizer: Option<&Tokenizer>) -> Self {
        let mut counts = [0usize; 14];
        let mut chars = 0usize;
        let mut tokens = 0usize;
        for r in records {
            for c in r.labels.positives() {
                counts[c.index()] += 1;
            }
            chars += r.impression.chars().count();
            tokens += tokenizer.map_or(0, |t| t.count(&r.impression));
        }
        let n = records.len().max(1) as f64;
        Self {
            records: records.len(),
            counts,
            mean_chars: chars as f64 / n,
            mean_tokens: if tokenizer.is_some() { tokens as f64 / n } else { f64::NAN },
        }
    }

    /// `(row name, value)` pairs: the 14 classes, then the length statistics.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = LabelClass::ALL
            .iter()
            .map(|c| (c.name().to_string(), self.counts[c.index()].to_string()))
            .collect();
        out.push(("Mean no. char.".into(), format!("{:.1}", self.mean_chars)));
        out.push(("Mean no. tokens".into(), format!("{:.1}", self.mean_tokens)));
        out.push(("Total".into(), self.records.to_string()));
        out
    }

    /// Renders several named tables side by side as CSV (one column per split).
    pub fn to_csv(tables: &[(&str, &CountTable)]) -> String {
        let mut s = String::from("class");
        for (name, _) in tables {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        let rows: Vec<_> = tables.iter().map(|(_, t)| t.rows()).collect();
        for i in 0..rows.first().map_or(0, Vec::len) {
            s.push_str(&rows[0][i].0);
            for r in &rows {
                s.push(',');
                s.push_str(&r[i].1);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<ReportRecord>,
    pub test: Vec<ReportRecord>,
    pub train_table: CountTable,
    pub test_table: CountTable,
}

/// Partitions by subgroup (holdout subgroup → test), applies the view filter
/// and the No-Finding cap per split, and tabulates each split.
pub fn make_splits(records: &[ReportRecord], spec: &CorpusSpec, tokenizer: &Tokenizer) -> Result<Splits> {
    let mut seen = HashSet::new();
    let mut groups: BTreeMap<u8, Split> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.record_id.as_str()) {
            return Err(Error::Integrity(format!("duplicate record id {}", r.record_id)));
        }
        if !SUBGROUPS.contains(&r.subgroup) {
            return Err(Error::Integrity(format!(
                "record {} has subgroup p{} outside p10..p19",
                r.record_id, r.subgroup
            )));
        }
        let expected = if r.subgroup == HOLDOUT_SUBGROUP { Split::Test } else { Split::Train };
        if r.split != expected {
            return Err(Error::Integrity(format!(
                "record {} in subgroup p{} is tagged {:?}",
                r.record_id, r.subgroup, r.split
            )));
        }
        if let Some(prev) = groups.insert(r.subgroup, r.split) {
            if prev != r.split {
                return Err(Error::Integrity(format!("subgroup p{} spans both splits", r.subgroup)));
            }
        }
    }
    let part = |split: Split, salt: u64| -> Result<Vec<ReportRecord>> {
        let rs: Vec<ReportRecord> = records
            .iter()
            .filter(|r| r.split == split && spec.views_included.contains(&r.view))
            .cloned()
            .collect();
        Ok(match spec.no_finding_cap.resolve(&rs)? {
            Some(cap) => cap_no_finding(&rs, cap, spec.seed ^ salt),
            None => rs,
        })
    };
    let train = part(Split::Train, 0x7472)?;
    let test = part(Split::Test, 0x7465)?;
    Ok(Splits {
        train_table: CountTable::from_records(&train, Some(tokenizer)),
        test_table: CountTable::from_records(&test, Some(tokenizer)),
        train,
        test,
    })
}

/// General-domain picture/caption pairs, used as the pretraining corpus and
/// as the out-of-domain side of the forgetting probe.
pub fn general_corpus(n: usize, image_size: usize, seed: u64) -> Vec<(GeneralScene, Pair)> {
    (0..n)
        .map(|i| {
            let mut rng = record_rng(seed ^ 0x6765_6e65_7261_6c00, i as u64);
            let scene = GeneralScene::random(&mut rng);
            let image = render_general(&scene, image_size, &mut rng);
            let pair = Pair {
                prompt: scene.caption(),
                image,
                labels: LabelVector::default(),
            };
            (scene, pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grammar::label_extract;

    fn rec(id: &str, text: &str, nf: bool) -> ReportRecord {
        let mut labels = LabelVector::default();
        if nf {
            labels.set(LabelClass::NoFinding, super::super::Mention::Present);
        }
        ReportRecord {
            record_id: id.into(),
            impression: text.into(),
            view: View::PA,
            labels,
            split: Split::Train,
            subgroup: 10,
        }
    }

    #[test]
    fn generated_captions_round_trip_and_reproduce() {
        let spec = CorpusSpec {
            train_size: 300,
            test_size: 50,
            ..Default::default()
        };
        let a = toy_corpus_generate(&spec).unwrap();
        let b = toy_corpus_generate(&spec).unwrap();
        assert_eq!(a.records, b.records);
        for r in &a.records {
            assert_eq!(label_extract(&r.impression), r.labels);
        }
        assert_eq!(a.image(&a.records[7]).unwrap(), b.image(&b.records[7]).unwrap());
    }

    #[test]
    fn filter_boundaries() {
        let t = Tokenizer::default();
        let long = vec!["no"; 76].join(" ");
        let ok = vec!["no"; 75].join(" ");
        let rs = vec![rec("a", "Slight", false), rec("b", "Slight.", false), rec("c", &long, false), rec("d", &ok, false)];
        let (kept, rep) = filter_reports(&rs, &t);
        let ids: Vec<_> = kept.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["b", "d"]);
        assert_eq!((rep.too_short, rep.too_many_tokens, rep.kept), (1, 1, 2));
    }

    #[test]
    fn cap_keeps_exact_count() {
        let rs: Vec<_> = (0..150).map(|i| rec(&format!("{i}"), "Normal chest.", i < 100)).collect();
        let a = cap_no_finding(&rs, 40, 5);
        assert_eq!(a.iter().filter(|r| r.is_no_finding()).count(), 40);
        assert_eq!(a.len(), 90);
        assert_eq!(a, cap_no_finding(&rs, 40, 5));
        assert_eq!(cap_no_finding(&rs, 0, 5).len(), 50);
        assert_eq!(cap_no_finding(&rs, 100, 5), rs);
    }

    #[test]
    fn splits_are_disjoint_and_view_filtered() {
        let spec = CorpusSpec {
            train_size: 400,
            test_size: 100,
            views_included: [View::PA].into_iter().collect(),
            ..Default::default()
        };
        let c = toy_corpus_generate(&spec).unwrap();
        let s = c.curated(&Tokenizer::default()).unwrap();
        let train: HashSet<_> = s.train.iter().map(|r| &r.record_id).collect();
        assert!(s.test.iter().all(|r| !train.contains(&r.record_id)));
        assert!(s.train.iter().chain(&s.test).all(|r| r.view == View::PA));
        assert_eq!(s.train_table.rows().len(), 17);
    }

    #[test]
    fn inconsistent_subgroup_is_an_integrity_error() {
        let mut r = rec("x", "Normal chest.", true);
        r.subgroup = HOLDOUT_SUBGROUP;
        let err = make_splits(&[r], &CorpusSpec::default(), &Tokenizer::default()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }
}
