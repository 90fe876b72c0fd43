//! Report records, the synthetic image-caption corpus and its curation steps.

pub mod corpus;
pub mod grammar;
pub mod manifest;
pub mod render;

use serde::{Deserialize, Serialize};

pub use corpus::{
    cap_no_finding, filter_reports, general_corpus, make_splits, toy_corpus_generate, CorpusSpec,
    CountTable, FilterReport, NoFindingCap, Pair, RecordTruth, Splits, ToyCorpus,
};
pub use grammar::{label_extract, parse_findings, Finding, Side, Size};

/// The fourteen label classes, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelClass {
    Atelectasis,
    Cardiomegaly,
    Consolidation,
    Edema,
    EnlargedCardiomediastinum,
    Fracture,
    LungLesion,
    LungOpacity,
    NoFinding,
    PleuralEffusion,
    PleuralOther,
    Pneumonia,
    Pneumothorax,
    SupportDevices,
}

impl LabelClass {
    pub const ALL: [LabelClass; 14] = [
        LabelClass::Atelectasis,
        LabelClass::Cardiomegaly,
        LabelClass::Consolidation,
        LabelClass::Edema,
        LabelClass::EnlargedCardiomediastinum,
        LabelClass::Fracture,
        LabelClass::LungLesion,
        LabelClass::LungOpacity,
        LabelClass::NoFinding,
        LabelClass::PleuralEffusion,
        LabelClass::PleuralOther,
        LabelClass::Pneumonia,
        LabelClass::Pneumothorax,
        LabelClass::SupportDevices,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelClass::Atelectasis => "Atelectasis",
            LabelClass::Cardiomegaly => "Cardiomegaly",
            LabelClass::Consolidation => "Consolidation",
            LabelClass::Edema => "Edema",
            LabelClass::EnlargedCardiomediastinum => "Enlarged Card.",
            LabelClass::Fracture => "Fracture",
            LabelClass::LungLesion => "Lung Lesion",
            LabelClass::LungOpacity => "Lung Opacity",
            LabelClass::NoFinding => "No Finding",
            LabelClass::PleuralEffusion => "Pl. Effusion",
            LabelClass::PleuralOther => "Pl. Other",
            LabelClass::Pneumonia => "Pneumonia",
            LabelClass::Pneumothorax => "Pneumothorax",
            LabelClass::SupportDevices => "Sup. Devices",
        }
    }
}

/// The six classes the synthetic corpus can render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToyClass {
    Cardiomegaly,
    Edema,
    PleuralEffusion,
    Pneumonia,
    Pneumothorax,
    NoFinding,
}

impl ToyClass {
    pub const ALL: [ToyClass; 6] = [
        ToyClass::Cardiomegaly,
        ToyClass::Edema,
        ToyClass::PleuralEffusion,
        ToyClass::Pneumonia,
        ToyClass::Pneumothorax,
        ToyClass::NoFinding,
    ];

    /// The five renderable abnormalities (everything except "no finding").
    pub const FINDINGS: [ToyClass; 5] = [
        ToyClass::Cardiomegaly,
        ToyClass::Edema,
        ToyClass::PleuralEffusion,
        ToyClass::Pneumonia,
        ToyClass::Pneumothorax,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> LabelClass {
        match self {
            ToyClass::Cardiomegaly => LabelClass::Cardiomegaly,
            ToyClass::Edema => LabelClass::Edema,
            ToyClass::PleuralEffusion => LabelClass::PleuralEffusion,
            ToyClass::Pneumonia => LabelClass::Pneumonia,
            ToyClass::Pneumothorax => LabelClass::Pneumothorax,
            ToyClass::NoFinding => LabelClass::NoFinding,
        }
    }

    pub fn name(self) -> &'static str {
        self.label().name()
    }

    pub fn from_label(l: LabelClass) -> Option<ToyClass> {
        ToyClass::ALL.into_iter().find(|t| t.label() == l)
    }
}

/// Ternary label state as produced by a rule-based report labeler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Mention {
    Present,
    Absent,
    #[default]
    Unmentioned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct LabelVector(pub [Mention; 14]);

impl LabelVector {
    pub fn get(&self, c: LabelClass) -> Mention {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: LabelClass, m: Mention) {
        self.0[c.index()] = m;
    }

    pub fn is_positive(&self, c: LabelClass) -> bool {
        self.get(c) == Mention::Present
    }

    pub fn positives(&self) -> Vec<LabelClass> {
        LabelClass::ALL
            .into_iter()
            .filter(|c| self.is_positive(*c))
            .collect()
    }

    /// Binary targets over the six toy classes.
    pub fn toy_targets(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for t in ToyClass::ALL {
            if self.is_positive(t.label()) {
                out[t.index()] = 1.0;
            }
        }
        out
    }

    /// Compact wire form: one character per class (`1` present, `0` absent, `-` unmentioned).
    pub fn encode(&self) -> String {
        self.0
            .iter()
            .map(|m| match m {
                Mention::Present => '1',
                Mention::Absent => '0',
                Mention::Unmentioned => '-',
            })
            .collect()
    }

    pub fn decode(s: &str) -> Option<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 14 {
            return None;
        }
        let mut out = LabelVector::default();
        for (i, c) in chars.into_iter().enumerate() {
            out.0[i] = match c {
                '1' => Mention::Present,
                '0' => Mention::Absent,
                '-' => Mention::Unmentioned,
                _ => return None,
            };
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    PA,
    AP,
    LAT,
}

impl View {
    pub const ALL: [View; 3] = [View::PA, View::AP, View::LAT];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image-caption pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub record_id: String,
    pub impression: String,
    pub view: View,
    pub labels: LabelVector,
    pub split: Split,
    /// Patient subgroup tag (10..=19), used for holdout construction.
    pub subgroup: u8,
}

impl ReportRecord {
    pub fn is_no_finding(&self) -> bool {
        self.labels.is_positive(LabelClass::NoFinding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_vector_wire_form_round_trips() {
        let mut v = LabelVector::default();
        v.set(LabelClass::Edema, Mention::Present);
        v.set(LabelClass::Pneumothorax, Mention::Absent);
        let s = v.encode();
        assert_eq!(s.len(), 14);
        assert_eq!(LabelVector::decode(&s), Some(v));
        assert_eq!(LabelVector::decode("xx"), None);
    }

    #[test]
    fn toy_classes_map_to_distinct_label_slots() {
        let mut slots: Vec<usize> = ToyClass::ALL.iter().map(|t| t.label().index()).collect();
        slots.sort();
        slots.dedup();
        assert_eq!(slots.len(), 6);
    }
}
