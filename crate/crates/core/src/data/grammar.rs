//! Caption grammars for the synthetic corpora and the rule-based labeler that
//! inverts the medical one.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelClass, LabelVector, Mention, ToyClass};
use crate::nn::tokenizer::Tokenizer;

/// Patient side. Images follow the radiological convention: the patient's
/// right appears on the image left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

/// A rendered abnormality: class plus attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub class: ToyClass,
    pub side: Side,
    pub size: Size,
}

/// A finding as read back from text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FindingMention {
    pub class: ToyClass,
    pub side: Option<Side>,
    pub size: Option<Size>,
    pub negated: bool,
}

const NO_FINDING_SENTENCES: &[&str] = &["No acute cardiopulmonary process.", "Normal chest."];

fn nouns(class: ToyClass) -> &'static [&'static str] {
    match class {
        ToyClass::Cardiomegaly => &["cardiomegaly"],
        ToyClass::Edema => &["edema", "pulmonary edema"],
        ToyClass::PleuralEffusion => &["effusion", "pleural effusion"],
        ToyClass::Pneumonia => &["pneumonia"],
        ToyClass::Pneumothorax => &["pneumothorax"],
        ToyClass::NoFinding => &[],
    }
}

fn noun_class(word: &str) -> Option<ToyClass> {
    match word {
        "cardiomegaly" => Some(ToyClass::Cardiomegaly),
        "edema" => Some(ToyClass::Edema),
        "effusion" => Some(ToyClass::PleuralEffusion),
        "pneumonia" => Some(ToyClass::Pneumonia),
        "pneumothorax" => Some(ToyClass::Pneumothorax),
        _ => None,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn finding_phrase<R: Rng>(f: &Finding, rng: &mut R) -> String {
    let size = match f.size {
        Size::Large => *["large", "big"].choose(rng).unwrap(),
        Size::Small => *["small", "tiny"].choose(rng).unwrap(),
    };
    let side = match f.side {
        Side::Left => "left-sided",
        Side::Right => "right-sided",
    };
    let noun = nouns(f.class).choose(rng).unwrap();
    format!("{size} {side} {noun}")
}

/// Builds an impression for the given ground truth. `negated` classes get an
/// explicit "No ..." sentence.
pub fn medical_caption<R: Rng>(findings: &[Finding], negated: &[ToyClass], rng: &mut R) -> String {
    let mut sentences = Vec::new();
    if findings.is_empty() {
        sentences.push(NO_FINDING_SENTENCES.choose(rng).unwrap().to_string());
    }
    let mut i = 0;
    while i < findings.len() {
        let head = finding_phrase(&findings[i], rng);
        if i + 1 < findings.len() && rng.gen_bool(0.3) {
            let tail = finding_phrase(&findings[i + 1], rng);
            sentences.push(format!("{} with {}.", capitalize(&head), tail));
            i += 2;
        } else {
            sentences.push(format!("{}.", capitalize(&head)));
            i += 1;
        }
    }
    for c in negated {
        let noun = nouns(*c).choose(rng).unwrap();
        sentences.push(format!("No {noun}."));
    }
    sentences.join(" ")
}

/// Label vector implied by a ground truth, matching what [`label_extract`]
/// reads back from [`medical_caption`].
pub fn truth_labels(findings: &[Finding], negated: &[ToyClass]) -> LabelVector {
    let mut v = LabelVector::default();
    for c in negated {
        v.set(c.label(), Mention::Absent);
    }
    for f in findings {
        v.set(f.class.label(), Mention::Present);
    }
    if findings.is_empty() {
        v.set(LabelClass::NoFinding, Mention::Present);
    }
    v
}

/// Splits text into sentences on `.`, `;` and newlines.
pub fn sentences(text: &str) -> Vec<String> {
    text.split(['.', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn is_no_finding_sentence(words: &[String]) -> bool {
    let has = |w: &str| words.iter().any(|x| x == w);
    (has("no") && has("acute") && has("process"))
        || (words.first().map(String::as_str) == Some("normal") && has("chest"))
        || (words.first().map(String::as_str) == Some("no")
            && (has("finding") || has("findings"))
            && words.len() <= 3)
}

/// Finding mentions per sentence, with the attributes that precede each noun.
pub fn parse_findings(text: &str) -> Vec<FindingMention> {
    let mut out = Vec::new();
    for s in sentences(text) {
        let words = Tokenizer::split(&s);
        let negated = words.first().map(String::as_str) == Some("no");
        let mut side = None;
        let mut size = None;
        for w in &words {
            match w.as_str() {
                "left" => side = Some(Side::Left),
                "right" => side = Some(Side::Right),
                "large" | "big" => size = Some(Size::Large),
                "small" | "tiny" => size = Some(Size::Small),
                other => {
                    if let Some(class) = noun_class(other) {
                        out.push(FindingMention {
                            class,
                            side,
                            size,
                            negated,
                        });
                        side = None;
                        size = None;
                    }
                }
            }
        }
    }
    out
}

/// Rule-based labeler over the grammar's phrase inventory. Positive mentions
/// win over negations of the same class; unmatched text stays unmentioned.
pub fn label_extract(impression: &str) -> LabelVector {
    let mut v = LabelVector::default();
    for s in sentences(impression) {
        let words = Tokenizer::split(&s);
        if is_no_finding_sentence(&words) {
            v.set(LabelClass::NoFinding, Mention::Present);
        }
    }
    for m in parse_findings(impression) {
        let label = m.class.label();
        if m.negated {
            if v.get(label) != Mention::Present {
                v.set(label, Mention::Absent);
            }
        } else {
            v.set(label, Mention::Present);
        }
    }
    v
}

/// Shapes of the general-domain corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneralShape {
    Circle,
    Square,
    Bar,
    Ring,
}

impl GeneralShape {
    pub const ALL: [GeneralShape; 4] = [
        GeneralShape::Circle,
        GeneralShape::Square,
        GeneralShape::Bar,
        GeneralShape::Ring,
    ];

    pub fn word(self) -> &'static str {
        match self {
            GeneralShape::Circle => "circle",
            GeneralShape::Square => "square",
            GeneralShape::Bar => "bar",
            GeneralShape::Ring => "ring",
        }
    }
}

/// Ground truth of one general-domain picture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralScene {
    pub shape: GeneralShape,
    pub bright: bool,
    pub top: bool,
    pub left: bool,
}

impl GeneralScene {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            shape: *GeneralShape::ALL.choose(rng).unwrap(),
            bright: rng.gen_bool(0.5),
            top: rng.gen_bool(0.5),
            left: rng.gen_bool(0.5),
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "A {} {} in the {} {} corner.",
            if self.bright { "bright" } else { "dark" },
            self.shape.word(),
            if self.top { "top" } else { "bottom" },
            if self.left { "left" } else { "right" },
        )
    }

    /// Class index used when clustering general captions.
    pub fn class_index(&self) -> usize {
        self.shape as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extracts_present_with_attributes() {
        let v = label_extract("Large left-sided effusion.");
        assert_eq!(v.get(LabelClass::PleuralEffusion), Mention::Present);
        let m = parse_findings("Large left-sided effusion.");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].side, Some(Side::Left));
        assert_eq!(m[0].size, Some(Size::Large));
    }

    #[test]
    fn negation_maps_to_absent() {
        let v = label_extract("No effusion.");
        assert_eq!(v.get(LabelClass::PleuralEffusion), Mention::Absent);
    }

    #[test]
    fn empty_text_is_all_unmentioned() {
        assert_eq!(label_extract(""), LabelVector::default());
        assert_eq!(label_extract("zebra crossing"), LabelVector::default());
    }

    #[test]
    fn caption_round_trip_over_random_truths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
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
            findings.shuffle(&mut rng);
            let cap = medical_caption(&findings, &negated, &mut rng);
            assert_eq!(label_extract(&cap), truth_labels(&findings, &negated), "{cap}");
            let mentions: Vec<_> = parse_findings(&cap).into_iter().filter(|m| !m.negated).collect();
            assert_eq!(mentions.len(), findings.len());
            for (m, f) in mentions.iter().zip(&findings) {
                assert_eq!((m.class, m.side, m.size), (f.class, Some(f.side), Some(f.size)));
            }
        }
    }

    #[test]
    fn general_captions_use_known_words() {
        let t = Tokenizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ids = t.encode(&GeneralScene::random(&mut rng).caption()).unwrap();
            assert!(!ids.contains(&t.unk_id()));
        }
    }
}
