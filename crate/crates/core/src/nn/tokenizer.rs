//! Closed-vocabulary word/punctuation tokenizer with a hard token limit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Default sequence limit, begin and end markers included.
pub const DEFAULT_MAX_TOKENS: usize = 77;

/// Words of the medical caption grammar.
pub const MEDICAL_WORDS: &[&str] = &[
    "large", "big", "small", "tiny", "left", "right", "sided", "cardiomegaly", "edema",
    "pulmonary", "effusion", "pleural", "pneumonia", "pneumothorax", "no", "acute",
    "cardiopulmonary", "process", "with", "and", "finding", "findings", "normal", "chest",
    "unchanged", "slight", "view",
];

/// Words of the general-domain caption grammar.
pub const GENERAL_WORDS: &[&str] = &[
    "a", "an", "the", "bright", "dark", "gray", "circle", "square", "bar", "ring", "cross",
    "top", "bottom", "middle", "corner", "in", "on", "of", "upper", "lower", "photo", "picture",
    "scene", "two", "one", "vertical", "horizontal",
];

pub const PUNCTUATION: &[&str] = &[".", ",", "-", ":", ";", "(", ")", "/"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: BTreeMap<String, usize>,
    words: Vec<String>,
    pub max_tokens: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::toy(DEFAULT_MAX_TOKENS)
    }
}

impl Tokenizer {
    /// Vocabulary covering both toy grammars.
    pub fn toy(max_tokens: usize) -> Self {
        let mut t = Self {
            vocab: BTreeMap::new(),
            words: Vec::new(),
            max_tokens,
        };
        for w in [PAD, BOS, EOS, UNK]
            .iter()
            .chain(PUNCTUATION)
            .chain(MEDICAL_WORDS)
            .chain(GENERAL_WORDS)
        {
            t.push_word(w);
        }
        t
    }

    fn push_word(&mut self, w: &str) -> usize {
        if let Some(&id) = self.vocab.get(w) {
            return id;
        }
        let id = self.words.len();
        self.vocab.insert(w.to_string(), id);
        self.words.push(w.to_string());
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn pad_id(&self) -> usize {
        self.vocab[PAD]
    }

    pub fn bos_id(&self) -> usize {
        self.vocab[BOS]
    }

    pub fn eos_id(&self) -> usize {
        self.vocab[EOS]
    }

    pub fn unk_id(&self) -> usize {
        self.vocab[UNK]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.vocab.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Registers a new placeholder token such as `<chest-xray>`.
    pub fn add_token(&mut self, token: &str) -> Result<usize> {
        if self.vocab.contains_key(token) {
            return Err(Error::invalid(format!("token {token} already in vocabulary")));
        }
        Ok(self.push_word(token))
    }

    /// Splits text into lower-cased word pieces: `<...>` placeholders stay
    /// whole, alphanumeric runs form words, every other visible character is
    /// its own token.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c == '<' {
                if let Some(end) = chars[i..].iter().position(|&x| x == '>') {
                    out.push(chars[i..=i + end].iter().collect::<String>().to_lowercase());
                    i += end + 1;
                } else {
                    out.push("<".into());
                    i += 1;
                }
            } else if c.is_alphanumeric() {
                let start = i;
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
            } else {
                out.push(c.to_string());
                i += 1;
            }
        }
        out
    }

    /// Number of tokens `encode` would produce, ignoring the limit.
    pub fn count(&self, text: &str) -> usize {
        Self::split(text).len() + 2
    }

    /// `begin + body + end`; over-long text is reported, never truncated.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let pieces = Self::split(text);
        let count = pieces.len() + 2;
        if count > self.max_tokens {
            return Err(Error::PromptTooLong {
                count,
                limit: self.max_tokens,
            });
        }
        let mut ids = Vec::with_capacity(count);
        ids.push(self.bos_id());
        ids.extend(
            pieces
                .iter()
                .map(|p| self.vocab.get(p).copied().unwrap_or_else(|| self.unk_id())),
        );
        ids.push(self.eos_id());
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.word(i))
            .filter(|w| ![PAD, BOS, EOS].contains(w))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_begin_end() {
        let t = Tokenizer::default();
        assert_eq!(t.encode("").unwrap(), vec![t.bos_id(), t.eos_id()]);
    }

    #[test]
    fn limit_boundary() {
        let t = Tokenizer::default();
        let exact = vec!["no"; 75].join(" ");
        assert_eq!(t.encode(&exact).unwrap().len(), 77);
        let over = vec!["no"; 76].join(" ");
        match t.encode(&over) {
            Err(Error::PromptTooLong { count, limit }) => {
                assert_eq!((count, limit), (78, 77));
            }
            other => panic!("expected over-limit, got {other:?}"),
        }
    }

    #[test]
    fn splits_punctuation_and_placeholders() {
        assert_eq!(
            Tokenizer::split("Large left-sided effusion. <chest-xray>"),
            vec!["large", "left", "-", "sided", "effusion", ".", "<chest-xray>"]
        );
    }

    #[test]
    fn unknown_words_map_to_unk_and_new_tokens_extend() {
        let mut t = Tokenizer::default();
        let ids = t.encode("zebra").unwrap();
        assert_eq!(ids[1], t.unk_id());
        let n = t.vocab_size();
        let id = t.add_token("<chest-xray>").unwrap();
        assert_eq!((id, t.vocab_size()), (n, n + 1));
        assert!(t.add_token("<chest-xray>").is_err());
        assert_eq!(t.encode("<chest-xray>").unwrap()[1], id);
    }
}
