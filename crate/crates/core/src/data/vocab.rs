use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Separator placed between the persona segment and the query.
pub const SEP: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
/// Placeholder used by the encoder-only masked-token ablation.
pub const MASK: usize = 5;

const RESERVED: [&str; 6] = ["[pad]", "[unk]", "[s]", "[bos]", "[eos]", "[mask]"];

/// Token/id bijection. Reserved ids occupy `0..6`; the rest are sorted so a
/// vocabulary built from the same word set is identical regardless of the
/// order the corpus was read in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(split_words)
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[unk]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercase, split on whitespace and punctuation, map OOV words to unk.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined surface form; reserved tokens other than unk are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id == UNK || id >= RESERVED.len())
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// The tokenizer's word split: lowercase, whitespace-separated, with every
/// ASCII punctuation character standing alone.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty() {
        let v = Vocab::build(["a b"]);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn round_trip_up_to_case() {
        let v = Vocab::build(["i have two dogs"]);
        let ids = v.tokenize("I have two dogs");
        assert_eq!(v.detokenize(&ids), "i have two dogs");
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(
            split_words("Do you have a pet?"),
            ["do", "you", "have", "a", "pet", "?"]
        );
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocab::build(["hello"]);
        assert_eq!(v.tokenize("hello world"), vec![v.id("hello"), UNK]);
    }

    #[test]
    fn reserved_ids_stable() {
        let v = Vocab::build(["zebra apple"]);
        assert_eq!(v.token(SEP), "[s]");
        assert_eq!(v.token(EOS), "[eos]");
        assert_eq!(v.id("apple"), 6);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
