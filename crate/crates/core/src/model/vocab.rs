use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
pub const PUNCT: [&str; 4] = ["[", "]", "?", ","];

/// Word-level vocabulary. Uppercase words that are not in the vocabulary are
/// spelled letter by letter, which is how reference labels are tokenized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Specials, punctuation and the 26 letters, followed by `words` in
    /// first-seen order.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = [BOS, SEP, EOS].iter().map(|s| s.to_string()).collect();
        all.extend(PUNCT.iter().map(|s| s.to_string()));
        all.extend((b'A'..=b'Z').map(|c| char::from(c).to_string()));
        let mut v = Vocab::from(all);
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < 3
    }

    fn is_letter(&self, id: usize) -> bool {
        let w = &self.words[id];
        w.len() == 1 && w.as_bytes()[0].is_ascii_uppercase()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut spaced = String::with_capacity(text.len() + 8);
        for c in text.chars() {
            if PUNCT.iter().any(|p| p.starts_with(c)) {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else {
                spaced.push(c);
            }
        }
        let mut out = Vec::new();
        for piece in spaced.split_whitespace() {
            if let Some(id) = self.id(piece) {
                out.push(id);
            } else if piece.chars().all(|c| c.is_ascii_uppercase()) {
                out.extend(piece.chars().map(|c| self.index[&c.to_string()]));
            } else {
                return Err(Error::Invalid(format!("word {piece:?} is not in the vocabulary")));
            }
        }
        Ok(out)
    }

    /// Inverse of [`Self::tokenize`] up to whitespace; specials are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut pieces: Vec<String> = Vec::new();
        let mut prev_letter = false;
        for &id in ids {
            if id >= self.len() || self.is_special(id) {
                prev_letter = false;
                continue;
            }
            let letter = self.is_letter(id);
            match pieces.last_mut() {
                Some(last) if letter && prev_letter => last.push_str(&self.words[id]),
                _ => pieces.push(self.words[id].clone()),
            }
            prev_letter = letter;
        }
        pieces
            .join(" ")
            .replace("[ ", "[")
            .replace(" ]", "]")
            .replace(" ?", "?")
            .replace(" ,", ",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_spelled_and_rejoined() {
        let v = Vocab::new(["kavor", "and", "UNKNOWN"]);
        let ids = v.tokenize("kavor [QXB] and UNKNOWN").unwrap();
        assert_eq!(ids.len(), 1 + 1 + 3 + 1 + 1 + 1);
        assert_eq!(v.detokenize(&ids), "kavor [QXB] and UNKNOWN");
    }

    #[test]
    fn unknown_lowercase_word_is_an_error() {
        let v = Vocab::new(["a"]);
        assert!(v.tokenize("a b").is_err());
    }

    #[test]
    fn specials_are_dropped_on_detokenize() {
        let v = Vocab::new(["what", "is"]);
        let mut ids = vec![v.bos()];
        ids.extend(v.tokenize("what is?").unwrap());
        ids.push(v.eos());
        assert_eq!(v.detokenize(&ids), "what is?");
    }

    #[test]
    fn serde_round_trip_keeps_ids() {
        let v = Vocab::new(["x", "y"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), v.id("y"));
    }
}
