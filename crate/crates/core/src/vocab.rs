//! Token vocabulary for caption text: reserved control tokens plus the
//! sorted unique words of the training captions.

use std::collections::HashMap;
use std::fmt;

use crate::caption::tokenize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, PartialEq, Eq)]
pub enum VocabError {
    UnknownToken(String),
    IndexOutOfRange(usize),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::UnknownToken(t) => write!(f, "token {t:?} not in vocabulary"),
            VocabError::IndexOutOfRange(i) => write!(f, "token index {i} out of vocabulary"),
        }
    }
}

impl std::error::Error for VocabError {}

/// Bijective token ↔ index map with fixed reserved slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from caption strings: reserved tokens first, then every
    /// distinct word in sorted order. Deterministic in the caption set.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(captions: I) -> Vocabulary {
        let mut words: Vec<String> = captions
            .into_iter()
            .flat_map(|c| tokenize(c))
            .collect();
        words.sort();
        words.dedup();
        let mut tokens =
            vec![PAD_TOKEN.to_string(), BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary, VocabError> {
        for (slot, expected) in [(PAD, PAD_TOKEN), (BOS, BOS_TOKEN), (EOS, EOS_TOKEN)] {
            if tokens.get(slot).map(String::as_str) != Some(expected) {
                return Err(VocabError::UnknownToken(expected.to_string()));
            }
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(VocabError::UnknownToken("duplicate token".to_string()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Result<usize, VocabError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn token_at(&self, index: usize) -> Result<&str, VocabError> {
        self.tokens
            .get(index)
            .map(String::as_str)
            .ok_or(VocabError::IndexOutOfRange(index))
    }

    /// `<bos> w_1 … w_n <eos>`, padded with `<pad>` to `max_len` if longer
    /// sequences are cut off at `max_len` (keeping the final `<eos>`).
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<Vec<usize>, VocabError> {
        let mut out = vec![BOS];
        for word in tokenize(caption) {
            out.push(self.index_of(&word)?);
        }
        out.push(EOS);
        if out.len() > max_len {
            out.truncate(max_len - 1);
            out.push(EOS);
        }
        Ok(out)
    }

    /// Join tokens back into text, dropping control tokens.
    pub fn decode(&self, indices: &[usize]) -> Result<String, VocabError> {
        let mut words = Vec::new();
        for &i in indices {
            let token = self.token_at(i)?;
            if i != PAD && i != BOS && i != EOS {
                words.push(token);
            }
        }
        Ok(words.join(" "))
    }
}
