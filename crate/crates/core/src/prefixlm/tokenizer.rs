//! Whitespace word tokenizer with a byte fallback.
//!
//! Ids 0..255 are reserved for raw bytes so every string is encodable; word
//! tokens follow, ordered by corpus frequency (descending) and then
//! lexicographically, which makes the vocabulary a pure function of the
//! training texts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PrefixError;

/// Number of reserved byte tokens at the start of every vocabulary.
pub const BYTE_TOKENS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    words: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Tokenizer {
    /// Builds a vocabulary from training texts, keeping at most
    /// `max_word_tokens` distinct words on top of the byte tokens.
    pub fn build(texts: &[&str], max_word_tokens: usize) -> Tokenizer {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_word_tokens);

        let mut tokens: Vec<String> = (0..=255u8).map(byte_token).collect();
        let mut words = HashMap::new();
        for (word, _) in ranked {
            words.insert(word.to_string(), tokens.len());
            tokens.push(word.to_string());
        }
        Tokenizer { tokens, words }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Splits on whitespace; unknown words fall back to their bytes.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, PrefixError> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.words.get(word) {
                Some(&id) => ids.push(id),
                None => ids.extend(word.bytes().map(|b| b as usize)),
            }
        }
        if ids.is_empty() {
            return Err(PrefixError::EmptySentence(text.to_string()));
        }
        Ok(ids)
    }

    pub fn store(&self, path: &Path) -> Result<(), PrefixError> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| PrefixError::MalformedVocab(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer, PrefixError> {
        let raw = std::fs::read_to_string(path)?;
        let file: VocabFile =
            serde_json::from_str(&raw).map_err(|e| PrefixError::MalformedVocab(e.to_string()))?;
        if file.tokens.len() < BYTE_TOKENS {
            return Err(PrefixError::MalformedVocab(format!(
                "vocabulary holds {} tokens, the {BYTE_TOKENS} byte tokens are mandatory",
                file.tokens.len()
            )));
        }
        for b in 0..=255u8 {
            if file.tokens[b as usize] != byte_token(b) {
                return Err(PrefixError::MalformedVocab(format!(
                    "token {} should be the byte token {}",
                    b,
                    byte_token(b)
                )));
            }
        }
        let mut words = HashMap::new();
        for (id, word) in file.tokens.iter().enumerate().skip(BYTE_TOKENS) {
            if words.insert(word.clone(), id).is_some() {
                return Err(PrefixError::MalformedVocab(format!(
                    "duplicate token {word:?}"
                )));
            }
        }
        Ok(Tokenizer {
            tokens: file.tokens,
            words,
        })
    }
}
