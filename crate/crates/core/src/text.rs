//! Prompt vocabulary and token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const PAD_ID: usize = 0;

/// Token ids where only the first `valid` positions are real tokens; the
/// rest is padding and is ignored by the text encoder's attention and
/// pooling regardless of the ids stored there.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<usize>,
    valid: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        let valid = ids.len();
        TokenSeq { ids, valid }
    }

    pub fn padded(ids: Vec<usize>, valid: usize) -> Result<Self> {
        if valid > ids.len() {
            return Err(Error::argument(format!(
                "valid length {valid} exceeds token count {}",
                ids.len()
            )));
        }
        Ok(TokenSeq { ids, valid })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid(&self) -> usize {
        self.valid
    }
}

/// Whitespace tokenizer over a closed word list. Id 0 is the pad token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from every word in `prompts`, sorted.
    pub fn from_prompts<'a, I>(prompts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: Vec<String> = prompts
            .into_iter()
            .flat_map(|p| p.split_whitespace().map(str::to_lowercase))
            .collect();
        words.sort();
        words.dedup();
        words.insert(0, PAD.to_string());
        Vocabulary { words }
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

    pub fn encode(&self, prompt: &str) -> Result<TokenSeq> {
        let ids = prompt
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words
                    .iter()
                    .position(|v| *v == w)
                    .filter(|&i| i != PAD_ID)
                    .ok_or_else(|| Error::argument(format!("unknown word `{w}` in prompt")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::argument("empty prompt"));
        }
        Ok(TokenSeq::new(ids))
    }

    pub fn decode(&self, tokens: &TokenSeq) -> String {
        tokens.ids()[..tokens.valid()]
            .iter()
            .map(|&i| self.words.get(i).map_or("?", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
