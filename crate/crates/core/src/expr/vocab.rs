use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("character `{ch}` at position {position} is not in the vocabulary")]
    UnknownToken { ch: char, position: usize },
    #[error("token id {0} is out of range")]
    UnknownId(usize),
}

/// Every character the canonical printer can emit for a skeleton, plus the
/// characters of numeric literals.
pub const DEFAULT_CHARS: &str = "()*+-./0123456789C^cegilnopqrstx";

/// Character-level vocabulary with `<PAD>`, `<SOS>`, `<EOS>` at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;
    const SPECIALS: usize = 3;

    /// Builds a vocabulary from a set of characters. Duplicates are dropped;
    /// the order of first appearance fixes the ids.
    pub fn from_chars(chars: &str) -> Vocabulary {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for ch in chars.chars() {
            if let std::collections::hash_map::Entry::Vacant(slot) = index.entry(ch) {
                slot.insert(out.len() + Self::SPECIALS);
                out.push(ch);
            }
        }
        Vocabulary { chars: out, index }
    }

    /// Number of token ids, specials included.
    pub fn len(&self) -> usize {
        self.chars.len() + Self::SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn token_text(&self, id: usize) -> Option<String> {
        match id {
            Self::PAD => Some("<PAD>".into()),
            Self::SOS => Some("<SOS>".into()),
            Self::EOS => Some("<EOS>".into()),
            _ => self.chars.get(id - Self::SPECIALS).map(|c| c.to_string()),
        }
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    /// `<SOS> s <EOS>` as ids.
    pub fn encode(&self, s: &str) -> Result<Vec<usize>, TokenError> {
        let mut ids = Vec::with_capacity(s.len() + 2);
        ids.push(Self::SOS);
        for (position, ch) in s.chars().enumerate() {
            ids.push(
                self.id(ch)
                    .ok_or(TokenError::UnknownToken { ch, position })?,
            );
        }
        ids.push(Self::EOS);
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode): skips `<SOS>` and `<PAD>`, stops
    /// at the first `<EOS>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenError> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                Self::EOS => break,
                Self::SOS | Self::PAD => {}
                _ => out.push(
                    *self
                        .chars
                        .get(id - Self::SPECIALS)
                        .ok_or(TokenError::UnknownId(id))?,
                ),
            }
        }
        Ok(out)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_chars(DEFAULT_CHARS)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.chars().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Vocabulary::from_chars(&String::deserialize(d)?))
    }
}
