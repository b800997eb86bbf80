//! Character-level vocabulary with reserved control tokens.

use std::collections::HashMap;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Printed in place of unknown characters when decoding.
pub const UNK_MARK: char = '\u{FFFD}';

pub const DEFAULT_ALPHABET: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Symbols get ids `4..` in the order given; duplicates are rejected.
    pub fn new(alphabet: &str) -> Result<Self> {
        let symbols: Vec<char> = alphabet.nfc().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if c == UNK_MARK || c.is_control() {
                return Err(Error::Argument(format!("{c:?} cannot be a vocabulary symbol")));
            }
            if index.insert(c, RESERVED + i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocab { symbols, index })
    }

    pub fn len(&self) -> usize {
        RESERVED + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn alphabet(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    /// NFC-normalizes, maps characters (unknown → UNK) and wraps in BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = vec![BOS];
        out.extend(text.nfc().map(|c| self.id(c)));
        out.push(EOS);
        out
    }

    /// Maps ids back to text, skipping PAD/BOS/EOS and marking UNK.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD | BOS | EOS => None,
                UNK => Some(UNK_MARK),
                _ => Some(self.symbols.get(id - RESERVED).copied().unwrap_or(UNK_MARK)),
            })
            .collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(DEFAULT_ALPHABET).expect("default alphabet is valid")
    }
}
