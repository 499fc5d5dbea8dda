use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Punctuation included in the default English character inventory.
pub const DEFAULT_PUNCTUATION: &str = ".,;:!?'\"-()";

/// Ordered character inventory with the special decoder tokens appended.
///
/// Printable symbols get the dense ids `0..P`; the end-of-sequence, start
/// and padding tokens follow as `P`, `P + 1` and `P + 2`. The decoder
/// predicts over the printable symbols plus end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::config("charset", "no symbols"));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, &c) in symbols.iter().enumerate() {
            if c.is_whitespace() || c.is_control() {
                return Err(Error::config(
                    "charset",
                    format!("symbol {c:?} is not printable"),
                ));
            }
            if index.insert(c, id).is_some() {
                return Err(Error::config("charset", format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// ASCII letters, digits and [`DEFAULT_PUNCTUATION`].
    pub fn english() -> Self {
        let mut s = String::new();
        s.extend('a'..='z');
        s.extend('A'..='Z');
        s.extend('0'..='9');
        s.push_str(DEFAULT_PUNCTUATION);
        Self::new(&s).expect("default charset is valid")
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Number of printable symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.symbols.len()
    }

    pub fn sos(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.symbols.len() + 2
    }

    /// Size of the decoder output distribution (printable symbols + end token).
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Size of the token vocabulary including start and padding.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    pub fn is_valid(&self, text: &str) -> bool {
        text.chars().all(|c| self.contains(c))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c).ok_or_else(|| Error::Uncovered {
                    symbol: c,
                    context: "charset".into(),
                })
            })
            .collect()
    }

    /// Maps ids back to text, stopping at the first end-of-sequence token.
    /// Special tokens other than end-of-sequence are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != self.eos())
            .filter_map(|&id| self.symbol(id))
            .collect()
    }

    /// Removes symbols outside the charset, returning the filtered text and
    /// the number of dropped symbols.
    pub fn filter(&self, text: &str) -> (String, usize) {
        let mut dropped = 0;
        let kept = text
            .chars()
            .filter(|&c| {
                let ok = self.contains(c);
                if !ok {
                    dropped += 1;
                }
                ok
            })
            .collect();
        (kept, dropped)
    }
}

impl Default for Charset {
    fn default() -> Self {
        Self::english()
    }
}

impl Serialize for Charset {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for Charset {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Charset::new(&s).map_err(serde::de::Error::custom)
    }
}
