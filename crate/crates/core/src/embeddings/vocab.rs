use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Character → index map. Index 0 is reserved for unknown characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

pub const UNK: usize = 0;

impl CharVocab {
    /// Vocabulary of every character in `texts`, in code-point order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from(set.into_iter().collect::<Vec<_>>())
    }

    /// Number of rows including UNK.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn get(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, s: &str) -> Vec<usize> {
        s.chars().map(|c| self.get(c)).collect()
    }
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_maps_to_zero_and_serde_round_trips() {
        let v = CharVocab::build(["baca", "ñ"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("abcñz"), vec![1, 2, 3, 4, UNK]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<CharVocab>(&json).unwrap(), v);
    }
}
