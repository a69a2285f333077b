use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Spellings of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bijection between token strings and ids. Ids 0..4 are reserved for
/// padding, start, end and unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by the distinct `tokens`, sorted.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let distinct: BTreeSet<String> =
            tokens.into_iter().map(|t| t.as_ref().to_string()).filter(|t| !RESERVED.contains(&t.as_str())).collect();
        let list = RESERVED.iter().map(|s| s.to_string()).chain(distinct).collect();
        Self::from_list(list).expect("reserved tokens first, no duplicates")
    }

    /// Takes `tokens` verbatim as the id order.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid(format!("vocabulary must start with the reserved tokens {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("vocabulary line {}: invalid token {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("vocabulary line {}: duplicate token {t:?}", i + 1)));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_list(text.lines().map(str::to_string).collect())
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids; unknown tokens become [`UNK_ID`]. Returns the ids
    /// and the number of substitutions.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> (Vec<usize>, usize) {
        let mut unk = 0;
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).unwrap_or_else(|| {
                    unk += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, unk)
    }

    /// Token strings for `ids`, skipping padding, start and end markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD_ID | START_ID | END_ID))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK_ID]).to_string())
            .collect()
    }

    /// Hex digest of the id order, stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_fixed_and_lookup_inverts() {
        let v = Vocabulary::from_tokens(["x", "2", "x", r"\frac"]);
        assert_eq!(v.id("<pad>"), Some(PAD_ID));
        assert_eq!(v.id("<s>"), Some(START_ID));
        assert_eq!(v.id("</s>"), Some(END_ID));
        assert_eq!(v.id("<unk>"), Some(UNK_ID));
        assert_eq!(v.len(), 7);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn unknown_tokens_counted() {
        let v = Vocabulary::from_tokens(["a"]);
        let (ids, unk) = v.encode(&["a", "b", "c"]);
        assert_eq!(ids, vec![v.id("a").unwrap(), UNK_ID, UNK_ID]);
        assert_eq!(unk, 2);
    }

    #[test]
    fn duplicates_rejected() {
        let list = RESERVED.iter().map(|s| s.to_string()).chain(["a".into(), "a".into()]).collect();
        assert!(Vocabulary::from_list(list).is_err());
    }

    #[test]
    fn hash_tracks_order() {
        let a = Vocabulary::from_tokens(["a", "b"]);
        let b = Vocabulary::from_tokens(["a", "c"]);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Vocabulary::from_tokens(["b", "a"]).hash());
    }
}
