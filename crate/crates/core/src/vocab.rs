//! Token alphabet and bounded contexts.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const EOS_SURFACE: &str = "<eos>";
pub const PAD_SURFACE: &str = "<pad>";

/// Finite ordered token alphabet. Ids are dense, 0..len. Always contains
/// EOS and PAD; PAD is an implementation token and carries no probability
/// mass in any kernel output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, usize>,
    eos: usize,
    pad: usize,
}

impl Vocabulary {
    /// Build a vocabulary from surfaces in order; ids follow list position.
    /// `<eos>` and `<pad>` are appended if absent.
    pub fn new<S: AsRef<str>>(surfaces: &[S]) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut all: Vec<String> = Vec::with_capacity(surfaces.len() + 2);
        let mut index = HashMap::new();
        for s in surfaces {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::EmptySurface);
            }
            if s.chars().any(char::is_whitespace) {
                return Err(Error::WhitespaceSurface(s.to_string()));
            }
            if index.insert(s.to_string(), all.len()).is_some() {
                return Err(Error::DuplicateSurface(s.to_string()));
            }
            all.push(s.to_string());
        }
        for special in [EOS_SURFACE, PAD_SURFACE] {
            if !index.contains_key(special) {
                index.insert(special.to_string(), all.len());
                all.push(special.to_string());
            }
        }
        let eos = index[EOS_SURFACE];
        let pad = index[PAD_SURFACE];
        Ok(Self { surfaces: all, index, eos, pad })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least EOS and PAD
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Number of tokens eligible to carry probability mass (all but PAD).
    pub fn support_size(&self) -> usize {
        self.surfaces.len() - 1
    }

    pub fn surface(&self, id: usize) -> Result<&str> {
        self.surfaces
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.surfaces.len() })
    }

    pub fn id(&self, surface: &str) -> Result<usize> {
        self.index
            .get(surface)
            .copied()
            .ok_or_else(|| Error::UnknownSurface(surface.to_string()))
    }

    pub fn contains_id(&self, id: usize) -> bool {
        id < self.surfaces.len()
    }

    /// Encode whitespace-separated surfaces into token ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    /// Decode token ids into a space-joined surface string.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids.iter().map(|&id| self.surface(id)).collect();
        Ok(parts?.join(" "))
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if !self.contains_id(id) {
                return Err(Error::TokenOutOfRange { id, size: self.surfaces.len() });
            }
        }
        Ok(())
    }

    /// One surface per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.surfaces {
            out.push_str(s);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        Self::new(&lines)
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocabulary({} tokens)", self.surfaces.len())
    }
}

/// A bounded token sequence: kernel input. Length is capped at `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    ids: Vec<usize>,
    max_len: usize,
}

impl Context {
    pub fn new(ids: Vec<usize>, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::ContextTooLong { len: ids.len(), max: max_len });
        }
        Ok(Self { ids, max_len })
    }

    /// Unbounded convenience constructor (max_len = usize::MAX).
    pub fn unbounded(ids: Vec<usize>) -> Self {
        Self { ids, max_len: usize::MAX }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Last `n` token ids (the order-n state).
    pub fn suffix(&self, n: usize) -> &[usize] {
        let start = self.ids.len().saturating_sub(n);
        &self.ids[start..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_assignment_appends_specials() {
        let v = Vocabulary::new(&["a", "b"]).unwrap();
        assert_eq!(v.id("a").unwrap(), 0);
        assert_eq!(v.id("b").unwrap(), 1);
        assert_eq!(v.eos(), 2);
        assert_eq!(v.pad(), 3);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn duplicate_surface_rejected() {
        let err = Vocabulary::new(&["a", "a"]).unwrap_err();
        assert!(matches!(err, Error::DuplicateSurface(s) if s == "a"));
    }

    #[test]
    fn empty_vocabulary_rejected() {
        let err = Vocabulary::new::<&str>(&[]).unwrap_err();
        assert!(matches!(err, Error::EmptyVocabulary));
    }

    #[test]
    fn whitespace_surface_rejected() {
        let err = Vocabulary::new(&["a b"]).unwrap_err();
        assert!(matches!(err, Error::WhitespaceSurface(_)));
    }

    #[test]
    fn explicit_specials_not_duplicated() {
        let v = Vocabulary::new(&["a", "<eos>", "b"]).unwrap();
        assert_eq!(v.eos(), 1);
        assert_eq!(v.pad(), 3);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocabulary::new(&["a", "b", "c"]).unwrap();
        let ids = v.encode("c a b a <eos>").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "c a b a <eos>");
    }

    #[test]
    fn context_respects_bound() {
        assert!(Context::new(vec![0, 1, 2], 2).is_err());
        let c = Context::new(vec![0, 1, 2], 3).unwrap();
        assert_eq!(c.suffix(2), &[1, 2]);
        assert_eq!(c.suffix(10), &[0, 1, 2]);
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let v = Vocabulary::new(&["E0", "E1", "=>", ";", "?"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, v);
    }
}
