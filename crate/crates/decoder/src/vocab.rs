//! Character inventory. Ids `0..V` are characters; the CTC blank is `V`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{DecoderError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if matches!(c, '\n' | '\r' | '\t') {
                return Err(DecoderError::Vocabulary(format!("control character {c:?} cannot be a label")));
            }
            if index.insert(c, i).is_some() {
                return Err(DecoderError::Vocabulary(format!("duplicate character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(DecoderError::Vocabulary("no characters".into()));
        }
        Ok(Self { chars, index })
    }

    /// Every distinct character of the texts, in code point order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::new(set.into_iter().collect())
    }

    /// One character per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (None, _) => continue,
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(DecoderError::Vocabulary(format!(
                        "line {}: expected a single character, got {line:?}",
                        i + 1
                    )))
                }
            }
        }
        Self::new(chars)
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| DecoderError::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| DecoderError::io(path, e))
    }

    /// Number of characters `V`, excluding the blank.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.chars.len()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Encodes one transcript; `line` is reported on out-of-vocabulary characters.
    pub fn encode_line(&self, text: &str, line: usize) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or(DecoderError::OutOfVocabulary { line, ch: c }))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        self.encode_line(text, 1)
    }

    /// Ids outside `0..V` (including the blank) are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_sorted_and_round_trips() {
        let v = Vocabulary::from_texts(["cab", "a c"]).unwrap();
        assert_eq!(v.chars(), &[' ', 'a', 'b', 'c']);
        assert_eq!(v.blank(), 4);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert_eq!(v.decode(&v.encode("a cab").unwrap()), "a cab");
    }

    #[test]
    fn rejects_oov_and_bad_files() {
        let v = Vocabulary::from_texts(["ab"]).unwrap();
        assert!(matches!(v.encode_line("abz", 7), Err(DecoderError::OutOfVocabulary { line: 7, ch: 'z' })));
        assert!(Vocabulary::parse("a\nbc\n").is_err());
        assert!(Vocabulary::parse("a\na\n").is_err());
        assert!(Vocabulary::parse("").is_err());
    }

    #[test]
    fn multibyte_characters() {
        let v = Vocabulary::from_texts(["你好世界"]).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }
}
