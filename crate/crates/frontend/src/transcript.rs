//! Transcript files: UTF-8, one `utt_id<TAB>text` per line.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{FrontendError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub utt_id: String,
    pub text: String,
}

/// Parses transcript text; blank lines are skipped, ids must be unique.
pub fn parse_transcripts(text: &str) -> Result<Vec<Transcript>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| FrontendError::Transcript {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (id, body) = line.split_once('\t').ok_or_else(|| err("missing tab separator"))?;
        if id.is_empty() {
            return Err(err("empty utterance id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(&format!("duplicate utterance id {id}")));
        }
        out.push(Transcript {
            utt_id: id.to_string(),
            text: body.to_string(),
        });
    }
    Ok(out)
}

pub fn read_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FrontendError::io(path, e))?;
    parse_transcripts(&text)
}

pub fn format_transcripts(items: &[Transcript]) -> String {
    items.iter().map(|t| format!("{}\t{}\n", t.utt_id, t.text)).collect()
}

pub fn write_transcripts(path: impl AsRef<Path>, items: &[Transcript]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_transcripts(items)).map_err(|e| FrontendError::io(path, e))
}
