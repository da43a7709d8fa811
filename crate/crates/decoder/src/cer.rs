use crate::error::{DecoderError, Result};

/// Unit-cost Levenshtein distance between character sequences.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of one hypothesis.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(DecoderError::EmptyReference);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Corpus-level accumulation: total edits over total reference characters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CerTotals {
    pub edits: usize,
    pub reference_chars: usize,
}

impl CerTotals {
    pub fn add(&mut self, reference: &str, hypothesis: &str) -> Result<f64> {
        let r: Vec<char> = reference.chars().collect();
        if r.is_empty() {
            return Err(DecoderError::EmptyReference);
        }
        let h: Vec<char> = hypothesis.chars().collect();
        let e = edit_distance(&r, &h);
        self.edits += e;
        self.reference_chars += r.len();
        Ok(e as f64 / r.len() as f64)
    }

    pub fn rate(&self) -> f64 {
        if self.reference_chars == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference_chars as f64
        }
    }
}
