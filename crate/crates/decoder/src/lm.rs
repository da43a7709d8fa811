//! Character n-gram language model with interpolated absolute discounting.
//!
//! Events are the characters of each transcript followed by `</s>`; every
//! transcript starts from a single `<s>` context. With discount `d`,
//!
//! ```text
//! p(w | h) = (max(c(h w) - d, 0) + d * N1+(h .) * p(w | h')) / c(h)
//! ```
//!
//! where `h'` drops the oldest token of `h`, unseen histories defer to `h'`,
//! and the recursion ends in a uniform distribution over characters and
//! `</s>`. The trained model is stored as a back-off table (full probability
//! for every seen n-gram, `d * N1+(h .) / c(h)` as the back-off weight of
//! every seen history), which is exactly what the ARPA format holds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{DecoderError, Result};
use crate::vocab::Vocabulary;

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_DISCOUNT: f64 = 0.75;
const LN_10: f64 = std::f64::consts::LN_10;
/// ARPA convention for the never-predicted `<s>` unigram.
const NO_PROB: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_bow: f64,
}

/// The last `order - 1` tokens of a hypothesis, starting from `<s>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LmState(Vec<u32>);

impl LmState {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    vocab: Vec<char>,
    /// `tables[k - 1]` holds the k-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

#[derive(Default)]
struct HistoryStats {
    total: u64,
    distinct: u64,
}

impl NGramLM {
    /// Trains on transcripts; an out-of-vocabulary character is reported with its 1-based line.
    pub fn train<'a>(
        transcripts: impl IntoIterator<Item = &'a str>,
        vocab: &Vocabulary,
        order: usize,
        discount: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(DecoderError::Lm("order must be at least 1".into()));
        }
        if !(0.0 < discount && discount < 1.0) {
            return Err(DecoderError::Lm(format!("discount {discount} outside (0, 1)")));
        }
        let v = vocab.len() as u32;
        let (eos, bos) = (v, v + 1);
        let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        let mut lines = 0;
        for (i, text) in transcripts.into_iter().enumerate() {
            let mut tokens = vec![bos];
            tokens.extend(vocab.encode_line(text, i + 1)?.into_iter().map(|id| id as u32));
            tokens.push(eos);
            for end in 1..tokens.len() {
                for k in 1..=order.min(end + 1) {
                    *counts[k - 1].entry(tokens[end + 1 - k..=end].to_vec()).or_default() += 1;
                }
            }
            lines += 1;
        }
        if lines == 0 {
            return Err(DecoderError::Lm("no transcripts to train on".into()));
        }

        // histories of length j live in hist[j]
        let mut hist: Vec<HashMap<Vec<u32>, HistoryStats>> = (0..order).map(|_| HashMap::new()).collect();
        for (k, table) in counts.iter().enumerate() {
            for (gram, &c) in table {
                let s = hist[k].entry(gram[..k].to_vec()).or_default();
                s.total += c;
                s.distinct += 1;
            }
        }
        let outcomes = (v + 1) as f64;
        let interp = |h: &[u32], w: u32| -> f64 {
            let mut p = 1.0 / outcomes;
            for j in 0..=h.len() {
                let ctx = &h[h.len() - j..];
                let Some(s) = hist[j].get(ctx) else { continue };
                let mut gram = ctx.to_vec();
                gram.push(w);
                let c = counts[j].get(&gram).copied().unwrap_or(0) as f64;
                p = ((c - discount).max(0.0) + discount * s.distinct as f64 * p) / s.total as f64;
            }
            p
        };

        let mut tables: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); order];
        for w in 0..=eos {
            tables[0].insert(
                vec![w],
                Entry {
                    log10_prob: interp(&[], w).log10(),
                    log10_bow: 0.0,
                },
            );
        }
        tables[0].insert(
            vec![bos],
            Entry {
                log10_prob: NO_PROB,
                log10_bow: 0.0,
            },
        );
        for k in 2..=order {
            for gram in counts[k - 1].keys() {
                let p = interp(&gram[..k - 1], gram[k - 1]);
                tables[k - 1].insert(
                    gram.clone(),
                    Entry {
                        log10_prob: p.log10(),
                        log10_bow: 0.0,
                    },
                );
            }
        }
        for (j, stats) in hist.iter().enumerate().skip(1) {
            for (h, s) in stats {
                let bow = discount * s.distinct as f64 / s.total as f64;
                let entry = tables[j - 1].get_mut(h).expect("every history is itself a counted n-gram");
                entry.log10_bow = bow.log10();
            }
        }
        Ok(Self {
            order,
            vocab: vocab.chars().to_vec(),
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of characters; `</s>` is this id and `<s>` the next.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab_chars(&self) -> &[char] {
        &self.vocab
    }

    pub fn eos(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn bos(&self) -> u32 {
        self.vocab.len() as u32 + 1
    }

    pub fn initial_state(&self) -> LmState {
        LmState(vec![self.bos()])
    }

    pub fn advance(&self, state: &LmState, w: usize) -> LmState {
        let mut next = state.0.clone();
        next.push(w as u32);
        let keep = self.order.saturating_sub(1);
        if next.len() > keep {
            next.drain(..next.len() - keep);
        }
        LmState(next)
    }

    /// Natural-log probability of character (or `</s>`) `w` after the given context.
    pub fn log_prob(&self, context: &[u32], w: usize) -> f64 {
        assert!(w <= self.vocab.len(), "token {w} is not a character or </s>");
        let w = w as u32;
        let keep = self.order - 1;
        let mut h = &context[context.len().saturating_sub(keep)..];
        let mut acc = 0.0;
        loop {
            let mut gram = h.to_vec();
            gram.push(w);
            if let Some(e) = self.tables[h.len()].get(&gram) {
                return (acc + e.log10_prob) * LN_10;
            }
            if let Some(e) = self.tables[h.len() - 1].get(h) {
                acc += e.log10_bow;
            }
            h = &h[1..];
        }
    }

    pub fn state_log_prob(&self, state: &LmState, w: usize) -> f64 {
        self.log_prob(&state.0, w)
    }

    /// Sum of natural-log character probabilities from `<s>`, without `</s>`.
    /// The empty sequence scores 0; appending a character never raises the score.
    pub fn lm_logprob(&self, seq: &[usize]) -> f64 {
        let mut state = self.initial_state();
        let mut total = 0.0;
        for &c in seq {
            total += self.state_log_prob(&state, c);
            state = self.advance(&state, c);
        }
        total
    }

    /// Full sentence probability including the closing `</s>`.
    pub fn sentence_logprob(&self, seq: &[usize]) -> f64 {
        let mut state = self.initial_state();
        for &c in seq {
            state = self.advance(&state, c);
        }
        self.lm_logprob(seq) + self.state_log_prob(&state, self.eos() as usize)
    }

    fn token_name(&self, t: u32) -> String {
        if t == self.eos() {
            "</s>".into()
        } else if t == self.bos() {
            "<s>".into()
        } else {
            let c = self.vocab[t as usize];
            if c.is_whitespace() || c == '<' {
                format!("<U+{:04X}>", c as u32)
            } else {
                c.to_string()
            }
        }
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, t) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, t.len());
        }
        for (k, table) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let mut grams: Vec<_> = table.iter().collect();
            grams.sort_by(|a, b| a.0.cmp(b.0));
            for (gram, e) in grams {
                let words: Vec<String> = gram.iter().map(|&t| self.token_name(t)).collect();
                let _ = write!(out, "{}\t{}", e.log10_prob, words.join(" "));
                if k + 1 < self.order {
                    let _ = write!(out, "\t{}", e.log10_bow);
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| DecoderError::Arpa { line, msg };
        let mut declared: Vec<usize> = Vec::new();
        let mut raw: Vec<Vec<(Vec<String>, f64, f64)>> = Vec::new();
        let mut section: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() || line == "\\data\\" {
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, c) = rest.split_once('=').ok_or_else(|| err(n, "malformed ngram count".into()))?;
                let k: usize = k.trim().parse().map_err(|_| err(n, "bad order".into()))?;
                let c: usize = c.trim().parse().map_err(|_| err(n, "bad count".into()))?;
                if k != declared.len() + 1 {
                    return Err(err(n, "ngram counts out of order".into()));
                }
                declared.push(c);
                raw.push(Vec::new());
                continue;
            }
            if let Some(k) = line.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let k: usize = k.parse().map_err(|_| err(n, "bad section header".into()))?;
                if k == 0 || k > declared.len() {
                    return Err(err(n, format!("section {k} not declared")));
                }
                section = Some(k);
                continue;
            }
            let k = section.ok_or_else(|| err(n, "entry outside a section".into()))?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(n, "expected prob<TAB>ngram[<TAB>bow]".into()));
            }
            let prob: f64 = fields[0].parse().map_err(|_| err(n, "bad probability".into()))?;
            let bow: f64 = match fields.get(2) {
                Some(b) => b.parse().map_err(|_| err(n, "bad back-off weight".into()))?,
                None => 0.0,
            };
            let words: Vec<String> = fields[1].split(' ').map(String::from).collect();
            if words.len() != k {
                return Err(err(n, format!("expected {k} tokens")));
            }
            raw[k - 1].push((words, prob, bow));
        }
        if declared.is_empty() {
            return Err(err(0, "missing \\data\\ header".into()));
        }
        for (k, (d, got)) in declared.iter().zip(&raw).enumerate() {
            if *d != got.len() {
                return Err(err(0, format!("{}-grams: declared {d}, found {}", k + 1, got.len())));
            }
        }
        // characters are the unigrams other than the boundaries, in listed (id) order
        let mut vocab = Vec::new();
        for (words, _, _) in &raw[0] {
            let w = &words[0];
            if w == "<s>" || w == "</s>" {
                continue;
            }
            vocab.push(parse_token(w).ok_or_else(|| err(0, format!("bad token {w}")))?);
        }
        let v = vocab.len() as u32;
        let index: HashMap<char, u32> = vocab.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        let id = |w: &str| -> Option<u32> {
            match w {
                "</s>" => Some(v),
                "<s>" => Some(v + 1),
                _ => parse_token(w).and_then(|c| index.get(&c).copied()),
            }
        };
        let mut tables = Vec::with_capacity(raw.len());
        for grams in &raw {
            let mut table = HashMap::with_capacity(grams.len());
            for (words, prob, bow) in grams {
                let key = words
                    .iter()
                    .map(|w| id(w))
                    .collect::<Option<Vec<u32>>>()
                    .ok_or_else(|| err(0, format!("unknown token in {words:?}")))?;
                table.insert(
                    key,
                    Entry {
                        log10_prob: *prob,
                        log10_bow: *bow,
                    },
                );
            }
            tables.push(table);
        }
        for w in 0..=v {
            if !tables[0].contains_key(&vec![w]) {
                return Err(err(0, "unigram table is missing </s>".into()));
            }
        }
        Ok(Self {
            order: tables.len(),
            vocab,
            tables,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_arpa()).map_err(|e| DecoderError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_arpa(&fs::read_to_string(path).map_err(|e| DecoderError::io(path, e))?)
    }

    /// True when the model was trained over exactly this character inventory.
    pub fn matches(&self, vocab: &Vocabulary) -> bool {
        self.vocab == vocab.chars()
    }
}

fn parse_token(w: &str) -> Option<char> {
    if let Some(hex) = w.strip_prefix("<U+").and_then(|s| s.strip_suffix('>')) {
        return u32::from_str_radix(hex, 16).ok().and_then(char::from_u32);
    }
    let mut it = w.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}
