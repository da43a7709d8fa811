//! Synthetic speech-like corpus: every symbol is a short harmonic tone at
//! its own pitch, separated by silence and covered by low-level noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioSample, SAMPLE_RATE};
use crate::error::{FrontendError, Result};

pub const TOY_ALPHABET: &str = "abcdef";

/// Words spelled with the toy alphabet. Transcripts drawn from them have the
/// kind of regularity a character LM can learn, unlike uniform random strings.
pub const TOY_LEXICON: [&str; 16] = [
    "ace", "add", "bad", "bead", "bed", "bee", "cab", "cafe", "dab", "deaf", "deed", "face", "fad", "fade", "fed", "feed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub alphabet: Vec<char>,
    /// Fundamental of each symbol, parallel to `alphabet`.
    pub pitches_hz: Vec<f64>,
    pub symbol_secs: f64,
    pub gap_secs: f64,
    pub edge_secs: f64,
    pub noise: f64,
    /// Transcripts are 1 to `max_words` words from this list, written without separators.
    /// When empty, transcripts are uniform random strings of `min_len..=max_len` symbols.
    pub words: Vec<String>,
    pub max_words: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            alphabet: TOY_ALPHABET.chars().collect(),
            pitches_hz: vec![300.0, 520.0, 800.0, 1150.0, 1600.0, 2200.0],
            symbol_secs: 0.12,
            gap_secs: 0.05,
            edge_secs: 0.08,
            noise: 0.005,
            words: TOY_LEXICON.iter().map(|w| w.to_string()).collect(),
            max_words: 2,
            min_len: 2,
            max_len: 5,
        }
    }
}

fn secs(s: f64) -> usize {
    (s * SAMPLE_RATE as f64).round() as usize
}

/// Renders `text` with noise drawn from `rng`.
pub fn render(text: &str, cfg: &SynthConfig, utt_id: &str, rng: &mut impl Rng) -> Result<AudioSample> {
    let mut samples = vec![0.0; secs(cfg.edge_secs)];
    let n = secs(cfg.symbol_secs);
    for (i, ch) in text.chars().enumerate() {
        let k = cfg
            .alphabet
            .iter()
            .position(|&c| c == ch)
            .ok_or_else(|| FrontendError::InvalidArgument(format!("symbol {ch:?} not in the synth alphabet")))?;
        if i > 0 {
            samples.extend(std::iter::repeat_n(0.0, secs(cfg.gap_secs)));
        }
        let f0 = cfg.pitches_hz[k];
        for j in 0..n {
            let t = j as f64 / SAMPLE_RATE as f64;
            // raised-cosine envelope avoids clicks at the edges
            let env = 0.5 - 0.5 * (2.0 * PI * j as f64 / n as f64).cos();
            let tone = (2.0 * PI * f0 * t).sin() + 0.5 * (4.0 * PI * f0 * t).sin();
            samples.push(0.4 * env * tone);
        }
    }
    samples.extend(std::iter::repeat_n(0.0, secs(cfg.edge_secs)));
    for s in samples.iter_mut() {
        *s += cfg.noise * rng.gen_range(-1.0..1.0);
    }
    Ok(AudioSample::new(samples, utt_id))
}

/// `count` utterances `toy0000..` with random texts, fully determined by `seed`.
pub fn toy_corpus(count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<(String, AudioSample)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let text: String = if cfg.words.is_empty() {
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                (0..len).map(|_| cfg.alphabet[rng.gen_range(0..cfg.alphabet.len())]).collect()
            } else {
                let n = rng.gen_range(1..=cfg.max_words.max(1));
                (0..n).map(|_| cfg.words[rng.gen_range(0..cfg.words.len())].as_str()).collect()
            };
            let audio = render(&text, cfg, &format!("toy{i:04}"), &mut rng)?;
            Ok((text, audio))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_follows_the_layout() {
        let cfg = SynthConfig::default();
        let a = render("abc", &cfg, "x", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let want = 2 * secs(cfg.edge_secs) + 3 * secs(cfg.symbol_secs) + 2 * secs(cfg.gap_secs);
        assert_eq!(a.samples.len(), want);
        assert!(a.samples.iter().all(|s| s.abs() < 1.0));
    }

    #[test]
    fn corpus_is_seed_determined() {
        let cfg = SynthConfig::default();
        let a = toy_corpus(3, 5, &cfg).unwrap();
        assert_eq!(a, toy_corpus(3, 5, &cfg).unwrap());
        assert_ne!(a, toy_corpus(3, 6, &cfg).unwrap());
        let strings = SynthConfig {
            words: Vec::new(),
            ..cfg
        };
        assert!(toy_corpus(5, 5, &strings).unwrap().iter().all(|(t, _)| (2..=5).contains(&t.len())));
    }

    /// True when `text` is a concatenation of at most `max` lexicon words.
    fn splits_into_words(text: &str, max: usize) -> bool {
        text.is_empty()
            || max > 0
                && TOY_LEXICON
                    .iter()
                    .any(|w| text.strip_prefix(w).is_some_and(|rest| splits_into_words(rest, max - 1)))
    }

    #[test]
    fn lexicon_transcripts_are_word_sequences() {
        let corpus = toy_corpus(30, 2, &SynthConfig::default()).unwrap();
        for (text, _) in &corpus {
            assert!(!text.is_empty() && splits_into_words(text, 2), "{text}");
            assert!(text.chars().all(|c| TOY_ALPHABET.contains(c)));
        }
    }

    #[test]
    fn unknown_symbols_are_rejected() {
        assert!(render("az", &SynthConfig::default(), "x", &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
