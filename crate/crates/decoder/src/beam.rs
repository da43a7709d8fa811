//! CTC prefix beam search maximizing
//! `Q(l) = ln p_ctc(l | x) + alpha * ln p_lm(l) + beta * |l|`.
//!
//! Each prefix tracks the probability of all alignments ending in blank and
//! ending in its last character separately, so repeated characters are only
//! emitted across a blank. The LM and length terms are added when a prefix is
//! extended by a character.

use std::collections::HashMap;

use mqnet_core::ctc::{log_add, LabelSequence, LogProbMatrix};

use crate::error::{DecoderError, Result};
use crate::lm::{LmState, NGramLM};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub alpha: f64,
    pub beta: f64,
    /// `usize::MAX` disables pruning.
    pub beam: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            alpha: 1.8,
            beta: 3.5,
            beam: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Vec<usize>,
    pub logp_blank: f64,
    pub logp_nonblank: f64,
    pub lm_state: Option<LmState>,
    /// Accumulated `ln p_lm` of the prefix.
    pub lm_logprob: f64,
    pub score: f64,
}

impl BeamHypothesis {
    pub fn logp_total(&self) -> f64 {
        log_add(self.logp_blank, self.logp_nonblank)
    }
}

struct Partial {
    blank: f64,
    nonblank: f64,
    lm_state: Option<LmState>,
    lm_logprob: f64,
}

fn q(cfg: &BeamConfig, logp: f64, lm_logprob: f64, len: usize) -> f64 {
    logp + cfg.alpha * lm_logprob + cfg.beta * len as f64
}

/// Sorts by score descending with ties broken by the lexicographically smaller prefix.
fn rank(hyps: &mut [BeamHypothesis]) {
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.prefix.cmp(&b.prefix)));
}

/// Beam search that reports the surviving beam after every frame.
pub fn beam_search_traced(
    lp: &LogProbMatrix,
    lm: Option<&NGramLM>,
    cfg: &BeamConfig,
    mut observe: impl FnMut(usize, &[BeamHypothesis]),
) -> Result<BeamHypothesis> {
    if cfg.beam == 0 {
        return Err(DecoderError::ZeroBeam);
    }
    let blank = lp.blank();
    if let Some(lm) = lm {
        if lm.vocab_size() != blank {
            return Err(DecoderError::VocabMismatch {
                expected: lm.vocab_size(),
                got: blank,
            });
        }
    }
    let mut beam = vec![BeamHypothesis {
        prefix: Vec::new(),
        logp_blank: 0.0,
        logp_nonblank: f64::NEG_INFINITY,
        lm_state: lm.map(NGramLM::initial_state),
        lm_logprob: 0.0,
        score: 0.0,
    }];
    for t in 0..lp.frames() {
        let row = lp.row(t);
        let mut next: HashMap<Vec<usize>, Partial> = HashMap::new();
        for h in &beam {
            let total = h.logp_total();
            {
                let p = next.entry(h.prefix.clone()).or_insert_with(|| Partial {
                    blank: f64::NEG_INFINITY,
                    nonblank: f64::NEG_INFINITY,
                    lm_state: h.lm_state.clone(),
                    lm_logprob: h.lm_logprob,
                });
                p.blank = log_add(p.blank, total + row[blank]);
                if let Some(&last) = h.prefix.last() {
                    p.nonblank = log_add(p.nonblank, h.logp_nonblank + row[last]);
                }
            }
            for (c, &lp_c) in row.iter().enumerate().take(blank) {
                let from = if h.prefix.last() == Some(&c) { h.logp_blank } else { total };
                if from == f64::NEG_INFINITY {
                    continue;
                }
                let mut prefix = h.prefix.clone();
                prefix.push(c);
                let p = next.entry(prefix).or_insert_with(|| {
                    let (lm_state, lm_logprob) = match (lm, &h.lm_state) {
                        (Some(lm), Some(s)) => (Some(lm.advance(s, c)), h.lm_logprob + lm.state_log_prob(s, c)),
                        _ => (None, 0.0),
                    };
                    Partial {
                        blank: f64::NEG_INFINITY,
                        nonblank: f64::NEG_INFINITY,
                        lm_state,
                        lm_logprob,
                    }
                });
                p.nonblank = log_add(p.nonblank, from + lp_c);
            }
        }
        let mut hyps: Vec<BeamHypothesis> = next
            .into_iter()
            .map(|(prefix, p)| {
                let logp = log_add(p.blank, p.nonblank);
                BeamHypothesis {
                    score: q(cfg, logp, p.lm_logprob, prefix.len()),
                    prefix,
                    logp_blank: p.blank,
                    logp_nonblank: p.nonblank,
                    lm_state: p.lm_state,
                    lm_logprob: p.lm_logprob,
                }
            })
            .collect();
        rank(&mut hyps);
        hyps.truncate(cfg.beam);
        observe(t, &hyps);
        beam = hyps;
    }
    Ok(beam.into_iter().next().expect("beam is never empty"))
}

pub fn beam_search(lp: &LogProbMatrix, lm: Option<&NGramLM>, cfg: &BeamConfig) -> Result<LabelSequence> {
    Ok(LabelSequence(beam_search_traced(lp, lm, cfg, |_, _| {})?.prefix))
}
