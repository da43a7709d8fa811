//! Exhaustive reference decoder for tiny inputs: enumerates every frame
//! alignment, sums alignment probabilities per collapsed label sequence, and
//! maximizes the same objective as the beam search.

use std::collections::BTreeMap;

use mqnet_core::ctc::{collapse, LabelSequence, LogProbMatrix};

use crate::lm::NGramLM;

/// Alignment limit; `(V+1)^T` above this is refused.
pub const MAX_PATHS: usize = 1_000_000;

/// Linear-space `p_ctc(l | x)` of every label sequence with nonzero probability.
pub fn sequence_probabilities(lp: &LogProbMatrix) -> Option<BTreeMap<Vec<usize>, f64>> {
    let (t_len, width) = (lp.frames(), lp.vocab_size() + 1);
    let total = (width as f64).powi(t_len as i32);
    if total > MAX_PATHS as f64 {
        return None;
    }
    let mut out: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut path = vec![0usize; t_len];
    for _ in 0..total as usize {
        let p: f64 = path.iter().enumerate().map(|(t, &k)| lp.row(t)[k]).sum::<f64>().exp();
        *out.entry(collapse(&path, lp.blank())).or_default() += p;
        for slot in path.iter_mut() {
            *slot += 1;
            if *slot < width {
                break;
            }
            *slot = 0;
        }
    }
    Some(out)
}

/// `argmax_l  ctc_weight * ln p_ctc(l|x) + alpha * ln p_lm(l) + beta * |l|`,
/// ties going to the lexicographically smallest sequence. Returns the
/// sequence and its objective value.
pub fn exhaustive_decode(
    lp: &LogProbMatrix,
    lm: Option<&NGramLM>,
    alpha: f64,
    beta: f64,
    ctc_weight: f64,
) -> Option<(LabelSequence, f64)> {
    let probs = sequence_probabilities(lp)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (seq, p) in probs {
        if p <= 0.0 {
            continue;
        }
        let lm_term = lm.map_or(0.0, |m| m.lm_logprob(&seq));
        let q = ctc_weight * p.ln() + alpha * lm_term + beta * seq.len() as f64;
        if best.as_ref().is_none_or(|(_, b)| q > *b) {
            best = Some((seq, q));
        }
    }
    best.map(|(s, q)| (LabelSequence(s), q))
}
