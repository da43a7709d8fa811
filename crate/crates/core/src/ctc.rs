//! Connectionist temporal classification: loss, gradient and decoding.
//!
//! Log-probability matrices are `T x (V+1)` with the blank in the last
//! column. All lattice arithmetic stays in log space.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss reported by [`brute_force_ctc`] when no path collapses to the target.
pub const INFEASIBLE_LOSS: f64 = f64::INFINITY;

const LP_MAGIC: &[u8; 4] = b"MQLP";

#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix {
    values: Tensor,
    pub utt_id: String,
}

impl LogProbMatrix {
    /// Wraps a `T x (V+1)` matrix whose rows must each log-sum-exp to 0 within 1e-8.
    pub fn new(values: Tensor) -> Result<Self> {
        let lp = Self::new_unchecked(values)?;
        for t in 0..lp.frames() {
            let lse = log_sum_exp(lp.values.row(t));
            if (lse).abs() > 1e-8 || lse.is_nan() {
                return Err(Error::Ctc(format!("row {t} log-sum-exps to {lse}, not 0")));
            }
        }
        Ok(lp)
    }

    /// Accepts any finite `T x (V+1)` matrix; used when probing gradients.
    pub fn new_unchecked(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.cols() < 1 {
            return Err(Error::Ctc(format!("expected T x (V+1), got {:?}", values.shape())));
        }
        Ok(Self {
            values,
            utt_id: String::new(),
        })
    }

    pub fn with_id(mut self, utt_id: impl Into<String>) -> Self {
        self.utt_id = utt_id.into();
        self
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    /// Number of non-blank symbols `V`.
    pub fn vocab_size(&self) -> usize {
        self.values.cols() - 1
    }

    pub fn blank(&self) -> usize {
        self.vocab_size()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// `MQLP` | u32 T | u32 V+1 | T*(V+1) little-endian f64, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(LP_MAGIC)?;
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        w.write_all(&(self.values.cols() as u32).to_le_bytes())?;
        for v in self.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LP_MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad MQLP magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let t = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let v = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(t * v);
        let mut buf = [0u8; 8];
        for _ in 0..t * v {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let values = Tensor::matrix(t, v, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        Self::new_unchecked(values).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Minimum frame count for a CTC path: one per label plus a blank between repeats.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate_target(vocab: usize, target: &[usize]) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&id| id >= vocab) {
        return Err(Error::Ctc(format!("label {bad} is blank or outside the vocabulary of {vocab}")));
    }
    Ok(())
}

/// Negative log-likelihood of `target` and its gradient with respect to every
/// log-probability entry.
pub fn ctc_loss(lp: &LogProbMatrix, target: &[usize]) -> Result<(f64, Tensor)> {
    let (t_len, width) = (lp.frames(), lp.values.cols());
    let blank = lp.blank();
    validate_target(blank, target)?;
    let required = required_frames(target);
    if t_len < required {
        return Err(Error::CtcInfeasible {
            target_len: target.len(),
            required,
            frames: t_len,
        });
    }

    // blank-interleaved target
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { blank } else { target[s / 2] }).collect();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.row(0)[blank];
    if s_len > 1 {
        alpha[1] = lp.row(0)[ext[1]];
    }
    for t in 1..t_len {
        let row = lp.row(t);
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + row[ext[s]] };
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let row = lp.row(t + 1);
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + row[ext[s2]];
            let mut b = next(s);
            if s + 1 < s_len {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::CtcUnderflow);
    }

    let mut grad = vec![0.0; t_len * width];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * width + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Tensor::matrix(t_len, width, grad)?))
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive CTC loss over all `(V+1)^T` paths.
pub fn brute_force_ctc(lp: &LogProbMatrix, target: &[usize]) -> Result<f64> {
    let (t_len, width) = (lp.frames(), lp.values.cols());
    let total = (width as f64).powi(t_len as i32);
    if total > 1e6 {
        return Err(Error::Ctc(format!("{width}^{t_len} paths exceeds the 1e6 enumeration limit")));
    }
    validate_target(lp.blank(), target)?;
    let mut path = vec![0usize; t_len];
    let mut prob = 0.0;
    loop {
        if collapse(&path, lp.blank()) == target {
            let lp_path: f64 = path.iter().enumerate().map(|(t, &k)| lp.row(t)[k]).sum();
            prob += lp_path.exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(if prob > 0.0 { -prob.ln() } else { INFEASIBLE_LOSS });
            }
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Best-path decoding: per-frame argmax (lowest index on ties), then collapse.
pub fn greedy_decode(lp: &LogProbMatrix) -> LabelSequence {
    let path: Vec<usize> = (0..lp.frames())
        .map(|t| {
            let row = lp.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelSequence(collapse(&path, lp.blank()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, width: usize) -> LogProbMatrix {
        let v = -(width as f64).ln();
        LogProbMatrix::new(Tensor::full(&[t, width], v)).unwrap()
    }

    fn one_hot(frames: &[usize], width: usize) -> LogProbMatrix {
        let rows: Vec<Vec<f64>> = frames
            .iter()
            .map(|&k| (0..width).map(|j| if j == k { -0.01 } else { -6.0 }).collect())
            .collect();
        LogProbMatrix::new_unchecked(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn single_frame_single_alignment() {
        let (loss, _) = ctc_loss(&uniform(1, 2), &[0]).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let (loss, _) = ctc_loss(&uniform(2, 2), &[0]).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12, "{loss}");
        let brute = brute_force_ctc(&uniform(2, 2), &[0]).unwrap();
        assert!((brute - loss).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_rejected_before_computation() {
        let err = ctc_loss(&uniform(2, 2), &[0, 0]).unwrap_err();
        assert_eq!(
            err,
            Error::CtcInfeasible {
                target_len: 2,
                required: 3,
                frames: 2
            }
        );
        assert_eq!(brute_force_ctc(&uniform(2, 2), &[0, 0]).unwrap(), INFEASIBLE_LOSS);
    }

    #[test]
    fn underflow_is_distinct_from_infeasibility() {
        let lp = LogProbMatrix::new_unchecked(Tensor::full(&[2, 2], f64::NEG_INFINITY)).unwrap();
        assert_eq!(ctc_loss(&lp, &[0]).unwrap_err(), Error::CtcUnderflow);
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let lp = uniform(3, 3);
        let (loss, grad) = ctc_loss(&lp, &[]).unwrap();
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12);
        for t in 0..3 {
            assert_eq!(grad.row(t), &[0.0, 0.0, -1.0]);
        }
    }

    #[test]
    fn blank_in_target_is_rejected() {
        assert!(matches!(ctc_loss(&uniform(3, 3), &[2]), Err(Error::Ctc(_))));
    }

    #[test]
    fn greedy_examples() {
        // a=0, b=1, blank=2
        assert_eq!(greedy_decode(&one_hot(&[0, 0, 2, 1, 1], 3)).0, vec![0, 1]);
        assert!(greedy_decode(&one_hot(&[2, 2, 2], 3)).is_empty());
        assert_eq!(greedy_decode(&one_hot(&[0, 2, 0], 3)).0, vec![0, 0]);
    }

    #[test]
    fn unnormalized_rows_are_rejected_by_checked_constructor() {
        assert!(LogProbMatrix::new(Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn mqlp_round_trip() {
        let lp = uniform(3, 4);
        let mut buf = Vec::new();
        lp.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MQLP");
        assert_eq!(buf.len(), 12 + 3 * 4 * 8);
        let back = LogProbMatrix::read_from(&buf[..]).unwrap();
        assert_eq!(back.values(), lp.values());
    }
}
