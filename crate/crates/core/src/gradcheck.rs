//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar-valued `f` at `x` against central
/// differences with step `eps`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over all coordinates of `x`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::GradCheck(format!("eps {eps:e} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let leaf = tape.variable(x.clone());
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::GradCheck(format!(
            "f must be scalar-valued, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(probe.clone());
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut side = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            let v = eval(&probe);
            match v {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::NonFiniteProbe { index: i, offset }),
                Err(e) => Err(e),
            }
        };
        let plus = side(eps)?;
        let minus = side(-eps)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
