//! Novograd with one second-moment scalar per parameter tensor:
//!
//! ```text
//! v = ||g||^2                          (first step)
//! v = b2 * v + (1 - b2) * ||g||^2      (later steps)
//! m = b1 * m + g / (sqrt(v) + eps) + wd * w
//! w = w - lr * m
//! ```

use mqnet_core::{ParamId, ParamStore, Tensor};

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub m: Vec<f64>,
    pub v: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Novograd {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Indexed by parameter id; `None` until a parameter's first step.
    pub state: Vec<Option<ParamState>>,
}

impl Novograd {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.5,
            eps: 1e-8,
            weight_decay,
            state: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter. Parameters absent
    /// from `grads` are treated as having zero gradient. Non-finite gradients
    /// reject the whole step and leave parameters and state unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TrainError::Optimizer(format!("invalid learning rate {lr}")));
        }
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            let p = store.param(*id);
            if g.shape() != p.value.shape() {
                return Err(TrainError::Optimizer(format!(
                    "gradient shape {:?} for {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TrainError::Optimizer(format!("non-finite gradient for {}", p.name)));
            }
            by_id[id.index()] = Some(g);
        }
        self.state.resize(store.len(), None);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.param(id).trainable {
                continue;
            }
            let n = store.get(id).numel();
            let zeros;
            let g = match by_id[id.index()] {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0; n];
                    &zeros
                }
            };
            let norm2: f64 = g.iter().map(|x| x * x).sum();
            let st = self.state[id.index()].get_or_insert_with(|| ParamState {
                m: vec![0.0; n],
                v: 0.0,
                steps: 0,
            });
            st.v = if st.steps == 0 {
                norm2
            } else {
                self.beta2 * st.v + (1.0 - self.beta2) * norm2
            };
            st.steps += 1;
            let denom = st.v.sqrt() + self.eps;
            let w = store.get_mut(id).data_mut();
            for ((m, &gi), wi) in st.m.iter_mut().zip(g).zip(w.iter_mut()) {
                *m = self.beta1 * *m + (gi / denom + self.weight_decay * *wi);
                *wi -= lr * *m;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::vector(vec![w]), true).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_hand_example() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Novograd::new(0.0);
        opt.step(&mut s, &[(id, Tensor::vector(vec![1.0]))], 0.1).unwrap();
        let st = opt.state[0].as_ref().unwrap();
        assert_eq!(st.v, 1.0);
        let m = 1.0 / (1.0 + 1e-8);
        assert!((st.m[0] - m).abs() < 1e-12);
        assert!((s.get(id).data()[0] - (1.0 - 0.1 * m)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_changes_nothing() {
        let (mut s, id) = scalar_store(0.7);
        let mut opt = Novograd::new(0.0);
        opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))], 0.1).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn zero_gradient_with_decay_moves_along_the_weights() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = Novograd::new(0.01);
        opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))], 0.5).unwrap();
        let m1 = 0.01 * 2.0;
        assert!((opt.state[0].as_ref().unwrap().m[0] - m1).abs() < 1e-15);
        let w1 = 2.0 - 0.5 * m1;
        opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))], 0.5).unwrap();
        let m2 = 0.95 * m1 + 0.01 * w1;
        assert!((opt.state[0].as_ref().unwrap().m[0] - m2).abs() < 1e-15);
        assert!((s.get(id).data()[0] - (w1 - 0.5 * m2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_everything_untouched() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Novograd::new(0.0);
        opt.step(&mut s, &[(id, Tensor::vector(vec![1.0]))], 0.1).unwrap();
        let (before_s, before_o) = (s.clone(), opt.clone());
        assert!(opt.step(&mut s, &[(id, Tensor::vector(vec![f64::NAN]))], 0.1).is_err());
        assert_eq!(s, before_s);
        assert_eq!(opt, before_o);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::new();
        let b = s.register("running_mean", Tensor::vector(vec![3.0]), false).unwrap();
        let mut opt = Novograd::new(0.1);
        opt.step(&mut s, &[], 1.0).unwrap();
        assert_eq!(s.get(b).data()[0], 3.0);
        assert!(opt.state[0].is_none());
    }
}
