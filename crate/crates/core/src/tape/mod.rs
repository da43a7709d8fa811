//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose value is computed eagerly. Nodes are
//! stored in creation order, which is already a topological order, so the
//! backward pass is a single reverse sweep.

pub(crate) mod kernels;

use crate::ctc;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    MeanOverTime,
    MaxOverTime,
    Sum,
}

/// Statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Per-channel mean and biased variance of the input itself.
    Batch { eps: f64 },
    /// Frozen running statistics.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

#[derive(Debug)]
pub struct BatchNormOutput {
    pub out: Var,
    /// Batch mean and biased variance when normalizing with batch statistics.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize, broadcast: bool },
    Relu(usize),
    Sigmoid(usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, bias: Option<usize> },
    MeanOverTime(usize),
    MaxOverTime { x: usize, argmax: Vec<usize> },
    Sum(usize),
    Depthwise { x: usize, w: usize, dilation: usize },
    Conv1d { x: usize, w: usize, bias: Option<usize>, stride: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    LogSoftmax(usize),
    Ctc { x: usize, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaf nodes.
    grads: Vec<Option<Tensor>>,
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Largest double below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
/// Smallest positive subnormal.
const ABOVE_ZERO: f64 = 5e-324;

/// Logistic function kept inside the open interval: beyond |x| of about 37
/// (resp. 745) the rounded result would be exactly 1 (resp. 0), so it is
/// held one ulp inside instead.
fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(ABOVE_ZERO, BELOW_ONE)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        ensure_finite(name, &value)?;
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Binary shapes are either equal or `b` is a channel vector broadcast
    /// along the time axis of a `T x C` operand.
    fn broadcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            Ok(true)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Add, Some(b)) => self.add(a, b),
            (ElementwiseKind::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseKind::Relu, None) => self.relu(a),
            (ElementwiseKind::Sigmoid, None) => self.sigmoid(a),
            (kind, _) => Err(Error::InvalidShape {
                op: "elementwise",
                msg: format!("wrong operand count for {kind:?}"),
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_mode("add", a, b)?;
        let out = self.binary_values(a, b, broadcast, |x, y| x + y);
        self.push_op("add", out, Op::Add { a: a.0, b: b.0, broadcast }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_mode("mul", a, b)?;
        let out = self.binary_values(a, b, broadcast, |x, y| x * y);
        self.push_op("mul", out, Op::Mul { a: a.0, b: b.0, broadcast }, &[a.0, b.0])
    }

    fn binary_values(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let data = if broadcast {
            let c = bd.len();
            ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
        } else {
            ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    /// Adds any number of same-shape operands.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(Error::InvalidShape {
            op: "add_all",
            msg: "no operands".into(),
        })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op("relu", out, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push_op("sigmoid", out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push_op("scale", out, Op::Scale(a.0, k), &[a.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::matrix(m, n, data)?;
        self.push_op("matmul", out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// `x . w^T + bias` for `x: N x C_in` (or a `C_in` vector) and `w: C_out x C_in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || sx.len() > 2 || *sx.last().unwrap() != sw[1] {
            return Err(self.mismatch("linear", x, w));
        }
        let (cout, cin) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(self.mismatch("linear", w, b));
            }
        }
        let n = if sx.len() == 2 { sx[0] } else { 1 };
        let mut data = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), n, cin, cout);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in data.chunks_mut(cout) {
                for (y, bv) in row.iter_mut().zip(bd) {
                    *y += bv;
                }
            }
        }
        let shape = if sx.len() == 2 { vec![n, cout] } else { vec![cout] };
        let out = Tensor::new(&shape, data)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.push_op(
            "linear",
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
            },
            &inputs,
        )
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var) -> Result<Var> {
        match kind {
            ReduceKind::MeanOverTime => self.mean_over_time(x),
            ReduceKind::MaxOverTime => self.max_over_time(x),
            ReduceKind::Sum => self.sum(x),
        }
    }

    fn time_major(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected T x C, got {s:?}"),
            });
        }
        if s[0] == 0 {
            return Err(Error::EmptyAxis { op });
        }
        Ok((s[0], s[1]))
    }

    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.time_major("mean_over_time", x)?;
        let xv = self.value(x);
        let mut acc = vec![0.0; c];
        for r in 0..t {
            for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= t as f64);
        self.push_op("mean_over_time", Tensor::vector(acc), Op::MeanOverTime(x.0), &[x.0])
    }

    /// Ties resolve to the earliest frame.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.time_major("max_over_time", x)?;
        let xv = self.value(x);
        let mut best = xv.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for r in 1..t {
            for (ch, &v) in xv.row(r).iter().enumerate() {
                if v > best[ch] {
                    best[ch] = v;
                    argmax[ch] = r;
                }
            }
        }
        self.push_op(
            "max_over_time",
            Tensor::vector(best),
            Op::MaxOverTime { x: x.0, argmax },
            &[x.0],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push_op("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Dilated depthwise convolution with symmetric zero padding; `w` is `K x C`, `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (t, c) = self.time_major("depthwise_conv1d", x)?;
        let sw = self.shape(w);
        if sw.len() != 2 || sw[1] != c {
            return Err(self.mismatch("depthwise_conv1d", x, w));
        }
        let k = sw[0];
        if k % 2 == 0 || dilation == 0 {
            return Err(Error::InvalidShape {
                op: "depthwise_conv1d",
                msg: format!("kernel size {k} must be odd and dilation {dilation} positive"),
            });
        }
        let data = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), t, c, k, dilation);
        let out = Tensor::matrix(t, c, data)?;
        self.push_op(
            "depthwise_conv1d",
            out,
            Op::Depthwise {
                x: x.0,
                w: w.0,
                dilation,
            },
            &[x.0, w.0],
        )
    }

    /// Full cross-channel convolution, same padding, output length `ceil(T / stride)`.
    /// `w` is `C_out x C_in x K` with `K` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (t, cin) = self.time_major("conv1d", x)?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || sw[1] != cin {
            return Err(self.mismatch("conv1d", x, w));
        }
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 || stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv1d",
                msg: format!("kernel size {k} must be odd and stride {stride} positive"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(self.mismatch("conv1d", w, b));
            }
        }
        let data = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            t,
            cin,
            cout,
            k,
            stride,
        );
        let out = Tensor::matrix(kernels::conv_out_len(t, stride), cout, data)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.push_op(
            "conv1d",
            out,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
            },
            &inputs,
        )
    }

    /// Per-channel normalization over time followed by `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_>) -> Result<BatchNormOutput> {
        let (t, c) = self.time_major("batch_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(self.mismatch("batch_norm", x, p));
            }
        }
        let xv = self.value(x);
        let (mean, var, eps, batch) = match stats {
            NormStats::Batch { eps } => {
                if t < 2 {
                    return Err(Error::InvalidShape {
                        op: "batch_norm",
                        msg: "batch statistics need at least 2 frames".into(),
                    });
                }
                let mut mean = vec![0.0; c];
                for r in 0..t {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= t as f64);
                let mut var = vec![0.0; c];
                for r in 0..t {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= t as f64);
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::InvalidShape {
                        op: "batch_norm",
                        msg: format!("running statistics have {} entries for {c} channels", mean.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t * c);
        let mut out = Vec::with_capacity(t * c);
        for (i, &v) in xv.data().iter().enumerate() {
            let ch = i % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let out = Tensor::matrix(t, c, out)?;
        let var_node = self.push_op(
            "batch_norm",
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch,
            },
            &[x.0, gamma.0, beta.0],
        )?;
        Ok(BatchNormOutput {
            out: var_node,
            batch_stats: batch.then_some((mean, var)),
        })
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::InvalidShape {
                    op: "concat",
                    msg: format!("expected vectors, got {:?}", self.shape(p)),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_op("concat", Tensor::vector(data), Op::Concat(ids.clone()), &ids)
    }

    /// `x[start..start + len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || start + len > s[0] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} out of {s:?}", start + len),
            });
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        self.push_op("slice", Tensor::vector(data), Op::Slice { x: x.0, start }, &[x.0])
    }

    /// Stacks `T_i x C` matrices along time into one `(sum T_i) x C` matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyAxis { op: "concat_rows" });
        };
        let (_, c) = self.time_major("concat_rows", first)?;
        let mut data = Vec::new();
        for &p in parts {
            let (_, pc) = self.time_major("concat_rows", p)?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(data.len() / c.max(1), c, data)?;
        // row-major storage makes this the flat concatenation
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_op("concat_rows", out, Op::Concat(ids.clone()), &ids)
    }

    /// Rows `start..start + len` of a `T x C` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, c) = self.time_major("slice_rows", x)?;
        if len == 0 || start + len > t {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {t}", start + len),
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        self.push_op("slice_rows", out, Op::Slice { x: x.0, start: start * c }, &[x.0])
    }

    /// Row-wise log-softmax of a `T x V` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (t, v) = self.time_major("log_softmax", x)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(t * v);
        for r in 0..t {
            let row = xv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|z| z - lse));
        }
        let out = Tensor::matrix(t, v, out)?;
        self.push_op("log_softmax", out, Op::LogSoftmax(x.0), &[x.0])
    }

    /// CTC negative log-likelihood of `target` given `T x (V+1)` log-probabilities
    /// with the blank in the last column.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let lp = ctc::LogProbMatrix::new_unchecked(self.value(log_probs).clone())?;
        let (loss, grad) = ctc::ctc_loss(&lp, target)?;
        self.push_op(
            "ctc_loss",
            Tensor::scalar(loss),
            Op::Ctc {
                x: log_probs.0,
                grad: grad.into_data(),
            },
            &[log_probs.0],
        )
    }

    /// Accumulates `d(sum of output)/d(leaf)` into every leaf requiring a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let mut local: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        local[output.0] = Some(vec![1.0; self.val(output.0).numel()]);
        for idx in (0..=output.0).rev() {
            let Some(gy) = local[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = Tensor::new(node.value.shape(), gy)?;
                match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(idx, &gy, &mut local);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, gy: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let mut acc = |i: usize, g: Vec<f64>| match &mut local[i] {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            slot @ None => *slot = Some(g),
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    acc(*a, gy.to_vec());
                }
                if wants(*b) {
                    acc(*b, reduce_broadcast(gy, nodes[*b].value.numel(), *broadcast));
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                let c = bv.len();
                if wants(*a) {
                    let g = if *broadcast {
                        gy.iter().enumerate().map(|(i, g)| g * bv[i % c]).collect()
                    } else {
                        gy.iter().zip(bv).map(|(g, y)| g * y).collect()
                    };
                    acc(*a, g);
                }
                if wants(*b) {
                    let prod: Vec<f64> = gy.iter().zip(av).map(|(g, x)| g * x).collect();
                    acc(*b, reduce_broadcast(&prod, c, *broadcast));
                }
            }
            Op::Relu(a) => {
                let xv = nodes[*a].value.data();
                acc(*a, gy.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc(*a, gy.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Scale(a, k) => acc(*a, gy.iter().map(|g| g * k).collect()),
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    acc(*a, kernels::matmul_nt(gy, tb.data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, kernels::matmul_tn(ta.data(), gy, m, k, n));
                }
            }
            Op::Linear { x, w, bias } => {
                let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
                let (cout, cin) = (tw.shape()[0], tw.shape()[1]);
                let n = tx.numel() / cin;
                if wants(*x) {
                    acc(*x, kernels::matmul(gy, tw.data(), n, cout, cin));
                }
                if wants(*w) {
                    acc(*w, kernels::matmul_tn(gy, tx.data(), n, cout, cin));
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        acc(*b, reduce_broadcast(gy, cout, true));
                    }
                }
            }
            Op::MeanOverTime(x) => {
                let t = nodes[*x].value.rows();
                let g: Vec<f64> = gy.iter().map(|g| g / t as f64).collect();
                acc(*x, g.repeat(t));
            }
            Op::MaxOverTime { x, argmax } => {
                let c = gy.len();
                let mut g = vec![0.0; nodes[*x].value.numel()];
                for (ch, &r) in argmax.iter().enumerate() {
                    g[r * c + ch] = gy[ch];
                }
                acc(*x, g);
            }
            Op::Sum(x) => acc(*x, vec![gy[0]; nodes[*x].value.numel()]),
            Op::Depthwise { x, w, dilation } => {
                let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
                let (t, c, k) = (tx.rows(), tx.cols(), tw.rows());
                let (dx, dw) = kernels::depthwise_backward(tx.data(), tw.data(), gy, t, c, k, *dilation);
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*w) {
                    acc(*w, dw);
                }
            }
            Op::Conv1d { x, w, bias, stride } => {
                let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
                let s = tw.shape();
                let (cout, cin, k) = (s[0], s[1], s[2]);
                let (dx, dw, db) = kernels::conv1d_backward(tx.data(), tw.data(), gy, tx.rows(), cin, cout, k, *stride);
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*w) {
                    acc(*w, dw);
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        acc(*b, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let c = inv_std.len();
                let t = gy.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (&g, &h)) in gy.iter().zip(xhat).enumerate() {
                    dgamma[i % c] += g * h;
                    dbeta[i % c] += g;
                }
                if wants(*x) {
                    let gam = nodes[*gamma].value.data();
                    let dx = gy
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&g, &h))| {
                            let ch = i % c;
                            let scale = gam[ch] * inv_std[ch];
                            if *batch {
                                scale * (g - dbeta[ch] / t as f64 - h * dgamma[ch] / t as f64)
                            } else {
                                scale * g
                            }
                        })
                        .collect();
                    acc(*x, dx);
                }
                if wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    if wants(p) {
                        acc(p, gy[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let mut g = vec![0.0; nodes[*x].value.numel()];
                g[*start..*start + gy.len()].copy_from_slice(gy);
                acc(*x, g);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let v = y.cols();
                let mut g = Vec::with_capacity(gy.len());
                for (grow, yrow) in gy.chunks(v).zip(y.data().chunks(v)) {
                    let s: f64 = grow.iter().sum();
                    g.extend(grow.iter().zip(yrow).map(|(gi, yi)| gi - yi.exp() * s));
                }
                acc(*x, g);
            }
            Op::Ctc { x, grad } => acc(*x, grad.iter().map(|d| d * gy[0]).collect()),
        }
    }
}

/// Sums a `T x C` gradient over time when the operand was broadcast.
fn reduce_broadcast(g: &[f64], c: usize, broadcast: bool) -> Vec<f64> {
    if !broadcast {
        return g.to_vec();
    }
    let mut out = vec![0.0; c];
    for (i, v) in g.iter().enumerate() {
        out[i % c] += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(v(&[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);

        let z = tape.constant(v(&[40.0, -800.0, f64::MAX, f64::MIN]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[BELOW_ONE, ABOVE_ZERO, BELOW_ONE, ABOVE_ZERO]);
        assert_eq!(BELOW_ONE.next_up(), 1.0);

        let x = tape.constant(v(&[-3.2, 3.2]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.2]);

        let a = tape.constant(v(&[1.0, 2.0]));
        let b = tape.constant(v(&[3.0, 4.0]));
        let c = tape.elementwise(ElementwiseKind::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_vector_broadcasts_along_time() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let w = tape.constant(v(&[10.0, 100.0]));
        let y = tape.mul(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 200.0, 30.0, 400.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let i = tape.constant(Tensor::identity(2));
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.5, 7.0]]).unwrap());
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|c| c as f64).collect()).collect();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let m = tape.reduce(ReduceKind::MeanOverTime, x).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 1.0, 2.0]);

        let y = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let mx = tape.reduce(ReduceKind::MaxOverTime, y).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 5.0]);

        let empty = tape.constant(Tensor::new(&[0, 3], vec![]).unwrap());
        assert!(matches!(tape.mean_over_time(empty), Err(Error::EmptyAxis { .. })));
        assert!(matches!(tape.max_over_time(empty), Err(Error::EmptyAxis { .. })));
    }

    #[test]
    fn max_gradient_goes_to_earliest_tie() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_rows(&[vec![2.0], vec![2.0], vec![1.0]]).unwrap());
        let m = tape.max_over_time(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_t() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[4, 2]));
        let m = tape.mean_over_time(x).unwrap();
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn backward_accumulates_and_reset_clears() {
        let mut tape = Tape::new();
        let x = tape.variable(v(&[1.0, -2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap().clone();
        assert_eq!(first.data(), &[2.0, -4.0, 6.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -8.0, 12.0]);
        tape.reset_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[1.0, 2.0]));
        let w = tape.variable(v(&[3.0, 4.0]));
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn row_stacking_round_trips_and_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.variable(Tensor::from_rows(&[vec![5.0, 6.0]]).unwrap());
        let s = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(s), &[3, 2]);
        let tail = tape.slice_rows(s, 1, 2).unwrap();
        assert_eq!(tape.value(tail).data(), &[3.0, 4.0, 5.0, 6.0]);
        let y = tape.mul(tail, tail).unwrap();
        let y = tape.sum(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0, 6.0, 8.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[10.0, 12.0]);
        let c = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.concat_rows(&[a, c]).is_err());
        assert!(tape.concat_rows(&[]).is_err());
        assert!(tape.slice_rows(s, 2, 2).is_err());
    }
}
