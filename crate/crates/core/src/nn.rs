//! Primitive layers: dilated depthwise conv, pointwise conv, batch norm and
//! the full 1D convolution used at the network's edges.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; the forward pass binds
//! them to tape leaves through a [`ForwardCtx`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, BnUpdate, ForwardCtx, Mode, ParamId, ParamStore};
use crate::tape::{NormStats, Var};
use crate::tensor::Tensor;

fn check_channels(op: &'static str, ctx: &ForwardCtx<'_>, x: Var, expected: usize) -> Result<()> {
    let s = ctx.tape.shape(x);
    if s.len() != 2 || s[1] != expected {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![expected],
        });
    }
    Ok(())
}

/// One `K`-tap filter per channel; the dilation spaces the taps.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub kernel: ParamId,
    pub kernel_size: usize,
    pub channels: usize,
    pub dilation: usize,
}

impl DepthwiseConv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        channels: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::config(name, "K", format!("kernel size {kernel_size} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::config(name, "stride_set", "dilation must be positive"));
        }
        let w = fan_in_uniform(rng, &[kernel_size, channels], kernel_size);
        let kernel = store.register(format!("{name}.weight"), w, true)?;
        Ok(Self {
            kernel,
            kernel_size,
            channels,
            dilation,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kernel_size * self.channels
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        check_channels("depthwise_conv1d", ctx, x, self.channels)?;
        let w = ctx.param(self.kernel);
        ctx.tape.depthwise_conv1d(x, w, self.dilation)
    }
}

/// Per-frame channel mixing, `y = x . W^T + b`.
#[derive(Clone, Debug)]
pub struct PointwiseConv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PointwiseConv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = fan_in_uniform(rng, &[out_channels, in_channels], in_channels);
        let weight = store.register(format!("{name}.weight"), w, true)?;
        let bias = if with_bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels + self.bias.map_or(0, |_| self.out_channels)
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        check_channels("pointwise_conv1d", ctx, x, self.in_channels)?;
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.register(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.register(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false)?,
            channels,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// Train mode normalizes with the input's own statistics (biased
    /// variance) and queues a running-stat update on the context; eval mode
    /// uses the stored running statistics.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_batch(ctx, &[x])?[0])
    }

    /// Normalizes a minibatch of `T_i x C` sequences. In train mode the
    /// statistics are pooled over every frame of every sequence and one
    /// running-stat update is queued for the whole batch.
    pub fn forward_batch(&self, ctx: &mut ForwardCtx<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        for &x in xs {
            check_channels("batch_norm", ctx, x, self.channels)?;
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let joint = match xs {
                    [x] => *x,
                    _ => ctx.tape.concat_rows(xs)?,
                };
                let out = ctx.tape.batch_norm(joint, gamma, beta, NormStats::Batch { eps: self.eps })?;
                let (batch_mean, batch_var) = out.batch_stats.expect("batch statistics");
                ctx.push_bn_update(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean,
                    batch_var,
                    momentum: self.momentum,
                });
                if xs.len() == 1 {
                    return Ok(vec![out.out]);
                }
                let mut start = 0;
                let mut parts = Vec::with_capacity(xs.len());
                for &x in xs {
                    let t = ctx.tape.shape(x)[0];
                    parts.push(ctx.tape.slice_rows(out.out, start, t)?);
                    start += t;
                }
                Ok(parts)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                xs.iter()
                    .map(|&x| {
                        let stats = NormStats::Fixed {
                            mean: &mean,
                            var: &var,
                            eps: self.eps,
                        };
                        Ok(ctx.tape.batch_norm(x, gamma, beta, stats)?.out)
                    })
                    .collect()
            }
        }
    }
}

/// Full cross-channel convolution, `C_out x C_in x K` weights, same padding.
#[derive(Clone, Debug)]
pub struct PlainConv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl PlainConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::config(name, "K", format!("kernel size {kernel_size} must be odd")));
        }
        if stride == 0 {
            return Err(Error::config(name, "stride_set", "stride must be positive"));
        }
        let w = fan_in_uniform(rng, &[out_channels, in_channels, kernel_size], in_channels * kernel_size);
        let weight = store.register(format!("{name}.weight"), w, true)?;
        let bias = if with_bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            stride,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kernel_size * self.in_channels * self.out_channels + self.bias.map_or(0, |_| self.out_channels)
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        check_channels("plain_conv1d", ctx, x, self.in_channels)?;
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv1d(x, w, b, self.stride)
    }
}
