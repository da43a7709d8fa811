//! The multi-resolution QuartzNet acoustic model.
//!
//! Topology: `C1 -> B1..BI -> fusion -> C2 -> C3 -> C4 -> log-softmax`.
//! Each block group `Bi` runs `R` repeats of `M` multi-resolution modules.
//! A module feeds its input through `S` parallel separable-convolution
//! streams that share the kernel size but differ in dilation, reweights
//! every stream with its own channel attention, and sums the streams.
//!
//! The per-stream "stride" of the block rows is applied as a dilation with
//! same padding, so every stream keeps the `T x C` shape and the network
//! never changes the frame rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionTap, ModelConfig, RowConfig};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, DepthwiseConv1d, PlainConv1d, PointwiseConv1d};
use crate::params::{fan_in_uniform, ForwardCtx, Mode, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type Rng = ChaCha8Rng;

/// Squeeze-and-excitation gate with shared weights for the average and max paths:
/// `w = sigmoid(W2 relu(W1 avg) + W2 relu(W1 max))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub w1: ParamId,
    pub w2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(
                name,
                "C",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        let w1 = store.register(
            format!("{name}.w1"),
            fan_in_uniform(rng, &[hidden, channels], channels),
            true,
        )?;
        let w2 = store.register(format!("{name}.w2"), fan_in_uniform(rng, &[channels, hidden], hidden), true)?;
        Ok(Self {
            w1,
            w2,
            channels,
            hidden,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden
    }

    /// Gate vector in `(0, 1)^C` from average- and max-pooled summaries.
    pub fn weights(&self, ctx: &mut ForwardCtx<'_>, avg: Var, max: Var) -> Result<Var> {
        for v in [avg, max] {
            if ctx.tape.shape(v) != [self.channels] {
                return Err(Error::ShapeMismatch {
                    op: "channel_attention",
                    lhs: ctx.tape.shape(v).to_vec(),
                    rhs: vec![self.channels],
                });
            }
        }
        let w1 = ctx.param(self.w1);
        let w2 = ctx.param(self.w2);
        let mut branch = |pooled: Var| -> Result<Var> {
            let h = ctx.tape.linear(pooled, w1, None)?;
            let h = ctx.tape.relu(h)?;
            ctx.tape.linear(h, w2, None)
        };
        let a = branch(avg)?;
        let m = branch(max)?;
        let g = ctx.tape.add(a, m)?;
        ctx.tape.sigmoid(g)
    }

    /// Rescales each channel of `x: T x C` by its gate; returns `(scaled, gate)`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<(Var, Var)> {
        let avg = ctx.tape.mean_over_time(x)?;
        let max = ctx.tape.max_over_time(x)?;
        let w = self.weights(ctx, avg, max)?;
        let y = ctx.tape.mul(x, w)?;
        Ok((y, w))
    }
}

/// One dilated stream: depthwise conv, then (possibly shared) pointwise, BN, ReLU.
#[derive(Clone, Debug)]
pub struct StreamBranch {
    pub depthwise: DepthwiseConv1d,
    pub pointwise: usize,
    pub bn: BatchNorm1d,
    pub attention: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct MultiResModule {
    pub streams: Vec<StreamBranch>,
    pub pointwise: Vec<PointwiseConv1d>,
    pub attention: Vec<ChannelAttention>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub name: String,
}

impl MultiResModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        dilations: &[usize],
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n_pw = if cfg.flags.share_pointwise { 1 } else { dilations.len() };
        let pointwise = (0..n_pw)
            .map(|i| {
                let tag = if cfg.flags.share_pointwise { String::new() } else { i.to_string() };
                PointwiseConv1d::new(store, &format!("{name}.pw{tag}"), in_channels, out_channels, false, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_att = match (cfg.flags.attention, cfg.flags.share_attention) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => dilations.len(),
        };
        let mut streams = Vec::with_capacity(dilations.len());
        for (s, &d) in dilations.iter().enumerate() {
            let depthwise = DepthwiseConv1d::new(store, &format!("{name}.dw{s}"), kernel, in_channels, d, rng)?;
            let bn = BatchNorm1d::new(store, &format!("{name}.bn{s}"), out_channels)?;
            streams.push(StreamBranch {
                depthwise,
                pointwise: if cfg.flags.share_pointwise { 0 } else { s },
                bn,
                attention: (n_att > 0).then_some(if n_att == 1 { 0 } else { s }),
            });
        }
        let attention = (0..n_att)
            .map(|i| {
                let tag = if n_att == 1 { String::new() } else { i.to_string() };
                ChannelAttention::new(store, &format!("{name}.att{tag}"), out_channels, cfg.reduction, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            streams,
            pointwise,
            attention,
            in_channels,
            out_channels,
            name: name.to_string(),
        })
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.streams.iter().map(|s| s.depthwise.dilation).collect()
    }

    /// Sums `S` streams, each `relu(bn(pointwise(depthwise_d(x))))` and
    /// reweighted by its channel attention before the sum.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_batch(ctx, &[x])?[0])
    }

    /// Minibatch forward; only batch norm couples the sequences.
    pub fn forward_batch(&self, ctx: &mut ForwardCtx<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        let mut outs: Vec<Vec<Var>> = vec![Vec::with_capacity(self.streams.len()); xs.len()];
        for (s, stream) in self.streams.iter().enumerate() {
            let mut hs = Vec::with_capacity(xs.len());
            for &x in xs {
                let h = stream.depthwise.forward(ctx, x)?;
                hs.push(self.pointwise[stream.pointwise].forward(ctx, h)?);
            }
            for (b, h) in stream.bn.forward_batch(ctx, &hs)?.into_iter().enumerate() {
                let mut h = ctx.tape.relu(h)?;
                if let Some(a) = stream.attention {
                    let (scaled, w) = self.attention[a].forward(ctx, h)?;
                    ctx.capture(format!("{}.att{s}", self.name), w);
                    h = scaled;
                }
                outs[b].push(h);
            }
        }
        outs.iter()
            .map(|o| {
                let first = ctx.tape.shape(o[0]).to_vec();
                if let Some(bad) = o.iter().find(|&&v| ctx.tape.shape(v) != first.as_slice()) {
                    return Err(Error::ShapeMismatch {
                        op: "multi_res_forward",
                        lhs: first,
                        rhs: ctx.tape.shape(*bad).to_vec(),
                    });
                }
                ctx.tape.add_all(o)
            })
            .collect()
    }
}

/// `M` modules applied in sequence with an optional pointwise + BN skip.
#[derive(Clone, Debug)]
pub struct Repeat {
    pub modules: Vec<MultiResModule>,
    pub residual: Option<(PointwiseConv1d, BatchNorm1d)>,
}

impl Repeat {
    /// Returns the outputs before and after the closing ReLU. Without a skip
    /// the chain output is already rectified and both are the same node.
    pub fn forward_batch(&self, ctx: &mut ForwardCtx<'_>, xs: &[Var]) -> Result<Vec<(Var, Var)>> {
        let mut h = xs.to_vec();
        for m in &self.modules {
            h = m.forward_batch(ctx, &h)?;
        }
        match &self.residual {
            Some((pw, bn)) => {
                let r = xs.iter().map(|&x| pw.forward(ctx, x)).collect::<Result<Vec<_>>>()?;
                let r = bn.forward_batch(ctx, &r)?;
                h.iter()
                    .zip(r)
                    .map(|(&h, r)| {
                        let pre = ctx.tape.add(h, r)?;
                        Ok((pre, ctx.tape.relu(pre)?))
                    })
                    .collect()
            }
            None => Ok(h.into_iter().map(|h| (h, h)).collect()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockGroup {
    pub name: String,
    pub repeats: Vec<Repeat>,
    pub channels: usize,
}

impl BlockGroup {
    fn new(
        store: &mut ParamStore,
        row: &RowConfig,
        in_channels: usize,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = cfg.channels(row);
        let dilations = cfg.dilations(row);
        let prefix = row.name.to_lowercase();
        let mut repeats = Vec::with_capacity(row.repeats);
        for r in 0..row.repeats {
            let cin = if r == 0 { in_channels } else { c };
            let mut modules = Vec::with_capacity(row.modules);
            for m in 0..row.modules {
                let mcin = if m == 0 { cin } else { c };
                modules.push(MultiResModule::new(
                    store,
                    &format!("{prefix}.r{r}.m{m}"),
                    row.kernel,
                    mcin,
                    c,
                    &dilations,
                    cfg,
                    rng,
                )?);
            }
            let residual = if cfg.flags.block_residual {
                let name = format!("{prefix}.r{r}.res");
                Some((
                    PointwiseConv1d::new(store, &format!("{name}.pw"), cin, c, false, rng)?,
                    BatchNorm1d::new(store, &format!("{name}.bn"), c)?,
                ))
            } else {
                None
            };
            repeats.push(Repeat { modules, residual });
        }
        Ok(Self {
            name: row.name.clone(),
            repeats,
            channels: c,
        })
    }

    /// Runs all repeats; returns the last repeat's `(pre_relu, post_relu)` per sequence.
    pub fn forward_batch(&self, ctx: &mut ForwardCtx<'_>, xs: &[Var]) -> Result<Vec<(Var, Var)>> {
        let mut out: Vec<(Var, Var)> = xs.iter().map(|&x| (x, x)).collect();
        for rep in &self.repeats {
            let post: Vec<Var> = out.iter().map(|o| o.1).collect();
            out = rep.forward_batch(ctx, &post)?;
        }
        Ok(out)
    }
}

/// Cross-block gating: pooled summaries of every block output are
/// concatenated into one context, a bottleneck MLP produces a gate per
/// channel of every block, and the gated outputs are chained with a local
/// residual `y'_i = y_i * w_i + proj(y'_{i-1})`, `y'_0 = 0`.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub w1: ParamId,
    pub w2: ParamId,
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// `projections[i]` maps block `i-1` to block `i` when their widths differ.
    pub projections: Vec<Option<PointwiseConv1d>>,
}

impl FusionModule {
    pub fn new(store: &mut ParamStore, channels: &[usize], reduction: usize, rng: &mut Rng) -> Result<Self> {
        let width: usize = channels.iter().sum();
        if channels.is_empty() || reduction == 0 || width % reduction != 0 {
            return Err(Error::config(
                "fusion",
                "fusion_reduction",
                format!("fusion width {width} not divisible by {reduction}"),
            ));
        }
        let hidden = width / reduction;
        let w1 = store.register("fusion.w1", fan_in_uniform(rng, &[hidden, width], width), true)?;
        let w2 = store.register("fusion.w2", fan_in_uniform(rng, &[width, hidden], hidden), true)?;
        let mut projections = vec![None];
        for i in 1..channels.len() {
            projections.push(if channels[i - 1] != channels[i] {
                Some(PointwiseConv1d::new(
                    store,
                    &format!("fusion.proj{}", i + 1),
                    channels[i - 1],
                    channels[i],
                    false,
                    rng,
                )?)
            } else {
                None
            });
        }
        Ok(Self {
            w1,
            w2,
            channels: channels.to_vec(),
            hidden,
            projections,
        })
    }

    pub fn width(&self) -> usize {
        self.channels.iter().sum()
    }

    fn check_inputs(&self, ctx: &ForwardCtx<'_>, outputs: &[Var]) -> Result<()> {
        if outputs.len() != self.channels.len() {
            return Err(Error::Model(format!(
                "feature fusion expects {} block outputs, got {}",
                self.channels.len(),
                outputs.len()
            )));
        }
        for (i, (&o, &c)) in outputs.iter().zip(&self.channels).enumerate() {
            let s = ctx.tape.shape(o);
            if s.len() != 2 || s[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "feature_fusion",
                    lhs: s.to_vec(),
                    rhs: vec![c],
                })
                .map_err(|e| Error::Model(format!("block {}: {e}", i + 1)));
            }
        }
        Ok(())
    }

    /// Per-block gate vectors `w_Bi`, slices of one `sigmoid` over the joint context.
    pub fn gates(&self, ctx: &mut ForwardCtx<'_>, outputs: &[Var]) -> Result<Vec<Var>> {
        self.check_inputs(ctx, outputs)?;
        let mut avgs = Vec::with_capacity(outputs.len());
        let mut maxs = Vec::with_capacity(outputs.len());
        for &o in outputs {
            avgs.push(ctx.tape.mean_over_time(o)?);
            maxs.push(ctx.tape.max_over_time(o)?);
        }
        let avg = ctx.tape.concat(&avgs)?;
        let max = ctx.tape.concat(&maxs)?;
        let w1 = ctx.param(self.w1);
        let w2 = ctx.param(self.w2);
        let mut branch = |pooled: Var| -> Result<Var> {
            let h = ctx.tape.linear(pooled, w1, None)?;
            let h = ctx.tape.relu(h)?;
            ctx.tape.linear(h, w2, None)
        };
        let a = branch(avg)?;
        let m = branch(max)?;
        let g = ctx.tape.add(a, m)?;
        let w = ctx.tape.sigmoid(g)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            let slice = ctx.tape.slice(w, start, c)?;
            ctx.capture(format!("fusion.w{}", i + 1), slice);
            out.push(slice);
            start += c;
        }
        Ok(out)
    }

    /// Applies given gates with the chained local residual.
    pub fn combine(&self, ctx: &mut ForwardCtx<'_>, outputs: &[Var], gates: &[Var]) -> Result<Vec<Var>> {
        self.check_inputs(ctx, outputs)?;
        let mut fused: Vec<Var> = Vec::with_capacity(outputs.len());
        for (i, (&y, &w)) in outputs.iter().zip(gates).enumerate() {
            let mut h = ctx.tape.mul(y, w)?;
            if let Some(&prev) = fused.last() {
                let base = match &self.projections[i] {
                    Some(p) => p.forward(ctx, prev)?,
                    None => prev,
                };
                h = ctx.tape.add(h, base)?;
            }
            fused.push(h);
        }
        Ok(fused)
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, outputs: &[Var]) -> Result<Vec<Var>> {
        let gates = self.gates(ctx, outputs)?;
        self.combine(ctx, outputs, &gates)
    }
}

/// Conv (no bias) -> BN -> ReLU, used for C1 to C3.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: PlainConv1d,
    pub bn: BatchNorm1d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, row: &RowConfig, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        let name = row.name.to_lowercase();
        Ok(Self {
            conv: PlainConv1d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                row.kernel,
                row.stride_set[0],
                false,
                rng,
            )?,
            bn: BatchNorm1d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward_batch(&self, ctx: &mut ForwardCtx<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        let h = xs.iter().map(|&x| self.conv.forward(ctx, x)).collect::<Result<Vec<_>>>()?;
        let h = self.bn.forward_batch(ctx, &h)?;
        h.into_iter().map(|h| ctx.tape.relu(h)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub c1: ConvBnRelu,
    pub groups: Vec<BlockGroup>,
    pub fusion: Option<FusionModule>,
    pub c2: ConvBnRelu,
    pub c3: ConvBnRelu,
    pub c4: PlainConv1d,
}

impl Model {
    /// Builds and initializes the network; the same `(config, seed)` always
    /// yields bit-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let row = |n: &str| config.row(n).expect("validated");

        let c1_row = row("C1");
        let mut width = config.channels(c1_row);
        let c1 = ConvBnRelu::new(&mut store, c1_row, config.features, width, &mut rng)?;
        let mut groups = Vec::new();
        for b in config.blocks() {
            let g = BlockGroup::new(&mut store, b, width, config, &mut rng)?;
            width = g.channels;
            groups.push(g);
        }
        let fusion = if config.flags.fusion {
            let chans: Vec<usize> = groups.iter().map(|g| g.channels).collect();
            Some(FusionModule::new(&mut store, &chans, config.fusion_reduction, &mut rng)?)
        } else {
            None
        };
        let (c2_row, c3_row, c4_row) = (row("C2"), row("C3"), row("C4"));
        let c2 = ConvBnRelu::new(&mut store, c2_row, width, config.channels(c2_row), &mut rng)?;
        let c3 = ConvBnRelu::new(
            &mut store,
            c3_row,
            config.channels(c2_row),
            config.channels(c3_row),
            &mut rng,
        )?;
        let c4 = PlainConv1d::new(
            &mut store,
            "c4.conv",
            config.channels(c3_row),
            config.channels(c4_row),
            c4_row.kernel,
            c4_row.stride_set[0],
            true,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            c1,
            groups,
            fusion,
            c2,
            c3,
            c4,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Features `T x F` to log-probabilities `T' x (V+1)`, blank last.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, features: Var) -> Result<Var> {
        Ok(self.forward_batch(ctx, &[features])?[0])
    }

    /// Forwards a minibatch of utterances of any lengths. Train-mode batch
    /// norm pools its statistics over all of them; everything else is
    /// per utterance.
    pub fn forward_batch(&self, ctx: &mut ForwardCtx<'_>, features: &[Var]) -> Result<Vec<Var>> {
        if features.is_empty() {
            return Err(Error::Model("empty minibatch".into()));
        }
        let mut h = self.c1.forward_batch(ctx, features)?;
        let mut taps: Vec<Vec<Var>> = vec![Vec::with_capacity(self.groups.len()); features.len()];
        for g in &self.groups {
            let outs = g.forward_batch(ctx, &h)?;
            for (tap, &(pre, post)) in taps.iter_mut().zip(&outs) {
                tap.push(match self.config.flags.fusion_tap {
                    FusionTap::AfterRelu => post,
                    FusionTap::BeforeRelu => pre,
                });
            }
            h = outs.into_iter().map(|o| o.1).collect();
        }
        if let Some(f) = &self.fusion {
            for (hb, tap) in h.iter_mut().zip(&taps) {
                let fused = f.forward(ctx, tap)?;
                *hb = *fused.last().expect("at least one block");
            }
        }
        let h = self.c2.forward_batch(ctx, &h)?;
        let h = self.c3.forward_batch(ctx, &h)?;
        h.into_iter()
            .map(|h| {
                let logits = self.c4.forward(ctx, h)?;
                ctx.tape.log_softmax(logits)
            })
            .collect()
    }

    /// Eval-mode log-probabilities for one utterance.
    pub fn infer(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, Mode::Eval);
        let x = ctx.tape.constant(features.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode forward that also returns every attention and fusion gate,
    /// keyed `b{i}.r{r}.m{m}.att{s}` and `fusion.w{i}`.
    pub fn probe_gates(&self, features: &Tensor) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, Mode::Eval);
        ctx.enable_capture();
        let x = ctx.tape.constant(features.clone());
        let out = self.forward(&mut ctx, x)?;
        let gates = ctx.take_captures();
        Ok((tape.value(out).clone(), gates))
    }

    /// Output frame count for `frames` input frames (every strided conv row rounds up).
    pub fn output_frames(&self, frames: usize) -> usize {
        [&self.c1.conv, &self.c2.conv, &self.c3.conv, &self.c4]
            .iter()
            .fold(frames, |t, conv| t.div_ceil(conv.stride))
    }

    /// Zeroes every attention and fusion MLP weight so all gates read 0.5.
    pub fn zero_gates(&mut self) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.contains(".att") || p.name.starts_with("fusion.w"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// The last module of the last block group, whose gates are dumped for analysis.
    pub fn last_module(&self) -> &MultiResModule {
        let g = self.groups.last().expect("at least one block");
        let r = g.repeats.last().expect("R >= 1");
        r.modules.last().expect("M >= 1")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Channels;
    use crate::gradcheck::check_gradient;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        fan_in_uniform(&mut rng(seed), shape, 1)
    }

    fn toy() -> ModelConfig {
        ModelConfig::preset("toy").unwrap()
    }

    fn eval(store: &ParamStore, x: &Tensor, f: impl Fn(&mut ForwardCtx<'_>, Var) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, store, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let y = f(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn zero_gating_weights_halve_the_input() {
        let mut store = ParamStore::new();
        let att = ChannelAttention::new(&mut store, "att", 8, 4, &mut rng(0)).unwrap();
        store.get_mut(att.w1).data_mut().fill(0.0);
        store.get_mut(att.w2).data_mut().fill(0.0);
        let x = random(&[6, 8], 1);
        let y = eval(&store, &x, |c, x| Ok(att.forward(c, x)?.0));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn constant_input_collapses_pooling() {
        let mut store = ParamStore::new();
        let att = ChannelAttention::new(&mut store, "att", 4, 2, &mut rng(3)).unwrap();
        let v = vec![0.3, -0.7, 1.1, 0.2];
        let x = Tensor::from_rows(&vec![v.clone(); 5]).unwrap();
        let w = eval(&store, &x, |c, x| Ok(att.forward(c, x)?.1));
        // sigmoid(2 * W2 relu(W1 v))
        let w1 = store.get(att.w1);
        let w2 = store.get(att.w2);
        let h: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| w1.at(j, i) * v[i]).sum::<f64>().max(0.0))
            .collect();
        for c in 0..4 {
            let z: f64 = (0..2).map(|j| w2.at(c, j) * h[j]).sum();
            let expected = 1.0 / (1.0 + (-2.0 * z).exp());
            assert!((w.data()[c] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_gradient_through_pool_mlp_sigmoid_scale() {
        for seed in 0..5u64 {
            let mut store = ParamStore::new();
            let att = ChannelAttention::new(&mut store, "att", 8, 4, &mut rng(seed)).unwrap();
            let x = random(&[7, 8], seed + 11);
            let probe = random(&[7, 8], seed + 12);
            let err = check_gradient(
                |tape, xv| {
                    let mut ctx = ForwardCtx::new(tape, &store, Mode::Train);
                    let (y, _) = att.forward(&mut ctx, xv)?;
                    let p = ctx.tape.constant(probe.clone());
                    let y = ctx.tape.mul(y, p)?;
                    ctx.tape.sum(y)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    fn module_cfg(attention: bool) -> ModelConfig {
        let mut cfg = toy();
        cfg.flags.attention = attention;
        cfg
    }

    #[test]
    fn single_stream_without_attention_is_a_separable_conv() {
        let cfg = module_cfg(false);
        let mut store = ParamStore::new();
        let m = MultiResModule::new(&mut store, "m", 5, 8, 8, &[1], &cfg, &mut rng(2)).unwrap();
        let x = random(&[9, 8], 4);
        let got = eval(&store, &x, |c, x| m.forward(c, x));
        let s = &m.streams[0];
        let want = eval(&store, &x, |c, x| {
            let h = s.depthwise.forward(c, x)?;
            let h = m.pointwise[0].forward(c, h)?;
            let h = s.bn.forward(c, h)?;
            c.tape.relu(h)
        });
        assert_eq!(got, want);
    }

    #[test]
    fn identical_streams_double_the_output() {
        let mut cfg = module_cfg(false);
        cfg.flags.share_pointwise = true;
        let mut store = ParamStore::new();
        let m = MultiResModule::new(&mut store, "m", 5, 8, 8, &[1, 1], &cfg, &mut rng(2)).unwrap();
        let k0 = store.get(m.streams[0].depthwise.kernel).clone();
        *store.get_mut(m.streams[1].depthwise.kernel) = k0;
        let x = random(&[9, 8], 4);
        let both = eval(&store, &x, |c, x| m.forward(c, x));
        let mut single = m.clone();
        single.streams.truncate(1);
        let one = eval(&store, &x, |c, x| single.forward(c, x));
        for (a, b) in both.data().iter().zip(one.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn four_stream_module_keeps_t_by_512() {
        let cfg = ModelConfig::preset("5x3").unwrap();
        let mut store = ParamStore::new();
        let m = MultiResModule::new(&mut store, "b1.r0.m0", 63, 512, 512, &[1, 2, 3, 4], &cfg, &mut rng(0)).unwrap();
        let x = random(&[12, 512], 5);
        let y = eval(&store, &x, |c, x| m.forward(c, x));
        assert_eq!(y.shape(), &[12, 512]);
        assert_eq!(m.dilations(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn fusion_single_block_zero_gates() {
        let mut store = ParamStore::new();
        let f = FusionModule::new(&mut store, &[8], 4, &mut rng(0)).unwrap();
        store.get_mut(f.w1).data_mut().fill(0.0);
        store.get_mut(f.w2).data_mut().fill(0.0);
        let y = random(&[5, 8], 1);
        let out = eval(&store, &y, |c, y| Ok(f.forward(c, &[y])?[0]));
        for (a, b) in out.data().iter().zip(y.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn unit_gates_reduce_to_dense_residual_sum() {
        let mut store = ParamStore::new();
        let f = FusionModule::new(&mut store, &[4, 4, 4], 4, &mut rng(0)).unwrap();
        let ys: Vec<Tensor> = (0..3).map(|i| random(&[6, 4], 10 + i)).collect();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &store, Mode::Eval);
        let vars: Vec<Var> = ys.iter().map(|y| ctx.tape.constant(y.clone())).collect();
        let ones: Vec<Var> = (0..3).map(|_| ctx.tape.constant(Tensor::full(&[4], 1.0))).collect();
        let fused = f.combine(&mut ctx, &vars, &ones).unwrap();
        let last = ctx.tape.value(fused[2]);
        for i in 0..last.numel() {
            let want = ys[0].data()[i] + ys[1].data()[i] + ys[2].data()[i];
            assert!((last.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_slices_follow_block_widths() {
        let cfg = ModelConfig::preset("15x5").unwrap();
        let chans: Vec<usize> = cfg.blocks().map(|r| cfg.channels(r)).collect();
        let mut store = ParamStore::new();
        let f = FusionModule::new(&mut store, &chans, 16, &mut rng(0)).unwrap();
        assert_eq!(f.width(), 2048);
        assert_eq!(store.get(f.w1).shape(), &[128, 2048]);
        // only the 256 -> 512 boundary needs a projection
        let projected: Vec<bool> = f.projections.iter().map(Option::is_some).collect();
        assert_eq!(projected, vec![false, false, true, false, false]);

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &store, Mode::Eval);
        let ys: Vec<Var> = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| ctx.tape.constant(random(&[3, c], i as u64)))
            .collect();
        let gates = f.gates(&mut ctx, &ys).unwrap();
        let lens: Vec<usize> = gates.iter().map(|&g| ctx.tape.shape(g)[0]).collect();
        assert_eq!(lens, vec![256, 256, 512, 512, 512]);
        let out = f.combine(&mut ctx, &ys, &gates).unwrap();
        let shapes: Vec<Vec<usize>> = out.iter().map(|&o| ctx.tape.shape(o).to_vec()).collect();
        assert_eq!(shapes[4], vec![3, 512]);
    }

    #[test]
    fn fusion_rejects_wrong_block_count_and_width() {
        let mut store = ParamStore::new();
        let f = FusionModule::new(&mut store, &[4, 4], 4, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &store, Mode::Eval);
        let a = ctx.tape.constant(Tensor::zeros(&[3, 4]));
        let b = ctx.tape.constant(Tensor::zeros(&[3, 5]));
        assert!(f.forward(&mut ctx, &[a]).is_err());
        assert!(f.forward(&mut ctx, &[a, b]).is_err());
    }

    #[test]
    fn fusion_gradient() {
        for seed in 0..5u64 {
            let mut store = ParamStore::new();
            let f = FusionModule::new(&mut store, &[4, 8], 4, &mut rng(seed)).unwrap();
            let other = random(&[5, 4], seed + 30);
            let x = random(&[5, 8], seed + 31);
            let probe = random(&[5, 8], seed + 32);
            let err = check_gradient(
                |tape, xv| {
                    let mut ctx = ForwardCtx::new(tape, &store, Mode::Train);
                    let o = ctx.tape.variable(other.clone());
                    let out = f.forward(&mut ctx, &[o, xv])?;
                    let p = ctx.tape.constant(probe.clone());
                    let y = ctx.tape.mul(out[1], p)?;
                    ctx.tape.sum(y)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn toy_forward_is_normalized_and_deterministic() {
        let cfg = toy();
        let model = Model::build(&cfg, 7).unwrap();
        let x = random(&[20, 64], 1);
        let lp = model.infer(&x).unwrap();
        assert_eq!(lp.shape(), &[20, 7]);
        for t in 0..20 {
            let lse = crate::ctc::log_sum_exp(lp.row(t));
            assert!(lse.abs() < 1e-10);
        }
        let again = Model::build(&cfg, 7).unwrap().infer(&x).unwrap();
        assert_eq!(lp, again);
        let other = Model::build(&cfg, 8).unwrap().infer(&x).unwrap();
        assert_ne!(lp, other);
    }

    #[test]
    fn eval_batch_matches_single_utterances() {
        let model = Model::build(&toy(), 4).unwrap();
        let xs = [random(&[14, 64], 1), random(&[9, 64], 2), random(&[21, 64], 3)];
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &model.store, Mode::Eval);
        let vars: Vec<Var> = xs.iter().map(|x| ctx.tape.constant(x.clone())).collect();
        let outs = model.forward_batch(&mut ctx, &vars).unwrap();
        for (x, &o) in xs.iter().zip(&outs) {
            assert_eq!(ctx.tape.value(o), &model.infer(x).unwrap());
        }
    }

    #[test]
    fn train_batch_of_duplicates_matches_one_copy() {
        let model = Model::build(&toy(), 5).unwrap();
        let x = random(&[16, 64], 8);
        let run = |copies: usize| {
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new(&mut tape, &model.store, Mode::Train);
            let vars: Vec<Var> = (0..copies).map(|_| ctx.tape.constant(x.clone())).collect();
            let outs = model.forward_batch(&mut ctx, &vars).unwrap();
            let values: Vec<Tensor> = outs.iter().map(|&o| ctx.tape.value(o).clone()).collect();
            (values, ctx.take_bn_updates().len())
        };
        let (one, n1) = run(1);
        let (two, n2) = run(2);
        // duplicating the batch leaves the pooled statistics unchanged
        assert_eq!(n1, n2);
        for y in &two {
            for (a, b) in y.data().iter().zip(one[0].data()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &model.store, Mode::Train);
        assert!(model.forward_batch(&mut ctx, &[]).is_err());
    }

    #[test]
    fn table_configs_have_expected_structure() {
        let small = ModelConfig::preset("5x3").unwrap();
        let mut shallow = small.clone();
        // shrink widths so the structural check stays cheap
        for r in shallow.rows.iter_mut() {
            if let Channels::Count(c) = r.channels {
                r.channels = Channels::Count(c / 16);
            }
        }
        shallow.reduction = 4;
        let m = Model::build(&shallow, 0).unwrap();
        assert_eq!(m.groups.len(), 5);
        for g in &m.groups {
            assert_eq!(g.repeats.len(), 1);
            assert_eq!(g.repeats[0].modules.len(), 3);
            assert!(g.repeats[0].modules.iter().all(|md| md.streams.len() == 4));
        }

        let mut large = ModelConfig::preset("15x5").unwrap();
        for r in large.rows.iter_mut() {
            if let Channels::Count(c) = r.channels {
                r.channels = Channels::Count(c / 16);
            }
        }
        large.reduction = 4;
        let m = Model::build(&large, 0).unwrap();
        assert_eq!(m.groups.len(), 5);
        for g in &m.groups {
            assert_eq!(g.repeats.len(), 3);
            assert!(g.repeats.iter().all(|r| r.modules.len() == 5));
            assert!(g.repeats.iter().flat_map(|r| &r.modules).all(|md| md.streams.len() == 2));
        }
    }

    #[test]
    fn disabling_multi_res_forces_one_dilation_one_stream() {
        let mut cfg = toy();
        cfg.flags.multi_res = false;
        let m = Model::build(&cfg, 0).unwrap();
        assert!(m.groups.iter().all(|g| g.repeats[0].modules.iter().all(|md| md.dilations() == vec![1])));
    }

    #[test]
    fn zero_gates_give_half_everywhere() {
        let mut m = Model::build(&toy(), 3).unwrap();
        m.zero_gates();
        let (_, gates) = m.probe_gates(&random(&[15, 64], 2)).unwrap();
        assert!(!gates.is_empty());
        assert!(gates.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn fusion_tap_before_relu_changes_the_output() {
        let mut cfg = toy();
        let x = random(&[12, 64], 9);
        let after = Model::build(&cfg, 1).unwrap().infer(&x).unwrap();
        cfg.flags.fusion_tap = FusionTap::BeforeRelu;
        let before = Model::build(&cfg, 1).unwrap().infer(&x).unwrap();
        assert_eq!(after.shape(), before.shape());
        assert_ne!(after, before);
    }
}
