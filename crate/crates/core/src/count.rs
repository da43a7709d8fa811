//! Parameter accounting, both from the configuration alone and by walking a built model.

use std::fmt;

use crate::config::ModelConfig;
use crate::params::ParamStore;

/// Trainable entries of one row, split by component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RowCount {
    pub row: String,
    /// Full convolutions and the output bias (`C1..C4`).
    pub conv: usize,
    pub depthwise: usize,
    pub pointwise: usize,
    pub bn: usize,
    pub attention: usize,
    /// Skip path of each repeat, pointwise weights plus BN.
    pub residual: usize,
    pub fusion: usize,
}

impl RowCount {
    fn new(row: &str) -> Self {
        Self {
            row: row.to_string(),
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.conv + self.depthwise + self.pointwise + self.bn + self.attention + self.residual + self.fusion
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub rows: Vec<RowCount>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.rows.iter().map(RowCount::total).sum()
    }

    pub fn row(&self, name: &str) -> Option<&RowCount> {
        self.rows.iter().find(|r| r.row == name)
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8}{:>12}{:>12}{:>12}{:>10}{:>11}{:>10}{:>10}{:>13}",
            "row", "conv", "depthwise", "pointwise", "bn", "attention", "residual", "fusion", "total"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8}{:>12}{:>12}{:>12}{:>10}{:>11}{:>10}{:>10}{:>13}",
                r.row,
                r.conv,
                r.depthwise,
                r.pointwise,
                r.bn,
                r.attention,
                r.residual,
                r.fusion,
                r.total()
            )?;
        }
        write!(f, "{:<8}{:>100}", "total", self.total())
    }
}

/// Weights of the core of one separable module with `streams` dilations:
/// `K*C*S` depthwise plus one shared `C*C` pointwise.
pub fn separable_core(kernel: usize, channels: usize, streams: usize) -> usize {
    kernel * channels * streams + channels * channels
}

/// Weights of a full `K`-tap convolution from `C` to `C` channels.
pub fn traditional_conv(kernel: usize, channels: usize) -> usize {
    kernel * channels * channels
}

/// Counts derived from the configuration without building the model.
pub fn analytic(cfg: &ModelConfig) -> ParamCount {
    let flags = &cfg.flags;
    let mut rows = Vec::new();
    let row = |n: &str| cfg.row(n).expect("valid config");

    let c1 = row("C1");
    let mut width = cfg.channels(c1);
    let mut r = RowCount::new("C1");
    r.conv = c1.kernel * cfg.features * width;
    r.bn = 2 * width;
    rows.push(r);

    let mut block_widths = Vec::new();
    for b in cfg.blocks() {
        let c = cfg.channels(b);
        let s = cfg.streams(b);
        let mut r = RowCount::new(&b.name);
        for rep in 0..b.repeats {
            let rep_in = if rep == 0 { width } else { c };
            for m in 0..b.modules {
                let cin = if m == 0 { rep_in } else { c };
                r.depthwise += b.kernel * cin * s;
                r.pointwise += cin * c * if flags.share_pointwise { 1 } else { s };
                r.bn += 2 * c * s;
                if flags.attention {
                    let modules = if flags.share_attention { 1 } else { s };
                    r.attention += modules * 2 * c * (c / cfg.reduction);
                }
            }
            if flags.block_residual {
                r.residual += rep_in * c + 2 * c;
            }
        }
        rows.push(r);
        block_widths.push(c);
        width = c;
    }

    if flags.fusion {
        let mut r = RowCount::new("fusion");
        let hat: usize = block_widths.iter().sum();
        r.fusion = 2 * hat * (hat / cfg.fusion_reduction);
        r.fusion += block_widths
            .windows(2)
            .filter(|w| w[0] != w[1])
            .map(|w| w[0] * w[1])
            .sum::<usize>();
        rows.push(r);
    }

    let (c2, c3, c4) = (row("C2"), row("C3"), row("C4"));
    let (w2, w3, w4) = (cfg.channels(c2), cfg.channels(c3), cfg.channels(c4));
    let mut r = RowCount::new("C2");
    r.conv = c2.kernel * width * w2;
    r.bn = 2 * w2;
    rows.push(r);
    let mut r = RowCount::new("C3");
    r.conv = c3.kernel * w2 * w3;
    r.bn = 2 * w3;
    rows.push(r);
    let mut r = RowCount::new("C4");
    r.conv = c4.kernel * w3 * w4 + w4;
    rows.push(r);

    ParamCount { rows }
}

/// Counts obtained by classifying every trainable tensor of a built store by name.
pub fn enumerated(store: &ParamStore) -> ParamCount {
    let mut rows: Vec<RowCount> = Vec::new();
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let mut parts = p.name.split('.');
        let head = parts.next().unwrap_or_default();
        let row = if head == "fusion" { "fusion".to_string() } else { head.to_uppercase() };
        let idx = match rows.iter().position(|r| r.row == row) {
            Some(i) => i,
            None => {
                rows.push(RowCount::new(&row));
                rows.len() - 1
            }
        };
        let r = &mut rows[idx];
        let n = p.value.numel();
        let name = p.name.as_str();
        let segment = name.rsplit('.').nth(1).unwrap_or_default();
        if head == "fusion" {
            r.fusion += n;
        } else if name.contains(".res.") {
            r.residual += n;
        } else if segment.starts_with("att") {
            r.attention += n;
        } else if segment.starts_with("dw") {
            r.depthwise += n;
        } else if segment.starts_with("pw") {
            r.pointwise += n;
        } else if segment.starts_with("bn") {
            r.bn += n;
        } else {
            r.conv += n;
        }
    }
    ParamCount { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn separable_cost_examples() {
        assert_eq!(separable_core(33, 256, 1), 73_984);
        assert_eq!(separable_core(33, 256, 2), 82_432);
        assert_eq!(traditional_conv(33, 256), 2_162_688);
        let ratio = traditional_conv(33, 256) as f64 / separable_core(33, 256, 2) as f64;
        assert!((ratio - 26.23).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn toy_analytic_matches_enumerated() {
        let cfg = ModelConfig::preset("toy").unwrap();
        let model = Model::build(&cfg, 0).unwrap();
        let a = analytic(&cfg);
        assert_eq!(a, enumerated(&model.store));
        assert_eq!(a.total(), model.store.trainable_count());
    }

    #[test]
    fn flag_variants_stay_consistent() {
        let base = ModelConfig::preset("toy").unwrap();
        for bits in 0..64u32 {
            let mut cfg = base.clone();
            cfg.flags.multi_res = bits & 1 != 0;
            cfg.flags.attention = bits & 2 != 0;
            cfg.flags.fusion = bits & 4 != 0;
            cfg.flags.block_residual = bits & 8 != 0;
            cfg.flags.share_attention = bits & 16 != 0;
            cfg.flags.share_pointwise = bits & 32 != 0;
            let model = Model::build(&cfg, 0).unwrap();
            assert_eq!(analytic(&cfg), enumerated(&model.store), "flags {bits:06b}");
        }
    }

    #[test]
    fn display_lists_every_row() {
        let cfg = ModelConfig::preset("toy").unwrap();
        let text = analytic(&cfg).to_string();
        for name in ["C1", "B1", "B5", "fusion", "C2", "C3", "C4", "total"] {
            assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
        }
    }
}
