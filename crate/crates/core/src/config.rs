//! Model configuration: one row per layer group plus global settings.
//!
//! The on-disk form is TOML. Rows appear in network order as `[[row]]`
//! tables: `C1`, then block groups `B1..BI`, then `C2`, `C3`, `C4`.
//!
//! ```toml
//! vocab_size = 28
//! features = 64
//! reduction = 16          # D, attention bottleneck
//! fusion_reduction = 16   # D-hat, fusion bottleneck
//!
//! [flags]
//! multi_res = true
//! attention = true
//! fusion = true
//! block_residual = true
//! share_attention = false
//! share_pointwise = true
//! fusion_tap = "after_relu"   # or "before_relu"
//!
//! [[row]]
//! name = "C1"
//! R = 1
//! M = 1
//! K = 33
//! C = 256
//! stride_set = [1]
//! ```
//!
//! `C` of the final row may be written as `"labels"`, meaning `vocab_size + 1`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PRESET_5X3: &str = include_str!("../presets/multiquartznet_5x3.toml");
pub const PRESET_15X5: &str = include_str!("../presets/multiquartznet_15x5.toml");
pub const PRESET_TOY: &str = include_str!("../presets/toy.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionTap {
    #[default]
    AfterRelu,
    BeforeRelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    /// Off forces every block module down to a single dilation-1 stream.
    pub multi_res: bool,
    pub attention: bool,
    pub fusion: bool,
    /// Pointwise + BN skip around each repeat, added before its last ReLU.
    pub block_residual: bool,
    /// One attention MLP per module instead of one per stream.
    pub share_attention: bool,
    /// One pointwise matrix per module, applied to every stream.
    pub share_pointwise: bool,
    pub fusion_tap: FusionTap,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            multi_res: true,
            attention: true,
            fusion: true,
            block_residual: true,
            share_attention: false,
            share_pointwise: true,
            fusion_tap: FusionTap::AfterRelu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Channels {
    Count(usize),
    Named(LabelsMarker),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelsMarker {
    Labels,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    pub name: String,
    #[serde(rename = "R")]
    pub repeats: usize,
    #[serde(rename = "M")]
    pub modules: usize,
    #[serde(rename = "K")]
    pub kernel: usize,
    #[serde(rename = "C")]
    pub channels: Channels,
    pub stride_set: Vec<usize>,
}

impl RowConfig {
    pub fn is_block(&self) -> bool {
        self.name.starts_with('B')
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    pub reduction: usize,
    pub fusion_reduction: usize,
    #[serde(default)]
    pub flags: Flags,
    #[serde(rename = "row")]
    pub rows: Vec<RowConfig>,
}

fn default_features() -> usize {
    64
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `5x3`, `15x5` or `toy`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "5x3" | "small" => Self::from_toml(PRESET_5X3),
            "15x5" | "large" => Self::from_toml(PRESET_15X5),
            "toy" => Self::from_toml(PRESET_TOY),
            other => Err(Error::ConfigParse(format!("unknown preset {other}"))),
        }
    }

    /// Stable 64-bit digest of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn row(&self, name: &str) -> Option<&RowConfig> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &RowConfig> {
        self.rows.iter().filter(|r| r.is_block())
    }

    pub fn block_count(&self) -> usize {
        self.blocks().count()
    }

    /// Output channels of a row, resolving `"labels"`.
    pub fn channels(&self, row: &RowConfig) -> usize {
        match row.channels {
            Channels::Count(c) => c,
            Channels::Named(LabelsMarker::Labels) => self.vocab_size + 1,
        }
    }

    /// Number of parallel streams a block row runs with under the current flags.
    pub fn streams(&self, row: &RowConfig) -> usize {
        if self.flags.multi_res {
            row.stride_set.len()
        } else {
            1
        }
    }

    pub fn dilations(&self, row: &RowConfig) -> Vec<usize> {
        row.stride_set[..self.streams(row)].to_vec()
    }

    /// Sum of block-group channel counts, the fusion context width.
    pub fn fusion_width(&self) -> usize {
        self.blocks().map(|r| self.channels(r)).sum()
    }

    /// A small network with `groups` identical block groups of width `channels`
    /// (R = 1, M = 2, K = 5, dilations `[1, 2]`), for tests and quick experiments.
    pub fn tiny(vocab_size: usize, features: usize, channels: usize, groups: usize) -> Self {
        let conv = |name: &str, kernel: usize, c: Channels| RowConfig {
            name: name.to_string(),
            repeats: 1,
            modules: 1,
            kernel,
            channels: c,
            stride_set: vec![1],
        };
        let mut rows = vec![conv("C1", 5, Channels::Count(channels))];
        rows.extend((1..=groups).map(|i| RowConfig {
            name: format!("B{i}"),
            repeats: 1,
            modules: 2,
            kernel: 5,
            channels: Channels::Count(channels),
            stride_set: vec![1, 2],
        }));
        rows.push(conv("C2", 5, Channels::Count(channels)));
        rows.push(conv("C3", 1, Channels::Count(2 * channels)));
        rows.push(conv("C4", 1, Channels::Named(LabelsMarker::Labels)));
        let fusion_width = channels * groups;
        Self {
            vocab_size,
            features,
            reduction: if channels % 4 == 0 { 4 } else { 1 },
            fusion_reduction: if fusion_width % 4 == 0 { 4 } else { 1 },
            flags: Flags::default(),
            rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("globals", "vocab_size", "must be positive"));
        }
        if self.features == 0 {
            return Err(Error::config("globals", "features", "must be positive"));
        }
        if self.reduction == 0 || self.fusion_reduction == 0 {
            return Err(Error::config("globals", "reduction", "reduction ratios must be positive"));
        }
        let names: Vec<&str> = self.rows.iter().map(|r| r.name.as_str()).collect();
        let blocks = names.iter().filter(|n| n.starts_with('B')).count();
        let mut expected = vec!["C1".to_string()];
        expected.extend((1..=blocks).map(|i| format!("B{i}")));
        expected.extend(["C2", "C3", "C4"].map(String::from));
        if blocks == 0 || names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::config(
                "rows",
                "name",
                format!("expected rows {expected:?} with at least one block, got {names:?}"),
            ));
        }
        for row in &self.rows {
            let name = row.name.as_str();
            let c = match row.channels {
                Channels::Count(0) => return Err(Error::config(name, "C", "must be positive")),
                Channels::Count(c) => c,
                Channels::Named(_) if name != "C4" => {
                    return Err(Error::config(name, "C", "only C4 may use \"labels\""));
                }
                Channels::Named(_) => self.vocab_size + 1,
            };
            if row.kernel % 2 == 0 {
                return Err(Error::config(name, "K", format!("{} must be odd", row.kernel)));
            }
            if row.repeats == 0 || row.modules == 0 {
                return Err(Error::config(name, "R", "R and M must be positive"));
            }
            if row.stride_set.is_empty() || row.stride_set.contains(&0) {
                return Err(Error::config(name, "stride_set", "must be non-empty and positive"));
            }
            if row.is_block() {
                if !row.stride_set.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::config(name, "stride_set", "must be strictly ascending"));
                }
                if self.flags.attention && c % self.reduction != 0 {
                    return Err(Error::config(
                        name,
                        "C",
                        format!("{c} is not divisible by reduction {}", self.reduction),
                    ));
                }
            } else {
                if row.repeats != 1 || row.modules != 1 {
                    return Err(Error::config(name, "R", "convolution rows have R = M = 1"));
                }
                if row.stride_set.len() != 1 {
                    return Err(Error::config(name, "stride_set", "convolution rows take a single stride"));
                }
            }
        }
        for name in ["C3", "C4"] {
            if self.row(name).map(|r| r.kernel) != Some(1) {
                return Err(Error::config(name, "K", "must be 1"));
            }
        }
        let c4 = self.row("C4").expect("validated");
        if self.channels(c4) != self.vocab_size + 1 {
            return Err(Error::config(
                "C4",
                "C",
                format!("must equal vocab_size + 1 = {}", self.vocab_size + 1),
            ));
        }
        if self.flags.fusion && self.fusion_width() % self.fusion_reduction != 0 {
            return Err(Error::config(
                "globals",
                "fusion_reduction",
                format!(
                    "fusion width {} is not divisible by {}",
                    self.fusion_width(),
                    self.fusion_reduction
                ),
            ));
        }
        Ok(())
    }
}
