//! SpecAugment frequency and time masking.

use mqnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FrontendError, Result};
use crate::features::FeatureMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentPolicy {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub rng_seed: u64,
    /// Reserved; enabling it is an error.
    pub speed_perturb: bool,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            num_freq_masks: 1,
            max_freq_width: 8,
            num_time_masks: 1,
            max_time_width: 10,
            rng_seed: 0,
            speed_perturb: false,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            num_freq_masks: 0,
            num_time_masks: 0,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Freq,
    Time,
}

/// A band `start..start + width` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub axis: Axis,
    pub start: usize,
    pub width: usize,
}

/// Draws masks for a `frames x dim` matrix. Widths are uniform in
/// `0..=max` and clipped to the axis length.
pub fn sample_masks(p: &SpecAugmentPolicy, frames: usize, dim: usize) -> Result<Vec<Mask>> {
    if p.speed_perturb {
        return Err(FrontendError::SpeedPerturbUnsupported);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
    let mut masks = Vec::with_capacity(p.num_freq_masks + p.num_time_masks);
    let plan = [
        (Axis::Freq, p.num_freq_masks, p.max_freq_width, dim),
        (Axis::Time, p.num_time_masks, p.max_time_width, frames),
    ];
    for (axis, count, max, len) in plan {
        for _ in 0..count {
            let width = rng.gen_range(0..=max).min(len);
            let start = rng.gen_range(0..=len - width);
            masks.push(Mask { axis, start, width });
        }
    }
    Ok(masks)
}

/// Zeroes the masked cells; all other cells are copied unchanged.
pub fn apply_masks(frames: &Tensor, masks: &[Mask]) -> Tensor {
    let mut out = frames.clone();
    let (t, f) = (frames.rows(), frames.cols());
    let data = out.data_mut();
    for m in masks {
        let end = m.start + m.width;
        match m.axis {
            Axis::Freq => {
                for row in 0..t {
                    data[row * f + m.start.min(f)..row * f + end.min(f)].fill(0.0);
                }
            }
            Axis::Time => data[m.start.min(t) * f..end.min(t) * f].fill(0.0),
        }
    }
    out
}

pub fn spec_augment(f: &FeatureMatrix, p: &SpecAugmentPolicy) -> Result<FeatureMatrix> {
    let masks = sample_masks(p, f.num_frames(), f.dim())?;
    Ok(FeatureMatrix {
        frames: apply_masks(&f.frames, &masks),
        ..f.clone()
    })
}
