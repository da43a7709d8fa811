//! Audio front end: 16 kHz PCM WAV input, MFCC features, SpecAugment masks,
//! the binary feature cache and transcript files.

pub mod audio;
pub mod error;
pub mod features;
pub mod mfcc;
pub mod specaug;
pub mod synth;
pub mod transcript;

pub use audio::{load_wav, write_wav, AudioSample, SAMPLE_RATE};
pub use error::{FrontendError, Result};
pub use features::FeatureMatrix;
pub use mfcc::{mfcc, Mfcc, MfccConfig};
pub use specaug::{spec_augment, SpecAugmentPolicy};
