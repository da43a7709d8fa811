//! Core of the multi-resolution QuartzNet stack: tensors with a gradient
//! tape, the primitive layers, the acoustic model and CTC.

pub mod config;
pub mod count;
pub mod ctc;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use params::{ForwardCtx, Mode, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
