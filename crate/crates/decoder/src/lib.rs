//! Decoding side of the recognizer: the character vocabulary, a smoothed
//! character n-gram language model, CTC prefix beam search with shallow LM
//! fusion, and character error rate.

pub mod beam;
pub mod cer;
pub mod error;
pub mod lm;
pub mod oracle;
pub mod vocab;

pub use beam::{beam_search, BeamConfig, BeamHypothesis};
pub use cer::{cer, edit_distance, CerTotals};
pub use error::{DecoderError, Result};
pub use lm::NGramLM;
pub use vocab::Vocabulary;
