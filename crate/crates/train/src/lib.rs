//! Training and evaluation for the multi-resolution QuartzNet recognizer.

pub mod checkpoint;
pub mod corpus;
pub mod dump;
pub mod error;
pub mod evaluate;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Result, TrainError};
pub use optim::Novograd;
pub use schedule::ScheduleConfig;
pub use trainer::{TrainConfig, Trainer};
