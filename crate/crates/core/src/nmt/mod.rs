//! Toy many-to-one transformer translation model: synthetic corpora,
//! training, greedy decoding with head masking and attention capture.

pub mod checkpoint;
pub mod config;
pub mod data;
mod decode;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, TrainConfig};
pub use data::{gen_corpus, Split, SyntheticTaskSpec, TaskData, Transform, Vocab};
pub use decode::{SentenceFailure, Translation};
pub use gradcheck::{grad_check, grad_check_model, GradCheckOptions, GradCheckReport};
pub use model::{Batch, Model, Params};
pub use train::{examples, train, EpochStats, Example, TrainReport};
