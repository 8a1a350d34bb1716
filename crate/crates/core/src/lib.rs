pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod eval;
pub mod error;
pub mod generator;
pub mod optim;
pub mod gradcheck;
pub mod params;
pub mod sentence;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod workflow;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use discriminator::Variant;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use params::{Bound, ParamId, ParamStore};
pub use sentence::{Sentence, SoftSentence, StyleId, BOS, EOS, NUM_RESERVED, PAD, UNK};
pub use tensor::{AttentionMask, Tape, Tensor, Var};
pub use training::{Ablations, Model, Trainer, TrainingConfig};
pub use transformer::TransformerConfig;
