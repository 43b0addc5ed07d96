//! Trained-model plumbing: the text codec wrapper, the unified model facade,
//! the trainer and checkpoint files.

pub mod checkpoint;
pub mod codec;
pub mod model;
pub mod train;

pub use checkpoint::{content_hash, Checkpoint, Lineage};
pub use codec::TextCodec;
pub use model::{Generated, Request, UniModel};
pub use train::{build_model, check_dataset, read_log, train_to_dir, AdamState, ModelConfig, StepRecord, TrainConfig, Trainer};
