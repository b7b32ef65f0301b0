//! Train small transformer encoders and squeeze them down: vocabulary,
//! depth and width pruning with knowledge distillation, computational-graph
//! optimization, and post-training int8 quantization.

pub mod bench;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{GcError, Result};
