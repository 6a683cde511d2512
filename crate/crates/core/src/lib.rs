//! Streaming block-processing transformer encoder.
//!
//! The encoder segments an utterance into fixed-size center blocks with a
//! hard-copied lookahead span per block, attends over compressed long-form
//! memory, cached left context, center, and lookahead, and runs a
//! streaming-consistent convolution block. Two forward paths are provided
//! and kept numerically equivalent: a parallel whole-utterance path (the
//! training layout) and an incremental per-block streaming path (the
//! decoding layout).

pub mod attention;
pub mod config;
pub mod conv;
pub mod error;
pub mod io;
pub mod layer;
pub mod model;
pub mod tensor;

pub use config::{plan_blocks, superframe_stack, BlockPlan, ModelConfig, Precision};
pub use error::{Error, Result};
pub use model::{
    check_equivalence, encoder_forward_parallel, encoder_forward_streaming, gen_weights,
    random_features, EquivalenceReport, ModelWeights, StreamingSession,
};
pub use tensor::{Scalar, Tensor};
