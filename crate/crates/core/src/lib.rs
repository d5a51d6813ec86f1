//! Counterfactual statement detection and antecedent/consequent span regression.
//!
//! A small transformer encoder is trained from scratch. The contextual output
//! embeddings of its last three layers are mean-pooled, and the matching
//! self-attention weights are mined by two convolutional blocks. Both views are
//! fused into one layer-normalized feature vector that feeds either a sigmoid
//! classifier (stage 1) or a four-output span regressor (stage 2, fine-tuned
//! from the stage-1 base).
//!
//! Module map:
//!
//! - [`corpus`]: CSV loaders, offset-preserving tokenizer, vocabulary, seeded splits
//! - [`encoder`]: transformer encoder exposing per-layer embeddings and attention
//! - [`fusion`]: pooling, attention convolution, layer norm, feature projection
//! - [`heads`]: classification and span-regression heads
//! - [`spans`]: length-normalized span codec
//! - [`training`]: losses, Adam, the two-stage training protocol, checkpoints
//! - [`metrics`]: binary and character-overlap span metrics
//! - [`analysis`]: per-token head attribution, lexical tags, heatmap export
//! - [`synthetic`]: template corpora for demos and smoke tests
//! - [`cli`]: the `train | eval | predict | analyze` command runner

pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
mod error;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod spans;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, TrainConfig};
pub use corpus::{BinaryLabel, CharSpan, EncodedInput, SpanQuad, Statement, TokenSpan, Vocab};
pub use encoder::{AttentionStack, EncoderOutput};
pub use error::{Error, Result};
pub use model::{HeadKind, Mode, Model, Pass};
pub use spans::NormalizedSpanQuad;
pub use tensor::Tensor;
pub use training::{Checkpoint, Stage};
