//! Cross-modality matching with bi-directional cross interaction.
//!
//! The crate covers the whole pipeline at desk scale: a taped `f64`
//! autodiff core, trainable layers, a synthetic visible/infrared dataset,
//! a shared patch encoder, the two-stream cross-interaction decoder,
//! query-aware reciprocal patch scoring, and CMC/mAP retrieval evaluation.

pub mod autodiff;
pub mod bci;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod matcher;
pub mod nn;
pub mod pipeline;
pub mod qascore;
pub mod retrieval;
pub mod synthdata;
pub mod tensor;

pub use autodiff::{grad_check, Gradients, OpKind, Tape, Var};
pub use bci::{BciConfig, PairBatch};
pub use checkpoint::Checkpoint;
pub use config::{BatchConfig, RunConfig};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use matcher::Matcher;
pub use nn::{OptimizerConfig, ParameterSet};
pub use pipeline::{EpochLog, ImbalanceRow, RunResult};
pub use qascore::{QaConfig, QaOutput};
pub use retrieval::{EvalReport, InferenceConfig, Metrics};
pub use synthdata::{Dataset, GenConfig, Modality, Split, SynthSample};
pub use tensor::Tensor;
