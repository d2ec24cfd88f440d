//! Inverse-effectiveness driven multimodal fusion.
//!
//! A two-branch (audio/visual) network is trained with plain SGD, except that
//! the fusion layer's step is scaled each batch by a bounded coefficient
//! derived from how confident the unimodal probe heads are relative to the
//! fused prediction. The crate also carries the neuron models, synthetic
//! benchmarks, continual-learning metrics and landscape analyses used to
//! study that rule.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod container;
pub mod continual;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod iemf;
pub mod model;
pub mod neuron;
pub mod parallel;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use iemf::{IemfConfig, StrengthScores};
pub use model::{Batch, ForwardOutputs, ModelConfig, MultimodalModel, NeuronMode};
pub use tape::{GradientSet, ParamId, Tape, Var};
pub use tensor::Tensor;
pub use training::{EpochMetrics, OptimConfig};
