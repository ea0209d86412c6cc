//! Few-shot representation learning with self-supervised auxiliary losses:
//! prototypical and softmax training with jigsaw or rotation pretext tasks,
//! meta-test evaluation and saliency maps.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod permset;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use config::{RotationMode, SslTask, TrainConfig, TrainMode};
pub use error::{Error, Result};
pub use evaluator::{EvalReport, SaliencyMap};
pub use permset::PermutationSet;
pub use scalar::Scalar;
pub use trainer::{train, StepLog, TrainData, TrainOutcome};

pub type Model32 = model::ModelBundle<f32>;
pub type Model64 = model::ModelBundle<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Image32 = data::ImageTensor<f32>;
