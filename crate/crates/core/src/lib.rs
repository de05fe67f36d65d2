//! Kernel predictive state representations with risk-constrained policy
//! optimization: finite feature maps, conditional embedding operators, value
//! and risk links, and a Lagrangian trainer, plus simulated environments with
//! exact oracles.

pub mod data;
pub mod env;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod link;
pub mod operators;
pub mod safe_opt;
pub mod seed;

pub use data::{FeatureMaps, FeatureSpecs, RegressionBlocks, StepRecord, Trajectory, WindowSample};
pub use error::{Error, Result};
pub use kernel::{Datum, FeatureVector, KernelSpec, SpaceId};
pub use link::{LinkWeights, ValueEstimate};
pub use operators::{EmbeddingOperator, OperatorBundle, ShiftedOperator};
pub use safe_opt::{DualVars, PolicyParams, TrainConfig, TrainState};
