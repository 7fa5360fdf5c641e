//! Block-based structured pruning with reweighted group lasso, and a
//! matrix-reorder runtime that executes the resulting block-sparse layers.
//!
//! The usual flow is [`prune::pretrain`] → [`prune::run_pipeline`] →
//! [`model_file::ModelFile::reorder`] → [`infer::Executor`].

pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod model_file;
pub mod nn;
pub mod prune;
pub mod regularize;
pub mod reorder;
pub mod report;
pub mod tensor;

pub use blocks::{BlockScheme, Direction, Directions, GroupRef, LayerMask, SparseMask};
pub use config::RunConfig;
pub use data::{BlobSpec, Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use model_file::{LayerWeights, ModelFile};
pub use nn::{LayerSpec, Network, TrainConfig};
pub use prune::{BlockShape, PipelineConfig, PruneConfig, PruneReport};
pub use regularize::{Epsilon, PenaltyState, RegConfig, RegMode};
pub use reorder::{ExecutionPlan, ReorderedModel, RowSignature};
pub use tensor::{ConvSpec, Tensor};
