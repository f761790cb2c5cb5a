//! Parameter-space model editing with task arithmetic on desk-scale models.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense 64-bit tensors with reverse-mode gradients and
//!   forward-mode tangents.
//! * [`models`]: the toy classifier families and the flat parameter layout.
//! * [`data`]: synthetic multi-task suites with disjoint supports, IDX reader.
//! * [`fisher`]: diagonal Fisher information sensitivity scores.
//! * [`mask`]: iterative bottom-k mask calibration (plus top-k / random).
//! * [`train`]: masked fine-tuning and explicit linearized fine-tuning.
//! * [`task_vector`]: task vectors, composition, α tuning, post-hoc edits.
//! * [`eval`]: accuracies, disentanglement, localization and regime diagnostics.
//! * [`pipeline`]: end-to-end experiment orchestration shared by the CLI.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and otherwise runs sequentially. Both paths
//! produce bitwise-identical results.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod exec;
pub mod fisher;
pub mod format;
pub mod mask;
pub mod models;
pub mod numeric;
pub mod pipeline;
pub mod task_vector;
pub mod train;

mod error;

pub use error::{Error, Result};

pub use autodiff::{Graph, NodeId, Tensor};
pub use data::{Samples, SuiteConfig, TaskDataset};
pub use fisher::{ScoreMode, SensitivityScores};
pub use mask::{CalibrationConfig, SelectionMode, SparseMask};
pub use models::{FlatParams, LayerKind, Layout, Model, ModelConfig, ModelFamily};
pub use task_vector::TaskVector;
pub use train::{Optimizer, TrainConfig};
