//! Weakly supervised point-cloud segmentation with local adaptive
//! perturbations (LAP) and regional adaptive deformations (RAD) as
//! consistency regularizers.
//!
//! The crate carries its own tape-based reverse-mode autodiff, a small
//! point-wise backbone with a kNN max-pool context, the two perturbation
//! generators, a trainer, a synthetic scene generator and the file formats
//! used by the command-line tool.

#![allow(clippy::needless_range_loop)]

pub mod annotation;
pub mod array;
pub mod autodiff;
pub mod backbone;
pub mod covariance;
pub mod error;
pub mod io;
pub mod lap;
pub mod metrics;
pub mod rad;
pub mod rotation;
pub mod scene;
pub mod scenegen;
pub mod seed;
pub mod trainer;

pub use annotation::{AnnotationScheme, WeakLabels};
pub use array::Array;
pub use autodiff::{Gradients, Graph, GroupIndex, NodeId};
pub use backbone::{BackboneConfig, ModelParams};
pub use covariance::ClassCovarianceTracker;
pub use error::{Error, Result};
pub use lap::{generate_lap, LapConfig, NoiseBaseline, PerturbedCloud};
pub use metrics::Metrics;
pub use rad::{
    apply_affine, generate_rad, partition_superpoints, AffineParams, RadConfig, SuperpointPartition, TransformKind,
    TransformSet,
};
pub use scene::{LabeledScene, PointCloud};
pub use scenegen::{generate_dataset, generate_scene, SceneSpec};
pub use trainer::{evaluate, train, Branch, StepReport, TrainConfig, TrainOutcome};
