//! Multi-task localization-retrieval training and evaluation.
//!
//! This crate implements the algorithmic core of a multi-dataset
//! image-retrieval training recipe, verified end to end on a synthetic
//! world where a learnable embedding table stands in for the neural
//! backbone:
//!
//! - [`geo`], [`descriptor`], [`batch`]: domain types — planar poses,
//!   unit-norm descriptors, quadruplet/sub-batch/iteration structure.
//! - [`worldgen`]: deterministic synthetic worlds (poses, classes,
//!   covisibility, ground-truth descriptor process).
//! - [`samplers`]: the five dataset-specific batch construction
//!   procedures plus iteration assembly.
//! - [`msloss`]: multi-similarity loss with pair mining and analytic
//!   gradients.
//! - [`trainer`]: embedding-table optimization with per-sub-batch
//!   gradient accumulation and instrumented memory accounting.
//! - [`knn`]: memory-bounded exact nearest-neighbor search.
//! - [`metrics`]: recall@k under a geographic threshold and
//!   revisited-protocol mAP.
//! - [`io`]: bit-exact file formats for descriptors, metadata,
//!   covisibility, and checkpoints.

pub mod batch;
pub mod descriptor;
pub mod error;
pub mod geo;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod msloss;
pub mod rng;
pub mod samplers;
pub mod trainer;
pub mod worldgen;

pub use batch::{
    BatchSource, DatasetKind, ImageRecord, Quadruplet, SubBatch, TrainingIteration,
};
pub use descriptor::{project_and_normalize, salad_dim_check, Descriptor};
pub use error::{Error, Result};
pub use geo::{angular_difference, planar_distance, PlanarPose};
