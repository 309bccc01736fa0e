//! Compression toolkit for small convolutional classifiers.
//!
//! The pipeline trains a dense teacher, sparsifies it with iterative global
//! magnitude pruning under a rewound learning-rate schedule, derives a
//! narrower dense student whose per-layer weight counts match the pruned
//! teacher's per-layer nonzero counts, and distills the pruned teacher into
//! that student. The crate also carries the diagnostic machinery used to
//! check the engine (finite-difference gradient checks, loss identities,
//! label-smoothness reports, parameter/MAC accounting).

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod masks;
pub mod network;
pub mod optim;
pub mod params;
pub mod presets;
pub mod prune;
pub mod report;
pub mod rng;
pub mod student;
pub mod tensor;
pub mod threads;
pub mod train;
pub mod verify;

pub use arch::{ArchitectureSpec, LayerSpec};
pub use checkpoint::MaskedCheckpoint;
pub use error::{Error, Result};
pub use losses::DistillConfig;
pub use masks::MaskSet;
pub use params::ParamSet;
pub use prune::PruneConfig;
pub use tensor::{Scalar, Tensor};
pub use train::TrainConfig;
