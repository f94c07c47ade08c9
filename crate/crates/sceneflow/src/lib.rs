//! Self-supervised scene flow estimation for 3D point clouds.
//!
//! Scene flow assigns one 3D displacement to every point of a source cloud
//! so that the displaced cloud aligns with a target cloud captured a moment
//! later. This crate estimates that flow without annotations by minimizing
//! two self-supervised losses per scene pair at runtime:
//!
//! * a nearest-neighbor loss that pulls every displaced point toward its
//!   closest target point, and
//! * an anchored cycle-consistency loss that carries the displaced points
//!   back toward their origins through a reverse flow, after blending each
//!   displaced point with its target nearest neighbor (the "anchor").
//!
//! Neither loss is sufficient alone: the nearest-neighbor loss is blind to
//! all points collapsing onto one target point, and the plain cycle loss is
//! blind to the all-zero flow. Their sum excludes both degenerate minima.
//!
//! The crate ships two interchangeable flow estimators (free per-point
//! variables and a small coordinate MLP with exact reverse-mode gradients),
//! an Adam-based per-pair fitting loop with temporal flip augmentation, a
//! synthetic scene generator with analytic ground truth, the standard
//! EPE/accuracy metric suite with binned analyses, and file formats plus a
//! CLI-facing I/O layer.
//!
//! Inner per-point loops are data-parallel via rayon when the default
//! `parallel` feature is enabled; every reduction uses a fixed-order
//! pairwise sum, so results are bit-identical with and without the feature
//! and for any thread count.

pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod spatial;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    apply_flow, validate_scene_pair, EstimatorKind, FlowField, LossReport, PointCloud, ScenePair,
    SolverConfig, Vec3, Violation,
};
