//! Core domain types: point clouds, flow fields, scene pairs, solver
//! configuration, and loss reports.
//!
//! All scalars are 64-bit floats internally; the on-disk binary format is
//! 32-bit (see [`crate::io`]). Feature channels are carried through the data
//! model but ignored by the estimators and losses, which use positions only.
//! Every type is immutable after construction and safe to share read-only
//! across workers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3D vector in meters.
pub type Vec3 = Vector3<f64>;

/// Optional per-point feature channels, stored row-major with a fixed
/// channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::LengthMismatch {
                what: "feature data",
                expected: dim.max(1),
                actual: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn select(&self, keep: &[usize]) -> Self {
        let mut data = Vec::with_capacity(keep.len() * self.dim);
        for &i in keep {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }
}

/// An unordered set of 3D points with optional per-point feature channels.
///
/// Invariants enforced at construction: at least one point, all coordinates
/// finite, and (when present) one feature row per point with a common
/// channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    features: Option<Features>,
    frame_id: String,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, frame_id: impl Into<String>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        for (i, p) in positions.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFinite {
                    what: "point cloud positions",
                    index: i,
                });
            }
        }
        Ok(Self {
            positions,
            features: None,
            frame_id: frame_id.into(),
        })
    }

    /// Attaches feature channels; the row count must match the point count.
    pub fn with_features(mut self, features: Features) -> Result<Self> {
        if features.len() != self.positions.len() {
            return Err(Error::LengthMismatch {
                what: "feature rows",
                expected: self.positions.len(),
                actual: features.len(),
            });
        }
        for (i, v) in features.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "point cloud features",
                    index: i / features.dim,
                });
            }
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Construction without validation, for internal paths whose inputs are
    /// already validated (and for tests that need malformed data).
    pub(crate) fn new_unchecked(
        positions: Vec<Vec3>,
        features: Option<Features>,
        frame_id: String,
    ) -> Self {
        Self {
            positions,
            features,
            frame_id,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    /// Keeps the points at `keep` (in order), carrying features along.
    pub(crate) fn select(&self, keep: &[usize]) -> Self {
        Self {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.as_ref().map(|f| f.select(keep)),
            frame_id: self.frame_id.clone(),
        }
    }
}

/// One 3D displacement per point of a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    displacements: Vec<Vec3>,
}

impl FlowField {
    pub fn new(displacements: Vec<Vec3>) -> Result<Self> {
        for (i, d) in displacements.iter().enumerate() {
            if !(d.x.is_finite() && d.y.is_finite() && d.z.is_finite()) {
                return Err(Error::NonFinite {
                    what: "flow displacements",
                    index: i,
                });
            }
        }
        Ok(Self { displacements })
    }

    pub(crate) fn new_unchecked(displacements: Vec<Vec3>) -> Self {
        Self { displacements }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            displacements: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacements
    }

    pub fn get(&self, i: usize) -> Vec3 {
        self.displacements[i]
    }

    pub fn negated(&self) -> Self {
        Self {
            displacements: self.displacements.iter().map(|d| -d).collect(),
        }
    }
}

/// A source cloud at time t, a target cloud at time t+1, and optional
/// ground-truth flow in each direction. The two clouds may have different
/// point counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Ground-truth flow over the source, when known.
    pub gt_flow: Option<FlowField>,
    /// Ground-truth flow over the target back to the source, when known.
    /// Used by flip augmentation on synthetic data.
    pub gt_reverse_flow: Option<FlowField>,
}

impl ScenePair {
    pub fn new(source: PointCloud, target: PointCloud) -> Self {
        Self {
            source,
            target,
            gt_flow: None,
            gt_reverse_flow: None,
        }
    }

    pub fn with_gt_flow(mut self, gt: FlowField) -> Self {
        self.gt_flow = Some(gt);
        self
    }

    pub fn with_gt_reverse_flow(mut self, gt: FlowField) -> Self {
        self.gt_reverse_flow = Some(gt);
        self
    }
}

/// A single well-formedness violation found by [`validate_scene_pair`].
/// Violations are data, not errors: callers decide how to react.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyCloud { cloud: &'static str },
    NonFinitePosition { cloud: &'static str, index: usize },
    NonFiniteFlow { flow: &'static str, index: usize },
    FlowLengthMismatch { flow: &'static str, expected: usize, actual: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyCloud { cloud } => write!(f, "{cloud} cloud is empty"),
            Violation::NonFinitePosition { cloud, index } => {
                write!(f, "non-finite position in {cloud} cloud at index {index}")
            }
            Violation::NonFiniteFlow { flow, index } => {
                write!(f, "non-finite value in {flow} at index {index}")
            }
            Violation::FlowLengthMismatch {
                flow,
                expected,
                actual,
            } => write!(
                f,
                "{flow} length {actual} does not match cloud point count {expected}"
            ),
        }
    }
}

/// Checks a scene pair for structural problems, returning every violation
/// found (an empty list means the pair is well-formed).
pub fn validate_scene_pair(pair: &ScenePair) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (cloud, label) in [(&pair.source, "source"), (&pair.target, "target")] {
        if cloud.is_empty() {
            violations.push(Violation::EmptyCloud { cloud: label });
        }
        for (i, p) in cloud.positions().iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                violations.push(Violation::NonFinitePosition {
                    cloud: label,
                    index: i,
                });
            }
        }
    }
    let flows = [
        (pair.gt_flow.as_ref(), "gt_flow", pair.source.len()),
        (
            pair.gt_reverse_flow.as_ref(),
            "gt_reverse_flow",
            pair.target.len(),
        ),
    ];
    for (flow, label, expected) in flows {
        let Some(flow) = flow else { continue };
        if flow.len() != expected {
            violations.push(Violation::FlowLengthMismatch {
                flow: label,
                expected,
                actual: flow.len(),
            });
        }
        for (i, d) in flow.displacements().iter().enumerate() {
            if !(d.x.is_finite() && d.y.is_finite() && d.z.is_finite()) {
                violations.push(Violation::NonFiniteFlow {
                    flow: label,
                    index: i,
                });
            }
        }
    }
    violations
}

/// Displaces every point of `cloud` by the matching entry of `flow`.
/// Features and the frame label are carried through unchanged.
pub fn apply_flow(cloud: &PointCloud, flow: &FlowField) -> Result<PointCloud> {
    if flow.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "flow vs. cloud",
            expected: cloud.len(),
            actual: flow.len(),
        });
    }
    let positions = cloud
        .positions()
        .iter()
        .zip(flow.displacements())
        .map(|(p, d)| p + d)
        .collect();
    Ok(PointCloud::new_unchecked(
        positions,
        cloud.features().cloned(),
        cloud.frame_id().to_string(),
    ))
}

/// Which flow estimator the solver fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Free per-point flow variables.
    #[default]
    Direct,
    /// Coordinate MLP mapping position to displacement.
    Mlp,
}

/// Solver configuration for per-scene-pair fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Anchor blend weight: anchors = lambda * predicted + (1 - lambda) * nearest neighbor.
    pub lambda_anchor: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_iterations: usize,
    /// Alternate iterations between the pair and its temporal flip.
    pub flip_augmentation: bool,
    pub estimator_kind: EstimatorKind,
    pub mlp_hidden_sizes: Vec<usize>,
    pub rng_seed: u64,
    /// Stop when the combined loss improves by less than this (m^2) over a
    /// trailing window of 50 iterations.
    pub convergence_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda_anchor: 0.5,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_iterations: 10_000,
            flip_augmentation: false,
            estimator_kind: EstimatorKind::Direct,
            mlp_hidden_sizes: vec![32, 32],
            rng_seed: 0,
            convergence_tolerance: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.lambda_anchor) {
            return fail(format!("lambda_anchor {} not in [0, 1]", self.lambda_anchor));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return fail(format!("{name} {beta} not in (0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return fail(format!("adam_epsilon {} must be positive", self.adam_epsilon));
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be at least 1".to_string());
        }
        if self.mlp_hidden_sizes.iter().any(|&h| h == 0) {
            return fail("mlp_hidden_sizes entries must be positive".to_string());
        }
        if !(self.convergence_tolerance >= 0.0) {
            return fail(format!(
                "convergence_tolerance {} must be non-negative",
                self.convergence_tolerance
            ));
        }
        Ok(())
    }
}

/// Scalar losses for one evaluation of the objective, plus per-point
/// residuals for diagnostics. All values are squared meters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub nn_loss: f64,
    pub cycle_loss: f64,
    /// Exactly `nn_loss + cycle_loss`.
    pub combined: f64,
    /// Supervised loss against ground truth, when available (diagnostic
    /// only; never part of the optimized objective).
    pub supervised: Option<f64>,
    pub per_point_nn_residual: Vec<f64>,
    pub per_point_cycle_residual: Vec<f64>,
}
