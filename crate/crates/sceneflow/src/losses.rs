//! Self-supervised and supervised losses with analytic gradients.
//!
//! Three losses over a scene pair, all mean squared distances in m^2:
//!
//! * supervised: mean ||d*_i - d_i||^2 against ground-truth flow,
//! * nearest-neighbor: mean squared distance from each displaced source
//!   point to its closest target point,
//! * anchored cycle consistency: each displaced point is blended with its
//!   target nearest neighbor (weight `lambda` on the displaced point),
//!   carried back by a reverse flow, and penalized by its squared distance
//!   to the original point.
//!
//! The nearest-neighbor assignment is treated as piecewise constant during
//! differentiation (no gradient through the argmin), the standard Chamfer
//! treatment. The cycle loss is normalized by 1/N so both terms of the
//! combined objective stay comparable across cloud sizes.
//!
//! All per-point loops run through [`crate::exec`], so values are
//! reproducible regardless of threading.

use crate::error::{Error, Result};
use crate::exec::{map_indexed, pairwise_mean};
use crate::spatial::NeighborIndex;
use crate::types::{apply_flow, FlowField, LossReport, PointCloud, Vec3};

/// The anchoring construction: displaced points, their target nearest
/// neighbors, and the blended anchor cloud the reverse flow is estimated at.
#[derive(Debug, Clone)]
pub struct AnchoredState {
    predicted: PointCloud,
    nn_indices: Vec<usize>,
    anchors: PointCloud,
    lambda: f64,
}

impl AnchoredState {
    pub fn predicted(&self) -> &PointCloud {
        &self.predicted
    }

    pub fn nn_indices(&self) -> &[usize] {
        &self.nn_indices
    }

    pub fn anchors(&self) -> &PointCloud {
        &self.anchors
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.nn_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nn_indices.is_empty()
    }
}

/// The single place the anchor formula lives, so every path computes
/// bit-identical anchors.
#[inline]
pub(crate) fn anchor_point(predicted: Vec3, neighbor: Vec3, lambda: f64) -> Vec3 {
    predicted * lambda + neighbor * (1.0 - lambda)
}

/// Mean squared error against ground-truth flow and its gradient with
/// respect to the predicted flow: grad_i = (2/N)(d_i - d*_i).
pub fn supervised_loss(predicted: &FlowField, gt: &FlowField) -> Result<(f64, Vec<Vec3>)> {
    if predicted.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs. ground-truth flow",
            expected: gt.len(),
            actual: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = predicted.len();
    let scale = 2.0 / n as f64;
    let residuals: Vec<f64> = map_indexed(n, |i| (gt.get(i) - predicted.get(i)).norm_squared());
    let grad = map_indexed(n, |i| (predicted.get(i) - gt.get(i)) * scale);
    Ok((pairwise_mean(&residuals), grad))
}

/// Result of the nearest-neighbor loss: the scalar loss, its gradient with
/// respect to the flow, the per-point assignment (for reuse by anchoring),
/// and per-point squared residuals.
#[derive(Debug, Clone)]
pub struct NnLoss {
    pub loss: f64,
    pub grad: Vec<Vec3>,
    pub nn_indices: Vec<usize>,
    pub per_point: Vec<f64>,
}

/// Mean squared distance from each displaced source point to its nearest
/// target point. The gradient holds the assignment fixed:
/// grad_i = (2/N)(x_i + d_i - y_nn(i)).
pub fn nn_loss(
    source: &PointCloud,
    flow: &FlowField,
    target_index: &NeighborIndex,
) -> Result<NnLoss> {
    if flow.len() != source.len() {
        return Err(Error::LengthMismatch {
            what: "flow vs. source cloud",
            expected: source.len(),
            actual: flow.len(),
        });
    }
    if target_index.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = source.len();
    let scale = 2.0 / n as f64;
    let hits: Vec<(usize, f64)> = map_indexed(n, |i| {
        target_index.nearest_raw(source.position(i) + flow.get(i))
    });
    let per_point: Vec<f64> = hits.iter().map(|&(_, d2)| d2).collect();
    let nn_indices: Vec<usize> = hits.iter().map(|&(j, _)| j).collect();
    let grad = map_indexed(n, |i| {
        (source.position(i) + flow.get(i) - target_index.point(nn_indices[i])) * scale
    });
    Ok(NnLoss {
        loss: pairwise_mean(&per_point),
        grad,
        nn_indices,
        per_point,
    })
}

/// Blends each displaced point with its target nearest neighbor:
/// anchor_i = lambda * predicted_i + (1 - lambda) * target[nn_indices[i]].
pub fn anchor_points(
    predicted: &PointCloud,
    target: &PointCloud,
    nn_indices: &[usize],
    lambda: f64,
) -> Result<AnchoredState> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    if nn_indices.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            what: "nn_indices vs. predicted cloud",
            expected: predicted.len(),
            actual: nn_indices.len(),
        });
    }
    if let Some(&bad) = nn_indices.iter().find(|&&j| j >= target.len()) {
        return Err(Error::NeighborIndexOutOfBounds {
            index: bad,
            len: target.len(),
        });
    }
    let anchors = build_anchor_cloud(predicted, |i| target.position(nn_indices[i]), lambda);
    Ok(AnchoredState {
        predicted: predicted.clone(),
        nn_indices: nn_indices.to_vec(),
        anchors,
        lambda,
    })
}

fn build_anchor_cloud<F>(predicted: &PointCloud, neighbor: F, lambda: f64) -> PointCloud
where
    F: Fn(usize) -> Vec3 + Sync + Send,
{
    let positions = map_indexed(predicted.len(), |i| {
        anchor_point(predicted.position(i), neighbor(i), lambda)
    });
    PointCloud::new_unchecked(positions, None, "anchors".to_string())
}

/// Cycle-loss result: scalar loss, gradients for the forward flow (through
/// the anchor chain) and the reverse flow, and per-point squared residuals.
#[derive(Debug, Clone)]
pub struct CycleLoss {
    pub loss: f64,
    pub grad_forward: Vec<Vec3>,
    pub grad_reverse: Vec<Vec3>,
    pub per_point: Vec<f64>,
}

/// Applies the reverse flow at the anchors and penalizes the distance back
/// to the original points: loss = (1/N) sum ||anchor_i + rev_i - x_i||^2.
///
/// With residual r_i = anchor_i + rev_i - x_i, the gradients (nearest
/// neighbors frozen) are grad_reverse_i = (2/N) r_i and
/// grad_forward_i = (2/N) lambda r_i.
pub fn cycle_loss(
    source: &PointCloud,
    anchored: &AnchoredState,
    reverse_flow: &FlowField,
) -> Result<CycleLoss> {
    let n = source.len();
    if anchored.len() != n {
        return Err(Error::LengthMismatch {
            what: "anchored state vs. source cloud",
            expected: n,
            actual: anchored.len(),
        });
    }
    if reverse_flow.len() != n {
        return Err(Error::LengthMismatch {
            what: "reverse flow vs. source cloud",
            expected: n,
            actual: reverse_flow.len(),
        });
    }
    let scale = 2.0 / n as f64;
    let lambda = anchored.lambda;
    let residuals: Vec<Vec3> = map_indexed(n, |i| {
        anchored.anchors.position(i) + reverse_flow.get(i) - source.position(i)
    });
    let per_point: Vec<f64> = residuals.iter().map(|r| r.norm_squared()).collect();
    let grad_reverse: Vec<Vec3> = residuals.iter().map(|r| r * scale).collect();
    let grad_forward: Vec<Vec3> = grad_reverse.iter().map(|g| g * lambda).collect();
    Ok(CycleLoss {
        loss: pairwise_mean(&per_point),
        grad_forward,
        grad_reverse,
        per_point,
    })
}

/// Everything one evaluation of the combined objective produces: the loss
/// report, the anchoring state, and total gradients for both flows.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub report: LossReport,
    pub anchored: AnchoredState,
    /// d(combined)/d(forward flow): NN gradient plus the cycle gradient
    /// chained through the anchors.
    pub grad_forward: Vec<Vec3>,
    /// d(combined)/d(reverse flow).
    pub grad_reverse: Vec<Vec3>,
}

/// Runs nn_loss, anchoring, and cycle_loss in sequence and sums the two
/// terms. The reverse flow is indexed parallel to the anchors.
pub fn combined_loss(
    source: &PointCloud,
    flow: &FlowField,
    target_index: &NeighborIndex,
    reverse_flow: &FlowField,
    lambda: f64,
) -> Result<CombinedLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let nn = nn_loss(source, flow, target_index)?;
    let predicted = apply_flow(source, flow)?;
    let anchors = build_anchor_cloud(&predicted, |i| target_index.point(nn.nn_indices[i]), lambda);
    let anchored = AnchoredState {
        predicted,
        nn_indices: nn.nn_indices,
        anchors,
        lambda,
    };
    let cycle = cycle_loss(source, &anchored, reverse_flow)?;
    let grad_forward = map_indexed(source.len(), |i| nn.grad[i] + cycle.grad_forward[i]);
    let report = LossReport {
        nn_loss: nn.loss,
        cycle_loss: cycle.loss,
        combined: nn.loss + cycle.loss,
        supervised: None,
        per_point_nn_residual: nn.per_point,
        per_point_cycle_residual: cycle.per_point,
    };
    Ok(CombinedLoss {
        report,
        anchored,
        grad_forward,
        grad_reverse: cycle.grad_reverse,
    })
}
