//! Evaluation metrics: end point error, threshold accuracies, and the
//! binned analyses (flow magnitude, local density, log-binned histogram).
//!
//! End point error is the unsquared Euclidean distance between predicted and
//! ground-truth displacements. Relative error divides by the ground-truth
//! magnitude; a point with zero ground truth has relative error 0 when its
//! absolute error is also 0 and +inf otherwise. Both accuracy thresholds use
//! strict inequalities: ACC(0.05) counts points with error < 0.05 m or
//! relative error < 5%, ACC(0.1) with error < 0.1 m or relative error < 10%.
//!
//! Binning is half-open, [edge_k, edge_{k+1}); values outside the edges land
//! in underflow/overflow bins so counts always total N. Per-bin confidence
//! half-widths use the 95% normal approximation 1.96 s / sqrt(n).

use crate::error::{Error, Result};
use crate::exec::{map_indexed, pairwise_mean, pairwise_sum};
use crate::spatial::NeighborIndex;
use crate::types::{FlowField, PointCloud};

/// Aggregate metrics for one flow evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    /// Mean Euclidean end point error, meters.
    pub epe_mean: f64,
    /// Fraction with error < 0.05 m or relative error < 5%.
    pub acc_strict: f64,
    /// Fraction with error < 0.1 m or relative error < 10%.
    pub acc_relax: f64,
    pub n_points: usize,
}

/// One bin of a [`BinnedReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStat {
    pub count: usize,
    /// Mean of the assigned values; absent for an empty bin.
    pub mean: Option<f64>,
    /// 95% normal-approximation half-width; 0 for empty and singleton bins.
    pub ci95_half_width: f64,
}

impl BinStat {
    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: None,
                ci95_half_width: 0.0,
            };
        }
        let n = values.len();
        let mean = pairwise_mean(values);
        let half_width = if n < 2 {
            0.0
        } else {
            let sq_dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
            let s = (pairwise_sum(&sq_dev) / (n as f64 - 1.0)).sqrt();
            1.96 * s / (n as f64).sqrt()
        };
        Self {
            count: n,
            mean: Some(mean),
            ci95_half_width: half_width,
        }
    }
}

/// Per-bin statistics over ordered, disjoint, half-open bins, with
/// underflow and overflow so counts sum to the number of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedReport {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStat>,
    pub underflow: BinStat,
    pub overflow: BinStat,
}

impl BinnedReport {
    pub fn total_count(&self) -> usize {
        self.underflow.count
            + self.overflow.count
            + self.bins.iter().map(|b| b.count).sum::<usize>()
    }
}

/// Per-point end point errors ||predicted_i - gt_i||, meters.
pub fn epe_per_point(predicted: &FlowField, gt: &FlowField) -> Result<Vec<f64>> {
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
    Ok(map_indexed(predicted.len(), |i| {
        (predicted.get(i) - gt.get(i)).norm()
    }))
}

/// Computes mean EPE and both threshold accuracies.
pub fn evaluate(predicted: &FlowField, gt: &FlowField) -> Result<EvalSummary> {
    let errors = epe_per_point(predicted, gt)?;
    let n = errors.len();
    let relative: Vec<f64> = map_indexed(n, |i| {
        let gt_norm = gt.get(i).norm();
        if gt_norm > 0.0 {
            errors[i] / gt_norm
        } else if errors[i] == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    });
    let strict = errors
        .iter()
        .zip(&relative)
        .filter(|&(e, r)| *e < 0.05 || *r < 0.05)
        .count();
    let relax = errors
        .iter()
        .zip(&relative)
        .filter(|&(e, r)| *e < 0.1 || *r < 0.1)
        .count();
    Ok(EvalSummary {
        epe_mean: pairwise_mean(&errors),
        acc_strict: strict as f64 / n as f64,
        acc_relax: relax as f64 / n as f64,
        n_points: n,
    })
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidBinEdges);
    }
    Ok(())
}

/// Assigns `values[i]` to half-open bins over `edges` and reports the
/// statistics of `errors` within each bin.
fn bin_errors(errors: &[f64], values: &[f64], edges: &[f64]) -> Result<BinnedReport> {
    check_edges(edges)?;
    if errors.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "errors vs. binning values",
            expected: values.len(),
            actual: errors.len(),
        });
    }
    let n_bins = edges.len() - 1;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    let mut under = Vec::new();
    let mut over = Vec::new();
    for (&e, &v) in errors.iter().zip(values) {
        if v < edges[0] {
            under.push(e);
        } else if v >= edges[n_bins] {
            over.push(e);
        } else {
            // partition_point returns how many edges are <= v, so the bin
            // index of the half-open interval containing v is that minus 1.
            let k = edges.partition_point(|edge| *edge <= v) - 1;
            buckets[k].push(e);
        }
    }
    Ok(BinnedReport {
        edges: edges.to_vec(),
        bins: buckets.iter().map(|b| BinStat::from_values(b)).collect(),
        underflow: BinStat::from_values(&under),
        overflow: BinStat::from_values(&over),
    })
}

/// Bins per-point errors by ground-truth flow magnitude.
pub fn bin_by_flow_magnitude(
    errors: &[f64],
    gt: &FlowField,
    edges: &[f64],
) -> Result<BinnedReport> {
    let magnitudes: Vec<f64> = gt.displacements().iter().map(|d| d.norm()).collect();
    bin_errors(errors, &magnitudes, edges)
}

/// Bins per-point errors by local density: the number of source points
/// within `radius` of each point, including the point itself.
pub fn bin_by_density(
    errors: &[f64],
    source: &PointCloud,
    radius: f64,
    edges: &[f64],
) -> Result<BinnedReport> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::NonPositive {
            what: "density radius",
            value: radius,
        });
    }
    if errors.len() != source.len() {
        return Err(Error::LengthMismatch {
            what: "errors vs. source cloud",
            expected: source.len(),
            actual: errors.len(),
        });
    }
    let index = NeighborIndex::build(source);
    let densities: Vec<f64> = map_indexed(source.len(), |i| {
        index
            .count_within_radius(source.position(i), radius)
            .expect("positions are finite and radius validated") as f64
    });
    bin_errors(errors, &densities, edges)
}

/// Log-binned error histogram: edges spaced `bins_per_decade` per factor of
/// ten starting at `min_edge`; errors below `min_edge` pool into the
/// underflow bin.
pub fn error_histogram(
    errors: &[f64],
    bins_per_decade: usize,
    min_edge: f64,
) -> Result<BinnedReport> {
    if bins_per_decade == 0 {
        return Err(Error::NonPositive {
            what: "bins_per_decade",
            value: 0.0,
        });
    }
    if !(min_edge > 0.0 && min_edge.is_finite()) {
        return Err(Error::NonPositive {
            what: "min_edge",
            value: min_edge,
        });
    }
    if let Some((i, &v)) = errors.iter().enumerate().find(|&(_, &v)| !(v >= 0.0)) {
        return Err(Error::NegativeError { index: i, value: v });
    }
    let max_err = errors.iter().cloned().fold(0.0f64, f64::max);
    // Enough whole decades to cover the largest error, with at least one bin.
    let decades_needed = if max_err > min_edge {
        (max_err / min_edge).log10().ceil() as usize + 1
    } else {
        1
    };
    let n_bins = decades_needed * bins_per_decade;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|k| min_edge * 10f64.powf(k as f64 / bins_per_decade as f64))
        .collect();
    bin_errors(errors, errors, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Vec3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flow(vecs: &[[f64; 3]]) -> FlowField {
        FlowField::new(vecs.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let gt = flow(&[[0.5, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let summary = evaluate(&gt, &gt).unwrap();
        assert_eq!(summary.epe_mean, 0.0);
        assert_eq!(summary.acc_strict, 1.0);
        assert_eq!(summary.acc_relax, 1.0);
        assert_eq!(summary.n_points, 2);
    }

    #[test]
    fn evaluate_single_point_between_thresholds() {
        // error 0.08, gt magnitude 1: fails strict (0.08 >= 0.05, 8% >= 5%),
        // passes relaxed (0.08 < 0.1).
        let predicted = flow(&[[1.08, 0.0, 0.0]]);
        let gt = flow(&[[1.0, 0.0, 0.0]]);
        let summary = evaluate(&predicted, &gt).unwrap();
        assert_relative_eq!(summary.epe_mean, 0.08, max_relative = 1e-12);
        assert_eq!(summary.acc_strict, 0.0);
        assert_eq!(summary.acc_relax, 1.0);
    }

    #[test]
    fn evaluate_two_point_hand_case() {
        let predicted = flow(&[[1.04, 0.0, 0.0], [1.2, 0.0, 0.0]]);
        let gt = flow(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let summary = evaluate(&predicted, &gt).unwrap();
        assert_relative_eq!(summary.epe_mean, 0.12, max_relative = 1e-12);
        assert_eq!(summary.acc_strict, 0.5);
        assert_eq!(summary.acc_relax, 0.5);
    }

    #[test]
    fn evaluate_zero_gt_conventions() {
        // Zero gt and zero error: relative error 0, counts as accurate.
        let summary = evaluate(&flow(&[[0.0; 3]]), &flow(&[[0.0; 3]])).unwrap();
        assert_eq!(summary.acc_strict, 1.0);
        // Zero gt and positive error: relative error infinite; 0.2 m also
        // fails the absolute thresholds.
        let summary = evaluate(&flow(&[[0.2, 0.0, 0.0]]), &flow(&[[0.0; 3]])).unwrap();
        assert_eq!(summary.acc_strict, 0.0);
        assert_eq!(summary.acc_relax, 0.0);
    }

    #[test]
    fn evaluate_length_mismatch() {
        assert!(evaluate(&flow(&[[0.0; 3]]), &FlowField::zeros(2)).is_err());
    }

    #[test]
    fn magnitude_binning_single_bin() {
        let gt = flow(&[[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]);
        let report = bin_by_flow_magnitude(&[0.1, 0.2, 0.3], &gt, &[0.0, 1.0]).unwrap();
        assert_eq!(report.bins[0].count, 3);
        assert_eq!(report.underflow.count + report.overflow.count, 0);
    }

    #[test]
    fn magnitude_binning_hand_case() {
        let gt = flow(&[[0.5, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        let report =
            bin_by_flow_magnitude(&[0.1, 0.3], &gt, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(report.bins[0].count, 1);
        assert_eq!(report.bins[1].count, 1);
        assert_eq!(report.bins[0].mean, Some(0.1));
        assert_eq!(report.bins[1].mean, Some(0.3));
    }

    #[test]
    fn magnitude_on_edge_goes_right() {
        let gt = flow(&[[1.0, 0.0, 0.0]]);
        let report = bin_by_flow_magnitude(&[0.2], &gt, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(report.bins[0].count, 0);
        assert_eq!(report.bins[1].count, 1);
    }

    #[test]
    fn unsorted_edges_rejected() {
        let gt = flow(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(
            bin_by_flow_magnitude(&[0.2], &gt, &[1.0, 0.0]),
            Err(Error::InvalidBinEdges)
        ));
    }

    #[test]
    fn density_binning_matches_radius_counts() {
        // Cloud {0, 0.05, 1.0} on the x axis with r = 0.1: densities 2, 2, 1.
        let source = PointCloud::new(
            vec![
                Vec3::zeros(),
                Vec3::new(0.05, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
            ],
            "t",
        )
        .unwrap();
        let report =
            bin_by_density(&[0.1, 0.2, 0.3], &source, 0.1, &[0.5, 1.5, 2.5]).unwrap();
        assert_eq!(report.bins[0].count, 1); // the isolated point
        assert_eq!(report.bins[1].count, 2); // the two close points
        assert_eq!(report.bins[0].mean, Some(0.3));
    }

    #[test]
    fn density_empty_bin_has_absent_mean() {
        let source = PointCloud::new(vec![Vec3::zeros()], "t").unwrap();
        let report = bin_by_density(&[0.5], &source, 0.1, &[0.0, 0.5, 10.0]).unwrap();
        assert_eq!(report.bins[0].count, 0);
        assert_eq!(report.bins[0].mean, None);
        assert_eq!(report.bins[1].count, 1);
    }

    #[test]
    fn histogram_underflow_pools_small_errors() {
        let report = error_histogram(&[0.001], 1, 0.01).unwrap();
        assert_eq!(report.underflow.count, 1);
        assert_eq!(report.total_count(), 1);
    }

    #[test]
    fn histogram_one_per_decade() {
        let report = error_histogram(&[0.01, 0.1, 1.0], 1, 0.01).unwrap();
        // Edges 0.01, 0.1, 1.0, 10.0: one error at the left of each bin.
        let counts: Vec<usize> = report.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts.iter().sum::<usize>(), 3);
        assert!(report.bins[0].count == 1 && report.bins[1].count == 1);
    }

    #[test]
    fn histogram_conserves_count() {
        let errors: Vec<f64> = (0..500).map(|i| (i as f64) * 0.003).collect();
        let report = error_histogram(&errors, 4, 0.01).unwrap();
        assert_eq!(report.total_count(), 500);
    }

    #[test]
    fn histogram_rejects_negative_errors() {
        assert!(matches!(
            error_histogram(&[0.1, -0.2], 1, 0.01),
            Err(Error::NegativeError { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn prop_strict_never_exceeds_relax(
            pairs in proptest::collection::vec(
                ((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
                 (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0)), 1..64),
        ) {
            let predicted = FlowField::new(
                pairs.iter().map(|&((x, y, z), _)| Vec3::new(x, y, z)).collect()).unwrap();
            let gt = FlowField::new(
                pairs.iter().map(|&(_, (x, y, z))| Vec3::new(x, y, z)).collect()).unwrap();
            let summary = evaluate(&predicted, &gt).unwrap();
            prop_assert!(summary.acc_strict <= summary.acc_relax);
            prop_assert!((0.0..=1.0).contains(&summary.acc_strict));
            prop_assert!((0.0..=1.0).contains(&summary.acc_relax));
        }

        #[test]
        fn prop_epe_invariant_to_consistent_reordering(
            pairs in proptest::collection::vec(
                ((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
                 (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0)), 2..32),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let predicted: Vec<Vec3> =
                pairs.iter().map(|&((x, y, z), _)| Vec3::new(x, y, z)).collect();
            let gt: Vec<Vec3> =
                pairs.iter().map(|&(_, (x, y, z))| Vec3::new(x, y, z)).collect();
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = evaluate(
                &FlowField::new(predicted.clone()).unwrap(),
                &FlowField::new(gt.clone()).unwrap(),
            ).unwrap();
            let b = evaluate(
                &FlowField::new(order.iter().map(|&i| predicted[i]).collect()).unwrap(),
                &FlowField::new(order.iter().map(|&i| gt[i]).collect()).unwrap(),
            ).unwrap();
            prop_assert!((a.epe_mean - b.epe_mean).abs() <= 1e-12 * a.epe_mean.max(1.0));
            prop_assert_eq!(a.acc_strict, b.acc_strict);
            prop_assert_eq!(a.acc_relax, b.acc_relax);
        }
    }
}
