//! Adam optimizer, the per-scene-pair fitting loop, and temporal flip
//! augmentation.
//!
//! Fitting owns its estimator and Adam state exclusively; a fleet of fits
//! over a dataset runs embarrassingly parallel. With flip augmentation, even
//! iterations optimize the original pair and odd iterations its flip, each
//! orientation holding an independent estimator and optimizer state; the
//! returned flow always comes from the unflipped orientation.

use crate::error::{Error, Result};
use crate::model::{
    run_cycle_with, DirectEstimator, Direction, FlowEstimator, LossToggles, MlpEstimator,
};
use crate::spatial::NeighborIndex;
use crate::types::{EstimatorKind, FlowField, ScenePair, SolverConfig};

/// Trailing-window length for the early-stopping check.
const CONVERGENCE_WINDOW: usize = 50;

/// First and second moment accumulators for Adam, one entry per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    config: &SolverConfig,
) -> Result<()> {
    if params.len() != state.first_moment.len() || grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "adam state vs. parameters",
            expected: state.first_moment.len(),
            actual: params.len().min(grads.len()),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g;
        state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        let m_hat = state.first_moment[i] / bias1;
        let v_hat = state.second_moment[i] / bias2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
    Ok(())
}

/// One row of the fitting trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub nn_loss: f64,
    pub cycle_loss: f64,
    pub combined: f64,
}

/// Everything a fit produces: per-iteration losses, the final forward flow
/// from the unflipped orientation, and whether early stopping fired.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub records: Vec<IterationRecord>,
    pub final_flow: FlowField,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Swaps source and target; ground-truth fields travel with their clouds.
pub fn flip_pair(pair: &ScenePair) -> ScenePair {
    ScenePair {
        source: pair.target.clone(),
        target: pair.source.clone(),
        gt_flow: pair.gt_reverse_flow.clone(),
        gt_reverse_flow: pair.gt_flow.clone(),
    }
}

fn make_estimator(config: &SolverConfig, n_points: usize, seed: u64) -> Box<dyn FlowEstimator> {
    match config.estimator_kind {
        EstimatorKind::Direct => Box::new(DirectEstimator::zeros(n_points)),
        EstimatorKind::Mlp => Box::new(MlpEstimator::new(&config.mlp_hidden_sizes, seed)),
    }
}

struct Orientation {
    pair: ScenePair,
    index: NeighborIndex,
    estimator: Box<dyn FlowEstimator>,
    adam: AdamState,
}

impl Orientation {
    fn new(pair: ScenePair, config: &SolverConfig, seed: u64) -> Self {
        let index = NeighborIndex::build(&pair.target);
        let estimator = make_estimator(config, pair.source.len(), seed);
        let adam = AdamState::new(estimator.parameter_count());
        Self {
            pair,
            index,
            estimator,
            adam,
        }
    }
}

/// Fits the full objective to one scene pair.
pub fn fit_scene_pair(pair: &ScenePair, config: &SolverConfig) -> Result<FitTrace> {
    fit_scene_pair_with(pair, config, LossToggles::default())
}

/// Fits one scene pair with selected loss terms (used by the ablation
/// harness). Builds the target index once, initializes the estimator (direct:
/// zero fields; MLP: seeded init), and loops evaluation plus one Adam step
/// per iteration, stopping early when the combined loss improves by less
/// than `convergence_tolerance` over a trailing window of 50 iterations.
pub fn fit_scene_pair_with(
    pair: &ScenePair,
    config: &SolverConfig,
    toggles: LossToggles,
) -> Result<FitTrace> {
    config.validate()?;
    let violations = crate::types::validate_scene_pair(pair);
    if !violations.is_empty() {
        let summary = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::InvalidScenePair(summary));
    }

    let mut primary = Orientation::new(pair.clone(), config, config.rng_seed);
    // The flipped orientation sees motion in the opposite direction; its
    // estimator draws from a derived seed so the two are independent.
    let mut flipped = config
        .flip_augmentation
        .then(|| Orientation::new(flip_pair(pair), config, config.rng_seed.wrapping_add(1)));

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut converged = false;

    for iteration in 0..config.max_iterations {
        let orientation = match (&mut flipped, iteration % 2) {
            (Some(flip), 1) => flip,
            _ => &mut primary,
        };
        let outcome = run_cycle_with(
            orientation.estimator.as_ref(),
            &orientation.pair,
            &orientation.index,
            config.lambda_anchor,
            toggles,
        )
        .map_err(|e| abort(e.to_string(), iteration, &records, &primary))?;

        let report = &outcome.report;
        if !report.combined.is_finite() {
            return Err(abort(
                format!("non-finite combined loss {}", report.combined),
                iteration,
                &records,
                &primary,
            ));
        }
        records.push(IterationRecord {
            iteration,
            nn_loss: report.nn_loss,
            cycle_loss: report.cycle_loss,
            combined: report.combined,
        });

        adam_step(
            &mut orientation.adam,
            orientation.estimator.params_mut(),
            &outcome.param_grad,
            config,
        )
        .map_err(|e| abort(e.to_string(), iteration, &records, &primary))?;

        // The window length is even, so with flip augmentation this compares
        // losses of the same orientation.
        if iteration >= CONVERGENCE_WINDOW {
            let before = records[iteration - CONVERGENCE_WINDOW].combined;
            let now = records[iteration].combined;
            if before - now < config.convergence_tolerance {
                converged = true;
                break;
            }
        }
    }

    let final_flow = forward_flow(&primary);
    let iterations_run = records.len();
    Ok(FitTrace {
        records,
        final_flow,
        iterations_run,
        converged,
    })
}

fn forward_flow(orientation: &Orientation) -> FlowField {
    let (flow, _) = orientation
        .estimator
        .predict(orientation.pair.source.positions(), Direction::Forward);
    flow
}

fn abort(
    reason: String,
    iteration: usize,
    records: &[IterationRecord],
    primary: &Orientation,
) -> Error {
    let trace = FitTrace {
        records: records.to_vec(),
        final_flow: forward_flow(primary),
        iterations_run: records.len(),
        converged: false,
    };
    Error::FitAborted {
        iteration,
        reason,
        trace: Box::new(trace),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PointCloud, Vec3};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), "t").unwrap()
    }

    /// Closed-form scalar Adam recurrence, independent of `adam_step`.
    struct ScalarAdamOracle {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdamOracle {
        fn new() -> Self {
            Self { m: 0.0, v: 0.0, t: 0 }
        }

        fn step(&mut self, theta: f64, g: f64, c: &SolverConfig) -> f64 {
            self.t += 1;
            self.m = c.adam_beta1 * self.m + (1.0 - c.adam_beta1) * g;
            self.v = c.adam_beta2 * self.v + (1.0 - c.adam_beta2) * g * g;
            let m_hat = self.m / (1.0 - c.adam_beta1.powi(self.t));
            let v_hat = self.v / (1.0 - c.adam_beta2.powi(self.t));
            theta - c.learning_rate * m_hat / (v_hat.sqrt() + c.adam_epsilon)
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let config = SolverConfig::default();
        let mut state = AdamState::new(1);
        let mut params = [0.0];
        adam_step(&mut state, &mut params, &[1.0], &config).unwrap();
        // m_hat = g, v_hat = g^2, so delta = -lr / (1 + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        assert_relative_eq!(params[0], expected, max_relative = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let config = SolverConfig::default();
        let mut state = AdamState::new(3);
        let mut params = [1.0, -2.0, 0.5];
        for _ in 0..200 {
            adam_step(&mut state, &mut params, &[0.0; 3], &config).unwrap();
        }
        assert_eq!(params, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_persistent_positive_gradient_descends_monotonically() {
        let config = SolverConfig::default();
        let mut state = AdamState::new(1);
        let mut params = [0.0];
        let mut prev = params[0];
        for _ in 0..100 {
            adam_step(&mut state, &mut params, &[0.7], &config).unwrap();
            assert!(params[0] < prev);
            prev = params[0];
        }
    }

    #[test]
    fn adam_matches_scalar_oracle_for_1000_steps() {
        let config = SolverConfig {
            learning_rate: 3e-3,
            ..SolverConfig::default()
        };
        let mut state = AdamState::new(1);
        let mut params = [0.4];
        let mut oracle = ScalarAdamOracle::new();
        let mut theta = 0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let g = rng.random_range(-2.0..2.0);
            adam_step(&mut state, &mut params, &[g], &config).unwrap();
            theta = oracle.step(theta, g, &config);
            let tol = 1e-12 * theta.abs().max(1.0);
            assert!((params[0] - theta).abs() <= tol);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let config = SolverConfig::default();
        let mut state = AdamState::new(2);
        let mut params = [0.0, 0.0];
        let err = adam_step(&mut state, &mut params, &[0.0, f64::NAN], &config).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
    }

    #[test]
    fn flip_is_an_involution() {
        let pair = ScenePair::new(
            cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]),
            cloud(&[[0.5, 0.0, 0.0]]),
        )
        .with_gt_flow(FlowField::zeros(2))
        .with_gt_reverse_flow(FlowField::zeros(1));
        let twice = flip_pair(&flip_pair(&pair));
        assert_eq!(twice, pair);
    }

    #[test]
    fn flip_swaps_ground_truth_fields() {
        let gt = FlowField::new(vec![Vec3::new(0.5, 0.0, 0.0)]).unwrap();
        let pair =
            ScenePair::new(cloud(&[[0.0; 3]]), cloud(&[[0.5, 0.0, 0.0]])).with_gt_flow(gt.clone());
        let flipped = flip_pair(&pair);
        assert_eq!(flipped.source, pair.target);
        assert_eq!(flipped.target, pair.source);
        assert_eq!(flipped.gt_flow, None);
        assert_eq!(flipped.gt_reverse_flow, Some(gt));
    }

    #[test]
    fn flip_without_gt_stays_without_gt() {
        let pair = ScenePair::new(cloud(&[[0.0; 3]]), cloud(&[[1.0, 0.0, 0.0]]));
        let flipped = flip_pair(&pair);
        assert!(flipped.gt_flow.is_none() && flipped.gt_reverse_flow.is_none());
    }

    #[test]
    fn identity_pair_converges_at_zero_with_zero_flow() {
        let source = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let pair = ScenePair::new(source.clone(), source.clone());
        let trace = fit_scene_pair(&pair, &SolverConfig::default()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.records.last().unwrap().combined, 0.0);
        assert!(trace
            .final_flow
            .displacements()
            .iter()
            .all(|d| *d == Vec3::zeros()));
    }

    #[test]
    fn loss_sequence_finite_and_min_below_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<Vec3> = (0..80)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let tgt: Vec<Vec3> = src.iter().map(|p| p + Vec3::new(0.15, 0.0, 0.0)).collect();
        let pair = ScenePair::new(
            PointCloud::new(src, "t").unwrap(),
            PointCloud::new(tgt, "t").unwrap(),
        );
        let config = SolverConfig {
            max_iterations: 400,
            ..SolverConfig::default()
        };
        let trace = fit_scene_pair(&pair, &config).unwrap();
        assert!(trace.records.iter().all(|r| r.combined.is_finite()));
        let min = trace
            .records
            .iter()
            .map(|r| r.combined)
            .fold(f64::INFINITY, f64::min);
        assert!(min <= trace.records[0].combined);
        assert_eq!(trace.records.len(), trace.iterations_run);
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let src: Vec<Vec3> = (0..50)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let tgt: Vec<Vec3> = src.iter().map(|p| p + Vec3::new(0.1, 0.05, 0.0)).collect();
        let pair = ScenePair::new(
            PointCloud::new(src, "t").unwrap(),
            PointCloud::new(tgt, "t").unwrap(),
        );
        let config = SolverConfig {
            max_iterations: 150,
            estimator_kind: EstimatorKind::Mlp,
            mlp_hidden_sizes: vec![8],
            flip_augmentation: true,
            rng_seed: 42,
            ..SolverConfig::default()
        };
        let a = fit_scene_pair(&pair, &config).unwrap();
        let b = fit_scene_pair(&pair, &config).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.combined.to_bits(), rb.combined.to_bits());
            assert_eq!(ra.nn_loss.to_bits(), rb.nn_loss.to_bits());
            assert_eq!(ra.cycle_loss.to_bits(), rb.cycle_loss.to_bits());
        }
        for (da, db) in a
            .final_flow
            .displacements()
            .iter()
            .zip(b.final_flow.displacements())
        {
            assert_eq!(da.x.to_bits(), db.x.to_bits());
            assert_eq!(da.y.to_bits(), db.y.to_bits());
            assert_eq!(da.z.to_bits(), db.z.to_bits());
        }
    }
}
