//! Flow estimators and the forward/reverse cycle pipeline.
//!
//! Two interchangeable parameterizations of the flow function:
//!
//! * [`DirectEstimator`] - free per-point flow variables, one forward set
//!   over the source and one reverse set over the anchors;
//! * [`MlpEstimator`] - a small coordinate MLP (tanh hidden layers, linear
//!   output) mapping a 3D position to a 3D displacement, with a built-in
//!   reverse-mode gradient engine. Forward and reverse directions use
//!   independent parameter sets: a coordinate network never sees the target
//!   cloud, so sharing parameters would force the reverse flow to equal the
//!   forward flow.
//!
//! [`run_cycle`] executes the whole objective for one scene pair: forward
//! flow, nearest-neighbor loss, anchoring, reverse flow at the anchors,
//! cycle loss, and backpropagation of the combined gradient into every
//! parameter. For the MLP the anchor positions depend on forward parameters,
//! so the chain through the reverse network's *input* is included.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{map_chunks, map_indexed, pairwise_mean};
use crate::losses::{anchor_point, nn_loss};
use crate::spatial::NeighborIndex;
use crate::types::{FlowField, LossReport, PointCloud, ScenePair, Vec3};

/// Which leg of the cycle a prediction serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Forward-pass bookkeeping consumed by the matching backward call.
#[derive(Debug, Clone)]
pub enum Tape {
    Direct { n_points: usize },
    Mlp(ActivationRecord),
}

/// A flow estimator: predicts one displacement per input position and
/// accumulates parameter gradients given upstream per-point flow gradients.
pub trait FlowEstimator {
    fn parameter_count(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Predicts a flow over `positions`. Deterministic given parameters and
    /// inputs; the output length equals `positions.len()`.
    fn predict(&self, positions: &[Vec3], direction: Direction) -> (FlowField, Tape);

    /// Accumulates d(sum_i <upstream_i, output_i>)/d(params) into
    /// `param_grad` (same layout as `params`). When `input_grad` is given it
    /// is filled with the gradient with respect to the input positions.
    fn backward(
        &self,
        positions: &[Vec3],
        tape: &Tape,
        direction: Direction,
        upstream: &[Vec3],
        param_grad: &mut [f64],
        input_grad: Option<&mut Vec<Vec3>>,
    ) -> Result<()>;
}

// ---------------------------------------------------------------------------
// Direct estimator: free per-point variables.
// ---------------------------------------------------------------------------

/// Free per-point flow: 3N forward components over the source followed by
/// 3N reverse components over the anchors.
#[derive(Debug, Clone)]
pub struct DirectEstimator {
    n: usize,
    params: Vec<f64>,
}

impl DirectEstimator {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            params: vec![0.0; 6 * n],
        }
    }

    pub fn from_fields(forward: &FlowField, reverse: &FlowField) -> Result<Self> {
        if forward.len() != reverse.len() {
            return Err(Error::LengthMismatch {
                what: "forward vs. reverse flow",
                expected: forward.len(),
                actual: reverse.len(),
            });
        }
        let n = forward.len();
        let mut params = Vec::with_capacity(6 * n);
        for d in forward.displacements() {
            params.extend_from_slice(&[d.x, d.y, d.z]);
        }
        for d in reverse.displacements() {
            params.extend_from_slice(&[d.x, d.y, d.z]);
        }
        Ok(Self { n, params })
    }

    pub fn point_count(&self) -> usize {
        self.n
    }

    fn offset(&self, direction: Direction) -> usize {
        match direction {
            Direction::Forward => 0,
            Direction::Reverse => 3 * self.n,
        }
    }

    /// The stored field for one direction, verbatim.
    pub fn field(&self, direction: Direction) -> FlowField {
        let off = self.offset(direction);
        let displacements = (0..self.n)
            .map(|i| {
                Vec3::new(
                    self.params[off + 3 * i],
                    self.params[off + 3 * i + 1],
                    self.params[off + 3 * i + 2],
                )
            })
            .collect();
        FlowField::new_unchecked(displacements)
    }
}

impl FlowEstimator for DirectEstimator {
    fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn predict(&self, positions: &[Vec3], _direction: Direction) -> (FlowField, Tape) {
        assert_eq!(
            positions.len(),
            self.n,
            "direct estimator sized for {} points, given {}",
            self.n,
            positions.len()
        );
        (self.field(_direction), Tape::Direct { n_points: self.n })
    }

    fn backward(
        &self,
        _positions: &[Vec3],
        tape: &Tape,
        direction: Direction,
        upstream: &[Vec3],
        param_grad: &mut [f64],
        input_grad: Option<&mut Vec<Vec3>>,
    ) -> Result<()> {
        match tape {
            Tape::Direct { n_points } if *n_points == self.n => {}
            _ => {
                return Err(Error::StaleActivationRecord(
                    "tape does not belong to this direct estimator".to_string(),
                ))
            }
        }
        if upstream.len() != self.n || param_grad.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                what: "backward buffers vs. estimator",
                expected: self.n,
                actual: upstream.len(),
            });
        }
        let off = self.offset(direction);
        for (i, u) in upstream.iter().enumerate() {
            param_grad[off + 3 * i] += u.x;
            param_grad[off + 3 * i + 1] += u.y;
            param_grad[off + 3 * i + 2] += u.z;
        }
        // The stored field does not depend on the input positions.
        if let Some(g) = input_grad {
            g.clear();
            g.resize(self.n, Vec3::zeros());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Coordinate MLP estimator.
// ---------------------------------------------------------------------------

/// Layer structure of the coordinate network: input 3, hidden sizes, output 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArch {
    sizes: Vec<usize>,
}

impl MlpArch {
    pub fn new(hidden: &[usize]) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(3);
        sizes.extend_from_slice(hidden);
        sizes.push(3);
        Self { sizes }
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Total parameter count: per layer, out*in weights plus out biases.
    pub fn parameter_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    fn act_len(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn layer_dims(&self, layer: usize) -> (usize, usize) {
        (self.sizes[layer], self.sizes[layer + 1])
    }

    /// Evaluates the network over `positions` with the given flat parameter
    /// slice, recording per-layer activations for the backward pass.
    pub fn forward(&self, params: &[f64], positions: &[Vec3]) -> Result<(FlowField, ActivationRecord)> {
        if params.len() != self.parameter_count() {
            return Err(Error::LengthMismatch {
                what: "mlp parameters",
                expected: self.parameter_count(),
                actual: params.len(),
            });
        }
        let acts: Vec<Vec<f64>> =
            map_indexed(positions.len(), |i| self.forward_point(params, positions[i]));
        let out_off = self.act_len() - 3;
        let displacements = acts
            .iter()
            .map(|a| Vec3::new(a[out_off], a[out_off + 1], a[out_off + 2]))
            .collect();
        Ok((
            FlowField::new_unchecked(displacements),
            ActivationRecord {
                sizes: self.sizes.clone(),
                acts,
            },
        ))
    }

    /// Stacked activations [a_0 | a_1 | ... | a_L] for one point.
    fn forward_point(&self, params: &[f64], position: Vec3) -> Vec<f64> {
        let mut acts = Vec::with_capacity(self.act_len());
        acts.extend_from_slice(&[position.x, position.y, position.z]);
        let mut in_off = 0usize;
        let mut p = 0usize;
        let last = self.layer_count() - 1;
        for layer in 0..self.layer_count() {
            let (n_in, n_out) = self.layer_dims(layer);
            let out_off = acts.len();
            for o in 0..n_out {
                let row = &params[p + o * n_in..p + (o + 1) * n_in];
                let mut z = params[p + n_out * n_in + o]; // bias
                for (w, a) in row.iter().zip(&acts[in_off..in_off + n_in]) {
                    z += w * a;
                }
                acts.push(if layer < last { z.tanh() } else { z });
            }
            p += n_out * n_in + n_out;
            in_off = out_off;
        }
        acts
    }

    /// Exact reverse-mode gradients of sum_i <upstream_i, output_i> with
    /// respect to every weight and bias, plus the input-position gradients.
    pub fn backward(
        &self,
        params: &[f64],
        record: &ActivationRecord,
        upstream: &[Vec3],
    ) -> Result<MlpGradients> {
        if params.len() != self.parameter_count() {
            return Err(Error::LengthMismatch {
                what: "mlp parameters",
                expected: self.parameter_count(),
                actual: params.len(),
            });
        }
        if record.sizes != self.sizes {
            return Err(Error::StaleActivationRecord(format!(
                "record layer sizes {:?} do not match network {:?}",
                record.sizes, self.sizes
            )));
        }
        if upstream.len() != record.acts.len() {
            return Err(Error::StaleActivationRecord(format!(
                "record holds {} points but upstream has {}",
                record.acts.len(),
                upstream.len()
            )));
        }

        let n = upstream.len();
        let p_len = self.parameter_count();
        // Fixed-size chunks accumulated in chunk order keep the result
        // independent of the thread count.
        let partials = map_chunks(n, 128, |range| {
            let mut grad = vec![0.0; p_len];
            let mut inputs = Vec::with_capacity(range.len());
            for i in range {
                inputs.push(self.backward_point(params, &record.acts[i], upstream[i], &mut grad));
            }
            (grad, inputs)
        });
        let mut params_grad = vec![0.0; p_len];
        let mut input_grad = Vec::with_capacity(n);
        for (partial, inputs) in partials {
            for (g, p) in params_grad.iter_mut().zip(&partial) {
                *g += p;
            }
            input_grad.extend(inputs);
        }
        Ok(MlpGradients {
            params: params_grad,
            inputs: input_grad,
        })
    }

    /// Backprop for one point; returns the gradient w.r.t. its input position.
    fn backward_point(
        &self,
        params: &[f64],
        acts: &[f64],
        upstream: Vec3,
        grad: &mut [f64],
    ) -> Vec3 {
        let layers = self.layer_count();
        // Offsets of each activation block and each layer's parameters.
        let mut act_offsets = Vec::with_capacity(layers + 1);
        let mut param_offsets = Vec::with_capacity(layers);
        let mut a = 0usize;
        let mut p = 0usize;
        for layer in 0..layers {
            act_offsets.push(a);
            param_offsets.push(p);
            let (n_in, n_out) = self.layer_dims(layer);
            a += n_in;
            p += n_out * n_in + n_out;
        }
        act_offsets.push(a);

        let mut d_out = vec![upstream.x, upstream.y, upstream.z];
        for layer in (0..layers).rev() {
            let (n_in, n_out) = self.layer_dims(layer);
            let a_in = &acts[act_offsets[layer]..act_offsets[layer] + n_in];
            let a_out = &acts[act_offsets[layer + 1]..act_offsets[layer + 1] + n_out];
            let p0 = param_offsets[layer];
            // d z = d a * act'(z); the output layer is linear.
            let dz: Vec<f64> = if layer < layers - 1 {
                d_out
                    .iter()
                    .zip(a_out)
                    .map(|(d, a)| d * (1.0 - a * a))
                    .collect()
            } else {
                d_out.clone()
            };
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let w_row = p0 + o * n_in;
                for i in 0..n_in {
                    grad[w_row + i] += dz[o] * a_in[i];
                    d_in[i] += params[w_row + i] * dz[o];
                }
                grad[p0 + n_out * n_in + o] += dz[o];
            }
            d_out = d_in;
        }
        Vec3::new(d_out[0], d_out[1], d_out[2])
    }
}

/// Per-layer activations retained by [`MlpArch::forward`].
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    sizes: Vec<usize>,
    /// Per point: concatenated activations of every layer, input first.
    acts: Vec<Vec<f64>>,
}

impl ActivationRecord {
    pub fn point_count(&self) -> usize {
        self.acts.len()
    }
}

/// Parameter and input-position gradients from one MLP backward pass.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub params: Vec<f64>,
    pub inputs: Vec<Vec3>,
}

/// Coordinate-MLP flow estimator with independent forward and reverse
/// parameter sets stored back to back.
#[derive(Debug, Clone)]
pub struct MlpEstimator {
    arch: MlpArch,
    per_direction: usize,
    params: Vec<f64>,
}

impl MlpEstimator {
    /// Symmetric uniform initialization in [-a, a] with
    /// a = sqrt(6 / (fan_in + fan_out)); biases zero. Both directions draw
    /// from one stream seeded by `seed`.
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let arch = MlpArch::new(hidden);
        let per_direction = arch.parameter_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * per_direction);
        for _ in 0..2 {
            for w in arch.sizes.windows(2) {
                let (n_in, n_out) = (w[0], w[1]);
                let a = (6.0 / (n_in + n_out) as f64).sqrt();
                for _ in 0..n_out * n_in {
                    params.push(rng.random_range(-a..a));
                }
                params.extend(std::iter::repeat_n(0.0, n_out));
            }
        }
        Self {
            arch,
            per_direction,
            params,
        }
    }

    /// Builds an estimator from explicit parameters (forward set followed by
    /// reverse set).
    pub fn with_params(hidden: &[usize], params: Vec<f64>) -> Result<Self> {
        let arch = MlpArch::new(hidden);
        let per_direction = arch.parameter_count();
        if params.len() != 2 * per_direction {
            return Err(Error::LengthMismatch {
                what: "mlp parameter vector",
                expected: 2 * per_direction,
                actual: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "mlp parameters",
                index: i,
            });
        }
        Ok(Self {
            arch,
            per_direction,
            params,
        })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    fn direction_params(&self, direction: Direction) -> &[f64] {
        match direction {
            Direction::Forward => &self.params[..self.per_direction],
            Direction::Reverse => &self.params[self.per_direction..],
        }
    }
}

impl FlowEstimator for MlpEstimator {
    fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn predict(&self, positions: &[Vec3], direction: Direction) -> (FlowField, Tape) {
        let (flow, record) = self
            .arch
            .forward(self.direction_params(direction), positions)
            .expect("estimator parameters are shape-checked at construction");
        (flow, Tape::Mlp(record))
    }

    fn backward(
        &self,
        _positions: &[Vec3],
        tape: &Tape,
        direction: Direction,
        upstream: &[Vec3],
        param_grad: &mut [f64],
        input_grad: Option<&mut Vec<Vec3>>,
    ) -> Result<()> {
        let Tape::Mlp(record) = tape else {
            return Err(Error::StaleActivationRecord(
                "tape does not belong to an MLP estimator".to_string(),
            ));
        };
        if param_grad.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                what: "parameter gradient buffer",
                expected: self.params.len(),
                actual: param_grad.len(),
            });
        }
        let grads = self
            .arch
            .backward(self.direction_params(direction), record, upstream)?;
        let off = match direction {
            Direction::Forward => 0,
            Direction::Reverse => self.per_direction,
        };
        for (i, g) in grads.params.iter().enumerate() {
            param_grad[off + i] += g;
        }
        if let Some(out) = input_grad {
            *out = grads.inputs;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The cycle pipeline.
// ---------------------------------------------------------------------------

/// Which loss terms an evaluation applies. Anchoring off means the anchors
/// coincide with the displaced points (equivalent to lambda = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub nn: bool,
    pub cycle: bool,
    pub anchor: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            nn: true,
            cycle: true,
            anchor: true,
        }
    }
}

impl LossToggles {
    pub fn effective_lambda(&self, lambda: f64) -> f64 {
        if self.anchor {
            lambda
        } else {
            1.0
        }
    }
}

/// One full evaluation of the objective for a scene pair, with gradients
/// accumulated over every estimator parameter.
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub forward_flow: FlowField,
    /// Anchor positions the reverse flow was estimated at.
    pub anchors: PointCloud,
    pub nn_indices: Vec<usize>,
    pub reverse_flow: FlowField,
    pub report: LossReport,
    pub param_grad: Vec<f64>,
}

/// Runs the full objective with every loss term enabled.
pub fn run_cycle<E: FlowEstimator + ?Sized>(
    estimator: &E,
    pair: &ScenePair,
    target_index: &NeighborIndex,
    lambda: f64,
) -> Result<CycleOutcome> {
    run_cycle_with(estimator, pair, target_index, lambda, LossToggles::default())
}

/// Runs the objective with selected loss terms. Toggled-off terms report a
/// zero loss and contribute no gradient; the nearest-neighbor assignment is
/// still computed whenever the cycle term needs anchors.
pub fn run_cycle_with<E: FlowEstimator + ?Sized>(
    estimator: &E,
    pair: &ScenePair,
    target_index: &NeighborIndex,
    lambda: f64,
    toggles: LossToggles,
) -> Result<CycleOutcome> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let lambda = toggles.effective_lambda(lambda);
    let source = &pair.source;
    let n = source.len();

    let (forward_flow, forward_tape) = estimator.predict(source.positions(), Direction::Forward);
    let nn = nn_loss(source, &forward_flow, target_index)?;

    let anchor_positions: Vec<Vec3> = map_indexed(n, |i| {
        anchor_point(
            source.position(i) + forward_flow.get(i),
            target_index.point(nn.nn_indices[i]),
            lambda,
        )
    });
    let anchors = PointCloud::new_unchecked(anchor_positions, None, "anchors".to_string());

    let mut param_grad = vec![0.0; estimator.parameter_count()];

    let (reverse_flow, cycle_value, cycle_per_point, upstream_on_predicted) = if toggles.cycle {
        let (reverse_flow, reverse_tape) =
            estimator.predict(anchors.positions(), Direction::Reverse);
        let residuals: Vec<Vec3> = map_indexed(n, |i| {
            anchors.position(i) + reverse_flow.get(i) - source.position(i)
        });
        let per_point: Vec<f64> = residuals.iter().map(|r| r.norm_squared()).collect();
        let scale = 2.0 / n as f64;
        let upstream_cycle: Vec<Vec3> = residuals.iter().map(|r| r * scale).collect();

        // Parameter gradients of the reverse leg, plus the gradient flowing
        // back into the anchor positions through the reverse network input.
        let mut anchor_input_grad = Vec::new();
        estimator.backward(
            anchors.positions(),
            &reverse_tape,
            Direction::Reverse,
            &upstream_cycle,
            &mut param_grad,
            Some(&mut anchor_input_grad),
        )?;

        // d(cycle)/d(predicted_i) = lambda * (direct residual path + path
        // through the reverse network's input).
        let upstream_on_predicted: Vec<Vec3> = map_indexed(n, |i| {
            (upstream_cycle[i] + anchor_input_grad[i]) * lambda
        });
        (
            reverse_flow,
            pairwise_mean(&per_point),
            per_point,
            upstream_on_predicted,
        )
    } else {
        (
            FlowField::zeros(n),
            0.0,
            vec![0.0; n],
            vec![Vec3::zeros(); n],
        )
    };

    let upstream_forward: Vec<Vec3> = if toggles.nn {
        map_indexed(n, |i| nn.grad[i] + upstream_on_predicted[i])
    } else {
        upstream_on_predicted
    };
    estimator.backward(
        source.positions(),
        &forward_tape,
        Direction::Forward,
        &upstream_forward,
        &mut param_grad,
        None,
    )?;

    let nn_value = if toggles.nn { nn.loss } else { 0.0 };
    let supervised = match &pair.gt_flow {
        Some(gt) if gt.len() == n => {
            let diffs: Vec<f64> =
                map_indexed(n, |i| (gt.get(i) - forward_flow.get(i)).norm_squared());
            Some(pairwise_mean(&diffs))
        }
        _ => None,
    };
    let report = LossReport {
        nn_loss: nn_value,
        cycle_loss: cycle_value,
        combined: nn_value + cycle_value,
        supervised,
        per_point_nn_residual: if toggles.nn { nn.per_point } else { vec![0.0; n] },
        per_point_cycle_residual: cycle_per_point,
    };
    Ok(CycleOutcome {
        forward_flow,
        anchors,
        nn_indices: nn.nn_indices,
        reverse_flow,
        report,
        param_grad,
    })
}
