//! Procedural scene pairs with exact ground-truth flow.
//!
//! Each object is a primitive surface (box, sphere, or plane) sampled
//! uniformly by area. Objects are laid out along the x axis with a one-meter
//! gap so multi-object scenes do not interpenetrate at rest. The object's
//! rigid motion is applied globally, x' = R x + t, and the ground-truth flow
//! of every source point is d*_i = (R x_i + t) - x_i.
//!
//! The target cloud is the moved source, perturbed by isotropic Gaussian
//! noise and thinned by random dropout - both applied to the target only, so
//! the ground truth stays defined on every source point and maps onto the
//! noiseless moved positions. The reverse ground truth carries each
//! surviving target point exactly back to its source point, which keeps it
//! consistent under noise and is what flip augmentation evaluates against.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FlowField, PointCloud, ScenePair, Vec3};

/// Surface primitive to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned box; `extent` gives the full side lengths.
    Box,
    /// Sphere of diameter `extent[0]` (the other components are ignored).
    Sphere,
    /// Rectangle in the z = 0 plane spanning `extent[0]` by `extent[1]`.
    Plane,
}

/// A rigid motion: rotation as a scaled axis (axis * angle, radians) applied
/// about the global origin, followed by a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RigidMotion {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            axis_angle: [0.0; 3],
            translation: t,
        }
    }

    /// Applies x' = R x + t.
    pub fn apply(&self, x: Vec3) -> Vec3 {
        let rotation = Rotation3::from_scaled_axis(Vec3::new(
            self.axis_angle[0],
            self.axis_angle[1],
            self.axis_angle[2],
        ));
        rotation * x + Vec3::new(self.translation[0], self.translation[1], self.translation[2])
    }
}

/// One object in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub primitive: Primitive,
    /// Full extents in meters (see [`Primitive`] for interpretation).
    pub extent: [f64; 3],
    pub points_per_object: usize,
    pub motion: RigidMotion,
}

/// A full scene description; deterministic under `rng_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    /// Isotropic Gaussian noise applied to target positions, meters.
    #[serde(default)]
    pub global_noise_sigma: f64,
    /// Fraction of moved points dropped from the target, in [0, 1).
    #[serde(default)]
    pub target_dropout_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSceneSpec(m));
        if self.objects.is_empty() {
            return fail("scene must contain at least one object".to_string());
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.points_per_object == 0 {
                return fail(format!("object {i}: points_per_object must be at least 1"));
            }
            if obj.extent.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                return fail(format!("object {i}: extent must be finite and non-negative"));
            }
            let finite_motion = obj
                .motion
                .axis_angle
                .iter()
                .chain(&obj.motion.translation)
                .all(|v| v.is_finite());
            if !finite_motion {
                return fail(format!("object {i}: motion must be finite"));
            }
        }
        if !(self.global_noise_sigma >= 0.0 && self.global_noise_sigma.is_finite()) {
            return fail(format!(
                "global_noise_sigma {} must be non-negative",
                self.global_noise_sigma
            ));
        }
        if !(0.0..1.0).contains(&self.target_dropout_fraction) {
            return fail(format!(
                "target_dropout_fraction {} must lie in [0, 1)",
                self.target_dropout_fraction
            ));
        }
        Ok(())
    }
}

/// Generates a scene pair with exact forward and reverse ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<ScenePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // Source points and their exact moved images.
    let total: usize = spec.objects.iter().map(|o| o.points_per_object).sum();
    let mut source_positions = Vec::with_capacity(total);
    let mut moved_positions = Vec::with_capacity(total);
    let mut offset_x = 0.0;
    for (k, obj) in spec.objects.iter().enumerate() {
        if k > 0 {
            offset_x += spec.objects[k - 1].extent[0] / 2.0 + obj.extent[0] / 2.0 + 1.0;
        }
        let center = Vec3::new(offset_x, 0.0, 0.0);
        for _ in 0..obj.points_per_object {
            let x = center + sample_surface(obj, &mut rng);
            source_positions.push(x);
            moved_positions.push(obj.motion.apply(x));
        }
    }

    let gt_flow = FlowField::new_unchecked(
        source_positions
            .iter()
            .zip(&moved_positions)
            .map(|(x, m)| m - x)
            .collect(),
    );

    // Target: moved points, noised then thinned. At least one point always
    // survives so the pair stays well-formed.
    let sigma = spec.global_noise_sigma;
    let dropout = spec.target_dropout_fraction;
    let mut target_positions = Vec::with_capacity(total);
    let mut survivors = Vec::with_capacity(total);
    for (i, m) in moved_positions.iter().enumerate() {
        let keep = dropout == 0.0 || rng.random_range(0.0..1.0) >= dropout;
        if !keep {
            continue;
        }
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        let n3: f64 = StandardNormal.sample(&mut rng);
        let noise = Vec3::new(sigma * n1, sigma * n2, sigma * n3);
        target_positions.push(m + noise);
        survivors.push(i);
    }
    if target_positions.is_empty() {
        target_positions.push(moved_positions[0]);
        survivors.push(0);
    }

    // Reverse ground truth: each surviving target point back to its exact
    // source point.
    let gt_reverse = FlowField::new_unchecked(
        survivors
            .iter()
            .zip(&target_positions)
            .map(|(&i, y)| source_positions[i] - y)
            .collect(),
    );

    let source = PointCloud::new(source_positions, "t")?;
    let target = PointCloud::new(target_positions, "t+1")?;
    Ok(ScenePair::new(source, target)
        .with_gt_flow(gt_flow)
        .with_gt_reverse_flow(gt_reverse))
}

fn sample_surface(obj: &ObjectSpec, rng: &mut ChaCha8Rng) -> Vec3 {
    let [ex, ey, ez] = obj.extent;
    match obj.primitive {
        Primitive::Box => {
            // Area-weighted choice among the six faces; a zero-area box
            // degenerates to its center.
            let areas = [ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey];
            let total: f64 = areas.iter().sum();
            if total == 0.0 {
                return Vec3::zeros();
            }
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.random_range(-0.5..0.5);
            let v = rng.random_range(-0.5..0.5);
            match face {
                0 => Vec3::new(-ex / 2.0, u * ey, v * ez),
                1 => Vec3::new(ex / 2.0, u * ey, v * ez),
                2 => Vec3::new(u * ex, -ey / 2.0, v * ez),
                3 => Vec3::new(u * ex, ey / 2.0, v * ez),
                4 => Vec3::new(u * ex, v * ey, -ez / 2.0),
                _ => Vec3::new(u * ex, v * ey, ez / 2.0),
            }
        }
        Primitive::Sphere => {
            let radius = ex / 2.0;
            let z = rng.random_range(-1.0..=1.0);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let rho = (1.0 - z * z).max(0.0).sqrt();
            Vec3::new(radius * rho * phi.cos(), radius * rho * phi.sin(), radius * z)
        }
        Primitive::Plane => Vec3::new(
            rng.random_range(-0.5..0.5) * ex,
            rng.random_range(-0.5..0.5) * ey,
            0.0,
        ),
    }
}

/// Fixture scenes for the degenerate-solution tests:
/// (a) a translated plane pair (the zero-flow fixture) and
/// (b) a many-point source with a single-point target (the collapse fixture).
pub fn make_degenerate_pairs() -> Vec<ScenePair> {
    let plane = SceneSpec {
        objects: vec![ObjectSpec {
            primitive: Primitive::Plane,
            extent: [2.0, 2.0, 0.0],
            points_per_object: 200,
            motion: RigidMotion::translation([0.5, 0.0, 0.0]),
        }],
        global_noise_sigma: 0.0,
        target_dropout_fraction: 0.0,
        rng_seed: 2024,
    };
    let fixture_a = generate_scene(&plane).expect("plane fixture spec is valid");

    let sphere = SceneSpec {
        objects: vec![ObjectSpec {
            primitive: Primitive::Sphere,
            extent: [1.0, 1.0, 1.0],
            points_per_object: 100,
            motion: RigidMotion::default(),
        }],
        global_noise_sigma: 0.0,
        target_dropout_fraction: 0.0,
        rng_seed: 2025,
    };
    let full = generate_scene(&sphere).expect("sphere fixture spec is valid");
    let single_target = PointCloud::new(vec![Vec3::new(2.0, 0.0, 0.0)], "t+1")
        .expect("single point is a valid cloud");
    let fixture_b = ScenePair::new(full.source, single_target);

    vec![fixture_a, fixture_b]
}
