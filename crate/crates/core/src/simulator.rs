//! Synthetic multi-camera scenario: a waypoint trajectory inside the arena,
//! camera nodes with limited fields of view and occluders, and
//! heteroskedastic, optionally miscalibrated per-view detections.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2, Rotation2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationParams;
use crate::error::{Error, Result};
use crate::geo::{cholesky2x2, sym2_eigenvalues, wrap_angle, Arena, Gaussian2D, ObjectPose};
use crate::kalman::{Detection, DetectionFrame, ViewId};

fn default_fov() -> f64 {
    120f64.to_radians()
}

fn default_anisotropy() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraNode {
    pub id: ViewId,
    pub position: Vector2<f64>,
    /// Direction of the optical axis, radians.
    pub facing: f64,
    #[serde(default = "default_fov")]
    pub fov: f64,
    /// Noise std at zero distance, cm.
    pub noise_floor: f64,
    /// Additional noise std per cm of distance.
    pub noise_slope: f64,
    /// True `(a, b)` relating reported to actual noise:
    /// `Σ_true = a·Σ_reported + b·I`.
    #[serde(default)]
    pub miscalibration: CalibrationParams,
    /// Std ratio along the viewing ray versus across it.
    #[serde(default = "default_anisotropy")]
    pub ray_anisotropy: f64,
}

/// Axis-aligned blocking rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    #[default]
    Normal,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Minimum distance from every wall, cm.
    pub margin: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Largest fillet radius at waypoints, cm.
    pub turn_radius: f64,
    /// Minimum waypoint spacing, cm.
    pub min_leg: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            margin: 20.0,
            min_speed: 50.0,
            max_speed: 150.0,
            turn_radius: 40.0,
            min_leg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub arena: Arena,
    pub nodes: Vec<CameraNode>,
    pub occluders: Vec<Occluder>,
    pub lighting: Lighting,
    /// Noise multiplier under low light.
    pub low_light_multiplier: f64,
    pub fps: f64,
    /// Seconds.
    pub duration: f64,
    /// `(train, val, test)` fractions.
    pub split: (f64, f64, f64),
    pub object_extent: (f64, f64),
    pub seed: u64,
    pub trajectory: TrajectoryConfig,
    /// Probability of emitting the fallback detection when the object is
    /// not visible to a node.
    pub invisible_emit_prob: f64,
    /// Std of the fallback detection, cm.
    pub fallback_std: f64,
    /// Smallest reported covariance eigenvalue, cm².
    pub report_floor: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let arena = Arena::default();
        let node = |id: &str, x: f64, y: f64, facing: f64| CameraNode {
            id: id.into(),
            position: Vector2::new(x, y),
            facing,
            fov: default_fov(),
            noise_floor: 2.0,
            noise_slope: 0.015,
            miscalibration: CalibrationParams::IDENTITY,
            ray_anisotropy: 1.0,
        };
        Self {
            nodes: vec![
                node("N1", arena.width / 2.0, 0.0, FRAC_PI_2),
                node("N2", arena.width, arena.length / 2.0, PI),
                node("N3", arena.width / 2.0, arena.length, -FRAC_PI_2),
                node("N4", 0.0, arena.length / 2.0, 0.0),
            ],
            arena,
            occluders: Vec::new(),
            lighting: Lighting::Normal,
            low_light_multiplier: 3.0,
            fps: 20.0,
            duration: 300.0,
            split: (0.5, 0.1, 0.4),
            object_extent: (15.0, 30.0),
            seed: 7,
            trajectory: TrajectoryConfig::default(),
            invisible_emit_prob: 0.5,
            fallback_std: 200.0,
            report_floor: 0.25,
        }
    }
}

impl ScenarioConfig {
    /// Every node reports covariances `factor` times too small.
    pub fn with_underdispersion(mut self, factor: f64) -> Self {
        for n in &mut self.nodes {
            n.miscalibration = CalibrationParams { a: factor, b: 0.0 };
        }
        self
    }

    pub fn noise_multiplier(&self) -> f64 {
        match self.lighting {
            Lighting::Normal => 1.0,
            Lighting::Low => self.low_light_multiplier,
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        fn fail(field: impl Into<String>, message: impl Into<String>) -> Result<()> {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        }
        if !(self.arena.width > 0.0 && self.arena.length > 0.0) {
            return fail("arena", "width and length must be positive");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail("fps", "must be positive");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail("duration", "must be positive");
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(*f >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return fail("split", format!("fractions must be non-negative and sum to 1, got {a}+{b}+{c}"));
        }
        if !(self.object_extent.0 > 0.0 && self.object_extent.1 > 0.0) {
            return fail("object_extent", "must be positive");
        }
        if !(self.low_light_multiplier > 0.0) {
            return fail("low_light_multiplier", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.invisible_emit_prob) {
            return fail("invisible_emit_prob", "must lie in [0, 1]");
        }
        if !(self.fallback_std > 0.0) {
            return fail("fallback_std", "must be positive");
        }
        if !(self.report_floor > 0.0) {
            return fail("report_floor", "must be positive");
        }
        let tr = &self.trajectory;
        if !(tr.min_speed > 0.0 && tr.max_speed >= tr.min_speed) {
            return fail("trajectory.min_speed", "speeds must satisfy 0 < min_speed <= max_speed");
        }
        if !(tr.margin >= 0.0 && tr.turn_radius >= 0.0 && tr.min_leg > 0.0) {
            return fail("trajectory", "margin, turn_radius and min_leg must be non-negative");
        }
        if self.nodes.is_empty() {
            return fail("nodes", "at least one camera node is required");
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let field = |f: &str| format!("nodes[{i}].{f}");
            if self.nodes[..i].iter().any(|m| m.id == n.id) {
                return fail(field("id"), format!("duplicate id `{}`", n.id));
            }
            if !(n.fov > 0.0 && n.fov < 2.0 * PI) {
                return fail(field("fov"), "must lie in (0, 2π)");
            }
            if !(n.noise_floor > 0.0) {
                return fail(field("noise_floor"), "must be positive");
            }
            if !(n.noise_slope >= 0.0) {
                return fail(field("noise_slope"), "must be non-negative");
            }
            if !(n.miscalibration.a > 0.0 && n.miscalibration.b >= 0.0) {
                return fail(field("miscalibration"), "needs a > 0 and b >= 0");
            }
            if !(n.ray_anisotropy > 0.0) {
                return fail(field("ray_anisotropy"), "must be positive");
            }
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if !(o.max.x > o.min.x && o.max.y > o.min.y) {
                return fail(format!("occluders[{i}]"), "max must exceed min on both axes");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<(f64, ObjectPose)>,
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Line {
        from: Vector2<f64>,
        dir: Vector2<f64>,
        len: f64,
        speed: f64,
    },
    Arc {
        center: Vector2<f64>,
        radius: f64,
        start: f64,
        /// Signed sweep, radians.
        sweep: f64,
        speed: f64,
    },
}

impl Piece {
    fn length(&self) -> f64 {
        match *self {
            Piece::Line { len, .. } => len,
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn speed(&self) -> f64 {
        match *self {
            Piece::Line { speed, .. } | Piece::Arc { speed, .. } => speed,
        }
    }

    /// Position and direction of travel after `s` cm along the piece.
    fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        match *self {
            Piece::Line { from, dir, .. } => (from + dir * s, dir.y.atan2(dir.x)),
            Piece::Arc {
                center,
                radius,
                start,
                sweep,
                ..
            } => {
                let angle = start + sweep.signum() * s / radius;
                let p = center + Vector2::new(angle.cos(), angle.sin()) * radius;
                (p, angle + sweep.signum() * FRAC_PI_2)
            }
        }
    }
}

/// Sharpest corner allowed between consecutive legs.
const MAX_TURN: f64 = 2.0 * PI / 3.0;

fn random_point<R: Rng>(rng: &mut R, lo: Vector2<f64>, hi: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y))
}

/// Polyline through `waypoints` with corners replaced by circular arcs of
/// radius at most `turn_radius`; leg `i` moves at `speeds[i]`.
fn fillet_path(waypoints: &[Vector2<f64>], speeds: &[f64], turn_radius: f64) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut cursor = waypoints[0];
    for i in 1..waypoints.len() {
        let w = waypoints[i];
        let speed = speeds[i - 1];
        let leg_in = w - waypoints[i - 1];
        let u_in = leg_in.normalize();
        let fillet = waypoints.get(i + 1).and_then(|&next| {
            let leg_out = next - w;
            let u_out = leg_out.normalize();
            let turn = u_in.dot(&u_out).clamp(-1.0, 1.0).acos();
            if turn < 1e-9 {
                return None;
            }
            let half_tan = (turn / 2.0).tan();
            let room = 0.5 * leg_in.norm().min(leg_out.norm());
            let radius = turn_radius.min(room / half_tan);
            let d = radius * half_tan;
            let left = u_in.x * u_out.y - u_in.y * u_out.x > 0.0;
            let normal = if left {
                Vector2::new(-u_in.y, u_in.x)
            } else {
                Vector2::new(u_in.y, -u_in.x)
            };
            let a = w - u_in * d;
            let b = w + u_out * d;
            Some((a, b, a + normal * radius, radius, turn, left))
        });
        let line_end = fillet.map_or(w, |f| f.0);
        let len = (line_end - cursor).norm();
        if len > 0.0 {
            pieces.push(Piece::Line {
                from: cursor,
                dir: (line_end - cursor) / len,
                len,
                speed,
            });
        }
        match fillet {
            Some((a, b, center, radius, turn, left)) => {
                if radius > 0.0 {
                    let rel = a - center;
                    pieces.push(Piece::Arc {
                        center,
                        radius,
                        start: rel.y.atan2(rel.x),
                        sweep: if left { turn } else { -turn },
                        speed,
                    });
                }
                cursor = b;
            }
            None => cursor = w,
        }
    }
    pieces
}

/// Smooth waypoint-following path sampled at the configured frame rate.
///
/// Waypoints are drawn inside the margin box and the polyline corners are
/// filleted with circular arcs, so the path never leaves the box.
pub fn generate_trajectory<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Result<Trajectory> {
    config.validate()?;
    let tr = &config.trajectory;
    let lo = Vector2::new(tr.margin, tr.margin);
    let hi = Vector2::new(config.arena.width - tr.margin, config.arena.length - tr.margin);
    if !(hi.x > lo.x && hi.y > lo.y) || (hi - lo).norm() < 2.0 * tr.min_leg {
        return Err(Error::Config {
            field: "trajectory.margin".into(),
            message: "arena too small for the wall margin".into(),
        });
    }

    let mut waypoints = vec![random_point(rng, lo, hi)];
    let mut speeds = Vec::new();
    let mut pieces = Vec::new();
    let mut time = 0.0;
    // fillets shorten the polyline, so extend it until the pieces cover the duration
    while time <= config.duration + 1.0 {
        let needed = waypoints.len() + 3;
        while waypoints.len() < needed {
            let last = *waypoints.last().unwrap();
            let heading_in = waypoints
                .len()
                .checked_sub(2)
                .map(|i| (last - waypoints[i]).normalize());
            let acceptable = |p: &Vector2<f64>| {
                let leg = p - last;
                leg.norm() >= tr.min_leg
                    && heading_in.is_none_or(|u| u.dot(&leg.normalize()) >= MAX_TURN.cos())
            };
            let mut next = random_point(rng, lo, hi);
            for _ in 0..1000 {
                if acceptable(&next) {
                    break;
                }
                next = random_point(rng, lo, hi);
            }
            if (next - last).norm() < 1e-6 {
                continue;
            }
            waypoints.push(next);
            speeds.push(rng.random_range(tr.min_speed..=tr.max_speed));
        }
        pieces = fillet_path(&waypoints, &speeds, tr.turn_radius);
        time = pieces.iter().map(|p| p.length() / p.speed()).sum();
    }

    let n = config.frame_count();
    let extent = config.object_extent;
    let mut samples = Vec::with_capacity(n);
    let mut piece = 0;
    let mut piece_start = 0.0;
    for k in 0..n {
        let t = k as f64 / config.fps;
        while piece < pieces.len()
            && t - piece_start > pieces[piece].length() / pieces[piece].speed()
        {
            piece_start += pieces[piece].length() / pieces[piece].speed();
            piece += 1;
        }
        let current = pieces.get(piece).ok_or_else(|| {
            Error::InvalidArgument("trajectory shorter than the scenario duration".into())
        })?;
        let s = ((t - piece_start) * current.speed()).min(current.length());
        let (p, direction) = current.at(s);
        let p = Vector2::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y));
        samples.push((t, ObjectPose::new(p, wrap_angle(direction - FRAC_PI_2), extent)?));
    }
    Ok(Trajectory { samples })
}

fn segment_hits_rect(a: &Vector2<f64>, b: &Vector2<f64>, rect: &Occluder) -> bool {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        if d[axis].abs() < 1e-15 {
            if a[axis] < rect.min[axis] || a[axis] > rect.max[axis] {
                return false;
            }
        } else {
            let ta = (rect.min[axis] - a[axis]) / d[axis];
            let tb = (rect.max[axis] - a[axis]) / d[axis];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Object center inside the node's field of view with an unobstructed line
/// of sight.
pub fn visibility(node: &CameraNode, pose: &ObjectPose, occluders: &[Occluder]) -> bool {
    let rel = pose.position - node.position;
    if rel.norm() > 0.0 {
        let off_axis = wrap_angle(rel.y.atan2(rel.x) - node.facing);
        if off_axis.abs() > 0.5 * node.fov {
            return false;
        }
    }
    !occluders
        .iter()
        .any(|o| segment_hits_rect(&node.position, &pose.position, o))
}

/// Noise std of a visible detection.
pub fn noise_std(node: &CameraNode, pose: &ObjectPose, multiplier: f64) -> f64 {
    multiplier * (node.noise_floor + node.noise_slope * (pose.position - node.position).norm())
}

/// Actual detection-error covariance for a visible object.
pub fn true_noise_cov(node: &CameraNode, pose: &ObjectPose, multiplier: f64) -> Matrix2<f64> {
    let s = noise_std(node, pose, multiplier);
    let rel = pose.position - node.position;
    let ray = if rel.norm() > 0.0 { rel.y.atan2(rel.x) } else { 0.0 };
    let r = *Rotation2::new(ray).matrix();
    let along = s * node.ray_anisotropy;
    r * Matrix2::new(along * along, 0.0, 0.0, s * s) * r.transpose()
}

/// Reported covariance `(Σ_true − b·I)/a` with eigenvalues floored.
pub fn reported_cov(true_cov: &Matrix2<f64>, mis: &CalibrationParams, floor: f64) -> Matrix2<f64> {
    let raw = (true_cov - Matrix2::identity() * mis.b) / mis.a;
    let (lo, hi) = sym2_eigenvalues(&raw);
    if lo >= floor {
        return raw;
    }
    if hi <= floor {
        return Matrix2::identity() * floor;
    }
    // clamp the small eigenvalue only
    let (a, b) = (raw[(0, 0)], raw[(0, 1)]);
    let v = if b.abs() > 1e-300 {
        Vector2::new(b, hi - a).normalize()
    } else if a >= raw[(1, 1)] {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let w = Vector2::new(-v.y, v.x);
    v * v.transpose() * hi + w * w.transpose() * floor
}

/// One node's detection of `pose`, or `None` when an unseen object yields no
/// output.
pub fn simulate_detection<R: Rng>(
    node: &CameraNode,
    pose: &ObjectPose,
    config: &ScenarioConfig,
    rng: &mut R,
) -> Option<Detection> {
    if visibility(node, pose, &config.occluders) {
        let true_cov = true_noise_cov(node, pose, config.noise_multiplier());
        let l = cholesky2x2(&true_cov).expect("noise covariance is positive definite");
        let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let mean = pose.position + l * z;
        let cov = reported_cov(&true_cov, &node.miscalibration, config.report_floor);
        Some(Detection {
            view: node.id.clone(),
            gaussian: Gaussian2D::new(mean, cov).expect("reported covariance is floored"),
        })
    } else if rng.random_bool(config.invisible_emit_prob) {
        Some(Detection {
            view: node.id.clone(),
            gaussian: Gaussian2D::isotropic(config.arena.center(), config.fallback_std.powi(2))
                .expect("fallback std is positive"),
        })
    } else {
        None
    }
}

/// A frame of detections and the ground truth at its timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: DetectionFrame,
    pub truth: ObjectPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Simulates the whole scenario and splits it contiguously into
/// train, val and test.
///
/// RNG stream 0 drives the trajectory; detection `(k, j)` for frame `k` and
/// node `j` uses stream `1 + k·nodes + j`.
pub fn build_dataset(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trajectory = generate_trajectory(config, &mut rng)?;
    let n_nodes = config.nodes.len() as u64;

    let samples: Vec<Sample> = trajectory
        .samples
        .par_iter()
        .enumerate()
        .map(|(k, (t, pose))| {
            let detections = config
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(j, node)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(1 + k as u64 * n_nodes + j as u64);
                    simulate_detection(node, pose, config, &mut rng)
                })
                .collect();
            Sample {
                frame: DetectionFrame { t: *t, detections },
                truth: *pose,
            }
        })
        .collect();

    let n = samples.len();
    let n_train = ((config.split.0 * n as f64).round() as usize).min(n);
    let n_val = ((config.split.1 * n as f64).round() as usize).min(n - n_train);
    let mut rest = samples;
    let test = rest.split_off(n_train + n_val);
    let val = rest.split_off(n_train);
    Ok(Dataset {
        train: rest,
        val,
        test,
    })
}
