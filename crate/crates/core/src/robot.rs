//! Ground-truth multi-segment continuum robot.
//!
//! Each segment bends with a constant curvature `u = [u_x, u_y, 0]` and the
//! material frame obeys `R' = R[u]×`, `p' = R e₃` along arc length. Segments
//! are chained: the end frame of one segment is the start frame of the next.
//! The integration is RK4 with the rotation re-orthonormalised after every
//! step.

use crate::error::{Error, Result};
use crate::tensor::Rng;
use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// RK4 steps per segment used by the simulator, independent of output grid.
pub const GROUND_TRUTH_STEPS_PER_SEGMENT: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub n_segments: usize,
    /// Length of every segment, metres.
    pub segment_lengths: Vec<f64>,
    /// Curvature bound `u_max`, rad/m.
    pub curvature_bound: f64,
    /// Strength of the actuation-to-curvature mismatch (0 disables it).
    pub mismatch_amplitude: f64,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    /// Tip drop per gram of payload as a fraction of the robot length.
    pub payload_compliance: f64,
}

impl RobotConfig {
    /// Defaults: 0.1 m segments, `u_max = 15`, actions in `[−u_max, u_max]`.
    pub fn with_segments(n_segments: usize) -> Self {
        let u_max = 15.0;
        Self {
            n_segments,
            segment_lengths: vec![0.1; n_segments],
            curvature_bound: u_max,
            mismatch_amplitude: 0.1,
            q_min: vec![-u_max; 2 * n_segments],
            q_max: vec![u_max; 2 * n_segments],
            payload_compliance: 0.0015,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=4).contains(&self.n_segments) {
            return bad(format!("n_segments must be 1..=4, got {}", self.n_segments));
        }
        if self.segment_lengths.len() != self.n_segments
            || self.segment_lengths.iter().any(|&l| !(l > 0.0))
        {
            return bad("segment lengths must be positive, one per segment".into());
        }
        if !(self.curvature_bound > 0.0) {
            return bad("curvature bound must be positive".into());
        }
        if !(self.mismatch_amplitude >= 0.0) || !(self.payload_compliance >= 0.0) {
            return bad("mismatch amplitude and payload compliance must be ≥ 0".into());
        }
        let dim = self.action_dim();
        if self.q_min.len() != dim || self.q_max.len() != dim {
            return bad(format!("action bounds must have {dim} channels"));
        }
        if self
            .q_min
            .iter()
            .zip(&self.q_max)
            .any(|(lo, hi)| !(lo < hi))
        {
            return bad("q_min must be below q_max on every channel".into());
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        2 * self.n_segments
    }

    pub fn total_length(&self) -> f64 {
        self.segment_lengths.iter().sum()
    }

    /// Stable 64-bit FNV-1a fingerprint of every field.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn check_action(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.action_dim() {
            return Err(Error::Dimension(format!(
                "action has {} channels, robot needs {}",
                q.len(),
                self.action_dim()
            )));
        }
        for (i, ((&v, lo), hi)) in q.iter().zip(&self.q_min).zip(&self.q_max).enumerate() {
            if !(v >= *lo && v <= *hi) {
                return Err(Error::Contract(format!(
                    "action channel {i} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Orientation and position of the material frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl FramePose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
        }
    }
}

/// Backbone positions on an arc-length grid, base first.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneShape {
    pub points: Vec<Vector3<f64>>,
    pub arc_lengths: Vec<f64>,
}

impl BackboneShape {
    pub fn tip(&self) -> Vector3<f64> {
        *self
            .points
            .last()
            .expect("backbone has at least the base point")
    }

    pub fn polyline_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

/// A generated training example.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub action: Vec<f64>,
    pub curvatures: Vec<Vector3<f64>>,
    pub lengths: Vec<f64>,
    pub shape: BackboneShape,
}

/// A point obstacle with a squared-distance clearance threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub center: [f64; 3],
    pub threshold_sq: f64,
}

impl ObstacleSpec {
    pub const DEFAULT_THRESHOLD_SQ: f64 = 0.01;

    pub fn new(center: [f64; 3], threshold_sq: f64) -> Result<Self> {
        if !(threshold_sq > 0.0) {
            return Err(Error::Config(format!(
                "obstacle threshold {threshold_sq} must be positive"
            )));
        }
        Ok(Self {
            center,
            threshold_sq,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Obstacle above the reference plane at `distance` from both the
    /// default circle and square paths.
    pub fn near_reference_paths(cfg: &RobotConfig, distance: f64) -> Result<Self> {
        let t = Trajectory::new(TrajectoryKind::Circle, cfg);
        let (r, a) = (t.radius, t.side / 2.0);
        let gap = (r - a) / 2.0;
        if !(distance > gap) {
            return Err(Error::Config(format!(
                "obstacle distance must exceed {gap} m"
            )));
        }
        let lift = (distance * distance - gap * gap).sqrt();
        Self::new(
            [t.center[0] + (r + a) / 2.0, t.center[1], t.center[2] + lift],
            Self::DEFAULT_THRESHOLD_SQ,
        )
    }
}

/// Curvature commanded by each segment's `(q_x, q_y)` pair.
///
/// The nominal map is the identity saturated at `u_max`. With `mismatch`
/// on, the saturated command is perturbed by
/// `A·u_max·[sin(q_x/u_max)·q_y/u_max, sin(q_y/u_max)·q_x/u_max]` and
/// re-saturated; the perturbation vanishes at `q = 0`.
pub fn action_to_curvature(
    q: &[f64],
    cfg: &RobotConfig,
    mismatch: bool,
) -> Result<Vec<Vector3<f64>>> {
    cfg.check_action(q)?;
    let u_max = cfg.curvature_bound;
    let clamp = |v: [f64; 2]| {
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if n > u_max {
            [v[0] * u_max / n, v[1] * u_max / n]
        } else {
            v
        }
    };
    Ok(q.chunks_exact(2)
        .map(|c| {
            let mut v = clamp([c[0], c[1]]);
            if mismatch && cfg.mismatch_amplitude > 0.0 {
                let a = cfg.mismatch_amplitude * u_max;
                let (x, y) = (v[0] / u_max, v[1] / u_max);
                v = clamp([v[0] + a * x.sin() * y, v[1] + a * y.sin() * x]);
            }
            Vector3::new(v[0], v[1], 0.0)
        })
        .collect())
}

fn skew(u: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// Two Newton iterations towards the nearest rotation.
fn reorthonormalize(r: &mut Matrix3<f64>) {
    for _ in 0..2 {
        *r = *r * (Matrix3::identity() * 1.5 - r.transpose() * *r * 0.5);
    }
}

/// Integrates the chained backbone for per-segment constant curvatures.
///
/// Returns the shape sampled every `points_per_segment`-th of each segment
/// and the frame at every sampled point.
pub fn integrate_backbone(
    curvatures: &[Vector3<f64>],
    lengths: &[f64],
    points_per_segment: usize,
) -> Result<(BackboneShape, Vec<FramePose>)> {
    if curvatures.len() != lengths.len() || points_per_segment == 0 {
        return Err(Error::Dimension(format!(
            "{} curvatures for {} segments, {points_per_segment} points each",
            curvatures.len(),
            lengths.len()
        )));
    }
    let substeps = GROUND_TRUTH_STEPS_PER_SEGMENT
        .div_ceil(points_per_segment)
        .max(1);
    let mut pose = FramePose::identity();
    let mut s = 0.0;
    let mut points = vec![pose.position];
    let mut arcs = vec![0.0];
    let mut frames = vec![pose.clone()];
    let e3 = Vector3::z();
    for (u, &len) in curvatures.iter().zip(lengths) {
        let ux = skew(u);
        let h = len / (points_per_segment * substeps) as f64;
        for j in 0..points_per_segment {
            for _ in 0..substeps {
                // (R, p)' = (R[u]×, R e₃); u is constant on the segment.
                let r = pose.rotation;
                let d = |r: &Matrix3<f64>| (r * ux, r * e3);
                let (k1r, k1p) = d(&r);
                let (k2r, k2p) = d(&(r + k1r * (0.5 * h)));
                let (k3r, k3p) = d(&(r + k2r * (0.5 * h)));
                let (k4r, k4p) = d(&(r + k3r * h));
                pose.rotation = r + (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (h / 6.0);
                pose.position += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
                reorthonormalize(&mut pose.rotation);
            }
            if !pose.position.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("backbone integration diverged".into()));
            }
            points.push(pose.position);
            arcs.push(s + len * (j + 1) as f64 / points_per_segment as f64);
            frames.push(pose.clone());
        }
        s += len;
    }
    Ok((
        BackboneShape {
            points,
            arc_lengths: arcs,
        },
        frames,
    ))
}

/// Ground-truth backbone for action `q`, mismatch applied when the config
/// carries a nonzero amplitude.
pub fn forward_kinematics(
    q: &[f64],
    cfg: &RobotConfig,
    points_per_segment: usize,
) -> Result<BackboneShape> {
    let u = action_to_curvature(q, cfg, cfg.mismatch_amplitude > 0.0)?;
    Ok(integrate_backbone(&u, &cfg.segment_lengths, points_per_segment)?.0)
}

/// Uniform actions within bounds, shapes from the (mismatched) simulator.
pub fn sample_dataset(
    rng: &mut Rng,
    cfg: &RobotConfig,
    n_samples: usize,
    points_per_segment: usize,
) -> Result<Vec<ShapeSample>> {
    cfg.validate()?;
    (0..n_samples)
        .map(|_| {
            let action: Vec<f64> = cfg
                .q_min
                .iter()
                .zip(&cfg.q_max)
                .map(|(&lo, &hi)| rng.gen_range(lo..hi))
                .collect();
            let curvatures = action_to_curvature(&action, cfg, true)?;
            let (shape, _) =
                integrate_backbone(&curvatures, &cfg.segment_lengths, points_per_segment)?;
            Ok(ShapeSample {
                action,
                curvatures,
                lengths: cfg.segment_lengths.clone(),
                shape,
            })
        })
        .collect()
}

/// Cantilever-profile downward drop proportional to payload mass.
///
/// A point at arc-length fraction σ drops by `c·m·L·σ²(3−σ)/2` along −z.
pub fn apply_payload(
    shape: &BackboneShape,
    grams: f64,
    cfg: &RobotConfig,
) -> Result<BackboneShape> {
    if !(grams >= 0.0) {
        return Err(Error::Contract(format!("payload {grams} g is negative")));
    }
    if grams == 0.0 {
        return Ok(shape.clone());
    }
    let total = cfg.total_length();
    let tip_drop = cfg.payload_compliance * grams * total;
    let mut out = shape.clone();
    for (p, &s) in out.points.iter_mut().zip(&shape.arc_lengths) {
        let sigma = s / total;
        p.z -= tip_drop * sigma * sigma * (3.0 - sigma) / 2.0;
    }
    Ok(out)
}

/// Smallest distance from any backbone point to the obstacle centre.
pub fn min_obstacle_distance(shape: &BackboneShape, obs: &ObstacleSpec) -> f64 {
    let o = obs.center();
    shape
        .points
        .iter()
        .map(|p| (p - o).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Whether the backbone is inside the obstacle's clearance threshold.
pub fn violates_clearance(shape: &BackboneShape, obs: &ObstacleSpec) -> bool {
    min_obstacle_distance(shape, obs).powi(2) < obs.threshold_sq
}

/// The simulated robot the controllers act on.
#[derive(Clone, Debug)]
pub struct GroundTruthRobot {
    pub cfg: RobotConfig,
    pub payload_grams: f64,
    pub points_per_segment: usize,
}

impl GroundTruthRobot {
    pub fn new(cfg: RobotConfig, points_per_segment: usize) -> Self {
        Self {
            cfg,
            payload_grams: 0.0,
            points_per_segment,
        }
    }

    pub fn with_payload(mut self, grams: f64) -> Result<Self> {
        if !(grams >= 0.0) {
            return Err(Error::Contract(format!("payload {grams} g is negative")));
        }
        self.payload_grams = grams;
        Ok(self)
    }

    pub fn shape(&self, q: &[f64]) -> Result<BackboneShape> {
        let s = forward_kinematics(q, &self.cfg, self.points_per_segment)?;
        apply_payload(&s, self.payload_grams, &self.cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Circle,
    Square,
    SShape,
    Ellipse,
    Helix,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 5] = [
        TrajectoryKind::Circle,
        TrajectoryKind::Square,
        TrajectoryKind::SShape,
        TrajectoryKind::Ellipse,
        TrajectoryKind::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Circle => "circle",
            TrajectoryKind::Square => "square",
            TrajectoryKind::SShape => "s-shape",
            TrajectoryKind::Ellipse => "ellipse",
            TrajectoryKind::Helix => "helix",
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown trajectory {s:?}")))
    }
}

/// A closed (or, for the helix, rising) reference path for the tip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    /// Duration of one traversal, seconds.
    pub period: f64,
    pub center: [f64; 3],
    pub radius: f64,
    pub side: f64,
    pub s_amplitudes: [f64; 2],
    pub ellipse_axes: [f64; 2],
    pub helix_rise: f64,
}

impl Trajectory {
    /// Default geometry centred 2 cm below the straight robot's tip.
    pub fn new(kind: TrajectoryKind, cfg: &RobotConfig) -> Self {
        Self {
            kind,
            period: 100.0,
            center: [0.0, 0.0, cfg.total_length() - 0.02],
            radius: 0.05,
            side: 0.06,
            s_amplitudes: [0.03, 0.05],
            ellipse_axes: [0.05, 0.03],
            helix_rise: 0.02,
        }
    }

    /// Reference point at time `t ∈ [0, period]`.
    pub fn at(&self, t: f64) -> Result<Vector3<f64>> {
        if !(t >= 0.0 && t <= self.period) {
            return Err(Error::Contract(format!(
                "time {t} outside [0, {}]",
                self.period
            )));
        }
        let phase = 2.0 * std::f64::consts::PI * t / self.period;
        let c = Vector3::from(self.center);
        let offset = match self.kind {
            TrajectoryKind::Circle => {
                Vector3::new(self.radius * phase.cos(), self.radius * phase.sin(), 0.0)
            }
            TrajectoryKind::Ellipse => Vector3::new(
                self.ellipse_axes[0] * phase.cos(),
                self.ellipse_axes[1] * phase.sin(),
                0.0,
            ),
            TrajectoryKind::SShape => Vector3::new(
                self.s_amplitudes[0] * phase.cos(),
                self.s_amplitudes[1] * (2.0 * phase).sin(),
                0.0,
            ),
            TrajectoryKind::Helix => Vector3::new(
                self.radius * phase.cos(),
                self.radius * phase.sin(),
                self.helix_rise * (t / self.period - 1.0),
            ),
            TrajectoryKind::Square => {
                // Counter-clockwise from the (+x, +y) corner at constant speed.
                let a = self.side / 2.0;
                let corners = [
                    Vector3::new(a, a, 0.0),
                    Vector3::new(-a, a, 0.0),
                    Vector3::new(-a, -a, 0.0),
                    Vector3::new(a, -a, 0.0),
                ];
                let s = 4.0 * t / self.period;
                let edge = (s.floor() as usize).min(3);
                let frac = s - edge as f64;
                let from = corners[edge];
                let to = corners[(edge + 1) % 4];
                from + (to - from) * frac
            }
        };
        Ok(c + offset)
    }
}

/// Writes samples as CSV: `q0…, len0…, px0, py0, pz0, …` with 17
/// significant digits.
pub fn write_dataset<W: Write>(out: W, samples: &[ShapeSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = samples.first() {
        let mut header: Vec<String> = (0..first.action.len()).map(|i| format!("q{i}")).collect();
        header.extend((0..first.lengths.len()).map(|i| format!("len{i}")));
        for j in 0..first.shape.points.len() {
            header.extend([format!("px{j}"), format!("py{j}"), format!("pz{j}")]);
        }
        w.write_record(&header)?;
    }
    for s in samples {
        let mut rec: Vec<String> = s.action.iter().map(|v| fmt17(*v)).collect();
        rec.extend(s.lengths.iter().map(|v| fmt17(*v)));
        for p in &s.shape.points {
            rec.extend(p.iter().map(|v| fmt17(*v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Formats with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a dataset written by [`write_dataset`] for the given robot.
pub fn read_dataset<R: Read>(input: R, cfg: &RobotConfig) -> Result<Vec<ShapeSample>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let n_q = header.iter().filter(|h| h.starts_with('q')).count();
    let n_len = header.iter().filter(|h| h.starts_with("len")).count();
    if n_q != cfg.action_dim() || n_len != cfg.n_segments {
        return Err(Error::Config(format!(
            "dataset has {n_q} action and {n_len} length columns; robot has {} segments",
            cfg.n_segments
        )));
    }
    let n_coords = header.len() - n_q - n_len;
    if n_coords % 3 != 0 || (n_coords / 3 - 1) % cfg.n_segments != 0 {
        return Err(Error::Format(format!("{n_coords} coordinate columns")));
    }
    let per_segment = (n_coords / 3 - 1) / cfg.n_segments;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let action = vals[..n_q].to_vec();
        let lengths = vals[n_q..n_q + n_len].to_vec();
        let points: Vec<Vector3<f64>> = vals[n_q + n_len..]
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let mut arcs = vec![0.0];
        let mut s = 0.0;
        for &l in &lengths {
            arcs.extend((1..=per_segment).map(|j| s + l * j as f64 / per_segment as f64));
            s += l;
        }
        let curvatures = action_to_curvature(&action, cfg, true)?;
        out.push(ShapeSample {
            action,
            curvatures,
            lengths,
            shape: BackboneShape {
                points,
                arc_lengths: arcs,
            },
        });
    }
    Ok(out)
}
