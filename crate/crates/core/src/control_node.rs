//! Control-NODE: a neural ODE policy over a finite horizon.
//!
//! The policy state is the unbounded pre-action `z`; the applied action is
//! `q = q_min + (tanh z + 1)/2 · (q_max − q_min)`, so bounds hold for every
//! state. The derivative `dz/dt = rate · π_θ(obs)` depends on an observation
//! built from the Shape-NODE prediction at the current horizon step (shape
//! refreshed once per step, action refreshed at every solver stage).

use crate::error::{Error, Result};
use crate::metrics::{AxisStats, HistoryRow, LossHistory};
use crate::odeint::{integrate, IntegrationGrid, SolverKind};
use crate::robot::{
    fmt17, min_obstacle_distance, BackboneShape, GroundTruthRobot, ObstacleSpec, RobotConfig,
    Trajectory,
};
use crate::shape_node::ShapeNodeModel;
use crate::tensor::{
    adam_step, gaussian_sample, load_json, mlp_forward, save_json, seeded_rng, Activation,
    AdamConfig, MlpParams, MlpVars, Rng, Tape, Tensor, Var,
};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Backbone points in the observation, equally spaced in arc length.
pub const SHAPE_POINTS: usize = 9;
const FILE_KIND: &str = "control-node";
/// `|tanh z|` never exceeds this when converting actions back to `z`.
const TANH_CAP: f64 = 1.0 - 1e-12;

/// `3·9 + 3 + dim(q) + 3`; 39 for three segments.
pub fn observation_dim(n_segments: usize) -> usize {
    3 * SHAPE_POINTS + 3 + 2 * n_segments + 3
}

/// `q = q_min + (tanh(raw) + 1)/2 · (q_max − q_min)` elementwise.
pub fn bound_actions(raw: &[f64], q_min: &[f64], q_max: &[f64]) -> Vec<f64> {
    raw.iter()
        .zip(q_min.iter().zip(q_max))
        .map(|(&z, (&lo, &hi))| {
            let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
            mid + half * z.tanh()
        })
        .collect()
}

/// Inverse of [`bound_actions`], saturating just inside the bounds.
pub fn unbound_actions(q: &[f64], q_min: &[f64], q_max: &[f64]) -> Vec<f64> {
    q.iter()
        .zip(q_min.iter().zip(q_max))
        .map(|(&v, (&lo, &hi))| {
            let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
            ((v - mid) / half).clamp(-TANH_CAP, TANH_CAP).atanh()
        })
        .collect()
}

/// Clamps into the open action box, a relative `1e-9` inside each bound.
pub fn clamp_inside(q: &mut [f64], robot: &RobotConfig) {
    for ((v, &lo), &hi) in q.iter_mut().zip(&robot.q_min).zip(&robot.q_max) {
        let eps = 1e-9 * (hi - lo);
        *v = v.clamp(lo + eps, hi - eps);
    }
}

/// Segment index and weight of every downsampled point on an arc grid.
pub fn downsample_weights(arc_lengths: &[f64]) -> Result<Vec<(usize, f64)>> {
    if arc_lengths.len() < 2 {
        return Err(Error::Dimension("shape needs at least two points".into()));
    }
    let total = arc_lengths[arc_lengths.len() - 1];
    Ok((1..=SHAPE_POINTS)
        .map(|j| {
            let s = total * j as f64 / SHAPE_POINTS as f64;
            let i = arc_lengths
                .iter()
                .rposition(|&a| a <= s)
                .unwrap_or(0)
                .min(arc_lengths.len() - 2);
            let w = ((s - arc_lengths[i]) / (arc_lengths[i + 1] - arc_lengths[i])).clamp(0.0, 1.0);
            (i, w)
        })
        .collect())
}

/// The observed backbone at arc-length fractions `1/9, …, 9/9`.
pub fn downsample(shape: &BackboneShape) -> Result<Vec<Vector3<f64>>> {
    Ok(downsample_weights(&shape.arc_lengths)?
        .into_iter()
        .map(|(i, w)| shape.points[i] * (1.0 - w) + shape.points[i + 1] * w)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlNodeModel {
    pub params: MlpParams,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub horizon: usize,
    pub dt: f64,
    pub rate_scale: f64,
    pub solver: SolverKind,
    /// Observation normalisation `obs·scale + offset`.
    pub input_scale: Vec<f64>,
    pub input_offset: Vec<f64>,
    pub robot: RobotConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub obstacle_weight: f64,
    /// Temperature of the smooth obstacle surrogate used in training.
    pub obstacle_tau: f64,
    pub noise_std: f64,
}

impl Default for ControlLossConfig {
    fn default() -> Self {
        Self {
            alpha: 5000.0,
            beta: 100.0,
            gamma: 200.0,
            lambda: 1000.0,
            obstacle_weight: 100.0,
            obstacle_tau: 1e-3,
            noise_std: 0.00033,
        }
    }
}

impl ControlLossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.alpha,
            self.beta,
            self.gamma,
            self.lambda,
            self.obstacle_weight,
            self.noise_std,
        ];
        if w.iter().any(|&v| !(v >= 0.0)) || !(self.obstacle_tau > 0.0) {
            return Err(Error::Config(format!("invalid loss settings {self:?}")));
        }
        Ok(())
    }
}

/// A rollout recorded on a tape; index 0 is the initial state.
#[derive(Clone, Debug)]
pub struct TapeRollout {
    pub z: Vec<Var>,
    pub q: Vec<Var>,
    pub tips: Vec<Var>,
    /// Downsampled backbone, [`SHAPE_POINTS`] `B × 3` entries per step.
    pub shapes: Vec<Vec<Var>>,
    /// Every predicted grid point, base first.
    pub backbones: Vec<Vec<Var>>,
}

/// One evaluated episode; vectors run over `t₁ … t_M`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub q0: Vec<f64>,
    pub tip0: Vector3<f64>,
    pub shape0: Vec<Vector3<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub tips: Vec<Vector3<f64>>,
    pub shapes: Vec<Vec<Vector3<f64>>>,
    pub backbones: Vec<Vec<Vector3<f64>>>,
    /// `(q_max − q_min)/2`, the unit of the action-rate term.
    pub action_half_range: Vec<f64>,
    pub step_losses: Vec<f64>,
}

struct StepObservation {
    tip: Var,
    shape: Vec<Var>,
    backbone: Vec<Var>,
    q: Var,
}

impl ControlNodeModel {
    /// Glorot-initialised policy for `robot`, default horizon 10 and `dt = 1`.
    pub fn new(robot: &RobotConfig, hidden: [usize; 2], seed: u64) -> Result<Self> {
        robot.validate()?;
        let n_obs = observation_dim(robot.n_segments);
        let n_q = robot.action_dim();
        let params = MlpParams::init(&mut seeded_rng(seed), n_obs, hidden, n_q);
        let length = robot.total_length();
        let pos_scale = 2.0 / length;
        let mut input_scale = Vec::with_capacity(n_obs);
        let mut input_offset = Vec::with_capacity(n_obs);
        let push_point = |s: &mut Vec<f64>, o: &mut Vec<f64>| {
            s.extend([pos_scale; 3]);
            o.extend([0.0, 0.0, -length / 2.0 * pos_scale]);
        };
        for _ in 0..SHAPE_POINTS + 1 {
            push_point(&mut input_scale, &mut input_offset);
        }
        for (lo, hi) in robot.q_min.iter().zip(&robot.q_max) {
            let half = (hi - lo) / 2.0;
            input_scale.push(1.0 / half);
            input_offset.push(-(lo + hi) / 2.0 / half);
        }
        push_point(&mut input_scale, &mut input_offset);
        Ok(Self {
            params,
            q_min: robot.q_min.clone(),
            q_max: robot.q_max.clone(),
            horizon: 10,
            dt: 1.0,
            rate_scale: 1.0,
            solver: SolverKind::Rk4,
            input_scale,
            input_offset,
            robot: robot.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.params.validate()?;
        let n_obs = observation_dim(self.robot.n_segments);
        let n_q = self.robot.action_dim();
        if self.params.input_width() != n_obs || self.params.output_width() != n_q {
            return Err(Error::Dimension(format!("policy must be {n_obs} → {n_q}")));
        }
        if self.q_min.len() != n_q
            || self.q_max.len() != n_q
            || self.q_min.iter().zip(&self.q_max).any(|(a, b)| !(a < b))
        {
            return Err(Error::Config("policy action bounds are invalid".into()));
        }
        if self.input_scale.len() != n_obs || self.input_offset.len() != n_obs {
            return Err(Error::Dimension("observation normalisation width".into()));
        }
        if self.horizon == 0 || !(self.dt > 0.0) || !(self.rate_scale > 0.0) {
            return Err(Error::Config(
                "horizon, dt and rate scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn half_range(&self) -> Vec<f64> {
        self.q_min
            .iter()
            .zip(&self.q_max)
            .map(|(lo, hi)| (hi - lo) / 2.0)
            .collect()
    }

    fn mid(&self) -> Vec<f64> {
        self.q_min
            .iter()
            .zip(&self.q_max)
            .map(|(lo, hi)| (hi + lo) / 2.0)
            .collect()
    }

    /// The solver used for `steps` steps: Adams-Bashforth starts with RK4,
    /// so shorter runs coincide with RK4.
    fn solver_for(&self, steps: usize) -> SolverKind {
        if steps < self.solver.min_steps() {
            SolverKind::Rk4
        } else {
            self.solver
        }
    }

    /// Records `q = bound(z)`.
    pub fn bound_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let t = tape.tanh(z)?;
        tape.col_affine(t, &self.half_range(), &self.mid())
    }

    /// Records `rate · π_θ(obs + noise)`.
    fn rate(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        parts: &[Var],
        noise: Option<Var>,
    ) -> Result<Var> {
        let mut obs = tape.concat(parts)?;
        if let Some(n) = noise {
            obs = tape.add(obs, n)?;
        }
        let x = tape.col_affine(obs, &self.input_scale, &self.input_offset)?;
        let y = mlp_forward(tape, vars, x, Activation::LeakyRelu, Activation::Tanh)?;
        tape.scale(y, self.rate_scale)
    }

    fn observe(
        &self,
        tape: &mut Tape,
        shape: &ShapeNodeModel,
        svars: &MlpVars,
        z: Var,
        weights: &[(usize, f64)],
    ) -> Result<StepObservation> {
        let q = self.bound_on_tape(tape, z)?;
        let b = tape.value(z).rows();
        let trace = shape.record(tape, svars, q, None)?;
        let mut backbone = vec![tape.constant(Tensor::zeros(&[b, 3]))];
        backbone.extend(trace.uniform_points(tape)?);
        let mut ds = Vec::with_capacity(SHAPE_POINTS);
        for &(i, w) in weights {
            ds.push(tape.lincomb(&[(1.0 - w, backbone[i]), (w, backbone[i + 1])])?);
        }
        Ok(StepObservation {
            tip: *backbone.last().expect("non-empty"),
            shape: ds,
            backbone,
            q,
        })
    }

    /// Records an `horizon`-step rollout for a batch of start actions and
    /// constant goals. `noise[k]` (`B × obs`) perturbs every observation of
    /// step `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn record_rollout(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        shape: &ShapeNodeModel,
        svars: &MlpVars,
        q0: &Tensor,
        goal: &Tensor,
        noise: Option<&[Tensor]>,
        horizon: usize,
    ) -> Result<TapeRollout> {
        if shape.robot.n_segments != self.robot.n_segments {
            return Err(Error::Config(
                "policy and shape model are for different robots".into(),
            ));
        }
        let b = q0.rows();
        if q0.cols() != self.robot.action_dim() || goal.rows() != b || goal.cols() != 3 {
            return Err(Error::Dimension(
                "start actions and goals do not match the batch".into(),
            ));
        }
        if let Some(n) = noise {
            if n.len() < horizon
                || n.iter()
                    .any(|t| t.rows() != b || t.cols() != observation_dim(self.robot.n_segments))
            {
                return Err(Error::Dimension(
                    "observation noise does not match rollout".into(),
                ));
            }
        }
        let arcs = shape_arcs(shape);
        let weights = downsample_weights(&arcs)?;
        let z0 = Tensor::from_fn(b, q0.cols(), |i, j| {
            unbound_actions(q0.row(i), &self.q_min, &self.q_max)[j]
        });
        let z0 = tape.constant(z0);
        let goal = tape.constant(goal.clone());
        let noise_vars: Option<Vec<Var>> = noise.map(|n| {
            n[..horizon]
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect()
        });
        let mut cache: Vec<StepObservation> = Vec::with_capacity(horizon + 1);
        let grid = IntegrationGrid::with_step(0.0, self.dt, horizon)?;
        let f = |tape: &mut Tape, x: &Var, stage: crate::odeint::Stage| {
            if cache.len() == stage.step {
                let o = self.observe(tape, shape, svars, *x, &weights)?;
                cache.push(o);
            }
            let q = self.bound_on_tape(tape, *x)?;
            let o = &cache[stage.step];
            let mut parts = o.shape.clone();
            parts.extend([o.tip, q, goal]);
            let n = noise_vars.as_ref().map(|n| n[stage.step]);
            self.rate(tape, vars, &parts, n)
        };
        let z = integrate(tape, f, z0, &grid, self.solver_for(horizon))?;
        let last = self.observe(tape, shape, svars, z[horizon], &weights)?;
        cache.push(last);
        Ok(TapeRollout {
            z,
            q: cache.iter().map(|o| o.q).collect(),
            tips: cache.iter().map(|o| o.tip).collect(),
            shapes: cache.iter().map(|o| o.shape.clone()).collect(),
            backbones: cache.into_iter().map(|o| o.backbone).collect(),
        })
    }

    /// One episode from `q0` toward the constant `goal`.
    pub fn rollout_policy(
        &self,
        shape: &ShapeNodeModel,
        q0: &[f64],
        goal: Vector3<f64>,
        noise: Option<&mut Rng>,
        loss: &ControlLossConfig,
        obstacle: Option<&ObstacleSpec>,
    ) -> Result<RolloutResult> {
        self.robot.check_action(q0)?;
        let m = self.horizon;
        let noise = match noise {
            Some(rng) => Some(
                (0..m)
                    .map(|_| {
                        gaussian_sample(
                            rng,
                            0.0,
                            loss.noise_std,
                            [1, observation_dim(self.robot.n_segments)],
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let svars = shape.params.attach(&mut tape, false);
        let r = self.record_rollout(
            &mut tape,
            &vars,
            shape,
            &svars,
            &Tensor::row_vector(q0),
            &Tensor::row_vector(goal.as_slice()),
            noise.as_deref(),
            m,
        )?;
        let v3 = |v: Var| {
            let d = tape.value(v).data();
            Vector3::new(d[0], d[1], d[2])
        };
        let mut result = RolloutResult {
            q0: q0.to_vec(),
            tip0: v3(r.tips[0]),
            shape0: r.shapes[0].iter().map(|&v| v3(v)).collect(),
            actions: r.q[1..]
                .iter()
                .map(|&v| tape.value(v).data().to_vec())
                .collect(),
            tips: r.tips[1..].iter().map(|&v| v3(v)).collect(),
            shapes: r.shapes[1..]
                .iter()
                .map(|s| s.iter().map(|&v| v3(v)).collect())
                .collect(),
            backbones: r.backbones[1..]
                .iter()
                .map(|s| s.iter().map(|&v| v3(v)).collect())
                .collect(),
            action_half_range: self.half_range(),
            step_losses: Vec::new(),
        };
        result.step_losses = step_losses(&result, goal, loss, obstacle);
        Ok(result)
    }

    /// The first action of a rollout whose initial observation is `observed`
    /// (the only step that reaches the plant under receding-horizon control).
    pub fn first_action(
        &self,
        observed: &BackboneShape,
        q: &[f64],
        goal: Vector3<f64>,
        noise: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.robot.check_action(q)?;
        let ds = downsample(observed)?;
        let mut fixed: Vec<f64> = ds.iter().flat_map(|p| p.iter().copied()).collect();
        fixed.extend(observed.tip().iter());
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let fixed = tape.constant(Tensor::row_vector(&fixed));
        let goal = tape.constant(Tensor::row_vector(goal.as_slice()));
        let noise = noise.map(|n| tape.constant(Tensor::row_vector(n)));
        let z0 = tape.constant(Tensor::row_vector(&unbound_actions(
            q,
            &self.q_min,
            &self.q_max,
        )));
        let grid = IntegrationGrid::with_step(0.0, self.dt, 1)?;
        let f = |tape: &mut Tape, x: &Var, _| {
            let q = self.bound_on_tape(tape, *x)?;
            self.rate(tape, &vars, &[fixed, q, goal], noise)
        };
        let z = integrate(&mut tape, f, z0, &grid, self.solver_for(1))?;
        let q1 = self.bound_on_tape(&mut tape, z[1])?;
        Ok(tape.value(q1).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, FILE_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = load_json(path, FILE_KIND)?;
        m.validate()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(m)
    }
}

fn shape_arcs(shape: &ShapeNodeModel) -> Vec<f64> {
    let mut arcs = vec![0.0];
    let mut s = 0.0;
    for j in 0..shape.robot.n_segments {
        let h = shape.step_size(j);
        arcs.extend((1..=shape.steps_per_segment).map(|k| s + k as f64 * h));
        s += shape.steps_per_segment as f64 * h;
    }
    arcs
}

fn sq_row(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.mul(v, v)?;
    tape.row_sum(s)
}

/// Batch mean of the horizon loss.
///
/// Per step `k = 1…M`: `α‖x̂ₖ − g‖² + β‖(qₖ − qₖ₋₁)/half‖² + γ Σⱼ‖p̂ₖⱼ − p̂ₖ₋₁ⱼ‖²`,
/// plus `λ‖x̂_M − g‖²` and, with an obstacle, the smooth clearance penalty
/// `w·σ((threshold − min d²)/τ)` on every predicted backbone.
pub fn control_loss_on_tape(
    tape: &mut Tape,
    r: &TapeRollout,
    goal: &Tensor,
    half_range: &[f64],
    cfg: &ControlLossConfig,
    obstacle: Option<&ObstacleSpec>,
) -> Result<Var> {
    let m = r.tips.len() - 1;
    let b = goal.rows();
    let g = tape.constant(goal.clone());
    let inv_half: Vec<f64> = half_range.iter().map(|h| 1.0 / h).collect();
    let mut terms = Vec::new();
    for k in 1..=m {
        let e = tape.sub(r.tips[k], g)?;
        let track = sq_row(tape, e)?;
        terms.push((cfg.alpha + if k == m { cfg.lambda } else { 0.0 }, track));
        let dq = tape.sub(r.q[k], r.q[k - 1])?;
        let dq = tape.scale_cols(dq, &inv_half)?;
        terms.push((cfg.beta, sq_row(tape, dq)?));
        let mut diffs = Vec::with_capacity(SHAPE_POINTS);
        for (&a, &p) in r.shapes[k].iter().zip(&r.shapes[k - 1]) {
            diffs.push(tape.sub(a, p)?);
        }
        let d = tape.concat(&diffs)?;
        terms.push((cfg.gamma, sq_row(tape, d)?));
        if let Some(o) = obstacle {
            let neg_o: Vec<f64> = o.center.iter().map(|c| -c).collect();
            let mut dists = Vec::with_capacity(r.backbones[k].len());
            for &p in &r.backbones[k] {
                let rel = tape.col_affine(p, &[1.0; 3], &neg_o)?;
                dists.push(sq_row(tape, rel)?);
            }
            let all = tape.concat(&dists)?;
            let closest = tape.row_min(all)?;
            let inv = 1.0 / cfg.obstacle_tau;
            let arg = tape.col_affine(closest, &[-inv], &[o.threshold_sq * inv])?;
            terms.push((cfg.obstacle_weight, tape.sigmoid(arg)?));
        }
    }
    let per_row = tape.lincomb(&terms)?;
    let total = tape.sum_all(per_row)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Per-step contributions of the horizon loss with the hard clearance
/// indicator; the final step includes the terminal term.
pub fn step_losses(
    r: &RolloutResult,
    goal: Vector3<f64>,
    cfg: &ControlLossConfig,
    obstacle: Option<&ObstacleSpec>,
) -> Vec<f64> {
    let m = r.tips.len();
    (0..m)
        .map(|k| {
            let (prev_q, prev_shape) = if k == 0 {
                (&r.q0, &r.shape0)
            } else {
                (&r.actions[k - 1], &r.shapes[k - 1])
            };
            let track = (r.tips[k] - goal).norm_squared();
            let rate: f64 = r.actions[k]
                .iter()
                .zip(prev_q)
                .zip(&r.action_half_range)
                .map(|((a, b), h)| ((a - b) / h).powi(2))
                .sum();
            let consistency: f64 = r.shapes[k]
                .iter()
                .zip(prev_shape)
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            let mut l = cfg.alpha * track + cfg.beta * rate + cfg.gamma * consistency;
            if k + 1 == m {
                l += cfg.lambda * track;
            }
            if let Some(o) = obstacle {
                let c = o.center();
                let closest = r.backbones[k]
                    .iter()
                    .map(|p| (p - c).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                if closest < o.threshold_sq {
                    l += cfg.obstacle_weight;
                }
            }
            l
        })
        .collect()
}

/// The horizon loss of one episode with the hard clearance indicator.
pub fn control_loss(
    r: &RolloutResult,
    goal: Vector3<f64>,
    cfg: &ControlLossConfig,
    obstacle: Option<&ObstacleSpec>,
) -> f64 {
    step_losses(r, goal, cfg, obstacle).iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlScenario {
    Tracking,
    Obstacle,
}

impl std::str::FromStr for ControlScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracking" => Ok(Self::Tracking),
            "obstacle" => Ok(Self::Obstacle),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

impl std::fmt::Display for ControlScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tracking => "tracking",
            Self::Obstacle => "obstacle",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Reset actions are `U(−f, f)·u_max` per channel.
    pub reset_fraction: f64,
    /// Targets are the start tip plus `U(−r, r)` per axis, metres.
    pub target_radius: f64,
    pub scenario: ControlScenario,
    pub obstacle: Option<ObstacleSpec>,
    pub evaluate_every: u64,
    pub evaluation_episodes: usize,
}

impl Default for ControlTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            iterations: 10_000,
            learning_rate: 1e-3,
            seed: 0,
            reset_fraction: 0.2,
            target_radius: 0.03,
            scenario: ControlScenario::Tracking,
            obstacle: None,
            evaluate_every: 100,
            evaluation_episodes: 64,
        }
    }
}

impl ControlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.evaluate_every == 0 {
            return Err(Error::Config(
                "batch size, iterations and evaluation interval must be ≥ 1".into(),
            ));
        }
        if !(self.reset_fraction >= 0.0 && self.reset_fraction <= 1.0)
            || !(self.target_radius >= 0.0)
        {
            return Err(Error::Config(
                "reset fraction must lie in [0, 1], target radius ≥ 0".into(),
            ));
        }
        if self.scenario == ControlScenario::Obstacle && self.obstacle.is_none() {
            return Err(Error::Config("obstacle scenario needs an obstacle".into()));
        }
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
        .validate()
    }

    fn active_obstacle(&self) -> Option<&ObstacleSpec> {
        match self.scenario {
            ControlScenario::Obstacle => self.obstacle.as_ref(),
            ControlScenario::Tracking => None,
        }
    }
}

/// Start actions and constant goals for a batch of training episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Episodes {
    pub q0: Tensor,
    pub goals: Tensor,
}

/// Random resets around the zero action and goals near the resulting tips,
/// kept within the robot's reach.
pub fn sample_episodes(
    rng: &mut Rng,
    shape: &ShapeNodeModel,
    cfg: &ControlTrainConfig,
    n: usize,
) -> Result<Episodes> {
    let robot = &shape.robot;
    let u = cfg.reset_fraction * robot.curvature_bound;
    let actions: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut q: Vec<f64> = (0..robot.action_dim())
                .map(|_| if u > 0.0 { rng.gen_range(-u..u) } else { 0.0 })
                .collect();
            clamp_inside(&mut q, robot);
            q
        })
        .collect();
    let shapes = shape.predict_batch(&actions, None)?;
    let reach = 0.98 * robot.total_length();
    let r = cfg.target_radius;
    let goals: Vec<[f64; 3]> = shapes
        .iter()
        .map(|s| {
            let mut g = s.tip();
            for a in 0..3 {
                if r > 0.0 {
                    g[a] += rng.gen_range(-r..r);
                }
            }
            g.z = g.z.max(0.0);
            if g.norm() > reach {
                g *= reach / g.norm();
            }
            [g.x, g.y, g.z]
        })
        .collect();
    Ok(Episodes {
        q0: Tensor::from_rows(&actions)?,
        goals: Tensor::from_rows(&goals)?,
    })
}

/// Noise-free batch-mean loss of `policy` on fixed episodes.
pub fn evaluation_loss(
    policy: &ControlNodeModel,
    shape: &ShapeNodeModel,
    episodes: &Episodes,
    loss: &ControlLossConfig,
    obstacle: Option<&ObstacleSpec>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = policy.params.attach(&mut tape, false);
    let svars = shape.params.attach(&mut tape, false);
    let r = policy.record_rollout(
        &mut tape,
        &vars,
        shape,
        &svars,
        &episodes.q0,
        &episodes.goals,
        None,
        policy.horizon,
    )?;
    let l = control_loss_on_tape(
        &mut tape,
        &r,
        &episodes.goals,
        &policy.half_range(),
        loss,
        obstacle,
    )?;
    Ok(tape.value(l).data()[0])
}

pub struct ControlTraining {
    /// Parameters with the lowest evaluation loss.
    pub model: ControlNodeModel,
    /// Parameters and optimizer state after the final iteration.
    pub last: ControlNodeModel,
    pub history: LossHistory,
    pub best_val_loss: Option<f64>,
}

/// Trains the policy against the frozen Shape-NODE.
///
/// Each iteration draws fresh episodes and observation noise from
/// `(seed, iteration)`; `val_loss` records the noise-free loss on a fixed
/// evaluation batch, and the policy with the lowest `val_loss` is kept.
pub fn train_control_node(
    policy: ControlNodeModel,
    shape: &ShapeNodeModel,
    loss: &ControlLossConfig,
    cfg: &ControlTrainConfig,
    mut observe: impl FnMut(&HistoryRow),
) -> Result<ControlTraining> {
    cfg.validate()?;
    loss.validate()?;
    policy.validate()?;
    shape.validate()?;
    let obstacle = cfg.active_obstacle();
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let eval = sample_episodes(
        &mut seeded_rng(cfg.seed),
        shape,
        cfg,
        cfg.evaluation_episodes.max(1),
    )?;
    let n_obs = observation_dim(policy.robot.n_segments);
    let mut policy = policy;
    let mut history = LossHistory::default();
    let mut best: Option<(f64, ControlNodeModel)> = None;
    let start = policy.params.step_count;
    for it in start + 1..=cfg.iterations {
        let fail = |e: Error| Error::Training {
            iteration: it,
            reason: e.to_string(),
        };
        let mut rng = seeded_rng(cfg.seed);
        rng.set_stream(it);
        let ep = sample_episodes(&mut rng, shape, cfg, cfg.batch_size).map_err(fail)?;
        let noise = (0..policy.horizon)
            .map(|_| gaussian_sample(&mut rng, 0.0, loss.noise_std, [cfg.batch_size, n_obs]))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let vars = policy.params.attach(&mut tape, true);
        let svars = shape.params.attach(&mut tape, false);
        let value = (|| {
            let r = policy.record_rollout(
                &mut tape,
                &vars,
                shape,
                &svars,
                &ep.q0,
                &ep.goals,
                Some(&noise),
                policy.horizon,
            )?;
            let l = control_loss_on_tape(
                &mut tape,
                &r,
                &ep.goals,
                &policy.half_range(),
                loss,
                obstacle,
            )?;
            let value = tape.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value}")));
            }
            let grads = tape.backward(l)?;
            let g = policy.params.collect_grads(&grads, &vars);
            adam_step(&mut policy.params, &g, &adam)?;
            Ok(value)
        })()
        .map_err(fail)?;
        let val_loss = if it % cfg.evaluate_every == 0 || it == cfg.iterations {
            let v = evaluation_loss(&policy, shape, &eval, loss, obstacle).map_err(fail)?;
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, policy.clone()));
            }
            Some(v)
        } else {
            None
        };
        let row = HistoryRow {
            iteration: it,
            train_loss: value,
            val_loss,
        };
        observe(&row);
        history.rows.push(row);
    }
    let best_val_loss = best.as_ref().map(|(v, _)| *v);
    let model = best.map_or_else(|| policy.clone(), |(_, m)| m);
    Ok(ControlTraining {
        model,
        last: policy,
        history,
        best_val_loss,
    })
}

/// Options shared by the closed- and open-loop trackers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingOptions {
    /// Length of the logged run, seconds.
    pub duration: f64,
    /// Control period, seconds.
    pub tick: f64,
    /// Unlogged ticks spent reaching the first reference point.
    pub settle_ticks: usize,
    /// Standard deviation of the simulated camera noise on observations.
    pub noise_std: f64,
    pub seed: u64,
    pub obstacle: Option<ObstacleSpec>,
}

impl TrackingOptions {
    /// Full traversal of `traj` at 200 ticks per period.
    pub fn for_trajectory(traj: &Trajectory, seed: u64) -> Self {
        Self {
            duration: traj.period,
            tick: traj.period / 200.0,
            settle_ticks: 30,
            noise_std: 0.00033,
            seed,
            obstacle: None,
        }
    }

    fn n_ticks(&self, traj: &Trajectory) -> Result<usize> {
        if !(self.tick > 0.0) || !(self.duration >= 0.0) || self.duration > traj.period {
            return Err(Error::Config(format!(
                "tick {} and duration {} must fit the trajectory period {}",
                self.tick, self.duration, traj.period
            )));
        }
        Ok((self.duration / self.tick + 1e-9).floor() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingRow {
    pub t: f64,
    pub goal: Vector3<f64>,
    pub tip: Vector3<f64>,
    /// Tip position as seen by the controller after applying `q`.
    pub observed: Vector3<f64>,
    pub q: Vec<f64>,
    pub min_obstacle_dist: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackingLog {
    pub rows: Vec<TrackingRow>,
}

impl TrackingLog {
    /// CSV `t, gx, gy, gz, x, y, z, ox, oy, oz, q0…` plus `min_obstacle_dist` when an
    /// obstacle was present.
    pub fn write_csv<W: Write>(&self, out: W, n_actions: usize) -> Result<()> {
        let with_obstacle = self
            .rows
            .first()
            .is_some_and(|r| r.min_obstacle_dist.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["t", "gx", "gy", "gz", "x", "y", "z", "ox", "oy", "oz"]
            .map(String::from)
            .to_vec();
        header.extend((0..n_actions).map(|i| format!("q{i}")));
        if with_obstacle {
            header.push("min_obstacle_dist".into());
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![fmt17(r.t)];
            rec.extend(
                r.goal
                    .iter()
                    .chain(r.tip.iter())
                    .chain(r.observed.iter())
                    .map(|v| fmt17(*v)),
            );
            rec.extend(r.q.iter().map(|v| fmt17(*v)));
            if let Some(d) = r.min_obstacle_dist {
                rec.push(fmt17(d));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let n_q = header.iter().filter(|h| h.starts_with('q')).count();
        let with_obstacle = header.iter().any(|h| h == "min_obstacle_dist");
        if header.len() != 10 + n_q + usize::from(with_obstacle) {
            return Err(Error::Format("unexpected tracking log columns".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let v: Vec<f64> = rec?
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("{f:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            rows.push(TrackingRow {
                t: v[0],
                goal: Vector3::new(v[1], v[2], v[3]),
                tip: Vector3::new(v[4], v[5], v[6]),
                observed: Vector3::new(v[7], v[8], v[9]),
                q: v[10..10 + n_q].to_vec(),
                min_obstacle_dist: with_obstacle.then(|| v[10 + n_q]),
            });
        }
        Ok(Self { rows })
    }

    /// Ticks whose backbone came within the obstacle's clearance.
    pub fn violations(&self, obstacle: &ObstacleSpec) -> usize {
        self.rows
            .iter()
            .filter(|r| {
                r.min_obstacle_dist
                    .is_some_and(|d| d * d < obstacle.threshold_sq)
            })
            .count()
    }
}

/// Per-axis tip error statistics in millimetres pooled over all logs.
pub fn evaluate_tracking(logs: &[TrackingLog]) -> Result<AxisStats> {
    if logs.iter().all(|l| l.rows.is_empty()) {
        return Err(Error::Contract("no tracking rows to evaluate".into()));
    }
    let errors = logs.iter().flat_map(|l| &l.rows).map(|r| {
        let e = r.tip - r.goal;
        [e.x, e.y, e.z]
    });
    Ok(AxisStats::from_errors(errors).scaled(1000.0))
}

fn log_row(
    t: f64,
    goal: Vector3<f64>,
    shape: &BackboneShape,
    observed: Vector3<f64>,
    q: &[f64],
    obstacle: Option<&ObstacleSpec>,
) -> TrackingRow {
    TrackingRow {
        t,
        goal,
        tip: shape.tip(),
        observed,
        q: q.to_vec(),
        min_obstacle_dist: obstacle.map(|o| min_obstacle_distance(shape, o)),
    }
}

/// Receding-horizon tracking on the simulated robot.
///
/// Every tick observes the true backbone (plus camera noise), plans toward
/// the next reference point and applies only the first planned action.
pub fn closed_loop_track(
    policy: &ControlNodeModel,
    robot: &GroundTruthRobot,
    traj: &Trajectory,
    opts: &TrackingOptions,
) -> Result<TrackingLog> {
    let n = opts.n_ticks(traj)?;
    let mut rng = seeded_rng(opts.seed);
    let n_obs = observation_dim(policy.robot.n_segments);
    let mut q = bound_actions(
        &vec![0.0; policy.robot.action_dim()],
        &policy.q_min,
        &policy.q_max,
    );
    let mut shape = robot.shape(&q)?;
    let mut noise = gaussian_sample(&mut rng, 0.0, opts.noise_std, [1, n_obs])?;
    // Each camera reading is drawn once, right after the plant moves.
    let mut step =
        |q: &mut Vec<f64>, shape: &mut BackboneShape, noise: &mut Tensor, goal: Vector3<f64>| {
            *q = policy.first_action(shape, q, goal, Some(noise.data()))?;
            *shape = robot.shape(q)?;
            *noise = gaussian_sample(&mut rng, 0.0, opts.noise_std, [1, n_obs])?;
            let n = &noise.data()[3 * SHAPE_POINTS..3 * SHAPE_POINTS + 3];
            Ok::<_, Error>(shape.tip() + Vector3::new(n[0], n[1], n[2]))
        };
    let g0 = traj.at(0.0)?;
    for _ in 0..opts.settle_ticks {
        step(&mut q, &mut shape, &mut noise, g0)?;
    }
    let mut log = TrackingLog::default();
    for i in 1..=n {
        let t = i as f64 * opts.tick;
        let goal = traj.at(t)?;
        let observed = step(&mut q, &mut shape, &mut noise, goal)?;
        log.rows.push(log_row(
            t,
            goal,
            &shape,
            observed,
            &q,
            opts.obstacle.as_ref(),
        ));
    }
    Ok(log)
}

/// `Jᵀ(JJᵀ + λI)⁻¹`; with `λ = 0` a singular `JJᵀ` is a numeric error.
pub fn damped_pinv(j: &DMatrix<f64>, damping: f64) -> Result<DMatrix<f64>> {
    let jjt = j * j.transpose() + DMatrix::identity(j.nrows(), j.nrows()) * damping;
    let inv = jjt
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numeric("JJᵀ is singular".into()))?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("JJᵀ is singular".into()));
    }
    Ok(j.transpose() * inv)
}

/// Damping of the resolved-rate pseudo-inverse.
pub const PINV_DAMPING: f64 = 1e-6;

/// Resolved-rate tracking `q̇ = J⁺(q)·ġ` on the Shape-NODE without feedback.
///
/// The start action solves `x̂(q) = g(0)` on the model; afterwards the
/// actions never see the robot. Logged tips are the true robot's.
pub fn open_loop_jacobian_track(
    shape_model: &ShapeNodeModel,
    robot: &GroundTruthRobot,
    traj: &Trajectory,
    opts: &TrackingOptions,
) -> Result<TrackingLog> {
    let n = opts.n_ticks(traj)?;
    let cfg = &shape_model.robot;
    let mut q = vec![0.0; cfg.action_dim()];
    clamp_inside(&mut q, cfg);
    let g0 = traj.at(0.0)?;
    for _ in 0..opts.settle_ticks {
        let err = g0 - shape_model.predict_shape(&q)?.tip();
        let dq = damped_pinv(&shape_model.tip_jacobian(&q)?, PINV_DAMPING)?
            * DVector::from_column_slice(err.as_slice());
        q.iter_mut().zip(dq.iter()).for_each(|(v, d)| *v += d);
        clamp_inside(&mut q, cfg);
    }
    let mut log = TrackingLog::default();
    let mut prev = g0;
    for i in 1..=n {
        let t = i as f64 * opts.tick;
        let goal = traj.at(t)?;
        let dg = goal - prev;
        let dq = damped_pinv(&shape_model.tip_jacobian(&q)?, PINV_DAMPING)?
            * DVector::from_column_slice(dg.as_slice());
        q.iter_mut().zip(dq.iter()).for_each(|(v, d)| *v += d);
        clamp_inside(&mut q, cfg);
        prev = goal;
        let shape = robot.shape(&q)?;
        let observed = shape_model.predict_shape(&q)?.tip();
        log.rows.push(log_row(
            t,
            goal,
            &shape,
            observed,
            &q,
            opts.obstacle.as_ref(),
        ));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::TrajectoryKind;

    fn models(n_seg: usize, shape_steps: usize, seed: u64) -> (ControlNodeModel, ShapeNodeModel) {
        let robot = RobotConfig::with_segments(n_seg);
        let mut shape =
            ShapeNodeModel::new(&robot, [16, 16], SolverKind::Rk4, shape_steps, seed).unwrap();
        let fresh = MlpParams::init(&mut seeded_rng(seed + 1), 7, [16, 16], 7);
        shape.params.layers[2].weight = fresh.layers[2].weight.map(|v| 0.3 * v);
        let policy = ControlNodeModel::new(&robot, [16, 16], seed + 2).unwrap();
        (policy, shape)
    }

    #[test]
    fn bound_action_examples() {
        let lo = [-15.0; 2];
        let hi = [15.0; 2];
        assert_eq!(bound_actions(&[0.0, 0.0], &lo, &hi), vec![0.0, 0.0]);
        let q = bound_actions(&[(1.0f64 / 3.0).atanh(); 2], &lo, &hi);
        assert!(q.iter().all(|v| (v - 5.0).abs() < 1e-12));
        let q = bound_actions(&[50.0, -50.0], &lo, &hi);
        assert!(q[0] <= 15.0 && q[1] >= -15.0);
        let z = unbound_actions(&[15.0, -15.0], &lo, &hi);
        let q = bound_actions(&[z[0] + 1.0, z[1] - 1.0], &lo, &hi);
        assert!(q[0] < 15.0 && q[1] > -15.0);
    }

    #[test]
    fn downsampling_hits_fractions_and_tip() {
        let robot = RobotConfig::with_segments(3);
        let s = crate::robot::forward_kinematics(&[1.0, 2.0, -3.0, 0.5, 4.0, -1.0], &robot, 10)
            .unwrap();
        let ds = downsample(&s).unwrap();
        assert_eq!(ds.len(), SHAPE_POINTS);
        assert_eq!(ds[8], s.tip());
        // 3/9 of 0.3 m is grid point 10.
        assert!((ds[2] - s.points[10]).norm() < 1e-15);
        assert_eq!(observation_dim(3), 39);
    }

    #[test]
    fn zero_final_layer_keeps_actions_constant() {
        let (mut policy, shape) = models(2, 10, 1);
        let last = policy.params.layers.last_mut().unwrap();
        last.weight = last.weight.map(|_| 0.0);
        last.bias = last.bias.map(|_| 0.0);
        let q0 = [2.0, -1.0, 0.5, 3.0];
        let r = policy
            .rollout_policy(
                &shape,
                &q0,
                Vector3::new(0.0, 0.0, 0.2),
                None,
                &ControlLossConfig::default(),
                None,
            )
            .unwrap();
        assert_eq!(r.actions.len(), 10);
        for a in &r.actions {
            for (x, y) in a.iter().zip(&q0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for t in &r.tips {
            assert!((t - r.tip0).norm() < 1e-12);
        }
    }

    #[test]
    fn single_step_horizon() {
        let (mut policy, shape) = models(1, 10, 2);
        policy.horizon = 1;
        let r = policy
            .rollout_policy(
                &shape,
                &[1.0, 1.0],
                Vector3::new(0.01, 0.0, 0.09),
                None,
                &ControlLossConfig::default(),
                None,
            )
            .unwrap();
        assert_eq!(
            (
                r.actions.len(),
                r.tips.len(),
                r.shapes.len(),
                r.step_losses.len()
            ),
            (1, 1, 1, 1)
        );
    }

    #[test]
    fn tape_loss_equals_term_by_term_recomputation() {
        let (policy, shape) = models(3, 10, 3);
        let cfg = ControlLossConfig::default();
        let q0 = [1.0, -2.0, 0.5, 2.5, -1.5, 0.2];
        let goal = Vector3::new(0.02, -0.01, 0.27);
        let obstacle = ObstacleSpec::new([0.05, 0.0, 0.2], 0.01).unwrap();
        let r = policy
            .rollout_policy(&shape, &q0, goal, None, &cfg, None)
            .unwrap();
        let mut tape = Tape::new();
        let vars = policy.params.attach(&mut tape, false);
        let svars = shape.params.attach(&mut tape, false);
        let g = Tensor::row_vector(goal.as_slice());
        let tr = policy
            .record_rollout(
                &mut tape,
                &vars,
                &shape,
                &svars,
                &Tensor::row_vector(&q0),
                &g,
                None,
                policy.horizon,
            )
            .unwrap();
        let l = control_loss_on_tape(&mut tape, &tr, &g, &policy.half_range(), &cfg, None).unwrap();
        let eager = control_loss(&r, goal, &cfg, None);
        assert!((tape.value(l).data()[0] - eager).abs() <= 1e-12 * eager.abs());
        // A far obstacle contributes nothing in either form.
        let far = ObstacleSpec::new([5.0, 5.0, 5.0], 0.01).unwrap();
        assert_eq!(control_loss(&r, goal, &cfg, Some(&far)), eager);
        // A near one adds exactly the weight per violating step.
        let n_viol = r
            .backbones
            .iter()
            .filter(|b| {
                b.iter()
                    .any(|p| (p - obstacle.center()).norm_squared() < 0.01)
            })
            .count();
        let with = control_loss(&r, goal, &cfg, Some(&obstacle));
        assert!((with - eager - 100.0 * n_viol as f64).abs() < 1e-9);
    }

    #[test]
    fn terminal_only_error() {
        let d = 0.004;
        let goal = Vector3::new(0.0, 0.0, 0.3);
        let shape = vec![Vector3::zeros(); SHAPE_POINTS];
        let mut tips = vec![goal; 3];
        tips[2].x += d;
        let r = RolloutResult {
            q0: vec![0.0; 2],
            tip0: goal,
            shape0: shape.clone(),
            actions: vec![vec![0.0; 2]; 3],
            tips,
            shapes: vec![shape; 3],
            backbones: vec![vec![]; 3],
            action_half_range: vec![15.0; 2],
            step_losses: vec![],
        };
        let cfg = ControlLossConfig::default();
        let l = control_loss(&r, goal, &cfg, None);
        assert!((l - (cfg.alpha + cfg.lambda) * d * d).abs() < 1e-15);
        let mut perfect = r.clone();
        perfect.tips = vec![goal; 3];
        assert_eq!(control_loss(&perfect, goal, &cfg, None), 0.0);
    }

    #[test]
    fn first_action_matches_rollout() {
        let (policy, shape) = models(3, 10, 4);
        let q0 = [1.0, -2.0, 0.5, 2.5, -1.5, 0.2];
        let goal = Vector3::new(0.02, -0.01, 0.27);
        let r = policy
            .rollout_policy(&shape, &q0, goal, None, &ControlLossConfig::default(), None)
            .unwrap();
        let observed = shape.predict_shape(&q0).unwrap();
        let a = policy.first_action(&observed, &q0, goal, None).unwrap();
        assert_eq!(a, r.actions[0]);
    }

    #[test]
    fn replanning_from_the_achieved_state_keeps_the_plan() {
        let (mut policy, shape) = models(2, 10, 5);
        let cfg = ControlLossConfig::default();
        let q0 = [2.0, -1.0, 0.5, 3.0];
        let goal = Vector3::new(0.03, 0.01, 0.18);
        policy.horizon = 4;
        let plan = policy
            .rollout_policy(&shape, &q0, goal, None, &cfg, None)
            .unwrap();
        policy.horizon = 3;
        let replan = policy
            .rollout_policy(&shape, &plan.actions[0], goal, None, &cfg, None)
            .unwrap();
        let continued = plan.step_losses[3];
        let replanned = replan.step_losses[2];
        assert!(replanned <= continued + 1e-6, "{replanned} vs {continued}");
        for (a, b) in replan.actions.iter().zip(&plan.actions[1..]) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (mut policy, shape) = models(1, 2, 6);
        policy.horizon = 2;
        let cfg = ControlLossConfig::default();
        let ep = Episodes {
            q0: Tensor::from_rows(&[[1.0, -2.0], [-3.0, 0.5]]).unwrap(),
            goals: Tensor::from_rows(&[[0.01, 0.0, 0.095], [-0.02, 0.01, 0.09]]).unwrap(),
        };
        let loss_of = |p: &ControlNodeModel| evaluation_loss(p, &shape, &ep, &cfg, None).unwrap();
        let mut tape = Tape::new();
        let vars = policy.params.attach(&mut tape, true);
        let svars = shape.params.attach(&mut tape, false);
        let r = policy
            .record_rollout(&mut tape, &vars, &shape, &svars, &ep.q0, &ep.goals, None, 2)
            .unwrap();
        let l = control_loss_on_tape(&mut tape, &r, &ep.goals, &policy.half_range(), &cfg, None)
            .unwrap();
        let grads = policy
            .params
            .collect_grads(&tape.backward(l).unwrap(), &vars);
        for (layer, entry) in [(0usize, 5usize), (2, 3), (4, 1), (5, 0), (1, 7)] {
            let h = 1e-6;
            let mut plus = policy.clone();
            plus.params.tensors_mut()[layer].data_mut()[entry] += h;
            let mut minus = policy.clone();
            minus.params.tensors_mut()[layer].data_mut()[entry] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let g = grads[layer].data()[entry];
            assert!(
                (g - fd).abs() <= 1e-3 * g.abs().max(1e-6),
                "{layer}/{entry}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn pseudo_inverse_identities() {
        let j = DMatrix::from_row_slice(
            3,
            4,
            &[1.0, 2.0, 0.0, -1.0, 0.5, -1.0, 3.0, 2.0, 0.0, 1.0, 1.0, 1.0],
        );
        let p = damped_pinv(&j, 0.0).unwrap();
        assert!((&j * &p * &j - &j).abs().max() < 1e-8);
        let singular = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            damped_pinv(&singular, 0.0),
            Err(Error::Numeric(_))
        ));
        assert!(damped_pinv(&singular, PINV_DAMPING).is_ok());
    }

    #[test]
    fn open_loop_on_a_constant_reference_does_not_drift() {
        let (_, shape) = models(2, 10, 7);
        let robot = GroundTruthRobot::new(shape.robot.clone(), 10);
        let mut traj = Trajectory::new(TrajectoryKind::Circle, &shape.robot);
        traj.radius = 0.0;
        let opts = TrackingOptions {
            duration: 50.0,
            ..TrackingOptions::for_trajectory(&traj, 0)
        };
        let log = open_loop_jacobian_track(&shape, &robot, &traj, &opts).unwrap();
        assert_eq!(log.rows.len(), 100);
        let first = &log.rows[0].q;
        for r in &log.rows {
            for (a, b) in r.q.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(r.observed, shape.predict_shape(&r.q).unwrap().tip());
        }
    }

    #[test]
    fn tracking_logs() {
        let (policy, _) = models(3, 10, 8);
        let robot = GroundTruthRobot::new(policy.robot.clone(), 10);
        let traj = Trajectory::new(TrajectoryKind::Square, &policy.robot);
        let mut opts = TrackingOptions::for_trajectory(&traj, 3);
        opts.duration = 0.0;
        assert!(closed_loop_track(&policy, &robot, &traj, &opts)
            .unwrap()
            .rows
            .is_empty());
        opts.duration = 5.0;
        opts.obstacle = Some(ObstacleSpec::new([0.07, 0.0, 0.28], 0.01).unwrap());
        let log = closed_loop_track(&policy, &robot, &traj, &opts).unwrap();
        assert_eq!(log.rows.len(), 10);
        assert_eq!(
            closed_loop_track(&policy, &robot, &traj, &opts).unwrap(),
            log
        );
        for r in &log.rows {
            for (v, (lo, hi)) in r.q.iter().zip(policy.q_min.iter().zip(&policy.q_max)) {
                assert!(lo < v && v < hi);
            }
            assert!((r.observed - r.tip).norm() < 0.005);
        }
        let mut buf = Vec::new();
        log.write_csv(&mut buf, 6).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "t,gx,gy,gz,x,y,z,ox,oy,oz,q0,q1,q2,q3,q4,q5,min_obstacle_dist"
        );
        assert_eq!(TrackingLog::read_csv(&buf[..]).unwrap(), log);
    }

    #[test]
    fn tracking_statistics() {
        let row = |e: f64| TrackingRow {
            t: 0.0,
            goal: Vector3::zeros(),
            tip: Vector3::new(e, 0.0, 0.0),
            observed: Vector3::zeros(),
            q: vec![],
            min_obstacle_dist: None,
        };
        let perfect = TrackingLog {
            rows: vec![row(0.0); 4],
        };
        assert_eq!(evaluate_tracking(&[perfect]).unwrap().rmse, [0.0; 3]);
        let offset = TrackingLog {
            rows: vec![row(0.002); 4],
        };
        let s = evaluate_tracking(&[offset]).unwrap();
        assert!((s.rmse[0] - 2.0).abs() < 1e-12 && s.std[0] < 1e-6);
        assert!(evaluate_tracking(&[TrackingLog::default()]).is_err());
    }

    #[test]
    fn short_training_is_deterministic_and_lowers_loss() {
        let (policy, shape) = models(1, 10, 9);
        let cfg = ControlTrainConfig {
            batch_size: 8,
            iterations: 30,
            learning_rate: 3e-3,
            evaluate_every: 10,
            evaluation_episodes: 16,
            ..ControlTrainConfig::default()
        };
        let loss = ControlLossConfig::default();
        let a = train_control_node(policy.clone(), &shape, &loss, &cfg, |_| {}).unwrap();
        let b = train_control_node(policy, &shape, &loss, &cfg, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.rows.len(), 30);
        let evals: Vec<f64> = a.history.rows.iter().filter_map(|r| r.val_loss).collect();
        assert!(evals[2] < evals[0]);
        let lowest = evals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss, Some(lowest));
        let eval = sample_episodes(&mut seeded_rng(cfg.seed), &shape, &cfg, 16).unwrap();
        assert_eq!(
            evaluation_loss(&a.model, &shape, &eval, &loss, None).unwrap(),
            lowest
        );
        assert_eq!(a.last.params.step_count, 30);
    }
}
