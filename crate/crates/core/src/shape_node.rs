//! Shape-NODE: a learned arc-length ODE for the robot backbone.
//!
//! The state is `X = [p, u, a]` (position, curvature, one augmentation
//! channel) and its derivative along arc length is
//! `f_θ(X) = scale ⊙ tanh(MLP(input_scale ⊙ X))`. Each segment starts from
//! the previous segment's end position, the nominal curvature of its action
//! and `a = 0`, and is integrated with a fixed-step solver.

use crate::error::{Error, Result};
use crate::metrics::{AxisStats, HistoryRow, LossHistory};
use crate::odeint::{integrate, integrate_batch_masked, IntegrationGrid, SolverKind};
use crate::robot::{BackboneShape, RobotConfig, ShapeSample};
use crate::tensor::{
    adam_step, load_json, mlp_forward, save_json, seeded_rng, Activation, AdamConfig, MlpParams,
    MlpVars, Tape, Tensor, Var,
};
use nalgebra::{DMatrix, Vector3};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const STATE_DIM: usize = 7;
const FILE_KIND: &str = "shape-node";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeNodeModel {
    pub params: MlpParams,
    pub solver: SolverKind,
    pub steps_per_segment: usize,
    /// Per-component derivative scale applied after the Tanh output.
    pub output_scale: Vec<f64>,
    /// Per-component input normalisation.
    pub input_scale: Vec<f64>,
    pub robot: RobotConfig,
}

#[derive(Serialize, Deserialize)]
struct ShapeModelFile {
    robot_fingerprint: String,
    model: ShapeNodeModel,
}

/// States of one segment's integration, `n_max + 1` entries of `B × 7`.
#[derive(Clone, Debug)]
pub struct SegmentTrace {
    pub states: Vec<Var>,
    /// Steps taken by every batch row.
    pub steps: Vec<usize>,
}

/// A batched backbone prediction recorded on a tape.
#[derive(Clone, Debug)]
pub struct ShapeTrace {
    pub segments: Vec<SegmentTrace>,
    pub batch: usize,
}

impl ShapeTrace {
    /// `B × 3` tip positions.
    pub fn tip(&self, tape: &mut Tape) -> Result<Var> {
        let last = self.segments.last().expect("at least one segment");
        tape.cols(*last.states.last().expect("non-empty trace"), 0, 3)
    }

    /// Positions after the base, `B × 3` each, when every row took the
    /// same number of steps.
    pub fn uniform_points(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        for seg in &self.segments {
            if seg.steps.iter().any(|&s| s + 1 != seg.states.len()) {
                return Err(Error::Contract("rows took different step counts".into()));
            }
            for &x in &seg.states[1..] {
                out.push(tape.cols(x, 0, 3)?);
            }
        }
        Ok(out)
    }

    /// Reads row `i` as a shape.
    pub fn shape_of_row(&self, tape: &Tape, i: usize, h: &[f64]) -> BackboneShape {
        let mut points = vec![Vector3::zeros()];
        let mut arcs = vec![0.0];
        let mut s0 = 0.0;
        for (seg, &hj) in self.segments.iter().zip(h) {
            let n = seg.steps[i];
            for (k, &x) in seg.states[1..=n].iter().enumerate() {
                let r = tape.value(x).row(i);
                points.push(Vector3::new(r[0], r[1], r[2]));
                arcs.push(s0 + (k + 1) as f64 * hj);
            }
            s0 += n as f64 * hj;
        }
        BackboneShape {
            points,
            arc_lengths: arcs,
        }
    }
}

impl ShapeNodeModel {
    /// Glorot-initialised model whose final layer is set so that the
    /// initial flow is the straight-robot prior `p' = e₃, u' = 0, a' = 0`.
    pub fn new(
        robot: &RobotConfig,
        hidden: [usize; 2],
        solver: SolverKind,
        steps_per_segment: usize,
        seed: u64,
    ) -> Result<Self> {
        robot.validate()?;
        if steps_per_segment < solver.min_steps() {
            return Err(Error::Config(format!(
                "{solver} needs at least {} steps per segment",
                solver.min_steps()
            )));
        }
        let u_max = robot.curvature_bound;
        let mean_len = robot.total_length() / robot.n_segments as f64;
        let output_scale = vec![2.0, 2.0, 2.0, 2.0 * u_max, 2.0 * u_max, 2.0 * u_max, 1.0];
        let total = robot.total_length();
        let input_scale = vec![
            1.0 / total,
            1.0 / total,
            1.0 / total,
            1.0 / u_max,
            1.0 / u_max,
            1.0 / u_max,
            1.0 / mean_len,
        ];
        let mut params = MlpParams::init(&mut seeded_rng(seed), STATE_DIM, hidden, STATE_DIM);
        let last = params.layers.last_mut().expect("three layers");
        last.weight = Tensor::zeros(&[hidden[1], STATE_DIM]);
        let mut bias = vec![0.0; STATE_DIM];
        bias[2] = (1.0 / output_scale[2]).atanh();
        last.bias = Tensor::row_vector(&bias);
        Ok(Self {
            params,
            solver,
            steps_per_segment,
            output_scale,
            input_scale,
            robot: robot.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.params.validate()?;
        if self.params.input_width() != STATE_DIM || self.params.output_width() != STATE_DIM {
            return Err(Error::Dimension(format!(
                "shape network must be {STATE_DIM} → {STATE_DIM}"
            )));
        }
        if self.output_scale.len() != STATE_DIM
            || self.input_scale.len() != STATE_DIM
            || self
                .output_scale
                .iter()
                .chain(&self.input_scale)
                .any(|&s| !(s > 0.0))
        {
            return Err(Error::Config("scales must be 7 positive values".into()));
        }
        if self.steps_per_segment < self.solver.min_steps() {
            return Err(Error::Config(format!(
                "{} needs at least {} steps per segment",
                self.solver,
                self.solver.min_steps()
            )));
        }
        Ok(())
    }

    /// Arc-length step of segment `j`.
    pub fn step_size(&self, j: usize) -> f64 {
        self.robot.segment_lengths[j] / self.steps_per_segment as f64
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        (0..self.robot.n_segments)
            .map(|j| self.step_size(j))
            .collect()
    }

    /// Records `f_θ` for a `B × 7` state.
    pub fn dynamics(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let zeros = [0.0; STATE_DIM];
        let xs = tape.col_affine(x, &self.input_scale, &zeros)?;
        let y = mlp_forward(tape, vars, xs, Activation::LeakyRelu, Activation::Tanh)?;
        tape.scale_cols(y, &self.output_scale)
    }

    /// Records the batched backbone prediction for `B × 2n` actions `q`.
    ///
    /// `lengths[i][j]` overrides segment `j`'s length for row `i`; each row
    /// then takes `round(ℓ/h)` steps of the model's fixed step `h` and the
    /// shorter rows are frozen once done.
    pub fn record(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        q: Var,
        lengths: Option<&[Vec<f64>]>,
    ) -> Result<ShapeTrace> {
        let (b, c) = {
            let t = tape.value(q);
            (t.rows(), t.cols())
        };
        let n_seg = self.robot.n_segments;
        if c != 2 * n_seg {
            return Err(Error::Dimension(format!(
                "actions have {c} channels, robot needs {}",
                2 * n_seg
            )));
        }
        if let Some(l) = lengths {
            if l.len() != b || l.iter().any(|r| r.len() != n_seg) {
                return Err(Error::Dimension(
                    "per-sample lengths do not match batch".into(),
                ));
            }
        }
        let zero_col = tape.constant(Tensor::zeros(&[b, 1]));
        let mut p = tape.constant(Tensor::zeros(&[b, 3]));
        let mut segments = Vec::with_capacity(n_seg);
        for j in 0..n_seg {
            let h = self.step_size(j);
            let steps: Vec<usize> = match lengths {
                None => vec![self.steps_per_segment; b],
                Some(l) => l.iter().map(|r| (r[j] / h).round() as usize).collect(),
            };
            let n_max = steps
                .iter()
                .copied()
                .max()
                .unwrap_or(self.steps_per_segment);
            if steps.iter().any(|&s| s < self.solver.min_steps()) {
                return Err(Error::Contract(format!(
                    "segment {j} length too short for {}",
                    self.solver
                )));
            }
            let qj = tape.cols(q, 2 * j, 2 * j + 2)?;
            let u3 = tape.concat(&[qj, zero_col])?;
            let u0 = tape.clamp_row_norm(u3, self.robot.curvature_bound)?;
            let x0 = tape.concat(&[p, u0, zero_col])?;
            let grid = IntegrationGrid::with_step(0.0, h, n_max)?;
            let f = |t: &mut Tape, x: &Var, _| self.dynamics(t, vars, *x);
            let states = if steps.iter().all(|&s| s == n_max) {
                integrate(tape, f, x0, &grid, self.solver)?
            } else {
                let grid = grid.with_sample_steps(steps.clone())?;
                integrate_batch_masked(tape, f, x0, &grid, self.solver)?
            };
            p = tape.cols(*states.last().expect("non-empty"), 0, 3)?;
            segments.push(SegmentTrace { states, steps });
        }
        Ok(ShapeTrace { segments, batch: b })
    }

    /// Predicted backbones for a batch, optionally with per-sample lengths.
    pub fn predict_batch(
        &self,
        actions: &[Vec<f64>],
        lengths: Option<&[Vec<f64>]>,
    ) -> Result<Vec<BackboneShape>> {
        for q in actions {
            self.robot.check_action(q)?;
        }
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let q = tape.constant(Tensor::from_rows(actions)?);
        let trace = self.record(&mut tape, &vars, q, lengths)?;
        let h = self.step_sizes();
        Ok((0..actions.len())
            .map(|i| trace.shape_of_row(&tape, i, &h))
            .collect())
    }

    /// Predicted backbone for one action at the configured segment lengths.
    pub fn predict_shape(&self, q: &[f64]) -> Result<BackboneShape> {
        Ok(self.predict_batch(&[q.to_vec()], None)?.remove(0))
    }

    /// `∂tip/∂q`, `3 × dim(q)`, by reverse-mode differentiation.
    pub fn tip_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.robot.check_action(q)?;
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let qv = tape.param(Tensor::row_vector(q));
        let trace = self.record(&mut tape, &vars, qv, None)?;
        let tip = trace.tip(&mut tape)?;
        let mut jac = DMatrix::zeros(3, q.len());
        for axis in 0..3 {
            let component = tape.cols(tip, axis, axis + 1)?;
            let grads = tape.backward(component)?;
            let g = grads.get_or_zeros(qv, tape.value(qv));
            for (k, &v) in g.data().iter().enumerate() {
                jac[(axis, k)] = v;
            }
        }
        Ok(jac)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ShapeModelFile {
            robot_fingerprint: self.robot.fingerprint(),
            model: self.clone(),
        };
        save_json(path, FILE_KIND, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ShapeModelFile = load_json(path, FILE_KIND)?;
        if file.robot_fingerprint != file.model.robot.fingerprint() {
            return Err(Error::Format(format!(
                "{}: robot fingerprint does not match its config",
                path.display()
            )));
        }
        file.model
            .validate()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(file.model)
    }
}

/// Mean Euclidean point error over the batch, base point excluded.
pub fn shape_loss(predicted: &[BackboneShape], truth: &[BackboneShape]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} references",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if p.points.len() != t.points.len() {
            return Err(Error::Contract(format!(
                "grid of {} points vs {}",
                p.points.len(),
                t.points.len()
            )));
        }
        for (a, b) in p.points.iter().zip(&t.points).skip(1) {
            sum += (a - b).norm();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// [`shape_loss`] recorded on the tape against reference shapes.
pub fn shape_loss_on_tape(
    tape: &mut Tape,
    trace: &ShapeTrace,
    truth: &[&BackboneShape],
) -> Result<Var> {
    if truth.len() != trace.batch {
        return Err(Error::Contract(format!(
            "{} references for a batch of {}",
            truth.len(),
            trace.batch
        )));
    }
    let b = trace.batch;
    for (i, t) in truth.iter().enumerate() {
        let expected = 1 + trace.segments.iter().map(|s| s.steps[i]).sum::<usize>();
        if t.points.len() != expected {
            return Err(Error::Contract(format!(
                "reference {i} has {} points, prediction grid has {expected}",
                t.points.len()
            )));
        }
    }
    let mut offsets = vec![0usize; b];
    let mut norms = Vec::new();
    let mut mask = Vec::new();
    let mut count = 0usize;
    for seg in &trace.segments {
        for (k, &x) in seg.states.iter().enumerate().skip(1) {
            let target = Tensor::from_fn(b, 3, |i, a| {
                if k <= seg.steps[i] {
                    truth[i].points[offsets[i] + k][a]
                } else {
                    0.0
                }
            });
            let valid: Vec<f64> = (0..b)
                .map(|i| f64::from(u8::from(k <= seg.steps[i])))
                .collect();
            count += valid.iter().filter(|&&v| v > 0.0).count();
            let p = tape.cols(x, 0, 3)?;
            let t = tape.constant(target);
            let d = tape.sub(p, t)?;
            norms.push(tape.row_norm(d)?);
            mask.push(valid);
        }
        for (o, &s) in offsets.iter_mut().zip(&seg.steps) {
            *o += s;
        }
    }
    let all = tape.concat(&norms)?;
    let k = norms.len();
    let m = tape.constant(Tensor::from_fn(b, k, |i, j| mask[j][i]));
    let masked = tape.mul(all, m)?;
    let total = tape.sum_all(masked)?;
    tape.scale(total, 1.0 / count.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub validate_every: u64,
    pub seed: u64,
}

impl Default for ShapeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            iterations: 10_000,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            validate_every: 100,
            seed: 0,
        }
    }
}

impl ShapeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "batch size, iterations and validation interval must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Training/validation index split, deterministic in the seed.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let n_val = if fraction > 0.0 && n >= 2 {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let train = idx.split_off(n_val);
    (train, idx)
}

pub struct ShapeTraining {
    /// Parameters with the lowest validation loss.
    pub best: ShapeNodeModel,
    /// Parameters and optimizer state after the final iteration.
    pub last: ShapeNodeModel,
    pub history: LossHistory,
    pub best_val_loss: Option<f64>,
}

const EVAL_CHUNK: usize = 256;

/// Mean point error of the model over the samples, evaluated in chunks.
pub fn dataset_loss(model: &ShapeNodeModel, samples: &[&ShapeSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let actions: Vec<Vec<f64>> = chunk.iter().map(|s| s.action.clone()).collect();
        let lengths: Vec<Vec<f64>> = chunk.iter().map(|s| s.lengths.clone()).collect();
        let pred = model.predict_batch(&actions, Some(&lengths))?;
        let truth: Vec<BackboneShape> = chunk.iter().map(|s| s.shape.clone()).collect();
        let points: usize = truth.iter().map(|t| t.points.len() - 1).sum();
        sum += shape_loss(&pred, &truth)? * points as f64;
        count += points;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// One Adam step on `batch`; returns the pre-update loss.
pub fn train_step(
    model: &mut ShapeNodeModel,
    batch: &[&ShapeSample],
    adam: &AdamConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.params.attach(&mut tape, true);
    let actions: Vec<&[f64]> = batch.iter().map(|s| s.action.as_slice()).collect();
    let lengths: Vec<Vec<f64>> = batch.iter().map(|s| s.lengths.clone()).collect();
    let q = tape.constant(Tensor::from_rows(&actions)?);
    let trace = model.record(&mut tape, &vars, q, Some(&lengths))?;
    let truth: Vec<&BackboneShape> = batch.iter().map(|s| &s.shape).collect();
    let loss = shape_loss_on_tape(&mut tape, &trace, &truth)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let g = model.params.collect_grads(&grads, &vars);
    adam_step(&mut model.params, &g, adam)?;
    Ok(value)
}

/// Trains with Adam on random batches and keeps the best-validation model.
///
/// Training resumes from `model.params.step_count`; batches depend only on
/// the seed and the iteration number, so an interrupted run continued from
/// its last checkpoint reproduces the uninterrupted one.
pub fn train_shape_node(
    model: ShapeNodeModel,
    data: &[ShapeSample],
    cfg: &ShapeTrainConfig,
    mut observe: impl FnMut(&HistoryRow),
) -> Result<ShapeTraining> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    for s in data {
        model.robot.check_action(&s.action)?;
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    let val: Vec<&ShapeSample> = val_idx.iter().map(|&i| &data[i]).collect();
    let adam = cfg.adam();
    let mut model = model;
    let mut best: Option<(f64, ShapeNodeModel)> = None;
    let mut history = LossHistory::default();
    let start = model.params.step_count;
    for it in start + 1..=cfg.iterations {
        let mut rng = seeded_rng(cfg.seed);
        rng.set_stream(it);
        let take = cfg.batch_size.min(train_idx.len());
        let batch: Vec<&ShapeSample> = index::sample(&mut rng, train_idx.len(), take)
            .into_iter()
            .map(|k| &data[train_idx[k]])
            .collect();
        let train_loss = train_step(&mut model, &batch, &adam).map_err(|e| Error::Training {
            iteration: it,
            reason: e.to_string(),
        })?;
        if !train_loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                reason: format!("loss is {train_loss}"),
            });
        }
        let val_loss = if !val.is_empty() && (it % cfg.validate_every == 0 || it == cfg.iterations)
        {
            let v = dataset_loss(&model, &val).map_err(|e| Error::Training {
                iteration: it,
                reason: e.to_string(),
            })?;
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, model.clone()));
            }
            Some(v)
        } else {
            None
        };
        let row = HistoryRow {
            iteration: it,
            train_loss,
            val_loss,
        };
        observe(&row);
        history.rows.push(row);
    }
    let best_val_loss = best.as_ref().map(|(v, _)| *v);
    let best = best.map_or_else(|| model.clone(), |(_, m)| m);
    Ok(ShapeTraining {
        best,
        last: model,
        history,
        best_val_loss,
    })
}

/// Per-axis error statistics in millimetres over every non-base point.
pub fn evaluate_shape_rmse(model: &ShapeNodeModel, samples: &[ShapeSample]) -> Result<AxisStats> {
    let mut errors = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let actions: Vec<Vec<f64>> = chunk.iter().map(|s| s.action.clone()).collect();
        let lengths: Vec<Vec<f64>> = chunk.iter().map(|s| s.lengths.clone()).collect();
        let pred = model.predict_batch(&actions, Some(&lengths))?;
        for (p, s) in pred.iter().zip(chunk) {
            if p.points.len() != s.shape.points.len() {
                return Err(Error::Contract(
                    "prediction and reference grids differ".into(),
                ));
            }
            for (a, b) in p.points.iter().zip(&s.shape.points).skip(1) {
                let d = a - b;
                errors.push([d.x, d.y, d.z]);
            }
        }
    }
    Ok(AxisStats::from_errors(errors).scaled(1000.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::sample_dataset;

    fn small(robot: &RobotConfig, solver: SolverKind, steps: usize) -> ShapeNodeModel {
        ShapeNodeModel::new(robot, [16, 16], solver, steps, 1).unwrap()
    }

    fn randomize_last(m: &mut ShapeNodeModel, seed: u64) {
        let fresh = MlpParams::init(&mut seeded_rng(seed), STATE_DIM, [16, 16], STATE_DIM);
        m.params.layers[2].weight = fresh.layers[2].weight.map(|v| 0.3 * v);
    }

    #[test]
    fn prior_is_straight() {
        let robot = RobotConfig::with_segments(3);
        let m = small(&robot, SolverKind::FixedAdams, 10);
        let s = m.predict_shape(&[0.0; 6]).unwrap();
        assert_eq!(s.points.len(), 31);
        assert!((s.tip() - Vector3::new(0.0, 0.0, 0.3)).norm() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let robot = RobotConfig::with_segments(1);
        let m = small(&robot, SolverKind::Rk4, 10);
        let s = m.predict_shape(&[3.0, 1.0]).unwrap();
        assert_eq!(
            shape_loss(std::slice::from_ref(&s), std::slice::from_ref(&s)).unwrap(),
            0.0
        );
        let mut shifted = s.clone();
        shifted.points.iter_mut().for_each(|p| p.x += 0.004);
        assert!((shape_loss(std::slice::from_ref(&s), &[shifted]).unwrap() - 0.004).abs() < 1e-15);
        let mut short = s.clone();
        short.points.pop();
        assert!(matches!(
            shape_loss(&[s], &[short]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_loss_matches_eager_loss() {
        let robot = RobotConfig::with_segments(2);
        let mut m = small(&robot, SolverKind::Rk4, 10);
        randomize_last(&mut m, 2);
        let data = sample_dataset(&mut seeded_rng(3), &robot, 5, 10).unwrap();
        let refs: Vec<&ShapeSample> = data.iter().collect();
        let eager = dataset_loss(&m, &refs).unwrap();
        let mut tape = Tape::new();
        let vars = m.params.attach(&mut tape, false);
        let q = tape.constant(
            Tensor::from_rows(&data.iter().map(|s| s.action.clone()).collect::<Vec<_>>()).unwrap(),
        );
        let trace = m.record(&mut tape, &vars, q, None).unwrap();
        let truth: Vec<&BackboneShape> = data.iter().map(|s| &s.shape).collect();
        let l = shape_loss_on_tape(&mut tape, &trace, &truth).unwrap();
        assert!((tape.value(l).data()[0] - eager).abs() < 1e-15);
    }

    #[test]
    fn batch_masking_matches_individual_prediction() {
        let mut robot = RobotConfig::with_segments(1);
        robot.segment_lengths = vec![0.2];
        let mut m = small(&robot, SolverKind::FixedAdams, 20);
        randomize_last(&mut m, 5);
        let actions = vec![vec![4.0, -2.0], vec![-7.0, 3.0]];
        let lengths = vec![vec![0.1], vec![0.2]];
        let joint = m.predict_batch(&actions, Some(&lengths)).unwrap();
        for i in 0..2 {
            let alone = m
                .predict_batch(&actions[i..=i], Some(&lengths[i..=i]))
                .unwrap();
            assert_eq!(joint[i], alone[0]);
        }
        assert_eq!(joint[0].points.len(), 11);
        assert_eq!(joint[1].points.len(), 21);
    }

    #[test]
    fn segments_chain_from_previous_endpoint() {
        let robot = RobotConfig::with_segments(2);
        let mut m = small(&robot, SolverKind::Rk4, 10);
        randomize_last(&mut m, 7);
        let q = [3.0, -4.0, 8.0, 1.0];
        let two = m.predict_shape(&q).unwrap();
        // Integrate the second segment by hand from the first one's end.
        let mut tape = Tape::new();
        let vars = m.params.attach(&mut tape, false);
        let first = two.points[10];
        let x0 = tape.constant(Tensor::row_vector(&[
            first.x, first.y, first.z, 8.0, 1.0, 0.0, 0.0,
        ]));
        let grid = IntegrationGrid::with_step(0.0, m.step_size(1), 10).unwrap();
        let states = integrate(
            &mut tape,
            |t: &mut Tape, x: &Var, _| m.dynamics(t, &vars, *x),
            x0,
            &grid,
            SolverKind::Rk4,
        )
        .unwrap();
        for (k, &x) in states.iter().enumerate().skip(1) {
            let r = tape.value(x).row(0);
            assert_eq!(two.points[10 + k], Vector3::new(r[0], r[1], r[2]));
        }
    }

    #[test]
    fn jacobian_of_u_independent_dynamics_is_zero() {
        let robot = RobotConfig::with_segments(1);
        let m = small(&robot, SolverKind::Rk4, 10);
        let j = m.tip_jacobian(&[2.0, 1.0]).unwrap();
        assert_eq!(j.shape(), (3, 2));
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let robot = RobotConfig::with_segments(2);
        let mut m = small(&robot, SolverKind::FixedAdams, 10);
        randomize_last(&mut m, 11);
        let q = [3.0, -4.0, 6.0, 2.0];
        let j = m.tip_jacobian(&q).unwrap();
        for k in 0..4 {
            let mut plus = q;
            let mut minus = q;
            plus[k] += 1e-5;
            minus[k] -= 1e-5;
            let d = (m.predict_shape(&plus).unwrap().tip()
                - m.predict_shape(&minus).unwrap().tip())
                / 2e-5;
            for a in 0..3 {
                let scale = j.column(k).norm().max(1e-8);
                assert!(
                    (j[(a, k)] - d[a]).abs() / scale < 1e-3,
                    "{k} {a}: {} vs {}",
                    j[(a, k)],
                    d[a]
                );
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.json");
        let robot = RobotConfig::with_segments(2);
        let m = small(&robot, SolverKind::FixedAdams, 10);
        m.save(&path).unwrap();
        assert_eq!(ShapeNodeModel::load(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(ShapeNodeModel::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (t, v) = split_indices(100, 0.1, 4);
        assert_eq!(v.len(), 10);
        assert_eq!(t.len(), 90);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 4), (t, v));
    }

    #[test]
    fn short_training_reduces_loss_and_resumes_exactly() {
        let robot = RobotConfig::with_segments(1);
        let data = sample_dataset(&mut seeded_rng(8), &robot, 200, 10).unwrap();
        let m = small(&robot, SolverKind::FixedAdams, 10);
        let cfg = ShapeTrainConfig {
            batch_size: 32,
            iterations: 60,
            learning_rate: 3e-3,
            validate_every: 20,
            seed: 3,
            ..ShapeTrainConfig::default()
        };
        let full = train_shape_node(m.clone(), &data, &cfg, |_| {}).unwrap();
        let h = &full.history.rows;
        assert_eq!(h.len(), 60);
        assert!(h[59].train_loss < h[0].train_loss);
        assert!(h.iter().filter(|r| r.val_loss.is_some()).count() == 3);

        let half = train_shape_node(
            m,
            &data,
            &ShapeTrainConfig {
                iterations: 30,
                ..cfg.clone()
            },
            |_| {},
        )
        .unwrap();
        let resumed = train_shape_node(half.last, &data, &cfg, |_| {}).unwrap();
        assert_eq!(resumed.history.rows[0], h[30]);
        assert_eq!(resumed.last, full.last);
    }

    #[test]
    fn divergence_names_the_iteration() {
        let robot = RobotConfig::with_segments(1);
        let data = sample_dataset(&mut seeded_rng(8), &robot, 20, 10).unwrap();
        let mut m = small(&robot, SolverKind::Rk4, 10);
        m.params.layers[0].bias = Tensor::full(&[1, 16], f64::NAN);
        let cfg = ShapeTrainConfig {
            batch_size: 4,
            iterations: 3,
            ..ShapeTrainConfig::default()
        };
        match train_shape_node(m, &data, &cfg, |_| {}) {
            Err(Error::Training { iteration, .. }) => assert_eq!(iteration, 1),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("training on NaN weights succeeded"),
        }
    }
}
