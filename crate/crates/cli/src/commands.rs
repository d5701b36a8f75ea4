//! Subcommand implementations.

use crate::config::RunConfig;
use crate::report::{svg_overlay, MetricsTable, Series};
use anode_core::control_node::{
    closed_loop_track, evaluate_tracking, open_loop_jacobian_track, train_control_node,
    ControlNodeModel, ControlScenario, TrackingLog, TrackingOptions,
};
use anode_core::metrics::{AxisStats, HistoryRow};
use anode_core::robot::{
    read_dataset, sample_dataset, write_dataset, GroundTruthRobot, ObstacleSpec, ShapeSample,
    Trajectory, TrajectoryKind,
};
use anode_core::shape_node::{
    evaluate_shape_rmse, split_indices, train_shape_node, ShapeNodeModel,
};
use anode_core::tensor::seeded_rng;
use anode_core::Vector3;
use anode_core::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const DATASET: &str = "dataset.csv";
pub const SHAPE_MODEL: &str = "shape_model.json";
pub const SHAPE_CHECKPOINT: &str = "shape_checkpoint.json";
pub const SHAPE_HISTORY: &str = "shape_history.csv";

/// Random stream for held-out shape trials, disjoint from the dataset's.
const SHAPE_TRIAL_STREAM: u64 = 1 << 40;

pub fn control_model_name(scenario: ControlScenario) -> String {
    format!("control_{scenario}.json")
}

pub fn control_history_name(scenario: ControlScenario) -> String {
    format!("control_{scenario}_history.csv")
}

/// Last-iterate policy with optimizer state, for `--resume`.
pub fn control_checkpoint_name(scenario: ControlScenario) -> String {
    format!("control_{scenario}_checkpoint.json")
}

/// A resolved configuration bound to its output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    /// Creates the output directory and records the resolved configuration.
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn robot(&self) -> GroundTruthRobot {
        GroundTruthRobot::new(self.cfg.robot_config(), self.cfg.robot.points_per_segment)
    }

    fn trajectory(&self, kind: TrajectoryKind) -> Trajectory {
        let mut t = Trajectory::new(kind, &self.cfg.robot_config());
        t.period = self.cfg.evaluation.period;
        t
    }

    fn tracking_options(
        &self,
        traj: &Trajectory,
        run: usize,
        obstacle: Option<ObstacleSpec>,
    ) -> TrackingOptions {
        let e = &self.cfg.evaluation;
        TrackingOptions {
            duration: traj.period,
            tick: traj.period / e.ticks_per_period as f64,
            settle_ticks: e.settle_ticks,
            noise_std: e.noise_std,
            seed: self.cfg.seed + run as u64,
            obstacle,
        }
    }

    fn load_shape(&self, path: &Path) -> Result<ShapeNodeModel> {
        require(path, "shape model")?;
        let m = ShapeNodeModel::load(path)?;
        self.same_robot(&m.robot, path)?;
        Ok(m)
    }

    fn load_control(&self, path: &Path) -> Result<ControlNodeModel> {
        require(path, "control model")?;
        let m = ControlNodeModel::load(path)?;
        self.same_robot(&m.robot, path)?;
        Ok(m)
    }

    fn same_robot(&self, robot: &anode_core::robot::RobotConfig, path: &Path) -> Result<()> {
        if robot.fingerprint() != self.cfg.robot_config().fingerprint() {
            return Err(Error::Config(format!(
                "{} was trained for a different robot than the configured one",
                path.display()
            )));
        }
        Ok(())
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write_log(path: &Path, log: &TrackingLog, n_actions: usize) -> Result<()> {
    let mut w = create(path)?;
    log.write_csv(&mut w, n_actions)?;
    w.flush()?;
    Ok(())
}

fn write_table(run: &Run, stem: &str, table: &MetricsTable) -> Result<()> {
    let mut w = create(&run.path(&format!("{stem}.csv")))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    std::fs::write(run.path(&format!("{stem}.md")), table.to_markdown())?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn fmt_stats(s: &AxisStats) -> String {
    format!(
        "x̃ {:.3}, ỹ {:.3}, z̃ {:.3} mm",
        s.rmse[0], s.rmse[1], s.rmse[2]
    )
}

pub fn generate(run: &Run) -> Result<PathBuf> {
    let cfg = run.cfg.robot_config();
    let n = run.cfg.dataset.n_samples;
    let samples = sample_dataset(
        &mut seeded_rng(run.cfg.seed),
        &cfg,
        n,
        run.cfg.robot.points_per_segment,
    )?;
    let path = run.path(DATASET);
    let mut w = create(&path)?;
    write_dataset(&mut w, &samples)?;
    w.flush()?;
    println!(
        "generated {n} samples with seed {} into {}",
        run.cfg.seed,
        path.display()
    );
    Ok(path)
}

pub fn train_shape(run: &Run, dataset: &Path, resume: Option<&Path>) -> Result<ShapeNodeModel> {
    let robot = run.cfg.robot_config();
    let file = File::open(dataset).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dataset.display()),
        ))
    })?;
    let data = read_dataset(BufReader::new(file), &robot)?;
    let s = &run.cfg.shape;
    let model = match resume {
        Some(p) => run.load_shape(p)?,
        None => ShapeNodeModel::new(
            &robot,
            s.hidden,
            s.solver,
            s.steps_per_segment,
            run.cfg.seed,
        )?,
    };
    let train_cfg = run.cfg.shape_train();
    let every = s.validate_every;
    let result = train_shape_node(model, &data, &train_cfg, |row: &HistoryRow| {
        if let Some(v) = row.val_loss {
            println!(
                "iteration {:>6}  train {:.4e}  val {:.4e}",
                row.iteration, row.train_loss, v
            );
        } else if row.iteration % every == 0 {
            println!(
                "iteration {:>6}  train {:.4e}",
                row.iteration, row.train_loss
            );
        }
    })?;
    result.best.save(&run.path(SHAPE_MODEL))?;
    result.last.save(&run.path(SHAPE_CHECKPOINT))?;
    let mut w = create(&run.path(SHAPE_HISTORY))?;
    result.history.write_csv(&mut w)?;
    w.flush()?;
    let (train_idx, val_idx) =
        split_indices(data.len(), train_cfg.validation_fraction, train_cfg.seed);
    let pick =
        |idx: &[usize]| -> Vec<ShapeSample> { idx.iter().map(|&i| data[i].clone()).collect() };
    let train_rmse = evaluate_shape_rmse(&result.best, &pick(&train_idx))?;
    println!("final train RMSE: {}", fmt_stats(&train_rmse));
    if !val_idx.is_empty() {
        let val_rmse = evaluate_shape_rmse(&result.best, &pick(&val_idx))?;
        println!("final val RMSE: {}", fmt_stats(&val_rmse));
    }
    Ok(result.best)
}

pub fn train_control(
    run: &Run,
    shape_path: &Path,
    scenario: ControlScenario,
    resume: Option<&Path>,
) -> Result<ControlNodeModel> {
    let shape = run.load_shape(shape_path)?;
    let c = &run.cfg.control;
    let policy = match resume {
        Some(p) => run.load_control(p)?,
        None => {
            let mut p = ControlNodeModel::new(&shape.robot, c.hidden, run.cfg.seed)?;
            p.horizon = c.horizon;
            p.dt = c.dt;
            p.rate_scale = c.rate_scale;
            p.solver = c.solver;
            p.validate()?;
            p
        }
    };
    let train_cfg = run.cfg.control_train(scenario)?;
    let every = c.evaluate_every;
    let result = train_control_node(
        policy,
        &shape,
        &run.cfg.loss_config(),
        &train_cfg,
        |row: &HistoryRow| {
            if row.iteration % every == 0 {
                let v = row
                    .val_loss
                    .map(|v| format!("  eval {v:.4e}"))
                    .unwrap_or_default();
                println!(
                    "iteration {:>6}  train {:.4e}{v}",
                    row.iteration, row.train_loss
                );
            }
        },
    )?;
    result
        .model
        .save(&run.path(&control_model_name(scenario)))?;
    result
        .last
        .save(&run.path(&control_checkpoint_name(scenario)))?;
    let mut w = create(&run.path(&control_history_name(scenario)))?;
    result.history.write_csv(&mut w)?;
    w.flush()?;
    if let Some(v) = result.history.last_val_loss() {
        println!("final evaluation loss: {v:.6e}");
    }
    Ok(result.model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalScenario {
    /// Held-out shape estimation error.
    Shape,
    /// Closed-loop tracking of every configured trajectory.
    Tracking,
    /// Helix tracking under each configured payload.
    Payload,
    /// Square tracking, closed-loop against open-loop Jacobian control.
    Compare,
    /// Circle and square tracking next to an obstacle, tracking-only policy
    /// against the obstacle-trained one.
    Obstacle,
}

pub struct EvalModels<'a> {
    pub shape: &'a Path,
    pub control: &'a Path,
    pub obstacle_control: &'a Path,
}

pub fn evaluate(run: &Run, scenario: EvalScenario, models: &EvalModels) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    match scenario {
        EvalScenario::Shape => {
            let shape = run.load_shape(models.shape)?;
            let e = &run.cfg.evaluation;
            let robot = run.cfg.robot_config();
            let mut samples = Vec::new();
            for trial in 0..e.shape_trials {
                let mut rng = seeded_rng(run.cfg.seed + trial as u64);
                rng.set_stream(SHAPE_TRIAL_STREAM);
                samples.extend(sample_dataset(
                    &mut rng,
                    &robot,
                    e.shape_samples_per_trial,
                    run.cfg.robot.points_per_segment,
                )?);
            }
            let mut w = create(&run.path("shape_trials.csv"))?;
            write_dataset(&mut w, &samples)?;
            w.flush()?;
            let stats = evaluate_shape_rmse(&shape, &samples)?;
            table.push(
                format!("{}-segment shape", robot.n_segments),
                stats,
                e.shape_trials,
            )?;
        }
        EvalScenario::Tracking => {
            let policy = run.load_control(models.control)?;
            for &kind in &run.cfg.evaluation.trajectories {
                let logs = tracking_runs(
                    run,
                    &policy,
                    kind,
                    0.0,
                    None,
                    &format!("tracking_{}", kind.name()),
                )?;
                table.push(kind.name(), evaluate_tracking(&logs)?, logs.len())?;
                overlay(run, &format!("tracking_{}", kind.name()), &logs, None)?;
            }
        }
        EvalScenario::Payload => {
            let policy = run.load_control(models.control)?;
            let mut first_runs = Vec::new();
            for &g in &run.cfg.evaluation.payloads {
                let stem = format!("payload_{g}g");
                let logs = tracking_runs(run, &policy, TrajectoryKind::Helix, g, None, &stem)?;
                table.push(
                    format!("helix {g} g"),
                    evaluate_tracking(&logs)?,
                    logs.len(),
                )?;
                first_runs.push((
                    format!("{g} g"),
                    logs.into_iter().next().unwrap_or_default(),
                ));
            }
            let traj = run.trajectory(TrajectoryKind::Helix);
            let reference = reference_points(&traj, first_runs.first().map(|(_, l)| l))?;
            let colors = ["blue", "teal", "orange", "purple", "brown"];
            let mut series = vec![Series {
                label: "reference",
                color: "red",
                points: &reference,
            }];
            let tips: Vec<(String, Vec<Vector3<f64>>)> = first_runs
                .iter()
                .map(|(l, log)| (l.clone(), log.rows.iter().map(|r| r.tip).collect()))
                .collect();
            for (k, (label, pts)) in tips.iter().enumerate() {
                series.push(Series {
                    label,
                    color: colors[k % colors.len()],
                    points: pts,
                });
            }
            std::fs::write(
                run.path("payload_helix.svg"),
                svg_overlay("helix under payload", &series, None),
            )?;
        }
        EvalScenario::Compare => {
            let policy = run.load_control(models.control)?;
            let shape = run.load_shape(models.shape)?;
            let closed = tracking_runs(
                run,
                &policy,
                TrajectoryKind::Square,
                0.0,
                None,
                "compare_closed",
            )?;
            let robot = run.robot();
            let traj = run.trajectory(TrajectoryKind::Square);
            let mut open = Vec::new();
            for r in 0..run.cfg.evaluation.tracking_runs {
                let log = open_loop_jacobian_track(
                    &shape,
                    &robot,
                    &traj,
                    &run.tracking_options(&traj, r, None),
                )?;
                write_log(
                    &run.path(&format!("logs/compare_open_run{r}.csv")),
                    &log,
                    shape.robot.action_dim(),
                )?;
                open.push(log);
            }
            table.push(
                "square closed-loop",
                evaluate_tracking(&closed)?,
                closed.len(),
            )?;
            table.push("square open-loop", evaluate_tracking(&open)?, open.len())?;
            let reference = reference_points(&traj, closed.first())?;
            let c: Vec<Vector3<f64>> = closed
                .first()
                .map(|l| l.rows.iter().map(|r| r.tip).collect())
                .unwrap_or_default();
            let o: Vec<Vector3<f64>> = open
                .first()
                .map(|l| l.rows.iter().map(|r| r.tip).collect())
                .unwrap_or_default();
            let svg = svg_overlay(
                "square: closed-loop against open-loop",
                &[
                    Series {
                        label: "reference",
                        color: "red",
                        points: &reference,
                    },
                    Series {
                        label: "closed-loop",
                        color: "blue",
                        points: &c,
                    },
                    Series {
                        label: "open-loop",
                        color: "orange",
                        points: &o,
                    },
                ],
                None,
            );
            std::fs::write(run.path("compare_square.svg"), svg)?;
        }
        EvalScenario::Obstacle => {
            let obstacle = run.cfg.obstacle_spec()?;
            let tracking = run.load_control(models.control)?;
            let avoiding = run.load_control(models.obstacle_control)?;
            let mut counts =
                csv::Writer::from_writer(create(&run.path("obstacle_violations.csv"))?);
            counts.write_record(["trajectory", "policy", "violations", "ticks"])?;
            for kind in [TrajectoryKind::Circle, TrajectoryKind::Square] {
                for (label, policy) in [("tracking", &tracking), ("obstacle", &avoiding)] {
                    let stem = format!("obstacle_{}_{label}", kind.name());
                    let logs =
                        tracking_runs(run, policy, kind, 0.0, Some(obstacle.clone()), &stem)?;
                    let v: usize = logs.iter().map(|l| l.violations(&obstacle)).sum();
                    let ticks: usize = logs.iter().map(|l| l.rows.len()).sum();
                    counts.write_record([
                        kind.name().to_string(),
                        label.to_string(),
                        v.to_string(),
                        ticks.to_string(),
                    ])?;
                    println!(
                        "{} with the {label} policy: {v} of {ticks} ticks inside the clearance",
                        kind.name()
                    );
                    table.push(
                        format!("{} {label} policy", kind.name()),
                        evaluate_tracking(&logs)?,
                        logs.len(),
                    )?;
                    overlay(run, &stem, &logs, Some(obstacle.center()))?;
                }
            }
            counts.flush()?;
        }
    }
    write_table(run, &format!("metrics_{}", scenario_name(scenario)), &table)?;
    Ok(table)
}

pub fn scenario_name(s: EvalScenario) -> &'static str {
    match s {
        EvalScenario::Shape => "shape",
        EvalScenario::Tracking => "tracking",
        EvalScenario::Payload => "payload",
        EvalScenario::Compare => "compare",
        EvalScenario::Obstacle => "obstacle",
    }
}

/// Seeded closed-loop runs, each written to `logs/{stem}_run{r}.csv`.
fn tracking_runs(
    run: &Run,
    policy: &ControlNodeModel,
    kind: TrajectoryKind,
    payload: f64,
    obstacle: Option<ObstacleSpec>,
    stem: &str,
) -> Result<Vec<TrackingLog>> {
    std::fs::create_dir_all(run.path("logs"))?;
    let robot = run.robot().with_payload(payload)?;
    let traj = run.trajectory(kind);
    let mut logs = Vec::new();
    for r in 0..run.cfg.evaluation.tracking_runs {
        let log = closed_loop_track(
            policy,
            &robot,
            &traj,
            &run.tracking_options(&traj, r, obstacle.clone()),
        )?;
        write_log(
            &run.path(&format!("logs/{stem}_run{r}.csv")),
            &log,
            policy.robot.action_dim(),
        )?;
        logs.push(log);
    }
    Ok(logs)
}

fn reference_points(traj: &Trajectory, log: Option<&TrackingLog>) -> Result<Vec<Vector3<f64>>> {
    match log {
        Some(l) if !l.rows.is_empty() => Ok(l.rows.iter().map(|r| r.goal).collect()),
        _ => (0..=200)
            .map(|i| traj.at(traj.period * i as f64 / 200.0))
            .collect(),
    }
}

fn overlay(
    run: &Run,
    stem: &str,
    logs: &[TrackingLog],
    obstacle: Option<Vector3<f64>>,
) -> Result<()> {
    let first = logs.first();
    let reference: Vec<Vector3<f64>> = first
        .map(|l| l.rows.iter().map(|r| r.goal).collect())
        .unwrap_or_default();
    let achieved: Vec<Vector3<f64>> = first
        .map(|l| l.rows.iter().map(|r| r.tip).collect())
        .unwrap_or_default();
    let svg = svg_overlay(
        stem,
        &[
            Series {
                label: "reference",
                color: "red",
                points: &reference,
            },
            Series {
                label: "achieved",
                color: "blue",
                points: &achieved,
            },
        ],
        obstacle,
    );
    std::fs::write(run.path(&format!("{stem}.svg")), svg)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopMode {
    Open,
    Closed,
}

pub struct RolloutRequest<'a> {
    pub trajectory: TrajectoryKind,
    pub mode: LoopMode,
    pub payload: f64,
    pub obstacle: Option<[f64; 3]>,
    pub shape: &'a Path,
    pub control: &'a Path,
}

pub fn rollout(run: &Run, req: &RolloutRequest) -> Result<(PathBuf, TrackingLog)> {
    let robot = run.robot().with_payload(req.payload)?;
    let traj = run.trajectory(req.trajectory);
    let obstacle = req
        .obstacle
        .map(|c| ObstacleSpec::new(c, run.cfg.obstacle.threshold_sq))
        .transpose()?;
    let opts = run.tracking_options(&traj, 0, obstacle);
    let (log, mode) = match req.mode {
        LoopMode::Closed => (
            closed_loop_track(&run.load_control(req.control)?, &robot, &traj, &opts)?,
            "closed",
        ),
        LoopMode::Open => (
            open_loop_jacobian_track(&run.load_shape(req.shape)?, &robot, &traj, &opts)?,
            "open",
        ),
    };
    let path = run.path(&format!("rollout_{}_{mode}.csv", req.trajectory.name()));
    write_log(&path, &log, run.cfg.robot_config().action_dim())?;
    if !log.rows.is_empty() {
        println!(
            "{}-loop {}: {}",
            mode,
            req.trajectory.name(),
            fmt_stats(&evaluate_tracking(std::slice::from_ref(&log))?)
        );
    }
    println!("wrote {} rows to {}", log.rows.len(), path.display());
    Ok((path, log))
}
