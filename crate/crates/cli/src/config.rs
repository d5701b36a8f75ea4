//! Run configuration: TOML file, environment overrides, command-line seed.

use anode_core::control_node::{ControlLossConfig, ControlScenario, ControlTrainConfig};
use anode_core::odeint::SolverKind;
use anode_core::robot::{ObstacleSpec, RobotConfig, TrajectoryKind};
use anode_core::shape_node::ShapeTrainConfig;
use anode_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Prefix of environment variables that override configuration keys,
/// e.g. `ANODE_SHAPE_ITERATIONS=500` or `ANODE_SEED=3`.
pub const ENV_PREFIX: &str = "ANODE_";

/// Distance of the default obstacle from the reference paths, metres.
pub const DEFAULT_OBSTACLE_DISTANCE: f64 = 0.04;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub robot: RobotSection,
    pub dataset: DatasetSection,
    pub shape: ShapeSection,
    pub control: ControlSection,
    pub loss: LossSection,
    pub obstacle: ObstacleSection,
    pub evaluation: EvaluationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotSection {
    pub n_segments: usize,
    pub segment_length: f64,
    pub curvature_bound: f64,
    pub mismatch_amplitude: f64,
    pub payload_compliance: f64,
    pub points_per_segment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeSection {
    pub hidden: [usize; 2],
    pub solver: SolverKind,
    pub steps_per_segment: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub validate_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub hidden: [usize; 2],
    pub horizon: usize,
    pub dt: f64,
    pub rate_scale: f64,
    pub solver: SolverKind,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub reset_fraction: f64,
    pub target_radius: f64,
    pub evaluate_every: u64,
    pub evaluation_episodes: usize,
    pub scenario: ControlScenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub obstacle_weight: f64,
    pub obstacle_tau: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleSection {
    /// Obstacle centre; empty places it 4 cm from the circle and square paths.
    pub center: Vec<f64>,
    pub threshold_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub shape_trials: usize,
    pub shape_samples_per_trial: usize,
    pub tracking_runs: usize,
    pub trajectories: Vec<TrajectoryKind>,
    pub payloads: Vec<f64>,
    pub period: f64,
    pub ticks_per_period: usize,
    pub settle_ticks: usize,
    pub noise_std: f64,
}

impl Default for RobotSection {
    fn default() -> Self {
        let r = RobotConfig::with_segments(3);
        Self {
            n_segments: r.n_segments,
            segment_length: r.segment_lengths[0],
            curvature_bound: r.curvature_bound,
            mismatch_amplitude: r.mismatch_amplitude,
            payload_compliance: r.payload_compliance,
            points_per_segment: 10,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_samples: 10_000 }
    }
}

impl Default for ShapeSection {
    fn default() -> Self {
        let t = ShapeTrainConfig::default();
        Self {
            hidden: [256, 256],
            solver: SolverKind::FixedAdams,
            steps_per_segment: 10,
            batch_size: t.batch_size,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            validation_fraction: t.validation_fraction,
            validate_every: t.validate_every,
        }
    }
}

impl Default for ControlSection {
    fn default() -> Self {
        let t = ControlTrainConfig::default();
        Self {
            hidden: [256, 256],
            horizon: 10,
            dt: 1.0,
            rate_scale: 1.0,
            solver: SolverKind::Rk4,
            batch_size: t.batch_size,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            reset_fraction: t.reset_fraction,
            target_radius: t.target_radius,
            evaluate_every: t.evaluate_every,
            evaluation_episodes: t.evaluation_episodes,
            scenario: t.scenario,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let l = ControlLossConfig::default();
        Self {
            alpha: l.alpha,
            beta: l.beta,
            gamma: l.gamma,
            lambda: l.lambda,
            obstacle_weight: l.obstacle_weight,
            obstacle_tau: l.obstacle_tau,
            noise_std: l.noise_std,
        }
    }
}

impl Default for ObstacleSection {
    fn default() -> Self {
        Self {
            center: Vec::new(),
            threshold_sq: ObstacleSpec::DEFAULT_THRESHOLD_SQ,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            shape_trials: 50,
            shape_samples_per_trial: 20,
            tracking_runs: 5,
            trajectories: vec![
                TrajectoryKind::Circle,
                TrajectoryKind::Square,
                TrajectoryKind::SShape,
                TrajectoryKind::Ellipse,
            ],
            payloads: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            period: 100.0,
            ticks_per_period: 200,
            settle_ticks: 30,
            noise_std: 0.00033,
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the file, then `ANODE_*` overrides from `env`.
    pub fn resolve<I>(text: Option<&str>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = text {
            let file: toml::Table =
                toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(file));
        }
        let sections: Vec<String> = value
            .as_table()
            .map(|t| {
                t.iter()
                    .filter(|(_, v)| v.is_table())
                    .map(|(k, _)| k.clone())
                    .collect()
            })
            .unwrap_or_default();
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let name = key[ENV_PREFIX.len()..].to_ascii_lowercase();
            let (path, field) = match sections.iter().find(|s| name.starts_with(&format!("{s}_"))) {
                Some(s) => (Some(s.clone()), name[s.len() + 1..].to_string()),
                None => (None, name),
            };
            let mut patch = toml::Table::new();
            patch.insert(field, parse_value(&raw));
            let patch = match path {
                Some(s) => {
                    let mut outer = toml::Table::new();
                    outer.insert(s, toml::Value::Table(patch));
                    outer
                }
                None => patch,
            };
            merge(&mut value, toml::Value::Table(patch));
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text =
            match path {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?),
                None => None,
            };
        Self::resolve(text.as_deref(), std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.robot_config().validate()?;
        self.shape_train().validate()?;
        self.loss_config().validate()?;
        if self.robot.points_per_segment != self.shape.steps_per_segment {
            return Err(Error::Config(format!(
                "the Shape-NODE predicts one point per step: points_per_segment ({}) must equal steps_per_segment ({})",
                self.robot.points_per_segment, self.shape.steps_per_segment
            )));
        }
        if !self.obstacle.center.is_empty() && self.obstacle.center.len() != 3 {
            return Err(Error::Config(
                "obstacle centre needs three coordinates".into(),
            ));
        }
        self.obstacle_spec()?;
        if self.evaluation.shape_trials == 0
            || self.evaluation.shape_samples_per_trial == 0
            || self.evaluation.tracking_runs == 0
        {
            return Err(Error::Config("evaluation needs at least one trial".into()));
        }
        if self.evaluation.ticks_per_period == 0 || !(self.evaluation.period > 0.0) {
            return Err(Error::Config(
                "evaluation period and tick count must be positive".into(),
            ));
        }
        if self
            .evaluation
            .payloads
            .iter()
            .any(|&p| !(0.0..=20.0).contains(&p))
        {
            return Err(Error::Config("payloads must lie in [0, 20] g".into()));
        }
        Ok(())
    }

    pub fn robot_config(&self) -> RobotConfig {
        let r = &self.robot;
        let mut cfg = RobotConfig::with_segments(r.n_segments);
        cfg.segment_lengths = vec![r.segment_length; r.n_segments];
        cfg.curvature_bound = r.curvature_bound;
        cfg.q_min = vec![-r.curvature_bound; 2 * r.n_segments];
        cfg.q_max = vec![r.curvature_bound; 2 * r.n_segments];
        cfg.mismatch_amplitude = r.mismatch_amplitude;
        cfg.payload_compliance = r.payload_compliance;
        cfg
    }

    pub fn shape_train(&self) -> ShapeTrainConfig {
        let s = &self.shape;
        ShapeTrainConfig {
            batch_size: s.batch_size,
            iterations: s.iterations,
            learning_rate: s.learning_rate,
            validation_fraction: s.validation_fraction,
            validate_every: s.validate_every,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> ControlLossConfig {
        let l = &self.loss;
        ControlLossConfig {
            alpha: l.alpha,
            beta: l.beta,
            gamma: l.gamma,
            lambda: l.lambda,
            obstacle_weight: l.obstacle_weight,
            obstacle_tau: l.obstacle_tau,
            noise_std: l.noise_std,
        }
    }

    pub fn obstacle_spec(&self) -> Result<ObstacleSpec> {
        match self.obstacle.center.as_slice() {
            [] => {
                let mut o = ObstacleSpec::near_reference_paths(
                    &self.robot_config(),
                    DEFAULT_OBSTACLE_DISTANCE,
                )?;
                o.threshold_sq = self.obstacle.threshold_sq;
                Ok(o)
            }
            &[x, y, z] => ObstacleSpec::new([x, y, z], self.obstacle.threshold_sq),
            _ => Err(Error::Config(
                "obstacle centre needs three coordinates".into(),
            )),
        }
    }

    pub fn control_train(&self, scenario: ControlScenario) -> Result<ControlTrainConfig> {
        let c = &self.control;
        let cfg = ControlTrainConfig {
            batch_size: c.batch_size,
            iterations: c.iterations,
            learning_rate: c.learning_rate,
            seed: self.seed,
            reset_fraction: c.reset_fraction,
            target_radius: c.target_radius,
            scenario,
            obstacle: Some(self.obstacle_spec()?),
            evaluate_every: c.evaluate_every,
            evaluation_episodes: c.evaluation_episodes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
