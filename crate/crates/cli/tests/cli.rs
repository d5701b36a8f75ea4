use anode_cli::report::MetricsTable;
use anode_core::control_node::{evaluate_tracking, TrackingLog};
use anode_core::shape_node::ShapeNodeModel;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 11

[robot]
n_segments = 1
points_per_segment = 4

[dataset]
n_samples = 100

[shape]
hidden = [8, 8]
solver = "rk4"
steps_per_segment = 4
batch_size = 16
iterations = 6
validate_every = 3

[control]
hidden = [8, 8]
horizon = 2
batch_size = 4
iterations = 3
evaluate_every = 2
evaluation_episodes = 4

[evaluation]
shape_trials = 3
shape_samples_per_trial = 2
tracking_runs = 2
period = 10.0
ticks_per_period = 4
settle_ticks = 1
payloads = [0.0, 5.0, 10.0, 15.0, 20.0]
trajectories = ["circle", "square"]
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("run.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_anode"));
        cmd.arg("--config").arg(self.path("run.toml"));
        cmd.arg("--out").arg(self.out());
        cmd.args(args);
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ANODE_")) {
            cmd.env_remove(k);
        }
        cmd.envs(env.iter().copied());
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn trained(&self) -> &Self {
        self.ok(&["generate"]);
        self.ok(&["train-shape"]);
        self.ok(&["train-control"]);
        self
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn generate_writes_header_rows_and_is_deterministic() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&["generate"]);
    assert!(stdout.contains("100 samples") && stdout.contains("seed 11"));
    let data = lines(&sb.out().join("dataset.csv"));
    assert_eq!(data.len(), 101);
    assert!(data[0].starts_with("q0,q1,len0,px0,py0,pz0,px1"));
    let first = fs::read(sb.out().join("dataset.csv")).unwrap();
    sb.ok(&["generate"]);
    assert_eq!(fs::read(sb.out().join("dataset.csv")).unwrap(), first);
    assert!(sb.out().join("resolved_config.toml").is_file());
}

#[test]
fn four_segment_rows_have_the_documented_width() {
    let sb = Sandbox::new();
    let o = sb.run_env(
        &["generate"],
        &[
            ("ANODE_ROBOT_N_SEGMENTS", "4"),
            ("ANODE_DATASET_N_SAMPLES", "3"),
        ],
    );
    assert!(o.status.success());
    let data = lines(&sb.out().join("dataset.csv"));
    assert_eq!(data.len(), 4);
    for row in &data {
        assert_eq!(row.split(',').count(), 8 + 4 + 3 * (4 * 4 + 1));
    }
}

#[test]
fn seed_flag_and_environment_are_recorded() {
    let sb = Sandbox::new();
    sb.ok(&["generate", "--seed", "5"]);
    let resolved = fs::read_to_string(sb.out().join("resolved_config.toml")).unwrap();
    assert!(resolved.starts_with("seed = 5"));
    let copy = sb.path("copy");
    let again = Command::new(env!("CARGO_BIN_EXE_anode"))
        .arg("--config")
        .arg(sb.out().join("resolved_config.toml"))
        .arg("--out")
        .arg(&copy)
        .arg("generate")
        .output()
        .unwrap();
    assert!(again.status.success());
    assert_eq!(
        fs::read(copy.join("dataset.csv")).unwrap(),
        fs::read(sb.out().join("dataset.csv")).unwrap()
    );
}

#[test]
fn configuration_errors_exit_with_the_config_code() {
    let sb = Sandbox::new();
    assert_eq!(
        code(&sb.run_env(&["generate"], &[("ANODE_ROBOT_NOT_A_KEY", "1")])),
        3
    );
    fs::write(sb.path("run.toml"), "[shape]\nbatchsize = 3\n").unwrap();
    assert_eq!(code(&sb.run(&["generate"])), 3);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let sb = Sandbox::new();
    fs::write(sb.path("file"), "x").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_anode"))
        .arg("--config")
        .arg(sb.path("run.toml"))
        .arg("--out")
        .arg(sb.path("file").join("sub"))
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
}

#[test]
fn train_shape_reports_rmse_and_resumes_exactly() {
    let sb = Sandbox::new();
    sb.ok(&["generate"]);
    let stdout = sb.ok(&["train-shape"]);
    assert!(stdout.contains("final train RMSE: x̃"));
    assert!(stdout.contains("final val RMSE: x̃"));
    let full = lines(&sb.out().join("shape_history.csv"));
    assert_eq!(full.len(), 7);

    let half = sb.run_env(&["train-shape"], &[("ANODE_SHAPE_ITERATIONS", "3")]);
    assert!(half.status.success());
    let ckpt = sb.path("half.json");
    fs::copy(sb.out().join("shape_checkpoint.json"), &ckpt).unwrap();
    let resumed = sb.run(&["train-shape", "--resume", ckpt.to_str().unwrap()]);
    assert!(resumed.status.success());
    let tail = lines(&sb.out().join("shape_history.csv"));
    assert_eq!(tail.len(), 4);
    assert_eq!(tail[1..], full[4..]);
}

#[test]
fn corrupt_model_fails_cleanly() {
    let sb = Sandbox::new();
    sb.ok(&["generate"]);
    let bad = sb.path("bad.json");
    fs::write(&bad, "{\"kind\": \"shape-node\", \"payload\": {").unwrap();
    let o = sb.run(&["train-shape", "--resume", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(!sb.out().join("shape_model.json").exists());
    assert!(!sb.out().join("shape_history.csv").exists());
}

#[test]
fn dataset_for_another_robot_is_rejected() {
    let sb = Sandbox::new();
    let o = sb.run_env(&["generate"], &[("ANODE_ROBOT_N_SEGMENTS", "2")]);
    assert!(o.status.success());
    assert_eq!(code(&sb.run(&["train-shape"])), 3);
}

#[test]
fn train_control_checks_inputs_scenarios_and_resume() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["train-control"])), 3);
    sb.ok(&["generate"]);
    sb.ok(&["train-shape"]);
    assert_eq!(
        code(&sb.run_env(&["train-control"], &[("ANODE_CONTROL_ITERATIONS", "0")])),
        3
    );
    sb.ok(&["train-control"]);
    sb.ok(&["train-control", "--scenario", "obstacle"]);
    let tracking = lines(&sb.out().join("control_tracking_history.csv"));
    let obstacle = lines(&sb.out().join("control_obstacle_history.csv"));
    assert_eq!(tracking.len(), 4);
    assert_eq!(obstacle.len(), 4);
    assert_ne!(tracking[1], obstacle[1]);
    assert!(sb.out().join("control_tracking.json").is_file());

    let split = Sandbox::new();
    split.ok(&["generate"]);
    split.ok(&["train-shape"]);
    let first = split.run_env(&["train-control"], &[("ANODE_CONTROL_ITERATIONS", "2")]);
    assert!(first.status.success());
    let ckpt = split.path("first.json");
    fs::copy(split.out().join("control_tracking_checkpoint.json"), &ckpt).unwrap();
    split.ok(&["train-control", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(
        fs::read(split.out().join("control_tracking_checkpoint.json")).unwrap(),
        fs::read(sb.out().join("control_tracking_checkpoint.json")).unwrap(),
        "resumed training differs from the uninterrupted run"
    );
}

#[test]
fn evaluation_tables_logs_and_plots_agree() {
    let sb = Sandbox::new();
    sb.trained();
    assert_eq!(
        code(&sb.run(&["evaluate", "--scenario", "obstacle"])),
        3,
        "the obstacle policy has not been trained yet"
    );
    let stdout = sb.ok(&["evaluate", "--scenario", "shape"]);
    assert!(stdout.contains("x̃ RMSE (mm)") && stdout.contains("z̃ STD (mm)"));
    let shape = MetricsTable::read_csv(fs::File::open(sb.out().join("metrics_shape.csv")).unwrap())
        .unwrap();
    assert_eq!(shape.rows.len(), 1);
    assert_eq!(shape.rows[0].n_trials, 3);

    sb.ok(&["evaluate", "--scenario", "payload"]);
    let payload =
        MetricsTable::read_csv(fs::File::open(sb.out().join("metrics_payload.csv")).unwrap())
            .unwrap();
    assert_eq!(payload.rows.len(), 5);
    for (row, g) in payload.rows.iter().zip([0, 5, 10, 15, 20]) {
        let logs: Vec<TrackingLog> = (0..2)
            .map(|r| {
                let f =
                    fs::File::open(sb.out().join(format!("logs/payload_{g}g_run{r}.csv"))).unwrap();
                TrackingLog::read_csv(f).unwrap()
            })
            .collect();
        let recomputed = evaluate_tracking(&logs).unwrap();
        for a in 0..3 {
            assert!((recomputed.rmse[a] - row.stats.rmse[a]).abs() < 1e-9);
            assert!((recomputed.std[a] - row.stats.std[a]).abs() < 1e-9);
        }
    }
    let svg = fs::read_to_string(sb.out().join("payload_helix.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .count(),
        6
    );

    sb.ok(&["evaluate", "--scenario", "tracking"]);
    for t in ["circle", "square"] {
        let svg = fs::read_to_string(sb.out().join(format!("tracking_{t}.svg"))).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }
    let missing = sb.run(&[
        "evaluate",
        "--scenario",
        "tracking",
        "--control-model",
        "nope.json",
    ]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn evaluation_is_reproducible() {
    let a = Sandbox::new();
    let b = Sandbox::new();
    for sb in [&a, &b] {
        sb.trained();
        sb.ok(&["train-control", "--scenario", "obstacle"]);
        sb.ok(&["evaluate", "--scenario", "compare"]);
        sb.ok(&["evaluate", "--scenario", "obstacle"]);
    }
    for name in [
        "metrics_compare.csv",
        "metrics_obstacle.csv",
        "obstacle_violations.csv",
        "logs/compare_closed_run1.csv",
        "logs/compare_open_run0.csv",
        "logs/obstacle_square_obstacle_run1.csv",
        "control_obstacle.json",
        "shape_model.json",
    ] {
        assert_eq!(
            fs::read(a.out().join(name)).unwrap(),
            fs::read(b.out().join(name)).unwrap(),
            "{name}"
        );
    }
    let header = lines(&a.out().join("logs/obstacle_circle_tracking_run0.csv"))[0].clone();
    assert!(header.ends_with(",min_obstacle_dist"));
}

#[test]
fn rollout_flags() {
    let sb = Sandbox::new();
    sb.trained();
    let both = sb.run(&[
        "rollout",
        "--trajectory",
        "circle",
        "--open-loop",
        "--closed-loop",
    ]);
    assert_eq!(code(&both), 2);

    sb.ok(&["rollout", "--trajectory", "circle"]);
    let plain = fs::read(sb.out().join("rollout_circle_closed.csv")).unwrap();
    sb.ok(&[
        "rollout",
        "--trajectory",
        "circle",
        "--closed-loop",
        "--payload",
        "0",
    ]);
    assert_eq!(
        fs::read(sb.out().join("rollout_circle_closed.csv")).unwrap(),
        plain
    );

    sb.ok(&[
        "rollout",
        "--trajectory",
        "square",
        "--obstacle",
        "0.02,0,0.1",
    ]);
    let header = lines(&sb.out().join("rollout_square_closed.csv"))[0].clone();
    assert!(header.ends_with("q0,q1,min_obstacle_dist"));

    sb.ok(&[
        "rollout",
        "--trajectory",
        "circle",
        "--open-loop",
        "--payload",
        "10",
    ]);
    let log =
        TrackingLog::read_csv(fs::File::open(sb.out().join("rollout_circle_open.csv")).unwrap())
            .unwrap();
    let model = ShapeNodeModel::load(&sb.out().join("shape_model.json")).unwrap();
    assert_eq!(log.rows.len(), 4);
    for r in &log.rows {
        assert_eq!(r.observed, model.predict_shape(&r.q).unwrap().tip());
        assert_ne!(r.observed, r.tip);
    }
}
