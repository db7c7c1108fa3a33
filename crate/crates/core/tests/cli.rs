use std::path::Path;
use std::process::{Command, Output};

use deepslicing::model::{generate_scenario, ScenarioConfig, ScenarioParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deepslicing"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = generate_scenario(&ScenarioParams {
        n_slices: 2,
        users_per_slice: 2,
        ..ScenarioParams::default()
    })
    .unwrap();
    cfg.ddpg.episodes = 40;
    cfg.ddpg.batch_size = 16;
    cfg.ddpg.replay_capacity = 64;
    cfg.ddpg.hidden = vec![8, 8];
    let path = dir.join("small.toml");
    cfg.save(&path).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().count(), 2);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn missing_config_fails_with_message() {
    let o = run(&["train", "--config", "/nonexistent/scenario.toml", "--out", "/tmp/x"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn invalid_schema_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(small_config(dir.path())).unwrap();
    std::fs::write(&path, format!("unexpected_key = 3\n{text}")).unwrap();
    let o = run(&["solve", "--config", path.to_str().unwrap(), "--method", "sra"]);
    assert!(!o.status.success());
}

#[test]
fn sra_solve_writes_one_row_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["solve", "--method", "sra", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("method=sra final_utility="));
    let csv = std::fs::read_to_string(out.join("trace-sra.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config="));
    assert!(lines[1].starts_with("iter,sum_utility"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn solve_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut seen = Vec::new();
    for run_dir in ["one", "two"] {
        let out = dir.path().join(run_dir);
        let o = run(&[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--method",
            "admms",
            "--max-iters",
            "30",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        seen.push(std::fs::read(out.join("trace-admms.csv")).unwrap());
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn deepslicing_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "deepslicing",
        "--agents",
        dir.path().join("empty").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn deepslicing_solve_uses_trained_agents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let agents = dir.path().join("agents");
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", agents.to_str().unwrap()])
        .status
        .success());
    let out = dir.path().join("out");
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "deepslicing",
        "--agents",
        agents.to_str().unwrap(),
        "--max-iters",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trace-deepslicing.csv").exists());
}

#[test]
fn unknown_experiment_is_rejected() {
    let o = run(&["experiment", "fig9"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown experiment"));
}

#[test]
fn experiments_write_csv_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let out = dir.path().join("out");
    for (name, file, header) in [
        ("convergence", "convergence.csv", "method,iter,sum_utility"),
        ("allocation", "allocation.csv", "method,slice,user,slot,rate"),
        (
            "cdf",
            "cdf.csv",
            "slice,draw,d,agent_utility,oracle_utility,agent_objective,oracle_objective",
        ),
        ("models", "models.csv", "model,method,sum_utility,normalized"),
    ] {
        let o = run(&[
            "experiment",
            name,
            "--config",
            cfg_path.to_str().unwrap(),
            "--max-iters",
            "10",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(out.join(file)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config="));
        assert_eq!(lines.next().unwrap(), header);
        assert!(lines.next().is_some());
    }
    let cdf = std::fs::read_to_string(out.join("cdf.csv")).unwrap();
    assert_eq!(cdf.lines().count(), 2 + 2 * 200);
}

#[test]
fn config_round_trips_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["config", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let cfg = ScenarioConfig::load(&dir.path().join("scenario.toml")).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.num_slices(), 3);
    assert_eq!(cfg.num_users(), 15);
}

#[test]
fn validate_passes_and_reports_each_check() {
    let o = run(&["validate"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    let names: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["name"].to_string())
        .collect();
    assert!(names.iter().any(|n| n.contains("projection_vs_qp")));
    assert!(names.iter().any(|n| n.contains("corrupted_checkpoint")));
    assert!(text.contains("\"detail\":\"1000 instances\""));
}
