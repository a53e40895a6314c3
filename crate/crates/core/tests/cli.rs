use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use asuflex::harness::RunConfig;

fn asuflex(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asuflex"))
        .args(args)
        .env("ASUFLEX_OUT", out_dir)
        .output()
        .expect("binary runs")
}

/// One-episode config with a model path inside `dir`.
fn small_config(dir: &Path, seeds: Vec<u64>) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.seeds = seeds;
    cfg.total_steps = 96;
    cfg.eval_every = 96;
    cfg.ddpg.warmup = 32;
    cfg.ddpg.batch = 16;
    cfg.paths.model = dir.join("model.json");
    cfg.paths.out_dir = dir.join("unused");
    let path = dir.join("run.json");
    cfg.save(&path).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn sysid_then_hierarchical_train() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg = small_config(dir.path(), vec![1]);
    let cfg = cfg.to_str().unwrap();

    let o = asuflex(&["sysid", "--config", cfg], &runs);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("model.json").exists());

    let o = asuflex(&["train", "--arch", "hier", "--config", cfg], &runs);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed_dir = runs.join("hierarchical").join("seed_1");
    for f in ["learning_curve.csv", "eval_curve.csv", "checkpoint_best.json", "best_trajectory.csv", "summary.json"] {
        assert!(seed_dir.join(f).exists(), "missing {f}");
    }

    let ck = seed_dir.join("checkpoint_best.json");
    let eval_dir = dir.path().join("eval");
    let o = asuflex(
        &["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "2", "--out", eval_dir.to_str().unwrap(), "--config", cfg],
        &runs,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(eval_dir.join("trajectory_ep0.csv").exists());
    assert!(eval_dir.join("trajectory_ep1.csv").exists());
    assert!(eval_dir.join("eval_report.json").exists());
}

#[test]
fn hierarchical_train_without_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), vec![1]);
    let o = asuflex(&["train", "--arch", "hier", "--config", cfg.to_str().unwrap()], &dir.path().join("runs"));
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("model.json") && msg.contains("asuflex sysid"), "{msg}");
}

#[test]
fn bad_config_exits_2_with_schema_help() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"version": 1, "total_steps": 0}"#).unwrap();
    let o = asuflex(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_terminal"));

    std::fs::write(&path, "{ not json").unwrap();
    let o = asuflex(&["config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&path, r#"{"version": 7}"#).unwrap();
    let o = asuflex(&["config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = asuflex(&["eval", "--checkpoint", dir.path().join("nope.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_prints_loadable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = asuflex(&["config"], dir.path());
    assert!(o.status.success());
    let cfg = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn seed_flag_overrides_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = asuflex(&["config", "--seed", "42"], dir.path());
    let cfg = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seeds, vec![42]);
}

#[test]
fn export_curves_merges_five_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg = small_config(dir.path(), vec![1, 2, 3, 4, 5]);
    let o = asuflex(&["train", "--arch", "direct", "--config", cfg.to_str().unwrap()], &runs);
    assert!(o.status.success(), "{}", stderr(&o));

    let merged = dir.path().join("curves.csv");
    let o = asuflex(
        &["export-curves", "--runs", runs.to_str().unwrap(), "--out", merged.to_str().unwrap()],
        &runs,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(&merged).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["arch", "seed", "step", "episode", "return", "cost", "violations", "terminal_dev"]
    );
    let seeds: BTreeSet<String> = rdr.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert_eq!(seeds.len(), 5);
}

#[test]
fn simulate_replays_script() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("mv.csv");
    let mut text = String::from("n_mac,xi_tur,xi_top,f_drain\n");
    for k in 0..10 {
        text.push_str(&format!("{},0.05,0.525,1.0\n", 35 + k));
    }
    std::fs::write(&script, text).unwrap();
    let out = dir.path().join("traj.csv");
    let o = asuflex(&["simulate", "--script", script.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = asuflex::agents::read_trajectory(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    for (k, r) in rows.iter().enumerate() {
        assert!((r.n_mac - (35 + k) as f64).abs() < 1e-9);
        assert!(r.setpoint.is_none());
    }
}
