use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"[trainer]
env = "pointmass2d"
total_steps = 300
exploration_steps = 100
batch_size = 8
critic_hidden = 8
bins = 11
eval_interval = 100
eval_episodes = 2

[trainer.score]
hidden = 8
fourier_pairs = 2
time_hidden = 4
time_embed = 4

[trainer.diffusion]
steps = 2
"#;

fn dime(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dime"))
        .args(args)
        .env("DIME_OUT", out_root)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = dime(&["train", "--config", "/no/such/dir/run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dir/run.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[trainer]\nenv = \"bandit\"\nwarp_factor = 9\n");
    let o = dime(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.toml:3:1") && err.contains("warp_factor"), "{err}");
}

#[test]
fn unknown_environment_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[trainer]\nenv = \"cartpole\"\n");
    let o = dime(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_prints_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rows.csv");
    let o = dime(&["verify", "--suite", "projection", "--csv", csv.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().filter(|l| l.ends_with("pass")).count() >= 3, "{table}");
    assert!(!table.contains("FAIL"));
    assert!(fs::read_to_string(csv).unwrap().starts_with("name,value,bound,verdict\n"));
}

#[test]
fn unknown_suite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dime(&["verify", "--suite", "everything"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("projection"));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let cfg = write_config(dir.path(), "tiny.toml", TINY);

    // default run directory lives under DIME_OUT
    let o = dime(&["train", "--config", &cfg, "--seed", "4"], &root);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = root.join("pointmass2d-seed4");
    for f in ["config.toml", "metrics.jsonl", "metrics.csv", "timing.csv", "checkpoint.bin"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);

    // a repeat with the same seed writes identical metrics
    let again = dir.path().join("again");
    let o = dime(&["train", "--config", &cfg, "--seed", "4", "--out", again.to_str().unwrap()], &root);
    assert_eq!(o.status.code(), Some(0));
    for f in ["metrics.jsonl", "metrics.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let trace = dir.path().join("trace.csv");
    let o = dime(
        &["eval", "--run", run.to_str().unwrap(), "--episodes", "4", "--trace", trace.to_str().unwrap()],
        &root,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["returns"].as_array().unwrap().len(), 4);
    let trace = fs::read_to_string(trace).unwrap();
    assert!(trace.starts_with("t,s0,s1,s2,s3,a0,a1,r\n"));
    assert_eq!(trace.lines().count(), 201);

    let o = dime(&["report", "--runs", run.to_str().unwrap(), again.to_str().unwrap()], &root);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = root.join("report");
    assert!(report.join("aggregate.csv").is_file());
    assert!(fs::read_to_string(report.join("return.svg")).unwrap().contains("<polyline"));
}

#[test]
fn report_without_runs_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = dime(&["report", "--runs", empty.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("bins = 11\n", "bins = 11\ncritic_lr = 1e300\nactor_lr = 1e300\n");
    let cfg = write_config(dir.path(), "boom.toml", &text);
    let run = dir.path().join("boom");
    let o = dime(&["train", "--config", &cfg, "--out", run.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("abort.json")).unwrap()).unwrap();
    assert!(snap["step"].as_u64().is_some());
    assert!(!snap["parameter_norms"].as_array().unwrap().is_empty());
}
