use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = r#"
seeds = [0, 1]

[sim]
vehicle_count = 4
road_length = 120.0
horizon = 10
seed = 3

[dqn]
episodes = 20
learning_starts = 40

[mcts]
iterations_per_step = 8

[hcs]
epochs = 4

[collect]
episodes = 30
iterations_per_step = 4
episodes_per_search = 10

[sweep]
sizes = [4, 8]
seeds = [0, 1]
"#;

fn astcrit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astcrit"))
        .arg("--config")
        .arg(dir.join("micro.toml"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = astcrit(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("micro.toml"), MICRO).unwrap();
    dir
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = setup();
    let d = dir.path();
    assert!(ok(d, &["train-sut"]).contains("collisions"));
    assert!(ok(d, &["collect", "--mode", "ast-heuristic"]).contains("snapshots"));
    ok(d, &["label", "--oracle"]);
    ok(d, &["train-hcs"]);
    for reward in ["heur", "hcs"] {
        let out = ok(d, &["search", "--reward", reward, "--seeds", "0..2"]);
        assert!(out.contains("searches"), "{out}");
        ok(d, &["evaluate", "--reward", reward]);
        assert!(ok(d, &["report", "--reward", reward]).contains("seeds found a failure"));
    }
    assert_eq!(std::fs::read_dir(d.join("run/trajectories/heur")).unwrap().count(), 2);

    let frames = ok(d, &["render", "--reward", "heur", "--seed", "1"]);
    assert!(frames.starts_with("trajectory reward=heur"));
    assert!(frames.contains("--- step 0"));

    // compare needs failures on both sides; either outcome is a clean exit
    let o = astcrit(d, &["compare", "--base", "heur", "--reward", "hcs"]);
    if o.status.success() {
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("metric,"));
    } else {
        assert!(String::from_utf8_lossy(&o.stderr).contains("no failure trajectories"));
    }
}

#[test]
fn missing_artifacts_name_the_producing_stage() {
    let dir = setup();
    let o = astcrit(dir.path(), &["train-hcs"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("run `label` first"), "{err}");

    let o = astcrit(dir.path(), &["search", "--reward", "heur"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-sut"));
}

#[test]
fn argument_errors() {
    let dir = setup();
    let o = astcrit(dir.path(), &["search", "--reward", "fancy"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expected heur, qcs or hcs"));

    let o = astcrit(dir.path(), &["search", "--reward", "heur", "--seeds", "5..5"]);
    assert_eq!(o.status.code(), Some(2));

    let o = astcrit(dir.path(), &["label", "--oracle", "--interactive"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_reported() {
    let dir = setup();
    std::fs::write(dir.path().join("micro.toml"), "[sim]\nlane_count = 0\n").unwrap();
    let o = astcrit(dir.path(), &["train-sut"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
}
