use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[run]
seeds = [1]
name = "tiny"

[agent]
hidden_dim = 8
batch_size = 4

[agent.encoder]
feature_maps = [2, 2, 2]

[offline]
dataset_size = 200
eval_steps = 20
improvement_steps = 10
diag_batch = 8

[metrics]
cadence = 10
eval_episodes = 1

[probe]
samples = 8
n_probes = 2
amplitudes = [0.0, 0.5]
"#;

fn alix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alix"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn offline_then_probe_then_plot() {
    let dir = setup();
    let out = alix(dir.path(), &["offline", "-c", "tiny.toml", "-o", "runs"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tiny seed 1: return"));
    let seed = dir.path().join("runs/tiny/seed-1");
    for f in ["metrics.csv", "config.json", "checkpoint.bin", "summary.json"] {
        assert!(seed.join(f).exists(), "missing {f}");
    }

    let probe = alix(
        dir.path(),
        &[
            "probe",
            "-c",
            "tiny.toml",
            "-o",
            "probes",
            "--checkpoint",
            "runs/tiny/seed-{seed}/checkpoint.bin",
        ],
    );
    assert!(probe.status.success(), "{}", String::from_utf8_lossy(&probe.stderr));
    let report: serde_json::Value = serde_json::from_slice(&probe.stdout).unwrap();
    assert!(report["jacobian_frobenius"].as_f64().unwrap() > 0.0);
    assert_eq!(report["checkerboard"].as_array().unwrap().len(), 2);

    let plot = alix(dir.path(), &["plot", "runs/tiny/seed-1/metrics.csv", "-C", "td_loss,S"]);
    assert!(plot.status.success(), "{}", String::from_utf8_lossy(&plot.stderr));
    let svg = std::fs::read_to_string(seed.join("metrics.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("td_loss"));
}

#[test]
fn flags_override_the_file() {
    let dir = setup();
    let out = alix(
        dir.path(),
        &[
            "train",
            "-c",
            "tiny.toml",
            "-o",
            "online",
            "--seeds",
            "2",
            "--name",
            "flagged",
            "--set",
            "online.total_steps=30",
            "--set",
            "online.seed_steps=10",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("online/flagged/seed-2/config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["run"]["mode"], "online");
    assert_eq!(cfg["online"]["total_steps"], 30);
    assert_eq!(cfg["agent"]["hidden_dim"], 8);
}

#[test]
fn sweep_dry_run_lists_ablation() {
    let dir = setup();
    let out = alix(
        dir.path(),
        &["sweep", "-c", "tiny.toml", "--preset", "ablation", "--dry-run"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = serde_json::Deserializer::from_slice(&out.stdout)
        .into_iter::<serde_json::Value>()
        .map(|c| c.unwrap()["run"]["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(names.len(), 7);
    assert_eq!(names[0], "augmented");
    assert_eq!(names[6], "ten-step");
}

#[test]
fn bad_input_exits_with_usage_code() {
    let dir = setup();
    let out = alix(
        dir.path(),
        &["offline", "-c", "tiny.toml", "--set", "agent.no_such_field=1"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let missing = alix(dir.path(), &["offline", "-c", "absent.toml"]);
    assert_eq!(missing.status.code(), Some(1));
}
