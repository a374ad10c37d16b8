use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rdistill");

const TINY: &str = r#"
seeds = [0, 1]
[world]
n_intents = 6
n_attributes = 10
n_rules = 12
[data]
train_size = 120
test_size = 60
[train]
steps = 8
batch_size = 16
[encoder]
d_model = 16
d_ff = 16
d_reason = 8
[grpo]
sft_steps = 10
steps = 4
group_size = 4
prompts_per_step = 2
eval_prompts = 20
d_model = 16
d_ff = 16
"#;

fn rdistill(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nsteps = \"many\"\n").unwrap();
    assert_eq!(rdistill(&["train-distill", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(rdistill(&["train-distill", "--seeds", "3..1"]).status.code(), Some(2));
    let missing = dir.path().join("nowhere");
    assert_eq!(rdistill(&["report", missing.to_str().unwrap()]).status.code(), Some(3));
    let cfg = tiny_config(dir.path());
    let out = rdistill(&["train-distill", "--config", &cfg, "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn selftest_passes() {
    let out = rdistill(&["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 10);
    assert!(!text.contains("FAIL"));
}

#[test]
fn distill_run_directory_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let out = rdistill(&["train-distill", "--config", &cfg, "--method", "crsd_full", "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.resolved.json", "metrics.csv", "report.json", "training_log.jsonl", "timing.json", "comparison.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(a.join("training_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 8);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
        assert!(v["align"].as_f64().is_some());
    }
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let b = dir.path().join("b");
    assert!(rdistill(&["ablate", "--config", &cfg, "--seed", "1", "--out", b.to_str().unwrap()]).status.success());
    let table_dir = dir.path().join("table");
    let out = rdistill(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", table_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("Method"));
    for m in ["crsd_full", "crsd_no_reason", "crsd_random_reason"] {
        assert!(text.contains(m), "{m}");
    }
    assert!(table_dir.join("comparison.csv").is_file());

    let g = dir.path().join("g");
    assert!(rdistill(&["train-grpo", "--config", &cfg, "--seed", "0", "--out", g.to_str().unwrap()]).status.success());
    let mixed = rdistill(&["report", a.to_str().unwrap(), g.to_str().unwrap()]);
    assert_eq!(mixed.status.code(), Some(3));
}

#[test]
fn generated_data_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(rdistill(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    assert!(data.join("seed-0/train.jsonl").is_file());
    assert!(data.join("seed-1/world.json").is_file());

    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    let common = ["train-distill", "--config", &cfg, "--method", "baseline", "--single-thread"];
    let mut with_data = common.to_vec();
    with_data.extend(["--data", data.to_str().unwrap(), "--out", x.to_str().unwrap()]);
    let mut fresh = common.to_vec();
    fresh.extend(["--out", y.to_str().unwrap()]);
    assert!(rdistill(&with_data).status.success());
    assert!(rdistill(&fresh).status.success());
    assert_eq!(std::fs::read(x.join("report.json")).unwrap(), std::fs::read(y.join("report.json")).unwrap());
}
