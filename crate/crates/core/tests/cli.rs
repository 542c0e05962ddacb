use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
seed = 3

[model]
d_tok = 16
d_red = 8
decoder_layers = 1
head_layers = 1

[data]
samples = 32

[stage1]
epochs = 1
batch = 4

[stage2]
steps = 4
batch = 4

[stage3]
steps = 6
batch = 4
balance_every = 2

[adapt]
steps = 20
"#;

fn omniweave(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omniweave")).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.toml"), TOY).unwrap();
    dir
}

#[test]
fn defaults_round_trip_through_config_flag() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&omniweave(dir.path(), &["defaults"]));
    assert!(text.contains("[stage3]") && text.contains("[[modalities]]"));
    std::fs::write(dir.path().join("d.toml"), &text).unwrap();
    let cfg = omniweave::config::RunConfig::load(&dir.path().join("d.toml")).unwrap();
    assert_eq!(cfg, omniweave::config::RunConfig::default());
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let dir = toy_dir();
    let d = dir.path();
    let c = ["--config", "toy.toml", "--metrics", "m.jsonl"];
    ok(&omniweave(d, &[&["pretrain1"][..], &c].concat()));
    ok(&omniweave(d, &[&["pretrain2", "--checkpoint", "stage1.owck"][..], &c].concat()));
    let train = ok(&omniweave(d, &[&["train", "--checkpoint", "stage2.owck"][..], &c].concat()));
    let reports: serde_json::Value = serde_json::from_str(&train).unwrap();
    assert!(reports.as_array().unwrap().iter().any(|r| r["metric"] == "miou"));

    let eval = ok(&omniweave(d, &["eval", "--config", "toy.toml", "--checkpoint", "stage3.owck", "--split", "train"]));
    assert!(eval.contains("accuracy"));
    let adapt: serde_json::Value = serde_json::from_str(&ok(&omniweave(d, &["adapt", "--config", "toy.toml", "--checkpoint", "stage3.owck"]))).unwrap();
    assert_eq!(adapt["bundle_unchanged"], true);

    let lines = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let stages: Vec<u64> = lines.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_u64().unwrap()).collect();
    assert_eq!(stages.first(), Some(&1));
    assert_eq!(stages.last(), Some(&3));
    assert_eq!(stages.iter().filter(|&&s| s == 3).count(), 6);
}

#[test]
fn stop_after_then_resume_completes_the_stage() {
    let dir = toy_dir();
    let d = dir.path();
    ok(&omniweave(d, &["pretrain1", "--config", "toy.toml", "--stop-after", "1", "--out", "part.owck"]));
    let resumed = omniweave(d, &["pretrain1", "--config", "toy.toml", "--checkpoint", "part.owck"]);
    ok(&resumed);
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("\"complete\":true"));
}

#[test]
fn wrong_stage_and_corrupt_checkpoints_exit_3() {
    let dir = toy_dir();
    let d = dir.path();
    ok(&omniweave(d, &["pretrain1", "--config", "toy.toml"]));
    let skip = omniweave(d, &["train", "--config", "toy.toml", "--checkpoint", "stage1.owck"]);
    assert_eq!(skip.status.code(), Some(3));

    let mut bytes = std::fs::read(d.join("stage1.owck")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(d.join("short.owck"), bytes).unwrap();
    let short = omniweave(d, &["pretrain2", "--config", "toy.toml", "--checkpoint", "short.owck"]);
    assert_eq!(short.status.code(), Some(3));
}

#[test]
fn bad_config_exits_1_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[stage3]\nbatch = 7\n").unwrap();
    let out = omniweave(dir.path(), &["pretrain1", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage3.batch"));
}

#[test]
fn gradcheck_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let clean: serde_json::Value = serde_json::from_str(&ok(&omniweave(dir.path(), &["gradcheck"]))).unwrap();
    assert_eq!(clean["passed"], true);
    let faulty = omniweave(dir.path(), &["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(faulty.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&faulty.stdout).unwrap();
    assert_eq!(report["passed"], false);
}
