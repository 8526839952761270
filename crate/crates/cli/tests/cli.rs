use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn oshp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oshp"))
        .current_dir(dir)
        .env_remove("OSHP_OUTPUT_ROOT")
        .args(args)
        .output()
        .expect("spawn oshp")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = oshp(dir, args);
    assert!(
        out.status.success(),
        "oshp {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SYNTH: &str = "image_size = 32\nmeta_train_support = 6\nmeta_train_query = 6\nmeta_test_support = 6\nmeta_test_query = 6\n";

const TRAIN: &str = "max_epoch = 2
episodes_per_epoch = 4
[model.encoder]
input_size = [32, 32]
feature_dim = 8
cgs_dim = 8
fgs_dim = 8
stage_widths = [4, 8]
";

/// Generates a small dataset and a test list in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("synth.toml"), SYNTH).unwrap();
    std::fs::write(d.join("c.toml"), TRAIN).unwrap();
    ok(d, &["gen-synthetic", "--out", "data", "--config", "synth.toml", "--seed", "3"]);
    ok(
        d,
        &[
            "make-testlist",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--min-evals",
            "2",
            "--out",
            "list.csv",
        ],
    );
    tmp
}

fn sha256(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

fn train(d: &Path, out: &str) -> PathBuf {
    ok(
        d,
        &[
            "train",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--config",
            "c.toml",
            "--seed",
            "7",
            "--out",
            out,
        ],
    );
    d.join(out)
}

#[test]
fn same_seed_training_gives_identical_checkpoints() {
    let tmp = workspace();
    let a = train(tmp.path(), "run_a");
    let b = train(tmp.path(), "run_b");
    assert_eq!(sha256(&a.join("checkpoint.json")), sha256(&b.join("checkpoint.json")));
    assert_eq!(sha256(&a.join("train_log.jsonl")), sha256(&b.join("train_log.jsonl")));
    let log = std::fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4, "two steps per epoch, two epochs");
    let run = std::fs::read_to_string(a.join("run.json")).unwrap();
    assert!(run.contains("\"seed\": 7"), "{run}");
    assert!(run.contains("\"max_epoch\": 2"), "{run}");
}

#[test]
fn oracle_scores_one_hundred_percent() {
    let tmp = workspace();
    let d = tmp.path();
    let out = ok(
        d,
        &[
            "eval",
            "--oracle",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--test-list",
            "list.csv",
            "--protocol",
            "k-way",
            "--report",
            "report.json",
        ],
    );
    let table = String::from_utf8(out.stdout).unwrap();
    let row = table.lines().find(|l| l.starts_with("synthetic")).unwrap();
    let cells: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(&cells[2..5], &["100.00", "100.00", "100.00"], "{table}");
    assert!(d.join("report.json.run.json").exists());
}

#[test]
fn report_averages_match_hand_computed_means() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let rows = [
        ("f1", [10.0, 50.0, 80.0], [20.0, 60.0, 70.0]),
        ("f2", [20.0, 40.0, 90.0], [30.0, 50.0, 65.0]),
        ("f3", [33.0, 45.5, 85.0], [25.0, 55.0, 75.5]),
    ];
    let json_rows: Vec<String> = rows
        .iter()
        .map(|(f, k, o)| {
            format!(
                r#"{{"fold":"{f}","k_way_novel":{},"k_way_human":{},"k_way_accuracy":{},"one_way_novel":{},"one_way_human":{},"one_way_binary_iou":{}}}"#,
                k[0], k[1], k[2], o[0], o[1], o[2]
            )
        })
        .collect();
    std::fs::write(d.join("r.json"), format!(r#"{{"rows":[{}]}}"#, json_rows.join(","))).unwrap();
    let out = ok(d, &["report", "--report", "r.json", "--out", "table.txt"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(std::fs::read_to_string(d.join("table.txt")).unwrap(), table);
    let ave = table.lines().find(|l| l.starts_with("Ave")).unwrap();
    let got: Vec<f64> = ave
        .split_whitespace()
        .filter_map(|c| c.parse().ok())
        .collect();
    let mut expected = Vec::new();
    for col in 0..6 {
        let sum: f64 = rows
            .iter()
            .map(|(_, k, o)| if col < 3 { k[col] } else { o[col - 3] })
            .sum();
        expected.push(format!("{:.2}", sum / 3.0).parse::<f64>().unwrap());
    }
    assert_eq!(got, expected, "{table}");
}

#[test]
fn unknown_flag_exits_nonzero_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = oshp(tmp.path(), &["train", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_nonzero_with_usage() {
    let tmp = workspace();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "alpha = 1.5\n").unwrap();
    let out = oshp(
        d,
        &[
            "train",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--config",
            "bad.toml",
            "--out",
            "run",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha") && err.contains("Usage"), "{err}");

    let out = oshp(
        d,
        &[
            "train",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--beta",
            "fast",
            "--out",
            "run",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = workspace();
    let d = tmp.path();
    ok(
        d,
        &[
            "train",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--config",
            "c.toml",
            "--max-epoch",
            "1",
            "--beta",
            "0.5",
            "--out",
            "run",
        ],
    );
    let run = std::fs::read_to_string(d.join("run/run.json")).unwrap();
    assert!(run.contains("\"max_epoch\": 1"), "{run}");
    assert!(run.contains("\"constant\": 0.5"), "{run}");
}

#[test]
fn output_root_prefixes_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    std::fs::write(tmp.path().join("synth.toml"), SYNTH).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_oshp"))
        .current_dir(tmp.path())
        .env("OSHP_OUTPUT_ROOT", &root)
        .args(["gen-synthetic", "--out", "data", "--config", "synth.toml"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("data/manifest.toml").exists());
    assert!(root.join("data/run.json").exists());
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn tailor_hides_novel_classes_on_disk() {
    let tmp = workspace();
    let d = tmp.path();
    ok(
        d,
        &[
            "tailor",
            "--manifest",
            "data/manifest.toml",
            "--fold",
            "data/fold.toml",
            "--phase",
            "meta-train",
            "--out",
            "train_split",
        ],
    );
    let manifest = std::fs::read_to_string(d.join("train_split/manifest.toml")).unwrap();
    assert_eq!(manifest.matches("meta_train_support").count(), 6);
    assert_eq!(manifest.matches("meta_test").count(), 0);
}
