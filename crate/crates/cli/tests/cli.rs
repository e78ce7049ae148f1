use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridfault"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_reproducible_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(dir.path(), &["gen", "--preset", "desk", "--out", "a"]);
    let b = run(dir.path(), &["gen", "--preset", "desk", "--out", "b"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    assert!(stdout(&a).contains("224/56/48"));
    let ma = json(&dir.path().join("a/dataset.json"));
    let mb = json(&dir.path().join("b/dataset.json"));
    assert_eq!(ma["content_sha256"], mb["content_sha256"]);
    assert_eq!(ma["file_sha256"], mb["file_sha256"]);

    let other = run(dir.path(), &["--seed", "7", "gen", "--preset", "desk", "--out", "c"]);
    assert_eq!(code(&other), 0);
    assert_ne!(
        json(&dir.path().join("c/dataset.json"))["content_sha256"],
        ma["content_sha256"]
    );

    let manifest = json(&dir.path().join("a/run_manifest.json"));
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["exit_code"], 0);
    assert!(manifest["artifacts"].to_string().contains("train.bin"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["gen", "--preset", "desk", "--topology", "missing.json", "--out", "x"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));

    assert_eq!(code(&run(dir.path(), &["gen", "--preset", "desk", "--out", "d"])), 0);
    let o = run(
        dir.path(),
        &["train", "--family", "lstm", "--dataset", "d", "--out", "t"],
    );
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["eval", "--checkpoint", "nowhere", "--dataset", "d"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["gen", "--preset", "desk", "--out", "d"])), 0);
    let t = run(
        dir.path(),
        &[
            "train",
            "--family",
            "rgatv2",
            "--dataset",
            "d",
            "--out",
            "t",
            "--epochs",
            "1",
            "--hidden",
            "8",
        ],
    );
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(dir.path().join("t/rgatv2_seed0.bin").exists());
    assert!(dir.path().join("t/history.json").exists());

    let e = run(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "t/rgatv2_seed0",
            "--dataset",
            "d",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let m = json(&dir.path().join("m.json"));
    let counted: u64 = ["tp", "fp", "tn", "fn"].iter().map(|k| m[k].as_u64().unwrap()).sum();
    assert_eq!(counted, 48);

    // evaluating again gives the same numbers
    let again = run(
        dir.path(),
        &["eval", "--checkpoint", "t/rgatv2_seed0", "--dataset", "d"],
    );
    let a: serde_json::Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(a, m);
}

#[test]
fn benchmark_grid_is_restricted_and_report_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["gen", "--preset", "desk", "--out", "d"])), 0);
    let b = run(
        dir.path(),
        &[
            "benchmark",
            "--dataset",
            "d",
            "--out",
            "b",
            "--families",
            "rgcn,gru_local",
            "--seeds",
            "2",
            "--epochs",
            "1",
            "--hidden",
            "8",
        ],
    );
    assert_eq!(code(&b), 0, "{}", String::from_utf8_lossy(&b.stderr));
    let report = json(&dir.path().join("b/report.json"));
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2 * 2 * 5);
    assert!(cells
        .iter()
        .all(|c| c["family"] == "rgcn" || c["family"] == "gru_local"));

    let fig = dir.path().join("b/fig3.csv");
    let original = fs::read_to_string(&fig).unwrap();
    fs::remove_file(&fig).unwrap();
    let r = run(dir.path(), &["report", "--report", "b/report.json"]);
    assert_eq!(code(&r), 0);
    assert_eq!(fs::read_to_string(&fig).unwrap(), original);
    assert_eq!(original.lines().count(), 1 + 2 * 5);
    assert_eq!(json(&dir.path().join("b/run_manifest.json"))["command"], "benchmark");

    let elsewhere = run(dir.path(), &["report", "--report", "b/report.json", "--out", "r"]);
    assert_eq!(code(&elsewhere), 0);
    assert_eq!(fs::read_to_string(dir.path().join("r/fig3.csv")).unwrap(), original);
    assert_eq!(json(&dir.path().join("r/run_manifest.json"))["command"], "report");
}

#[test]
fn gradcheck_lists_every_component_and_catches_injected_bug() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["gradcheck", "--out", "g"]);
    assert_eq!(code(&ok), 0);
    let text = stdout(&ok);
    for name in [
        "gru",
        "gcn",
        "sage_mean",
        "sage_max",
        "gat",
        "gatv2",
        "maxpool_readout",
        "classify_head",
    ] {
        let rows = text
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(name))
            .count();
        assert_eq!(rows, 1, "{name}");
    }
    assert!(!text.contains("FAIL") && !text.contains(" fail"));
    assert!(dir.path().join("g/gradcheck.json").exists());

    let bad = run(dir.path(), &["gradcheck", "--inject-fault", "gatv2-sign"]);
    assert_eq!(code(&bad), 5);
}
