use std::process::Command;

fn cbln() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cbln"));
    c.env("CBLN_DATA_DIR", "/nonexistent-cbln-data");
    c
}

const TINY: &[&str] = &[
    "--experiment",
    "split-ucr",
    "--tasks",
    "2",
    "--hidden",
    "8",
    "--epochs",
    "2",
    "--probe-size",
    "20",
    "--mc-samples",
    "10",
    "--trials",
    "2",
    "--subsample",
    "0.3",
];

#[test]
fn run_save_load_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let model = dir.path().join("m.cbln");
    let status = cbln()
        .arg("save")
        .args(TINY)
        .arg("--out")
        .arg(&out)
        .arg("--model")
        .arg(&model)
        .arg("--grid")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("selection_rate:"), "{stdout}");
    assert!(out.join("report.json").exists() && out.join("grid.csv").exists());
    assert!(model.with_extension("tasks.json").exists());

    let load = cbln().arg("load").arg(&model).output().unwrap();
    assert!(load.status.success());
    assert!(String::from_utf8_lossy(&load.stdout).contains("tasks: [0, 1]"));

    let report = cbln().arg("report").arg(&out).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("recomputed average_accuracy"));
}

#[test]
fn failures_exit_nonzero_with_phase() {
    let out = cbln().args(["run", "--experiment", "split-mnist", "--tasks", "2"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load phase failed"), "{err}");

    let bad = cbln().args(["load", "/nonexistent/model.cbln"]).output().unwrap();
    assert!(!bad.status.success());

    let usage = cbln().args(["run", "--mode", "diagonal"]).output().unwrap();
    assert!(!usage.status.success());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "experiment = \"split_ucr\"\nn_tasks = 4\nmode = \"sequential\"\n").unwrap();
    let out = cbln()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .args(TINY)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tasks: 2") && stdout.contains("mode: Sequential"), "{stdout}");
}

#[test]
fn timing_lists_each_count() {
    let out = cbln().arg("timing").args(TINY).args(["--counts", "0,1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
}
