use std::path::Path;
use std::process::{Command, Output};

fn prm(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_prm"))
        .args(["--seed", "7", "--workers", "2", "--out-dir"])
        .arg(dir)
        .args(args)
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = prm(dir, args);
    assert_eq!(out.status.code(), Some(0), "prm {args:?}");
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn config_path(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn stage_by_stage_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--count", "60"]);
    ok(
        d,
        &[
            "gen-data",
            "--domain",
            "code_assembly",
            "--count",
            "10",
            "--problems-out",
            &path(d, "code_problems.jsonl"),
            "--traces-out",
            &path(d, "code_traces.jsonl"),
        ],
    );
    let traces = std::fs::read_to_string(d.join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 240);

    ok(
        d,
        &[
            "annotate",
            "--traces",
            &path(d, "traces.jsonl"),
            "--problems",
            &path(d, "problems.jsonl"),
        ],
    );
    assert!(
        std::fs::read_to_string(d.join("labels.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 0
    );

    std::fs::write(d.join("train.toml"), "max_epochs = 20\n").unwrap();
    ok(
        d,
        &[
            "train-prm",
            "--labels",
            &path(d, "labels.jsonl"),
            "--config",
            &path(d, "train.toml"),
            "--hidden-dim",
            "8",
        ],
    );
    let model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["hidden_dim"], 8);

    let stdout = ok(
        d,
        &[
            "search",
            "--strategy",
            "beam",
            "--model",
            &path(d, "model.json"),
            "--problems",
            &path(d, "problems.jsonl"),
            "--budget",
            "16",
        ],
    );
    assert!(!stdout.is_empty());
    assert_eq!(
        std::fs::read_to_string(d.join("runs.jsonl"))
            .unwrap()
            .lines()
            .count(),
        60
    );

    std::fs::write(
        d.join("matrix.toml"),
        "budgets = [8, 16]\nwall_clock_caps_ms = [200]\nseeds = [0]\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "run-matrix",
            "--config",
            &path(d, "matrix.toml"),
            "--model",
            &path(d, "model.json"),
            "--problems",
            &path(d, "problems.jsonl"),
        ],
    );
    // 4 strategies x (2 budgets + 1 cap), plus the header.
    assert_eq!(
        std::fs::read_to_string(d.join("matrix.csv"))
            .unwrap()
            .lines()
            .count(),
        13
    );

    ok(
        d,
        &[
            "similarity",
            "--model",
            &path(d, "model.json"),
            "--set-a",
            &path(d, "traces.jsonl"),
            "--set-b",
            &path(d, "code_traces.jsonl"),
            "--problems",
            &path(d, "problems.jsonl"),
            "--problems",
            &path(d, "code_problems.jsonl"),
        ],
    );
    let sim: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("similarity.json")).unwrap()).unwrap();
    let mean = sim["mean_s"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}

#[test]
fn smoke_experiment_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let stdout = ok(
        d,
        &["run-experiment", "--config", &config_path("smoke.toml")],
    );
    assert!(stdout.contains("[PASS]"));
    let report = std::fs::read_to_string(d.join("report.md")).unwrap();
    assert!(report.contains("RESULT: PASS"));

    let stdout = ok(d, &["emit-curves", "--results", &path(d, "results.csv")]);
    assert!(stdout.contains("curves"));
    let curves: Vec<_> = std::fs::read_dir(d.join("curves")).unwrap().collect();
    assert!(!curves.is_empty());
}

#[test]
fn bad_input_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "seed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(
        prm(d, &["run-experiment", "--config", &path(d, "bad.toml")])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        prm(d, &["emit-curves", "--results", &path(d, "missing.csv")])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn failed_checks_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let smoke = std::fs::read_to_string(config_path("smoke.toml")).unwrap();
    // The mcts >= beam part of the budget ordering does not hold here.
    std::fs::write(
        d.join("ordering.toml"),
        smoke.replace("[checks]", "[checks]\nsearch_ordering = true"),
    )
    .unwrap();
    let out = prm(
        d,
        &["run-experiment", "--config", &path(d, "ordering.toml")],
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report = std::fs::read_to_string(d.join("report.md")).unwrap();
    assert!(report.contains("[FAIL] search_ordering_budget_64") && report.contains("RESULT: FAIL"));
}
