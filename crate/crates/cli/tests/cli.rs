use std::path::Path;
use std::process::{Command, Output};

use rtwins::simulation::study::RECORD_COLUMNS;
use rtwins::PathId;

fn rtwins(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtwins"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn simulate(path: &Path, n: usize, seed: u64) {
    let out = rtwins(&["simulate", "--output", s(path), "--n", &n.to_string(), "--seed", &seed.to_string()]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn simulate_is_deterministic_with_exact_header() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    simulate(&a, 200, 9);
    simulate(&b, 200, 9);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().next().unwrap(), "w1,w2,w3,a,z,m,y");
    assert_eq!(text.lines().count(), 201);

    let c = dir.path().join("c.csv");
    simulate(&c, 200, 10);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn simulate_rejects_empty_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtwins(&["simulate", "--output", s(&dir.path().join("x.csv")), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("positive"), "{}", stderr(&out));
}

#[test]
fn simulate_x_mode_writes_generating_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.csv");
    let out = rtwins(&["simulate", "--output", s(&p), "--n", "10", "--covariate-mode", "x", "--setting", "gamma1-zero"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bad = rtwins(&["simulate", "--output", s(&p), "--n", "10", "--setting", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn estimate_writes_reports_whose_paths_sum_to_total() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    simulate(&data, 1500, 3);
    let out_dir = dir.path().join("out");
    let out = rtwins(&["estimate", "--input", s(&data), "--output-dir", s(&out_dir), "--seed", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let paths = json["paths"].as_array().unwrap();
    assert_eq!(paths.len(), 6);
    let value = |key: &str| {
        paths.iter().find(|r| r["key"] == key).unwrap()["estimate"]
            .as_f64()
            .unwrap()
    };
    let sum: f64 = PathId::COMPONENTS.iter().map(|p| value(p.key())).sum();
    assert!((sum - value("ate")).abs() < 1e-10, "{sum} vs {}", value("ate"));
    assert_eq!(json["targets"].as_array().unwrap().len(), 7);
    assert!(json["intermediate_confounding_test"]["p_value"].as_f64().unwrap() <= 1.0);
    for r in paths {
        assert!(r["ci_lo"].as_f64().unwrap() <= r["ci_hi"].as_f64().unwrap());
    }

    let text = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    for p in PathId::ALL {
        assert!(text.contains(p.label()), "missing {p:?} in report");
    }
    assert!(text.contains("intermediate confounding"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);
}

#[test]
fn estimate_reads_config_file_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    simulate(&data, 800, 4);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[estimate]\ninput = {:?}\noutput_dir = {:?}\n[estimate.estimator]\nfolds = 2\nalpha = 0.1\n",
            s(&data),
            s(&dir.path().join("out"))
        ),
    )
    .unwrap();
    let out = rtwins(&["estimate", "--config", s(&cfg), "--alpha", "0.2", "--learner", "main-effects"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(json["folds"], 2);
    assert_eq!(json["alpha"], 0.2);
    assert!(json["models"].as_array().unwrap().iter().all(|m| m["family"] == "main-effects"));
}

#[test]
fn malformed_input_exits_with_usage_code_and_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "w1,a,z,m,y\n0.1,1,0,0,1.0\n0.2,0,1,1,2.0\n0.3,2,0,1,0.5\n").unwrap();
    let out = rtwins(&["estimate", "--input", s(&data), "--output-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));

    let missing = rtwins(&["estimate", "--input", s(&data), "--output-dir", s(dir.path()), "--exposure", "treat"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn bad_flags_and_config_are_usage_errors() {
    assert_eq!(rtwins(&["estimate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(rtwins(&["report"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[simulate]\nn = \"many\"\n").unwrap();
    let out = rtwins(&["simulate", "--config", s(&cfg), "--output", s(&dir.path().join("o.csv"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtwins(&[
        "estimate",
        "--input",
        s(&dir.path().join("nope.csv")),
        "--output-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn replicate(out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "replicate",
        "--output-dir",
        s(out_dir),
        "--settings",
        "default,gamma1-zero",
        "--covariate-modes",
        "x",
        "--ns",
        "400",
        "--reps",
        "3",
        "--truth-mc",
        "100000",
        "--folds",
        "2",
    ];
    args.extend_from_slice(extra);
    rtwins(&args)
}

#[test]
fn replicate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let out = replicate(&out_dir, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["records.csv", "metrics.csv", "plot_data.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let records = std::fs::read_to_string(out_dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().next().unwrap(), RECORD_COLUMNS.join(","));
    assert_eq!(records.lines().count(), 1 + 2 * 3 * 6);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 6);
    assert_eq!(
        std::fs::read_to_string(out_dir.join("plot_data.csv")).unwrap().lines().count(),
        1 + 2 * 6 * 4
    );

    // Resuming a complete study does no new work and leaves the records alone.
    let resumed = replicate(&out_dir, &["--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert!(String::from_utf8_lossy(&resumed.stdout).starts_with("0 new replications"));
    assert_eq!(std::fs::read_to_string(out_dir.join("records.csv")).unwrap(), records);

    // Recomputing metrics from the records reproduces the study's file.
    let again = dir.path().join("again.csv");
    let rep = rtwins(&["report", "--records", s(&out_dir.join("records.csv")), "--output", s(&again)]);
    assert!(rep.status.success(), "{}", stderr(&rep));
    assert_eq!(std::fs::read_to_string(&again).unwrap(), metrics);
    let rep2 = rtwins(&["report", "--records", s(&out_dir.join("records.csv")), "--output", s(&again)]);
    assert!(rep2.status.success());
    assert_eq!(std::fs::read_to_string(&again).unwrap(), metrics);

    // A duplicated row is reported with its key.
    let mut lines: Vec<&str> = records.lines().collect();
    lines.push(lines[1]);
    let dup = dir.path().join("dup.csv");
    std::fs::write(&dup, lines.join("\n") + "\n").unwrap();
    let out = rtwins(&["report", "--records", s(&dup), "--output", s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("duplicate record") && err.contains("setting=default"), "{err}");
}

#[test]
fn report_rejects_empty_and_mismatched_records() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, RECORD_COLUMNS.join(",") + "\n").unwrap();
    let out = rtwins(&["report", "--records", s(&empty), "--output", s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no records"), "{}", stderr(&out));

    let wrong = dir.path().join("wrong.csv");
    std::fs::write(&wrong, "setting,n,estimate\ndefault,500,0.1\n").unwrap();
    let out = rtwins(&["report", "--records", s(&wrong), "--output", s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("expected [setting, covariate_mode"), "{}", stderr(&out));
}
