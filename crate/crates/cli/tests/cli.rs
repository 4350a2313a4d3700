use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn privalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privalign"))
        .args(args)
        .output()
        .expect("spawn privalign")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> String {
    let out = dir.join("orig.lfb.json");
    let o = privalign(&["synth", "--seed", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    p(&out).to_string()
}

#[test]
fn help_and_version_exit_zero() {
    let o = privalign(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(privalign(&["--version"]).status.success());

    let o = privalign(&["experiment", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--config",
        "--seed",
        "--epsilon",
        "--strategy",
        "--mechanism",
        "--metric",
        "--out",
    ] {
        assert!(text.contains(flag), "experiment help lacks {flag}");
    }
    let text = String::from_utf8_lossy(&privalign(&["assess", "--help"]).stdout).into_owned();
    assert!(text.contains("--format"));
    let text = String::from_utf8_lossy(&privalign(&["report", "--help"]).stdout).into_owned();
    assert!(text.contains("--projection"));
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    for args in [
        vec!["group", "--bogus"],
        vec!["group", "--input", "x", "--strategy", "magic"],
        vec!["perturb", "--input", "x", "--out", "y", "--epsilon", "abc"],
        vec![],
    ] {
        let o = privalign(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    let o = privalign(&["group", "--input", "x", "--strategy", "magic"]);
    assert!(stderr(&o).contains("--strategy"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[protocol]\nnot_a_key = 1\n").unwrap();
    let o = privalign(&["experiment", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = privalign(&[
        "experiment",
        "--config",
        "/nonexistent.toml",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = privalign(&["experiment", "--metric", "nope", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = privalign(&["group", "--input", p(&dir.path().join("missing.lfb.json"))]);
    assert_eq!(o.status.code(), Some(2));

    let input = synth(dir.path());
    let v2 = dir.path().join("v2.lfb.json");
    let text = fs::read_to_string(&input).unwrap().replacen(
        r#""format_version": "1""#,
        r#""format_version": "2""#,
        1,
    );
    fs::write(&v2, text).unwrap();
    let o = privalign(&["group", "--input", p(&v2)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"));
}

#[test]
fn bua_and_tda_partitions_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let tda = dir.path().join("tda.json");
    let bua = dir.path().join("bua.json");
    for (s, out) in [("tda", &tda), ("bua", &bua)] {
        let o = privalign(&[
            "group",
            "--config",
            "synthetic_default",
            "--strategy",
            s,
            "--input",
            &input,
            "--out",
            p(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(&tda).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(&bua).unwrap());
}

#[test]
fn synth_perturb_assess_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let parts = dir.path().join("parts.json");
    let o = privalign(&["group", "--input", &input, "--out", p(&parts)]);
    assert!(o.status.success());

    let pert = dir.path().join("pert.lfb.json");
    let o = privalign(&[
        "perturb",
        "--input",
        &input,
        "--partitions",
        p(&parts),
        "--epsilon",
        "0.1",
        "--mechanism",
        "laplace",
        "--seed",
        "7",
        "--out",
        p(&pert),
        "--payload",
        "sibling",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("pert.lfb.json.bin").exists());

    let o = privalign(&[
        "assess",
        "--input",
        &input,
        "--perturbed",
        p(&pert),
        "--partitions",
        p(&parts),
        "--epsilon",
        "0.1",
        "--mechanism",
        "laplace",
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("metric,value\nbas,"), "{csv}");

    let json = dir.path().join("a.json");
    let o = privalign(&[
        "assess",
        "--input",
        &input,
        "--perturbed",
        p(&pert),
        "--partitions",
        p(&parts),
        "--epsilon",
        "0.1",
        "--mechanism",
        "laplace",
        "--seed",
        "7",
        "--format",
        "json",
        "--out",
        p(&json),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&json).unwrap();
    assert!(text.contains("\"theta_ref\""));
}

#[test]
fn assess_with_empty_sensitive_set_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let empty = dir.path().join("empty.json");
    let entries: Vec<String> = (1..=4)
        .map(|i| format!(r#"{{"layer_index": {i}, "tau": 1.0, "sensitive_ids": []}}"#))
        .collect();
    fs::write(
        &empty,
        format!(r#"{{"partitions": [{}]}}"#, entries.join(",")),
    )
    .unwrap();
    let o = privalign(&[
        "assess",
        "--input",
        &input,
        "--perturbed",
        &input,
        "--partitions",
        p(&empty),
        "--epsilon",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("no sensitive features"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn experiment_writes_reports_and_report_renders_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report");
    let o = privalign(&[
        "experiment",
        "--config",
        "synthetic_default",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "cells.csv",
        "aggregate.csv",
        "figures.csv",
        "supplementary.csv",
        "report.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let row = agg
        .lines()
        .find(|l| l.starts_with("bua,0.1,rmse,"))
        .expect("bua rmse row");
    let mean: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!((mean - 5.45).abs() < 0.5, "{row}");

    let o = privalign(&["report", "--input", p(&out.join("report.json"))]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), agg);

    // a single worker must not change any byte
    let serial = dir.path().join("serial");
    let o = Command::new(env!("CARGO_BIN_EXE_privalign"))
        .args(["experiment", "--out", p(&serial)])
        .env("BODHI_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["cells.csv", "aggregate.csv", "report.json"] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(serial.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn experiment_overrides_and_metric_selection() {
    let dir = tempfile::tempdir().unwrap();
    let o = privalign(&[
        "experiment",
        "--seed",
        "0,1",
        "--epsilon",
        "0.5",
        "--strategy",
        "bua",
        "--mechanism",
        "laplace",
        "--metric",
        "rmse,wass1",
        "--out",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells = fs::read_to_string(dir.path().join("cells.csv")).unwrap();
    let rows: Vec<&str> = cells.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{cells}");
    assert!(rows.iter().all(|r| r.starts_with("bua,0.5,")));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_privalign"))
        .args(["synth", "--out", "/dev/null"])
        .env("BODHI_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("BODHI_THREADS"));
}

#[test]
fn pca_projection_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let o = privalign(&["report", "--projection", "pca", "--input", &input]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,id,group,pc1,pc2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 200);
    assert_eq!(
        rows.iter().filter(|r| r.contains(",sensitive,")).count(),
        4 * 60
    );
}
