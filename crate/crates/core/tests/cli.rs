use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tskd_core::arima::{forecast, ArimaModel};
use tskd_core::data::metrics::read_metrics;

const BIN: &str = env!("CARGO_BIN_EXE_tskd");

fn tskd(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("TSKD_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "output_root": {root:?},
  "dataset": {{"kind": "synthetic", "seed": 1,
               "params": {{"classes": 3, "size": 12, "train_per_class": 10, "test_per_class": 6}}}},
  "teacher": {{"arch": "teacher", "widths": [4, 4, 4], "blocks_per_stage": 1}},
  "teacher_train": {{"epochs": 2, "timing": "off"}},
  "student": {{"arch": "student", "widths": [2, 3, 4]}},
  "train": {{"epochs": 6, "batch_size": 8, "timing": "off", "lstm": {{"hidden": 3}}}},
  "distill": {{"k": 2, "delta": 1}},
  "probe": {{"hidden": 6}}{extra}
}}"#,
        root = dir.join("runs")
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let out = ok(&tskd(&["train-teacher", "--config", c]));
    assert!(out.contains("final_test_acc="), "{out}");
    let runs = dir.path().join("runs");
    assert!(runs.join("teacher/teacher.ckpt").is_file());

    for variant in ["vanilla", "tskd", "kd", "at", "tskd_fm"] {
        let out = ok(&tskd(&["distill", "--config", c, "--variant", variant]));
        assert!(
            out.trim_end().ends_with(&parse_best(&out).to_string()),
            "{out}"
        );
        assert!(out.contains(&format!("variant={variant} seed=0")), "{out}");
    }

    let tskd_metrics = read_metrics(&runs.join("tskd_seed0/metrics.csv")).unwrap();
    assert_eq!(tskd_metrics.len(), 6);
    assert!(tskd_metrics.iter().any(|r| r.loss_temporal.is_some()));

    let csv = dir.path().join("report.csv");
    let dirs: Vec<String> = ["vanilla", "tskd", "kd", "at", "tskd_fm"]
        .iter()
        .map(|v| runs.join(format!("{v}_seed0")).display().to_string())
        .collect();
    let missing = runs.join("nope").display().to_string();
    let mut args = vec!["report"];
    args.extend(dirs.iter().map(String::as_str));
    args.push(&missing);
    args.extend(["--csv", csv.to_str().unwrap()]);
    let out = ok(&tskd(&args));
    assert!(out.contains("delta_pp") && out.contains("error:"), "{out}");

    // recomputing best accuracy from the metrics matches the table's precision
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows[..5] {
        let metrics = read_metrics(&Path::new(&row[col("run")]).join("metrics.csv")).unwrap();
        let best = metrics
            .iter()
            .map(|r| r.test_acc as f64)
            .fold(0.0, f64::max);
        assert_eq!(
            row[col("best_acc")].to_string(),
            format!("{:.2}", best * 100.0)
        );
    }
    assert_eq!(&rows[0][col("delta_pp")], "+0.00");
    assert!(!rows[5][col("error")].is_empty());

    let bad = tskd(&["report", &missing]);
    assert_eq!(bad.status.code(), Some(3));
}

fn parse_best(out: &str) -> String {
    out.lines()
        .last()
        .and_then(|l| l.split("best_test_acc=").nth(1))
        .unwrap_or_default()
        .to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    // no teacher checkpoint yet
    assert_eq!(
        tskd(&["distill", "--config", c, "--variant", "tskd"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        tskd(&["distill", "--config", c, "--variant", "bogus"])
            .status
            .code(),
        Some(2)
    );
    let unknown = write_config(dir.path(), r#", "surprise": 1"#);
    assert_eq!(
        tskd(&["distill", "--config", unknown.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("absent.json");
    assert_eq!(
        tskd(&["train-teacher", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let idx = dir.path().join("idx.json");
    std::fs::write(
        &idx,
        r#"{"dataset": {"kind": "idx", "train_images": "/nonexistent/a", "train_labels": "/nonexistent/b",
                        "test_images": "/nonexistent/c", "test_labels": "/nonexistent/d"}}"#,
    )
    .unwrap();
    let out = tskd(&["train-teacher", "--config", idx.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for p in ["/nonexistent/a", "/nonexistent/d"] {
        assert!(err.contains(p), "{err}");
    }

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(
        tskd(&["probe-arima", "--config", garbage.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn distill_metrics_are_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let metrics = dir.path().join("runs/vanilla_seed3/metrics.csv");
    ok(&tskd(&[
        "distill",
        "--config",
        c,
        "--variant",
        "vanilla",
        "--seed",
        "3",
    ]));
    let first = std::fs::read(&metrics).unwrap();
    ok(&tskd(&[
        "distill",
        "--config",
        c,
        "--variant",
        "vanilla",
        "--seed",
        "3",
    ]));
    assert_eq!(first, std::fs::read(&metrics).unwrap());
    ok(&tskd(&[
        "distill",
        "--config",
        c,
        "--variant",
        "vanilla",
        "--seed",
        "4",
    ]));
    assert_ne!(
        first,
        std::fs::read(dir.path().join("runs/vanilla_seed4/metrics.csv")).unwrap()
    );
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "variant": "vanilla", "seed": 2"#);
    ok(&tskd(&["distill", "--config", cfg.to_str().unwrap()]));
    let run = dir.path().join("runs/vanilla_seed2");
    let first = std::fs::read(run.join("metrics.csv")).unwrap();
    let echo = run.join("config.json");
    let copy = dir.path().join("echo.json");
    std::fs::copy(&echo, &copy).unwrap();
    std::fs::remove_dir_all(&run).unwrap();
    ok(&tskd(&["distill", "--config", copy.to_str().unwrap()]));
    assert_eq!(first, std::fs::read(run.join("metrics.csv")).unwrap());
}

#[test]
fn resume_continues_to_the_same_result() {
    let straight_dir = tempfile::tempdir().unwrap();
    let cfg = write_config(straight_dir.path(), r#", "variant": "tskd""#);
    ok(&tskd(&["train-teacher", "--config", cfg.to_str().unwrap()]));
    ok(&tskd(&["distill", "--config", cfg.to_str().unwrap()]));
    let straight = straight_dir.path().join("runs/tskd_seed0");

    // same run, stopped after three epochs and continued
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    std::fs::create_dir_all(runs.join("teacher")).unwrap();
    std::fs::copy(
        straight_dir.path().join("runs/teacher/teacher.ckpt"),
        runs.join("teacher/teacher.ckpt"),
    )
    .unwrap();
    let short = write_config(dir.path(), r#", "variant": "tskd", "run_name": "r""#);
    let text = std::fs::read_to_string(&short)
        .unwrap()
        .replace(r#""epochs": 6"#, r#""epochs": 3"#);
    std::fs::write(&short, text).unwrap();
    ok(&tskd(&["distill", "--config", short.to_str().unwrap()]));
    let full = std::fs::read_to_string(&short)
        .unwrap()
        .replace(r#""epochs": 3"#, r#""epochs": 6"#);
    std::fs::write(&short, full).unwrap();
    let out = tskd(&["distill", "--config", short.to_str().unwrap(), "--resume"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming"));
    let resumed = runs.join("r");
    for f in ["metrics.csv", "student.ckpt"] {
        assert_eq!(
            std::fs::read(straight.join(f)).unwrap(),
            std::fs::read(resumed.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn probe_forecast_is_rederivable_from_fit_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = ok(&tskd(&["probe-arima", "--config", cfg.to_str().unwrap()]));
    assert!(out.contains("forecast_mse="), "{out}");
    let probe = dir.path().join("runs/probe_seed0");
    let fit: serde_json::Value =
        serde_json::from_slice(&std::fs::read(probe.join("fit.json")).unwrap()).unwrap();
    let model: ArimaModel = serde_json::from_value(fit["model"].clone()).unwrap();
    assert_eq!(fit["fit_epochs"], 30);

    let mut trace = csv::Reader::from_path(probe.join("trace.csv")).unwrap();
    let history: Vec<f64> = trace
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(history.len(), 30);

    let mut fc = csv::Reader::from_path(probe.join("forecast.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = fc.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    let want = forecast(&model, &history, 10).unwrap();
    for (i, (row, w)) in rows.iter().zip(&want).enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), 30 + i);
        let got: f64 = row[1].parse().unwrap();
        assert!((got - w).abs() <= 1e-10 * w.abs().max(1.0), "{got} vs {w}");
        assert!(!row[2].is_empty());
    }
}

#[test]
fn single_run_report_has_no_delta_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "variant": "vanilla""#);
    ok(&tskd(&["distill", "--config", cfg.to_str().unwrap()]));
    let run = dir.path().join("runs/vanilla_seed0");
    let out = ok(&tskd(&["report", run.to_str().unwrap()]));
    assert!(
        out.contains("best_acc") && !out.contains("delta_pp"),
        "{out}"
    );
}

#[test]
fn default_teacher_separates_synthetic_classes_in_ten_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.json");
    let text = format!(
        r#"{{"output_root": {:?},
            "teacher_train": {{"epochs": 10, "timing": "off", "lr_schedule": {{"milestones": [[7, 0.1]]}}}}}}"#,
        dir.path().join("runs")
    );
    std::fs::write(&path, text).unwrap();
    let out = ok(&tskd(&[
        "train-teacher",
        "--config",
        path.to_str().unwrap(),
    ]));
    let acc: f64 = out
        .split("final_test_acc=")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc > 0.95, "{out}");
}
