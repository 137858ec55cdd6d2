//! Experiment commands behind the `tskd` binary: teacher training,
//! distillation, the ARIMA probe and run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::checkpoint;
use crate::data::metrics::{read_metrics, MetricsRecord, MetricsWriter};
use crate::error::{Error, Result};
use crate::nn::Cnn;
use crate::probe::{
    fit_and_forecast, forecast_errors, run_probe, ActivationTrace, ForecastRow, ProbeFit,
};
use crate::schedule::NodeKind;
use crate::trainer::{
    run_training, teacher_requests, RunSummary, TeacherCache, TrainingRun, Variant,
};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATE_DIR: &str = "state";

/// Process exit code for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => 2,
        Err(_) => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_FILE), cfg.resolved().to_json() + "\n")
}

fn warn_ignored(cfg: &ExperimentConfig) {
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
}

/// Train the teacher with plain cross-entropy into `<output_root>/teacher`.
pub fn train_teacher(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate_teacher()?;
    let (train, test) = cfg.dataset.load::<f32>()?;
    let spec = cfg.teacher.resolve(train.sample_shape(), train.classes)?;
    let dir = cfg.teacher_dir();
    create_dir(&dir)?;
    echo_config(cfg, &dir)?;
    let model = Cnn::<f32>::new(spec, cfg.teacher_seed)?;
    let mut run = TrainingRun::new(
        Variant::Vanilla,
        model,
        None,
        &cfg.distill,
        &cfg.teacher_train,
        cfg.teacher_seed,
    )?;
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let mut summary = run_training(&mut run, &train, &test, None, |r| writer.write(r))?;
    summary.variant = None;
    let ckpt = cfg.teacher_checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    checkpoint::save_params(&ckpt, &run.student.params)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    println!(
        "teacher seed={} final_test_acc={:.4} best_test_acc={:.4} checkpoint={}",
        cfg.teacher_seed,
        summary.final_test_acc,
        summary.best_test_acc,
        ckpt.display()
    );
    Ok(summary)
}

/// Train a student under `cfg.variant` into [`ExperimentConfig::run_dir`].
/// With `resume`, continue from the saved run state when there is one.
pub fn distill(cfg: &ExperimentConfig, resume: bool) -> Result<RunSummary> {
    cfg.validate_distill()?;
    warn_ignored(cfg);
    let (train, test) = cfg.dataset.load::<f32>()?;
    let input = train.sample_shape();
    let student = Cnn::<f32>::new(cfg.student.resolve(input, train.classes)?, cfg.seed)?;
    let teacher = if cfg.variant.uses_teacher() {
        let spec = cfg.teacher.resolve(input, train.classes)?;
        let params = checkpoint::load_params(&cfg.teacher_checkpoint_path())?;
        let model = Cnn::with_params(spec, params)?;
        let requests = teacher_requests(cfg.variant, &cfg.distill);
        Some(TeacherCache::build(
            &model,
            &train.images,
            &requests,
            cfg.train.eval_batch,
        )?)
    } else {
        None
    };
    let mut run = TrainingRun::new(
        cfg.variant,
        student,
        teacher,
        &cfg.distill,
        &cfg.train,
        cfg.seed,
    )?;
    if let Some(w) = run.schedule.warning().filter(|_| cfg.variant.reviews()) {
        eprintln!("warning: {w}");
    }
    let dir = cfg.run_dir();
    let state = dir.join(STATE_DIR);
    let metrics = dir.join(METRICS_FILE);
    create_dir(&dir)?;
    echo_config(cfg, &dir)?;
    let mut writer = if resume && state.join("manifest.json").is_file() {
        run.load_state(&state)?;
        eprintln!("resuming {} at epoch {}", dir.display(), run.next_epoch);
        let mut w = MetricsWriter::create(&metrics)?;
        for r in &run.records {
            w.write(r)?;
        }
        w
    } else {
        if state.exists() {
            std::fs::remove_dir_all(&state).map_err(|e| Error::io(&state, e))?;
        }
        MetricsWriter::create(&metrics)?
    };
    let summary = run_training(&mut run, &train, &test, Some(&state), |r| writer.write(r))?;
    checkpoint::save_params(&dir.join("student.ckpt"), &run.student.params)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    println!(
        "variant={} seed={} best_test_acc={:.4}",
        cfg.variant, cfg.seed, summary.best_test_acc
    );
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub dir: PathBuf,
    pub trace: ActivationTrace,
    pub fit: ProbeFit,
    pub forecast: Vec<ForecastRow>,
    pub model_mse: f64,
    pub naive_mse: f64,
}

#[derive(Serialize)]
struct FitFile<'a> {
    #[serde(flatten)]
    fit: &'a ProbeFit,
    fit_epochs: usize,
    forecast_mse: f64,
    naive_mse: f64,
}

/// Train the probe net, fit ARIMA to the first `fit_epochs` of the trace and
/// forecast the rest; writes `trace.csv`, `fit.json` and `forecast.csv`.
pub fn probe_arima(cfg: &ExperimentConfig) -> Result<ProbeOutcome> {
    cfg.validate_probe()?;
    let p = &cfg.probe;
    let trace = run_probe(p)?;
    let (fit, forecast) = fit_and_forecast(&trace, p)?;
    if let Some(msg) = &fit.fallback {
        eprintln!("warning: {msg}");
    }
    let history = &trace.series[..p.fit_epochs];
    let (model_mse, naive_mse) = forecast_errors(&forecast, history);
    let dir = cfg.probe_dir();
    create_dir(&dir)?;
    echo_config(cfg, &dir)?;

    let path = dir.join("trace.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "value"])?;
    for (e, v) in history.iter().enumerate() {
        w.write_record([e.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("forecast.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "predicted", "actual"])?;
    for r in &forecast {
        let actual = r.actual.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([r.epoch.to_string(), r.predicted.to_string(), actual])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_json(
        &dir.join("fit.json"),
        &FitFile {
            fit: &fit,
            fit_epochs: p.fit_epochs,
            forecast_mse: model_mse,
            naive_mse,
        },
    )?;
    println!(
        "probe {} ARIMA{} forecast_mse={model_mse:.6e} naive_mse={naive_mse:.6e}",
        fit.probe_id, fit.model.order
    );
    Ok(ProbeOutcome {
        dir,
        trace,
        fit,
        forecast,
        model_mse,
        naive_mse,
    })
}

/// One report line, computed from a run directory's metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub dir: PathBuf,
    pub variant: String,
    pub seed: Option<u64>,
    pub epochs: usize,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    /// Mean ms per batch by node kind; `None` when the run had no such epoch.
    pub ms_general: Option<f64>,
    pub ms_memory: Option<f64>,
    pub ms_review: Option<f64>,
    pub ms_mean: f64,
}

impl RunRow {
    pub fn from_records(
        dir: &Path,
        variant: String,
        seed: Option<u64>,
        records: &[MetricsRecord],
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Format(format!(
                "{} has no epochs",
                dir.join(METRICS_FILE).display()
            )));
        }
        let mean_ms = |kind: Option<NodeKind>| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| kind.is_none_or(|k| r.node_kind == k))
                .map(|r| r.ms_per_batch as f64)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(RunRow {
            dir: dir.to_path_buf(),
            variant,
            seed,
            epochs: records.len(),
            best_test_acc: records
                .iter()
                .map(|r| r.test_acc as f64)
                .fold(f64::MIN, f64::max),
            final_test_acc: records.last().map_or(0.0, |r| r.test_acc as f64),
            ms_general: mean_ms(Some(NodeKind::General)),
            ms_memory: mean_ms(Some(NodeKind::Memory)),
            ms_review: mean_ms(Some(NodeKind::Review)),
            ms_mean: mean_ms(None).unwrap_or(0.0),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_metrics(&dir.join(METRICS_FILE))?;
        let summary: Option<RunSummary> = std::fs::read_to_string(dir.join(SUMMARY_FILE))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        let (variant, seed) = match summary {
            Some(s) => (
                s.variant
                    .map_or_else(|| "teacher".to_string(), |v| v.to_string()),
                Some(s.seed),
            ),
            None => (
                dir.file_name().map_or_else(
                    || dir.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                ),
                None,
            ),
        };
        Self::from_records(dir, variant, seed, &records)
    }
}

/// Per-variant mean time per batch against mean best accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAccuracy {
    pub variant: String,
    pub runs: usize,
    pub ms_mean: f64,
    pub best_test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub runs: Vec<std::result::Result<RunRow, (PathBuf, String)>>,
    /// Index into `runs` of the Δ baseline; `None` when Δ is omitted.
    pub baseline: Option<usize>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn ms(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl Report {
    /// Baseline: `baseline` if given, else the first vanilla run, else the
    /// first readable run. Δ is only reported with two or more readable runs.
    pub fn build(dirs: &[PathBuf], baseline: Option<&Path>) -> Self {
        let runs: Vec<_> = dirs
            .iter()
            .map(|d| RunRow::load(d).map_err(|e| (d.clone(), e.to_string())))
            .collect();
        let ok: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].is_ok()).collect();
        let baseline = if ok.len() < 2 {
            None
        } else if let Some(b) = baseline {
            ok.iter().copied().find(|&i| dirs[i] == b)
        } else {
            ok.iter()
                .copied()
                .find(|&i| matches!(&runs[i], Ok(r) if r.variant == "vanilla"))
                .or(ok.first().copied())
        };
        Report { runs, baseline }
    }

    pub fn delta(&self, row: &RunRow) -> Option<f64> {
        let base = self.baseline.and_then(|i| self.runs[i].as_ref().ok())?;
        Some((row.best_test_acc - base.best_test_acc) * 100.0)
    }

    pub fn time_accuracy(&self) -> Vec<TimeAccuracy> {
        let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
        for r in self.runs.iter().flatten() {
            groups.entry(&r.variant).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(v, rows)| {
                let n = rows.len() as f64;
                TimeAccuracy {
                    variant: v.to_string(),
                    runs: rows.len(),
                    ms_mean: rows.iter().map(|r| r.ms_mean).sum::<f64>() / n,
                    best_test_acc: rows.iter().map(|r| r.best_test_acc).sum::<f64>() / n,
                }
            })
            .collect()
    }

    fn header(&self) -> Vec<&'static str> {
        let mut h = vec![
            "run",
            "variant",
            "seed",
            "epochs",
            "best_acc",
            "final_acc",
            "ms_G",
            "ms_M",
            "ms_R",
        ];
        if self.baseline.is_some() {
            h.push("delta_pp");
        }
        h
    }

    fn cells(&self, row: &RunRow) -> Vec<String> {
        let mut c = vec![
            row.dir.display().to_string(),
            row.variant.clone(),
            row.seed.map_or_else(|| "-".into(), |s| s.to_string()),
            row.epochs.to_string(),
            pct(row.best_test_acc),
            pct(row.final_test_acc),
            ms(row.ms_general),
            ms(row.ms_memory),
            ms(row.ms_review),
        ];
        if self.baseline.is_some() {
            c.push(
                self.delta(row)
                    .map_or_else(|| "-".into(), |d| format!("{d:+.2}")),
            );
        }
        c
    }

    /// Accuracies in percent; failed runs carry their error in the last column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.header();
        header.push("error");
        w.write_record(&header)?;
        for run in &self.runs {
            match run {
                Ok(row) => {
                    let mut c = self.cells(row);
                    c.push(String::new());
                    w.write_record(&c)?;
                }
                Err((dir, e)) => {
                    let mut c = vec![String::new(); header.len()];
                    c[0] = dir.display().to_string();
                    *c.last_mut().unwrap() = e.clone();
                    w.write_record(&c)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let header: Vec<String> = self.header().into_iter().map(String::from).collect();
        let rows: Vec<Vec<String>> = self.runs.iter().flatten().map(|r| self.cells(r)).collect();
        let mut out = align(&header, &rows);
        for (dir, e) in self.runs.iter().filter_map(|r| r.as_ref().err()) {
            let _ = writeln!(out, "error: {}: {e}", dir.display());
        }
        let ta = self.time_accuracy();
        if !ta.is_empty() {
            out.push('\n');
            let header: Vec<String> = ["variant", "runs", "ms_per_batch", "best_acc"]
                .map(String::from)
                .to_vec();
            let rows: Vec<Vec<String>> = ta
                .iter()
                .map(|t| {
                    vec![
                        t.variant.clone(),
                        t.runs.to_string(),
                        format!("{:.3}", t.ms_mean),
                        pct(t.best_test_acc),
                    ]
                })
                .collect();
            out.push_str(&align(&header, &rows));
        }
        out
    }

    pub fn any_ok(&self) -> bool {
        self.runs.iter().any(|r| r.is_ok())
    }
}

fn align(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 2 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Build the report, print it, and write the CSV to `csv_path` when given.
pub fn report(
    dirs: &[PathBuf],
    baseline: Option<&Path>,
    csv_path: Option<&Path>,
) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::Config(vec![
            "report needs at least one run directory".into(),
        ]));
    }
    if let Some(b) = baseline {
        if !dirs.iter().any(|d| d == b) {
            return Err(Error::Config(vec![format!(
                "baseline {} is not among the reported runs",
                b.display()
            )]));
        }
    }
    let report = Report::build(dirs, baseline);
    print!("{}", report.to_text());
    if let Some(path) = csv_path {
        write_file(path, report.to_csv()?)?;
    }
    if report.any_ok() {
        Ok(report)
    } else {
        Err(Error::Format("no readable runs".into()))
    }
}
