//! Static report artifacts: training curves, dilation error bars and the
//! mean ± std summary table.
//!
//! Plots are plain SVG documents. Table values are printed with Rust's
//! shortest round-trip float formatting, so [`parse_summary_table`] recovers
//! the aggregate values bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use std::path::{Path, PathBuf};

use crate::eval::{self, AggregateReport, DilationBin, MeanStd, PairResult};
use crate::io::write_atomic;
use crate::trainer::{EpochMetrics, ExperimentReport};

/// File name of the serialized [`ExperimentReport`] in an experiment directory.
pub const EXPERIMENT_FILE: &str = "experiment.json";
/// File name of each run's test-set results inside `run_{i}/`.
pub const TEST_RESULTS_FILE: &str = "test_results.csv";
pub const LOSS_PLOT: &str = "loss_curve";
pub const ACCURACY_PLOT: &str = "accuracy_curve";
pub const DILATION_PLOT: &str = "dilation_error_rates";
pub const SUMMARY_FILE: &str = "summary.md";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Per-epoch mean of the curves of all runs; epochs that only some runs
/// reached average over those runs.
pub fn mean_curve(runs: &[&[EpochMetrics]]) -> Vec<EpochMetrics> {
    let epochs = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (0..epochs)
        .map(|e| {
            let at: Vec<&EpochMetrics> = runs.iter().filter_map(|r| r.get(e)).collect();
            let pick = |f: fn(&EpochMetrics) -> Option<f64>| mean(at.iter().filter_map(|m| f(m)).collect());
            EpochMetrics {
                epoch: e + 1,
                train_loss: pick(|m| Some(m.train_loss)).unwrap_or(f64::NAN),
                train_acc: pick(|m| Some(m.train_acc)).unwrap_or(f64::NAN),
                val_loss: pick(|m| m.val_loss),
                val_acc: pick(|m| m.val_acc),
                avg_pos_dist: pick(|m| m.avg_pos_dist),
                avg_neg_dist: pick(|m| m.avg_neg_dist),
            }
        })
        .collect()
}

/// A loaded experiment directory.
pub struct Experiment {
    pub label: String,
    pub dir: PathBuf,
    pub report: ExperimentReport,
    /// Test results of all completed runs, pooled.
    pub results: Vec<PairResult>,
}

impl Experiment {
    pub fn load(label: impl Into<String>, dir: &Path) -> Result<Self, ReportError> {
        let path = dir.join(EXPERIMENT_FILE);
        if !path.is_file() {
            return Err(ReportError::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| ReportError::Invalid {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let mut results = Vec::new();
        for run in &report.runs {
            let p = dir.join(format!("run_{}", run.artifacts.run)).join(TEST_RESULTS_FILE);
            let f = std::fs::File::open(&p).map_err(|_| ReportError::MissingArtifact(p.clone()))?;
            results.extend(eval::read_results(f).map_err(|e| ReportError::Invalid {
                path: p.clone(),
                message: e.to_string(),
            })?);
        }
        Ok(Self {
            label: label.into(),
            dir: dir.to_path_buf(),
            report,
            results,
        })
    }
}

/// Writes, for every experiment, the loss curve, accuracy curve and
/// dilation error plot (`<plot>_<label>.svg`), plus one summary table
/// covering all experiments. Returns the written paths.
pub fn write_report(experiments: &[Experiment], out_dir: &Path, bins: usize) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    let mut put = |name: String, body: &str| -> Result<(), ReportError> {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
        Ok(())
    };
    for exp in experiments {
        let curves: Vec<&[EpochMetrics]> = exp.report.runs.iter().map(|r| r.artifacts.per_epoch.as_slice()).collect();
        let curve = mean_curve(&curves);
        put(format!("{LOSS_PLOT}_{}.svg", exp.label), &loss_curve(&curve))?;
        put(format!("{ACCURACY_PLOT}_{}.svg", exp.label), &accuracy_curve(&curve))?;
        let diffs: Vec<f64> = exp.results.iter().filter_map(PairResult::ratio_difference).collect();
        let edges = eval::equal_width_edges(&diffs, bins);
        let dilation = eval::dilation_error_analysis(&exp.results, Some(&edges)).map_err(|e| ReportError::Invalid {
            path: exp.dir.clone(),
            message: e.to_string(),
        })?;
        put(format!("{DILATION_PLOT}_{}.svg", exp.label), &dilation_bars(&dilation))?;
    }
    let rows: Vec<(String, &AggregateReport)> = experiments
        .iter()
        .map(|e| (e.label.clone(), &e.report.aggregate))
        .collect();
    put(SUMMARY_FILE.to_string(), &summary_table(&rows))?;
    Ok(written)
}

/// Column order of the summary table.
pub const TABLE_METRICS: [&str; 6] = ["accuracy", "precision", "recall", "f1", "avg_pos_dist", "avg_neg_dist"];

const TABLE_TITLES: [&str; 6] = ["Accuracy", "Precision", "Recall", "F1", "Avg Pos Dist", "Avg Neg Dist"];

const UNDEFINED: &str = "n/a";

fn cell(v: Option<&MeanStd>) -> String {
    match v {
        Some(m) => format!("{} ± {}", m.mean, m.std),
        None => UNDEFINED.to_string(),
    }
}

/// Markdown table with one row per labelled aggregate.
pub fn summary_table(rows: &[(String, &AggregateReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Input | Runs | {} |", TABLE_TITLES.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---|".repeat(TABLE_TITLES.len()));
    for (label, agg) in rows {
        let cells: Vec<String> = TABLE_METRICS
            .iter()
            .map(|m| cell(agg.metrics.get(*m).and_then(Option::as_ref)))
            .collect();
        let _ = writeln!(
            out,
            "| {label} | {}/{} | {} |",
            agg.completed_runs,
            agg.n_runs,
            cells.join(" | ")
        );
    }
    out
}

/// One parsed table row: label and metric name to mean/std.
pub type TableRow = (String, BTreeMap<String, Option<MeanStd>>);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("summary table line {line}: {message}")]
pub struct TableParseError {
    pub line: usize,
    pub message: String,
}

/// Parses a table written by [`summary_table`]. The `n` of each metric is
/// not stored and reads back as the completed run count.
pub fn parse_summary_table(text: &str) -> Result<Vec<TableRow>, TableParseError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(2) {
        let err = |message: String| TableParseError { line: i + 1, message };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        if parts.len() != 2 + TABLE_METRICS.len() {
            return Err(err(format!("expected {} cells, got {}", 2 + TABLE_METRICS.len(), parts.len())));
        }
        let completed: usize = parts[1]
            .split('/')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad run count {:?}", parts[1])))?;
        let mut metrics = BTreeMap::new();
        for (name, text) in TABLE_METRICS.iter().zip(&parts[2..]) {
            let value = if *text == UNDEFINED {
                None
            } else {
                let (m, s) = text
                    .split_once(" ± ")
                    .ok_or_else(|| err(format!("bad cell {text:?}")))?;
                let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}")));
                Some(MeanStd {
                    mean: num(m)?,
                    std: num(s)?,
                    n: completed,
                })
            };
            metrics.insert(name.to_string(), value);
        }
        rows.push((parts[0].to_string(), metrics));
    }
    Ok(rows)
}

/// A named series of `(x, y)` points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\">{x_label}</text>\n",
            "<text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{y_label}</text>\n",
            "{body}</svg>\n"
        ),
        w = W,
        h = H,
        cx = W / 2.0,
        cy = H / 2.0,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        xl = H - 16.0,
        title = escape(title),
        x_label = escape(x_label),
        y_label = escape(y_label),
        body = body,
    )
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Line chart of one or more series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let y0 = y0.min(0.0);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut body = String::new();
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>",
            MARGIN - 4.0,
            sy(y) + 4.0,
            y
        );
        let x = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.0}</text>",
            sx(x),
            H - MARGIN + 16.0,
            x
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            body,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - MARGIN - 150.0,
            ly - 4.0,
            W - MARGIN - 134.0,
            ly,
            escape(&s.name)
        );
    }
    frame(title, x_label, y_label, &body)
}

/// Training and validation loss per epoch.
pub fn loss_curve(per_epoch: &[EpochMetrics]) -> String {
    let train = Series {
        name: "training loss".into(),
        points: per_epoch.iter().map(|m| (m.epoch as f64, m.train_loss)).collect(),
    };
    let val = Series {
        name: "validation loss".into(),
        points: per_epoch
            .iter()
            .filter_map(|m| Some((m.epoch as f64, m.val_loss?)))
            .collect(),
    };
    line_chart("Loss over epochs", "epoch", "contrastive loss", &[train, val])
}

/// Training and validation accuracy per epoch.
pub fn accuracy_curve(per_epoch: &[EpochMetrics]) -> String {
    let train = Series {
        name: "training accuracy".into(),
        points: per_epoch.iter().map(|m| (m.epoch as f64, m.train_acc)).collect(),
    };
    let val = Series {
        name: "validation accuracy".into(),
        points: per_epoch
            .iter()
            .filter_map(|m| Some((m.epoch as f64, m.val_acc?)))
            .collect(),
    };
    line_chart("Accuracy over epochs", "epoch", "accuracy", &[train, val])
}

/// Grouped bars of FN rate (MZ pairs) and FP rate (NMZ pairs) per
/// pupil-ratio-difference bin. Undefined rates are drawn as a hollow marker.
pub fn dilation_bars(bins: &[DilationBin]) -> String {
    let n = bins.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    let bar = slot * 0.35;
    let sy = |y: f64| H - MARGIN - y * (H - 2.0 * MARGIN);
    let mut body = String::new();
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.2}</text>",
            MARGIN - 4.0,
            sy(y) + 4.0,
            y
        );
    }
    for (i, b) in bins.iter().enumerate() {
        let left = MARGIN + slot * i as f64 + slot * 0.15;
        for (j, (rate, color)) in [(b.fn_rate, PALETTE[3]), (b.fp_rate, PALETTE[0])].into_iter().enumerate() {
            let x = left + bar * j as f64;
            match rate {
                Some(r) => {
                    let _ = writeln!(
                        body,
                        "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"{:.2}\" fill=\"{color}\"/>",
                        sy(r),
                        sy(0.0) - sy(r)
                    );
                }
                None => {
                    let _ = writeln!(
                        body,
                        "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"4\" fill=\"none\" stroke=\"{color}\"/>",
                        sy(0.0) - 4.0
                    );
                }
            }
        }
        let _ = writeln!(
            body,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{:.3}-{:.3}</text>",
            left + bar,
            H - MARGIN + 16.0,
            b.lo,
            b.hi
        );
    }
    for (j, (name, color)) in [("FN rate (MZ pairs)", PALETTE[3]), ("FP rate (NMZ pairs)", PALETTE[0])]
        .into_iter()
        .enumerate()
    {
        let ly = MARGIN + 16.0 * j as f64;
        let _ = writeln!(
            body,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"8\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{name}</text>",
            W - MARGIN - 150.0,
            ly - 8.0,
            W - MARGIN - 134.0,
            ly
        );
    }
    frame(
        "Error rate by pupil-iris ratio difference",
        "|ratio_a - ratio_b|",
        "error rate",
        &body,
    )
}
