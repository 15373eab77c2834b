//! Threshold classification, verification metrics, dilation error analysis,
//! threshold sweeps and run aggregation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::BackboneDepth;
use crate::pairing::{PairKind, PairLabel, PairRow};
use crate::trainer::{self, ExperimentConfig, TestSet, TrainError, TrainObserver, TrainingPair};

/// Threshold grid for the sensitivity sweep.
pub const SWEEP_THRESHOLDS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Default number of equal-width dilation bins.
pub const DEFAULT_DILATION_BINS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no results to evaluate")]
    EmptyResults,
    #[error("pair {0} lacks a pupil-to-iris ratio")]
    MissingGeometry(String),
    #[error("bin edges must be strictly increasing and at least two")]
    InvalidBins,
    #[error("results line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// MZ when `distance < tau`; a distance equal to `tau` is NMZ.
pub fn classify(distance: f64, tau: f64) -> PairLabel {
    if distance < tau {
        PairLabel::Mz
    } else {
        PairLabel::Nmz
    }
}

/// One scored test pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub pair: PairRow,
    pub distance: f64,
    pub predicted: PairLabel,
    pub pupil_ratio_a: Option<f64>,
    pub pupil_ratio_b: Option<f64>,
}

impl PairResult {
    pub fn label(&self) -> PairLabel {
        self.pair.label
    }

    /// `|ratio_a - ratio_b|` when both ratios are known.
    pub fn ratio_difference(&self) -> Option<f64> {
        Some((self.pupil_ratio_a? - self.pupil_ratio_b?).abs())
    }
}

/// Scores `rows` with precomputed `distances` (same order).
pub fn pair_results(
    rows: &[PairRow],
    distances: &[f64],
    tau: f64,
    ratio_of: &dyn Fn(&Path) -> Option<f64>,
) -> Vec<PairResult> {
    rows.iter()
        .zip(distances)
        .map(|(row, &d)| PairResult {
            pair: row.clone(),
            distance: d,
            predicted: classify(d, tau),
            pupil_ratio_a: ratio_of(&row.a_path),
            pupil_ratio_b: ratio_of(&row.b_path),
        })
        .collect()
}

const RESULT_HEADER: [&str; 7] = ["a_path", "b_path", "label", "distance", "predicted", "ratio_a", "ratio_b"];

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results<W: Write>(w: W, results: &[PairResult]) -> std::io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(RESULT_HEADER)?;
    for r in results {
        csv.write_record([
            r.pair.a_path.to_string_lossy().as_ref(),
            r.pair.b_path.to_string_lossy().as_ref(),
            &r.pair.label.bit().to_string(),
            &r.distance.to_string(),
            &r.predicted.bit().to_string(),
            &opt_num(r.pupil_ratio_a),
            &opt_num(r.pupil_ratio_b),
        ])?;
    }
    csv.flush()
}

/// Reads a results file; the pair kind is not stored and reads back as natural.
pub fn read_results<R: Read>(r: R) -> Result<Vec<PairResult>, EvalError> {
    let mut csv = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let line = i + 2;
        let err = |message: String| EvalError::Parse { line, message };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let bit = |s: &str| {
            s.parse::<u8>()
                .ok()
                .and_then(PairLabel::from_bit)
                .ok_or_else(|| err(format!("bad label {s:?}")))
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(PairResult {
            pair: PairRow {
                a_path: PathBuf::from(&rec[0]),
                b_path: PathBuf::from(&rec[1]),
                label: bit(&rec[2])?,
                kind: PairKind::Natural,
            },
            distance: num(&rec[3])?,
            predicted: bit(&rec[4])?,
            pupil_ratio_a: opt(&rec[5])?,
            pupil_ratio_b: opt(&rec[6])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Verification metrics with MZ as the positive class; ratios with a zero
/// denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub avg_pos_dist: Option<f64>,
    pub avg_neg_dist: Option<f64>,
    pub counts: Counts,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn from_counts(counts: Counts, avg_pos_dist: Option<f64>, avg_neg_dist: Option<f64>) -> Self {
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            accuracy: ratio(counts.tp + counts.tn, counts.total()),
            precision,
            recall,
            f1,
            avg_pos_dist,
            avg_neg_dist,
            counts,
        }
    }

    /// Named metric values in a fixed order.
    pub fn named(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("avg_pos_dist", self.avg_pos_dist),
            ("avg_neg_dist", self.avg_neg_dist),
        ]
    }
}

/// Metrics of labelled distances at threshold `tau`.
pub fn metrics_at(scored: &[(PairLabel, f64)], tau: f64) -> Result<MetricReport, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut c = Counts::default();
    for &(label, d) in scored {
        match (label, classify(d, tau)) {
            (PairLabel::Mz, PairLabel::Mz) => c.tp += 1,
            (PairLabel::Nmz, PairLabel::Mz) => c.fp += 1,
            (PairLabel::Nmz, PairLabel::Nmz) => c.tn += 1,
            (PairLabel::Mz, PairLabel::Nmz) => c.fn_ += 1,
        }
    }
    let by = |l: PairLabel| mean(scored.iter().filter(|s| s.0 == l).map(|s| s.1));
    Ok(MetricReport::from_counts(c, by(PairLabel::Mz), by(PairLabel::Nmz)))
}

/// Metrics of scored pairs, using each result's stored prediction.
pub fn compute_metrics(results: &[PairResult]) -> Result<MetricReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut c = Counts::default();
    for r in results {
        match (r.label(), r.predicted) {
            (PairLabel::Mz, PairLabel::Mz) => c.tp += 1,
            (PairLabel::Nmz, PairLabel::Mz) => c.fp += 1,
            (PairLabel::Nmz, PairLabel::Nmz) => c.tn += 1,
            (PairLabel::Mz, PairLabel::Nmz) => c.fn_ += 1,
        }
    }
    let by = |l: PairLabel| mean(results.iter().filter(|r| r.label() == l).map(|r| r.distance));
    Ok(MetricReport::from_counts(c, by(PairLabel::Mz), by(PairLabel::Nmz)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub report: MetricReport,
}

/// Re-thresholds stored distances at every `tau`; no re-embedding.
pub fn threshold_sweep(scored: &[(PairLabel, f64)], taus: &[f64]) -> Result<Vec<SweepRow>, EvalError> {
    taus.iter()
        .map(|&tau| {
            Ok(SweepRow {
                tau,
                report: metrics_at(scored, tau)?,
            })
        })
        .collect()
}

/// Error rates of the pairs whose ratio difference falls in `[lo, hi)`
/// (the last bin also includes `hi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilationBin {
    pub lo: f64,
    pub hi: f64,
    pub mz_pairs: usize,
    pub nmz_pairs: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    /// Over the MZ pairs of the bin.
    pub fn_rate: Option<f64>,
    /// Over the NMZ pairs of the bin.
    pub fp_rate: Option<f64>,
}

/// `bins` equal-width edges spanning `[min, max]` of the values.
pub fn equal_width_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || bins == 0 {
        return Vec::new();
    }
    let hi = if hi > lo { hi } else { lo + 1e-12 };
    (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect()
}

/// Buckets pairs by pupil-ratio difference and reports FN/FP rates per bin.
/// With `edges = None`, five equal-width bins over the observed range are used.
pub fn dilation_error_analysis(results: &[PairResult], edges: Option<&[f64]>) -> Result<Vec<DilationBin>, EvalError> {
    let diffs = results
        .iter()
        .map(|r| r.ratio_difference().ok_or_else(|| EvalError::MissingGeometry(r.pair.id())))
        .collect::<Result<Vec<f64>, _>>()?;
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let edges = match edges {
        Some(e) => e.to_vec(),
        None => equal_width_edges(&diffs, DEFAULT_DILATION_BINS),
    };
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidBins);
    }
    let last = edges.len() - 2;
    let mut bins: Vec<DilationBin> = edges
        .windows(2)
        .map(|w| DilationBin {
            lo: w[0],
            hi: w[1],
            mz_pairs: 0,
            nmz_pairs: 0,
            false_negatives: 0,
            false_positives: 0,
            fn_rate: None,
            fp_rate: None,
        })
        .collect();
    for (r, &d) in results.iter().zip(&diffs) {
        let k = if d == bins[last].hi {
            last
        } else {
            match bins.iter().position(|b| d >= b.lo && d < b.hi) {
                Some(k) => k,
                None => continue,
            }
        };
        let bin = &mut bins[k];
        match r.label() {
            PairLabel::Mz => {
                bin.mz_pairs += 1;
                bin.false_negatives += usize::from(r.predicted == PairLabel::Nmz);
            }
            PairLabel::Nmz => {
                bin.nmz_pairs += 1;
                bin.false_positives += usize::from(r.predicted == PairLabel::Mz);
            }
        }
    }
    for b in &mut bins {
        b.fn_rate = ratio(b.false_negatives, b.mz_pairs);
        b.fp_rate = ratio(b.false_positives, b.nmz_pairs);
    }
    Ok(bins)
}

/// Mean and population standard deviation over the runs where a metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let m = mean(values.iter().copied())?;
        let var = mean(values.iter().map(|v| (v - m) * (v - m)))?;
        Some(Self {
            mean: m,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub completed_runs: usize,
    /// Indices of runs that did not produce test metrics.
    pub incomplete_runs: Vec<usize>,
    /// Metric name to mean/std; `None` when no run defines the metric.
    pub metrics: BTreeMap<String, Option<MeanStd>>,
}

/// Aggregates per-run test reports (`None` marks a run without metrics).
/// `failed` lists runs that aborted before producing a report slot.
pub fn aggregate(reports: &[Option<&MetricReport>], failed: Vec<usize>) -> AggregateReport {
    let mut incomplete = failed;
    let mut metrics = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        if r.is_none() {
            incomplete.push(i);
        }
    }
    incomplete.sort_unstable();
    incomplete.dedup();
    let present: Vec<&MetricReport> = reports.iter().flatten().copied().collect();
    let names = MetricReport::from_counts(Counts::default(), None, None).named().map(|(n, _)| n);
    for (k, name) in names.iter().enumerate() {
        let values: Vec<f64> = present.iter().filter_map(|r| r.named()[k].1).collect();
        metrics.insert(name.to_string(), MeanStd::of(&values));
    }
    AggregateReport {
        n_runs: reports.len().max(incomplete.last().map_or(0, |&i| i + 1)),
        completed_runs: present.len(),
        incomplete_runs: incomplete,
        metrics,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub depth: BackboneDepth,
    pub accuracy: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub aggregate: AggregateReport,
}

/// One full experiment per backbone depth on identical data and seeds.
pub fn ablation_backbones(
    depths: &[BackboneDepth],
    cfg: &ExperimentConfig,
    pairs: &[TrainingPair],
    test: Option<&TestSet<'_>>,
    out_dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<AblationRow>, TrainError> {
    depths
        .iter()
        .map(|&depth| {
            let mut cfg = cfg.clone();
            cfg.encoder.backbone_depth = depth;
            let report = trainer::run_experiment(&cfg, pairs, test, &out_dir.join(depth.to_string()), observer)?;
            let agg = report.aggregate;
            Ok(AblationRow {
                depth,
                accuracy: agg.metrics.get("accuracy").copied().flatten(),
                f1: agg.metrics.get("f1").copied().flatten(),
                aggregate: agg,
            })
        })
        .collect()
}
