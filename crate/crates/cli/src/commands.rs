//! One function per subcommand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use mziris::encoder::{EncoderConfig, LossConfig, SiameseEncoder};
use mziris::eval::{self, MetricReport};
use mziris::fixtures::{self, PopulationSpec};
use mziris::io::{self, Manifest, QualityLine};
use mziris::pairing::{self, ImageRecord, PairFile, PairKind, PairLabel, PairRow, PairingOptions};
use mziris::preprocess::{self, InputVariant, IrisMask};
use mziris::quality::{self, QualityReport, RejectReason};
use mziris::report::{self, Experiment};
use mziris::trainer::{self, CheckpointMeta, ExperimentConfig, LogProgress, OptimizerConfig, TestSet, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io as io_err, CliError, Code};

pub type Result<T> = std::result::Result<T, CliError>;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const QUALITY_FILE: &str = "quality.jsonl";
pub const FILTERED_MANIFEST_FILE: &str = "filtered_manifest.csv";
pub const SCREENING_FILE: &str = "screening.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const EVAL_METRICS_FILE: &str = "metrics.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
/// Pair-file comment naming the manifest the pairs were drawn from.
const MANIFEST_COMMENT: &str = "manifest";

/// Fails with [`Code::Exists`] when any of `paths` exists and overwriting
/// was not requested.
fn refuse_existing(paths: &[PathBuf], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::new(
            Code::Exists,
            format!("{} exists; pass --overwrite to replace it", p.display()),
        )),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    io::write_atomic(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text.as_bytes())
}

/// Rewrites absolute record paths relative to `dir` and writes the manifest.
fn write_manifest(dir: &Path, records: &[ImageRecord]) -> Result<()> {
    let base = Manifest {
        base_dir: PathBuf::new(),
        records: Vec::new(),
    };
    let rel = base.records_relative_to(records, dir).map_err(io_err(dir))?;
    write(&dir.join(MANIFEST_FILE), &io::manifest_csv(&rel))
}

pub fn fixtures_population(out: &Path, spec: PopulationSpec, overwrite: bool) -> Result<()> {
    refuse_existing(&[out.join(MANIFEST_FILE)], overwrite)?;
    let records = fixtures::generate_population(out, &spec).map_err(io_err(out))?;
    write_manifest(out, &records)?;
    println!("wrote {} captures of {} subjects to {}", records.len(), spec.subjects, out.display());
    Ok(())
}

/// Seed of the quality-gate captures; fixed so the scores are reproducible.
const QUALITY_GATE_SEED: u64 = 9;

pub fn fixtures_quality_gate(out: &Path, overwrite: bool) -> Result<()> {
    refuse_existing(&[out.join(MANIFEST_FILE)], overwrite)?;
    let date = chrono::NaiveDate::from_ymd_opt(2008, 1, 7).expect("valid date");
    let mut records = Vec::new();
    for (target, subject) in [(50u8, "Q050"), (49, "Q049")] {
        let fx = fixtures::capture_with_quality(target, QUALITY_GATE_SEED)
            .ok_or_else(|| CliError::new(Code::Internal, format!("no capture scores {target}")))?;
        let (path, mask) = fixtures::write_fixture(out, subject, &fx).map_err(io_err(out))?;
        records.push(ImageRecord::new(subject, pairing::Eye::L, date, path).with_mask(mask));
    }
    let blank = out.join("FAIL.png");
    fixtures::featureless_capture()
        .save(&blank)
        .map_err(|e| CliError::new(Code::Internal, format!("{}: {e}", blank.display())))?;
    records.push(ImageRecord::new("FAIL", pairing::Eye::L, date, blank));
    write_manifest(out, &records)?;
    println!("wrote quality-gate captures (50, 49, failing) to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Rejection {
    path: PathBuf,
    reason: RejectReason,
}

#[derive(Serialize)]
struct ScreeningSummary {
    threshold: u8,
    kept: usize,
    rejected: Vec<Rejection>,
}

fn score_record(manifest: &Manifest, rec: &ImageRecord, allow_resize: bool) -> Result<QualityReport> {
    let path = manifest.resolve(&rec.path);
    let image = preprocess::load_image(&path, allow_resize)?;
    let mask = match &rec.mask_path {
        Some(m) => {
            let m = preprocess::load_mask(&manifest.resolve(m))?;
            Some(if m.dimensions() == image.dimensions() {
                m
            } else if allow_resize {
                IrisMask::from_gray(&preprocess::resize_bilinear(&m.to_gray(), image.width(), image.height()))
            } else {
                return Err(CliError::input(format!(
                    "{}: mask is {:?} but image is {:?}",
                    path.display(),
                    m.dimensions(),
                    image.dimensions()
                )));
            })
        }
        None => None,
    };
    Ok(match io::geometry_of(&path, &image) {
        Ok(g) => quality::compute_quality(&image, &g, mask.as_ref()),
        Err(e) => {
            log::warn!("{}: {e}", path.display());
            QualityReport::failed()
        }
    })
}

pub fn quality(manifest_path: &Path, out: &Path, threshold: u8, allow_resize: bool, overwrite: bool) -> Result<()> {
    let outputs = [out.join(QUALITY_FILE), out.join(FILTERED_MANIFEST_FILE), out.join(SCREENING_FILE)];
    refuse_existing(&outputs, overwrite)?;
    let manifest = Manifest::read(manifest_path)?;
    let mut scored = Vec::with_capacity(manifest.records.len());
    let mut lines = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let report = score_record(&manifest, rec, allow_resize)?;
        lines.push(QualityLine {
            path: rec.path.clone(),
            report: report.clone(),
        });
        let mut rec = rec.clone();
        rec.quality = Some(report);
        scored.push(rec);
    }
    let screening = quality::filter_manifest(&scored, threshold)?;
    for (rec, reason) in &screening.rejected {
        log::info!("rejected {}: {reason}", rec.path.display());
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let kept = manifest.records_relative_to(&screening.kept, out).map_err(io_err(out))?;
    write(&outputs[0], &io::quality_jsonl(&lines))?;
    write(&outputs[1], &io::manifest_csv(&kept))?;
    write_json(
        &outputs[2],
        &ScreeningSummary {
            threshold,
            kept: kept.len(),
            rejected: screening
                .rejected
                .iter()
                .map(|(r, reason)| Rejection {
                    path: r.path.clone(),
                    reason: *reason,
                })
                .collect(),
        },
    )?;
    println!(
        "kept {} of {} captures at threshold {threshold}",
        kept.len(),
        manifest.records.len()
    );
    Ok(())
}

pub fn build_pairs(
    manifest_path: &Path,
    kind: PairKind,
    seed: u64,
    out: &Path,
    max_positives_per_subject: Option<usize>,
    overwrite: bool,
) -> Result<()> {
    refuse_existing(&[out.to_path_buf()], overwrite)?;
    let manifest = Manifest::read(manifest_path)?;
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    // Pair files store paths relative to their own directory.
    let records = manifest.records_relative_to(&manifest.records, out_dir).map_err(io_err(out_dir))?;
    let pairs = match kind {
        PairKind::Synthetic => pairing::build_train_pairs(
            &records,
            seed,
            &PairingOptions {
                max_positives_per_subject,
            },
        )?,
        PairKind::Natural => pairing::build_test_pairs(&records, seed)?,
    };
    let rows: Vec<PairRow> = pairs.iter().map(|p| p.row()).collect();
    let summary = pairing::balance(&rows);
    let manifest_ref = io::relative_path(manifest_path, out_dir).map_err(io_err(manifest_path))?;
    let comments = [
        ("kind", kind.as_str().to_string()),
        ("seed", seed.to_string()),
        (MANIFEST_COMMENT, manifest_ref.to_string_lossy().into_owned()),
        ("mz", summary.mz.to_string()),
        ("nmz", summary.nmz.to_string()),
    ];
    let mut buf = Vec::new();
    pairing::write_pairs(&mut buf, &rows, &comments).map_err(io_err(out))?;
    write(out, &buf)?;
    println!("{} pairs: {} MZ, {} NMZ -> {}", rows.len(), summary.mz, summary.nmz, out.display());
    Ok(())
}

/// A pair file with its rows' paths resolved and the source manifest loaded.
struct LoadedPairs {
    /// Rows as stored, paths relative to the pair file; these name the pairs.
    stored: Vec<PairRow>,
    /// The same rows with resolved paths, used for loading.
    rows: Vec<PairRow>,
    manifest: Option<Manifest>,
}

impl LoadedPairs {
    fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let PairFile { comments, rows } = pairing::read_pairs(std::io::BufReader::new(file))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolved = rows
            .iter()
            .map(|r| PairRow {
                a_path: dir.join(&r.a_path),
                b_path: dir.join(&r.b_path),
                ..r.clone()
            })
            .collect();
        let manifest = comments
            .iter()
            .find(|(k, _)| k == MANIFEST_COMMENT)
            .map(|(_, v)| Manifest::read(&dir.join(v)))
            .transpose()?;
        Ok(Self {
            stored: rows,
            rows: resolved,
            manifest,
        })
    }

    fn mask_of(&self) -> impl Fn(&Path) -> Option<PathBuf> + '_ {
        move |p| self.manifest.as_ref().and_then(|m| m.mask_for(p))
    }

    fn prepare(&self, variant: InputVariant, size: usize, allow_resize: bool) -> Result<Vec<trainer::TrainingPair>> {
        let mut pairs = trainer::prepare_pairs(&self.rows, self.mask_of(), variant, size, allow_resize)?;
        // Ids come from the stored rows so split checksums do not depend on
        // where the data lives.
        for (p, r) in pairs.iter_mut().zip(&self.stored) {
            p.id = r.id();
        }
        Ok(pairs)
    }

    /// Pupil-to-iris ratio of every image, from its sidecar or a fit.
    fn ratios(&self, allow_resize: bool) -> Result<HashMap<PathBuf, Option<f64>>> {
        let mut out = HashMap::new();
        for r in &self.rows {
            for p in [&r.a_path, &r.b_path] {
                if out.contains_key(p) {
                    continue;
                }
                let image = preprocess::load_image(p, allow_resize)?;
                let ratio = io::geometry_of(p, &image).ok().map(|g| quality::pupil_iris_ratio(&g));
                out.insert(p.clone(), ratio);
            }
        }
        Ok(out)
    }
}

/// Data section of an experiment file. Relative paths are resolved against
/// the experiment file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_pairs: PathBuf,
    #[serde(default)]
    pub test_pairs: Option<PathBuf>,
    #[serde(default)]
    pub allow_resize: bool,
}

/// Experiment file: the data section plus the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl ExperimentFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let mut file: Self = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        file.data.train_pairs = dir.join(&file.data.train_pairs);
        file.data.test_pairs = file.data.test_pairs.map(|p| dir.join(p));
        if let Some(w) = &file.encoder.pretrained_weights {
            file.encoder.pretrained_weights = Some(dir.join(w));
        }
        Ok(file)
    }

    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            optimizer: self.optimizer,
            loss: self.loss,
            encoder: self.encoder.clone(),
        }
    }
}

pub struct TrainOverrides {
    pub variant: Option<InputVariant>,
    pub epochs: Option<usize>,
    pub runs: Option<usize>,
}

pub fn train(config_path: &Path, overrides: TrainOverrides, out: &Path, overwrite: bool) -> Result<()> {
    let mut file = ExperimentFile::read(config_path)?;
    if let Some(v) = overrides.variant {
        file.train.variant = v;
    }
    if let Some(e) = overrides.epochs {
        file.train.epochs = e;
    }
    if let Some(r) = overrides.runs {
        file.train.n_runs = r;
    }
    file.train.validate()?;
    file.encoder.validate()?;
    file.optimizer.validate().map_err(CliError::input)?;
    let exp_dir = out.join(file.train.variant.as_str());
    let nonempty = std::fs::read_dir(&exp_dir).is_ok_and(|mut d| d.next().is_some());
    if nonempty {
        if !overwrite {
            return Err(CliError::new(
                Code::Exists,
                format!("{} is not empty; pass --overwrite to replace it", exp_dir.display()),
            ));
        }
        std::fs::remove_dir_all(&exp_dir).map_err(io_err(&exp_dir))?;
    }
    std::fs::create_dir_all(&exp_dir).map_err(io_err(&exp_dir))?;
    write(
        &exp_dir.join(RESOLVED_CONFIG_FILE),
        toml::to_string(&file).expect("config serializes").as_bytes(),
    )?;

    let size = file.encoder.input_size;
    let variant = file.train.variant;
    let allow_resize = file.data.allow_resize;
    let train_pairs = LoadedPairs::read(&file.data.train_pairs)?;
    let train = train_pairs.prepare(variant, size, allow_resize)?;
    let test_pairs = file.data.test_pairs.as_deref().map(LoadedPairs::read).transpose()?;
    let test = test_pairs
        .as_ref()
        .map(|t| -> Result<_> { Ok((t.prepare(variant, size, allow_resize)?, t.ratios(allow_resize)?)) })
        .transpose()?;
    let ratio_lookup = |p: &Path| -> Option<f64> { test.as_ref().and_then(|(_, r)| r.get(p).copied().flatten()) };
    let test_set = match (&test, &test_pairs) {
        (Some((pairs, _)), Some(loaded)) => Some(TestSet {
            pairs,
            rows: &loaded.rows,
            ratio_of: &ratio_lookup,
        }),
        _ => None,
    };
    log::info!(
        "training {} runs of {} epochs on {} pairs ({variant})",
        file.train.n_runs,
        file.train.epochs,
        train.len()
    );
    let report = trainer::run_experiment(&file.experiment(), &train, test_set.as_ref(), &exp_dir, &mut LogProgress)?;
    write_json(&exp_dir.join(report::EXPERIMENT_FILE), &report)?;
    println!("split checksum {}", report.split_checksum);
    for (name, m) in &report.aggregate.metrics {
        if let Some(m) = m {
            println!("{name}: {} ± {} (n={})", m.mean, m.std, m.n);
        }
    }
    if !report.failures.is_empty() {
        let runs: Vec<String> = report.failures.iter().map(|f| format!("run {}: {}", f.run, f.error)).collect();
        return Err(CliError::new(Code::Divergence, format!("diverged: {}", runs.join("; "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: PathBuf,
    variant: InputVariant,
    tau: f64,
    metrics: MetricReport,
    sweep: Vec<eval::SweepRow>,
    dilation: Option<Vec<eval::DilationBin>>,
}

pub fn evaluate(
    checkpoint: &Path,
    pairs_path: &Path,
    out: &Path,
    tau: f64,
    bins: usize,
    allow_resize: bool,
    overwrite: bool,
) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CliError::input(format!("tau must be positive, got {tau}")));
    }
    let outputs = [out.join(RESULTS_FILE), out.join(EVAL_METRICS_FILE)];
    refuse_existing(&outputs, overwrite)?;
    let meta = CheckpointMeta::read(checkpoint).map_err(CliError::input)?;
    let model = SiameseEncoder::load(meta.encoder.clone(), checkpoint)?;
    let loaded = LoadedPairs::read(pairs_path)?;
    let pairs = loaded.prepare(meta.variant, meta.encoder.input_size, allow_resize)?;
    let ratios = loaded.ratios(allow_resize)?;
    let distances = trainer::pair_distances(&model, &pairs, 32)?;
    let results = eval::pair_results(&loaded.rows, &distances, tau, &|p| ratios.get(p).copied().flatten());
    let metrics = eval::compute_metrics(&results)?;
    let scored: Vec<(PairLabel, f64)> = results.iter().map(|r| (r.label(), r.distance)).collect();
    let sweep = eval::threshold_sweep(&scored, &eval::SWEEP_THRESHOLDS)?;
    let dilation = if bins == 0 {
        return Err(CliError::input("bins must be at least 1"));
    } else {
        let diffs: Vec<f64> = results.iter().filter_map(|r| r.ratio_difference()).collect();
        let edges = eval::equal_width_edges(&diffs, bins);
        match eval::dilation_error_analysis(&results, Some(&edges)) {
            Ok(b) => Some(b),
            Err(e) => {
                log::warn!("skipping pupil-ratio analysis: {e}");
                None
            }
        }
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut buf = Vec::new();
    eval::write_results(&mut buf, &results).map_err(io_err(&outputs[0]))?;
    write(&outputs[0], &buf)?;
    write_json(
        &outputs[1],
        &EvalSummary {
            checkpoint: checkpoint.to_path_buf(),
            variant: meta.variant,
            tau,
            metrics: metrics.clone(),
            sweep,
            dilation,
        },
    )?;
    for (name, v) in metrics.named() {
        println!("{name}: {}", v.map_or("n/a".to_string(), |v| v.to_string()));
    }
    Ok(())
}

pub fn report(experiments: &[PathBuf], out: &Path, bins: usize, overwrite: bool) -> Result<()> {
    if bins == 0 {
        return Err(CliError::input("bins must be at least 1"));
    }
    let loaded = experiments
        .iter()
        .map(|dir| {
            let label = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into());
            Experiment::load(label, dir)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut planned = vec![out.join(report::SUMMARY_FILE)];
    for e in &loaded {
        for plot in [report::LOSS_PLOT, report::ACCURACY_PLOT, report::DILATION_PLOT] {
            planned.push(out.join(format!("{plot}_{}.svg", e.label)));
        }
    }
    refuse_existing(&planned, overwrite)?;
    for path in report::write_report(&loaded, out, bins)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
