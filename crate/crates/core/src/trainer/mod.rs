//! Seeded training protocol: fixed split and batch order, Adam updates,
//! per-epoch validation, best-epoch checkpointing and repeated runs.

pub mod adam;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::loss::{self, contrastive_loss_tensor};
use crate::encoder::{EncoderConfig, EncoderError, InitSeeds, LossConfig, SiameseEncoder};
use crate::eval::{self, AggregateReport, MetricReport};
use crate::io::write_atomic;
use crate::pairing::{self, PairLabel, PairRow};
use crate::preprocess::{self, InputVariant, ModelInput, PreprocessError};
pub use adam::{Adam, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub n_runs: usize,
    /// Drives the split, the batch order and the backbone initialisation.
    pub seed: u64,
    pub variant: InputVariant,
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            val_fraction: 0.3,
            n_runs: 5,
            seed: 0,
            variant: InputVariant::Original,
            decision_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return bad(format!(
                "decision_threshold must lie in (0, 1), got {}",
                self.decision_threshold
            ));
        }
        Ok(())
    }

    /// Initialisation seed of the embedding head for run `run` (0-based).
    /// The backbone seed is `self.seed` for every run.
    pub fn head_seed(&self, run: usize) -> u64 {
        let digest = Sha256::new()
            .chain_update(b"head")
            .chain_update(self.seed.to_le_bytes())
            .chain_update((run as u64).to_le_bytes())
            .finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: u64, diagnostic: PathBuf },
    #[error("no training pairs")]
    NoTrainingPairs,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A labelled pair with both inputs already preprocessed.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub id: String,
    pub label: PairLabel,
    pub a: Arc<ModelInput>,
    pub b: Arc<ModelInput>,
}

/// Preprocesses every image referenced by `rows` once and assembles pairs.
///
/// `mask_of` maps an image path to its segmentation mask, if any.
pub fn prepare_pairs(
    rows: &[PairRow],
    mask_of: impl Fn(&Path) -> Option<PathBuf>,
    variant: InputVariant,
    size: usize,
    allow_resize: bool,
) -> Result<Vec<TrainingPair>, PreprocessError> {
    let mut cache: HashMap<PathBuf, Arc<ModelInput>> = HashMap::new();
    let mut load = |path: &Path| -> Result<Arc<ModelInput>, PreprocessError> {
        if let Some(hit) = cache.get(path) {
            return Ok(hit.clone());
        }
        let mask = mask_of(path);
        let input = Arc::new(preprocess::prepare(path, mask.as_deref(), variant, size, allow_resize)?);
        cache.insert(path.to_path_buf(), input.clone());
        Ok(input)
    };
    rows.iter()
        .map(|r| {
            Ok(TrainingPair {
                id: r.id(),
                label: r.label,
                a: load(&r.a_path)?,
                b: load(&r.b_path)?,
            })
        })
        .collect()
}

/// Metrics of one epoch. Distances are averaged per true label over the
/// validation pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub avg_pos_dist: Option<f64>,
    pub avg_neg_dist: Option<f64>,
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub variant: InputVariant,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    pub fn read(checkpoint: &Path) -> Result<Self, String> {
        let path = Self::sidecar_path(checkpoint);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run: usize,
    /// Head initialisation seed of this run.
    pub seed: u64,
    pub per_epoch: Vec<EpochMetrics>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub checkpoint_ref: PathBuf,
    pub metrics_log: PathBuf,
    pub steps: u64,
    pub split_checksum: String,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Called before each optimizer step with the ids of the pairs whose
    /// loss produces the gradient.
    fn on_step(&mut self, _epoch: usize, _step: u64, _pair_ids: &[&str]) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
    /// Checked after each completed epoch; returning `true` ends the run
    /// early. The checkpoint and metric log stay consistent with the
    /// epochs that ran.
    fn should_stop(&self) -> bool {
        false
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

/// Logs each epoch at info level.
pub struct LogProgress;

impl TrainObserver for LogProgress {
    fn on_epoch(&mut self, m: &EpochMetrics) {
        log::info!(
            "epoch {}: train loss {:.4} acc {:.3}, val loss {} acc {}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            m.val_acc.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
}

fn label_tensor(pairs: &[&TrainingPair], device: &candle_core::Device) -> candle_core::Result<Tensor> {
    let labels: Vec<f32> = pairs.iter().map(|p| p.label.bit() as f32).collect();
    Tensor::from_vec(labels, pairs.len(), device)
}

/// Inference-mode distances for `pairs`, processed `batch_size` pairs at a time.
pub fn pair_distances(
    model: &SiameseEncoder,
    pairs: &[TrainingPair],
    batch_size: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let a: Vec<&ModelInput> = chunk.iter().map(|p| p.a.as_ref()).collect();
        let b: Vec<&ModelInput> = chunk.iter().map(|p| p.b.as_ref()).collect();
        let (ea, eb) = model.forward_pairs(&model.batch_tensor(&a)?, &model.batch_tensor(&b)?, false)?;
        let refs: Vec<&TrainingPair> = chunk.iter().collect();
        let labels = label_tensor(&refs, model.device())?;
        let cfg = LossConfig::default();
        let (_, d) = contrastive_loss_tensor(&ea, &eb, &labels, model.config().distance, &cfg)?;
        out.extend(d.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

struct Summary {
    loss: f64,
    acc: f64,
    pos: Option<f64>,
    neg: Option<f64>,
}

fn summarize(labels: impl Iterator<Item = PairLabel>, d: &[f64], cfg: &LossConfig, tau: f64) -> Summary {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (label, &di) in labels.zip(d) {
        loss += loss::contrastive_loss(label, di, cfg);
        if eval::classify(di, tau) == label {
            correct += 1;
        }
        match label {
            PairLabel::Mz => {
                pos += di;
                n_pos += 1;
            }
            PairLabel::Nmz => {
                neg += di;
                n_neg += 1;
            }
        }
    }
    let n = d.len().max(1) as f64;
    Summary {
        loss: loss / n,
        acc: correct as f64 / n,
        pos: (n_pos > 0).then(|| pos / n_pos as f64),
        neg: (n_neg > 0).then(|| neg / n_neg as f64),
    }
}

fn write_metrics_log(path: &Path, per_epoch: &[EpochMetrics]) -> Result<(), TrainError> {
    let mut text = String::new();
    for m in per_epoch {
        text.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const DIVERGENCE_REPORT: &str = "divergence.json";

/// Trains `model` in place on `train` and validates on `val` every epoch.
///
/// Batches follow a per-epoch shuffle fixed by `tc.seed`, so every run with
/// the same config sees the same batches. Training loss and accuracy are
/// accumulated from the training-mode forward passes of each epoch; the
/// validation pairs are only ever embedded in inference mode.
pub fn train_one_run(
    model: &SiameseEncoder,
    train: &[TrainingPair],
    val: &[TrainingPair],
    tc: &TrainConfig,
    oc: &OptimizerConfig,
    lc: &LossConfig,
    run_dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<RunArtifacts, TrainError> {
    tc.validate()?;
    oc.validate().map_err(TrainError::InvalidConfig)?;
    if train.is_empty() {
        return Err(TrainError::NoTrainingPairs);
    }
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let metrics_log = run_dir.join(METRICS_LOG);
    let checkpoint = run_dir.join(BEST_CHECKPOINT);
    let vars = model.trainable_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = Adam::new(vars, *oc)?;
    let device = model.device().clone();
    let kind = model.config().distance;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut per_epoch = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut seen_labels = Vec::with_capacity(train.len());
        let mut seen_d = Vec::with_capacity(train.len());
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &train[i]).collect();
            let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
            observer.on_step(epoch, opt.steps() + 1, &ids);
            let a: Vec<&ModelInput> = batch.iter().map(|p| p.a.as_ref()).collect();
            let b: Vec<&ModelInput> = batch.iter().map(|p| p.b.as_ref()).collect();
            let (ea, eb) = model.forward_pairs(&model.batch_tensor(&a)?, &model.batch_tensor(&b)?, true)?;
            let labels = label_tensor(&batch, &device)?;
            let (loss, d) = contrastive_loss_tensor(&ea, &eb, &labels, kind, lc)?;
            let loss_value = loss.to_scalar::<f32>()? as f64;
            if !loss_value.is_finite() {
                let diagnostic = run_dir.join(DIVERGENCE_REPORT);
                let report = serde_json::json!({
                    "epoch": epoch,
                    "step": opt.steps() + 1,
                    "loss": loss_value.to_string(),
                    "pair_ids": ids,
                });
                write_atomic(&diagnostic, report.to_string().as_bytes()).map_err(io_err(&diagnostic))?;
                write_metrics_log(&metrics_log, &per_epoch)?;
                return Err(TrainError::Divergence {
                    epoch,
                    step: opt.steps() + 1,
                    diagnostic,
                });
            }
            opt.step(&loss.backward()?)?;
            seen_labels.extend(batch.iter().map(|p| p.label));
            seen_d.extend(d.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        let tr = summarize(seen_labels.into_iter(), &seen_d, lc, tc.decision_threshold);
        let vs = if val.is_empty() {
            None
        } else {
            let d = pair_distances(model, val, tc.batch_size)?;
            Some(summarize(val.iter().map(|p| p.label), &d, lc, tc.decision_threshold))
        };
        let m = EpochMetrics {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.acc,
            val_loss: vs.as_ref().map(|v| v.loss),
            val_acc: vs.as_ref().map(|v| v.acc),
            avg_pos_dist: vs.as_ref().map_or(tr.pos, |v| v.pos),
            avg_neg_dist: vs.as_ref().map_or(tr.neg, |v| v.neg),
        };
        // Without validation pairs the training loss selects the epoch.
        let selection_loss = m.val_loss.unwrap_or(m.train_loss);
        if best.is_none_or(|(_, l)| selection_loss < l) {
            best = Some((epoch, selection_loss));
            save_checkpoint(model, &checkpoint, tc, lc, epoch, m.val_loss)?;
        }
        observer.on_epoch(&m);
        per_epoch.push(m);
        write_metrics_log(&metrics_log, &per_epoch)?;
        if observer.should_stop() {
            break;
        }
    }

    let (best_epoch, _) = best.expect("at least one epoch");
    Ok(RunArtifacts {
        run: 0,
        seed: 0,
        per_epoch,
        best_epoch,
        checkpoint_ref: checkpoint,
        metrics_log,
        steps: opt.steps(),
        split_checksum: pairing::pair_set_checksum(val.iter().map(|p| p.id.as_str())),
    })
}

fn save_checkpoint(
    model: &SiameseEncoder,
    path: &Path,
    tc: &TrainConfig,
    lc: &LossConfig,
    epoch: usize,
    val_loss: Option<f64>,
) -> Result<(), TrainError> {
    let tmp = path.with_extension("safetensors.tmp");
    model.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    let meta = CheckpointMeta {
        encoder: model.config().clone(),
        loss: *lc,
        variant: tc.variant,
        seed: tc.seed,
        epoch,
        val_loss,
    };
    let sidecar = CheckpointMeta::sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("meta serialize");
    write_atomic(&sidecar, json.as_bytes()).map_err(io_err(&sidecar))
}

/// Everything one experiment needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
}

/// Test-set outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub artifacts: RunArtifacts,
    pub test: Option<MetricReport>,
}

/// Result of a failed run, kept so aggregates can mark it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<RunFailure>,
    pub aggregate: AggregateReport,
    pub split_checksum: String,
}

/// Test pairs plus a lookup of each image's pupil-to-iris ratio.
pub struct TestSet<'a> {
    pub pairs: &'a [TrainingPair],
    pub rows: &'a [PairRow],
    pub ratio_of: &'a dyn Fn(&Path) -> Option<f64>,
}

/// Runs `n_runs` seeded runs on one fixed split and aggregates test metrics.
///
/// Every run shares the split, batch order and backbone initialisation;
/// only the head initialisation seed changes. Run `i` writes under
/// `out_dir/run_{i}`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    pairs: &[TrainingPair],
    test: Option<&TestSet<'_>>,
    out_dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<ExperimentReport, TrainError> {
    let tc = &cfg.train;
    tc.validate()?;
    let (train, val) = pairing::split_train_val(pairs, |p| p.label, tc.val_fraction, tc.seed);
    let split_checksum = pairing::pair_set_checksum(val.iter().map(|p| p.id.as_str()));
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for run in 0..tc.n_runs {
        let seed = tc.head_seed(run);
        let run_dir = out_dir.join(format!("run_{run}"));
        let model = SiameseEncoder::new(
            cfg.encoder.clone(),
            InitSeeds {
                backbone: tc.seed,
                head: seed,
            },
        )?;
        match train_one_run(&model, &train, &val, tc, &cfg.optimizer, &cfg.loss, &run_dir, observer) {
            Ok(mut artifacts) => {
                artifacts.run = run;
                artifacts.seed = seed;
                let test_report = match test {
                    Some(t) if !t.pairs.is_empty() => {
                        let best = SiameseEncoder::load(cfg.encoder.clone(), &artifacts.checkpoint_ref)?;
                        let d = pair_distances(&best, t.pairs, tc.batch_size)?;
                        let results = eval::pair_results(t.rows, &d, tc.decision_threshold, t.ratio_of);
                        let path = run_dir.join("test_results.csv");
                        let mut buf = Vec::new();
                        eval::write_results(&mut buf, &results).map_err(io_err(&path))?;
                        write_atomic(&path, &buf).map_err(io_err(&path))?;
                        eval::compute_metrics(&results).ok()
                    }
                    _ => None,
                };
                runs.push(RunOutcome {
                    artifacts,
                    test: test_report,
                });
            }
            Err(e @ TrainError::Divergence { .. }) => failures.push(RunFailure {
                run,
                seed,
                error: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut reports: Vec<Option<&MetricReport>> = vec![None; tc.n_runs];
    for r in &runs {
        reports[r.artifacts.run] = r.test.as_ref();
    }
    let aggregate = eval::aggregate(&reports, failures.iter().map(|f| f.run).collect());
    Ok(ExperimentReport {
        runs,
        failures,
        aggregate,
        split_checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_follow_protocol() {
        let tc = TrainConfig::default();
        assert_eq!((tc.batch_size, tc.epochs, tc.n_runs), (32, 20, 5));
        assert_eq!((tc.val_fraction, tc.decision_threshold), (0.3, 0.5));
        let oc = OptimizerConfig::default();
        assert_eq!((oc.learning_rate, oc.beta1, oc.beta2, oc.epsilon), (1e-4, 0.9, 0.999, 1e-7));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for tc in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { n_runs: 0, ..Default::default() },
            TrainConfig { val_fraction: 1.0, ..Default::default() },
            TrainConfig { decision_threshold: 0.0, ..Default::default() },
        ] {
            assert!(tc.validate().is_err(), "{tc:?}");
        }
    }

    #[test]
    fn head_seeds_differ_per_run() {
        let tc = TrainConfig::default();
        let seeds: std::collections::HashSet<u64> = (0..5).map(|r| tc.head_seed(r)).collect();
        assert_eq!(seeds.len(), 5);
        assert_eq!(tc.head_seed(3), tc.head_seed(3));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[train]\nbatch_size = 8\n").is_ok());
        assert!(toml::from_str::<ExperimentConfig>("[train]\nbatchsize = 8\n").is_err());
    }
}
