//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.
//!
//! This is a `harness = false` target so the summary lines are always
//! shown, independent of output capturing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use chrono::NaiveDate;
use image::GrayImage;
use mziris::encoder::loss::{
    batch_loss, batch_loss_gradient, contrastive_loss, contrastive_loss_tensor, distance, EmbeddedPair,
};
use mziris::encoder::{DistanceKind, EmbeddingVector, EncoderConfig, InitSeeds, LossConfig, SiameseEncoder};
use mziris::eval::{self, AggregateReport, Counts, MetricReport, PairResult};
use mziris::fixtures::{self, PopulationSpec};
use mziris::io::{self, Manifest};
use mziris::pairing::{self, Eye, ImageRecord, PairKind, PairLabel, PairRow, PairingError, PairingOptions};
use mziris::preprocess::{self, InputVariant, IrisMask};
use mziris::quality::{self, QualityReport, RejectReason, FAILURE_SENTINEL};
use mziris::report;
use mziris::trainer::{self, ExperimentConfig, OptimizerConfig, Silent, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Directory with the overfit population shared by the training criteria.
struct SharedFixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn overfit_fixture(root: &Path) -> PathBuf {
    let data = root.join("data");
    let records = fixtures::generate_population(&data, &PopulationSpec::overfit()).expect("fixture renders");
    let base = Manifest {
        base_dir: PathBuf::new(),
        records: Vec::new(),
    };
    let rel = base.records_relative_to(&records, &data).expect("relative paths");
    let manifest = data.join("manifest.csv");
    io::write_atomic(&manifest, &io::manifest_csv(&rel)).expect("manifest written");
    manifest
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let cfg = LossConfig::default();
    // Hand-evaluated 1/2 * (y D^2 + (1 - y) max(0, 1 - D)^2).
    let grid: [(PairLabel, f64, f64); 10] = [
        (PairLabel::Mz, 0.0, 0.0),
        (PairLabel::Mz, 0.25, 0.03125),
        (PairLabel::Mz, 0.5, 0.125),
        (PairLabel::Mz, 1.0, 0.5),
        (PairLabel::Mz, 1.5, 1.125),
        (PairLabel::Nmz, 0.0, 0.5),
        (PairLabel::Nmz, 0.25, 0.28125),
        (PairLabel::Nmz, 0.5, 0.125),
        (PairLabel::Nmz, 1.0, 0.0),
        (PairLabel::Nmz, 1.5, 0.0),
    ];
    for (label, d, want) in grid {
        let got = contrastive_loss(label, d, &cfg);
        ensure!((got - want).abs() <= 1e-12, "L({label}, {d}) = {got}, want {want}");
    }
    let labels: Vec<f32> = grid.iter().map(|g| g.0.bit() as f32).collect();
    let d: Vec<f64> = grid.iter().map(|g| g.1).collect();
    // The same grid through the tensor loss, with embeddings at distance D.
    let dev = Device::Cpu;
    let e1 = Tensor::zeros((grid.len(), 2), DType::F64, &dev).map_err(|e| e.to_string())?;
    let e2 = Tensor::from_vec(d.iter().flat_map(|&x| [x, 0.0]).collect::<Vec<f64>>(), (grid.len(), 2), &dev)
        .map_err(|e| e.to_string())?;
    let y = Tensor::from_vec(labels.iter().map(|&v| v as f64).collect::<Vec<f64>>(), grid.len(), &dev)
        .map_err(|e| e.to_string())?;
    let (loss, _) = contrastive_loss_tensor(&e1, &e2, &y, DistanceKind::Euclidean, &cfg).map_err(|e| e.to_string())?;
    let mean_want = grid.iter().map(|g| g.2).sum::<f64>() / grid.len() as f64;
    let got = loss.to_scalar::<f64>().map_err(|e| e.to_string())?;
    ensure!((got - mean_want).abs() <= 1e-12, "tensor mean loss {got}, want {mean_want}");

    // Gradients against central differences, step 1e-4.
    let h = 1e-4;
    let dim = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_closed: f64 = 0.0;
    let mut worst_autograd: f64 = 0.0;
    let mut pairs = Vec::new();
    while pairs.len() < 100 {
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = rng.random_range(0.05..2.0);
        // The hinge is not differentiable at D = m; keep pairs off it.
        if (target - cfg.margin).abs() < 1e-2 {
            continue;
        }
        let b: Vec<f64> = a.iter().zip(&dir).map(|(x, u)| x + target * u / norm).collect();
        let label = if rng.random_bool(0.5) { PairLabel::Mz } else { PairLabel::Nmz };
        pairs.push((label, a, b));
    }
    let single_loss = |label: PairLabel, a: &[f64], b: &[f64]| {
        let d = distance(&emb(a), &emb(b)).expect("same length");
        batch_loss(&[(label, d)], &cfg).expect("non-empty")
    };
    for (label, a, b) in &pairs {
        let (ea, eb) = (emb(a), emb(b));
        let closed = batch_loss_gradient(
            &[EmbeddedPair {
                label: *label,
                a: &ea,
                b: &eb,
            }],
            DistanceKind::Euclidean,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let (ga, gb) = &closed.per_pair[0];
        // Autograd through the training loss on f64 tensors.
        let va = Var::from_vec(a.clone(), (1, dim), &dev).map_err(|e| e.to_string())?;
        let vb = Var::from_vec(b.clone(), (1, dim), &dev).map_err(|e| e.to_string())?;
        let y = Tensor::from_vec(vec![label.bit() as f64], 1, &dev).map_err(|e| e.to_string())?;
        let (l, _) = contrastive_loss_tensor(va.as_tensor(), vb.as_tensor(), &y, DistanceKind::Euclidean, &cfg)
            .map_err(|e| e.to_string())?;
        let grads = l.backward().map_err(|e| e.to_string())?;
        let auto_a: Vec<f64> = grads.get(va.as_tensor()).expect("grad a").flatten_all().and_then(|t| t.to_vec1()).map_err(|e| e.to_string())?;
        let auto_b: Vec<f64> = grads.get(vb.as_tensor()).expect("grad b").flatten_all().and_then(|t| t.to_vec1()).map_err(|e| e.to_string())?;

        let mut fd = Vec::with_capacity(2 * dim);
        for side in 0..2 {
            for k in 0..dim {
                let mut plus = (a.clone(), b.clone());
                let mut minus = (a.clone(), b.clone());
                let (p, m) = if side == 0 { (&mut plus.0, &mut minus.0) } else { (&mut plus.1, &mut minus.1) };
                p[k] += h;
                m[k] -= h;
                fd.push((single_loss(*label, &plus.0, &plus.1) - single_loss(*label, &minus.0, &minus.1)) / (2.0 * h));
            }
        }
        let closed_all: Vec<f64> = ga.iter().chain(gb).copied().collect();
        let auto_all: Vec<f64> = auto_a.iter().chain(&auto_b).copied().collect();
        worst_closed = worst_closed.max(relative_error(&closed_all, &fd));
        worst_autograd = worst_autograd.max(relative_error(&auto_all, &fd));
    }
    ensure!(worst_closed <= 1e-4, "closed-form gradient relative error {worst_closed:e}");
    ensure!(worst_autograd <= 1e-4, "autograd gradient relative error {worst_autograd:e}");
    Ok(format!(
        "grid exact; max gradient rel. error closed-form {worst_closed:.1e}, autograd {worst_autograd:.1e}"
    ))
}

fn emb(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).expect("finite")
}

/// `||x - y|| / max(||x||, ||y||)`, zero when both vanish.
fn relative_error(x: &[f64], y: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let scale = n(x).max(n(y));
    if scale == 0.0 {
        0.0
    } else {
        n(&diff) / scale
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let tol = 1e-9;
    let mut worst_oracle: f64 = 0.0;
    for i in 0..1000 {
        let scale = [1e-3, 1.0, 1e3][i % 3];
        let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..128).map(|_| scale * rng.random_range(-1.0..1.0)).collect() };
        let (x, y, z) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let (ex, ey, ez) = (emb(&x), emb(&y), emb(&z));
        let dxy = distance(&ex, &ey).map_err(|e| e.to_string())?;
        let dyx = distance(&ey, &ex).map_err(|e| e.to_string())?;
        let dyz = distance(&ey, &ez).map_err(|e| e.to_string())?;
        let dxz = distance(&ex, &ez).map_err(|e| e.to_string())?;
        ensure!((dxy - dyx).abs() <= tol * dxy.max(1.0), "triple {i}: asymmetric {dxy} vs {dyx}");
        ensure!(distance(&ex, &ex).map_err(|e| e.to_string())? == 0.0, "triple {i}: d(x, x) != 0");
        ensure!(dxz <= dxy + dyz + tol * (dxy + dyz).max(1.0), "triple {i}: triangle violated");
        let mut sum = 0.0;
        for k in 0..128 {
            sum += (x[k] - y[k]) * (x[k] - y[k]);
        }
        let oracle = sum.sqrt();
        let rel = (dxy - oracle).abs() / oracle;
        worst_oracle = worst_oracle.max(rel);
        ensure!(rel <= tol, "triple {i}: distance {dxy} vs oracle {oracle}");
    }
    Ok(format!("1000 triples; max oracle rel. error {worst_oracle:.1e}"))
}

// ---------------------------------------------------------------- criterion 3

fn toy_manifest(rng: &mut ChaCha8Rng) -> Vec<ImageRecord> {
    let n = rng.random_range(2..=12);
    let subjects = rng.random_range(1..=5);
    let base = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
    (0..n)
        .map(|i| {
            let s = rng.random_range(0..subjects);
            let eye = if rng.random_bool(0.5) { Eye::L } else { Eye::R };
            let date = base + chrono::Days::new(rng.random_range(0..3));
            let mut r = ImageRecord::new(format!("s{s}"), eye, date, format!("img{i}.png"));
            // Subjects 0 and 1 are co-twins in about half the manifests.
            if s < 2 && rng.random_bool(0.5) {
                r = r.with_twin_group("g0");
            }
            r
        })
        .collect()
}

fn key(a: &Path, b: &Path) -> (PathBuf, PathBuf) {
    (a.to_path_buf(), b.to_path_buf())
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut feasible, mut infeasible) = (0, 0);
    for case in 0..50 {
        let manifest = toy_manifest(&mut rng);
        // O(n^2) brute force over ordered record pairs.
        let mut want_pos = BTreeSet::new();
        let mut eligible_neg = 0usize;
        for a in &manifest {
            for b in &manifest {
                if a.eye != Eye::L || b.eye != Eye::R {
                    continue;
                }
                if a.subject_id == b.subject_id && a.session_date != b.session_date {
                    want_pos.insert(key(&a.path, &b.path));
                }
                let same_twins = a.twin_group.is_some() && a.twin_group == b.twin_group;
                if a.subject_id != b.subject_id && !same_twins {
                    eligible_neg += 1;
                }
            }
        }
        let by_path: BTreeMap<&Path, &ImageRecord> = manifest.iter().map(|r| (r.path.as_path(), r)).collect();
        match pairing::build_train_pairs(&manifest, case, &PairingOptions::default()) {
            Ok(pairs) => {
                feasible += 1;
                let got_pos: BTreeSet<_> = pairs
                    .iter()
                    .filter(|p| p.label == PairLabel::Mz)
                    .map(|p| key(&p.a.path, &p.b.path))
                    .collect();
                let n_pos = pairs.iter().filter(|p| p.label == PairLabel::Mz).count();
                ensure!(got_pos == want_pos && n_pos == want_pos.len(), "case {case}: positives differ from brute force");
                let neg: Vec<_> = pairs.iter().filter(|p| p.label == PairLabel::Nmz).collect();
                ensure!(neg.len() == n_pos, "case {case}: {} negatives for {n_pos} positives", neg.len());
                let distinct: HashSet<_> = neg.iter().map(|p| key(&p.a.path, &p.b.path)).collect();
                ensure!(distinct.len() == neg.len(), "case {case}: duplicate negatives");
                for p in neg {
                    let (a, b) = (by_path[p.a.path.as_path()], by_path[p.b.path.as_path()]);
                    ensure!(a.subject_id != b.subject_id, "case {case}: negative shares subject");
                    ensure!(
                        a.twin_group.is_none() || a.twin_group != b.twin_group,
                        "case {case}: negative shares twin group"
                    );
                }
            }
            Err(PairingError::InsufficientNegatives { needed, available }) => {
                infeasible += 1;
                ensure!(
                    needed == want_pos.len() && available == eligible_neg && available < needed,
                    "case {case}: infeasibility {needed}/{available} disagrees with brute force {}/{eligible_neg}",
                    want_pos.len()
                );
            }
            Err(e) => return Err(format!("case {case}: {e}")),
        }
        // Test pairs are balanced whenever they can be built.
        if let Ok(test) = pairing::build_test_pairs(&manifest, case) {
            let s = pairing::balance(&test.iter().map(|p| p.row()).collect::<Vec<_>>());
            ensure!(s.mz == s.nmz, "case {case}: test pairs unbalanced {s:?}");
        }
    }
    ensure!(feasible >= 10, "only {feasible} feasible manifests were drawn");
    Ok(format!("50 manifests ({feasible} feasible, {infeasible} infeasible) match brute force"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..100 {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=48));
        let image = GrayImage::from_fn(w, h, |_, _| image::Luma([rng.random()]));
        let mask = match case {
            0 => IrisMask::filled(w, h, false),
            1 => IrisMask::filled(w, h, true),
            _ => {
                let p = rng.random_range(0.0..1.0);
                IrisMask::new(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect())
            }
        };
        let iris = preprocess::apply_variant(&image, Some(&mask), InputVariant::IrisOnly).map_err(|e| e.to_string())?;
        let rest = preprocess::apply_variant(&image, Some(&mask), InputVariant::NonIrisOnly).map_err(|e| e.to_string())?;
        let orig = preprocess::apply_variant(&image, Some(&mask), InputVariant::Original).map_err(|e| e.to_string())?;
        for ((i, r), o) in iris.as_raw().iter().zip(rest.as_raw()).zip(orig.as_raw()) {
            ensure!(*i as u16 + *r as u16 == *o as u16, "case {case}: {i} + {r} != {o}");
            ensure!(*i == 0 || *r == 0, "case {case}: pixel kept by both variants");
        }
        ensure!(orig == image, "case {case}: original variant altered the image");
    }
    Ok("100 raster/mask pairs (incl. all-0 and all-1 masks) sum exactly".into())
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let date = NaiveDate::from_ymd_opt(2008, 1, 7).unwrap();
    let mut records = Vec::new();
    for (target, name) in [(50u8, "q50"), (49, "q49")] {
        let fx = fixtures::capture_with_quality(target, 9).ok_or(format!("no fixture scores {target}"))?;
        let (path, mask) = fixtures::write_fixture(dir.path(), name, &fx).map_err(|e| e.to_string())?;
        records.push(ImageRecord::new(name, Eye::L, date, path).with_mask(mask));
    }
    let blank = dir.path().join("blank.png");
    fixtures::featureless_capture().save(&blank).map_err(|e| e.to_string())?;
    records.push(ImageRecord::new("blank", Eye::L, date, blank));
    // Score from disk: sidecar geometry or a fit, mask when present.
    for r in &mut records {
        let img = preprocess::load_image(&r.path, false).map_err(|e| e.to_string())?;
        let mask = r.mask_path.as_deref().map(preprocess::load_mask).transpose().map_err(|e| e.to_string())?;
        r.quality = Some(match io::geometry_of(&r.path, &img) {
            Ok(g) => quality::compute_quality(&img, &g, mask.as_ref()),
            Err(_) => QualityReport::failed(),
        });
    }
    let overall: Vec<u8> = records.iter().map(|r| r.quality.as_ref().unwrap().overall).collect();
    ensure!(overall == vec![50, 49, FAILURE_SENTINEL], "fixture scores {overall:?}");

    let s = quality::filter_manifest(&records, 50).map_err(|e| e.to_string())?;
    ensure!(s.kept.len() == 1 && s.kept[0].subject_id == "q50", "kept {:?}", s.kept);
    let reasons: Vec<(&str, RejectReason)> = s.rejected.iter().map(|(r, why)| (r.subject_id.as_str(), *why)).collect();
    ensure!(
        reasons
            == vec![
                ("q49", RejectReason::BelowThreshold { overall: 49, threshold: 50 }),
                ("blank", RejectReason::Failed),
            ],
        "rejections {reasons:?}"
    );
    let mut previous: Option<BTreeSet<String>> = None;
    for t in [0u8, 25, 50, 75, 100] {
        let s = quality::filter_manifest(&records, t).map_err(|e| e.to_string())?;
        let kept: BTreeSet<String> = s.kept.iter().map(|r| r.subject_id.clone()).collect();
        let rule: BTreeSet<String> = records
            .iter()
            .filter(|r| {
                let o = r.quality.as_ref().unwrap().overall;
                o != FAILURE_SENTINEL && o >= t
            })
            .map(|r| r.subject_id.clone())
            .collect();
        ensure!(kept == rule, "threshold {t}: kept {kept:?}, rule gives {rule:?}");
        ensure!(kept.len() + s.rejected.len() == records.len(), "threshold {t}: records lost");
        if let Some(prev) = &previous {
            ensure!(kept.is_subset(prev), "threshold {t}: kept set grew");
        }
        previous = Some(kept);
    }
    Ok("scores 50/49/255; threshold 50 keeps only the borderline capture; monotone over 0..100".into())
}

// ---------------------------------------------------------------- criterion 6

/// Input size used for the overfit and reproducibility checks.
const OVERFIT_INPUT_SIZE: usize = 64;

fn overfit_config(variant: InputVariant, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            batch_size: 32,
            epochs,
            seed: 2024,
            variant,
            decision_threshold: 0.5,
            ..TrainConfig::default()
        },
        optimizer: OptimizerConfig::default(),
        loss: LossConfig { margin: 1.0 },
        encoder: EncoderConfig {
            input_size: OVERFIT_INPUT_SIZE,
            ..EncoderConfig::default()
        },
    }
}

fn load_pairs(manifest_path: &Path, variant: InputVariant, seed: u64) -> Result<(Vec<PairRow>, Vec<trainer::TrainingPair>), String> {
    let manifest = Manifest::read(manifest_path).map_err(|e| e.to_string())?;
    let rows: Vec<PairRow> = pairing::build_train_pairs(&manifest.records, seed, &PairingOptions::default())
        .map_err(|e| e.to_string())?
        .iter()
        .map(|p| p.row())
        .collect();
    let resolved: Vec<PairRow> = rows
        .iter()
        .map(|r| PairRow {
            a_path: manifest.resolve(&r.a_path),
            b_path: manifest.resolve(&r.b_path),
            ..r.clone()
        })
        .collect();
    let pairs = trainer::prepare_pairs(&resolved, |p| manifest.mask_for(p), variant, OVERFIT_INPUT_SIZE, false)
        .map_err(|e| e.to_string())?;
    Ok((rows, pairs))
}

/// Stops a run at the first epoch meeting the overfit targets.
#[derive(Default)]
struct OverfitTarget {
    hit: Option<usize>,
}

impl OverfitTarget {
    const MIN_ACC: f64 = 0.95;
    const MAX_LOSS: f64 = 0.05;
}

impl trainer::TrainObserver for OverfitTarget {
    fn on_epoch(&mut self, m: &trainer::EpochMetrics) {
        if self.hit.is_none() && m.train_acc >= Self::MIN_ACC && m.train_loss < Self::MAX_LOSS {
            self.hit = Some(m.epoch);
        }
    }

    fn should_stop(&self) -> bool {
        self.hit.is_some()
    }
}

fn criterion_6(shared: &SharedFixture) -> Outcome {
    let manifest = shared.root.join("data/manifest.csv");
    let mut lines = Vec::new();
    for variant in InputVariant::ALL {
        let cfg = overfit_config(variant, 30);
        let (_, pairs) = load_pairs(&manifest, variant, 2024)?;
        ensure!(pairs.len() == 32, "{variant}: {} pairs, want 32", pairs.len());
        let model = SiameseEncoder::new(
            cfg.encoder.clone(),
            InitSeeds {
                backbone: cfg.train.seed,
                head: cfg.train.head_seed(0),
            },
        )
        .map_err(|e| e.to_string())?;
        let run_dir = shared.root.join(format!("overfit_{variant}"));
        let mut target = OverfitTarget::default();
        let art = trainer::train_one_run(&model, &pairs, &[], &cfg.train, &cfg.optimizer, &cfg.loss, &run_dir, &mut target)
            .map_err(|e| format!("{variant}: {e}"))?;
        let last = art.per_epoch.last().expect("at least one epoch");
        let first = &art.per_epoch[0];
        ensure!(
            target.hit.is_some(),
            "{variant}: after {} epochs acc {:.3}, loss {:.4}",
            art.per_epoch.len(),
            last.train_acc,
            last.train_loss
        );
        ensure!(
            last.train_loss < first.train_loss,
            "{variant}: loss did not decrease ({:.4} -> {:.4})",
            first.train_loss,
            last.train_loss
        );
        lines.push(format!(
            "{variant}: epoch {} (acc {:.3}, loss {:.4})",
            last.epoch, last.train_acc, last.train_loss
        ));
    }
    Ok(format!("targets reached at {}", lines.join("; ")))
}

// ---------------------------------------------------------------- criterion 7

fn sha256_file(path: &Path) -> Result<String, String> {
    use sha2::Digest;
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(sha2::Sha256::digest(bytes)))
}

/// Fixture -> quality screening -> pair file -> 5-run experiment, under `root`.
/// Returns the checksums of the pair file and of every run's metric log, and
/// the per-run split checksums.
fn pipeline(root: &Path) -> Result<(String, Vec<String>, Vec<String>), String> {
    let manifest_path = overfit_fixture(root);
    let manifest = Manifest::read(&manifest_path).map_err(|e| e.to_string())?;
    let screened = quality::filter_manifest(&manifest.records, quality::DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let pairs = pairing::build_train_pairs(&screened.kept, 7, &PairingOptions::default()).map_err(|e| e.to_string())?;
    let rows: Vec<PairRow> = pairs.iter().map(|p| p.row()).collect();
    let pair_file = root.join("data/train_pairs.csv");
    let mut buf = Vec::new();
    pairing::write_pairs(&mut buf, &rows, &[("seed", "7".into())]).map_err(|e| e.to_string())?;
    io::write_atomic(&pair_file, &buf).map_err(|e| e.to_string())?;

    let parsed = pairing::read_pairs(std::io::BufReader::new(std::fs::File::open(&pair_file).map_err(|e| e.to_string())?))
        .map_err(|e| e.to_string())?;
    ensure!(parsed.rows == rows, "pair file does not round-trip");
    let resolved: Vec<PairRow> = parsed
        .rows
        .iter()
        .map(|r| PairRow {
            a_path: manifest.resolve(&r.a_path),
            b_path: manifest.resolve(&r.b_path),
            ..r.clone()
        })
        .collect();
    let mut cfg = overfit_config(InputVariant::Original, 2);
    cfg.train.n_runs = 5;
    let prepared = trainer::prepare_pairs(&resolved, |p| manifest.mask_for(p), cfg.train.variant, OVERFIT_INPUT_SIZE, false)
        .map_err(|e| e.to_string())?;
    // Pair ids must not depend on where the pipeline ran.
    let prepared: Vec<trainer::TrainingPair> = prepared
        .into_iter()
        .zip(&parsed.rows)
        .map(|(mut p, r)| {
            p.id = r.id();
            p
        })
        .collect();
    let out = root.join("experiment");
    let report = trainer::run_experiment(&cfg, &prepared, None, &out, &mut Silent).map_err(|e| e.to_string())?;
    ensure!(report.failures.is_empty(), "runs failed: {:?}", report.failures);
    let logs = report
        .runs
        .iter()
        .map(|r| sha256_file(&r.artifacts.metrics_log))
        .collect::<Result<Vec<_>, _>>()?;
    let splits = report.runs.iter().map(|r| r.artifacts.split_checksum.clone()).collect();
    Ok((sha256_file(&pair_file)?, logs, splits))
}

fn criterion_7() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pairs_a, logs_a, splits_a) = pipeline(a.path())?;
    let (pairs_b, logs_b, splits_b) = pipeline(b.path())?;
    ensure!(pairs_a == pairs_b, "pair files differ: {pairs_a} vs {pairs_b}");
    ensure!(logs_a == logs_b, "metric logs differ");
    ensure!(logs_a.len() == 5, "{} runs", logs_a.len());
    ensure!(
        splits_a.iter().chain(&splits_b).all(|s| *s == splits_a[0]),
        "split checksum varies across runs"
    );
    Ok(format!(
        "pair file {}…, 5 metric logs identical, split checksum {}… constant",
        &pairs_a[..12],
        &splits_a[0][..12]
    ))
}

// ---------------------------------------------------------------- criterion 8

fn result_row(i: usize, label: PairLabel, d: f64, tau: f64, ratio_diff: f64) -> PairResult {
    PairResult {
        pair: PairRow {
            a_path: format!("a{i}.png").into(),
            b_path: format!("b{i}.png").into(),
            label,
            kind: PairKind::Natural,
        },
        distance: d,
        predicted: eval::classify(d, tau),
        pupil_ratio_a: Some(0.3),
        pupil_ratio_b: Some(0.3 + ratio_diff),
    }
}

fn criterion_8() -> Outcome {
    // Hand-built confusion: tp 3, fn 2, fp 1, tn 4 at tau 0.5.
    let tau = 0.5;
    let spec = [
        (PairLabel::Mz, 0.1),
        (PairLabel::Mz, 0.2),
        (PairLabel::Mz, 0.3),
        (PairLabel::Mz, 0.7),
        (PairLabel::Mz, 0.9),
        (PairLabel::Nmz, 0.4),
        (PairLabel::Nmz, 0.6),
        (PairLabel::Nmz, 0.8),
        (PairLabel::Nmz, 1.1),
        (PairLabel::Nmz, 1.3),
    ];
    let results: Vec<PairResult> = spec.iter().enumerate().map(|(i, &(l, d))| result_row(i, l, d, tau, 0.0)).collect();
    let m = eval::compute_metrics(&results).map_err(|e| e.to_string())?;
    ensure!(m.counts == Counts { tp: 3, fp: 1, tn: 4, fn_: 2 }, "counts {:?}", m.counts);
    let (p, r) = (3.0 / 4.0, 3.0 / 5.0);
    ensure!(m.accuracy == Some(7.0 / 10.0), "accuracy {:?}", m.accuracy);
    ensure!(m.precision == Some(p), "precision {:?}", m.precision);
    ensure!(m.recall == Some(r), "recall {:?}", m.recall);
    ensure!(m.f1 == Some(2.0 * p * r / (p + r)), "f1 {:?}", m.f1);
    ensure!(m.avg_pos_dist == Some((0.1 + 0.2 + 0.3 + 0.7 + 0.9) / 5.0), "avg pos {:?}", m.avg_pos_dist);
    ensure!(m.avg_neg_dist == Some((0.4 + 0.6 + 0.8 + 1.1 + 1.3) / 5.0), "avg neg {:?}", m.avg_neg_dist);

    // Sweep against an independent per-threshold count.
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let scored: Vec<(PairLabel, f64)> = (0..400)
        .map(|i| {
            let label = if i % 2 == 0 { PairLabel::Mz } else { PairLabel::Nmz };
            let centre = if label == PairLabel::Mz { 0.35 } else { 0.75 };
            (label, (centre + rng.random_range(-0.4..0.4f64)).max(0.0))
        })
        .collect();
    let sweep = eval::threshold_sweep(&scored, &eval::SWEEP_THRESHOLDS).map_err(|e| e.to_string())?;
    ensure!(sweep.len() == 4, "sweep has {} rows", sweep.len());
    for row in &sweep {
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for &(label, d) in &scored {
            match (label, d < row.tau) {
                (PairLabel::Mz, true) => tp += 1,
                (PairLabel::Mz, false) => fn_ += 1,
                (PairLabel::Nmz, true) => fp += 1,
                (PairLabel::Nmz, false) => tn += 1,
            }
        }
        let c = row.report.counts;
        ensure!((c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_), "tau {}: counts {c:?}", row.tau);
        ensure!(row.report.accuracy == Some((tp + tn) as f64 / scored.len() as f64), "tau {}: accuracy", row.tau);
        let prec = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        ensure!(row.report.precision == prec, "tau {}: precision", row.tau);
        ensure!(row.report.recall == Some(tp as f64 / (tp + fn_) as f64), "tau {}: recall", row.tau);
    }

    // Planted structure: MZ pairs with larger pupil-ratio difference are
    // missed more often; bin k has 2k of its 10 MZ pairs beyond tau.
    let mut planted = Vec::new();
    let mut i = 0;
    for k in 0..5 {
        let diff = 0.02 + 0.04 * k as f64;
        for j in 0..10 {
            let d = if j < 2 * k { 0.9 } else { 0.1 };
            planted.push(result_row(i, PairLabel::Mz, d, tau, diff));
            i += 1;
        }
        for _ in 0..4 {
            planted.push(result_row(i, PairLabel::Nmz, 1.2, tau, diff));
            i += 1;
        }
    }
    let edges = [0.0, 0.04, 0.08, 0.12, 0.16, 0.20];
    let bins = eval::dilation_error_analysis(&planted, Some(&edges)).map_err(|e| e.to_string())?;
    let rates: Vec<Option<f64>> = bins.iter().map(|b| b.fn_rate).collect();
    let want: Vec<Option<f64>> = (0..5).map(|k| Some(2.0 * k as f64 / 10.0)).collect();
    ensure!(rates == want, "FN rates {rates:?}, planted {want:?}");
    ensure!(bins.iter().all(|b| b.fp_rate == Some(0.0)), "unexpected FP");
    let default_bins = eval::dilation_error_analysis(&planted, None).map_err(|e| e.to_string())?;
    let default_rates: Vec<f64> = default_bins.iter().map(|b| b.fn_rate.unwrap_or(f64::NAN)).collect();
    ensure!(
        default_rates.windows(2).all(|w| w[0] < w[1]),
        "default bins not monotone: {default_rates:?}"
    );
    Ok("confusion arithmetic exact; sweep matches recount at 0.2/0.4/0.6/0.8; planted FN trend recovered".into())
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut rows: Vec<(String, AggregateReport)> = Vec::new();
    for variant in InputVariant::ALL {
        let reports: Vec<MetricReport> = (0..5)
            .map(|_| {
                let counts = Counts {
                    tp: rng.random_range(20..60),
                    fp: rng.random_range(0..30),
                    tn: rng.random_range(20..60),
                    fn_: rng.random_range(0..30),
                };
                MetricReport::from_counts(counts, Some(rng.random_range(0.2..0.6)), Some(rng.random_range(0.6..1.1)))
            })
            .collect();
        let refs: Vec<Option<&MetricReport>> = reports.iter().map(Some).collect();
        rows.push((variant.to_string(), eval::aggregate(&refs, Vec::new())));
    }
    // Stored aggregates -> JSON -> table -> parsed values.
    let json = serde_json::to_string(&rows).map_err(|e| e.to_string())?;
    let stored: Vec<(String, AggregateReport)> = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    let table_rows: Vec<(String, &AggregateReport)> = stored.iter().map(|(l, a)| (l.clone(), a)).collect();
    let table = report::summary_table(&table_rows);
    let parsed = report::parse_summary_table(&table).map_err(|e| e.to_string())?;
    ensure!(parsed.len() == stored.len(), "{} rows parsed", parsed.len());
    for ((label, agg), (plabel, metrics)) in stored.iter().zip(&parsed) {
        ensure!(label == plabel, "row label {plabel}");
        for name in report::TABLE_METRICS {
            let want = agg.metrics[name];
            let got = metrics[name];
            let same = match (want, got) {
                (Some(w), Some(g)) => w.mean.to_bits() == g.mean.to_bits() && w.std.to_bits() == g.std.to_bits(),
                (None, None) => true,
                _ => false,
            };
            ensure!(same, "{label}/{name}: {want:?} vs {got:?}");
        }
    }
    // Reference targets are documented, never asserted against.
    let doc = include_str!("../../../book/src/results.md");
    ensure!(doc.contains("0.81 ± 0.024"), "reference table missing from the guide");
    Ok(format!("{} rows x 6 metrics round-trip bit-exactly; reference targets documented", parsed.len()))
}

// ---------------------------------------------------------------- driver

fn run(n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {n} [{name}]: {} ({elapsed:.1?} of {budget:?}) - {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn main() {
    // `cargo test -- --list` and filters from the default harness are
    // accepted but ignored; the suite always runs in full.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let secs = Duration::from_secs;
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    overfit_fixture(&root);
    let shared = SharedFixture { _dir: dir, root };
    let results = [
        run(1, "loss correctness", secs(10), criterion_1),
        run(2, "distance properties", secs(10), criterion_2),
        run(3, "pairing oracle equivalence", secs(30), criterion_3),
        run(4, "masking complementarity", secs(10), criterion_4),
        run(5, "quality gate", secs(10), criterion_5),
        run(6, "overfit convergence", secs(600), || criterion_6(&shared)),
        run(7, "protocol reproducibility", secs(900), criterion_7),
        run(8, "evaluation harness", secs(30), criterion_8),
        run(9, "summary table round-trip", secs(10), criterion_9),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
