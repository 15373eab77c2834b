//! Balanced MZ/NMZ pair construction and the seeded train/validation split.
//!
//! Training positives are synthetic MZ pairs: the left and right eye of one
//! subject captured on different dates. Test positives are natural MZ pairs:
//! the left eye of one twin against the right eye of the other. Negatives are
//! left/right pairs of unrelated subjects, sampled to match the positive
//! count exactly.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::PathBuf;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::quality::QualityReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Eye {
    L,
    R,
}

impl std::str::FromStr for Eye {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "L" => Ok(Self::L),
            "R" => Ok(Self::R),
            other => Err(format!("eye must be L or R, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Eye {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L => "L",
            Self::R => "R",
        })
    }
}

/// One iris capture and its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub subject_id: String,
    pub eye: Eye,
    pub session_date: NaiveDate,
    pub path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub quality: Option<QualityReport>,
    /// Shared by every member of one twin set.
    pub twin_group: Option<String>,
}

impl ImageRecord {
    pub fn new(subject_id: impl Into<String>, eye: Eye, session_date: NaiveDate, path: impl Into<PathBuf>) -> Self {
        Self {
            subject_id: subject_id.into(),
            eye,
            session_date,
            path: path.into(),
            mask_path: None,
            quality: None,
            twin_group: None,
        }
    }

    pub fn with_twin_group(mut self, group: impl Into<String>) -> Self {
        self.twin_group = Some(group.into());
        self
    }

    pub fn with_mask(mut self, mask: impl Into<PathBuf>) -> Self {
        self.mask_path = Some(mask.into());
        self
    }

    /// True when the two records may form an NMZ pair.
    pub fn unrelated_to(&self, other: &ImageRecord) -> bool {
        if self.subject_id == other.subject_id {
            return false;
        }
        match (&self.twin_group, &other.twin_group) {
            (Some(a), Some(b)) => a != b,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    /// Non-monozygotic, encoded 0.
    Nmz,
    /// Monozygotic, encoded 1.
    Mz,
}

impl PairLabel {
    pub fn bit(self) -> u8 {
        match self {
            Self::Nmz => 0,
            Self::Mz => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Self::Nmz),
            1 => Some(Self::Mz),
            _ => None,
        }
    }
}

impl std::fmt::Display for PairLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mz => "MZ",
            Self::Nmz => "NMZ",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    /// Two eyes of one person.
    Synthetic,
    /// Eyes of two twins, or of two unrelated people.
    Natural,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Natural => "natural",
        }
    }
}

impl std::str::FromStr for PairKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "natural" => Ok(Self::Natural),
            other => Err(format!("pair kind must be synthetic or natural, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub a: ImageRecord,
    pub b: ImageRecord,
    pub label: PairLabel,
    pub kind: PairKind,
}

impl PairRecord {
    pub fn row(&self) -> PairRow {
        PairRow {
            a_path: self.a.path.clone(),
            b_path: self.b.path.clone(),
            label: self.label,
            kind: self.kind,
        }
    }
}

/// A pair as stored on disk: paths only.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairRow {
    pub a_path: PathBuf,
    pub b_path: PathBuf,
    pub label: PairLabel,
    pub kind: PairKind,
}

impl PairRow {
    /// Stable identifier of the pair, used in split checksums and leak checks.
    pub fn id(&self) -> String {
        format!("{}|{}", self.a_path.display(), self.b_path.display())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PairingError {
    #[error("only {available} eligible negative pairs for {needed} positives")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("no record carries a twin_group")]
    NoTwinGroups,
    #[error("pair file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("pair file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingOptions {
    /// Upper bound on synthetic positives per subject; `None` keeps all.
    pub max_positives_per_subject: Option<usize>,
}

fn by_eye<'a>(records: &[&'a ImageRecord], eye: Eye) -> Vec<&'a ImageRecord> {
    records.iter().copied().filter(|r| r.eye == eye).collect()
}

/// Groups records by a key, keeping first-appearance order of the keys.
fn group_in_order<K: Ord + Clone>(
    manifest: &[ImageRecord],
    key: impl Fn(&ImageRecord) -> Option<K>,
) -> Vec<(K, Vec<&ImageRecord>)> {
    let mut order: Vec<K> = Vec::new();
    let mut groups: BTreeMap<K, Vec<&ImageRecord>> = BTreeMap::new();
    for r in manifest {
        if let Some(k) = key(r) {
            let entry = groups.entry(k.clone()).or_default();
            if entry.is_empty() {
                order.push(k);
            }
            entry.push(r);
        }
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).expect("grouped key");
            (k, v)
        })
        .collect()
}

/// Every synthetic MZ pair of one subject: left x right captures on different dates.
fn subject_positives(records: &[&ImageRecord]) -> Vec<PairRecord> {
    let mut out = Vec::new();
    for l in by_eye(records, Eye::L) {
        for r in by_eye(records, Eye::R) {
            if l.session_date != r.session_date && l.path != r.path {
                out.push(PairRecord {
                    a: l.clone(),
                    b: r.clone(),
                    label: PairLabel::Mz,
                    kind: PairKind::Synthetic,
                });
            }
        }
    }
    out
}

/// Samples `count` distinct unrelated (left, right) pairs uniformly.
fn sample_negatives(
    manifest: &[ImageRecord],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairRecord>, PairingError> {
    let lefts: Vec<&ImageRecord> = manifest.iter().filter(|r| r.eye == Eye::L).collect();
    let rights: Vec<&ImageRecord> = manifest.iter().filter(|r| r.eye == Eye::R).collect();
    let eligible = |i: usize, j: usize| lefts[i].unrelated_to(rights[j]) && lefts[i].path != rights[j].path;
    let available = (0..lefts.len())
        .map(|i| (0..rights.len()).filter(|&j| eligible(i, j)).count())
        .sum::<usize>();
    if available < count {
        return Err(PairingError::InsufficientNegatives {
            needed: count,
            available,
        });
    }
    let chosen: Vec<(usize, usize)> = if available <= 4 * count {
        let pool: Vec<(usize, usize)> = (0..lefts.len())
            .flat_map(|i| (0..rights.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| eligible(i, j))
            .collect();
        rand::seq::index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        // Sparse pick: rejection sampling over the full grid.
        let mut seen = HashSet::with_capacity(count);
        let mut picked = Vec::with_capacity(count);
        while picked.len() < count {
            let ij = (rng.random_range(0..lefts.len()), rng.random_range(0..rights.len()));
            if eligible(ij.0, ij.1) && seen.insert(ij) {
                picked.push(ij);
            }
        }
        picked
    };
    Ok(chosen
        .into_iter()
        .map(|(i, j)| PairRecord {
            a: lefts[i].clone(),
            b: rights[j].clone(),
            label: PairLabel::Nmz,
            kind: PairKind::Natural,
        })
        .collect())
}

fn finish(mut pairs: Vec<PairRecord>, rng: &mut ChaCha8Rng) -> Vec<PairRecord> {
    pairs.shuffle(rng);
    pairs
}

/// Synthetic-MZ positives plus an equal number of NMZ negatives.
pub fn build_train_pairs(
    manifest: &[ImageRecord],
    seed: u64,
    options: &PairingOptions,
) -> Result<Vec<PairRecord>, PairingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::new();
    for (_, records) in group_in_order(manifest, |r| Some(r.subject_id.clone())) {
        let mut subject = subject_positives(&records);
        if let Some(cap) = options.max_positives_per_subject {
            if subject.len() > cap {
                let keep = rand::seq::index::sample(&mut rng, subject.len(), cap).into_vec();
                let mut keep_sorted = keep;
                keep_sorted.sort_unstable();
                subject = keep_sorted.into_iter().map(|k| subject[k].clone()).collect();
            }
        }
        positives.extend(subject);
    }
    let negatives = sample_negatives(manifest, positives.len(), &mut rng)?;
    positives.extend(negatives);
    Ok(finish(positives, &mut rng))
}

/// Natural-MZ positives across twins plus an equal number of NMZ negatives.
pub fn build_test_pairs(manifest: &[ImageRecord], seed: u64) -> Result<Vec<PairRecord>, PairingError> {
    if manifest.is_empty() {
        return Ok(Vec::new());
    }
    let groups = group_in_order(manifest, |r| r.twin_group.clone());
    if groups.is_empty() {
        return Err(PairingError::NoTwinGroups);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::new();
    for (_, members) in &groups {
        let owned: Vec<ImageRecord> = members.iter().map(|r| (*r).clone()).collect();
        let subjects = group_in_order(&owned, |r| Some(r.subject_id.clone()));
        for (sa, ra) in &subjects {
            for (sb, rb) in &subjects {
                if sa == sb {
                    continue;
                }
                for l in by_eye(ra, Eye::L) {
                    for r in by_eye(rb, Eye::R) {
                        positives.push(PairRecord {
                            a: l.clone(),
                            b: r.clone(),
                            label: PairLabel::Mz,
                            kind: PairKind::Natural,
                        });
                    }
                }
            }
        }
    }
    let negatives = sample_negatives(manifest, positives.len(), &mut rng)?;
    positives.extend(negatives);
    Ok(finish(positives, &mut rng))
}

/// Stratified random split; `round(fraction * len)` pairs go to validation.
/// Both parts keep the input order.
pub fn split_train_val<T: Clone>(
    pairs: &[T],
    label_of: impl Fn(&T) -> PairLabel,
    fraction: f64,
    seed: u64,
) -> (Vec<T>, Vec<T>) {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must lie in (0, 1)");
    let n = pairs.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mz: Vec<usize> = (0..n).filter(|&i| label_of(&pairs[i]) == PairLabel::Mz).collect();
    let nmz: Vec<usize> = (0..n).filter(|&i| label_of(&pairs[i]) == PairLabel::Nmz).collect();
    let val_mz = if n == 0 {
        0
    } else {
        ((n_val as f64 * mz.len() as f64 / n as f64).round() as usize)
            .min(mz.len())
            .max(n_val.saturating_sub(nmz.len()))
    };
    let val_nmz = n_val - val_mz;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; n];
    for (group, take) in [(&mz, val_mz), (&nmz, val_nmz)] {
        for k in rand::seq::index::sample(&mut rng, group.len(), take) {
            in_val[group[k]] = true;
        }
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (p, &v) in pairs.iter().zip(&in_val) {
        if v {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, val)
}

/// SHA-256 over the sorted pair identifiers.
pub fn pair_set_checksum<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BalanceSummary {
    pub mz: usize,
    pub nmz: usize,
}

pub fn balance(rows: &[PairRow]) -> BalanceSummary {
    let mz = rows.iter().filter(|r| r.label == PairLabel::Mz).count();
    BalanceSummary {
        mz,
        nmz: rows.len() - mz,
    }
}

const PAIR_HEADER: &str = "a_path,b_path,label,kind";

/// Writes the pair CSV, preceded by `# key=value` comment lines.
pub fn write_pairs<W: Write>(mut w: W, rows: &[PairRow], comments: &[(&str, String)]) -> std::io::Result<()> {
    for (k, v) in comments {
        writeln!(w, "# {k}={v}")?;
    }
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(PAIR_HEADER.split(','))?;
    for r in rows {
        csv.write_record([
            r.a_path.to_string_lossy().as_ref(),
            r.b_path.to_string_lossy().as_ref(),
            &r.label.bit().to_string(),
            r.kind.as_str(),
        ])?;
    }
    csv.flush()
}

/// Parsed pair file: comment key/values and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFile {
    pub comments: Vec<(String, String)>,
    pub rows: Vec<PairRow>,
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<PairFile, PairingError> {
    let mut comments = Vec::new();
    let mut body = String::new();
    let mut body_start = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PairingError::Io(e.to_string()))?;
        if body_start.is_none() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.trim().split_once('=') {
                    comments.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            body_start = Some(i);
        }
        body.push_str(&line);
        body.push('\n');
    }
    let offset = body_start.unwrap_or(0);
    let mut csv = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let headers = csv.headers().map_err(|e| PairingError::Io(e.to_string()))?.clone();
    if !body.is_empty() && headers.iter().collect::<Vec<_>>().join(",") != PAIR_HEADER {
        return Err(PairingError::Parse {
            line: offset + 1,
            message: format!("expected header {PAIR_HEADER}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let line = offset + i + 2;
        let rec = rec.map_err(|e| PairingError::Parse {
            line,
            message: e.to_string(),
        })?;
        let err = |message: String| PairingError::Parse { line, message };
        let label = rec[2]
            .parse::<u8>()
            .ok()
            .and_then(PairLabel::from_bit)
            .ok_or_else(|| err(format!("label must be 0 or 1, got {:?}", &rec[2])))?;
        rows.push(PairRow {
            a_path: PathBuf::from(&rec[0]),
            b_path: PathBuf::from(&rec[1]),
            label,
            kind: rec[3].parse().map_err(err)?,
        });
    }
    Ok(PairFile { comments, rows })
}
