//! Embedding distance and the margin-based contrastive loss.
//!
//! With `y = 1` for an MZ (similar) pair and `y = 0` for an NMZ pair, the
//! per-pair loss is
//!
//! ```text
//! L(y, D) = 1/2 * ( y * D^2 + (1 - y) * max(0, m - D)^2 )
//! ```
//!
//! where `D` is the distance between the two embeddings and `m` the margin.
//! Two distance definitions are available: the Euclidean norm of the
//! difference (default) and the square root of that norm.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::EmbeddingVector;
use crate::pairing::PairLabel;

/// Distance between two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `||e1 - e2||_2`.
    #[default]
    Euclidean,
    /// `sqrt(||e1 - e2||_2)`.
    SqrtEuclidean,
}

impl std::str::FromStr for DistanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "sqrt_euclidean" => Ok(Self::SqrtEuclidean),
            other => Err(format!("unknown distance kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

impl LossConfig {
    pub fn new(margin: f64) -> Result<Self, LossError> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(LossError::InvalidMargin(margin));
        }
        Ok(Self { margin })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("embedding lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("margin must be a positive finite number, got {0}")]
    InvalidMargin(f64),
}

fn squared_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl DistanceKind {
    fn distance_of_norm(self, norm: f64) -> f64 {
        match self {
            Self::Euclidean => norm,
            Self::SqrtEuclidean => norm.sqrt(),
        }
    }

    /// Derivative of the distance with respect to the Euclidean norm.
    fn d_distance_d_norm(self, norm: f64) -> f64 {
        match self {
            Self::Euclidean => 1.0,
            Self::SqrtEuclidean => 0.5 / norm.sqrt(),
        }
    }
}

/// Euclidean distance `||e1 - e2||_2`.
pub fn distance(e1: &EmbeddingVector, e2: &EmbeddingVector) -> Result<f64, LossError> {
    distance_with(DistanceKind::Euclidean, e1, e2)
}

pub fn distance_with(
    kind: DistanceKind,
    e1: &EmbeddingVector,
    e2: &EmbeddingVector,
) -> Result<f64, LossError> {
    let (a, b) = (e1.values(), e2.values());
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    Ok(kind.distance_of_norm(squared_norm_diff(a, b).sqrt()))
}

pub fn contrastive_loss(label: PairLabel, d: f64, cfg: &LossConfig) -> f64 {
    match label {
        PairLabel::Mz => 0.5 * d * d,
        PairLabel::Nmz => {
            let gap = (cfg.margin - d).max(0.0);
            0.5 * gap * gap
        }
    }
}

/// `dL/dD` for one pair.
fn d_loss_d_distance(label: PairLabel, d: f64, cfg: &LossConfig) -> f64 {
    match label {
        PairLabel::Mz => d,
        PairLabel::Nmz => -(cfg.margin - d).max(0.0),
    }
}

/// Arithmetic mean of the per-pair losses.
pub fn batch_loss(pairs: &[(PairLabel, f64)], cfg: &LossConfig) -> Result<f64, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = pairs
        .iter()
        .map(|&(label, d)| contrastive_loss(label, d, cfg))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// One labelled embedding pair, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedPair<'a> {
    pub label: PairLabel,
    pub a: &'a EmbeddingVector,
    pub b: &'a EmbeddingVector,
}

/// Gradient of the mean batch loss with respect to each embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    /// `(dL/da, dL/db)` per pair, in input order.
    pub per_pair: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Closed-form gradient of [`batch_loss`] over the embedding entries.
///
/// At `e1 == e2` the distance is not differentiable; the zero subgradient is
/// returned there.
pub fn batch_loss_gradient(
    pairs: &[EmbeddedPair<'_>],
    kind: DistanceKind,
    cfg: &LossConfig,
) -> Result<BatchGradient, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = (p.a.values(), p.b.values());
        if a.len() != b.len() {
            return Err(LossError::LengthMismatch(a.len(), b.len()));
        }
        let norm = squared_norm_diff(a, b).sqrt();
        let d = kind.distance_of_norm(norm);
        loss += contrastive_loss(p.label, d, cfg);
        let scale = if norm > 0.0 {
            d_loss_d_distance(p.label, d, cfg) * kind.d_distance_d_norm(norm) / (norm * n)
        } else {
            0.0
        };
        let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect();
        let gb: Vec<f64> = ga.iter().map(|g| -g).collect();
        per_pair.push((ga, gb));
    }
    Ok(BatchGradient {
        loss: loss / n,
        per_pair,
    })
}

/// `sqrt(x)` for `x >= 0` whose gradient is zero, not infinite, at `x = 0`.
///
/// Zero entries are routed through `sqrt(1)` and masked out, so values stay
/// exact and the backward pass never sees `1 / sqrt(0)`.
fn guarded_sqrt(x: &Tensor) -> candle_core::Result<Tensor> {
    let is_zero = x.eq(0.0)?;
    let safe = is_zero.where_cond(&x.ones_like()?, x)?;
    is_zero.where_cond(&x.zeros_like()?, &safe.sqrt()?)
}

/// Differentiable batch loss over `(N, dim)` embedding tensors.
///
/// `labels` holds 1.0 for MZ and 0.0 for NMZ, shape `(N,)`. Returns the mean
/// loss (scalar) and the per-pair distances `(N,)`.
pub fn contrastive_loss_tensor(
    e1: &Tensor,
    e2: &Tensor,
    labels: &Tensor,
    kind: DistanceKind,
    cfg: &LossConfig,
) -> candle_core::Result<(Tensor, Tensor)> {
    let sq = (e1 - e2)?.sqr()?.sum(1)?;
    let norm = guarded_sqrt(&sq)?;
    let d = match kind {
        DistanceKind::Euclidean => norm,
        DistanceKind::SqrtEuclidean => guarded_sqrt(&norm)?,
    };
    let d_sq = match kind {
        DistanceKind::Euclidean => sq,
        DistanceKind::SqrtEuclidean => d.sqr()?,
    };
    let positive = (labels * &d_sq)?;
    let gap = d.affine(-1.0, cfg.margin)?.relu()?;
    let negative = (labels.affine(-1.0, 1.0)? * gap.sqr()?)?;
    let loss = ((positive + negative)? * 0.5)?.mean_all()?;
    Ok((loss, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let a = emb(&[0.3, -1.2, 4.0]);
        assert_eq!(distance(&a, &a).unwrap(), 0.0);
        let unit = emb(&[1.0, 0.0, 0.0]);
        let zero = emb(&[0.0, 0.0, 0.0]);
        assert_eq!(distance(&unit, &zero).unwrap(), 1.0);
        assert_eq!(
            distance(&emb(&[1.0]), &emb(&[1.0, 2.0])),
            Err(LossError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn sqrt_variant_takes_root_of_norm() {
        let a = emb(&[4.0, 0.0]);
        let b = emb(&[0.0, 0.0]);
        assert_eq!(distance_with(DistanceKind::SqrtEuclidean, &a, &b).unwrap(), 2.0);
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(contrastive_loss(PairLabel::Mz, 0.0, &cfg), 0.0);
        assert_eq!(contrastive_loss(PairLabel::Nmz, 1.5, &cfg), 0.0);
        assert!((contrastive_loss(PairLabel::Nmz, 0.4, &cfg) - 0.18).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(batch_loss(&[], &cfg), Err(LossError::EmptyBatch));
        let single = batch_loss(&[(PairLabel::Nmz, 0.4)], &cfg).unwrap();
        assert_eq!(single, contrastive_loss(PairLabel::Nmz, 0.4, &cfg));
        let two = batch_loss(&[(PairLabel::Mz, 0.0), (PairLabel::Nmz, 0.4)], &cfg).unwrap();
        assert!((two - 0.09).abs() < 1e-15);
        let saturated = batch_loss(&[(PairLabel::Nmz, 1.0), (PairLabel::Nmz, 3.0)], &cfg).unwrap();
        assert_eq!(saturated, 0.0);
    }

    #[test]
    fn margin_must_be_positive() {
        assert!(LossConfig::new(0.0).is_err());
        assert!(LossConfig::new(f64::NAN).is_err());
        assert!(LossConfig::new(2.0).is_ok());
    }

    #[test]
    fn tensor_loss_matches_scalar_loss() {
        use candle_core::Device;
        let cfg = LossConfig::default();
        let a = [[0.1f32, 0.2, 0.3], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let b = [[0.1f32, 0.0, 0.3], [0.0, 0.5, 0.0], [0.9, 0.9, 0.9]];
        let labels = [1f32, 0.0, 0.0];
        let dev = Device::Cpu;
        let ta = Tensor::new(&a, &dev).unwrap();
        let tb = Tensor::new(&b, &dev).unwrap();
        let tl = Tensor::new(&labels, &dev).unwrap();
        let (loss, d) = contrastive_loss_tensor(&ta, &tb, &tl, DistanceKind::Euclidean, &cfg).unwrap();
        let d = d.to_vec1::<f32>().unwrap();
        let mut expected = Vec::new();
        for i in 0..3 {
            let ea = emb(&a[i].map(f64::from));
            let eb = emb(&b[i].map(f64::from));
            let di = distance(&ea, &eb).unwrap();
            assert!((d[i] as f64 - di).abs() < 1e-5);
            expected.push((PairLabel::from_bit(labels[i] as u8).unwrap(), di));
        }
        let want = batch_loss(&expected, &cfg).unwrap();
        assert!((loss.to_scalar::<f32>().unwrap() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn tensor_gradient_is_zero_at_identical_embeddings() {
        use candle_core::{Device, Var};
        let dev = Device::Cpu;
        for kind in [DistanceKind::Euclidean, DistanceKind::SqrtEuclidean] {
            let a = Var::from_vec(vec![0.5f64, -0.25, 2.0], (1, 3), &dev).unwrap();
            let b = Tensor::new(&[[0.5f64, -0.25, 2.0]], &dev).unwrap();
            let y = Tensor::new(&[1f64], &dev).unwrap();
            let (loss, d) = contrastive_loss_tensor(a.as_tensor(), &b, &y, kind, &LossConfig::default()).unwrap();
            assert_eq!(d.to_vec1::<f64>().unwrap(), vec![0.0]);
            assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
            let g = loss.backward().unwrap();
            let ga = g.get(a.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(ga, vec![0.0; 3], "{kind:?}");
        }
    }
}
