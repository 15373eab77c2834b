//! Twin-branch embedding model.
//!
//! Both branches of a pair run through one [`SiameseEncoder`]; there is a
//! single parameter store, so the two branches cannot drift apart.

pub mod loss;
pub mod ops;
pub mod resnet;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::preprocess::ModelInput;
pub use loss::{DistanceKind, LossConfig};
pub use resnet::BackboneDepth;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone_depth: BackboneDepth,
    pub embedding_dim: usize,
    /// Load backbone weights from `pretrained_weights` instead of seeding them.
    pub pretrained: bool,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    /// Square spatial size the encoder consumes.
    pub input_size: usize,
    #[serde(default)]
    pub distance: DistanceKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone_depth: BackboneDepth::R18,
            embedding_dim: 128,
            pretrained: false,
            pretrained_weights: None,
            input_size: 224,
            distance: DistanceKind::Euclidean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embedding_dim == 0 {
            return Err(EncoderError::InvalidConfig("embedding_dim must be at least 1".into()));
        }
        // Five stride-2 stages need at least 32 pixels to keep a 1x1 map.
        if self.input_size < 32 {
            return Err(EncoderError::InvalidConfig(format!(
                "input_size {} is below the minimum of 32",
                self.input_size
            )));
        }
        if self.pretrained && self.pretrained_weights.is_none() {
            return Err(EncoderError::InvalidConfig(
                "pretrained = true requires pretrained_weights".into(),
            ));
        }
        Ok(())
    }

    /// Expected `(channels, height, width)` of a model input.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.input_size, self.input_size)
    }
}

/// Output of the encoder for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EncoderError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Seeds for parameter initialization. The backbone seed plays the role of
/// a fixed starting point shared across runs; the head seed varies per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSeeds {
    pub backbone: u64,
    pub head: u64,
}

/// Which side of a pair a tensor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
}

pub struct SiameseEncoder {
    config: EncoderConfig,
    varmap: VarMap,
    net: resnet::EmbeddingNet,
    device: Device,
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// torchvision-style initial value for one named parameter.
fn initial_value(name: &str, shape: &[usize], seed: u64, head_fan_in: usize) -> Vec<f32> {
    let count: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    if name.starts_with("head.") {
        // Linear default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
        let bound = 1.0 / (head_fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        return (0..count).map(|_| dist.sample(&mut rng) as f32).collect();
    }
    if name.ends_with("running_var") {
        return vec![1.0; count];
    }
    if name.ends_with("running_mean") || name.ends_with("bias") {
        return vec![0.0; count];
    }
    if shape.len() == 4 {
        // Kaiming normal, fan-out mode, ReLU gain.
        let fan_out = (shape[0] * shape[2] * shape[3]) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("valid std");
        return (0..count).map(|_| dist.sample(&mut rng) as f32).collect();
    }
    // Batch-norm scale.
    vec![1.0; count]
}

impl SiameseEncoder {
    pub fn new(config: EncoderConfig, seeds: InitSeeds) -> Result<Self, EncoderError> {
        config.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let net = resnet::EmbeddingNet::new(config.backbone_depth, config.embedding_dim, vb)?;
        let encoder = Self {
            config,
            varmap,
            net,
            device,
        };
        encoder.reinitialize(seeds)?;
        if encoder.config.pretrained {
            let path = encoder.config.pretrained_weights.clone().expect("validated");
            encoder.load_backbone(&path)?;
        }
        Ok(encoder)
    }

    fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<(String, Var)> =
            data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    fn reinitialize(&self, seeds: InitSeeds) -> Result<(), EncoderError> {
        for (name, var) in self.named_vars() {
            let seed = if name.starts_with("head.") {
                seeds.head
            } else {
                seeds.backbone
            };
            let dims = var.dims().to_vec();
            let fan_in = self.config.backbone_depth.feature_dim();
            let values = initial_value(&name, &dims, seed, fan_in);
            var.set(&Tensor::from_vec(values, dims, &self.device)?)?;
        }
        Ok(())
    }

    /// Copies backbone parameters from a torchvision-named safetensors file.
    /// The classifier (`fc.*`) is ignored; the embedding head keeps its seed.
    pub fn load_backbone(&self, path: &Path) -> Result<(), EncoderError> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.named_vars() {
            if name.starts_with("head.") {
                continue;
            }
            let t = tensors.get(&name).ok_or_else(|| {
                EncoderError::Checkpoint(format!("{}: missing tensor {name}", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(EncoderError::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn net(&self) -> &resnet::EmbeddingNet {
        &self.net
    }

    /// Parameters updated by the optimizer, sorted by name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| !is_running_stat(name))
            .collect()
    }

    /// SHA-256 over every parameter (including running statistics).
    pub fn parameter_checksum(&self) -> Result<String, EncoderError> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Checksum of the parameter state a branch reads from.
    pub fn branch_checksum(&self, _branch: Branch) -> Result<String, EncoderError> {
        self.parameter_checksum()
    }

    /// Stacks inputs into an `(N, 3, H, W)` tensor, checking every shape.
    pub fn batch_tensor(&self, inputs: &[&ModelInput]) -> Result<Tensor, EncoderError> {
        let expected = self.config.input_shape();
        let mut flat = Vec::with_capacity(inputs.len() * expected.0 * expected.1 * expected.2);
        for input in inputs {
            if input.shape() != expected {
                return Err(EncoderError::ShapeMismatch {
                    expected,
                    got: input.shape(),
                });
            }
            flat.extend_from_slice(input.values());
        }
        Ok(Tensor::from_vec(
            flat,
            (inputs.len(), expected.0, expected.1, expected.2),
            &self.device,
        )?)
    }

    /// `(N, 3, H, W)` to `(N, embedding_dim)`.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor, EncoderError> {
        Ok(self.net.forward_t(xs, train)?)
    }

    /// Embeds both sides of a batch of pairs with the shared parameters.
    /// Both sides go through one forward pass so batch statistics are shared.
    pub fn forward_pairs(
        &self,
        a: &Tensor,
        b: &Tensor,
        train: bool,
    ) -> Result<(Tensor, Tensor), EncoderError> {
        let n = a.dim(0)?;
        let both = Tensor::cat(&[a, b], 0)?;
        let e = self.forward_t(&both, train)?;
        Ok((e.narrow(0, 0, n)?, e.narrow(0, n, n)?))
    }

    /// Inference-mode embedding of a single input.
    pub fn embed(&self, input: &ModelInput) -> Result<EmbeddingVector, EncoderError> {
        let mut out = self.embed_many(&[input])?;
        Ok(out.remove(0))
    }

    /// Inference-mode embeddings, in input order.
    pub fn embed_many(&self, inputs: &[&ModelInput]) -> Result<Vec<EmbeddingVector>, EncoderError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let xs = self.batch_tensor(inputs)?;
        let e = self.forward_t(&xs, false)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        e.into_iter().map(EmbeddingVector::new).collect()
    }

    /// Writes all parameters as safetensors.
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        self.varmap.save(path)?;
        Ok(())
    }

    /// Rebuilds an encoder from a safetensors blob written by [`save`](Self::save).
    pub fn load(config: EncoderConfig, path: &Path) -> Result<Self, EncoderError> {
        let config = EncoderConfig {
            pretrained: false,
            ..config
        };
        let encoder = Self::new(config, InitSeeds { backbone: 0, head: 0 })?;
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, &encoder.device)?;
        for (name, var) in encoder.named_vars() {
            let t = tensors.get(&name).ok_or_else(|| {
                EncoderError::Checkpoint(format!("{}: missing tensor {name}", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(EncoderError::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?} (wrong backbone depth or embedding size?)",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(t)?;
        }
        if tensors.len() != encoder.named_vars().len() {
            return Err(EncoderError::Checkpoint(format!(
                "{}: {} tensors but the model has {}",
                path.display(),
                tensors.len(),
                encoder.named_vars().len()
            )));
        }
        Ok(encoder)
    }
}
