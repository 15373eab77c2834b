//! Image loading, mask-based input variants and conversion to the encoder's
//! numeric layout.

use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

/// Expected capture resolution (width, height).
pub const CAPTURE_SIZE: (u32, u32) = (640, 480);

/// Per-channel mean and standard deviation of the ImageNet-pretrained backbones.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: expected {}x{} pixels, found {width}x{height} (pass --allow-resize to rescale)", CAPTURE_SIZE.0, CAPTURE_SIZE.1)]
    SizeMismatch {
        path: PathBuf,
        width: u32,
        height: u32,
    },
    #[error("variant {0} needs a segmentation mask")]
    MissingMask(InputVariant),
    #[error("mask is {mask:?} but image is {image:?}")]
    DimensionMismatch {
        image: (u32, u32),
        mask: (u32, u32),
    },
}

/// Which pixels of the capture the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    #[default]
    Original,
    IrisOnly,
    NonIrisOnly,
}

impl InputVariant {
    pub const ALL: [InputVariant; 3] = [Self::Original, Self::IrisOnly, Self::NonIrisOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::IrisOnly => "iris_only",
            Self::NonIrisOnly => "non_iris_only",
        }
    }

    pub fn needs_mask(self) -> bool {
        self != Self::Original
    }
}

impl std::fmt::Display for InputVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InputVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected original, iris_only or non_iris_only)"))
    }
}

/// Binary segmentation mask, `true` on iris pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrisMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl IrisMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), (width * height) as usize, "mask size");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self::new(width, height, vec![value; (width * height) as usize])
    }

    /// Binarizes a stored mask. Masks written as 0/1 keep every nonzero pixel;
    /// 8-bit masks (anti-aliased edges included) are cut at half intensity.
    pub fn from_gray(img: &GrayImage) -> Self {
        let max = img.pixels().map(|p| p.0[0]).max().unwrap_or(0);
        let cut = if max <= 1 { 1 } else { 128 };
        Self::new(
            img.width(),
            img.height(),
            img.pixels().map(|p| p.0[0] >= cut).collect(),
        )
    }

    pub fn to_gray(&self) -> GrayImage {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width, self.height, data).expect("mask dimensions")
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn decode(path: &Path) -> Result<GrayImage, PreprocessError> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| PreprocessError::Decode {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads a capture as 8-bit grayscale. Anything other than 640x480 is an
/// error unless `allow_resize` is set, in which case it is resampled.
pub fn load_image(path: &Path, allow_resize: bool) -> Result<GrayImage, PreprocessError> {
    let img = decode(path)?;
    let (width, height) = img.dimensions();
    if (width, height) == CAPTURE_SIZE {
        return Ok(img);
    }
    if !allow_resize {
        return Err(PreprocessError::SizeMismatch {
            path: path.to_path_buf(),
            width,
            height,
        });
    }
    log::warn!(
        "{}: resizing {width}x{height} to {}x{}",
        path.display(),
        CAPTURE_SIZE.0,
        CAPTURE_SIZE.1
    );
    Ok(resize_bilinear(&img, CAPTURE_SIZE.0, CAPTURE_SIZE.1))
}

pub fn load_mask(path: &Path) -> Result<IrisMask, PreprocessError> {
    decode(path).map(|img| IrisMask::from_gray(&img))
}

/// Source coordinate and blend weight for output index `i` when mapping
/// `src` samples onto `dst` samples with pixel-center alignment.
fn sample_axis(i: u32, src: u32, dst: u32) -> (usize, usize, f32) {
    let scale = src as f64 / dst as f64;
    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src as usize - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Bilinear resampling of a single-channel float plane.
pub fn resample_plane(src: &[f32], width: u32, height: u32, new_w: u32, new_h: u32) -> Vec<f32> {
    if (width, height) == (new_w, new_h) {
        return src.to_vec();
    }
    let cols: Vec<_> = (0..new_w).map(|x| sample_axis(x, width, new_w)).collect();
    let mut out = Vec::with_capacity((new_w * new_h) as usize);
    let w = width as usize;
    for y in 0..new_h {
        let (y0, y1, fy) = sample_axis(y, height, new_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, new_w: u32, new_h: u32) -> GrayImage {
    let plane: Vec<f32> = img.as_raw().iter().map(|&v| v as f32).collect();
    let out = resample_plane(&plane, img.width(), img.height(), new_w, new_h);
    let data = out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(new_w, new_h, data).expect("resize dimensions")
}

/// Produces the pixels a variant keeps: the image itself, `image * mask`, or
/// `image * (1 - mask)`.
pub fn apply_variant(
    image: &GrayImage,
    mask: Option<&IrisMask>,
    variant: InputVariant,
) -> Result<GrayImage, PreprocessError> {
    if variant == InputVariant::Original {
        if let Some(m) = mask {
            check_dims(image, m)?;
        }
        return Ok(image.clone());
    }
    let mask = mask.ok_or(PreprocessError::MissingMask(variant))?;
    check_dims(image, mask)?;
    let keep_iris = variant == InputVariant::IrisOnly;
    let data = image
        .as_raw()
        .iter()
        .zip(mask.bits())
        .map(|(&px, &iris)| if iris == keep_iris { px } else { 0 })
        .collect();
    Ok(GrayImage::from_raw(image.width(), image.height(), data).expect("same dimensions"))
}

fn check_dims(image: &GrayImage, mask: &IrisMask) -> Result<(), PreprocessError> {
    if image.dimensions() != mask.dimensions() {
        return Err(PreprocessError::DimensionMismatch {
            image: image.dimensions(),
            mask: mask.dimensions(),
        });
    }
    Ok(())
}

/// Normalized encoder input, channel-planar: `values[c * size * size + y * size + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    values: Vec<f32>,
    size: usize,
    source_path: Option<PathBuf>,
    variant: InputVariant,
}

impl ModelInput {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (3, self.size, self.size)
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    pub fn variant(&self) -> InputVariant {
        self.variant
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = Some(path.into());
        self
    }
}

/// Normalized value of an 8-bit intensity on channel `c`.
pub fn normalize_intensity(v: f32, c: usize) -> f32 {
    (v / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c]
}

/// Resizes to `size x size`, replicates the gray channel three times and
/// standardizes each channel.
pub fn to_model_input(image: &GrayImage, variant: InputVariant, size: usize) -> ModelInput {
    let plane: Vec<f32> = image.as_raw().iter().map(|&v| v as f32).collect();
    let resized = resample_plane(&plane, image.width(), image.height(), size as u32, size as u32);
    let mut values = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        values.extend(resized.iter().map(|&v| normalize_intensity(v, c)));
    }
    ModelInput {
        values,
        size,
        source_path: None,
        variant,
    }
}

/// Full path from a capture on disk to an encoder input.
pub fn prepare(
    image_path: &Path,
    mask_path: Option<&Path>,
    variant: InputVariant,
    size: usize,
    allow_resize: bool,
) -> Result<ModelInput, PreprocessError> {
    let image = load_image(image_path, allow_resize)?;
    let mask = match (variant.needs_mask(), mask_path) {
        (false, _) => None,
        (true, None) => return Err(PreprocessError::MissingMask(variant)),
        (true, Some(p)) => {
            let m = load_mask(p)?;
            if m.dimensions() != image.dimensions() && allow_resize {
                Some(IrisMask::from_gray(&resize_bilinear(&m.to_gray(), image.width(), image.height())))
            } else {
                Some(m)
            }
        }
    };
    let kept = apply_variant(&image, mask.as_ref(), variant)?;
    Ok(to_model_input(&kept, variant, size).with_source(image_path))
}
