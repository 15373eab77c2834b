//! Procedural iris captures with known geometry, for tests and demos.
//!
//! Each synthetic subject has a small set of traits (iris gray level, radial
//! texture frequency, periocular gray level and shading direction). Every
//! capture of that subject renders the same traits with fresh per-capture
//! noise, texture phase and pupil dilation, so same-subject pairs look alike
//! in both the iris and the periocular region.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pairing::{Eye, ImageRecord};
use crate::preprocess::{IrisMask, CAPTURE_SIZE};
use crate::quality::{self, IrisGeometry, QualityReport};

/// Visual traits shared by every capture of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectTraits {
    pub iris_level: f64,
    pub texture_frequency: u32,
    pub periocular_level: f64,
    /// Direction of the periocular shading gradient, radians.
    pub shading_angle: f64,
}

impl SubjectTraits {
    /// Traits for subject `index` of `count`, spread over a grid so that
    /// different subjects differ in every region.
    pub fn spread(index: usize, count: usize) -> Self {
        let t = if count > 1 { index as f64 / (count - 1) as f64 } else { 0.5 };
        Self {
            iris_level: 60.0 + 70.0 * t,
            texture_frequency: 4 + (index % 4) as u32 * 3,
            periocular_level: 215.0 - 60.0 * t,
            shading_angle: 2.0 * PI * index as f64 / count.max(1) as f64,
        }
    }

    /// A close relative of `self`, used for the co-twin of a twin set.
    pub fn perturbed(&self, rng: &mut impl Rng) -> Self {
        Self {
            iris_level: self.iris_level + rng.random_range(-4.0..4.0),
            texture_frequency: self.texture_frequency,
            periocular_level: self.periocular_level + rng.random_range(-4.0..4.0),
            shading_angle: self.shading_angle + rng.random_range(-0.2..0.2),
        }
    }
}

/// Everything needed to render one capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureParams {
    pub traits: SubjectTraits,
    pub eye: Eye,
    pub center: (f64, f64),
    pub pupil_radius: f64,
    pub iris_radius: f64,
    pub texture_phase: f64,
    /// Fraction of the iris annulus hidden under an upper eyelid, `[0, 1]`.
    pub occlusion: f64,
    /// Scale applied to all deviations from mid-gray, `[0, 1]`.
    pub contrast: f64,
    /// Displacement of the pupil centre from the iris centre, pixels.
    pub pupil_offset: (f64, f64),
    /// Length of a horizontal motion smear, pixels; 0 leaves the capture sharp.
    pub smear: f64,
    pub noise_seed: u64,
}

impl CaptureParams {
    /// A clean, centred capture with per-capture variation drawn from `rng`.
    pub fn sample(traits: SubjectTraits, eye: Eye, rng: &mut impl Rng) -> Self {
        let (w, h) = CAPTURE_SIZE;
        Self {
            traits,
            eye,
            center: (
                w as f64 / 2.0 + rng.random_range(-6.0..6.0),
                h as f64 / 2.0 + rng.random_range(-6.0..6.0),
            ),
            pupil_radius: rng.random_range(30.0..45.0),
            iris_radius: 100.0,
            texture_phase: rng.random_range(0.0..2.0 * PI),
            occlusion: 0.0,
            contrast: 1.0,
            pupil_offset: (0.0, 0.0),
            smear: 0.0,
            noise_seed: rng.random(),
        }
    }

    pub fn pupil_center(&self) -> (f64, f64) {
        (self.center.0 + self.pupil_offset.0, self.center.1 + self.pupil_offset.1)
    }

    pub fn geometry(&self) -> IrisGeometry {
        IrisGeometry::annotated(self.pupil_center(), self.pupil_radius, self.center, self.iris_radius)
    }
}

/// A rendered capture with its segmentation mask and true geometry.
#[derive(Debug, Clone)]
pub struct FixtureImage {
    pub image: GrayImage,
    pub mask: IrisMask,
    pub geometry: IrisGeometry,
}

const PUPIL_LEVEL: f64 = 25.0;
const NOISE_AMPLITUDE: f64 = 6.0;

pub fn render(p: &CaptureParams) -> FixtureImage {
    let (w, h) = CAPTURE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
    let (cx, cy) = p.center;
    let (px, py) = p.pupil_center();
    // The eyelid hides every annulus pixel above this line.
    let lid = cy - p.iris_radius + 2.0 * p.iris_radius * p.occlusion.clamp(0.0, 1.0);
    let mirror = if p.eye == Eye::R { -1.0 } else { 1.0 };
    let (sa, ca) = p.traits.shading_angle.sin_cos();
    let mut bits = Vec::with_capacity((w * h) as usize);
    let mut plane = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) * mirror;
            let dy = y as f64 - cy;
            let r = (dx * dx + dy * dy).sqrt();
            let rp = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
            let noise = rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
            let in_annulus = rp >= p.pupil_radius && r < p.iris_radius;
            let occluded = in_annulus && (y as f64) < lid;
            bits.push(in_annulus && !occluded);
            let v = if rp < p.pupil_radius {
                PUPIL_LEVEL
            } else if in_annulus && !occluded {
                let theta = dy.atan2(dx);
                let radial = (r - p.pupil_radius) / (p.iris_radius - p.pupil_radius);
                p.traits.iris_level
                    + 18.0 * (p.traits.texture_frequency as f64 * theta + p.texture_phase + 3.0 * radial).cos()
            } else {
                let shade = (dx * ca + dy * sa) / w as f64;
                let lid_dim = if occluded { -20.0 } else { 0.0 };
                p.traits.periocular_level + 40.0 * shade + lid_dim
            };
            plane.push(v + noise);
        }
    }
    if p.smear > 0.0 {
        plane = smear_rows(&plane, w as usize, p.smear);
    }
    let image = GrayImage::from_fn(w, h, |x, y| {
        let v = plane[(y * w + x) as usize];
        Luma([(128.0 + (v - 128.0) * p.contrast).round().clamp(0.0, 255.0) as u8])
    });
    FixtureImage {
        image,
        mask: IrisMask::new(w, h, bits),
        geometry: p.geometry(),
    }
}

/// Horizontal box smear of (fractional) length `len`, clamped at row ends.
fn smear_rows(plane: &[f64], width: usize, len: f64) -> Vec<f64> {
    let half = len / 2.0;
    let full = half.floor() as i64;
    let frac = half - half.floor();
    let norm = (2 * full + 1) as f64 + 2.0 * frac;
    let mut out = vec![0.0; plane.len()];
    for (row_in, row_out) in plane.chunks(width).zip(out.chunks_mut(width)) {
        let at = |i: i64| row_in[i.clamp(0, width as i64 - 1) as usize];
        for (x, o) in row_out.iter_mut().enumerate() {
            let x = x as i64;
            let mut acc: f64 = (-full..=full).map(|k| at(x + k)).sum();
            acc += frac * (at(x - full - 1) + at(x + full + 1));
            *o = acc / norm;
        }
    }
    out
}

pub use crate::io::geometry_sidecar;

/// Writes `<stem>.png`, `<stem>_mask.png` and the geometry sidecar into `dir`.
pub fn write_fixture(dir: &Path, stem: &str, fx: &FixtureImage) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let image_path = dir.join(format!("{stem}.png"));
    let mask_path = dir.join(format!("{stem}_mask.png"));
    let to_io = |e: image::ImageError| std::io::Error::other(e.to_string());
    fx.image.save(&image_path).map_err(to_io)?;
    fx.mask.to_gray().save(&mask_path).map_err(to_io)?;
    let json = serde_json::to_string_pretty(&fx.geometry).map_err(std::io::Error::other)?;
    std::fs::write(geometry_sidecar(&image_path), json)?;
    Ok((image_path, mask_path))
}

/// Layout of a generated subject population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub subjects: usize,
    /// Capture dates per eye; left and right eyes never share a date.
    pub sessions_per_eye: usize,
    /// Subjects 0..2k form k twin sets when set.
    pub twin_sets: usize,
    pub seed: u64,
}

impl PopulationSpec {
    /// Four subjects with two sessions per eye: 16 synthetic positives.
    pub fn overfit() -> Self {
        Self {
            subjects: 4,
            sessions_per_eye: 2,
            twin_sets: 0,
            seed: 2024,
        }
    }
}

fn session_date(eye: Eye, session: usize) -> NaiveDate {
    let base = NaiveDate::from_ymd_opt(2008, 1, 7).expect("valid date");
    let offset = 7 * (2 * session + usize::from(eye == Eye::R)) as u64;
    base + chrono::Days::new(offset)
}

/// Renders a population to `dir` and returns its manifest records.
///
/// Twin sets share traits up to a small perturbation, so co-twins resemble
/// each other more than unrelated subjects do.
pub fn generate_population(dir: &Path, spec: &PopulationSpec) -> std::io::Result<Vec<ImageRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bases: Vec<SubjectTraits> = (0..spec.subjects)
        .map(|i| SubjectTraits::spread(i, spec.subjects))
        .collect();
    let mut records = Vec::new();
    for i in 0..spec.subjects {
        let twin_set = (i < 2 * spec.twin_sets).then_some(i / 2);
        let traits = match twin_set {
            Some(_) if i % 2 == 1 => bases[i - 1].perturbed(&mut rng),
            _ => bases[i],
        };
        let subject_id = format!("S{i:03}");
        for eye in [Eye::L, Eye::R] {
            for session in 0..spec.sessions_per_eye {
                let params = CaptureParams::sample(traits, eye, &mut rng);
                let fx = render(&params);
                let stem = format!("{subject_id}_{eye}_{session}");
                let (path, mask) = write_fixture(dir, &stem, &fx)?;
                let mut rec = ImageRecord::new(subject_id.clone(), eye, session_date(eye, session), path).with_mask(mask);
                if let Some(t) = twin_set {
                    rec = rec.with_twin_group(format!("T{t:03}"));
                }
                rec.quality = Some(quality::compute_quality(&fx.image, &fx.geometry, Some(&fx.mask)));
                records.push(rec);
            }
        }
    }
    Ok(records)
}

/// Quality-screening fixtures: a capture scoring exactly `target`.
///
/// A single knob degrades the capture (eyelid occlusion, pupil dilation and
/// decentring, loss of contrast and motion smear all grow with it); the knob is bisected until the overall
/// score equals `target`.
pub fn capture_with_quality(target: u8, seed: u64) -> Option<FixtureImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = CaptureParams::sample(SubjectTraits::spread(1, 3), Eye::L, &mut rng);
    let clean = CaptureParams {
        pupil_radius: 35.0,
        ..clean
    };
    let at = |t: f64| {
        let p = CaptureParams {
            center: (clean.center.0 - 250.0 * t, clean.center.1),
            iris_radius: 100.0 - 30.0 * t,
            pupil_radius: 35.0 + 20.0 * t,
            pupil_offset: (6.0 * t, 0.0),
            occlusion: 0.6 * t,
            contrast: 1.0 - 0.6 * t,
            smear: 14.0 * t,
            ..clean
        };
        let fx = render(&p);
        let q = quality::compute_quality(&fx.image, &fx.geometry, Some(&fx.mask));
        (fx, q)
    };
    let score = |q: &QualityReport| if q.is_failure() { None } else { Some(q.overall) };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if score(&at(lo).1)? < target || score(&at(hi).1)? >= target {
        return None;
    }
    // Invariant: overall(lo) >= target > overall(hi).
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (_, q) = at(mid);
        match score(&q) {
            Some(s) if s >= target => lo = mid,
            Some(_) => hi = mid,
            None => return None,
        }
        let (fx, q) = at(lo);
        if q.overall == target {
            return Some(fx);
        }
    }
    None
}

/// A flat capture on which no geometry can be fitted.
pub fn featureless_capture() -> GrayImage {
    let (w, h) = CAPTURE_SIZE;
    GrayImage::from_pixel(w, h, Luma([128]))
}
