//! Iris image quality metrics and the manifest screening rule.
//!
//! Eleven component metrics are computed from a grayscale capture and its
//! pupil/iris circles. Each component is mapped to `[0, 100]` and the overall
//! score is the floor of their mean. If any component cannot be computed the
//! overall score is the sentinel [`FAILURE_SENTINEL`].

use std::f64::consts::PI;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::pairing::ImageRecord;
use crate::preprocess::IrisMask;

/// Overall score signalling that at least one metric failed.
pub const FAILURE_SENTINEL: u8 = 255;

/// Default screening threshold: scores strictly below it are rejected.
pub const DEFAULT_THRESHOLD: u8 = 50;

/// Iris radius (pixels) at which the radius component saturates.
pub const TARGET_IRIS_RADIUS: f64 = 80.0;

/// Acceptable band for the pupil-to-iris diameter ratio.
pub const DILATION_BAND: (f64, f64) = (0.2, 0.7);

/// Half-saturation constant of the Laplacian-variance sharpness score.
pub const SHARPNESS_HALF_POINT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometrySource {
    Annotated,
    Fitted,
}

/// Pupil and iris circles of one capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrisGeometry {
    pub pupil_center: (f64, f64),
    pub pupil_radius: f64,
    pub iris_center: (f64, f64),
    pub iris_radius: f64,
    pub source: GeometrySource,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QualityError {
    #[error("no plausible pupil/iris circle pair found")]
    GeometryNotFound,
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("record {0} has no quality report")]
    MissingQuality(String),
}

impl IrisGeometry {
    pub fn annotated(pupil_center: (f64, f64), pupil_radius: f64, iris_center: (f64, f64), iris_radius: f64) -> Self {
        Self {
            pupil_center,
            pupil_radius,
            iris_center,
            iris_radius,
            source: GeometrySource::Annotated,
        }
    }

    /// Checks the radius ordering and that both centers lie inside a
    /// `width x height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), QualityError> {
        let inside = |(x, y): (f64, f64)| x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
        if !(self.pupil_radius > 0.0 && self.iris_radius.is_finite()) {
            return Err(QualityError::InvalidGeometry("radii must be positive".into()));
        }
        if self.pupil_radius >= self.iris_radius {
            return Err(QualityError::InvalidGeometry("pupil radius must be below iris radius".into()));
        }
        if !inside(self.pupil_center) || !inside(self.iris_center) {
            return Err(QualityError::InvalidGeometry("centers must lie inside the image".into()));
        }
        Ok(())
    }
}

/// Pupil diameter over iris diameter.
pub fn pupil_iris_ratio(g: &IrisGeometry) -> f64 {
    (2.0 * g.pupil_radius) / (2.0 * g.iris_radius)
}

struct Raster<'a> {
    img: &'a GrayImage,
    w: i64,
    h: i64,
}

impl<'a> Raster<'a> {
    fn new(img: &'a GrayImage) -> Self {
        Self {
            img,
            w: img.width() as i64,
            h: img.height() as i64,
        }
    }

    fn at(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.w - 1) as u32;
        let y = y.clamp(0, self.h - 1) as u32;
        self.img.get_pixel(x, y).0[0] as f64
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        self.at(x.round() as i64, y.round() as i64)
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bottom = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Mean intensity along a circle, over samples that fall inside the image.
    fn circle_mean(&self, cx: f64, cy: f64, r: f64, samples: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..samples {
            let t = 2.0 * PI * k as f64 / samples as f64;
            let (x, y) = (cx + r * t.cos(), cy + r * t.sin());
            if x >= 0.0 && y >= 0.0 && x <= (self.w - 1) as f64 && y <= (self.h - 1) as f64 {
                sum += self.sample(x, y);
                n += 1;
            }
        }
        (n * 2 >= samples).then(|| sum / n as f64)
    }
}

/// Radius in `[r_min, r_max]` maximising the outward intensity step of the
/// circle means around `(cx, cy)`; returns `(radius, step)`.
fn best_boundary(r: &Raster, cx: f64, cy: f64, r_min: f64, r_max: f64) -> Option<(f64, f64)> {
    let r_min = r_min.max(3.0);
    if r_max <= r_min + 2.0 {
        return None;
    }
    let steps = (r_max - r_min).ceil() as usize;
    let means: Vec<Option<f64>> = (0..=steps + 4)
        .map(|k| r.circle_mean(cx, cy, r_min - 2.0 + k as f64, 128))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for k in 2..means.len() - 2 {
        let (Some(a), Some(b), Some(c), Some(d)) = (means[k - 2], means[k - 1], means[k + 1], means[k + 2]) else {
            continue;
        };
        let step = (c + d - a - b) / 2.0;
        let radius = r_min - 2.0 + k as f64;
        if best.is_none_or(|(_, s)| step > s) {
            best = Some((radius, step));
        }
    }
    best
}

/// Mean over a `(2 radius + 1)^2` window, clamped at the image border.
fn box_smooth(image: &GrayImage, radius: i64) -> Vec<f64> {
    let raster = Raster::new(image);
    let (w, h) = (raster.w, raster.h);
    let horizontal: Vec<f64> = (0..h)
        .flat_map(|y| {
            let raster = &raster;
            (0..w).map(move |x| (-radius..=radius).map(|k| raster.at(x + k, y)).sum::<f64>())
        })
        .collect();
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    (0..h)
        .flat_map(|y| {
            let horizontal = &horizontal;
            (0..w).map(move |x| {
                (-radius..=radius)
                    .map(|k| horizontal[((y + k).clamp(0, h - 1) * w + x) as usize])
                    .sum::<f64>()
                    / norm
            })
        })
        .collect()
}

/// Minimum intensity step (gray levels) accepted as a circular boundary.
const MIN_BOUNDARY_STEP: f64 = 8.0;

/// Returns `annotation` unchanged when given; otherwise locates the pupil as
/// the dark blob and refines both circles by a radial-derivative search.
pub fn fit_geometry(image: &GrayImage, annotation: Option<&IrisGeometry>) -> Result<IrisGeometry, QualityError> {
    if let Some(g) = annotation {
        return Ok(*g);
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(QualityError::GeometryNotFound);
    }
    let raster = Raster::new(image);
    let (lo, hi) = image
        .as_raw()
        .iter()
        .fold((u8::MAX, u8::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if (hi - lo) as f64 <= MIN_BOUNDARY_STEP {
        return Err(QualityError::GeometryNotFound);
    }

    // Dark-blob seed for the pupil: pixels of the box-smoothed image close to
    // its darkest level.
    let smooth = box_smooth(image, 2);
    let darkest = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = darkest + 2.0 * MIN_BOUNDARY_STEP;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    let width = image.width() as usize;
    for (i, &v) in smooth.iter().enumerate() {
        if v < cut {
            sx += (i % width) as f64;
            sy += (i / width) as f64;
            n += 1.0;
        }
    }
    if n < 20.0 {
        return Err(QualityError::GeometryNotFound);
    }
    let seed = (sx / n, sy / n);
    let seed_r = (n / PI).sqrt();
    let max_r = (image.width().min(image.height()) as f64) / 2.0;

    let search = |center: (f64, f64), r_min: f64, r_max: f64, reach: i32| {
        let mut best: Option<((f64, f64), f64, f64)> = None;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let c = (center.0 + dx as f64, center.1 + dy as f64);
                if let Some((radius, step)) = best_boundary(&raster, c.0, c.1, r_min, r_max) {
                    if best.is_none_or(|(_, _, s)| step > s) {
                        best = Some((c, radius, step));
                    }
                }
            }
        }
        best
    };

    let (pupil_center, pupil_radius, pupil_step) =
        search(seed, 0.6 * seed_r, (1.4 * seed_r).min(max_r), 3).ok_or(QualityError::GeometryNotFound)?;
    if pupil_step < MIN_BOUNDARY_STEP {
        return Err(QualityError::GeometryNotFound);
    }
    let (iris_center, iris_radius, iris_step) =
        search(pupil_center, pupil_radius * 1.3 + 3.0, 2.0 * max_r, 3).ok_or(QualityError::GeometryNotFound)?;
    if iris_step < MIN_BOUNDARY_STEP {
        return Err(QualityError::GeometryNotFound);
    }
    let g = IrisGeometry {
        pupil_center,
        pupil_radius,
        iris_center,
        iris_radius,
        source: GeometrySource::Fitted,
    };
    g.validate(image.width(), image.height())
        .map_err(|_| QualityError::GeometryNotFound)?;
    Ok(g)
}

/// The eleven component metrics and the aggregated score.
///
/// A component is `None` when it could not be computed; `overall` is then
/// [`FAILURE_SENTINEL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Fraction of the iris annulus not occluded, in `[0, 1]`.
    pub usable_iris_area: Option<f64>,
    /// In `[0, 100]`.
    pub iris_sclera_contrast: Option<f64>,
    /// In `[0, 100]`.
    pub iris_pupil_contrast: Option<f64>,
    /// `4 pi A / P^2` of the traced pupil boundary, in `[0, 1]`.
    pub pupil_circularity: Option<f64>,
    /// Shannon entropy of the 8-bit histogram, in bits.
    pub grayscale_utilization: Option<f64>,
    pub iris_radius_px: Option<f64>,
    pub pupil_iris_ratio: Option<f64>,
    /// In `[0, 1]`.
    pub concentricity: Option<f64>,
    /// In `[0, 1]`.
    pub margin_adequacy: Option<f64>,
    /// In `[0, 100]`.
    pub sharpness: Option<f64>,
    /// In `[0, 100]`; 100 means no directional smear.
    pub motion_blur: Option<f64>,
    /// Floor of the mean mapped component, or 255 on failure.
    pub overall: u8,
}

impl QualityReport {
    /// Report for a capture whose geometry could not be established.
    pub fn failed() -> Self {
        Self {
            usable_iris_area: None,
            iris_sclera_contrast: None,
            iris_pupil_contrast: None,
            pupil_circularity: None,
            grayscale_utilization: None,
            iris_radius_px: None,
            pupil_iris_ratio: None,
            concentricity: None,
            margin_adequacy: None,
            sharpness: None,
            motion_blur: None,
            overall: FAILURE_SENTINEL,
        }
    }

    /// Report carrying only an overall score, as stored in a manifest.
    pub fn from_overall(overall: u8) -> Self {
        Self {
            overall,
            ..Self::failed()
        }
    }

    pub fn is_failure(&self) -> bool {
        self.overall == FAILURE_SENTINEL
    }

    /// Each component mapped to `[0, 100]`, in field order.
    pub fn mapped_components(&self) -> [Option<f64>; 11] {
        let pct = |v: Option<f64>| v.map(|v| (100.0 * v).clamp(0.0, 100.0));
        [
            pct(self.usable_iris_area),
            self.iris_sclera_contrast,
            self.iris_pupil_contrast,
            pct(self.pupil_circularity),
            self.grayscale_utilization.map(|h| (100.0 * h / 8.0).clamp(0.0, 100.0)),
            self.iris_radius_px.map(|r| 100.0 * (r / TARGET_IRIS_RADIUS).min(1.0)),
            self.pupil_iris_ratio.map(dilation_score),
            pct(self.concentricity),
            pct(self.margin_adequacy),
            self.sharpness,
            self.motion_blur,
        ]
    }

    /// Recomputes `overall` from the components.
    fn aggregate(mut self) -> Self {
        let mapped = self.mapped_components();
        self.overall = if mapped.iter().all(|c| c.is_some_and(f64::is_finite)) {
            let mean = mapped.iter().flatten().sum::<f64>() / mapped.len() as f64;
            mean.floor().clamp(0.0, 100.0) as u8
        } else {
            FAILURE_SENTINEL
        };
        self
    }
}

/// 100 inside the acceptable dilation band, falling linearly to 0 over 0.2
/// outside it.
fn dilation_score(ratio: f64) -> f64 {
    let (lo, hi) = DILATION_BAND;
    let outside = if ratio < lo {
        lo - ratio
    } else if ratio > hi {
        ratio - hi
    } else {
        0.0
    };
    (100.0 * (1.0 - outside / 0.2)).clamp(0.0, 100.0)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Weber contrast of a brighter region against a darker one, scaled so that
/// a contrast `w` scores `100 w / (1 + w)`.
fn weber_score(bright: f64, dark: f64) -> f64 {
    let w = ((bright - dark) / dark.max(1.0)).max(0.0);
    100.0 * w / (1.0 + w)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Pixel values grouped into pupil, iris annulus and surrounding band.
struct Regions {
    pupil: Vec<f64>,
    iris: Vec<f64>,
    sclera: Vec<f64>,
    annulus_total: usize,
    annulus_usable: usize,
}

fn regions(image: &GrayImage, g: &IrisGeometry, mask: Option<&IrisMask>) -> Regions {
    let mut out = Regions {
        pupil: Vec::new(),
        iris: Vec::new(),
        sclera: Vec::new(),
        annulus_total: 0,
        annulus_usable: 0,
    };
    for (x, y, p) in image.enumerate_pixels() {
        let pt = (x as f64, y as f64);
        let dp = dist(pt, g.pupil_center);
        let di = dist(pt, g.iris_center);
        let v = p.0[0] as f64;
        if dp < 0.9 * g.pupil_radius {
            out.pupil.push(v);
        }
        let in_annulus = dp >= g.pupil_radius && di < g.iris_radius;
        if in_annulus {
            out.annulus_total += 1;
            let usable = mask.is_none_or(|m| m.get(x, y));
            if usable {
                out.annulus_usable += 1;
                if dp >= 1.15 * g.pupil_radius && di < 0.9 * g.iris_radius {
                    out.iris.push(v);
                }
            }
        }
        if di >= 1.1 * g.iris_radius && di < 1.3 * g.iris_radius {
            out.sclera.push(v);
        }
    }
    out
}

/// Traces the pupil edge along 64 rays and returns `4 pi A / P^2` of the
/// resulting polygon.
fn pupil_circularity(raster: &Raster, g: &IrisGeometry) -> Option<f64> {
    const RAYS: usize = 64;
    let (cx, cy) = g.pupil_center;
    let r_lo = 0.5 * g.pupil_radius;
    let r_hi = (1.5 * g.pupil_radius).min(0.5 * (g.pupil_radius + g.iris_radius));
    let mut pts = Vec::with_capacity(RAYS);
    let mut found = 0usize;
    for k in 0..RAYS {
        let t = 2.0 * PI * k as f64 / RAYS as f64;
        let (c, s) = (t.cos(), t.sin());
        // Edge radius: centre of the run of radii sharing the largest step.
        let mut best_step = f64::NEG_INFINITY;
        let (mut r_sum, mut r_count) = (0.0, 0.0);
        let mut r = r_lo;
        while r <= r_hi {
            let inner = raster.bilinear(cx + (r - 1.5) * c, cy + (r - 1.5) * s);
            let outer = raster.bilinear(cx + (r + 1.5) * c, cy + (r + 1.5) * s);
            let step = outer - inner;
            if step > best_step {
                best_step = step;
                (r_sum, r_count) = (r, 1.0);
            } else if step == best_step {
                r_sum += r;
                r_count += 1.0;
            }
            r += 0.25;
        }
        if best_step >= MIN_BOUNDARY_STEP {
            found += 1;
        }
        let edge = r_sum / r_count;
        pts.push((edge * c, edge * s));
    }
    if found * 2 < RAYS {
        return None;
    }
    let mut area = 0.0;
    let mut perimeter = 0.0;
    for k in 0..RAYS {
        let (a, b) = (pts[k], pts[(k + 1) % RAYS]);
        area += a.0 * b.1 - b.0 * a.1;
        perimeter += dist(a, b);
    }
    let area = area.abs() / 2.0;
    (perimeter > 0.0).then(|| (4.0 * PI * area / (perimeter * perimeter)).clamp(0.0, 1.0))
}

fn entropy_bits(image: &GrayImage) -> Option<f64> {
    let mut hist = [0u64; 256];
    for &v in image.as_raw() {
        hist[v as usize] += 1;
    }
    let n = image.as_raw().len() as f64;
    (n > 0.0).then(|| {
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    })
}

/// Pixels inside the iris bounding box clipped to the image, minus a
/// one-pixel border so 3x3 stencils stay in bounds.
fn iris_window(image: &GrayImage, g: &IrisGeometry) -> Option<(i64, i64, i64, i64)> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = ((g.iris_center.0 - g.iris_radius).floor() as i64).max(1);
    let y0 = ((g.iris_center.1 - g.iris_radius).floor() as i64).max(1);
    let x1 = ((g.iris_center.0 + g.iris_radius).ceil() as i64).min(w - 2);
    let y1 = ((g.iris_center.1 + g.iris_radius).ceil() as i64).min(h - 2);
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
}

/// Variance of the 4-neighbour Laplacian over the iris window, mapped to
/// `100 v / (v + K)`.
fn sharpness(raster: &Raster, window: (i64, i64, i64, i64)) -> Option<f64> {
    let (x0, y0, x1, y1) = window;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let lap = raster.at(x - 1, y) + raster.at(x + 1, y) + raster.at(x, y - 1) + raster.at(x, y + 1)
                - 4.0 * raster.at(x, y);
            sum += lap;
            sum_sq += lap * lap;
            n += 1.0;
        }
    }
    (n > 0.0).then(|| {
        let var = (sum_sq / n - (sum / n).powi(2)).max(0.0);
        100.0 * var / (var + SHARPNESS_HALF_POINT)
    })
}

/// One minus the anisotropy of the Sobel gradient energy, scaled to 100.
fn motion_blur(raster: &Raster, window: (i64, i64, i64, i64)) -> Option<f64> {
    let (x0, y0, x1, y1) = window;
    let (mut sxx, mut syy) = (0.0, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = |dx: i64, dy: i64| raster.at(x + dx, y + dy);
            let gx = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
            let gy = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
            sxx += gx * gx;
            syy += gy * gy;
        }
    }
    let total = sxx + syy;
    (total > 0.0).then(|| 100.0 * (1.0 - (sxx - syy).abs() / total))
}

/// Computes every component metric and the aggregated score.
pub fn compute_quality(image: &GrayImage, g: &IrisGeometry, mask: Option<&IrisMask>) -> QualityReport {
    if g.validate(image.width(), image.height()).is_err() {
        return QualityReport::failed();
    }
    if mask.is_some_and(|m| m.dimensions() != image.dimensions()) {
        return QualityReport::failed();
    }
    let raster = Raster::new(image);
    let reg = regions(image, g, mask);
    let median_iris = median(reg.iris.clone());
    let (w, h) = (image.width() as f64, image.height() as f64);
    let (cx, cy) = g.iris_center;
    let border = (cx).min(cy).min(w - cx).min(h - cy) - g.iris_radius;
    let window = iris_window(image, g);

    QualityReport {
        usable_iris_area: (reg.annulus_total > 0).then(|| reg.annulus_usable as f64 / reg.annulus_total as f64),
        iris_sclera_contrast: median(reg.sclera)
            .zip(median_iris)
            .map(|(s, i)| weber_score(s, i)),
        iris_pupil_contrast: median_iris
            .zip(median(reg.pupil))
            .map(|(i, p)| weber_score(i, p)),
        pupil_circularity: pupil_circularity(&raster, g),
        grayscale_utilization: entropy_bits(image),
        iris_radius_px: Some(g.iris_radius),
        pupil_iris_ratio: Some(pupil_iris_ratio(g)),
        concentricity: Some((1.0 - dist(g.pupil_center, g.iris_center) / g.iris_radius).clamp(0.0, 1.0)),
        margin_adequacy: Some((border / g.iris_radius).clamp(0.0, 1.0)),
        sharpness: window.and_then(|win| sharpness(&raster, win)),
        motion_blur: window.and_then(|win| motion_blur(&raster, win)),
        overall: 0,
    }
    .aggregate()
}

/// Why a record was screened out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The quality computation failed (sentinel score).
    Failed,
    /// The overall score is below the threshold.
    BelowThreshold { overall: u8, threshold: u8 },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Failed => f.write_str("quality computation failed"),
            Self::BelowThreshold { overall, threshold } => {
                write!(f, "overall {overall} below threshold {threshold}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Screening {
    pub kept: Vec<ImageRecord>,
    pub rejected: Vec<(ImageRecord, RejectReason)>,
}

/// Keeps records with `threshold <= overall <= 100`; order is preserved in
/// both outputs.
pub fn filter_manifest(entries: &[ImageRecord], threshold: u8) -> Result<Screening, QualityError> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for e in entries {
        let q = e
            .quality
            .as_ref()
            .ok_or_else(|| QualityError::MissingQuality(e.path.display().to_string()))?;
        if q.overall == FAILURE_SENTINEL {
            rejected.push((e.clone(), RejectReason::Failed));
        } else if q.overall < threshold {
            rejected.push((
                e.clone(),
                RejectReason::BelowThreshold {
                    overall: q.overall,
                    threshold,
                },
            ));
        } else {
            kept.push(e.clone());
        }
    }
    Ok(Screening { kept, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::Eye;
    use image::Luma;
    use proptest::prelude::*;

    fn disk_image(pupil: f64, iris: f64, center: (f64, f64)) -> GrayImage {
        GrayImage::from_fn(640, 480, |x, y| {
            let d = dist((x as f64, y as f64), center);
            Luma([if d < pupil {
                30
            } else if d < iris {
                110
            } else {
                200
            }])
        })
    }

    #[test]
    fn ratio_examples() {
        let g = IrisGeometry::annotated((320.0, 240.0), 30.0, (320.0, 240.0), 100.0);
        assert!((pupil_iris_ratio(&g) - 0.3).abs() < 1e-15);
        let g = IrisGeometry::annotated((320.0, 240.0), 50.0, (320.0, 240.0), 125.0);
        assert!((pupil_iris_ratio(&g) - 0.4).abs() < 1e-15);
        let g = IrisGeometry::annotated((320.0, 240.0), 100.0 - 1e-9, (320.0, 240.0), 100.0);
        let r = pupil_iris_ratio(&g);
        assert!(r < 1.0 && r > 0.999_999);
    }

    #[test]
    fn fits_disk_fixture() {
        let img = disk_image(30.0, 100.0, (320.0, 240.0));
        let g = fit_geometry(&img, None).unwrap();
        assert_eq!(g.source, GeometrySource::Fitted);
        assert!((g.pupil_radius - 30.0).abs() <= 2.0, "{g:?}");
        assert!((g.iris_radius - 100.0).abs() <= 2.0, "{g:?}");
        assert!(dist(g.pupil_center, (320.0, 240.0)) <= 2.0);
    }

    #[test]
    fn annotation_passes_through() {
        let img = disk_image(30.0, 100.0, (320.0, 240.0));
        let a = IrisGeometry::annotated((300.0, 200.0), 20.0, (301.0, 201.0), 90.0);
        assert_eq!(fit_geometry(&img, Some(&a)).unwrap(), a);
    }

    #[test]
    fn uniform_image_has_no_geometry() {
        let img = GrayImage::from_pixel(640, 480, Luma([128]));
        assert_eq!(fit_geometry(&img, None), Err(QualityError::GeometryNotFound));
    }

    #[test]
    fn disk_metrics_by_hand() {
        let img = disk_image(30.0, 100.0, (320.0, 240.0));
        let g = IrisGeometry::annotated((320.0, 240.0), 30.0, (320.0, 240.0), 100.0);
        let q = compute_quality(&img, &g, None);
        // Medians are the flat region levels.
        assert!((q.iris_sclera_contrast.unwrap() - weber_score(200.0, 110.0)).abs() < 1e-12);
        assert!((q.iris_pupil_contrast.unwrap() - weber_score(110.0, 30.0)).abs() < 1e-12);
        assert_eq!(q.usable_iris_area, Some(1.0));
        assert_eq!(q.concentricity, Some(1.0));
        assert!((q.margin_adequacy.unwrap() - 1.0).abs() < 1e-12);
        assert!(q.pupil_circularity.unwrap() > 0.98, "{q:?}");
        assert!(q.overall != FAILURE_SENTINEL);
    }

    #[test]
    fn border_touching_iris_has_zero_margin() {
        let img = disk_image(30.0, 100.0, (100.0, 240.0));
        let g = IrisGeometry::annotated((100.0, 240.0), 30.0, (100.0, 240.0), 100.0);
        assert_eq!(compute_quality(&img, &g, None).margin_adequacy, Some(0.0));
    }

    #[test]
    fn invalid_geometry_gives_sentinel() {
        let img = disk_image(30.0, 100.0, (320.0, 240.0));
        let g = IrisGeometry::annotated((320.0, 240.0), 120.0, (320.0, 240.0), 100.0);
        let q = compute_quality(&img, &g, None);
        assert_eq!(q.overall, FAILURE_SENTINEL);
        assert!(q.is_failure());
    }

    #[test]
    fn compute_is_deterministic() {
        let img = disk_image(35.0, 95.0, (310.0, 250.0));
        let g = fit_geometry(&img, None).unwrap();
        assert_eq!(compute_quality(&img, &g, None), compute_quality(&img, &g, None));
    }

    fn record(overall: Option<u8>) -> ImageRecord {
        let mut r = ImageRecord::new("s", Eye::L, chrono::NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(), "x.png");
        r.quality = overall.map(|o| QualityReport {
            overall: o,
            ..QualityReport::failed()
        });
        r
    }

    #[test]
    fn screening_boundary() {
        let entries: Vec<ImageRecord> = [49, 50, 255].into_iter().map(|o| record(Some(o))).collect();
        let s = filter_manifest(&entries, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(s.kept.len(), 1);
        assert_eq!(s.kept[0].quality.as_ref().unwrap().overall, 50);
        assert_eq!(s.rejected.len(), 2);
        assert_eq!(s.rejected[1].1, RejectReason::Failed);
        assert!(matches!(
            filter_manifest(&[record(None)], 50),
            Err(QualityError::MissingQuality(_))
        ));
    }

    proptest! {
        #[test]
        fn ratio_in_open_unit_interval(p in 0.01f64..500.0, extra in 1e-6f64..500.0) {
            let g = IrisGeometry::annotated((1.0, 1.0), p, (1.0, 1.0), p + extra);
            let r = pupil_iris_ratio(&g);
            prop_assert!(r > 0.0 && r < 1.0);
        }

        #[test]
        fn screening_partitions_and_is_monotone(scores in proptest::collection::vec(prop_oneof![0u8..=100, Just(255u8)], 0..20)) {
            let entries: Vec<ImageRecord> = scores.iter().map(|&o| record(Some(o))).collect();
            let mut prev_kept = usize::MAX;
            for t in [0u8, 25, 50, 75, 100] {
                let s = filter_manifest(&entries, t).unwrap();
                prop_assert_eq!(s.kept.len() + s.rejected.len(), entries.len());
                prop_assert!(s.kept.len() <= prev_kept);
                prop_assert!(s.kept.iter().all(|e| e.quality.as_ref().unwrap().overall != 255));
                prev_kept = s.kept.len();
            }
        }
    }
}
