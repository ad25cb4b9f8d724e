//! Pupil extraction from a grayscale eye crop.
//!
//! Pixels outside the eye polygon are discarded, intensities are stretched
//! between the 2nd and 98th percentile, the darkest fraction of the eye is
//! thresholded into a binary mask, and the mask is cleaned with an opening
//! followed by a closing. The threshold fraction and both window sizes are
//! searched over a small grid; the winning combination is the one whose
//! largest blob is biggest while still being roughly as tall as it is wide.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PupilError {
    #[error("image data has {got} pixels, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("image is empty")]
    EmptyImage,
    #[error("intensity {0} outside [0, 1]")]
    Intensity(f64),
    #[error("morphology window must be odd and positive, got {0}")]
    Window(usize),
    #[error("polygon needs at least 3 vertices with positive area")]
    Polygon,
    #[error("polygon line {line}: {message}")]
    PolygonFile { line: usize, message: String },
    #[error("no parameter combination produced a circle-shaped blob")]
    NoPupil,
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PupilError> {
        if width == 0 || height == 0 {
            return Err(PupilError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(PupilError::Dimension {
                expected: width * height,
                got: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PupilError::Intensity(v));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, PupilError> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Decodes an 8- or 16-bit PGM, mapping intensities linearly onto [0, 1].
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, PupilError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?.into_luma16();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self, PupilError> {
        Self::from_pgm_bytes(&std::fs::read(path)?)
    }

    /// Encodes as an 8-bit binary ("P5") PGM.
    pub fn to_pgm_bytes(&self) -> Result<Vec<u8>, PupilError> {
        let pixels: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&pixels, self.width as u32, self.height as u32, image::ExtendedColorType::L8)?;
        Ok(out)
    }
}

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, PupilError> {
        if bits.len() != width * height {
            return Err(PupilError::Dimension {
                expected: width * height,
                got: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    fn and(mut self, mask: &[bool]) -> Self {
        self.bits.iter_mut().zip(mask).for_each(|(b, m)| *b &= *m);
        self
    }
}

// ---------------------------------------------------------------------------
// Intensity steps
// ---------------------------------------------------------------------------

/// Percentile with linear interpolation between closest ranks (`p` in [0, 1]).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn stretch(img: &GrayImage, low: f64, high: f64) -> GrayImage {
    let data = if high > low {
        img.data
            .iter()
            .map(|v| ((v - low) / (high - low)).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.data.len()]
    };
    GrayImage { data, ..*img }
}

/// Maps the 2nd percentile to 0 and the 98th to 1, clamping the rest.
/// A constant image becomes all zeros.
pub fn rescale_intensity(img: &GrayImage) -> GrayImage {
    let mut sorted = img.data.clone();
    sorted.sort_by(f64::total_cmp);
    stretch(img, percentile_sorted(&sorted, 0.02), percentile_sorted(&sorted, 0.98))
}

/// Rescale using percentiles of the masked pixels only.
fn rescale_masked(img: &GrayImage, mask: &[bool]) -> GrayImage {
    let mut sorted: Vec<f64> = img.data.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    sorted.sort_by(f64::total_cmp);
    stretch(img, percentile_sorted(&sorted, 0.02), percentile_sorted(&sorted, 0.98))
}

/// Pixels strictly above `threshold` become 1. With `invert`, intensities are
/// complemented first so dark regions light up.
pub fn binarize_cdf(img: &GrayImage, threshold: f64, invert: bool) -> BinaryImage {
    let bits = img
        .data
        .iter()
        .map(|&v| if invert { 1.0 - v } else { v } > threshold)
        .collect();
    BinaryImage {
        width: img.width,
        height: img.height,
        bits,
    }
}

// ---------------------------------------------------------------------------
// Morphology
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Open,
    Close,
}

fn check_window(window: usize) -> Result<usize, PupilError> {
    if window % 2 == 1 {
        Ok(window / 2)
    } else {
        Err(PupilError::Window(window))
    }
}

/// One separable pass of a square structuring element. The image sits on an
/// infinite zero background: `erode` treats out-of-range neighbours as 0.
fn square_pass(bits: &[bool], w: usize, h: usize, r: usize, erode: bool) -> Vec<bool> {
    fn combine(mut run: impl Iterator<Item = bool>, clipped: bool, erode: bool) -> bool {
        if erode {
            !clipped && run.all(|b| b)
        } else {
            run.any(|b| b)
        }
    }
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let row = &bits[y * w..(y + 1) * w];
        for x in 0..w {
            let clipped = x < r || x + r >= w;
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = combine(row[lo..=hi].iter().copied(), clipped, erode);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let clipped = y < r || y + r >= h;
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = combine((lo..=hi).map(|yy| rows[yy * w + x]), clipped, erode);
        }
    }
    out
}

pub fn erode(img: &BinaryImage, window: usize) -> Result<BinaryImage, PupilError> {
    let r = check_window(window)?;
    Ok(BinaryImage {
        bits: square_pass(&img.bits, img.width, img.height, r, true),
        ..*img
    })
}

pub fn dilate(img: &BinaryImage, window: usize) -> Result<BinaryImage, PupilError> {
    let r = check_window(window)?;
    Ok(BinaryImage {
        bits: square_pass(&img.bits, img.width, img.height, r, false),
        ..*img
    })
}

/// Opening (erode, dilate) or closing (dilate, erode) with a square window.
///
/// Closing is computed on a zero-padded copy so the intermediate dilation is
/// not cut off at the image border; with that, opening never adds pixels,
/// closing never removes any, and both are idempotent.
pub fn morphology(img: &BinaryImage, op: MorphOp, window: usize) -> Result<BinaryImage, PupilError> {
    let r = check_window(window)?;
    if r == 0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width, img.height);
    match op {
        MorphOp::Open => {
            let eroded = square_pass(&img.bits, w, h, r, true);
            Ok(BinaryImage {
                bits: square_pass(&eroded, w, h, r, false),
                ..*img
            })
        }
        MorphOp::Close => {
            let (pw, ph) = (w + 2 * r, h + 2 * r);
            let mut padded = vec![false; pw * ph];
            for y in 0..h {
                padded[(y + r) * pw + r..(y + r) * pw + r + w].copy_from_slice(&img.bits[y * w..(y + 1) * w]);
            }
            let closed = square_pass(&square_pass(&padded, pw, ph, r, false), pw, ph, r, true);
            let bits = (0..h)
                .flat_map(|y| closed[(y + r) * pw + r..(y + r) * pw + r + w].iter().copied())
                .collect();
            Ok(BinaryImage { bits, ..*img })
        }
    }
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

/// An 8-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub area: usize,
    pub min_x: usize,
    pub max_x: usize,
    pub min_y: usize,
    pub max_y: usize,
    pub centroid: (f64, f64),
}

impl Blob {
    pub fn bbox_width(&self) -> usize {
        self.max_x - self.min_x + 1
    }

    pub fn bbox_height(&self) -> usize {
        self.max_y - self.min_y + 1
    }

    /// Bounding-box width over height.
    pub fn aspect(&self) -> f64 {
        self.bbox_width() as f64 / self.bbox_height() as f64
    }
}

/// 8-connected components, in raster order of their first pixel.
pub fn connected_components(img: &BinaryImage) -> Vec<Blob> {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !img.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sx, mut sy) = (0usize, 0usize, 0usize);
        let (mut min_x, mut max_x, mut min_y, mut max_y) = (usize::MAX, 0, usize::MAX, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x;
            sy += y;
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if img.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        blobs.push(Blob {
            area,
            min_x,
            max_x,
            min_y,
            max_y,
            centroid: (sx as f64 / area as f64, sy as f64 / area as f64),
        });
    }
    blobs
}

/// Largest component; the earliest in raster order wins ties.
pub fn largest_blob(img: &BinaryImage) -> Option<Blob> {
    connected_components(img)
        .into_iter()
        .reduce(|best, b| if b.area > best.area { b } else { best })
}

// ---------------------------------------------------------------------------
// Polygon mask
// ---------------------------------------------------------------------------

/// Even-odd test of pixel centres against the polygon.
pub fn polygon_mask(width: usize, height: usize, polygon: &[(f64, f64)]) -> Result<Vec<bool>, PupilError> {
    if polygon.len() < 3 {
        return Err(PupilError::Polygon);
    }
    let twice_area: f64 = polygon
        .iter()
        .zip(polygon.iter().cycle().skip(1))
        .map(|(a, b)| a.0 * b.1 - b.0 * a.1)
        .sum();
    if twice_area.abs() <= 0.0 || polygon.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(PupilError::Polygon);
    }
    let inside = |px: f64, py: f64| {
        let mut hit = false;
        let mut j = polygon.len() - 1;
        for i in 0..polygon.len() {
            let (xi, yi) = polygon[i];
            let (xj, yj) = polygon[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                hit = !hit;
            }
            j = i;
        }
        hit
    };
    Ok((0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| inside(x as f64 + 0.5, y as f64 + 0.5))
        .collect())
}

/// Reads `x,y` vertex lines; blank lines and `#` comments are skipped.
pub fn parse_polygon(text: &str) -> Result<Vec<(f64, f64)>, PupilError> {
    let mut vertices = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| PupilError::PolygonFile { line: i + 1, message };
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected \"x,y\", got {line:?}")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("{s:?} is not a number")))
        };
        vertices.push((parse(x)?, parse(y)?));
    }
    Ok(vertices)
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilParams {
    /// Fraction of the (darkest) eye pixels kept by the threshold.
    pub cdf_threshold: f64,
    pub open_window: usize,
    pub close_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PupilResult {
    pub center: (f64, f64),
    pub blob_area: usize,
    pub params_used: PupilParams,
}

/// Candidate values tried by [`extract_pupil_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PupilSearch {
    pub cdf_thresholds: Vec<f64>,
    pub open_windows: Vec<usize>,
    pub close_windows: Vec<usize>,
    /// Largest accepted bounding-box aspect (and its reciprocal the smallest).
    pub max_aspect: f64,
    /// Threshold the complemented intensity, so the dark pupil becomes 1.
    pub invert: bool,
}

impl Default for PupilSearch {
    fn default() -> Self {
        Self {
            cdf_thresholds: vec![0.02, 0.05, 0.1, 0.15, 0.2],
            open_windows: vec![1, 3, 5],
            close_windows: vec![1, 3, 5],
            max_aspect: 1.5,
            invert: true,
        }
    }
}

pub fn extract_pupil(eye: &GrayImage, polygon: &[(f64, f64)]) -> Result<PupilResult, PupilError> {
    extract_pupil_with(eye, polygon, &PupilSearch::default())
}

/// Grid search over threshold fraction and window sizes.
///
/// Combinations are visited threshold-major, then opening window, then
/// closing window; the first combination reaching the best area wins.
pub fn extract_pupil_with(
    eye: &GrayImage,
    polygon: &[(f64, f64)],
    search: &PupilSearch,
) -> Result<PupilResult, PupilError> {
    let mask = polygon_mask(eye.width, eye.height, polygon)?;
    if !mask.iter().any(|m| *m) {
        return Err(PupilError::Polygon);
    }
    let rescaled = rescale_masked(eye, &mask);
    let mut eye_values: Vec<f64> = rescaled
        .data
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(&v, _)| if search.invert { 1.0 - v } else { v })
        .collect();
    eye_values.sort_by(f64::total_cmp);

    let mut best: Option<PupilResult> = None;
    for &fraction in &search.cdf_thresholds {
        let threshold = percentile_sorted(&eye_values, 1.0 - fraction);
        let binary = binarize_cdf(&rescaled, threshold, search.invert).and(&mask);
        for &open in &search.open_windows {
            let opened = morphology(&binary, MorphOp::Open, open)?;
            for &close in &search.close_windows {
                let cleaned = morphology(&opened, MorphOp::Close, close)?;
                let Some(blob) = largest_blob(&cleaned) else {
                    continue;
                };
                let aspect = blob.aspect();
                if aspect > search.max_aspect || aspect < 1.0 / search.max_aspect {
                    continue;
                }
                if best.as_ref().is_none_or(|b| blob.area > b.blob_area) {
                    best = Some(PupilResult {
                        center: blob.centroid,
                        blob_area: blob.area,
                        params_used: PupilParams {
                            cdf_threshold: fraction,
                            open_window: open,
                            close_window: close,
                        },
                    });
                }
            }
        }
    }
    best.ok_or(PupilError::NoPupil)
}
