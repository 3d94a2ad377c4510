//! 70-point landmark sets (68 Multi-PIE points plus two iris centers),
//! gradient-based pupil localization, square crop computation and the
//! binary Facial Landmark Map renderer.

use std::collections::HashMap;
use std::path::PathBuf;

use facegan_nn::parallel::map_indexed;
use image::{GrayImage, RgbImage};

use crate::error::{PipelineError, Result};
use crate::imgutil::{bilinear_rgb, gaussian_blur_gray, gradients, nearest_gray, to_gray};
use crate::preprocess::RgbdFrame;

pub const LANDMARK_COUNT: usize = 70;
pub const DETECTED_COUNT: usize = 68;
/// Indices of the six eye-contour landmarks per eye in the Multi-PIE scheme.
pub const LEFT_EYE: std::ops::Range<usize> = 36..42;
pub const RIGHT_EYE: std::ops::Range<usize> = 42..48;
/// Radius of the rendered landmark discs in pixels.
pub const FLM_DISC_RADIUS: f64 = 2.0;

/// 70 landmark positions in image coordinates. Indices 0-67 follow the
/// Multi-PIE 68 scheme; 68 and 69 are the left and right iris centers.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
    pub source_frame: u64,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>, source_frame: u64) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(PipelineError::Contract(format!(
                "landmark set needs {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(PipelineError::Contract("non-finite landmark".into()));
        }
        Ok(Self {
            points,
            source_frame,
        })
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for &(x, y) in &self.points {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        (min_x, min_y, max_x, max_y)
    }
}

/// Binary image rendering a landmark set as filled discs.
#[derive(Clone, Debug, PartialEq)]
pub struct FacialLandmarkMap {
    pub image: GrayImage,
}

/// Integer crop rectangle, half-open on neither side: pixels x0..=x1-? are
/// interpreted via `width() = x1 - x0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl CropRect {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }
}

/// Landmark source abstraction. The production network detector is loaded
/// externally; the pipeline ships a backend that replays stored annotation
/// files and an in-memory backend for tests.
pub trait LandmarkDetector: Send + Sync {
    /// 68 Multi-PIE points for the single face in the image.
    fn detect(&self, color: &RgbImage, frame_id: u64) -> Result<Vec<(f64, f64)>>;

    /// Whether concurrent `detect` calls are allowed. The pipeline
    /// serializes calls to backends that return false.
    fn concurrency_safe(&self) -> bool {
        true
    }

    fn name(&self) -> &str;
}

/// Replays 68-point annotations from `<frame_id>_lms.txt` files.
pub struct AnnotationBackend {
    pub dir: PathBuf,
}

impl LandmarkDetector for AnnotationBackend {
    fn detect(&self, _color: &RgbImage, frame_id: u64) -> Result<Vec<(f64, f64)>> {
        let path = self.dir.join(format!("{frame_id}_lms.txt"));
        if !path.exists() {
            return Err(PipelineError::NoFace { frame_id });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        parse_landmark_text(&text, frame_id)
    }

    fn name(&self) -> &str {
        "synthetic"
    }
}

/// In-memory ground truth, used by tests.
#[derive(Default)]
pub struct MapBackend {
    pub points: HashMap<u64, Vec<(f64, f64)>>,
}

impl LandmarkDetector for MapBackend {
    fn detect(&self, _color: &RgbImage, frame_id: u64) -> Result<Vec<(f64, f64)>> {
        self.points
            .get(&frame_id)
            .cloned()
            .ok_or(PipelineError::NoFace { frame_id })
    }

    fn name(&self) -> &str {
        "map"
    }
}

/// Parse "x y" lines; accepts 68 or 70 lines and keeps the first 68.
pub fn parse_landmark_text(text: &str, frame_id: u64) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let x: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| PipelineError::Contract(format!("bad landmark line '{line}'")))?;
        let y: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| PipelineError::Contract(format!("bad landmark line '{line}'")))?;
        pts.push((x, y));
    }
    if pts.len() != DETECTED_COUNT && pts.len() != LANDMARK_COUNT {
        return Err(PipelineError::FrameRejected {
            frame_id,
            reason: format!("annotation has {} points", pts.len()),
        });
    }
    pts.truncate(DETECTED_COUNT);
    Ok(pts)
}

pub fn landmark_text(points: &[(f64, f64)]) -> String {
    let mut out = String::new();
    for (x, y) in points {
        out.push_str(&format!("{x} {y}\n"));
    }
    out
}

/// Pupil position estimate in patch coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PupilEstimate {
    pub x: f64,
    pub y: f64,
    pub low_confidence: bool,
}

/// Fraction of gradient magnitudes skipped as too weak.
pub const PUPIL_GRADIENT_PERCENTILE: f64 = 30.0;
/// Patches wider than this are evaluated on a decimated grid.
const PUPIL_MAX_EVAL_SIDE: u32 = 64;

/// Locate the darkest radially-consistent point of an eye patch: the
/// candidate center c maximizing the inverted-intensity-weighted mean of
/// squared dot products between unit gradients and unit displacements from
/// c. Gradients below the 30th magnitude percentile are skipped.
pub fn locate_pupil(patch: &GrayImage) -> PupilEstimate {
    let (w, h) = patch.dimensions();
    if w == 0 || h == 0 {
        return PupilEstimate {
            x: 0.0,
            y: 0.0,
            low_confidence: true,
        };
    }
    // decimate very large patches; the objective is evaluated on the
    // reduced grid and mapped back
    let step = ((w.max(h) + PUPIL_MAX_EVAL_SIDE - 1) / PUPIL_MAX_EVAL_SIDE).max(1);
    let eval = if step > 1 {
        let (ew, eh) = (w.div_ceil(step), h.div_ceil(step));
        GrayImage::from_fn(ew, eh, |x, y| *patch.get_pixel(x * step, y * step))
    } else {
        patch.clone()
    };
    let est = locate_pupil_exhaustive(&eval);
    PupilEstimate {
        x: est.x * step as f64,
        y: est.y * step as f64,
        low_confidence: est.low_confidence,
    }
}

fn locate_pupil_exhaustive(patch: &GrayImage) -> PupilEstimate {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    let n = w * h;
    let (gx, gy) = gradients(patch);
    let mut mags: Vec<f64> = (0..n).map(|i| (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((PUPIL_GRADIENT_PERCENTILE / 100.0) * (n - 1) as f64).round() as usize];

    // unit gradients above threshold; zero-magnitude pixels never qualify
    let mut field: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..n {
        if mags[i] > 0.0 && mags[i] >= threshold {
            field.push((i, gx[i] / mags[i], gy[i] / mags[i]));
        }
        mags[i] = 0.0;
    }
    if field.is_empty() {
        // constant patch: centroid fallback
        return PupilEstimate {
            x: (w as f64 - 1.0) / 2.0,
            y: (h as f64 - 1.0) / 2.0,
            low_confidence: true,
        };
    }

    let smoothed = gaussian_blur_gray(patch, 5, 1.0);
    let weights: Vec<f64> = smoothed.as_raw().iter().map(|&v| 255.0 - v as f64).collect();

    let scores = map_indexed(n, |c| {
        let cx = (c % w) as f64;
        let cy = (c / w) as f64;
        let mut acc = 0.0;
        let mut count = 0usize;
        for &(i, ugx, ugy) in &field {
            if i == c {
                continue;
            }
            let dx = (i % w) as f64 - cx;
            let dy = (i / w) as f64 - cy;
            let norm = (dx * dx + dy * dy).sqrt();
            let dot = (dx * ugx + dy * ugy) / norm;
            acc += dot * dot;
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            weights[c] * acc / count as f64
        }
    });
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    PupilEstimate {
        x: (best % w) as f64,
        y: (best / w) as f64,
        low_confidence: false,
    }
}

/// Objective value at one candidate, re-derived independently; exposed for
/// the exhaustive-optimality property test.
pub fn pupil_objective(patch: &GrayImage, cx: usize, cy: usize) -> f64 {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    let n = w * h;
    let (gx, gy) = gradients(patch);
    let mags: Vec<f64> = (0..n).map(|i| (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((PUPIL_GRADIENT_PERCENTILE / 100.0) * (n - 1) as f64).round() as usize];
    let smoothed = gaussian_blur_gray(patch, 5, 1.0);
    let weight = 255.0 - smoothed.get_pixel(cx as u32, cy as u32).0[0] as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mags[i] <= 0.0 || mags[i] < threshold || i == cy * w + cx {
            continue;
        }
        let dx = (i % w) as f64 - cx as f64;
        let dy = (i / w) as f64 - cy as f64;
        let norm = (dx * dx + dy * dy).sqrt();
        let dot = (dx * gx[i] / mags[i] + dy * gy[i] / mags[i]) / norm;
        acc += dot * dot;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        weight * acc / count as f64
    }
}

/// Tight eye crop around six contour landmarks, padded 20 percent per side.
pub fn eye_patch_rect(points: &[(f64, f64)], range: std::ops::Range<usize>, w: u32, h: u32) -> CropRect {
    let xs: Vec<f64> = points[range.clone()].iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points[range].iter().map(|p| p.1).collect();
    let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad_x = (max_x - min_x).max(2.0) * 0.2;
    let pad_y = (max_y - min_y).max(2.0) * 0.2;
    CropRect {
        x0: ((min_x - pad_x).floor() as i64).clamp(0, w as i64 - 1),
        y0: ((min_y - pad_y).floor() as i64).clamp(0, h as i64 - 1),
        x1: ((max_x + pad_x).ceil() as i64).clamp(1, w as i64),
        y1: ((max_y + pad_y).ceil() as i64).clamp(1, h as i64),
    }
}

/// Run the detector and complete the 68 detected points with the two iris
/// centers located on the eye patches.
pub fn detect_landmarks(
    color: &RgbImage,
    frame_id: u64,
    backend: &dyn LandmarkDetector,
) -> Result<LandmarkSet> {
    let detected = backend.detect(color, frame_id)?;
    if detected.len() != DETECTED_COUNT {
        return Err(PipelineError::Contract(format!(
            "backend '{}' returned {} points",
            backend.name(),
            detected.len()
        )));
    }
    let (w, h) = color.dimensions();
    for &(x, y) in &detected {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            return Err(PipelineError::FrameRejected {
                frame_id,
                reason: format!("landmark ({x}, {y}) outside {w}x{h} image"),
            });
        }
    }
    let gray = to_gray(color);
    let mut points = detected.clone();
    for range in [LEFT_EYE, RIGHT_EYE] {
        let rect = eye_patch_rect(&detected, range, w, h);
        let patch = crop_gray(&gray, rect);
        let est = locate_pupil(&patch);
        if est.low_confidence {
            log::debug!("frame {frame_id}: low-confidence pupil in {rect:?}");
        }
        points.push((rect.x0 as f64 + est.x, rect.y0 as f64 + est.y));
    }
    LandmarkSet::new(points, frame_id)
}

fn crop_gray(img: &GrayImage, rect: CropRect) -> GrayImage {
    GrayImage::from_fn(rect.width() as u32, rect.height() as u32, |x, y| {
        *img.get_pixel(rect.x0 as u32 + x, rect.y0 as u32 + y)
    })
}

/// Minimal axis-aligned bounding rectangle of the landmarks, optionally
/// expanded to a square about its center, clamped to the image by shifting
/// (shrinking only when the square cannot fit at all).
pub fn compute_crop(lms: &LandmarkSet, img_w: u32, img_h: u32, square: bool) -> Result<CropRect> {
    let (min_x, min_y, max_x, max_y) = lms.bounds();
    if max_x <= min_x || max_y <= min_y {
        return Err(PipelineError::Contract(
            "degenerate landmark set: zero-area bounding box".into(),
        ));
    }
    let mut x0 = min_x.floor() as i64;
    let mut y0 = min_y.floor() as i64;
    let mut x1 = max_x.ceil() as i64;
    let mut y1 = max_y.ceil() as i64;
    if square {
        let side = (x1 - x0).max(y1 - y0).min(img_w as i64).min(img_h as i64);
        let grow_x = side - (x1 - x0);
        let grow_y = side - (y1 - y0);
        if grow_x > 0 {
            x0 -= grow_x / 2;
            x1 += grow_x - grow_x / 2;
        } else if grow_x < 0 {
            // square cannot contain the landmarks on this axis; keep bbox
            let _ = grow_x;
        }
        if grow_y > 0 {
            y0 -= grow_y / 2;
            y1 += grow_y - grow_y / 2;
        }
    }
    // clamp by shifting so the size is preserved
    let shift_x = (-x0).max(0) - (x1 - img_w as i64).max(0);
    let shift_y = (-y0).max(0) - (y1 - img_h as i64).max(0);
    x0 += shift_x;
    x1 += shift_x;
    y0 += shift_y;
    y1 += shift_y;
    x0 = x0.max(0);
    y0 = y0.max(0);
    x1 = x1.min(img_w as i64);
    y1 = y1.min(img_h as i64);
    Ok(CropRect { x0, y0, x1, y1 })
}

/// Affine map from crop coordinates to output coordinates.
pub fn crop_to_out(rect: CropRect, out_size: u32, x: f64, y: f64) -> (f64, f64) {
    let sx = out_size as f64 / rect.width() as f64;
    let sy = out_size as f64 / rect.height() as f64;
    ((x - rect.x0 as f64) * sx, (y - rect.y0 as f64) * sy)
}

/// Inverse of [`crop_to_out`].
pub fn out_to_crop(rect: CropRect, out_size: u32, x: f64, y: f64) -> (f64, f64) {
    let sx = rect.width() as f64 / out_size as f64;
    let sy = rect.height() as f64 / out_size as f64;
    (x * sx + rect.x0 as f64, y * sy + rect.y0 as f64)
}

/// Crop a frame to the rectangle and resize to `out_size`: color bilinear,
/// depth nearest-neighbor (the invalid sentinel must never be interpolated).
pub fn crop_resize(frame: &RgbdFrame, rect: CropRect, out_size: u32) -> Result<RgbdFrame> {
    let (w, h) = frame.color.dimensions();
    if rect.x0 < 0 || rect.y0 < 0 || rect.x1 > w as i64 || rect.y1 > h as i64 || rect.width() <= 0 {
        return Err(PipelineError::Contract(format!(
            "crop rect {rect:?} outside {w}x{h} frame"
        )));
    }
    let color = RgbImage::from_fn(out_size, out_size, |x, y| {
        let (sx, sy) = out_to_crop(rect, out_size, x as f64, y as f64);
        image::Rgb(bilinear_rgb(&frame.color, sx, sy))
    });
    let depth8 = GrayImage::from_fn(out_size, out_size, |x, y| {
        let (sx, sy) = out_to_crop(rect, out_size, x as f64, y as f64);
        image::Luma([nearest_gray(&frame.depth8, sx, sy)])
    });
    RgbdFrame::new(color, depth8, frame.window)
}

/// Transform landmark coordinates with the same affine map as [`crop_resize`].
pub fn transform_landmarks(lms: &LandmarkSet, rect: CropRect, out_size: u32) -> LandmarkSet {
    LandmarkSet {
        points: lms
            .points
            .iter()
            .map(|&(x, y)| crop_to_out(rect, out_size, x, y))
            .collect(),
        source_frame: lms.source_frame,
    }
}

/// Render landmarks as filled discs of radius 2 on a black map. A pixel is
/// set when its center lies within the radius of the (float) landmark.
pub fn render_flm(lms: &LandmarkSet, size: u32) -> Result<FacialLandmarkMap> {
    let mut img = GrayImage::new(size, size);
    let r = FLM_DISC_RADIUS;
    for &(x, y) in &lms.points {
        if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
            return Err(PipelineError::Contract(format!(
                "landmark ({x}, {y}) outside {size}x{size} crop"
            )));
        }
        let x0 = ((x - r).floor().max(0.0)) as u32;
        let y0 = ((y - r).floor().max(0.0)) as u32;
        let x1 = ((x + r).ceil() as u32).min(size - 1);
        let y1 = ((y + r).ceil() as u32).min(size - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - x;
                let dy = py as f64 - y;
                if dx * dx + dy * dy <= r * r {
                    img.put_pixel(px, py, image::Luma([255]));
                }
            }
        }
    }
    Ok(FacialLandmarkMap { image: img })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn set_of(points: Vec<(f64, f64)>) -> LandmarkSet {
        LandmarkSet::new(points, 0).unwrap()
    }

    fn spread_70(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Vec<(f64, f64)> {
        let mut pts = vec![(min_x, min_y), (max_x, max_y)];
        for i in 0..68 {
            let t = i as f64 / 67.0;
            pts.push((min_x + t * (max_x - min_x), min_y + (1.0 - t) * (max_y - min_y)));
        }
        pts
    }

    #[test]
    fn crop_already_square() {
        let lms = set_of(spread_70(100.0, 120.0, 400.0, 420.0));
        let rect = compute_crop(&lms, 1000, 1000, true).unwrap();
        assert_eq!(rect, CropRect { x0: 100, y0: 120, x1: 400, y1: 420 });
    }

    #[test]
    fn crop_expands_short_axis_symmetrically() {
        let lms = set_of(spread_70(100.0, 100.0, 400.0, 300.0));
        let rect = compute_crop(&lms, 1000, 1000, true).unwrap();
        assert_eq!(rect, CropRect { x0: 100, y0: 50, x1: 400, y1: 350 });
    }

    #[test]
    fn crop_clamps_by_shifting_and_stays_square() {
        let lms = set_of(spread_70(5.0, 10.0, 305.0, 110.0));
        let rect = compute_crop(&lms, 400, 400, true).unwrap();
        assert_eq!(rect.width(), rect.height());
        assert_eq!(rect.width(), 300);
        assert_eq!(rect.y0, 0); // shifted up against the border
        for &(x, y) in &lms.points {
            assert!(rect.contains(x, y));
        }
    }

    #[test]
    fn crop_shift_oracle_on_random_cases() {
        // clamp-then-shift oracle: square side preserved, rect in bounds,
        // all landmarks contained whenever the square fits
        let mut state = 99u64;
        let mut rnd = |span: f64| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * span
        };
        for _ in 0..200 {
            let w = 300.0 + rnd(200.0);
            let h = 300.0 + rnd(200.0);
            let min_x = rnd(w - 120.0);
            let min_y = rnd(h - 120.0);
            let max_x = (min_x + 20.0 + rnd(100.0)).min(w - 1.0);
            let max_y = (min_y + 20.0 + rnd(100.0)).min(h - 1.0);
            let lms = set_of(spread_70(min_x, min_y, max_x, max_y));
            let rect = compute_crop(&lms, w as u32, h as u32, true).unwrap();
            let side = ((max_x.ceil() - min_x.floor()) as i64).max((max_y.ceil() - min_y.floor()) as i64);
            assert_eq!(rect.width(), rect.height());
            assert_eq!(rect.width(), side);
            assert!(rect.x0 >= 0 && rect.y0 >= 0);
            assert!(rect.x1 <= w as i64 && rect.y1 <= h as i64);
            for &(x, y) in &lms.points {
                assert!(rect.contains(x, y));
            }
        }
    }

    #[test]
    fn crop_translation_equivariance() {
        let lms = set_of(spread_70(50.0, 60.0, 210.0, 240.0));
        let moved = set_of(lms.points.iter().map(|&(x, y)| (x + 13.0, y + 7.0)).collect());
        let a = compute_crop(&lms, 4000, 4000, true).unwrap();
        let b = compute_crop(&moved, 4000, 4000, true).unwrap();
        assert_eq!((b.x0 - a.x0, b.y0 - a.y0), (13, 7));
        assert_eq!((b.x1 - a.x1, b.y1 - a.y1), (13, 7));
    }

    #[test]
    fn crop_rejects_degenerate_set() {
        let lms = set_of(vec![(5.0, 5.0); 70]);
        assert!(compute_crop(&lms, 100, 100, true).is_err());
    }

    #[test]
    fn render_flm_center_disc_is_13_pixels() {
        let mut pts = vec![(256.0, 256.0)];
        pts.extend(std::iter::repeat((256.0, 256.0)).take(69));
        let flm = render_flm(&set_of(pts), 512).unwrap();
        let white: Vec<(u32, u32)> = flm
            .image
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0[0] == 255)
            .map(|(x, y, _)| (x, y))
            .collect();
        assert_eq!(white.len(), 13);
        for (x, y) in white {
            let dx = x as i64 - 256;
            let dy = y as i64 - 256;
            assert!(dx * dx + dy * dy <= 4);
        }
        assert!(flm.image.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }

    #[test]
    fn render_flm_merges_close_discs() {
        let mut pts = vec![(100.0, 100.0), (101.0, 100.0)];
        pts.extend(std::iter::repeat((100.0, 100.0)).take(68));
        let flm = render_flm(&set_of(pts), 512).unwrap();
        // merged blob: strictly fewer white pixels than two separate discs
        let white = flm.image.pixels().filter(|p| p.0[0] == 255).count();
        assert!(white > 13 && white < 26);
    }

    #[test]
    fn render_flm_is_deterministic() {
        let pts = spread_70(20.0, 30.0, 480.0, 470.0);
        let a = render_flm(&set_of(pts.clone()), 512).unwrap();
        let b = render_flm(&set_of(pts), 512).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
    }

    #[test]
    fn render_flm_white_count_bounded_by_disc_union() {
        let mut state = 7u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let pts: Vec<(f64, f64)> = (0..70).map(|_| (rnd() * 500.0, rnd() * 500.0)).collect();
        let flm = render_flm(&set_of(pts.clone()), 512).unwrap();
        let white = flm.image.pixels().filter(|p| p.0[0] == 255).count();
        assert!(white <= 70 * 13);
        // disc-union counting oracle
        let mut union = std::collections::HashSet::new();
        for &(x, y) in &pts {
            for py in 0..512u32 {
                for px in 0..512u32 {
                    let dx = px as f64 - x;
                    let dy = py as f64 - y;
                    if dx * dx + dy * dy <= 4.0 {
                        union.insert((px, py));
                    }
                }
            }
        }
        assert_eq!(white, union.len());
    }

    #[test]
    fn render_flm_rejects_out_of_range() {
        let mut pts = vec![(512.0, 10.0)];
        pts.extend(std::iter::repeat((10.0, 10.0)).take(69));
        assert!(render_flm(&set_of(pts), 512).is_err());
    }

    #[test]
    fn pupil_dark_disc_on_light_background() {
        let patch = GrayImage::from_fn(31, 31, |x, y| {
            let dx = x as f64 - 17.0;
            let dy = y as f64 - 13.0;
            Luma([if dx * dx + dy * dy <= 25.0 { 20 } else { 230 }])
        });
        let est = locate_pupil(&patch);
        assert!(!est.low_confidence);
        assert!((est.x - 17.0).abs() <= 1.0 && (est.y - 13.0).abs() <= 1.0);
    }

    #[test]
    fn pupil_concentric_circles_share_center() {
        let patch = GrayImage::from_fn(41, 41, |x, y| {
            let dx = x as f64 - 20.0;
            let dy = y as f64 - 20.0;
            let r = (dx * dx + dy * dy).sqrt();
            Luma([if r <= 5.0 || (r >= 10.0 && r <= 13.0) { 15 } else { 240 }])
        });
        let est = locate_pupil(&patch);
        assert!((est.x - 20.0).abs() <= 1.0 && (est.y - 20.0).abs() <= 1.0);
    }

    #[test]
    fn pupil_constant_patch_falls_back_to_centroid() {
        let patch = GrayImage::from_pixel(21, 15, Luma([128]));
        let est = locate_pupil(&patch);
        assert!(est.low_confidence);
        assert_eq!((est.x, est.y), (10.0, 7.0));
    }

    #[test]
    fn pupil_returned_center_maximizes_objective() {
        let patch = GrayImage::from_fn(25, 25, |x, y| {
            let dx = x as f64 - 11.0;
            let dy = y as f64 - 14.0;
            Luma([if dx * dx + dy * dy <= 16.0 { 30 } else { 210 }])
        });
        let est = locate_pupil(&patch);
        let best = pupil_objective(&patch, est.x as usize, est.y as usize);
        for cy in 0..25 {
            for cx in 0..25 {
                assert!(
                    pupil_objective(&patch, cx, cy) <= best + 1e-9,
                    "objective at ({cx},{cy}) beats returned center"
                );
            }
        }
    }

    #[test]
    fn detect_fills_pupils_and_keeps_backend_points() {
        let mut pts = spread_70(40.0, 40.0, 160.0, 160.0);
        pts.truncate(68);
        // plausible eye contours
        for (i, p) in pts.iter_mut().enumerate() {
            if LEFT_EYE.contains(&i) {
                *p = (60.0 + (i - 36) as f64 * 3.0, 80.0 + ((i - 36) % 2) as f64 * 4.0);
            }
            if RIGHT_EYE.contains(&i) {
                *p = (120.0 + (i - 42) as f64 * 3.0, 80.0 + ((i - 42) % 2) as f64 * 4.0);
            }
        }
        let mut backend = MapBackend::default();
        backend.points.insert(5, pts.clone());
        let color = RgbImage::from_pixel(200, 200, image::Rgb([200, 180, 170]));
        let lms = detect_landmarks(&color, 5, &backend).unwrap();
        assert_eq!(lms.points.len(), 70);
        for (got, want) in lms.points.iter().zip(&pts) {
            assert_eq!(got, want); // stub passthrough for the 68
        }
    }

    #[test]
    fn detect_rejects_missing_face() {
        let backend = MapBackend::default();
        let color = RgbImage::new(64, 64);
        match detect_landmarks(&color, 1, &backend) {
            Err(PipelineError::NoFace { frame_id }) => assert_eq!(frame_id, 1),
            other => panic!("expected NoFace, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn crop_resize_identity() {
        let color = RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 4) as u8, (y * 4) as u8, 9]));
        let depth = GrayImage::from_fn(64, 64, |x, y| Luma([((x + y) % 256) as u8]));
        let frame = RgbdFrame::new(color.clone(), depth.clone(), Default::default()).unwrap();
        let rect = CropRect { x0: 0, y0: 0, x1: 64, y1: 64 };
        let out = crop_resize(&frame, rect, 64).unwrap();
        assert_eq!(out.color.as_raw(), color.as_raw());
        assert_eq!(out.depth8.as_raw(), depth.as_raw());
    }

    #[test]
    fn crop_resize_midpoint_upscale() {
        let rect = CropRect { x0: 10, y0: 20, x1: 266, y1: 276 };
        let (x, y) = crop_to_out(rect, 512, 10.0 + 128.0, 20.0 + 128.0);
        assert_eq!((x, y), (256.0, 256.0));
    }

    #[test]
    fn landmark_affine_roundtrip() {
        let rect = CropRect { x0: 37, y0: 81, x1: 337, y1: 381 };
        for &(x, y) in &[(37.5, 81.5), (100.0, 200.0), (336.9, 380.9)] {
            let (ox, oy) = crop_to_out(rect, 512, x, y);
            let (bx, by) = out_to_crop(rect, 512, ox, oy);
            assert!((bx - x).abs() < 1e-6 && (by - y).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_resize_never_invents_depth() {
        // sentinel pixels stay 0 through nearest-neighbor resampling
        let color = RgbImage::new(32, 32);
        let depth = GrayImage::from_fn(32, 32, |x, _| Luma([if x < 16 { 0 } else { 200 }]));
        let frame = RgbdFrame::new(color, depth, Default::default()).unwrap();
        let rect = CropRect { x0: 0, y0: 0, x1: 32, y1: 32 };
        let out = crop_resize(&frame, rect, 128).unwrap();
        for p in out.depth8.pixels() {
            assert!(p.0[0] == 0 || p.0[0] == 200);
        }
    }

    #[test]
    fn jittered_backend_discs_still_contain_truth() {
        // jitter each landmark by up to 2 px (uniform in the disc) and
        // render with radius-2 discs: every true integer landmark pixel
        // stays white
        let truth: Vec<(f64, f64)> = (0..70)
            .map(|i| (20.0 + (i % 10) as f64 * 45.0, 20.0 + (i / 10) as f64 * 60.0))
            .collect();
        let mut state = 0xFEEDu64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for _round in 0..20 {
            let jittered: Vec<(f64, f64)> = truth
                .iter()
                .map(|&(x, y)| {
                    let ang = rnd() * std::f64::consts::TAU;
                    let rad = rnd().sqrt() * 2.0;
                    (x + rad * ang.cos(), y + rad * ang.sin())
                })
                .collect();
            let flm = render_flm(&set_of(jittered), 512).unwrap();
            for &(x, y) in &truth {
                assert_eq!(
                    flm.image.get_pixel(x as u32, y as u32).0[0],
                    255,
                    "true landmark ({x},{y}) left uncovered"
                );
            }
        }
    }
}
