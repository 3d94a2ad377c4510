//! Synthetic face-like datasets for tests, toy runs and demos: a smooth
//! head blob with eyes and a mouth whose openness varies per frame, a
//! matching depth bump, and geometrically placed 68-point annotations.

use std::path::Path;

use image::{Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, DatasetMeta};
use crate::error::{PipelineError, Result};
use crate::imgutil::{save_gray16, save_rgb, Gray16Image};
use crate::landmarks::landmark_text;
use crate::preprocess::DepthWindow;

/// Scene parameters of one synthetic frame.
#[derive(Clone, Copy, Debug)]
pub struct FacePose {
    pub center_x: f64,
    pub center_y: f64,
    pub rx: f64,
    pub ry: f64,
    /// 0 = closed, 1 = wide open.
    pub mouth_open: f64,
    pub brow_raise: f64,
}

impl FacePose {
    fn sample(size: f64, rng: &mut ChaCha8Rng) -> Self {
        FacePose {
            center_x: size * (0.5 + rng.gen_range(-0.04..0.04)),
            center_y: size * (0.52 + rng.gen_range(-0.04..0.04)),
            rx: size * (0.27 + rng.gen_range(-0.02..0.02)),
            ry: size * (0.34 + rng.gen_range(-0.02..0.02)),
            mouth_open: rng.gen_range(0.0..1.0),
            brow_raise: rng.gen_range(-1.0..1.0),
        }
    }
}

/// 68 Multi-PIE-ordered landmarks for a pose: jaw 0-16, brows 17-26, nose
/// 27-35, eyes 36-47, mouth 48-67.
pub fn face_landmarks(pose: &FacePose) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(68);
    let (cx, cy, rx, ry) = (pose.center_x, pose.center_y, pose.rx, pose.ry);
    // jaw: lower half ellipse, left to right
    for i in 0..17 {
        let t = i as f64 / 16.0;
        let ang = std::f64::consts::PI * (1.0 - t);
        pts.push((cx + rx * ang.cos(), cy + ry * 0.95 * ang.sin()));
    }
    // brows
    let brow_y = cy - ry * (0.45 + 0.06 * pose.brow_raise);
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push((cx - rx * 0.65 + rx * 0.45 * t, brow_y - rx * 0.08 * (t * (1.0 - t)) * 4.0));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push((cx + rx * 0.2 + rx * 0.45 * t, brow_y - rx * 0.08 * (t * (1.0 - t)) * 4.0));
    }
    // nose bridge + nostrils
    for i in 0..4 {
        pts.push((cx, cy - ry * 0.25 + ry * 0.12 * i as f64));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0 - 0.5;
        pts.push((cx + rx * 0.18 * t, cy + ry * 0.18));
    }
    // eyes: 6 points each
    let eye_y = cy - ry * 0.22;
    for side in [-1.0f64, 1.0] {
        let ex = cx + side * rx * 0.42;
        let er = rx * 0.16;
        for i in 0..6 {
            let ang = std::f64::consts::TAU * i as f64 / 6.0;
            pts.push((ex + er * ang.cos(), eye_y + er * 0.55 * ang.sin()));
        }
    }
    // mouth: outer ring 48-59, inner 60-67
    let mouth_y = cy + ry * 0.5;
    let open = ry * 0.05 + ry * 0.12 * pose.mouth_open;
    for i in 0..12 {
        let ang = std::f64::consts::TAU * i as f64 / 12.0;
        pts.push((cx + rx * 0.32 * ang.cos(), mouth_y + open * ang.sin()));
    }
    for i in 0..8 {
        let ang = std::f64::consts::TAU * i as f64 / 8.0;
        pts.push((cx + rx * 0.2 * ang.cos(), mouth_y + open * 0.6 * ang.sin()));
    }
    debug_assert_eq!(pts.len(), 68);
    pts
}

/// Paint the synthetic color image for a pose.
pub fn face_color(pose: &FacePose, size: u32) -> RgbImage {
    let lms = face_landmarks(pose);
    RgbImage::from_fn(size, size, |x, y| {
        let fx = x as f64;
        let fy = y as f64;
        let dx = (fx - pose.center_x) / pose.rx;
        let dy = (fy - pose.center_y) / pose.ry;
        let r2 = dx * dx + dy * dy;
        if r2 > 1.0 {
            // background gradient
            return Rgb([20, (30 + (fy * 0.2) as u32 % 40) as u8, 55]);
        }
        // skin shading
        let shade = 1.0 - 0.35 * r2;
        let mut px = [
            (205.0 * shade) as u8,
            (160.0 * shade) as u8,
            (135.0 * shade) as u8,
        ];
        // darken near eyes and mouth landmarks
        for range in [36..48usize, 48..68] {
            for &(lx, ly) in &lms[range.clone()] {
                let d2 = (fx - lx) * (fx - lx) + (fy - ly) * (fy - ly);
                if d2 < (pose.rx * 0.07) * (pose.rx * 0.07) {
                    px = if range.start == 36 {
                        [40, 35, 60]
                    } else {
                        [120, 40, 50]
                    };
                }
            }
        }
        Rgb(px)
    })
}

/// Synthetic 16-bit depth: background far outside the window, a rounded
/// head surface inside it.
pub fn face_depth16(pose: &FacePose, size: u32, window: DepthWindow) -> Gray16Image {
    let near = window.near_mm as f64;
    Gray16Image::from_fn(size, size, |x, y| {
        let dx = (x as f64 - pose.center_x) / pose.rx;
        let dy = (y as f64 - pose.center_y) / pose.ry;
        let r2 = dx * dx + dy * dy;
        if r2 > 1.0 {
            return Luma([(near as u32 + 2000) as u16]); // clipped background
        }
        // spherical cap: nose closest
        let bulge = (1.0 - r2).sqrt();
        let depth = near + 180.0 - 120.0 * bulge + 6.0 * pose.mouth_open;
        Luma([depth.round() as u16])
    })
}

/// Write a raw synthetic dataset (color, depth16, 68-point annotations).
pub fn write_raw_dataset(
    root: &Path,
    frames: usize,
    raw_size: u32,
    window: DepthWindow,
    seed: u64,
) -> Result<Vec<u64>> {
    let raw = dataset::raw_dir(root);
    std::fs::create_dir_all(&raw).map_err(|e| PipelineError::io(&raw, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(frames);
    for i in 0..frames {
        let id = i as u64 + 1;
        let pose = FacePose::sample(raw_size as f64, &mut rng);
        save_rgb(&raw.join(dataset::color_name(id)), &face_color(&pose, raw_size))?;
        save_gray16(
            &raw.join(dataset::depth16_name(id)),
            &face_depth16(&pose, raw_size, window),
        )?;
        let lms = face_landmarks(&pose);
        let path = raw.join(dataset::lms_name(id));
        std::fs::write(&path, landmark_text(&lms)).map_err(|e| PipelineError::io(&path, e))?;
        ids.push(id);
    }
    DatasetMeta {
        window,
        calib: None,
        landmarks_done: false,
    }
    .save(root)?;
    Ok(ids)
}

/// Write a training-ready toy dataset directly (processed + flm dirs at
/// `image_size`), skipping the preprocess/landmark stages. Used by unit
/// tests that only need loadable samples.
pub fn write_toy_dataset(root: &Path, frames: usize, image_size: u32, seed: u64) -> Result<Vec<u64>> {
    let window = DepthWindow::default();
    let proc = dataset::processed_dir(root);
    let flm = dataset::flm_dir(root);
    std::fs::create_dir_all(&proc).map_err(|e| PipelineError::io(&proc, e))?;
    std::fs::create_dir_all(&flm).map_err(|e| PipelineError::io(&flm, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(frames);
    for i in 0..frames {
        let id = i as u64 + 1;
        let pose = FacePose::sample(image_size as f64, &mut rng);
        let color = face_color(&pose, image_size);
        let depth16 = face_depth16(&pose, image_size, window);
        let depth8 = crate::preprocess::clip_and_quantize_depth(&depth16, window);
        save_rgb(&proc.join(dataset::color_name(id)), &color)?;
        save_gray16(&proc.join(dataset::depth16_name(id)), &depth16)?;
        crate::imgutil::save_gray(&proc.join(dataset::depth8_name(id)), &depth8)?;
        // render the FLM from the full 70-point set (pupils at eye centers)
        let mut pts = face_landmarks(&pose);
        let eye_y = pose.center_y - pose.ry * 0.22;
        pts.push((pose.center_x - pose.rx * 0.42, eye_y));
        pts.push((pose.center_x + pose.rx * 0.42, eye_y));
        let set = crate::landmarks::LandmarkSet::new(pts, id)?;
        let map = crate::landmarks::render_flm(&set, image_size)?;
        crate::imgutil::save_gray(&flm.join(dataset::flm_name(id)), &map.image)?;
        let path = flm.join(dataset::lms_name(id));
        std::fs::write(&path, landmark_text(&set.points)).map_err(|e| PipelineError::io(&path, e))?;
        ids.push(id);
    }
    DatasetMeta {
        window,
        calib: None,
        landmarks_done: true,
    }
    .save(root)?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks_are_68_and_inside_face_box() {
        let pose = FacePose {
            center_x: 64.0,
            center_y: 66.0,
            rx: 34.0,
            ry: 43.0,
            mouth_open: 0.5,
            brow_raise: 0.0,
        };
        let pts = face_landmarks(&pose);
        assert_eq!(pts.len(), 68);
        for &(x, y) in &pts {
            assert!(x > 0.0 && y > 0.0 && x < 128.0 && y < 128.0);
        }
    }

    #[test]
    fn toy_dataset_loads_as_training_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ids = write_toy_dataset(dir.path(), 3, 32, 7).unwrap();
        assert_eq!(ids, vec![1, 2, 3]);
        let samples = crate::dataset::load_training_samples(dir.path(), 32).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].flm.dims(), &[1, 32, 32]);
        assert_eq!(samples[0].target.dims(), &[4, 32, 32]);
        // FLMs differ across frames (expressions move)
        assert_ne!(samples[0].flm.data(), samples[1].flm.data());
    }

    #[test]
    fn depth_bump_lands_inside_window() {
        let window = DepthWindow::default();
        let pose = FacePose {
            center_x: 32.0,
            center_y: 32.0,
            rx: 20.0,
            ry: 24.0,
            mouth_open: 0.0,
            brow_raise: 0.0,
        };
        let d16 = face_depth16(&pose, 64, window);
        let d8 = crate::preprocess::clip_and_quantize_depth(&d16, window);
        let valid = d8.pixels().filter(|p| p.0[0] != 0).count();
        assert!(valid > 500, "face area should survive the window");
    }
}
