//! Quantitative evaluation: Gaussian-windowed SSIM with per-pixel maps,
//! perceptual distance, millimeter depth-error maps, depth-derived face
//! masks with erosion, per-frame records with best/worst flags and the
//! side-by-side figure grid.

use std::path::Path;

use facegan_nn::parallel::map_indexed;
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::EvalFrame;
use crate::error::{PipelineError, Result};
use crate::imgutil::{gray_to_rgb, hstack, to_gray};
use crate::model::Lpips;
use crate::pointcloud::{backproject, render_turntable, CameraIntrinsics};
use crate::preprocess::{normalize_color, DepthWindow, RgbdFrame};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Panel names of the per-frame figure, in column order.
pub const FIGURE_COLUMNS: [&str; 7] = [
    "flm",
    "generated",
    "ground_truth",
    "ssim_map",
    "depth_error",
    "turntable_30",
    "turntable_90",
];

/// Windowed SSIM result: mean over valid window centers plus the per-center
/// map (dimensions shrink by the window size minus one).
#[derive(Clone, Debug)]
pub struct SsimResult {
    pub mean: f64,
    pub map_w: usize,
    pub map_h: usize,
    pub map: Vec<f64>,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for (i, slot) in k.iter_mut().enumerate() {
        let d = i as isize - half;
        *slot = (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *slot;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian-weighted local sums over valid centers only.
/// Input planes are row-major `w x h`; the output is `(w-10) x (h-10)`.
fn windowed_means(planes: &[&[f64]], w: usize, h: usize) -> Vec<Vec<f64>> {
    let k = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let out_w = w - 2 * half;
    let out_h = h - 2 * half;
    planes
        .iter()
        .map(|plane| {
            // horizontal pass: rows full height, columns valid only
            let horiz: Vec<f64> = map_indexed(h * out_w, |i| {
                let y = i / out_w;
                let x = i % out_w;
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * plane[y * w + x + j];
                }
                acc
            });
            // vertical pass on valid rows
            map_indexed(out_h * out_w, |i| {
                let y = i / out_w;
                let x = i % out_w;
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * horiz[(y + j) * out_w + x];
                }
                acc
            })
        })
        .collect()
}

/// Windowed SSIM between two grayscale images (8-bit range constants).
pub fn ssim_gray(a: &GrayImage, b: &GrayImage) -> Result<SsimResult> {
    if a.dimensions() != b.dimensions() {
        return Err(PipelineError::Contract(format!(
            "ssim dimensions differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(PipelineError::Contract(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let pa: Vec<f64> = a.as_raw().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.as_raw().iter().map(|&v| v as f64).collect();
    let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
    let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
    let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
    let sums = windowed_means(&[&pa, &pb, &paa, &pbb, &pab], w, h);
    let (mu_a, mu_b, e_aa, e_bb, e_ab) = (&sums[0], &sums[1], &sums[2], &sums[3], &sums[4]);
    let out_w = w - (SSIM_WINDOW - 1);
    let out_h = h - (SSIM_WINDOW - 1);
    let map: Vec<f64> = map_indexed(out_w * out_h, |i| {
        ssim_from_stats(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i])
    });
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    Ok(SsimResult {
        mean,
        map_w: out_w,
        map_h: out_h,
        map,
    })
}

/// SSIM core: local weighted moments in, similarity out. The doubled
/// cross terms are computed as `2.0 * (a * b)` so identical inputs yield
/// exactly 1.0.
pub fn ssim_from_stats(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    let num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    num / den
}

/// SSIM on the luma conversion of two RGB images.
pub fn ssim_rgb(a: &RgbImage, b: &RgbImage) -> Result<SsimResult> {
    ssim_gray(&to_gray(a), &to_gray(b))
}

/// Render an SSIM map as the darkness visualization: 255 * (1 - s),
/// clamped to the code range, padded back to the source size.
pub fn ssim_map_image(res: &SsimResult, full_w: u32, full_h: u32) -> GrayImage {
    let half = (SSIM_WINDOW / 2) as u32;
    let mut img = GrayImage::new(full_w, full_h);
    for y in 0..res.map_h {
        for x in 0..res.map_w {
            let s = res.map[y * res.map_w + x];
            let v = (255.0 * (1.0 - s)).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32 + half, y as u32 + half, image::Luma([v]));
        }
    }
    img
}

/// Binary face mask: nonzero depth codes eroded by a disc of `radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMask {
    pub mask: GrayImage,
}

pub fn face_mask(depth8: &GrayImage, erosion_radius: u32) -> FaceMask {
    let (w, h) = depth8.dimensions();
    let r = erosion_radius as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    let src = depth8.as_raw();
    let data: Vec<u8> = map_indexed((w * h) as usize, |i| {
        let x = (i % w as usize) as i64;
        let y = (i / w as usize) as i64;
        for &(dx, dy) in &offsets {
            let (qx, qy) = (x + dx, y + dy);
            if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                return 0;
            }
            if src[(qy * w as i64 + qx) as usize] == 0 {
                return 0;
            }
        }
        255
    });
    FaceMask {
        mask: GrayImage::from_raw(w, h, data).expect("sized buffer"),
    }
}

/// Millimeter depth error over the intersection of valid codes.
#[derive(Clone, Debug)]
pub struct DepthError {
    /// Per-pixel |gen - gt| in mm; `None` outside the common support.
    pub map_mm: Vec<Option<f64>>,
    pub width: u32,
    pub height: u32,
    pub mae_mm: f64,
    pub frac_below_4mm: f64,
    pub support: usize,
}

pub fn depth_error_map(
    gen_depth8: &GrayImage,
    gt_depth8: &GrayImage,
    window: DepthWindow,
) -> Result<DepthError> {
    window.validate()?;
    if gen_depth8.dimensions() != gt_depth8.dimensions() {
        return Err(PipelineError::Contract(
            "depth error: dimension mismatch".into(),
        ));
    }
    let (w, h) = gen_depth8.dimensions();
    let gen = gen_depth8.as_raw();
    let gt = gt_depth8.as_raw();
    let mut map = Vec::with_capacity(gen.len());
    let mut sum = 0.0;
    let mut below = 0usize;
    let mut support = 0usize;
    for (g, t) in gen.iter().zip(gt) {
        if *g == 0 || *t == 0 {
            map.push(None);
            continue;
        }
        // same window on both sides: code difference is millimeters
        let err = (*g as f64 - *t as f64).abs();
        sum += err;
        support += 1;
        if err < 4.0 {
            below += 1;
        }
        map.push(Some(err));
    }
    if support == 0 {
        return Err(PipelineError::Validation(
            "disjoint valid depth supports".into(),
        ));
    }
    Ok(DepthError {
        map_mm: map,
        width: w,
        height: h,
        mae_mm: sum / support as f64,
        frac_below_4mm: below as f64 / support as f64,
        support,
    })
}

/// Depth error restricted to a mask.
pub fn masked_depth_mae(err: &DepthError, mask: &FaceMask) -> Option<f64> {
    let m = mask.mask.as_raw();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, keep) in err.map_mm.iter().zip(m) {
        if *keep == 255 {
            if let Some(e) = e {
                sum += e;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// SSIM restricted to windows fully inside the mask.
pub fn masked_ssim(res: &SsimResult, mask: &FaceMask) -> Option<f64> {
    let w = mask.mask.width() as usize;
    let m = mask.mask.as_raw();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..res.map_h {
        for x in 0..res.map_w {
            let mut inside = true;
            'win: for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    if m[(y + dy) * w + (x + dx)] != 255 {
                        inside = false;
                        break 'win;
                    }
                }
            }
            if inside {
                sum += res.map[y * res.map_w + x];
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Render a depth-error map (scale: 8 mm saturates to white).
pub fn depth_error_image(err: &DepthError) -> GrayImage {
    let data: Vec<u8> = err
        .map_mm
        .iter()
        .map(|e| match e {
            Some(mm) => (255.0 * (mm / 8.0).min(1.0)).round() as u8,
            None => 0,
        })
        .collect();
    GrayImage::from_raw(err.width, err.height, data).expect("sized buffer")
}

/// Anything that can produce an RGBD frame for a landmark map.
pub trait Synthesizer {
    fn synthesize_frame(&self, frame_id: u64, flm: &GrayImage) -> Result<RgbdFrame>;
}

impl Synthesizer for crate::infer::InferenceSession {
    fn synthesize_frame(&self, _frame_id: u64, flm: &GrayImage) -> Result<RgbdFrame> {
        self.synthesize(flm)
    }
}

/// Per-frame evaluation record (one JSONL line).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub frame_id: u64,
    pub ssim: f64,
    pub ssim_masked: Option<f64>,
    pub lpips: f64,
    pub depth_mae_mm: f64,
    pub depth_mae_masked_mm: Option<f64>,
    pub depth_below_4mm_frac: f64,
    pub best_ssim: bool,
    pub worst_ssim: bool,
    pub best_lpips: bool,
    pub worst_lpips: bool,
    /// Set when a frame failed to evaluate (disjoint depth supports etc).
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub mean_ssim: f64,
    pub mean_ssim_masked: Option<f64>,
    pub mean_lpips: f64,
    pub mean_depth_mae_mm: f64,
    pub mean_depth_below_4mm_frac: f64,
    pub best_ssim_frame: u64,
    pub worst_ssim_frame: u64,
    pub best_lpips_frame: u64,
    pub worst_lpips_frame: u64,
    pub jpeg_equivalent_quality: Option<f64>,
    pub figure_columns: Vec<String>,
}

pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

pub struct EvalContext<'a> {
    pub lpips: &'a Lpips,
    pub window: DepthWindow,
    pub erosion_radius: u32,
    pub jpeg_equivalence: bool,
}

/// Evaluate a held-out set frame by frame and aggregate the summary.
pub fn evaluate_dataset(
    frames: &[EvalFrame],
    synth: &dyn Synthesizer,
    ctx: &EvalContext<'_>,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(PipelineError::Validation("empty evaluation set".into()));
    }
    // visit frames in id order so records and summaries are deterministic
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frames[i].frame_id);
    let mut records = Vec::with_capacity(frames.len());
    for &idx in &order {
        let frame = &frames[idx];
        let gen = synth.synthesize_frame(frame.frame_id, &frame.flm)?;
        let ssim = ssim_rgb(&gen.color, &frame.gt_color)?;
        let lp = ctx.lpips.distance(
            normalize_color(&gen.color).tensor(),
            normalize_color(&frame.gt_color).tensor(),
        )?;
        let mask = face_mask(&frame.gt_depth8, ctx.erosion_radius);
        let (depth_mae, depth_masked, below4, err_note) =
            match depth_error_map(&gen.depth8, &frame.gt_depth8, ctx.window) {
                Ok(err) => {
                    let masked = masked_depth_mae(&err, &mask);
                    (err.mae_mm, masked, err.frac_below_4mm, None)
                }
                Err(e) => (f64::NAN, None, f64::NAN, Some(e.to_string())),
            };
        records.push(EvalRecord {
            frame_id: frame.frame_id,
            ssim: ssim.mean,
            ssim_masked: masked_ssim(&ssim, &mask),
            lpips: lp,
            depth_mae_mm: depth_mae,
            depth_mae_masked_mm: depth_masked,
            depth_below_4mm_frac: below4,
            best_ssim: false,
            worst_ssim: false,
            best_lpips: false,
            worst_lpips: false,
            error: err_note,
        });
    }

    let arg_best = |records: &[EvalRecord], f: fn(&EvalRecord) -> f64, invert: bool| -> usize {
        let mut best = 0;
        for (i, r) in records.iter().enumerate() {
            let (a, b) = (f(r), f(&records[best]));
            if a.is_nan() {
                continue;
            }
            if b.is_nan() || (invert && a < b) || (!invert && a > b) {
                best = i;
            }
        }
        best
    };
    let bi_ssim = arg_best(&records, |r| r.ssim, false);
    let wi_ssim = arg_best(&records, |r| r.ssim, true);
    let bi_lp = arg_best(&records, |r| r.lpips, true);
    let wi_lp = arg_best(&records, |r| r.lpips, false);
    records[bi_ssim].best_ssim = true;
    records[wi_ssim].worst_ssim = true;
    records[bi_lp].best_lpips = true;
    records[wi_lp].worst_lpips = true;

    let n = records.len() as f64;
    let masked: Vec<f64> = records.iter().filter_map(|r| r.ssim_masked).collect();
    let jpeg_equivalent_quality = if ctx.jpeg_equivalence {
        let mut qs = Vec::new();
        for (&idx, rec) in order.iter().zip(&records) {
            if let Some(q) = jpeg_equivalent_quality(&frames[idx].gt_color, rec.ssim)? {
                qs.push(q as f64);
            }
        }
        (!qs.is_empty()).then(|| qs.iter().sum::<f64>() / qs.len() as f64)
    } else {
        None
    };
    // frames whose depth comparison failed are excluded from depth means
    let depth_ok: Vec<&EvalRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let nd = depth_ok.len().max(1) as f64;
    let summary = EvalSummary {
        frames: records.len(),
        mean_ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_ssim_masked: (!masked.is_empty())
            .then(|| masked.iter().sum::<f64>() / masked.len() as f64),
        mean_lpips: records.iter().map(|r| r.lpips).sum::<f64>() / n,
        mean_depth_mae_mm: depth_ok.iter().map(|r| r.depth_mae_mm).sum::<f64>() / nd,
        mean_depth_below_4mm_frac: depth_ok.iter().map(|r| r.depth_below_4mm_frac).sum::<f64>()
            / nd,
        best_ssim_frame: records[bi_ssim].frame_id,
        worst_ssim_frame: records[wi_ssim].frame_id,
        best_lpips_frame: records[bi_lp].frame_id,
        worst_lpips_frame: records[wi_lp].frame_id,
        jpeg_equivalent_quality,
        figure_columns: FIGURE_COLUMNS.iter().map(|s| s.to_string()).collect(),
    };
    Ok(EvalReport { records, summary })
}

/// Smallest JPEG quality whose SSIM against the ground truth reaches the
/// generated image's SSIM. Quality sweep, coarse-to-fine.
pub fn jpeg_equivalent_quality(gt: &RgbImage, target_ssim: f64) -> Result<Option<u8>> {
    if !(0.0..=1.0).contains(&target_ssim) {
        return Ok(None);
    }
    let ssim_at = |q: u8| -> Result<f64> {
        let mut buf = Vec::new();
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, q);
        enc.encode_image(gt)
            .map_err(|e| PipelineError::Other(format!("jpeg encode: {e}")))?;
        let decoded = image::load_from_memory(&buf)
            .map_err(|e| PipelineError::Other(format!("jpeg decode: {e}")))?
            .to_rgb8();
        Ok(ssim_rgb(&decoded, gt)?.mean)
    };
    let mut lo = 1u8;
    let mut hi = 100u8;
    if ssim_at(hi)? < target_ssim {
        return Ok(None); // even quality 100 cannot reach it
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ssim_at(mid)? >= target_ssim {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(lo))
}

/// Build the per-frame figure: FLM | generated | ground truth | SSIM map |
/// depth error | turntable 30 | turntable 90.
pub fn render_eval_figure(
    frame: &EvalFrame,
    gen: &RgbdFrame,
    window: DepthWindow,
    intr: Option<CameraIntrinsics>,
) -> Result<RgbImage> {
    let (w, h) = frame.gt_color.dimensions();
    let ssim = ssim_rgb(&gen.color, &frame.gt_color)?;
    let ssim_img = ssim_map_image(&ssim, w, h);
    let depth_img = match depth_error_map(&gen.depth8, &frame.gt_depth8, window) {
        Ok(err) => depth_error_image(&err),
        Err(_) => GrayImage::new(w, h),
    };
    let intr = intr.unwrap_or_else(|| CameraIntrinsics::synthetic(w, h));
    let cloud = backproject(gen, &intr, window)?;
    let t30 = render_turntable(&cloud, 30.0, w)?;
    let t90 = render_turntable(&cloud, 90.0, w)?;
    Ok(hstack(&[
        gray_to_rgb(&frame.flm),
        gen.color.clone(),
        frame.gt_color.clone(),
        gray_to_rgb(&ssim_img),
        gray_to_rgb(&depth_img),
        t30,
        t90,
    ]))
}

/// Write records as JSONL plus the summary as pretty JSON.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(
            &serde_json::to_string(r)
                .map_err(|e| PipelineError::Other(format!("record serialization: {e}")))?,
        );
        lines.push('\n');
    }
    let records_path = dir.join("records.jsonl");
    std::fs::write(&records_path, lines).map_err(|e| PipelineError::io(&records_path, e))?;
    let summary_path = dir.join("summary.json");
    let summary = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| PipelineError::Other(format!("summary serialization: {e}")))?;
    std::fs::write(&summary_path, summary).map_err(|e| PipelineError::io(&summary_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn noisy(seed: u64, w: u32, h: u32) -> GrayImage {
        let mut state = seed;
        GrayImage::from_fn(w, h, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            Luma([(state >> 56) as u8])
        })
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let img = noisy(5, 32, 24);
        let res = ssim_gray(&img, &img).unwrap();
        assert_eq!(res.mean, 1.0);
        assert!(res.map.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = GrayImage::from_pixel(24, 24, Luma([0]));
        let b = GrayImage::from_pixel(24, 24, Luma([255]));
        let res = ssim_gray(&a, &b).unwrap();
        let expected = SSIM_C1 / (255.0 * 255.0 + SSIM_C1);
        assert!(
            (res.mean - expected).abs() < 1e-10,
            "{} vs {expected}",
            res.mean
        );
    }

    /// Brute-force per-window oracle with explicit double loops.
    fn ssim_oracle(a: &GrayImage, b: &GrayImage) -> f64 {
        let k = gaussian_kernel();
        let (w, h) = (a.width() as usize, a.height() as usize);
        let half = SSIM_WINDOW / 2;
        let mut total = 0.0;
        let mut count = 0usize;
        for cy in half..h - half {
            for cx in half..w - half {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut e_aa = 0.0;
                let mut e_bb = 0.0;
                let mut e_ab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy] * k[dx];
                        let pa = a.get_pixel((cx + dx - half) as u32, (cy + dy - half) as u32).0[0] as f64;
                        let pb = b.get_pixel((cx + dx - half) as u32, (cy + dy - half) as u32).0[0] as f64;
                        mu_a += wgt * pa;
                        mu_b += wgt * pb;
                        e_aa += wgt * pa * pa;
                        e_bb += wgt * pb * pb;
                        e_ab += wgt * pa * pb;
                    }
                }
                let var_a = e_aa - mu_a * mu_a;
                let var_b = e_bb - mu_b * mu_b;
                let cov = e_ab - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_scalar_oracle() {
        for seed in 0..6 {
            let a = noisy(seed * 2 + 1, 24, 20);
            let b = noisy(seed * 2 + 2, 24, 20);
            let fast = ssim_gray(&a, &b).unwrap().mean;
            let slow = ssim_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-8, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_symmetric_and_in_range() {
        let a = noisy(11, 20, 20);
        let b = noisy(12, 20, 20);
        let ab = ssim_gray(&a, &b).unwrap().mean;
        let ba = ssim_gray(&b, &a).unwrap().mean;
        assert_eq!(ab, ba);
        assert!((-1.0..=1.0).contains(&ab));
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_rejects_mismatched_dims() {
        let a = GrayImage::new(32, 32);
        let b = GrayImage::new(16, 32);
        assert!(ssim_gray(&a, &b).is_err());
    }

    #[test]
    fn depth_error_examples() {
        let w = DepthWindow::default();
        let a = GrayImage::from_pixel(8, 8, Luma([100]));
        let err = depth_error_map(&a, &a, w).unwrap();
        assert_eq!(err.mae_mm, 0.0);
        assert_eq!(err.frac_below_4mm, 1.0);

        let b = GrayImage::from_pixel(8, 8, Luma([103]));
        let err = depth_error_map(&b, &a, w).unwrap();
        assert_eq!(err.mae_mm, 3.0);
        assert!(err.map_mm.iter().all(|e| *e == Some(3.0)));
    }

    #[test]
    fn depth_error_random_matches_scalar_oracle() {
        let w = DepthWindow::default();
        let a = noisy(31, 16, 16);
        let b = noisy(32, 16, 16);
        let err = depth_error_map(&a, &b, w).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for (x, y) in a.as_raw().iter().zip(b.as_raw()) {
            if *x != 0 && *y != 0 {
                sum += (*x as f64 - *y as f64).abs();
                n += 1;
            }
        }
        assert_eq!(err.support, n);
        assert!((err.mae_mm - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn depth_error_disjoint_supports_error() {
        let w = DepthWindow::default();
        let a = GrayImage::from_fn(8, 8, |x, _| Luma([if x < 4 { 100 } else { 0 }]));
        let b = GrayImage::from_fn(8, 8, |x, _| Luma([if x >= 4 { 100 } else { 0 }]));
        assert!(matches!(
            depth_error_map(&a, &b, w),
            Err(PipelineError::Validation(_))
        ));
    }

    #[test]
    fn depth_mae_shift_linearity() {
        let w = DepthWindow::default();
        let a = GrayImage::from_fn(12, 12, |x, y| Luma([(40 + x + y) as u8]));
        let shifted = GrayImage::from_fn(12, 12, |x, y| Luma([(40 + x + y + 5) as u8]));
        let err = depth_error_map(&shifted, &a, w).unwrap();
        assert_eq!(err.mae_mm, 5.0);
    }

    #[test]
    fn face_mask_examples() {
        let empty = face_mask(&GrayImage::new(16, 16), 3);
        assert!(empty.mask.pixels().all(|p| p.0[0] == 0));

        let full = face_mask(&GrayImage::from_pixel(16, 16, Luma([50])), 3);
        for (x, y, p) in full.mask.enumerate_pixels() {
            let interior = x >= 3 && y >= 3 && x < 13 && y < 13;
            assert_eq!(p.0[0] == 255, interior, "at ({x},{y})");
        }
    }

    #[test]
    fn face_mask_matches_brute_force_oracle() {
        let blob = GrayImage::from_fn(24, 24, |x, y| {
            let dx = x as f64 - 12.0;
            let dy = y as f64 - 10.0;
            Luma([if dx * dx + dy * dy < 80.0 { 77 } else { 0 }])
        });
        let r = 2u32;
        let got = face_mask(&blob, r);
        for (x, y, p) in got.mask.enumerate_pixels() {
            // independent per-pixel erosion check
            let mut keep = true;
            'outer: for dy in -(r as i64)..=r as i64 {
                for dx in -(r as i64)..=r as i64 {
                    if dx * dx + dy * dy > (r as i64) * (r as i64) {
                        continue;
                    }
                    let qx = x as i64 + dx;
                    let qy = y as i64 + dy;
                    if qx < 0 || qy < 0 || qx >= 24 || qy >= 24 {
                        keep = false;
                        break 'outer;
                    }
                    if blob.get_pixel(qx as u32, qy as u32).0[0] == 0 {
                        keep = false;
                        break 'outer;
                    }
                }
            }
            assert_eq!(p.0[0] == 255, keep, "at ({x},{y})");
        }
    }

    #[test]
    fn mask_monotone_in_radius() {
        let blob = GrayImage::from_fn(20, 20, |x, y| {
            Luma([if x > 2 && y > 2 && x < 18 && y < 16 { 9 } else { 0 }])
        });
        let small = face_mask(&blob, 1);
        let large = face_mask(&blob, 4);
        for (s, l) in small.mask.as_raw().iter().zip(large.mask.as_raw()) {
            if *l == 255 {
                assert_eq!(*s, 255, "larger radius must be a subset");
            }
        }
    }

    #[test]
    fn masked_metrics_ignore_outside_pixels() {
        let w = DepthWindow::default();
        let gt_depth = GrayImage::from_pixel(32, 32, Luma([100]));
        let mask = face_mask(&gt_depth, 3);
        let base = noisy(77, 32, 32);
        // corrupt pixels outside the mask only
        let mut corrupted = base.clone();
        for (x, y, p) in corrupted.enumerate_pixels_mut() {
            if mask.mask.get_pixel(x, y).0[0] == 0 {
                p.0[0] = p.0[0].wrapping_add(91);
            }
        }
        let gt = noisy(78, 32, 32);
        let m1 = masked_ssim(&ssim_gray(&base, &gt).unwrap(), &mask).unwrap();
        let m2 = masked_ssim(&ssim_gray(&corrupted, &gt).unwrap(), &mask).unwrap();
        assert_eq!(m1, m2);

        let d1 = depth_error_map(&base, &gt_depth, w);
        let d2 = depth_error_map(&corrupted, &gt_depth, w);
        if let (Ok(d1), Ok(d2)) = (d1, d2) {
            let a = masked_depth_mae(&d1, &mask);
            let b = masked_depth_mae(&d2, &mask);
            assert_eq!(a, b);
        }
    }
}
