//! Raw RGBD frames to normalized, depth-windowed, contrast-sharpened
//! training images: depth registration onto the color grid, 16-to-8-bit
//! depth windowing (1 mm per code), [-1, 1] normalization and global
//! histogram equalization of the luma channel.

use facegan_nn::parallel::map_indexed;
use facegan_nn::Tensor;
use image::{GrayImage, RgbImage};

use crate::error::{PipelineError, Result};
use crate::imgutil::{luma_u8, Gray16Image};
use crate::pointcloud::CameraIntrinsics;

/// Millimeter depth range kept after clipping. One code = one millimeter.
pub const DEPTH_SPAN_MM: u16 = 255;

/// Depth code reserved for invalid or clipped pixels.
pub const INVALID_DEPTH: u8 = 0;

/// Metric window mapped onto the 8-bit depth codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthWindow {
    pub near_mm: u16,
    pub span_mm: u16,
}

impl Default for DepthWindow {
    fn default() -> Self {
        Self {
            near_mm: 300,
            span_mm: DEPTH_SPAN_MM,
        }
    }
}

impl DepthWindow {
    pub fn new(near_mm: u16) -> Result<Self> {
        let w = Self {
            near_mm,
            span_mm: DEPTH_SPAN_MM,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.span_mm != DEPTH_SPAN_MM {
            return Err(PipelineError::Config(format!(
                "depth window span must be {DEPTH_SPAN_MM} mm, got {}",
                self.span_mm
            )));
        }
        if self.near_mm == 0 {
            return Err(PipelineError::Config("near_mm must be positive".into()));
        }
        Ok(())
    }

    /// Metric depth of a valid 8-bit code.
    pub fn code_to_mm(&self, code: u8) -> Option<u16> {
        (code != INVALID_DEPTH).then(|| self.near_mm + code as u16)
    }
}

/// A captured frame straight from the sensor pair.
#[derive(Clone)]
pub struct RawRgbdFrame {
    pub frame_id: u64,
    pub color: RgbImage,
    pub depth16: Gray16Image,
}

impl RawRgbdFrame {
    pub fn validate(&self) -> Result<()> {
        if self.color.width() == 0 || self.depth16.width() == 0 {
            return Err(PipelineError::Contract("empty raw frame".into()));
        }
        Ok(())
    }
}

/// Color registered to the depth-window codes: the training-image pair.
#[derive(Clone)]
pub struct RgbdFrame {
    pub color: RgbImage,
    pub depth8: GrayImage,
    pub window: DepthWindow,
}

impl RgbdFrame {
    pub fn new(color: RgbImage, depth8: GrayImage, window: DepthWindow) -> Result<Self> {
        if color.dimensions() != depth8.dimensions() {
            return Err(PipelineError::Contract(format!(
                "color {:?} and depth {:?} dimensions differ",
                color.dimensions(),
                depth8.dimensions()
            )));
        }
        Ok(Self {
            color,
            depth8,
            window,
        })
    }
}

/// Multi-channel float image with every value in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage(Tensor);

const NORM_EPS: f64 = 1e-6;

impl NormalizedImage {
    pub fn new(t: Tensor) -> Result<Self> {
        for v in t.iter() {
            if !v.is_finite() || *v < -1.0 - NORM_EPS || *v > 1.0 + NORM_EPS {
                return Err(PipelineError::Contract(format!(
                    "normalized value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Intrinsics of the color/depth sensor pair used for registration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationPair {
    pub color: CameraIntrinsics,
    pub depth: CameraIntrinsics,
}

impl CalibrationPair {
    /// Identity-style calibration for sensors that already share a grid.
    pub fn aligned(width: u32, height: u32) -> Self {
        let intr = CameraIntrinsics::synthetic(width, height);
        Self {
            color: intr,
            depth: intr,
        }
    }
}

/// Resample the raw 16-bit depth onto the color pixel grid by pinhole
/// reprojection with nearest-neighbor splatting. Holes and invalid
/// reprojections stay code 0; collisions keep the nearest depth.
pub fn register_depth_to_color(frame: &RawRgbdFrame, calib: &CalibrationPair) -> Result<RawRgbdFrame> {
    calib.color.validate()?;
    calib.depth.validate()?;
    if (calib.depth.width, calib.depth.height) != frame.depth16.dimensions() {
        return Err(PipelineError::Config(format!(
            "depth calibration is {}x{} but depth image is {}x{}",
            calib.depth.width,
            calib.depth.height,
            frame.depth16.width(),
            frame.depth16.height()
        )));
    }
    if (calib.color.width, calib.color.height) != frame.color.dimensions() {
        return Err(PipelineError::Config(format!(
            "color calibration is {}x{} but color image is {}x{}",
            calib.color.width,
            calib.color.height,
            frame.color.width(),
            frame.color.height()
        )));
    }
    let (cw, ch) = frame.color.dimensions();
    let mut out = vec![0u16; (cw * ch) as usize];
    // Forward splat with a min-z buffer. Sequential per frame: frames
    // parallelize above this level and the z-buffer needs exclusive writes.
    for (u, v, p) in frame.depth16.enumerate_pixels() {
        let z = p.0[0];
        if z == 0 {
            continue;
        }
        let zf = z as f64;
        let x = (u as f64 - calib.depth.cx) * zf / calib.depth.fx;
        let y = (v as f64 - calib.depth.cy) * zf / calib.depth.fy;
        let uc = (x * calib.color.fx / zf + calib.color.cx).round();
        let vc = (y * calib.color.fy / zf + calib.color.cy).round();
        if uc < 0.0 || vc < 0.0 || uc >= cw as f64 || vc >= ch as f64 {
            continue;
        }
        let idx = (vc as u32 * cw + uc as u32) as usize;
        if out[idx] == 0 || z < out[idx] {
            out[idx] = z;
        }
    }
    Ok(RawRgbdFrame {
        frame_id: frame.frame_id,
        color: frame.color.clone(),
        depth16: Gray16Image::from_raw(cw, ch, out).expect("sized buffer"),
    })
}

/// Piecewise depth-code map shared by the kernel and its tests:
/// 0 outside [near, near+255], 1 at exactly near (code 0 stays the invalid
/// sentinel), otherwise depth - near.
pub fn quantize_code(depth_mm: u16, window: DepthWindow) -> u8 {
    let near = window.near_mm;
    let far = near as u32 + window.span_mm as u32;
    let d = depth_mm as u32;
    if d < near as u32 || d > far {
        0
    } else if d == near as u32 {
        1
    } else {
        (d - near as u32) as u8
    }
}

/// Clip the metric window out of a 16-bit depth image and requantize to
/// 8 bits at one millimeter per code.
pub fn clip_and_quantize_depth(depth16: &Gray16Image, window: DepthWindow) -> GrayImage {
    let (w, h) = depth16.dimensions();
    let src = depth16.as_raw();
    let data: Vec<u8> = map_indexed((w * h) as usize, |i| quantize_code(src[i], window));
    GrayImage::from_raw(w, h, data).expect("sized buffer")
}

/// Affine 8-bit to [-1, 1] map: v / 127.5 - 1.
pub fn normalize_code(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize_code`], rounding to the nearest code.
pub fn denormalize_code(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Normalize an RGB image to a (3, h, w) tensor in [-1, 1].
pub fn normalize_color(img: &RgbImage) -> NormalizedImage {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let data = map_indexed(3 * h * w, |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        normalize_code(raw[p * 3 + c])
    });
    NormalizedImage(Tensor::chw(3, h, w, data))
}

/// Normalize a grayscale image to a (1, h, w) tensor in [-1, 1].
pub fn normalize_gray(img: &GrayImage) -> NormalizedImage {
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.as_raw().iter().map(|&v| normalize_code(v)).collect();
    NormalizedImage(Tensor::chw(1, h as usize, w as usize, data))
}

/// Stack color and depth codes into the 4-channel [-1, 1] training target.
pub fn normalize_rgbd(frame: &RgbdFrame) -> NormalizedImage {
    let (w, h) = frame.color.dimensions();
    let (w, h) = (w as usize, h as usize);
    let color = frame.color.as_raw();
    let depth = frame.depth8.as_raw();
    let data = map_indexed(4 * h * w, |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        if c < 3 {
            normalize_code(color[p * 3 + c])
        } else {
            normalize_code(depth[p])
        }
    });
    NormalizedImage(Tensor::chw(4, h, w, data))
}

/// Inverse of [`normalize_rgbd`]: split a 4-channel [-1, 1] tensor back
/// into 8-bit color and depth codes.
pub fn denormalize_rgbd(t: &Tensor, window: DepthWindow) -> Result<RgbdFrame> {
    if t.dims().len() != 3 || t.c() != 4 {
        return Err(PipelineError::Contract(format!(
            "expected 4-channel tensor, got {:?}",
            t.dims()
        )));
    }
    let (h, w) = (t.h(), t.w());
    let plane = h * w;
    let d = t.data();
    let mut color = vec![0u8; plane * 3];
    for p in 0..plane {
        for c in 0..3 {
            color[p * 3 + c] = denormalize_code(d[c * plane + p]);
        }
    }
    let depth: Vec<u8> = (0..plane).map(|p| denormalize_code(d[3 * plane + p])).collect();
    RgbdFrame::new(
        RgbImage::from_raw(w as u32, h as u32, color).expect("sized buffer"),
        GrayImage::from_raw(w as u32, h as u32, depth).expect("sized buffer"),
        window,
    )
}

/// Histogram-equalization lookup table for one luma plane: inclusive CDF
/// scaled to the code range, `lut[v] = floor(255 * cdf(v))`. Returns `None`
/// for a constant plane (no contrast to redistribute).
pub fn equalization_lut(luma: &[u8]) -> Option<[u8; 256]> {
    let mut hist = [0u64; 256];
    for &v in luma {
        hist[v as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return None;
    }
    let total = luma.len() as f64;
    let mut lut = [0u8; 256];
    let mut cum = 0u64;
    for v in 0..256 {
        cum += hist[v];
        lut[v] = (255.0 * (cum as f64 / total)).floor().min(255.0) as u8;
    }
    Some(lut)
}

/// Global histogram equalization of the luma channel; chroma is kept.
/// Applies to color only, before normalization. Depth never goes through
/// this path (it would destroy the metric code mapping).
pub fn sharpen_contrast(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let luma: Vec<u8> = img.pixels().map(|p| luma_u8(p.0[0], p.0[1], p.0[2])).collect();
    let Some(lut) = equalization_lut(&luma) else {
        return img.clone();
    };
    let raw = img.as_raw();
    let out: Vec<u8> = map_indexed((w * h) as usize * 3, |i| {
        let p = i / 3;
        let c = i % 3;
        let (r, g, b) = (raw[p * 3] as f64, raw[p * 3 + 1] as f64, raw[p * 3 + 2] as f64);
        let y = luma[p];
        let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        let y2 = lut[y as usize] as f64;
        let v = match c {
            0 => y2 + 1.402 * (cr - 128.0),
            1 => y2 - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0),
            _ => y2 + 1.772 * (cb - 128.0),
        };
        v.round().clamp(0.0, 255.0) as u8
    });
    RgbImage::from_raw(w, h, out).expect("sized buffer")
}

/// Full-resolution output of the preprocessing stage for one frame.
pub struct ProcessedFrame {
    pub frame_id: u64,
    /// Sharpened color on the color grid.
    pub color: RgbImage,
    /// Raw 16-bit depth registered onto the color grid.
    pub depth16: Gray16Image,
    /// Windowed 8-bit depth codes.
    pub depth8: GrayImage,
    pub window: DepthWindow,
}

/// Per-frame preprocessing: register, window, sharpen. Pure; safe to run
/// over many frames in parallel.
pub fn process_frame(
    raw: &RawRgbdFrame,
    calib: &CalibrationPair,
    window: DepthWindow,
) -> Result<ProcessedFrame> {
    raw.validate()?;
    window.validate()?;
    let registered = register_depth_to_color(raw, calib)?;
    let depth8 = clip_and_quantize_depth(&registered.depth16, window);
    let color = sharpen_contrast(&raw.color);
    Ok(ProcessedFrame {
        frame_id: raw.frame_id,
        color,
        depth16: registered.depth16,
        depth8,
        window,
    })
}
