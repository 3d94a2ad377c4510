//! Small image helpers shared across pipeline stages: tensor conversion,
//! luma, Gaussian blur, gradients, resampling and lossless file IO.

use std::path::Path;

use facegan_nn::parallel::map_indexed;
use facegan_nn::Tensor;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{PipelineError, Result};

pub type Gray16Image = ImageBuffer<Luma<u16>, Vec<u16>>;

/// ITU-R 601 luma from 8-bit RGB, rounded to u8.
pub fn luma_u8(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_gray(color: &RgbImage) -> GrayImage {
    let (w, h) = color.dimensions();
    let data: Vec<u8> = color
        .pixels()
        .map(|p| luma_u8(p.0[0], p.0[1], p.0[2]))
        .collect();
    GrayImage::from_raw(w, h, data).expect("sized buffer")
}

/// RGB image as a (3, h, w) f64 tensor with raw 0..255 values.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let data = map_indexed(3 * h * w, |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f64
    });
    Tensor::chw(3, h, w, data)
}

pub fn gray_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    Tensor::chw(1, h as usize, w as usize, data)
}

/// 5x5 (or any odd-size) Gaussian blur with replicated borders.
pub fn gaussian_blur_gray(img: &GrayImage, kernel_size: usize, sigma: f64) -> GrayImage {
    assert!(kernel_size % 2 == 1);
    let half = (kernel_size / 2) as isize;
    let mut kernel = Vec::with_capacity(kernel_size);
    let mut sum = 0.0;
    for i in -half..=half {
        let v = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (w, h) = img.dimensions();
    let (wi, hi) = (w as i64, h as i64);
    let src = img.as_raw();
    let clamp_px = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, wi - 1) as usize;
        let cy = y.clamp(0, hi - 1) as usize;
        src[cy * w as usize + cx] as f64
    };
    // separable: horizontal then vertical
    let horiz: Vec<f64> = map_indexed((w * h) as usize, |i| {
        let y = (i / w as usize) as i64;
        let x = (i % w as usize) as i64;
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * clamp_px(x + k as i64 - half as i64, y))
            .sum()
    });
    let out: Vec<u8> = map_indexed((w * h) as usize, |i| {
        let y = (i / w as usize) as i64;
        let x = i % w as usize;
        let mut acc = 0.0;
        for (k, kv) in kernel.iter().enumerate() {
            let yy = (y + k as i64 - half as i64).clamp(0, hi - 1) as usize;
            acc += kv * horiz[yy * w as usize + x];
        }
        acc.round().clamp(0.0, 255.0) as u8
    });
    GrayImage::from_raw(w, h, out).expect("sized buffer")
}

/// Central-difference gradients of a grayscale image, replicated borders.
/// Returns (gx, gy) as row-major f64 planes.
pub fn gradients(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let at = |x: isize, y: isize| -> f64 {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        src[cy * w + cx] as f64
    };
    let gx = map_indexed(w * h, |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        (at(x + 1, y) - at(x - 1, y)) / 2.0
    });
    let gy = map_indexed(w * h, |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        (at(x, y + 1) - at(x, y - 1)) / 2.0
    });
    (gx, gy)
}

/// Bilinear sample of an RGB image at float coordinates (clamped).
pub fn bilinear_rgb(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = img.get_pixel(x0, y0).0;
    let p10 = img.get_pixel(x1, y0).0;
    let p01 = img.get_pixel(x0, y1).0;
    let p11 = img.get_pixel(x1, y1).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = p00[c] as f64 * (1.0 - fx) * (1.0 - fy)
            + p10[c] as f64 * fx * (1.0 - fy)
            + p01[c] as f64 * (1.0 - fx) * fy
            + p11[c] as f64 * fx * fy;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Nearest-neighbor sample of a grayscale image (clamped).
pub fn nearest_gray(img: &GrayImage, x: f64, y: f64) -> u8 {
    let xi = x.round().clamp(0.0, img.width() as f64 - 1.0) as u32;
    let yi = y.round().clamp(0.0, img.height() as f64 - 1.0) as u32;
    img.get_pixel(xi, yi).0[0]
}

/// Horizontal concatenation of same-height RGB panels.
pub fn hstack(panels: &[RgbImage]) -> RgbImage {
    assert!(!panels.is_empty());
    let h = panels[0].height();
    assert!(panels.iter().all(|p| p.height() == h));
    let total_w: u32 = panels.iter().map(|p| p.width()).sum();
    let mut out = RgbImage::new(total_w, h);
    let mut x_off = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x_off + x, y, *px);
        }
        x_off += p.width();
    }
    out
}

pub fn gray_to_rgb(img: &GrayImage) -> RgbImage {
    let mut out = RgbImage::new(img.width(), img.height());
    for (x, y, p) in img.enumerate_pixels() {
        out.put_pixel(x, y, Rgb([p.0[0], p.0[0], p.0[0]]));
    }
    out
}

// ---- lossless file IO ----

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(PipelineError::from)
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save(path).map_err(PipelineError::from)
}

pub fn save_gray16(path: &Path, img: &Gray16Image) -> Result<()> {
    img.save(path).map_err(PipelineError::from)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))?
        .to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))?
        .to_luma8())
}

pub fn load_gray16(path: &Path) -> Result<Gray16Image> {
    Ok(image::open(path)
        .map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))?
        .to_luma16())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_extremes() {
        assert_eq!(luma_u8(0, 0, 0), 0);
        assert_eq!(luma_u8(255, 255, 255), 255);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = GrayImage::from_pixel(9, 9, Luma([120]));
        let out = gaussian_blur_gray(&img, 5, 1.0);
        assert!(out.pixels().all(|p| p.0[0] == 120));
    }

    #[test]
    fn gradients_of_ramp() {
        let img = GrayImage::from_fn(8, 8, |x, _| Luma([(x * 10) as u8]));
        let (gx, gy) = gradients(&img);
        // interior pixels: slope 10 in x, 0 in y
        assert!((gx[3 * 8 + 3] - 10.0).abs() < 1e-9);
        assert!(gy[3 * 8 + 3].abs() < 1e-9);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(0, 0, Rgb([0, 0, 0]));
        img.put_pixel(1, 0, Rgb([100, 200, 50]));
        assert_eq!(bilinear_rgb(&img, 0.5, 0.0), [50, 100, 25]);
    }

    #[test]
    fn hstack_widths() {
        let a = RgbImage::new(3, 2);
        let b = RgbImage::new(5, 2);
        assert_eq!(hstack(&[a, b]).dimensions(), (8, 2));
    }
}
