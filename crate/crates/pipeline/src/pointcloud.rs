//! Back-projection of generated RGBD into a textured 2.5D point cloud,
//! binary PLY export/import and an orthographic turntable preview renderer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::RgbImage;
use log::warn;

use crate::error::{PipelineError, Result};
use crate::preprocess::{DepthWindow, RgbdFrame};

/// Pinhole camera model in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Documented synthetic camera used for tests and as the fallback when a
    /// dataset ships no calibration: focal length equals the image width,
    /// principal point at the pixel-grid center.
    pub fn synthetic(width: u32, height: u32) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(PipelineError::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(PipelineError::Config("zero-sized camera".into()));
        }
        if self.cx < 0.0
            || self.cx >= self.width as f64
            || self.cy < 0.0
            || self.cy >= self.height as f64
        {
            return Err(PipelineError::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Fold an axis-aligned crop + resize into new intrinsics: the camera
    /// that sees the cropped, rescaled image.
    pub fn cropped_resized(&self, x0: f64, y0: f64, crop_side: f64, out_size: u32) -> Self {
        let s = out_size as f64 / crop_side;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx - x0) * s,
            cy: (self.cy - y0) * s,
            width: out_size,
            height: out_size,
        }
    }

    /// Project a camera-space point to pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (
            p[0] * self.fx / p[2] + self.cx,
            p[1] * self.fy / p[2] + self.cy,
        )
    }
}

/// Textured 2.5D point cloud in millimeters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-project every valid depth code through the pinhole model:
/// z = near + code, x = (u - cx) z / fx, y = (v - cy) z / fy.
/// Code-0 pixels are skipped.
pub fn backproject(
    frame: &RgbdFrame,
    intr: &CameraIntrinsics,
    window: DepthWindow,
) -> Result<PointCloud> {
    intr.validate()?;
    window.validate()?;
    if (intr.width, intr.height) != frame.depth8.dimensions() {
        return Err(PipelineError::Contract(format!(
            "intrinsics {}x{} do not match frame {}x{}",
            intr.width,
            intr.height,
            frame.depth8.width(),
            frame.depth8.height()
        )));
    }
    let mut cloud = PointCloud::default();
    for (u, v, p) in frame.depth8.enumerate_pixels() {
        let Some(z_mm) = window.code_to_mm(p.0[0]) else {
            continue;
        };
        let z = z_mm as f64;
        cloud.points.push([
            (u as f64 - intr.cx) * z / intr.fx,
            (v as f64 - intr.cy) * z / intr.fy,
            z,
        ]);
        cloud.colors.push(frame.color.get_pixel(u, v).0);
    }
    Ok(cloud)
}

/// Write binary little-endian PLY with float32 xyz (millimeters) and u8 RGB.
pub fn export_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    if cloud.is_empty() {
        warn!("exporting empty point cloud to {}", path.display());
    }
    let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n",
        cloud.len()
    );
    out.write_all(header.as_bytes())
        .map_err(|e| PipelineError::io(path, e))?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for coord in p {
            out.write_all(&(*coord as f32).to_le_bytes())
                .map_err(|e| PipelineError::io(path, e))?;
        }
        out.write_all(c).map_err(|e| PipelineError::io(path, e))?;
    }
    out.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}

/// Read a PLY written by [`export_ply`].
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| PipelineError::io(path, e))?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| PipelineError::Other(format!("{}: no PLY header end", path.display())))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| PipelineError::Other("non-utf8 PLY header".into()))?;
    if !header.starts_with("ply\n") || !header.contains("format binary_little_endian 1.0") {
        return Err(PipelineError::Other(format!(
            "{}: unsupported PLY flavor",
            path.display()
        )));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| PipelineError::Other("PLY missing vertex element".into()))?
        .trim()
        .parse()
        .map_err(|_| PipelineError::Other("bad vertex count".into()))?;
    let mut cloud = PointCloud::default();
    let stride = 15; // 3 * f32 + 3 * u8
    let body = &bytes[header_end..];
    if body.len() < count * stride {
        return Err(PipelineError::Other(format!(
            "{}: truncated PLY body",
            path.display()
        )));
    }
    for i in 0..count {
        let rec = &body[i * stride..(i + 1) * stride];
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
        cloud.points.push([f(0), f(4), f(8)]);
        cloud.colors.push([rec[12], rec[13], rec[14]]);
    }
    Ok(cloud)
}

/// Orthographic splat render of the cloud rotated about the vertical axis
/// through its centroid. Scale is fixed from the unrotated bounding box so
/// different angles of one cloud are directly comparable.
pub fn render_turntable(cloud: &PointCloud, angle_deg: f64, size: u32) -> Result<RgbImage> {
    if !(0.0..360.0).contains(&angle_deg) {
        return Err(PipelineError::Contract(format!(
            "angle {angle_deg} outside [0, 360)"
        )));
    }
    let mut img = RgbImage::new(size, size);
    if cloud.is_empty() {
        return Ok(img);
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);

    // extent of the unrotated cloud over all three axes
    let mut extent = 0.0f64;
    for p in &cloud.points {
        for a in 0..3 {
            extent = extent.max((p[a] - centroid[a]).abs());
        }
    }
    let margin = size as f64 * 0.05;
    let scale = if extent > 0.0 {
        (size as f64 / 2.0 - margin) / extent
    } else {
        1.0
    };

    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    // rotate about the vertical (y) axis, then paint far-to-near
    let mut splats: Vec<(f64, u32, u32, [u8; 3])> = Vec::with_capacity(cloud.len());
    let half = size as f64 / 2.0;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let x = p[0] - centroid[0];
        let y = p[1] - centroid[1];
        let z = p[2] - centroid[2];
        let xr = x * cos + z * sin;
        let zr = -x * sin + z * cos;
        let px = (xr * scale + half).round();
        let py = (y * scale + half).round();
        if px < 0.0 || py < 0.0 || px >= size as f64 || py >= size as f64 {
            continue;
        }
        splats.push((zr, px as u32, py as u32, *c));
    }
    splats.sort_by(|a, b| b.0.total_cmp(&a.0)); // far first; near overwrites
    for (_, x, y, c) in splats {
        img.put_pixel(x, y, image::Rgb(c));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn window() -> DepthWindow {
        DepthWindow::new(300).unwrap()
    }

    fn frame_with_depth(depth: GrayImage) -> RgbdFrame {
        let (w, h) = depth.dimensions();
        let color = RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 90]));
        RgbdFrame::new(color, depth, window()).unwrap()
    }

    #[test]
    fn principal_point_ray() {
        let intr = CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 4.0,
            cy: 3.0,
            width: 9,
            height: 7,
        };
        let mut depth = GrayImage::new(9, 7);
        depth.put_pixel(4, 3, Luma([100]));
        let cloud = backproject(&frame_with_depth(depth), &intr, window()).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], [0.0, 0.0, 400.0]);
    }

    #[test]
    fn all_invalid_depth_gives_empty_cloud() {
        let intr = CameraIntrinsics::synthetic(8, 8);
        let cloud = backproject(&frame_with_depth(GrayImage::new(8, 8)), &intr, window()).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn point_count_equals_valid_codes() {
        let depth = GrayImage::from_fn(16, 16, |x, y| Luma([if (x + y) % 3 == 0 { 0 } else { 50 }]));
        let valid = depth.pixels().filter(|p| p.0[0] != 0).count();
        let intr = CameraIntrinsics::synthetic(16, 16);
        let cloud = backproject(&frame_with_depth(depth), &intr, window()).unwrap();
        assert_eq!(cloud.len(), valid);
    }

    #[test]
    fn project_back_recovers_source_pixels() {
        let depth = GrayImage::from_fn(24, 20, |x, y| Luma([(1 + (x * 7 + y * 5) % 255) as u8]));
        let intr = CameraIntrinsics {
            fx: 310.0,
            fy: 290.0,
            cx: 11.3,
            cy: 9.8,
            width: 24,
            height: 20,
        };
        let frame = frame_with_depth(depth.clone());
        let cloud = backproject(&frame, &intr, window()).unwrap();
        let mut i = 0;
        for (u, v, p) in depth.enumerate_pixels() {
            if p.0[0] == 0 {
                continue;
            }
            let (pu, pv) = intr.project(cloud.points[i]);
            assert!((pu - u as f64).abs() < 0.5 && (pv - v as f64).abs() < 0.5);
            i += 1;
        }
    }

    #[test]
    fn window_shift_translates_z() {
        let depth = GrayImage::from_fn(8, 8, |x, _| Luma([(x * 20 + 10) as u8]));
        let intr = CameraIntrinsics::synthetic(8, 8);
        let near = backproject(&frame_with_depth(depth.clone()), &intr, window()).unwrap();
        let shifted_window = DepthWindow::new(310).unwrap();
        let mut frame = frame_with_depth(depth);
        frame.window = shifted_window;
        let far = backproject(&frame, &intr, shifted_window).unwrap();
        for (a, b) in near.points.iter().zip(&far.points) {
            assert!((b[2] - a[2] - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ply_header_declares_vertex_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let cloud = PointCloud {
            points: vec![[1.0, 2.0, 3.0]],
            colors: vec![[9, 8, 7]],
        };
        export_ply(&cloud, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).to_string();
        assert!(head.contains("element vertex 1"));
        assert!(head.contains("format binary_little_endian 1.0"));
    }

    #[test]
    fn ply_empty_cloud_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        export_ply(&PointCloud::default(), &path).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn turntable_identity_rotation_shows_source_colors() {
        // a flat plane at constant depth renders as an axis-aligned grid of
        // the source colors at angle 0
        let depth = GrayImage::from_pixel(16, 16, Luma([100]));
        let frame = frame_with_depth(depth);
        let cloud = backproject(&frame, &CameraIntrinsics::synthetic(16, 16), window()).unwrap();
        let img = render_turntable(&cloud, 0.0, 64).unwrap();
        let lit: Vec<[u8; 3]> = img
            .pixels()
            .filter(|p| p.0 != [0, 0, 0])
            .map(|p| p.0)
            .collect();
        assert!(!lit.is_empty());
        for px in lit {
            assert_eq!(px[2], 90); // every splat carries a source color
        }
    }

    #[test]
    fn turntable_rejects_out_of_range_angle() {
        assert!(render_turntable(&PointCloud::default(), 360.0, 32).is_err());
    }

    #[test]
    fn turntable_near_360_matches_angle_zero() {
        let depth = GrayImage::from_fn(12, 12, |x, y| Luma([(10 + x * 9 + y) as u8]));
        let frame = frame_with_depth(depth);
        let cloud = backproject(&frame, &CameraIntrinsics::synthetic(12, 12), window()).unwrap();
        let a = render_turntable(&cloud, 0.0, 48).unwrap();
        let b = render_turntable(&cloud, 359.9999, 48).unwrap();
        let diff = a
            .pixels()
            .zip(b.pixels())
            .filter(|(x, y)| x != y)
            .count();
        // splat quantization may flip a few boundary pixels
        assert!(diff <= (48 * 48) / 50, "diff {diff} too large");
    }

    #[test]
    fn profile_silhouette_width_matches_depth_extent() {
        // two fronto-parallel planes 80 mm apart; at 90 degrees the lit
        // silhouette width must equal the depth extent times the fixed scale
        let mut points = Vec::new();
        let mut colors = Vec::new();
        for y in 0..20 {
            for x in 0..20 {
                for (z, col) in [(400.0, [255, 0, 0]), (480.0, [0, 255, 0])] {
                    points.push([x as f64 - 10.0, y as f64 - 10.0, z]);
                    colors.push(col);
                }
            }
        }
        let cloud = PointCloud { points, colors };
        let size = 128u32;
        let img = render_turntable(&cloud, 90.0, size).unwrap();
        // extent arithmetic oracle
        let extent = 40.0f64; // max |dz| = 40 exceeds |dx|=|dy|=10
        let scale = (size as f64 / 2.0 - size as f64 * 0.05) / extent;
        let expected_width = 80.0 * scale;
        let mut min_x = u32::MAX;
        let mut max_x = 0;
        for (x, _, p) in img.enumerate_pixels() {
            if p.0 != [0, 0, 0] {
                min_x = min_x.min(x);
                max_x = max_x.max(x);
            }
        }
        let got = (max_x - min_x) as f64;
        assert!(
            (got - expected_width).abs() <= 2.0,
            "width {got} vs expected {expected_width}"
        );
    }

    #[test]
    fn ply_roundtrip_preserves_points_and_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let cloud = PointCloud {
            points: vec![[1.5, -2.25, 400.0], [0.0, 3.5, 555.0]],
            colors: vec![[1, 2, 3], [200, 100, 50]],
        };
        export_ply(&cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back, cloud);
    }
}
