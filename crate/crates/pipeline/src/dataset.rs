//! Dataset directory layout, metadata, split files and sample loading.
//!
//! Layout under a dataset root:
//!
//! ```text
//! raw/        <id>_color.png, <id>_depth16.png, optional <id>_lms.txt
//! processed/  <id>_color.png, <id>_depth16.png, <id>_depth8.png
//! flm/        <id>_flm.png, <id>_lms.txt (crop-space landmarks)
//! meta/       dataset.cfg (window, calibration, stage markers)
//! ```
//!
//! After the landmarks stage, processed color/depth8 are the cropped
//! square training images.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use facegan_nn::Tensor;

use crate::config::FlatMap;
use crate::error::{PipelineError, Result};
use crate::imgutil::{load_gray, load_rgb};
use crate::pointcloud::CameraIntrinsics;
use crate::preprocess::{normalize_gray, normalize_rgbd, CalibrationPair, DepthWindow, RgbdFrame};

pub fn raw_dir(root: &Path) -> PathBuf {
    root.join("raw")
}

pub fn processed_dir(root: &Path) -> PathBuf {
    root.join("processed")
}

pub fn flm_dir(root: &Path) -> PathBuf {
    root.join("flm")
}

pub fn meta_dir(root: &Path) -> PathBuf {
    root.join("meta")
}

pub fn color_name(id: u64) -> String {
    format!("{id}_color.png")
}

pub fn depth16_name(id: u64) -> String {
    format!("{id}_depth16.png")
}

pub fn depth8_name(id: u64) -> String {
    format!("{id}_depth8.png")
}

pub fn flm_name(id: u64) -> String {
    format!("{id}_flm.png")
}

pub fn lms_name(id: u64) -> String {
    format!("{id}_lms.txt")
}

/// One training element: the normalized FLM conditioning input and the
/// normalized 4-channel RGBD target.
#[derive(Clone)]
pub struct TrainingSample {
    pub frame_id: u64,
    pub flm: Tensor,
    pub target: Tensor,
}

/// Dataset-level metadata persisted in meta/dataset.cfg.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub window: DepthWindow,
    pub calib: Option<CalibrationPair>,
    /// Set once the landmarks stage has cropped processed/ to squares.
    pub landmarks_done: bool,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            window: DepthWindow::default(),
            calib: None,
            landmarks_done: false,
        }
    }
}

impl DatasetMeta {
    pub fn path(root: &Path) -> PathBuf {
        meta_dir(root).join("dataset.cfg")
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = Self::path(root);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let m = FlatMap::parse(&text)?;
        let window = DepthWindow {
            near_mm: m.parse_or("window.near_mm", DepthWindow::default().near_mm)?,
            span_mm: m.parse_or("window.span_mm", DepthWindow::default().span_mm)?,
        };
        let calib = if m.get("calib.color.fx").is_some() {
            let intr = |p: &str| -> Result<CameraIntrinsics> {
                Ok(CameraIntrinsics {
                    fx: m.require(&format!("calib.{p}.fx"))?,
                    fy: m.require(&format!("calib.{p}.fy"))?,
                    cx: m.require(&format!("calib.{p}.cx"))?,
                    cy: m.require(&format!("calib.{p}.cy"))?,
                    width: m.require(&format!("calib.{p}.width"))?,
                    height: m.require(&format!("calib.{p}.height"))?,
                })
            };
            Some(CalibrationPair {
                color: intr("color")?,
                depth: intr("depth")?,
            })
        } else {
            None
        };
        Ok(Some(Self {
            window,
            calib,
            landmarks_done: m.parse_or("stage.landmarks_done", false)?,
        }))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = meta_dir(root);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let mut m = FlatMap::default();
        m.set("window.near_mm", self.window.near_mm);
        m.set("window.span_mm", self.window.span_mm);
        if let Some(c) = &self.calib {
            for (p, i) in [("color", c.color), ("depth", c.depth)] {
                m.set(&format!("calib.{p}.fx"), i.fx);
                m.set(&format!("calib.{p}.fy"), i.fy);
                m.set(&format!("calib.{p}.cx"), i.cx);
                m.set(&format!("calib.{p}.cy"), i.cy);
                m.set(&format!("calib.{p}.width"), i.width);
                m.set(&format!("calib.{p}.height"), i.height);
            }
        }
        m.set("stage.landmarks_done", self.landmarks_done);
        let path = Self::path(root);
        std::fs::write(&path, m.serialize()).map_err(|e| PipelineError::io(&path, e))
    }
}

/// Frame ids found in a directory by their `<id>_color.png` files, sorted.
pub fn discover_frames(dir: &Path) -> Result<Vec<u64>> {
    let mut ids = BTreeSet::new();
    if !dir.exists() {
        return Err(PipelineError::Validation(format!(
            "directory {} does not exist",
            dir.display()
        )));
    }
    for entry in std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let entry = entry.map_err(|e| PipelineError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix("_color.png") {
            if let Ok(id) = stem.parse::<u64>() {
                ids.insert(id);
            }
        }
    }
    Ok(ids.into_iter().collect())
}

/// Load the training-ready samples (cropped processed pairs plus FLMs).
pub fn load_training_samples(root: &Path, image_size: u32) -> Result<Vec<TrainingSample>> {
    let meta = DatasetMeta::load(root)?.unwrap_or_default();
    let proc = processed_dir(root);
    let flm = flm_dir(root);
    let ids = discover_frames(&proc)?;
    if ids.is_empty() {
        return Err(PipelineError::Validation(format!(
            "no processed frames under {}",
            proc.display()
        )));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let color = load_rgb(&proc.join(color_name(id)))?;
        let depth8 = load_gray(&proc.join(depth8_name(id)))?;
        let flm_img = load_gray(&flm.join(flm_name(id)))?;
        for (what, (w, h)) in [
            ("color", color.dimensions()),
            ("depth8", depth8.dimensions()),
            ("flm", flm_img.dimensions()),
        ] {
            if (w, h) != (image_size, image_size) {
                return Err(PipelineError::Validation(format!(
                    "frame {id}: {what} is {w}x{h}, expected {image_size}x{image_size}"
                )));
            }
        }
        let frame = RgbdFrame::new(color, depth8, meta.window)?;
        samples.push(TrainingSample {
            frame_id: id,
            flm: normalize_gray(&flm_img).into_tensor(),
            target: normalize_rgbd(&frame).into_tensor(),
        });
    }
    Ok(samples)
}

/// Frames needed by evaluation: the FLM plus ground truth images.
pub struct EvalFrame {
    pub frame_id: u64,
    pub flm: image::GrayImage,
    pub gt_color: image::RgbImage,
    pub gt_depth8: image::GrayImage,
}

pub fn load_eval_frames(root: &Path, ids: &[u64]) -> Result<Vec<EvalFrame>> {
    let proc = processed_dir(root);
    let flm = flm_dir(root);
    ids.iter()
        .map(|&id| {
            Ok(EvalFrame {
                frame_id: id,
                flm: load_gray(&flm.join(flm_name(id)))?,
                gt_color: load_rgb(&proc.join(color_name(id)))?,
                gt_depth8: load_gray(&proc.join(depth8_name(id)))?,
            })
        })
        .collect()
}

/// Validation report for a dataset directory.
#[derive(Debug, Default)]
pub struct PreflightReport {
    pub frames: usize,
    pub issues: Vec<String>,
}

impl PreflightReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Check frame triplet pairing, resolution consistency and split metadata.
pub fn preflight(root: &Path) -> PreflightReport {
    let mut report = PreflightReport::default();
    let proc = processed_dir(root);
    let flm = flm_dir(root);
    let ids = match discover_frames(&proc) {
        Ok(ids) => ids,
        Err(e) => {
            report.issues.push(e.to_string());
            return report;
        }
    };
    if ids.is_empty() {
        report.issues.push(format!("no frames under {}", proc.display()));
        return report;
    }
    report.frames = ids.len();
    let mut resolution: Option<(u32, u32)> = None;
    for &id in &ids {
        let depth = proc.join(depth8_name(id));
        if !depth.exists() {
            report.issues.push(format!("frame {id}: missing {}", depth.display()));
        }
        let f = flm.join(flm_name(id));
        if !f.exists() {
            report.issues.push(format!("frame {id}: missing {}", f.display()));
        }
        if report.issues.len() > 64 {
            report.issues.push("... further issues truncated".into());
            return report;
        }
        if let Ok(img) = load_rgb(&proc.join(color_name(id))) {
            let dims = img.dimensions();
            match resolution {
                None => resolution = Some(dims),
                Some(r) if r != dims => report.issues.push(format!(
                    "frame {id}: resolution {dims:?} differs from {r:?}"
                )),
                _ => {}
            }
        }
    }
    match DatasetMeta::load(root) {
        Ok(None) => report.issues.push("missing meta/dataset.cfg".into()),
        Err(e) => report.issues.push(format!("bad meta: {e}")),
        Ok(Some(_)) => {}
    }
    report
}

/// Write the train/test assignment, one `<id> train|test` line per frame,
/// sorted by frame id.
pub fn write_split_file(path: &Path, train: &[u64], test: &[u64]) -> Result<()> {
    let mut lines: Vec<(u64, &str)> = train
        .iter()
        .map(|&id| (id, "train"))
        .chain(test.iter().map(|&id| (id, "test")))
        .collect();
    lines.sort_unstable();
    let mut out = String::new();
    for (id, role) in lines {
        out.push_str(&format!("{id} {role}\n"));
    }
    std::fs::write(path, out).map_err(|e| PipelineError::io(path, e))
}

pub fn read_split_file(path: &Path) -> Result<(Vec<u64>, Vec<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let (Some(id), Some(role)) = (it.next(), it.next()) else {
            continue;
        };
        let id: u64 = id
            .parse()
            .map_err(|_| PipelineError::Validation(format!("bad split line '{line}'")))?;
        match role {
            "train" => train.push(id),
            "test" => test.push(id),
            other => {
                return Err(PipelineError::Validation(format!(
                    "unknown split role '{other}'"
                )))
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DatasetMeta {
            window: DepthWindow::new(450).unwrap(),
            calib: Some(CalibrationPair::aligned(64, 48)),
            landmarks_done: true,
        };
        meta.save(dir.path()).unwrap();
        let back = DatasetMeta::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn split_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        write_split_file(&path, &[3, 1], &[2]).unwrap();
        let (train, test) = read_split_file(&path).unwrap();
        assert_eq!(train, vec![1, 3]);
        assert_eq!(test, vec![2]);
    }

    #[test]
    fn discover_orders_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for id in [10u64, 2, 33] {
            std::fs::write(dir.path().join(color_name(id)), b"x").unwrap();
        }
        std::fs::write(dir.path().join("junk.txt"), b"x").unwrap();
        let ids = discover_frames(dir.path()).unwrap();
        assert_eq!(ids, vec![2, 10, 33]);
    }
}
