//! Stage implementations behind the subcommands.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use facegan::dataset::{self, DatasetMeta};
use facegan::error::{PipelineError, Result};
use facegan::evaluate::{self, EvalContext};
use facegan::imgutil::{load_gray, load_gray16, load_rgb, save_gray, save_gray16, save_rgb};
use facegan::infer::{InferenceSession, REFERENCE_ACCEL_LATENCY_MS};
use facegan::landmarks::{
    compute_crop, crop_resize, detect_landmarks, render_flm, transform_landmarks,
    AnnotationBackend, LandmarkDetector,
};
use facegan::model::Lpips;
use facegan::pointcloud::{backproject, export_ply, read_ply, render_turntable, CameraIntrinsics};
use facegan::preprocess::{process_frame, CalibrationPair, DepthWindow, RawRgbdFrame, RgbdFrame};
use facegan::training::{run_training, split_dataset};
use facegan::PipelineConfig;
use log::{info, warn};

pub fn preprocess(input: &Path, out: &Path, near_mm: Option<u16>) -> Result<()> {
    let raw = dataset::raw_dir(input);
    let ids = dataset::discover_frames(&raw)?;
    if ids.is_empty() {
        return Err(PipelineError::Validation(format!(
            "no raw frames under {}",
            raw.display()
        )));
    }
    let mut meta = DatasetMeta::load(input)?.unwrap_or_default();
    if let Some(near) = near_mm {
        meta.window = DepthWindow::new(near)?;
    }
    let proc = dataset::processed_dir(out);
    std::fs::create_dir_all(&proc).map_err(|e| PipelineError::io(&proc, e))?;

    let first_color = load_rgb(&raw.join(dataset::color_name(ids[0])))?;
    let first_depth = load_gray16(&raw.join(dataset::depth16_name(ids[0])))?;
    let calib = meta.calib.unwrap_or_else(|| CalibrationPair {
        color: CameraIntrinsics::synthetic(first_color.width(), first_color.height()),
        depth: CameraIntrinsics::synthetic(first_depth.width(), first_depth.height()),
    });

    // pure per-frame work; frames are processed independently
    let results = facegan_nn::parallel::map_indexed(ids.len(), |i| -> Result<u64> {
        let id = ids[i];
        let frame = RawRgbdFrame {
            frame_id: id,
            color: load_rgb(&raw.join(dataset::color_name(id)))?,
            depth16: load_gray16(&raw.join(dataset::depth16_name(id)))?,
        };
        let done = process_frame(&frame, &calib, meta.window)?;
        save_rgb(&proc.join(dataset::color_name(id)), &done.color)?;
        save_gray16(&proc.join(dataset::depth16_name(id)), &done.depth16)?;
        save_gray(&proc.join(dataset::depth8_name(id)), &done.depth8)?;
        Ok(id)
    });
    let mut count = 0;
    for r in results {
        r?;
        count += 1;
    }
    meta.calib = Some(calib);
    meta.landmarks_done = false;
    meta.save(out)?;
    info!("preprocessed {count} frames into {}", proc.display());
    Ok(())
}

fn make_backend(name: &str, root: &Path) -> Result<Box<dyn LandmarkDetector>> {
    match name {
        "synthetic" => Ok(Box::new(AnnotationBackend {
            dir: dataset::raw_dir(root),
        })),
        other => Err(PipelineError::Config(format!(
            "unknown landmark backend '{other}'; available: synthetic \
             (external network detectors are loaded by the application)"
        ))),
    }
}

pub fn landmarks(input: &Path, backend_name: &str, square: bool, size: u32) -> Result<()> {
    let mut meta = DatasetMeta::load(input)?.ok_or_else(|| {
        PipelineError::Validation("missing meta/dataset.cfg; run preprocess first".into())
    })?;
    if meta.landmarks_done {
        return Err(PipelineError::Validation(
            "landmarks already applied (processed/ is cropped); re-run preprocess first".into(),
        ));
    }
    let backend = make_backend(backend_name, input)?;
    let proc = dataset::processed_dir(input);
    let flm = dataset::flm_dir(input);
    std::fs::create_dir_all(&flm).map_err(|e| PipelineError::io(&flm, e))?;
    let ids = dataset::discover_frames(&proc)?;
    // frames are independent; backends that are not safe for concurrent
    // invocation get their detect calls serialized behind a lock
    let detect_lock = (!backend.concurrency_safe()).then(|| std::sync::Mutex::new(()));
    let results = facegan_nn::parallel::map_indexed(ids.len(), |i| -> Result<bool> {
        let id = ids[i];
        let color = load_rgb(&proc.join(dataset::color_name(id)))?;
        let depth8 = load_gray(&proc.join(dataset::depth8_name(id)))?;
        let detected = {
            let _guard = detect_lock.as_ref().map(|m| m.lock().expect("detector lock"));
            detect_landmarks(&color, id, backend.as_ref())
        };
        let set = match detected {
            Ok(set) => set,
            Err(PipelineError::NoFace { .. }) | Err(PipelineError::FrameRejected { .. }) => {
                warn!("frame {id}: no usable face, skipping (removed from processed/)");
                for name in [
                    dataset::color_name(id),
                    dataset::depth8_name(id),
                    dataset::depth16_name(id),
                ] {
                    let _ = std::fs::remove_file(proc.join(name));
                }
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let rect = compute_crop(&set, color.width(), color.height(), square)?;
        let frame = RgbdFrame::new(color, depth8, meta.window)?;
        let cropped = crop_resize(&frame, rect, size)?;
        let in_crop = transform_landmarks(&set, rect, size);
        let map = render_flm(&in_crop, size)?;
        save_rgb(&proc.join(dataset::color_name(id)), &cropped.color)?;
        save_gray(&proc.join(dataset::depth8_name(id)), &cropped.depth8)?;
        save_gray(&flm.join(dataset::flm_name(id)), &map.image)?;
        let lms_path = flm.join(dataset::lms_name(id));
        std::fs::write(&lms_path, facegan::landmarks::landmark_text(&in_crop.points))
            .map_err(|e| PipelineError::io(&lms_path, e))?;
        Ok(true)
    });
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for r in results {
        if r? {
            kept += 1;
        } else {
            skipped += 1;
        }
    }
    meta.landmarks_done = true;
    meta.save(input)?;
    info!("landmarked {kept} frames ({skipped} skipped) at {size}x{size}");
    Ok(())
}

pub fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = match (config, resume) {
        (Some(path), _) => PipelineConfig::load(path)?,
        // resuming without an explicit config adopts the checkpoint's
        (None, Some(ckpt)) => facegan::checkpoint::load_generator_only(ckpt)?.0,
        (None, None) => PipelineConfig::default(),
    };
    let report = dataset::preflight(data);
    if !report.ok() {
        return Err(PipelineError::Validation(format!(
            "dataset failed preflight:\n  {}",
            report.issues.join("\n  ")
        )));
    }
    let outcome = run_training(data, &cfg, out, resume)?;
    info!(
        "training complete: {} epochs, checkpoint {}",
        outcome.reports.len(),
        outcome.checkpoint.display()
    );
    Ok(())
}

pub fn infer(ckpt: &Path, flm: &Path, out: &Path, ply: bool) -> Result<()> {
    let session = InferenceSession::load(ckpt)?;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let inputs: Vec<(String, PathBuf)> = if flm.is_dir() {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(flm).map_err(|e| PipelineError::io(flm, e))? {
            let entry = entry.map_err(|e| PipelineError::io(flm, e))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix("_flm.png") {
                v.push((stem.to_string(), path));
            }
        }
        v.sort();
        v
    } else {
        let stem = flm
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "frame".into());
        vec![(stem.trim_end_matches("_flm").to_string(), flm.to_path_buf())]
    };
    if inputs.is_empty() {
        return Err(PipelineError::Validation(format!(
            "no *_flm.png files under {}",
            flm.display()
        )));
    }
    let window = session.config().window;
    let size = session.config().gen.image_size;
    let intr = CameraIntrinsics::synthetic(size, size);
    for (id, path) in &inputs {
        let map = load_gray(path)?;
        let frame = session.synthesize(&map)?;
        save_rgb(&out.join(format!("{id}_gen_color.png")), &frame.color)?;
        save_gray(&out.join(format!("{id}_gen_depth8.png")), &frame.depth8)?;
        if ply {
            let cloud = backproject(&frame, &intr, window)?;
            export_ply(&cloud, &out.join(format!("{id}_gen.ply")))?;
        }
    }
    if let Some(mean) = session.mean_latency_ms() {
        let (lo, hi) = REFERENCE_ACCEL_LATENCY_MS;
        info!(
            "synthesized {} frames; mean forward pass {mean:.2} ms on cpu \
             (reference accelerator band at 512x512: {lo:.0}-{hi:.0} ms)",
            inputs.len()
        );
    }
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path, jpeg_equiv: bool, max_figures: usize) -> Result<()> {
    let session = InferenceSession::load(ckpt)?;
    let cfg = session.config().clone();
    let ids = dataset::discover_frames(&dataset::processed_dir(data))?;
    // the held-out set comes from split metadata next to the checkpoint
    // when available, and is re-derived from the seeded split otherwise
    let split_path = ckpt.parent().map(|p| p.join("split.txt"));
    let (train_ids, test_ids) = match split_path.filter(|p| p.exists()) {
        Some(p) => dataset::read_split_file(&p)?,
        None => split_dataset(ids.clone(), &cfg.train)?,
    };
    for id in &test_ids {
        if train_ids.contains(id) {
            return Err(PipelineError::Validation(format!(
                "split metadata overlaps: frame {id} is in train and test"
            )));
        }
    }
    if test_ids.is_empty() {
        return Err(PipelineError::Validation("empty test split".into()));
    }
    let frames = dataset::load_eval_frames(data, &test_ids)?;
    let lpips = Lpips::from_backend(&cfg.lpips_backend)?.ok_or_else(|| {
        PipelineError::Config("evaluation needs a perceptual metric backend".into())
    })?;
    let ctx = EvalContext {
        lpips: &lpips,
        window: cfg.window,
        erosion_radius: cfg.eval.erosion_radius,
        jpeg_equivalence: jpeg_equiv || cfg.eval.jpeg_equivalence,
    };
    let report = evaluate::evaluate_dataset(&frames, &session, &ctx)?;
    evaluate::write_report(out, &report)?;
    let meta = DatasetMeta::load(data)?.unwrap_or_default();
    let intr = meta
        .calib
        .map(|c| c.color)
        .filter(|c| (c.width, c.height) == (cfg.gen.image_size, cfg.gen.image_size))
        .unwrap_or_else(|| CameraIntrinsics::synthetic(cfg.gen.image_size, cfg.gen.image_size));
    for frame in frames.iter().take(max_figures) {
        let gen = session.synthesize(&frame.flm)?;
        let fig = evaluate::render_eval_figure(frame, &gen, cfg.window, Some(intr))?;
        save_rgb(&out.join(format!("{}_figure.png", frame.frame_id)), &fig)?;
    }
    info!(
        "eval over {} frames: ssim {:.4}, lpips {:.4}, depth mae {:.2} mm -> {}",
        report.summary.frames,
        report.summary.mean_ssim,
        report.summary.mean_lpips,
        report.summary.mean_depth_mae_mm,
        out.display()
    );
    Ok(())
}

pub fn preview(ply: &Path, angle: f64, out: &Path, size: u32) -> Result<()> {
    let cloud = read_ply(ply)?;
    let img = render_turntable(&cloud, angle, size)?;
    save_rgb(out, &img)?;
    info!("rendered {} points at {angle} degrees", cloud.len());
    Ok(())
}

pub fn preflight(data: &Path) -> Result<()> {
    let report = dataset::preflight(data);
    if report.ok() {
        println!("ok: {} frames, layout consistent", report.frames);
        Ok(())
    } else {
        for issue in &report.issues {
            println!("issue: {issue}");
        }
        Err(PipelineError::Validation(format!(
            "{} issue(s) found",
            report.issues.len()
        )))
    }
}

pub fn run_all(data: &Path, config: Option<&Path>, out: &Path, backend: &str) -> Result<()> {
    let cfg = match config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    let run_dir = new_run_dir(out)?;
    cfg.write(&run_dir.join("config.cfg"))?;
    info!("run directory {}", run_dir.display());

    let stage = |name: &str, r: Result<()>| -> Result<()> {
        r.map_err(|e| PipelineError::Other(format!("stage {name} failed: {e}")))
    };
    let meta = DatasetMeta::load(data)?;
    let already_cropped = meta.as_ref().map(|m| m.landmarks_done).unwrap_or(false);
    if already_cropped {
        info!("dataset already landmarked; skipping preprocess/landmarks");
    } else {
        stage("preprocess", preprocess(data, data, Some(cfg.window.near_mm)))?;
        stage(
            "landmarks",
            landmarks(data, backend, cfg.landmarks.square_crop, cfg.gen.image_size),
        )?;
    }
    stage("preflight", preflight(data))?;
    let train_dir = run_dir.join("train");
    stage("train", train(data, config, &train_dir, None))?;
    let ckpt = latest_checkpoint(&train_dir)?;
    stage(
        "eval",
        eval(&ckpt, data, &run_dir.join("eval"), cfg.eval.jpeg_equivalence, 8),
    )?;
    info!("run complete: {}", run_dir.display());
    Ok(())
}

/// Append-only run directories: runs never reuse an existing directory.
fn new_run_dir(base: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(base).map_err(|e| PipelineError::io(base, e))?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for seq in 0..10_000u32 {
        let candidate = base.join(format!("run-{stamp}-{seq:03}"));
        if !candidate.exists() {
            std::fs::create_dir(&candidate).map_err(|e| PipelineError::io(&candidate, e))?;
            return Ok(candidate);
        }
    }
    Err(PipelineError::Other("run directory space exhausted".into()))
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let entry = entry.map_err(|e| PipelineError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("ckpt_epoch_")
            .and_then(|s| s.strip_suffix(".fgc"))
        {
            if let Ok(e) = num.parse::<u32>() {
                if best.as_ref().map(|(b, _)| e > *b).unwrap_or(true) {
                    best = Some((e, entry.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| PipelineError::Validation(format!("no checkpoints under {}", dir.display())))
}
