//! Library-level end-to-end flows on tiny synthetic data: raw capture
//! through preprocessing, landmarking, training, inference, evaluation and
//! point-cloud export.

use facegan::dataset::{self, load_training_samples, EvalFrame};
use facegan::evaluate::{evaluate_dataset, EvalContext, FIGURE_COLUMNS};
use facegan::imgutil::{load_gray, load_gray16, load_rgb, save_gray, save_rgb};
use facegan::infer::InferenceSession;
use facegan::landmarks::{
    compute_crop, crop_resize, detect_landmarks, render_flm, transform_landmarks,
    AnnotationBackend,
};
use facegan::model::Lpips;
use facegan::pointcloud::{backproject, export_ply, CameraIntrinsics, PointCloud};
use facegan::preprocess::{denormalize_rgbd, process_frame, CalibrationPair, RawRgbdFrame, RgbdFrame};
use facegan::synthetic::{write_raw_dataset, write_toy_dataset};
use facegan::training::{run_training, Trainer};
use facegan::PipelineConfig;

fn toy_cfg(image_size: u32, epochs: u32) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.gen.image_size = image_size;
    cfg.gen.base_width = 4;
    cfg.gen.depth = 3;
    cfg.gen.dropout_stages = 2;
    cfg.disc.base_width = 4;
    cfg.disc.layers_per_scale = 1;
    cfg.train.epochs = epochs;
    cfg.train.lr_constant_epochs = epochs.div_ceil(2);
    cfg.train.lr_decay_epochs = epochs - epochs.div_ceil(2);
    cfg.train.checkpoint_every = 2;
    cfg.train.seed = 77;
    cfg
}

/// Raw capture through landmarks, mirroring the CLI stage wiring.
fn prepare_dataset(root: &std::path::Path, frames: usize, raw_size: u32, out_size: u32) {
    let window = facegan::preprocess::DepthWindow::default();
    write_raw_dataset(root, frames, raw_size, window, 42).unwrap();
    let raw = dataset::raw_dir(root);
    let proc = dataset::processed_dir(root);
    let flm = dataset::flm_dir(root);
    std::fs::create_dir_all(&proc).unwrap();
    std::fs::create_dir_all(&flm).unwrap();
    let calib = CalibrationPair::aligned(raw_size, raw_size);
    let backend = AnnotationBackend { dir: raw.clone() };
    for id in dataset::discover_frames(&raw).unwrap() {
        let frame = RawRgbdFrame {
            frame_id: id,
            color: load_rgb(&raw.join(dataset::color_name(id))).unwrap(),
            depth16: load_gray16(&raw.join(dataset::depth16_name(id))).unwrap(),
        };
        let done = process_frame(&frame, &calib, window).unwrap();
        let set = detect_landmarks(&done.color, id, &backend).unwrap();
        let rect = compute_crop(&set, raw_size, raw_size, true).unwrap();
        let full = RgbdFrame::new(done.color, done.depth8, window).unwrap();
        let cropped = crop_resize(&full, rect, out_size).unwrap();
        let in_crop = transform_landmarks(&set, rect, out_size);
        let map = render_flm(&in_crop, out_size).unwrap();
        save_rgb(&proc.join(dataset::color_name(id)), &cropped.color).unwrap();
        save_gray(&proc.join(dataset::depth8_name(id)), &cropped.depth8).unwrap();
        save_gray(&flm.join(dataset::flm_name(id)), &map.image).unwrap();
    }
    facegan::dataset::DatasetMeta {
        window,
        calib: Some(calib),
        landmarks_done: true,
    }
    .save(root)
    .unwrap();
}

#[test]
fn raw_capture_to_training_samples() {
    let dir = tempfile::tempdir().unwrap();
    prepare_dataset(dir.path(), 4, 96, 32);
    let report = dataset::preflight(dir.path());
    assert!(report.ok(), "preflight issues: {:?}", report.issues);
    let samples = load_training_samples(dir.path(), 32).unwrap();
    assert_eq!(samples.len(), 4);
    for s in &samples {
        assert!(s.flm.data().iter().any(|&v| v > 0.0), "FLM has discs");
        assert!(s.target.all_finite());
    }
}

#[test]
fn train_checkpoint_infer_golden_path() {
    // a checkpoint written by training must load into an inference session
    // that reproduces the training-side forward output bit-exactly
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_toy_dataset(&data, 4, 32, 5).unwrap();
    let cfg = toy_cfg(32, 2);
    let out = dir.path().join("run");
    let outcome = run_training(&data, &cfg, &out, None).unwrap();
    assert_eq!(outcome.reports.len(), 2);

    let samples = load_training_samples(&data, 32).unwrap();
    let trainer = Trainer::from_checkpoint(&outcome.checkpoint).unwrap();
    let tape = facegan_nn::Tape::new(false);
    let ctx = facegan_nn::ParamCtx::frozen(&trainer.gen_store);
    let x = tape.constant(samples[0].flm.clone());
    let y = trainer.gen.forward(&tape, &ctx, x, None);
    let train_side = denormalize_rgbd(&tape.value(y), cfg.window).unwrap();

    let session = InferenceSession::load(&outcome.checkpoint).unwrap();
    let flm_img = load_gray(
        &dataset::flm_dir(&data).join(dataset::flm_name(samples[0].frame_id)),
    )
    .unwrap();
    let infer_side = session.synthesize(&flm_img).unwrap();
    assert_eq!(train_side.color.as_raw(), infer_side.color.as_raw());
    assert_eq!(train_side.depth8.as_raw(), infer_side.depth8.as_raw());
}

/// Ground-truth replay stands in for a perfect generator.
struct ReplaySession {
    frames: std::collections::HashMap<u64, RgbdFrame>,
}

impl facegan::evaluate::Synthesizer for ReplaySession {
    fn synthesize_frame(&self, frame_id: u64, _flm: &image::GrayImage) -> facegan::Result<RgbdFrame> {
        Ok(self.frames[&frame_id].clone())
    }
}

#[test]
fn oracle_session_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path(), 3, 32, 9).unwrap();
    let ids = dataset::discover_frames(&dataset::processed_dir(dir.path())).unwrap();
    let frames = dataset::load_eval_frames(dir.path(), &ids).unwrap();
    let window = facegan::preprocess::DepthWindow::default();
    let replay = ReplaySession {
        frames: frames
            .iter()
            .map(|f| {
                (
                    f.frame_id,
                    RgbdFrame::new(f.gt_color.clone(), f.gt_depth8.clone(), window).unwrap(),
                )
            })
            .collect(),
    };
    let lpips = Lpips::random(1);
    let ctx = EvalContext {
        lpips: &lpips,
        window,
        erosion_radius: 3,
        jpeg_equivalence: false,
    };
    let report = evaluate_dataset(&frames, &replay, &ctx).unwrap();
    assert_eq!(report.summary.mean_ssim, 1.0);
    assert_eq!(report.summary.mean_lpips, 0.0);
    assert_eq!(report.summary.mean_depth_mae_mm, 0.0);
    assert_eq!(report.summary.figure_columns, FIGURE_COLUMNS.to_vec());
    // two-frame flags: best and worst land on different frames unless tied
    let flagged_best = report.records.iter().filter(|r| r.best_ssim).count();
    let flagged_worst = report.records.iter().filter(|r| r.worst_ssim).count();
    assert_eq!(flagged_best, 1);
    assert_eq!(flagged_worst, 1);
}

#[test]
fn eval_figure_contains_all_columns() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path(), 2, 32, 3).unwrap();
    let ids = dataset::discover_frames(&dataset::processed_dir(dir.path())).unwrap();
    let frames = dataset::load_eval_frames(dir.path(), &ids).unwrap();
    let window = facegan::preprocess::DepthWindow::default();
    let gen = RgbdFrame::new(frames[0].gt_color.clone(), frames[0].gt_depth8.clone(), window).unwrap();
    let fig = facegan::evaluate::render_eval_figure(&frames[0], &gen, window, None).unwrap();
    assert_eq!(fig.width(), 32 * FIGURE_COLUMNS.len() as u32);
    assert_eq!(fig.height(), 32);
}

#[test]
fn ply_export_matches_independent_parser() {
    // oracle: a from-scratch PLY parser written against the format spec,
    // sharing no code with export_ply/read_ply
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path(), 1, 32, 21).unwrap();
    let ids = dataset::discover_frames(&dataset::processed_dir(dir.path())).unwrap();
    let frames = dataset::load_eval_frames(dir.path(), &ids).unwrap();
    let window = facegan::preprocess::DepthWindow::default();
    let frame = RgbdFrame::new(frames[0].gt_color.clone(), frames[0].gt_depth8.clone(), window).unwrap();
    let cloud = backproject(&frame, &CameraIntrinsics::synthetic(32, 32), window).unwrap();
    assert!(!cloud.is_empty());
    let path = dir.path().join("cloud.ply");
    export_ply(&cloud, &path).unwrap();

    let parsed = independent_ply_parse(&std::fs::read(&path).unwrap());
    assert_eq!(parsed.points.len(), cloud.points.len());
    for (a, b) in parsed.points.iter().zip(&cloud.points) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-4, "{a:?} vs {b:?}");
        }
    }
    assert_eq!(parsed.colors, cloud.colors);
}

fn independent_ply_parse(bytes: &[u8]) -> PointCloud {
    // locate header end
    let text_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .expect("header end")
        + 11;
    let header = std::str::from_utf8(&bytes[..text_end]).expect("utf8 header");
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("ply"));
    assert_eq!(lines.next(), Some("format binary_little_endian 1.0"));
    let mut count = 0usize;
    let mut props: Vec<(String, String)> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.parse().unwrap();
        } else if let Some(rest) = line.strip_prefix("property ") {
            let mut it = rest.split(' ');
            props.push((it.next().unwrap().into(), it.next().unwrap().into()));
        }
    }
    assert_eq!(
        props,
        vec![
            ("float".to_string(), "x".to_string()),
            ("float".to_string(), "y".to_string()),
            ("float".to_string(), "z".to_string()),
            ("uchar".to_string(), "red".to_string()),
            ("uchar".to_string(), "green".to_string()),
            ("uchar".to_string(), "blue".to_string()),
        ]
    );
    let mut cloud = PointCloud::default();
    let mut off = text_end;
    for _ in 0..count {
        let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        cloud.points.push([f(off), f(off + 4), f(off + 8)]);
        cloud.colors.push([bytes[off + 12], bytes[off + 13], bytes[off + 14]]);
        off += 15;
    }
    assert_eq!(off, bytes.len(), "no trailing bytes");
    cloud
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_training_are_bit_identical() {
    // the rayon kernels only split disjoint output rows, so the sequential
    // fallback must produce byte-identical checkpoints
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_toy_dataset(&data, 3, 32, 13).unwrap();
    let cfg = toy_cfg(32, 2);
    let run = |sequential: bool, out: &std::path::Path| {
        facegan_nn::parallel::set_sequential(sequential);
        let outcome = run_training(&data, &cfg, out, None).unwrap();
        facegan_nn::parallel::set_sequential(false);
        std::fs::read(&outcome.checkpoint).unwrap()
    };
    let par = run(false, &dir.path().join("par"));
    let seq = run(true, &dir.path().join("seq"));
    assert_eq!(par, seq);
}

#[test]
fn rejected_frames_are_skipped_not_fatal() {
    // a frame without stored annotations must not abort landmarking
    let dir = tempfile::tempdir().unwrap();
    let window = facegan::preprocess::DepthWindow::default();
    write_raw_dataset(dir.path(), 3, 96, window, 4).unwrap();
    // remove one annotation file
    std::fs::remove_file(dataset::raw_dir(dir.path()).join(dataset::lms_name(2))).unwrap();
    let backend = AnnotationBackend {
        dir: dataset::raw_dir(dir.path()),
    };
    let mut kept = Vec::new();
    for id in [1u64, 2, 3] {
        let color = load_rgb(&dataset::raw_dir(dir.path()).join(dataset::color_name(id))).unwrap();
        match detect_landmarks(&color, id, &backend) {
            Ok(set) => kept.push(set.source_frame),
            Err(facegan::PipelineError::NoFace { frame_id }) => assert_eq!(frame_id, 2),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    assert_eq!(kept, vec![1, 3]);
}

#[test]
fn eval_frames_missing_depth_yield_error_records() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path(), 2, 32, 8).unwrap();
    let ids = dataset::discover_frames(&dataset::processed_dir(dir.path())).unwrap();
    let mut frames = dataset::load_eval_frames(dir.path(), &ids).unwrap();
    // wipe ground-truth depth of one frame: disjoint supports
    frames[0].gt_depth8 = image::GrayImage::new(32, 32);
    let window = facegan::preprocess::DepthWindow::default();
    let replay = ReplaySession {
        frames: frames
            .iter()
            .map(|f: &EvalFrame| {
                (
                    f.frame_id,
                    RgbdFrame::new(f.gt_color.clone(), f.gt_depth8.clone(), window).unwrap(),
                )
            })
            .collect(),
    };
    let lpips = Lpips::random(2);
    let ctx = EvalContext {
        lpips: &lpips,
        window,
        erosion_radius: 3,
        jpeg_equivalence: false,
    };
    let report = evaluate_dataset(&frames, &replay, &ctx).unwrap();
    let bad = report.records.iter().find(|r| r.frame_id == frames[0].frame_id).unwrap();
    assert!(bad.error.is_some());
}
