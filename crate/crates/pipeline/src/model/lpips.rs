//! Pluggable perceptual distance: deep-feature differences with per-pixel
//! channel normalization, summed over stages.
//!
//! The metric backbone is a small frozen conv stack. Production loads
//! externally trained weights from a checkpoint container; the default
//! backend draws fixed-seed random features, which is stable enough for
//! regression tests and toy training but carries no perceptual-quality
//! claim. Distances are always computed on the RGB channels only.

use std::path::{Path, PathBuf};

use facegan_nn::blob::{decode_params_into, encode_params, Blob, BlobWriter};
use facegan_nn::{InitKind, ParamCtx, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PipelineError, Result};

/// Where perceptual-metric weights come from.
#[derive(Clone, Debug, PartialEq)]
pub enum LpipsBackend {
    /// Fixed-seed random features.
    Random { seed: u64 },
    /// Externally supplied weights in the checkpoint container format.
    File(PathBuf),
    /// No metric available; only valid with a zero perceptual weight.
    Off,
}

impl Default for LpipsBackend {
    fn default() -> Self {
        LpipsBackend::Random { seed: 0x4c50_4950 }
    }
}

/// Stage widths of the backbone.
const STAGE_WIDTHS: [usize; 3] = [8, 16, 16];
const NORM_EPS: f64 = 1e-10;

struct Stage {
    weight: ParamId,
    bias: ParamId,
}

pub struct Lpips {
    store: ParamStore,
    stages: Vec<Stage>,
}

impl Lpips {
    fn register(store: &mut ParamStore) -> Vec<Stage> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in STAGE_WIDTHS.iter().enumerate() {
            stages.push(Stage {
                weight: store.register(&format!("lpips.s{i}.weight"), &[w, cin, 3, 3], InitKind::Gaussian),
                bias: store.register(&format!("lpips.s{i}.bias"), &[w], InitKind::Zero),
            });
            cin = w;
        }
        stages
    }

    /// Fixed-seed random-feature metric with He-scaled weights.
    pub fn random(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let stages = Self::register(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stage in &stages {
            let e = store.entry_mut(stage.weight);
            let fan_in: usize = e.dims[1] * e.dims[2] * e.dims[3];
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for v in &mut e.data {
                *v = normal.sample(&mut rng);
            }
        }
        Self { store, stages }
    }

    /// Load metric weights from a checkpoint container.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut store = ParamStore::new();
        let stages = Self::register(&mut store);
        let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
        let blob = Blob::read(std::io::BufReader::new(file))?;
        decode_params_into(&mut store, blob.require("LPIP")?)?;
        Ok(Self { store, stages })
    }

    /// Persist metric weights (the format `from_file` expects).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let mut w = BlobWriter::new(std::io::BufWriter::new(file))?;
        w.block(b"LPIP", &encode_params(&self.store))?;
        w.finish()?;
        Ok(())
    }

    /// Instantiate from a backend selector. `Off` yields `None`.
    pub fn from_backend(backend: &LpipsBackend) -> Result<Option<Self>> {
        match backend {
            LpipsBackend::Random { seed } => Ok(Some(Self::random(*seed))),
            LpipsBackend::File(path) => Ok(Some(Self::from_file(path)?)),
            LpipsBackend::Off => Ok(None),
        }
    }

    /// Normalized feature taps for a 3-channel input on the given tape.
    pub fn features(&self, tape: &Tape, x: Var) -> Vec<Var> {
        let ctx = ParamCtx::frozen(&self.store);
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            let w = tape.param(&ctx, stage.weight);
            let b = tape.param(&ctx, stage.bias);
            cur = tape.conv2d(cur, w, Some(b), 1, 1);
            cur = tape.relu(cur);
            taps.push(tape.channel_l2_normalize(cur, NORM_EPS));
            if i + 1 < self.stages.len() {
                cur = tape.avg_pool2d(cur, 2);
            }
        }
        taps
    }

    /// Perceptual distance as a tape node: sum over stages of the spatial
    /// mean of squared normalized-feature differences (channel-summed).
    pub fn distance_on_tape(&self, tape: &Tape, a: Var, b: Var) -> Var {
        let fa = self.features(tape, a);
        let fb = self.features(tape, b);
        let mut total: Option<Var> = None;
        for (na, nb) in fa.into_iter().zip(fb) {
            let channels = tape.dims(na)[0] as f64;
            let d = tape.sub(na, nb);
            let sq = tape.square(d);
            let mean = tape.mean_all(sq);
            let term = tape.scale(mean, channels);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        total.expect("at least one stage")
    }

    /// Plain perceptual distance between two RGB tensors in [-1, 1].
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(PipelineError::Contract(format!(
                "perceptual metric dimensions differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        if a.dims().len() != 3 || a.c() != 3 {
            return Err(PipelineError::Contract(format!(
                "perceptual metric expects 3-channel input, got {:?}",
                a.dims()
            )));
        }
        let tape = Tape::new(false);
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let d = self.distance_on_tape(&tape, av, bv);
        Ok(tape.value(d).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(scale: f64) -> Tensor {
        let n = 3 * 16 * 16;
        Tensor::new(
            &[3, 16, 16],
            (0..n).map(|i| ((i as f64) * 0.11).sin() * scale).collect(),
        )
    }

    #[test]
    fn identical_inputs_zero_distance() {
        let m = Lpips::random(1);
        let a = ramp(0.8);
        assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let m = Lpips::random(2);
        let a = ramp(0.8);
        let b = ramp(-0.5);
        let ab = m.distance(&a, &b).unwrap();
        let ba = m.distance(&b, &a).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);
    }

    #[test]
    fn seeded_metric_is_reproducible() {
        let a = ramp(0.3);
        let b = ramp(0.9);
        let d1 = Lpips::random(7).distance(&a, &b).unwrap();
        let d2 = Lpips::random(7).distance(&a, &b).unwrap();
        assert_eq!(d1, d2);
        let d3 = Lpips::random(8).distance(&a, &b).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metric.fgc");
        let m = Lpips::random(5);
        m.save(&path).unwrap();
        let loaded = Lpips::from_file(&path).unwrap();
        let a = ramp(0.4);
        let b = ramp(0.6);
        assert_eq!(
            m.distance(&a, &b).unwrap(),
            loaded.distance(&a, &b).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let m = Lpips::random(1);
        let a = Tensor::zeros(&[4, 8, 8]);
        assert!(m.distance(&a, &a).is_err());
    }
}
