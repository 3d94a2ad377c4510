//! Flat key-value configuration with section prefixes
//! (`train.epochs=100`), chosen for diff-ability. Serialization is
//! canonical (sorted keys, shortest-roundtrip floats), so
//! parse(serialize(c)) reproduces c exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{PipelineError, Result};
use crate::model::{DiscriminatorConfig, GeneratorConfig, LossWeights, LpipsBackend};
use crate::preprocess::DepthWindow;
use crate::training::TrainConfig;

/// Ordered key-value map underlying every config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatMap(pub BTreeMap<String, String>);

impl FlatMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                PipelineError::Config(format!("key '{key}': cannot parse '{raw}'"))
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .0
            .get(key)
            .ok_or_else(|| PipelineError::Config(format!("missing key '{key}'")))?;
        raw.parse()
            .map_err(|_| PipelineError::Config(format!("key '{key}': cannot parse '{raw}'")))
    }
}

/// Landmark-stage options.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkOptions {
    /// Expand the crop to a square before resizing (`false` restores the
    /// literal non-square crop behavior).
    pub square_crop: bool,
}

impl Default for LandmarkOptions {
    fn default() -> Self {
        Self { square_crop: true }
    }
}

/// Evaluation-stage options.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub erosion_radius: u32,
    pub jpeg_equivalence: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            erosion_radius: 3,
            jpeg_equivalence: false,
        }
    }
}

/// Merged view of every stage configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub window: DepthWindow,
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub loss: LossWeights,
    pub lpips_backend: LpipsBackend,
    pub train: TrainConfig,
    pub landmarks: LandmarkOptions,
    pub eval: EvalOptions,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.gen.validate()?;
        self.disc.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if matches!(self.lpips_backend, LpipsBackend::Off) && self.loss.lambda_lpips != 0.0 {
            return Err(PipelineError::Config(
                "lpips backend off requires lambda_lpips = 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> FlatMap {
        let mut m = FlatMap::default();
        m.set("window.near_mm", self.window.near_mm);
        m.set("window.span_mm", self.window.span_mm);
        m.set("gen.in_channels", self.gen.in_channels);
        m.set("gen.out_channels", self.gen.out_channels);
        m.set("gen.image_size", self.gen.image_size);
        m.set("gen.base_width", self.gen.base_width);
        m.set("gen.depth", self.gen.depth);
        m.set("gen.dropout_stages", self.gen.dropout_stages);
        m.set("gen.dropout_rate", self.gen.dropout_rate);
        m.set("disc.in_channels", self.disc.in_channels);
        m.set("disc.num_scales", self.disc.num_scales);
        m.set("disc.layers_per_scale", self.disc.layers_per_scale);
        m.set("disc.base_width", self.disc.base_width);
        m.set("loss.lambda_fm", self.loss.lambda_fm);
        m.set("loss.lambda_l1", self.loss.lambda_l1);
        m.set("loss.lambda_lpips", self.loss.lambda_lpips);
        match &self.lpips_backend {
            LpipsBackend::Random { seed } => {
                m.set("loss.lpips_backend", "random");
                m.set("loss.lpips_seed", seed);
            }
            LpipsBackend::File(path) => {
                m.set("loss.lpips_backend", "file");
                m.set("loss.lpips_file", path.display());
            }
            LpipsBackend::Off => {
                m.set("loss.lpips_backend", "off");
            }
        }
        m.set("train.epochs", self.train.epochs);
        m.set("train.batch_size", self.train.batch_size);
        m.set("train.lr_initial", self.train.lr_initial);
        m.set("train.lr_constant_epochs", self.train.lr_constant_epochs);
        m.set("train.lr_decay_epochs", self.train.lr_decay_epochs);
        m.set("train.seed", self.train.seed);
        m.set("train.split_train_fraction", self.train.split_train_fraction);
        m.set("train.checkpoint_every", self.train.checkpoint_every);
        m.set("train.keep_last", self.train.keep_last);
        m.set("train.disc_loss_factor", self.train.disc_loss_factor);
        m.set("train.adam_beta1", self.train.adam_beta1);
        m.set("train.adam_beta2", self.train.adam_beta2);
        m.set("landmarks.square_crop", self.landmarks.square_crop);
        m.set("eval.erosion_radius", self.eval.erosion_radius);
        m.set("eval.jpeg_equivalence", self.eval.jpeg_equivalence);
        m
    }

    pub fn from_flat(m: &FlatMap) -> Result<Self> {
        let d = PipelineConfig::default();
        let lpips_backend = match m.get("loss.lpips_backend").unwrap_or("random") {
            "random" => LpipsBackend::Random {
                seed: m.parse_or("loss.lpips_seed", match d.lpips_backend {
                    LpipsBackend::Random { seed } => seed,
                    _ => 0,
                })?,
            },
            "file" => LpipsBackend::File(PathBuf::from(
                m.get("loss.lpips_file")
                    .ok_or_else(|| PipelineError::Config("lpips file backend needs loss.lpips_file".into()))?,
            )),
            "off" => LpipsBackend::Off,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown lpips backend '{other}' (expected random, file or off)"
                )))
            }
        };
        let cfg = Self {
            window: DepthWindow {
                near_mm: m.parse_or("window.near_mm", d.window.near_mm)?,
                span_mm: m.parse_or("window.span_mm", d.window.span_mm)?,
            },
            gen: GeneratorConfig {
                in_channels: m.parse_or("gen.in_channels", d.gen.in_channels)?,
                out_channels: m.parse_or("gen.out_channels", d.gen.out_channels)?,
                image_size: m.parse_or("gen.image_size", d.gen.image_size)?,
                base_width: m.parse_or("gen.base_width", d.gen.base_width)?,
                depth: m.parse_or("gen.depth", d.gen.depth)?,
                dropout_stages: m.parse_or("gen.dropout_stages", d.gen.dropout_stages)?,
                dropout_rate: m.parse_or("gen.dropout_rate", d.gen.dropout_rate)?,
            },
            disc: DiscriminatorConfig {
                in_channels: m.parse_or("disc.in_channels", d.disc.in_channels)?,
                num_scales: m.parse_or("disc.num_scales", d.disc.num_scales)?,
                layers_per_scale: m.parse_or("disc.layers_per_scale", d.disc.layers_per_scale)?,
                base_width: m.parse_or("disc.base_width", d.disc.base_width)?,
            },
            loss: LossWeights {
                lambda_fm: m.parse_or("loss.lambda_fm", d.loss.lambda_fm)?,
                lambda_l1: m.parse_or("loss.lambda_l1", d.loss.lambda_l1)?,
                lambda_lpips: m.parse_or("loss.lambda_lpips", d.loss.lambda_lpips)?,
            },
            lpips_backend,
            train: TrainConfig {
                epochs: m.parse_or("train.epochs", d.train.epochs)?,
                batch_size: m.parse_or("train.batch_size", d.train.batch_size)?,
                lr_initial: m.parse_or("train.lr_initial", d.train.lr_initial)?,
                lr_constant_epochs: m.parse_or("train.lr_constant_epochs", d.train.lr_constant_epochs)?,
                lr_decay_epochs: m.parse_or("train.lr_decay_epochs", d.train.lr_decay_epochs)?,
                seed: m.parse_or("train.seed", d.train.seed)?,
                split_train_fraction: m.parse_or("train.split_train_fraction", d.train.split_train_fraction)?,
                checkpoint_every: m.parse_or("train.checkpoint_every", d.train.checkpoint_every)?,
                keep_last: m.parse_or("train.keep_last", d.train.keep_last)?,
                disc_loss_factor: m.parse_or("train.disc_loss_factor", d.train.disc_loss_factor)?,
                adam_beta1: m.parse_or("train.adam_beta1", d.train.adam_beta1)?,
                adam_beta2: m.parse_or("train.adam_beta2", d.train.adam_beta2)?,
            },
            landmarks: LandmarkOptions {
                square_crop: m.parse_or("landmarks.square_crop", d.landmarks.square_crop)?,
            },
            eval: EvalOptions {
                erosion_radius: m.parse_or("eval.erosion_radius", d.eval.erosion_radius)?,
                jpeg_equivalence: m.parse_or("eval.jpeg_equivalence", d.eval.jpeg_equivalence)?,
            },
        };
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_flat(&FlatMap::parse(text)?)
    }

    pub fn serialize(&self) -> String {
        self.to_flat().serialize()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| PipelineError::io(path, e))
    }
}
