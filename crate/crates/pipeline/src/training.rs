//! Adversarial training loop: per-sample discriminator step on the halved
//! least-squares loss, then a generator step on the full objective, with
//! the constant-then-linear-decay learning-rate schedule, deterministic
//! splitting, checkpointing and line-delimited epoch reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use facegan_nn::{Adam, ParamCtx, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::dataset::{self, TrainingSample};
use crate::error::{PipelineError, Result};
use crate::model::{
    build_discriminator_loss, build_generator_loss, losses::rgb_slice, Generator, Lpips,
    MultiScaleDiscriminator, INIT_STD,
};

/// Training schedule and reproducibility knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: u32,
    pub lr_initial: f64,
    pub lr_constant_epochs: u32,
    pub lr_decay_epochs: u32,
    pub seed: u64,
    pub split_train_fraction: f64,
    pub checkpoint_every: u32,
    pub keep_last: u32,
    pub disc_loss_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            lr_initial: 0.0002,
            lr_constant_epochs: 30,
            lr_decay_epochs: 70,
            seed: 0,
            // 6:1 frame holdout; reproduces the published split sizes
            split_train_fraction: 6.0 / 7.0,
            checkpoint_every: 10,
            keep_last: 3,
            disc_loss_factor: 0.5,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_constant_epochs + self.lr_decay_epochs != self.epochs {
            return Err(PipelineError::Config(format!(
                "lr schedule {} + {} must equal epochs {}",
                self.lr_constant_epochs, self.lr_decay_epochs, self.epochs
            )));
        }
        if self.batch_size != 1 {
            return Err(PipelineError::Config(
                "only batch size 1 is supported".into(),
            ));
        }
        if !(self.split_train_fraction > 0.0 && self.split_train_fraction < 1.0) {
            return Err(PipelineError::Config(
                "split fraction must lie in (0, 1)".into(),
            ));
        }
        if self.lr_initial < 0.0 || self.disc_loss_factor < 0.0 {
            return Err(PipelineError::Config("negative rate or factor".into()));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: constant for the first
/// `lr_constant_epochs`, then linear to zero over the remaining
/// `lr_decay_epochs`.
pub fn learning_rate(epoch: u32, cfg: &TrainConfig) -> Result<f64> {
    if epoch < 1 || epoch > cfg.epochs {
        return Err(PipelineError::Contract(format!(
            "epoch {epoch} outside 1..={}",
            cfg.epochs
        )));
    }
    if epoch <= cfg.lr_constant_epochs {
        Ok(cfg.lr_initial)
    } else {
        let into_decay = (epoch - cfg.lr_constant_epochs) as f64;
        Ok(cfg.lr_initial * (1.0 - into_decay / cfg.lr_decay_epochs as f64))
    }
}

/// Deterministic disjoint split. The held-out size is
/// ceil(N * (1 - fraction)), evaluated with a snap tolerance so exact
/// rational fractions are not wrecked by float rounding.
pub fn split_dataset<T>(samples: Vec<T>, cfg: &TrainConfig) -> Result<(Vec<T>, Vec<T>)> {
    let n = samples.len();
    if n < 2 {
        return Err(PipelineError::Validation(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let (n_train, n_test) = split_sizes(n, cfg.split_train_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4c49_5450_u64);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = (next_u64(&mut rng) % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let mut take_train = vec![false; n];
    for &idx in order.iter().take(n_train) {
        take_train[idx] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for (flag, s) in take_train.into_iter().zip(samples) {
        if flag {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

/// (train, test) sizes for a dataset of `n` under a train fraction.
pub fn split_sizes(n: usize, train_fraction: f64) -> (usize, usize) {
    let t = n as f64 * (1.0 - train_fraction);
    let n_test = ((t - 1e-9).ceil().max(1.0) as usize).min(n - 1);
    (n - n_test, n_test)
}

fn next_u64(rng: &mut ChaCha8Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}

/// Stateless per-event RNG: mixing the master seed with epoch, step and a
/// role salt makes resumed runs draw identical streams without having to
/// persist generator positions.
pub fn derived_rng(seed: u64, epoch: u32, step: u32, salt: u64) -> ChaCha8Rng {
    let mut x = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(step as u64)
        .wrapping_add(salt.wrapping_mul(0xbf58476d1ce4e5b9));
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

const SALT_DROPOUT: u64 = 1;
const SALT_ORDER: u64 = 2;

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub lr: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub g_fm: f64,
    pub g_l1: f64,
    pub g_lpips: f64,
    pub g_total: f64,
    pub wall_s: f64,
}

impl EpochReport {
    /// The deterministic fields (everything but wall time).
    pub fn loss_fields(&self) -> [f64; 7] {
        [
            self.lr,
            self.d_total,
            self.g_adv,
            self.g_fm,
            self.g_l1,
            self.g_lpips,
            self.g_total,
        ]
    }
}

pub struct Trainer {
    pub cfg: PipelineConfig,
    pub gen: Generator,
    pub gen_store: ParamStore,
    pub disc: MultiScaleDiscriminator,
    pub disc_store: ParamStore,
    pub lpips: Option<Lpips>,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Completed epochs.
    pub epoch: u32,
}

impl Trainer {
    /// Fresh trainer with Gaussian-initialized weights.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut gen_store = ParamStore::new();
        let gen = Generator::new(&mut gen_store, cfg.gen)?;
        gen_store.init_gaussian(INIT_STD, cfg.train.seed);
        let mut disc_store = ParamStore::new();
        let disc = MultiScaleDiscriminator::new(&mut disc_store, cfg.disc, cfg.gen.image_size)?;
        disc_store.init_gaussian(INIT_STD, cfg.train.seed.wrapping_add(1));
        let lpips = Lpips::from_backend(&cfg.lpips_backend)?;
        let gen_opt = Adam::new(&gen_store, cfg.train.adam_beta1, cfg.train.adam_beta2);
        let disc_opt = Adam::new(&disc_store, cfg.train.adam_beta1, cfg.train.adam_beta2);
        Ok(Self {
            cfg,
            gen,
            gen_store,
            disc,
            disc_store,
            lpips,
            gen_opt,
            disc_opt,
            epoch: 0,
        })
    }

    /// Resume from a checkpoint file.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let full = checkpoint::load_full(path)?;
        let lpips = Lpips::from_backend(&full.cfg.lpips_backend)?;
        Ok(Self {
            cfg: full.cfg,
            gen: full.gen,
            gen_store: full.gen_store,
            disc: full.disc,
            disc_store: full.disc_store,
            lpips,
            gen_opt: full.gen_opt,
            disc_opt: full.disc_opt,
            epoch: full.epoch,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            &self.cfg,
            self.epoch,
            &self.gen_store,
            &self.disc_store,
            &self.gen_opt,
            &self.disc_opt,
        )
    }

    /// Discriminator step then generator step on one sample.
    fn train_step(
        &mut self,
        sample: &TrainingSample,
        epoch: u32,
        step: u32,
        lr: f64,
    ) -> Result<StepLosses> {
        let weights = self.cfg.loss.clone();
        let factor = self.cfg.train.disc_loss_factor;

        // --- generator forward (recorded once, reused for both steps) ---
        let tape_g = Tape::new(true);
        let gen_ctx = ParamCtx::trainable(&self.gen_store);
        let x = tape_g.constant(sample.flm.clone());
        let y = tape_g.constant(sample.target.clone());
        let mut dropout = derived_rng(self.cfg.train.seed, epoch, step, SALT_DROPOUT);
        let fake = self
            .gen
            .forward(&tape_g, &gen_ctx, x, Some(&mut dropout));
        let fake_img = tape_g.value(fake);

        // --- discriminator step (fake detached) ---
        let d_breakdown = {
            let tape_d = Tape::new(true);
            let disc_ctx = ParamCtx::trainable(&self.disc_store);
            let xd = tape_d.constant(sample.flm.clone());
            let yd = tape_d.constant(sample.target.clone());
            let fd = tape_d.constant(fake_img.clone());
            let real = self.disc.forward(&tape_d, &disc_ctx, yd, xd);
            let fake_resp = self.disc.forward(&tape_d, &disc_ctx, fd, xd);
            let (loss, per_scale) = build_discriminator_loss(&tape_d, &real, &fake_resp, factor);
            let total = tape_d.value(loss).item();
            check_finite(total, "discriminator", epoch, sample.frame_id)?;
            self.disc_store.zero_grads();
            tape_d.backward_into(loss, &mut self.disc_store);
            self.disc_opt.step(&mut self.disc_store, lr);
            crate::model::DiscLossBreakdown {
                per_scale: per_scale.iter().map(|&v| tape_d.value(v).item()).collect(),
                total,
            }
        };

        // --- generator step against the updated discriminator ---
        let disc_ctx = ParamCtx::frozen(&self.disc_store);
        let fake_resp = self.disc.forward(&tape_g, &disc_ctx, fake, x);
        let real_resp = self.disc.forward(&tape_g, &disc_ctx, y, x);
        let real_features: Vec<Vec<Tensor>> = real_resp
            .iter()
            .map(|s| s.features.iter().map(|&f| tape_g.value(f)).collect())
            .collect();
        let fake_rgb = rgb_slice(&tape_g, fake);
        let real_rgb = rgb_slice(&tape_g, y);
        let (g_loss, g_breakdown) = build_generator_loss(
            &tape_g,
            &fake_resp,
            &real_features,
            fake,
            y,
            real_rgb,
            fake_rgb,
            &weights,
            self.lpips.as_ref(),
        )?;
        for (value, term) in [
            (g_breakdown.adv, "generator-adversarial"),
            (g_breakdown.fm_weighted, "feature-matching"),
            (g_breakdown.l1_weighted, "l1"),
            (g_breakdown.lpips_weighted, "perceptual"),
        ] {
            check_finite(value, term, epoch, sample.frame_id)?;
        }
        self.gen_store.zero_grads();
        tape_g.backward_into(g_loss, &mut self.gen_store);
        self.gen_opt.step(&mut self.gen_store, lr);

        Ok(StepLosses {
            d: d_breakdown,
            g: g_breakdown,
        })
    }

    /// One pass over the shuffled training set.
    pub fn train_epoch(&mut self, train: &[TrainingSample], epoch: u32) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(PipelineError::Validation("empty training set".into()));
        }
        let start = Instant::now();
        let lr = learning_rate(epoch, &self.cfg.train)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = derived_rng(self.cfg.train.seed, epoch, 0, SALT_ORDER);
        for i in (1..order.len()).rev() {
            let j = (next_u64(&mut rng) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut acc = [0.0f64; 6];
        for (step, &idx) in order.iter().enumerate() {
            let losses = self.train_step(&train[idx], epoch, step as u32, lr)?;
            acc[0] += losses.d.total;
            acc[1] += losses.g.adv;
            acc[2] += losses.g.fm_weighted;
            acc[3] += losses.g.l1_weighted;
            acc[4] += losses.g.lpips_weighted;
            acc[5] += losses.g.total;
        }
        let n = train.len() as f64;
        self.epoch = epoch;
        Ok(EpochReport {
            epoch,
            lr,
            d_total: acc[0] / n,
            g_adv: acc[1] / n,
            g_fm: acc[2] / n,
            g_l1: acc[3] / n,
            g_lpips: acc[4] / n,
            g_total: acc[5] / n,
            wall_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Mean inference-mode L1 against targets over at most `cap` samples.
    pub fn mean_l1(&self, samples: &[TrainingSample], cap: usize) -> f64 {
        let take = samples.len().min(cap.max(1));
        if take == 0 {
            return f64::NAN;
        }
        let mut total = 0.0;
        for s in &samples[..take] {
            let tape = Tape::new(false);
            let ctx = ParamCtx::frozen(&self.gen_store);
            let x = tape.constant(s.flm.clone());
            let out = self.gen.forward(&tape, &ctx, x, None);
            let out_t = tape.value(out);
            let l1: f64 = out_t
                .data()
                .iter()
                .zip(s.target.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / out_t.len() as f64;
            total += l1;
        }
        total / take as f64
    }
}

pub struct StepLosses {
    pub d: crate::model::DiscLossBreakdown,
    pub g: crate::model::GenLossBreakdown,
}

fn check_finite(value: f64, term: &str, epoch: u32, frame_id: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::NonFiniteLoss {
            term: term.to_string(),
            epoch,
            frame_id,
        })
    }
}

/// Artifacts of a completed run.
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub reports: Vec<EpochReport>,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
}

/// Full training entry point: load samples, split, train, checkpoint every
/// `checkpoint_every` epochs and at the end, keep the last few plus the
/// best-by-validation-L1 checkpoint, append one JSONL report per epoch.
pub fn run_training(
    data_root: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;

    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer::from_checkpoint(ckpt)?;
            if t.cfg.gen != cfg.gen || t.cfg.disc != cfg.disc {
                return Err(PipelineError::Config(
                    "resume checkpoint architecture differs from requested config".into(),
                ));
            }
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let cfg = trainer.cfg.clone();

    let samples = dataset::load_training_samples(data_root, cfg.gen.image_size)?;
    // missing FLMs and size mismatches already fail above with frame ids
    let (train, test) = split_dataset(samples, &cfg.train)?;
    let train_ids: Vec<u64> = train.iter().map(|s| s.frame_id).collect();
    let test_ids: Vec<u64> = test.iter().map(|s| s.frame_id).collect();

    cfg.write(&out_dir.join("config.cfg"))?;
    dataset::write_split_file(&out_dir.join("split.txt"), &train_ids, &test_ids)?;
    // the split is dataset metadata too: keep a copy beside the frames
    let meta = dataset::meta_dir(data_root);
    if meta.exists() {
        dataset::write_split_file(&meta.join("split.txt"), &train_ids, &test_ids)?;
    }
    let log_path = out_dir.join("train_log.jsonl");

    let ckpt_path = |epoch: u32| out_dir.join(format!("ckpt_epoch_{epoch:04}.fgc"));
    let mut reports = Vec::new();
    let mut best_l1 = f64::INFINITY;

    if cfg.train.epochs == 0 || trainer.epoch >= cfg.train.epochs {
        let path = ckpt_path(trainer.epoch);
        trainer.save_checkpoint(&path)?;
        return Ok(RunOutcome {
            checkpoint: path,
            reports,
            train_ids,
            test_ids,
        });
    }

    let mut last_path = ckpt_path(trainer.epoch);
    for epoch in (trainer.epoch + 1)..=cfg.train.epochs {
        let report = trainer.train_epoch(&train, epoch)?;
        append_jsonl(&log_path, &report)?;
        log::info!(
            "epoch {epoch}: d={:.4} g={:.4} (l1 {:.4}) lr={:.6}",
            report.d_total,
            report.g_total,
            report.g_l1,
            report.lr
        );
        reports.push(report);
        let due = epoch % cfg.train.checkpoint_every == 0 || epoch == cfg.train.epochs;
        if due {
            let path = ckpt_path(epoch);
            trainer.save_checkpoint(&path)?;
            last_path = path.clone();
            let val = trainer.mean_l1(if test.is_empty() { &train } else { &test }, 8);
            if val < best_l1 {
                best_l1 = val;
                std::fs::copy(&path, out_dir.join("ckpt_best.fgc"))
                    .map_err(|e| PipelineError::io(out_dir, e))?;
            }
            prune_checkpoints(out_dir, cfg.train.keep_last as usize)?;
        }
    }
    Ok(RunOutcome {
        checkpoint: last_path,
        reports,
        train_ids,
        test_ids,
    })
}

fn append_jsonl(path: &Path, report: &EpochReport) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    let line = serde_json::to_string(report)
        .map_err(|e| PipelineError::Other(format!("report serialization: {e}")))?;
    writeln!(file, "{line}").map_err(|e| PipelineError::io(path, e))
}

fn prune_checkpoints(dir: &Path, keep_last: usize) -> Result<()> {
    let mut epochs: Vec<(u32, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let entry = entry.map_err(|e| PipelineError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("ckpt_epoch_")
            .and_then(|s| s.strip_suffix(".fgc"))
        {
            if let Ok(e) = num.parse::<u32>() {
                epochs.push((e, entry.path()));
            }
        }
    }
    epochs.sort_unstable_by_key(|(e, _)| *e);
    if epochs.len() > keep_last {
        let cut = epochs.len() - keep_last;
        for (_, path) in &epochs[..cut] {
            std::fs::remove_file(path).map_err(|e| PipelineError::io(path, e))?;
        }
    }
    Ok(())
}
