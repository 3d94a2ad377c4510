//! The conditional GAN: a U-Net generator mapping a 1-channel landmark map
//! to a 4-channel RGBD image, three patch discriminators on the 5-channel
//! (RGBD + FLM) concatenation, and the adversarial / feature-matching /
//! L1 / perceptual loss stack.

mod discriminator;
mod generator;
mod lpips;
pub mod losses;

pub use discriminator::{MultiScaleDiscriminator, PatchResponse, ScaleResponse, ScaleVars};
pub use generator::Generator;
pub use lpips::{Lpips, LpipsBackend};
pub use losses::{
    build_discriminator_loss, build_generator_loss, loss_discriminator, loss_generator,
    DiscLossBreakdown, GenLossBreakdown, DISC_LOSS_FACTOR,
};

use facegan_nn::{ParamCtx, ParamStore, Tensor};

use crate::error::{PipelineError, Result};
use crate::preprocess::NormalizedImage;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// U-Net generator configuration. Stage widths double from `base_width`
/// and cap at `8 * base_width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub image_size: u32,
    pub base_width: usize,
    pub depth: usize,
    /// Number of innermost decoder stages with dropout.
    pub dropout_stages: usize,
    pub dropout_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 4,
            image_size: 512,
            base_width: 64,
            depth: 8,
            dropout_stages: 3,
            dropout_rate: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels != 4 {
            return Err(PipelineError::Config(format!(
                "generator must emit 4 channels (RGB + D), got {}",
                self.out_channels
            )));
        }
        if self.in_channels != 1 {
            return Err(PipelineError::Config(format!(
                "generator consumes the 1-channel FLM, got {} channels",
                self.in_channels
            )));
        }
        if self.depth < 2 {
            return Err(PipelineError::Config("generator depth must be >= 2".into()));
        }
        let div = 1u32 << self.depth;
        if self.image_size % div != 0 || self.image_size / div < 1 {
            return Err(PipelineError::Config(format!(
                "image size {} not divisible into {} stages",
                self.image_size, self.depth
            )));
        }
        if self.dropout_stages > self.depth {
            return Err(PipelineError::Config("more dropout stages than depth".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PipelineError::Config("dropout rate outside [0, 1)".into()));
        }
        if self.base_width == 0 {
            return Err(PipelineError::Config("zero base width".into()));
        }
        Ok(())
    }

    /// Encoder output width at stage `k` (0-based).
    pub fn stage_width(&self, k: usize) -> usize {
        (self.base_width << k.min(3)).min(self.base_width * 8)
    }
}

/// Multi-scale patch discriminator configuration. Exactly three scales; the
/// second and third see 2x and 4x average-pooled input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub num_scales: usize,
    /// Number of stride-2 convolutions per scale before the stride-1 pair.
    pub layers_per_scale: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 5,
            num_scales: 3,
            layers_per_scale: 3,
            base_width: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales != 3 {
            return Err(PipelineError::Config(format!(
                "exactly 3 discriminator scales required, got {}",
                self.num_scales
            )));
        }
        if self.in_channels != 5 {
            return Err(PipelineError::Config(format!(
                "discriminators consume 5 channels (RGBD + FLM), got {}",
                self.in_channels
            )));
        }
        if self.layers_per_scale == 0 || self.base_width == 0 {
            return Err(PipelineError::Config("degenerate discriminator".into()));
        }
        Ok(())
    }

    /// Patch-score matrix size for a given input size, per scale. This is
    /// the closed-form conv-shape recurrence for the layer stack.
    pub fn score_shape(&self, input_size: u32, scale: usize) -> Result<(u32, u32)> {
        let mut s = input_size >> scale; // avg-pooled input
        if input_size % (1 << scale) != 0 {
            return Err(PipelineError::Config(format!(
                "input {input_size} not divisible for scale {scale}"
            )));
        }
        let conv = |n: u32, stride: u32| -> Result<u32> {
            // k=4, p=1
            if n + 2 < 4 {
                return Err(PipelineError::Config(format!(
                    "discriminator scale {scale} collapses at size {n}"
                )));
            }
            Ok((n + 2 - 4) / stride + 1)
        };
        for _ in 0..self.layers_per_scale {
            s = conv(s, 2)?;
        }
        s = conv(s, 1)?; // widening stride-1 layer
        s = conv(s, 1)?; // score layer
        if s == 0 {
            return Err(PipelineError::Config(format!(
                "empty patch matrix at scale {scale}"
            )));
        }
        Ok((s, s))
    }
}

/// Loss weights of the generator objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_l1: f64,
    pub lambda_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 10.0,
            lambda_l1: 100.0,
            lambda_lpips: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_fm < 0.0 || self.lambda_l1 < 0.0 || self.lambda_lpips < 0.0 {
            return Err(PipelineError::Config("negative loss weight".into()));
        }
        Ok(())
    }
}

/// Run the generator on a normalized FLM (inference mode: no dropout).
pub fn generate(
    gen: &Generator,
    store: &ParamStore,
    flm: &NormalizedImage,
) -> Result<NormalizedImage> {
    let t = flm.tensor();
    let size = gen.config().image_size as usize;
    if t.dims() != [gen.config().in_channels, size, size] {
        return Err(PipelineError::Contract(format!(
            "generator input must be {:?}, got {:?}",
            [gen.config().in_channels, size, size],
            t.dims()
        )));
    }
    let tape = facegan_nn::Tape::new(false);
    let ctx = ParamCtx::frozen(store);
    let x = tape.constant(t.clone());
    let y = gen.forward(&tape, &ctx, x, None);
    NormalizedImage::new(tape.value(y))
}

/// Run all three discriminators on a 4-channel RGBD tensor and its FLM.
pub fn discriminate(
    disc: &MultiScaleDiscriminator,
    store: &ParamStore,
    rgbd: &Tensor,
    flm: &Tensor,
) -> Result<PatchResponse> {
    if rgbd.dims().len() != 3 || rgbd.c() != 4 {
        return Err(PipelineError::Contract(format!(
            "discriminator expects a 4-channel RGBD tensor, got {:?}",
            rgbd.dims()
        )));
    }
    if flm.dims().len() != 3 || flm.c() != 1 || flm.h() != rgbd.h() || flm.w() != rgbd.w() {
        return Err(PipelineError::Contract(format!(
            "FLM {:?} does not align with RGBD {:?}",
            flm.dims(),
            rgbd.dims()
        )));
    }
    let tape = facegan_nn::Tape::new(false);
    let ctx = ParamCtx::frozen(store);
    let rgbd_v = tape.constant(rgbd.clone());
    let flm_v = tape.constant(flm.clone());
    let scales = disc.forward(&tape, &ctx, rgbd_v, flm_v);
    Ok(PatchResponse {
        scales: scales
            .into_iter()
            .map(|s| ScaleResponse {
                score: tape.value(s.score),
                features: s.features.iter().map(|&f| tape.value(f)).collect(),
            })
            .collect(),
    })
}
