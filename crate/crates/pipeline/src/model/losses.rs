//! The adversarial loss stack.
//!
//! Discriminator objective: least-squares patch losses with targets 1
//! (real) and 0 (fake), summed over the three scales, then halved to slow
//! the discriminator relative to the generator.
//!
//! Generator objective: per scale, a least-squares term toward 1 on the
//! fake scores plus the feature-matching term (mean absolute difference of
//! discriminator features between real and fake, averaged over layers);
//! plus weighted L1 on all four channels and the perceptual distance on the
//! RGB channels.

use facegan_nn::tape::{mean_abs_diff, mean_squared_to};
use facegan_nn::{ParamCtx, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::{Generator, Lpips, LossWeights, MultiScaleDiscriminator, PatchResponse, ScaleVars};
use crate::error::{PipelineError, Result};

/// The halving applied to the discriminator objective.
pub const DISC_LOSS_FACTOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscLossBreakdown {
    /// Unhalved per-scale terms: mean((D_k(real)-1)^2) + mean(D_k(fake)^2).
    pub per_scale: Vec<f64>,
    /// factor * sum(per_scale).
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenLossBreakdown {
    /// Per-scale adversarial terms mean((D_k(fake)-1)^2).
    pub adv_per_scale: Vec<f64>,
    /// Per-scale raw feature-matching terms (before lambda).
    pub fm_per_scale: Vec<f64>,
    pub adv: f64,
    pub fm_weighted: f64,
    pub l1_weighted: f64,
    pub lpips_weighted: f64,
    pub total: f64,
}

/// Assemble the discriminator loss on a tape from real/fake responses.
pub fn build_discriminator_loss(
    tape: &Tape,
    real: &[ScaleVars],
    fake: &[ScaleVars],
    factor: f64,
) -> (Var, Vec<Var>) {
    assert_eq!(real.len(), fake.len());
    let mut per_scale = Vec::with_capacity(real.len());
    let mut sum: Option<Var> = None;
    for (r, f) in real.iter().zip(fake) {
        let lr = mean_squared_to(tape, r.score, 1.0);
        let lf = mean_squared_to(tape, f.score, 0.0);
        let term = tape.add(lr, lf);
        per_scale.push(term);
        sum = Some(match sum {
            Some(s) => tape.add(s, term),
            None => term,
        });
    }
    let total = tape.scale(sum.expect("at least one scale"), factor);
    (total, per_scale)
}

/// Assemble the generator loss on a tape. `real` responses provide the
/// feature-matching targets and must come from a gradient-free pass.
pub fn build_generator_loss(
    tape: &Tape,
    fake: &[ScaleVars],
    real_features: &[Vec<Tensor>],
    gen_out: Var,
    target: Var,
    target_rgb: Var,
    gen_out_rgb: Var,
    weights: &LossWeights,
    lpips: Option<&Lpips>,
) -> Result<(Var, GenLossBreakdown)> {
    let mut adv_vars = Vec::with_capacity(fake.len());
    let mut fm_vars = Vec::with_capacity(fake.len());
    let mut total: Option<Var> = None;
    let add = |tape: &Tape, total: &mut Option<Var>, v: Var| {
        *total = Some(match *total {
            Some(t) => tape.add(t, v),
            None => v,
        });
    };
    for (f, rf) in fake.iter().zip(real_features) {
        let adv = mean_squared_to(tape, f.score, 1.0);
        adv_vars.push(adv);
        add(tape, &mut total, adv);

        assert_eq!(f.features.len(), rf.len());
        let mut fm_sum: Option<Var> = None;
        for (ff, rt) in f.features.iter().zip(rf) {
            let rt_v = tape.constant(rt.clone());
            let layer = mean_abs_diff(tape, *ff, rt_v);
            fm_sum = Some(match fm_sum {
                Some(s) => tape.add(s, layer),
                None => layer,
            });
        }
        let fm_raw = tape.scale(fm_sum.expect("layers"), 1.0 / rf.len() as f64);
        fm_vars.push(fm_raw);
        let fm_weighted = tape.scale(fm_raw, weights.lambda_fm);
        add(tape, &mut total, fm_weighted);
    }
    let l1_raw = mean_abs_diff(tape, gen_out, target);
    let l1_weighted = tape.scale(l1_raw, weights.lambda_l1);
    add(tape, &mut total, l1_weighted);

    let lpips_weighted = match (lpips, weights.lambda_lpips) {
        (_, l) if l == 0.0 => tape.constant(Tensor::scalar(0.0)),
        (Some(metric), l) => {
            let d = metric.distance_on_tape(tape, gen_out_rgb, target_rgb);
            tape.scale(d, l)
        }
        (None, _) => {
            return Err(PipelineError::Config(
                "perceptual metric unavailable but lambda_lpips != 0".into(),
            ))
        }
    };
    add(tape, &mut total, lpips_weighted);

    let total = total.expect("nonempty loss");
    let breakdown = GenLossBreakdown {
        adv_per_scale: adv_vars.iter().map(|&v| tape.value(v).item()).collect(),
        fm_per_scale: fm_vars.iter().map(|&v| tape.value(v).item()).collect(),
        adv: adv_vars.iter().map(|&v| tape.value(v).item()).sum(),
        fm_weighted: fm_vars
            .iter()
            .map(|&v| tape.value(v).item() * weights.lambda_fm)
            .sum(),
        l1_weighted: tape.value(l1_weighted).item(),
        lpips_weighted: tape.value(lpips_weighted).item(),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Plain (gradient-free) discriminator loss from patch responses.
pub fn loss_discriminator(real: &PatchResponse, fake: &PatchResponse, factor: f64) -> DiscLossBreakdown {
    assert_eq!(real.scales.len(), fake.scales.len());
    let mut per_scale = Vec::new();
    for (r, f) in real.scales.iter().zip(&fake.scales) {
        let lr: f64 = r.score.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() / r.score.len() as f64;
        let lf: f64 = f.score.iter().map(|s| s * s).sum::<f64>() / f.score.len() as f64;
        per_scale.push(lr + lf);
    }
    DiscLossBreakdown {
        total: factor * per_scale.iter().sum::<f64>(),
        per_scale,
    }
}

/// Plain generator loss: runs G and the discriminators without gradients.
/// `x` is the normalized FLM, `y_real` the normalized RGBD target.
#[allow(clippy::too_many_arguments)]
pub fn loss_generator(
    gen: &Generator,
    gen_store: &ParamStore,
    disc: &MultiScaleDiscriminator,
    disc_store: &ParamStore,
    x: &Tensor,
    y_real: &Tensor,
    weights: &LossWeights,
    lpips: Option<&Lpips>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<GenLossBreakdown> {
    let tape = Tape::new(false);
    let gen_ctx = ParamCtx::frozen(gen_store);
    let disc_ctx = ParamCtx::frozen(disc_store);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y_real.clone());
    let fake = gen.forward(&tape, &gen_ctx, xv, dropout_rng);
    let fake_resp = disc.forward(&tape, &disc_ctx, fake, xv);
    let real_resp = disc.forward(&tape, &disc_ctx, yv, xv);
    let real_features: Vec<Vec<Tensor>> = real_resp
        .iter()
        .map(|s| s.features.iter().map(|&f| tape.value(f)).collect())
        .collect();
    let fake_rgb = rgb_slice(&tape, fake);
    let real_rgb = rgb_slice(&tape, yv);
    let (_, breakdown) = build_generator_loss(
        &tape,
        &fake_resp,
        &real_features,
        fake,
        yv,
        real_rgb,
        fake_rgb,
        weights,
        lpips,
    )?;
    Ok(breakdown)
}

/// First three channels of a 4-channel tensor as a new constant-free node.
pub fn rgb_slice(tape: &Tape, v: Var) -> Var {
    slice_channels(tape, v, 0, 3)
}

/// Channel slice implemented as a concat-style tape op via sub-tensor copy.
pub fn slice_channels(tape: &Tape, v: Var, start: usize, count: usize) -> Var {
    let t = tape.value(v);
    let (c, h, w) = (t.c(), t.h(), t.w());
    assert!(start + count <= c);
    // forward copy with a backward that scatters into the source range
    tape.channel_slice(v, start, count, (c, h, w))
}
