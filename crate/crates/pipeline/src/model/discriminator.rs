//! Three patch discriminators over the 5-channel (RGBD + FLM)
//! concatenation. Scale k sees the input average-pooled by 2^k; every
//! discriminator emits a patch-score matrix plus its intermediate features
//! for the feature-matching loss.

use facegan_nn::{InitKind, ParamCtx, ParamId, ParamStore, Tape, Tensor, Var};

use super::DiscriminatorConfig;
use crate::error::Result;

const LEAKY_SLOPE: f64 = 0.2;

struct DiscLayer {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
    stride: usize,
}

struct PatchDiscriminator {
    layers: Vec<DiscLayer>,
    score_weight: ParamId,
    score_bias: ParamId,
}

/// Per-scale graph handles produced during a tape forward pass.
pub struct ScaleVars {
    pub features: Vec<Var>,
    pub score: Var,
}

/// Per-scale plain tensors (public `discriminate` output).
#[derive(Clone, Debug)]
pub struct ScaleResponse {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

/// Patch responses of all three scales, coarse scales last.
#[derive(Clone, Debug)]
pub struct PatchResponse {
    pub scales: Vec<ScaleResponse>,
}

pub struct MultiScaleDiscriminator {
    cfg: DiscriminatorConfig,
    scales: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    /// Register parameters under `disc.d<k>.`; validates that every scale
    /// still produces a non-empty patch matrix at `image_size`.
    pub fn new(store: &mut ParamStore, cfg: DiscriminatorConfig, image_size: u32) -> Result<Self> {
        cfg.validate()?;
        for k in 0..cfg.num_scales {
            cfg.score_shape(image_size, k)?;
        }
        let scales = (0..cfg.num_scales)
            .map(|k| Self::build_scale(store, &cfg, k))
            .collect();
        Ok(Self { cfg, scales })
    }

    fn build_scale(store: &mut ParamStore, cfg: &DiscriminatorConfig, k: usize) -> PatchDiscriminator {
        let prefix = format!("disc.d{}", k + 1);
        let mut layers = Vec::new();
        let mut cin = cfg.in_channels;
        let mut width = cfg.base_width;
        for l in 0..cfg.layers_per_scale {
            let name = format!("{prefix}.conv{l}");
            layers.push(DiscLayer {
                weight: store.register(&format!("{name}.weight"), &[width, cin, 4, 4], InitKind::Gaussian),
                bias: store.register(&format!("{name}.bias"), &[width], InitKind::Zero),
                norm: (l != 0).then(|| {
                    (
                        store.register(&format!("{name}.norm.gamma"), &[width], InitKind::One),
                        store.register(&format!("{name}.norm.beta"), &[width], InitKind::Zero),
                    )
                }),
                stride: 2,
            });
            cin = width;
            width = (width * 2).min(cfg.base_width * 8);
        }
        // widening stride-1 layer before the score map
        let name = format!("{prefix}.conv{}", cfg.layers_per_scale);
        layers.push(DiscLayer {
            weight: store.register(&format!("{name}.weight"), &[width, cin, 4, 4], InitKind::Gaussian),
            bias: store.register(&format!("{name}.bias"), &[width], InitKind::Zero),
            norm: Some((
                store.register(&format!("{name}.norm.gamma"), &[width], InitKind::One),
                store.register(&format!("{name}.norm.beta"), &[width], InitKind::Zero),
            )),
            stride: 1,
        });
        PatchDiscriminator {
            layers,
            score_weight: store.register(&format!("{prefix}.score.weight"), &[1, width, 4, 4], InitKind::Gaussian),
            score_bias: store.register(&format!("{prefix}.score.bias"), &[1], InitKind::Zero),
        }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Forward all scales on the tape. `rgbd` and `flm` are concatenated to
    /// the 5-channel input; coarser scales see average-pooled copies.
    pub fn forward(&self, tape: &Tape, ctx: &ParamCtx<'_>, rgbd: Var, flm: Var) -> Vec<ScaleVars> {
        let full = tape.concat(rgbd, flm);
        let mut out = Vec::with_capacity(self.scales.len());
        let mut input = full;
        for (k, d) in self.scales.iter().enumerate() {
            if k > 0 {
                input = tape.avg_pool2d(input, 2);
            }
            out.push(d.forward(tape, ctx, input));
        }
        out
    }
}

impl PatchDiscriminator {
    fn forward(&self, tape: &Tape, ctx: &ParamCtx<'_>, x: Var) -> ScaleVars {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let w = tape.param(ctx, layer.weight);
            let b = tape.param(ctx, layer.bias);
            cur = tape.conv2d(cur, w, Some(b), layer.stride, 1);
            if let Some((g, be)) = layer.norm {
                let g = tape.param(ctx, g);
                let be = tape.param(ctx, be);
                cur = tape.instance_norm(cur, g, be);
            }
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            features.push(cur);
        }
        let w = tape.param(ctx, self.score_weight);
        let b = tape.param(ctx, self.score_bias);
        let score = tape.conv2d(cur, w, Some(b), 1, 1);
        ScaleVars { features, score }
    }
}
