//! Pix2Pix-style U-Net generator: strided 4x4 convolution encoder, mirrored
//! transposed-convolution decoder with skip connections, dropout in the
//! innermost decoder stages as the stochastic source, tanh output.

use facegan_nn::{InitKind, ParamCtx, ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use super::GeneratorConfig;
use crate::error::Result;

const LEAKY_SLOPE: f64 = 0.2;

struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
}

impl Generator {
    /// Register all parameters under the "gen." prefix.
    pub fn new(store: &mut ParamStore, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.depth;
        let mut encoder = Vec::with_capacity(d);
        for k in 0..d {
            let cin = if k == 0 { cfg.in_channels } else { cfg.stage_width(k - 1) };
            let cout = cfg.stage_width(k);
            // first stage and bottleneck run without normalization
            let normed = k != 0 && k != d - 1;
            encoder.push(Self::conv(store, &format!("gen.enc{k}"), cout, cin, normed));
        }
        let mut decoder = Vec::with_capacity(d);
        for k in 0..d {
            // decoder stage k consumes the previous decoder output plus the
            // skip from encoder stage d-2-k (none for the innermost stage)
            let cin = if k == 0 {
                cfg.stage_width(d - 1)
            } else {
                cfg.stage_width(d - 1 - k) + cfg.stage_width(d - 1 - k)
            };
            let cout = if k == d - 1 { cfg.out_channels } else { cfg.stage_width(d - 2 - k) };
            let normed = k != d - 1;
            decoder.push(Self::deconv(store, &format!("gen.dec{k}"), cin, cout, normed));
        }
        Ok(Self { cfg, encoder, decoder })
    }

    fn conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, normed: bool) -> ConvLayer {
        ConvLayer {
            weight: store.register(&format!("{name}.weight"), &[cout, cin, 4, 4], InitKind::Gaussian),
            bias: store.register(&format!("{name}.bias"), &[cout], InitKind::Zero),
            norm: normed.then(|| {
                (
                    store.register(&format!("{name}.norm.gamma"), &[cout], InitKind::One),
                    store.register(&format!("{name}.norm.beta"), &[cout], InitKind::Zero),
                )
            }),
        }
    }

    fn deconv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, normed: bool) -> ConvLayer {
        ConvLayer {
            // transposed-conv weights are (in, out, kh, kw)
            weight: store.register(&format!("{name}.weight"), &[cin, cout, 4, 4], InitKind::Gaussian),
            bias: store.register(&format!("{name}.bias"), &[cout], InitKind::Zero),
            norm: normed.then(|| {
                (
                    store.register(&format!("{name}.norm.gamma"), &[cout], InitKind::One),
                    store.register(&format!("{name}.norm.beta"), &[cout], InitKind::Zero),
                )
            }),
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Forward pass. `dropout_rng` enables the stochastic decoder dropout
    /// (training mode); `None` is the deterministic inference path.
    pub fn forward(
        &self,
        tape: &Tape,
        ctx: &ParamCtx<'_>,
        x: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let d = self.cfg.depth;
        let mut skips: Vec<Var> = Vec::with_capacity(d);
        let mut cur = x;
        for (k, layer) in self.encoder.iter().enumerate() {
            let w = tape.param(ctx, layer.weight);
            let b = tape.param(ctx, layer.bias);
            cur = tape.conv2d(cur, w, Some(b), 2, 1);
            if let Some((g, be)) = layer.norm {
                let g = tape.param(ctx, g);
                let be = tape.param(ctx, be);
                cur = tape.instance_norm(cur, g, be);
            }
            cur = if k == d - 1 {
                tape.relu(cur) // bottleneck
            } else {
                tape.leaky_relu(cur, LEAKY_SLOPE)
            };
            skips.push(cur);
        }
        for (k, layer) in self.decoder.iter().enumerate() {
            let w = tape.param(ctx, layer.weight);
            let b = tape.param(ctx, layer.bias);
            cur = tape.conv_transpose2d(cur, w, Some(b), 2, 1);
            if let Some((g, be)) = layer.norm {
                let g = tape.param(ctx, g);
                let be = tape.param(ctx, be);
                cur = tape.instance_norm(cur, g, be);
            }
            if k == d - 1 {
                return tape.tanh(cur);
            }
            if k < self.cfg.dropout_stages {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    cur = tape.dropout(cur, self.cfg.dropout_rate, rng);
                }
            }
            cur = tape.concat(cur, skips[d - 2 - k]);
            cur = tape.relu(cur);
        }
        unreachable!("decoder always returns at the last stage")
    }
}
