//! Convolution, pooling and normalization kernels (forward and backward).
//!
//! Layout: activations are `(c, h, w)`, conv weights `(out, in, kh, kw)`,
//! transposed-conv weights `(in, out, kh, kw)`. All loops fill disjoint
//! output rows via [`crate::parallel::fill_rows`]; inner reductions are
//! sequential, which makes every kernel deterministic under any thread count.

use crate::parallel::fill_rows;
use crate::tensor::Tensor;

/// Spatial output size of a strided convolution: floor((in + 2p - k)/s) + 1.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Spatial output size of a transposed convolution: (in - 1)*s - 2p + k.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ci, hi, wi) = (input.c(), input.h(), input.w());
    let wd = weight.dims();
    assert_eq!(wd.len(), 4, "conv weight must be rank 4");
    let (co, cw, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    assert_eq!(ci, cw, "conv input channels {} != weight {}", ci, cw);
    if let Some(b) = bias {
        assert_eq!(b.len(), co);
    }
    let ho = conv_out_size(hi, kh, stride, pad);
    let wo = conv_out_size(wi, kw, stride, pad);

    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; co * ho * wo];
    // one row = one output scanline of one output channel
    fill_rows(&mut out, wo, |row, line| {
        let oc = row / ho;
        let oy = row % ho;
        let base_b = bias.map_or(0.0, |b| b.data()[oc]);
        for (ox, slot) in line.iter_mut().enumerate() {
            let mut acc = base_b;
            for ic in 0..ci {
                let xoff = ic * hi * wi;
                let woff = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= hi as isize {
                        continue;
                    }
                    let xrow = xoff + iy as usize * wi;
                    let wrow = woff + ky * kw;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wi as isize {
                            continue;
                        }
                        acc += w[wrow + kx] * x[xrow + ix as usize];
                    }
                }
            }
            *slot = acc;
        }
    });
    Tensor::chw(co, ho, wo, out)
}

/// Gradient of `conv2d_forward` w.r.t. its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_dims: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ci, hi, wi) = input_dims;
    let wd = weight.dims();
    let (co, _cw, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let (ho, wo) = (grad_out.h(), grad_out.w());
    let g = grad_out.data();
    let w = weight.data();
    let mut out = vec![0.0; ci * hi * wi];
    fill_rows(&mut out, wi, |row, line| {
        let ic = row / hi;
        let iy = row % hi;
        for (ix, slot) in line.iter_mut().enumerate() {
            let mut acc = 0.0;
            for oc in 0..co {
                let goff = oc * ho * wo;
                let woff = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    // oy * stride + ky - pad == iy
                    let num = iy as isize + pad as isize - ky as isize;
                    if num < 0 || num % stride as isize != 0 {
                        continue;
                    }
                    let oy = (num / stride as isize) as usize;
                    if oy >= ho {
                        continue;
                    }
                    for kx in 0..kw {
                        let num = ix as isize + pad as isize - kx as isize;
                        if num < 0 || num % stride as isize != 0 {
                            continue;
                        }
                        let ox = (num / stride as isize) as usize;
                        if ox >= wo {
                            continue;
                        }
                        acc += w[woff + ky * kw + kx] * g[goff + oy * wo + ox];
                    }
                }
            }
            *slot = acc;
        }
    });
    Tensor::chw(ci, hi, wi, out)
}

/// Gradient of `conv2d_forward` w.r.t. the weight.
pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ci, hi, wi) = (input.c(), input.h(), input.w());
    let (kh, kw) = kernel;
    let (co, ho, wo) = (grad_out.c(), grad_out.h(), grad_out.w());
    let g = grad_out.data();
    let x = input.data();
    let mut out = vec![0.0; co * ci * kh * kw];
    // one row = the (kh*kw) filter taps of one (oc, ic) pair
    fill_rows(&mut out, kh * kw, |row, taps| {
        let oc = row / ci;
        let ic = row % ci;
        let goff = oc * ho * wo;
        let xoff = ic * hi * wi;
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = 0.0;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= hi as isize {
                        continue;
                    }
                    let grow = goff + oy * wo;
                    let xrow = xoff + iy as usize * wi;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wi as isize {
                            continue;
                        }
                        acc += g[grow + ox] * x[xrow + ix as usize];
                    }
                }
                taps[ky * kw + kx] = acc;
            }
        }
    });
    Tensor::new(&[co, ci, kh, kw], out)
}

/// Per-output-channel sum of `grad_out` (bias gradient).
pub fn conv2d_backward_bias(grad_out: &Tensor) -> Tensor {
    let (co, ho, wo) = (grad_out.c(), grad_out.h(), grad_out.w());
    let g = grad_out.data();
    let mut out = vec![0.0; co];
    fill_rows(&mut out, 1, |oc, slot| {
        let mut acc = 0.0;
        for v in &g[oc * ho * wo..(oc + 1) * ho * wo] {
            acc += v;
        }
        slot[0] = acc;
    });
    Tensor::new(&[co], out)
}

pub fn conv_transpose2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ci, hi, wi) = (input.c(), input.h(), input.w());
    let wd = weight.dims();
    assert_eq!(wd.len(), 4);
    let (cw_in, co, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    assert_eq!(ci, cw_in, "transposed-conv input channels mismatch");
    if let Some(b) = bias {
        assert_eq!(b.len(), co);
    }
    let ho = conv_transpose_out_size(hi, kh, stride, pad);
    let wo = conv_transpose_out_size(wi, kw, stride, pad);
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; co * ho * wo];
    fill_rows(&mut out, wo, |row, line| {
        let oc = row / ho;
        let oy = row % ho;
        let base_b = bias.map_or(0.0, |b| b.data()[oc]);
        for (ox, slot) in line.iter_mut().enumerate() {
            let mut acc = base_b;
            for ic in 0..ci {
                let xoff = ic * hi * wi;
                let woff = (ic * co + oc) * kh * kw;
                for ky in 0..kh {
                    // iy * stride + ky - pad == oy
                    let num = oy as isize + pad as isize - ky as isize;
                    if num < 0 || num % stride as isize != 0 {
                        continue;
                    }
                    let iy = (num / stride as isize) as usize;
                    if iy >= hi {
                        continue;
                    }
                    for kx in 0..kw {
                        let num = ox as isize + pad as isize - kx as isize;
                        if num < 0 || num % stride as isize != 0 {
                            continue;
                        }
                        let ix = (num / stride as isize) as usize;
                        if ix >= wi {
                            continue;
                        }
                        acc += w[woff + ky * kw + kx] * x[xoff + iy * wi + ix];
                    }
                }
            }
            *slot = acc;
        }
    });
    Tensor::chw(co, ho, wo, out)
}

/// Gradient of `conv_transpose2d_forward` w.r.t. its input. This is a plain
/// strided convolution of the output gradient with the (in, out, kh, kw)
/// weight read in its natural orientation.
pub fn conv_transpose2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_dims: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ci, hi, wi) = input_dims;
    let wd = weight.dims();
    let (_cin, co, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let (ho, wo) = (grad_out.h(), grad_out.w());
    let g = grad_out.data();
    let w = weight.data();
    let mut out = vec![0.0; ci * hi * wi];
    fill_rows(&mut out, wi, |row, line| {
        let ic = row / hi;
        let iy = row % hi;
        for (ix, slot) in line.iter_mut().enumerate() {
            let mut acc = 0.0;
            for oc in 0..co {
                let goff = oc * ho * wo;
                let woff = (ic * co + oc) * kh * kw;
                for ky in 0..kh {
                    let oy = iy as isize * stride as isize + ky as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let grow = goff + oy as usize * wo;
                    let wrow = woff + ky * kw;
                    for kx in 0..kw {
                        let ox = ix as isize * stride as isize + kx as isize - pad as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        acc += w[wrow + kx] * g[grow + ox as usize];
                    }
                }
            }
            *slot = acc;
        }
    });
    Tensor::chw(ci, hi, wi, out)
}

/// Gradient of `conv_transpose2d_forward` w.r.t. the weight.
pub fn conv_transpose2d_backward_weight(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ci, hi, wi) = (input.c(), input.h(), input.w());
    let (kh, kw) = kernel;
    let (co, ho, wo) = (grad_out.c(), grad_out.h(), grad_out.w());
    let g = grad_out.data();
    let x = input.data();
    let mut out = vec![0.0; ci * co * kh * kw];
    fill_rows(&mut out, kh * kw, |row, taps| {
        let ic = row / co;
        let oc = row % co;
        let goff = oc * ho * wo;
        let xoff = ic * hi * wi;
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = 0.0;
                for iy in 0..hi {
                    let oy = iy as isize * stride as isize + ky as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let xrow = xoff + iy * wi;
                    let grow = goff + oy as usize * wo;
                    for ix in 0..wi {
                        let ox = ix as isize * stride as isize + kx as isize - pad as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        acc += x[xrow + ix] * g[grow + ox as usize];
                    }
                }
                taps[ky * kw + kx] = acc;
            }
        }
    });
    Tensor::new(&[ci, co, kh, kw], out)
}

pub fn avg_pool2d_forward(input: &Tensor, k: usize) -> Tensor {
    let (c, h, w) = (input.c(), input.h(), input.w());
    assert!(h % k == 0 && w % k == 0, "avg_pool requires divisible dims");
    let (ho, wo) = (h / k, w / k);
    let x = input.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * ho * wo];
    fill_rows(&mut out, wo, |row, line| {
        let ch = row / ho;
        let oy = row % ho;
        for (ox, slot) in line.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ky in 0..k {
                let base = ch * h * w + (oy * k + ky) * w + ox * k;
                for kx in 0..k {
                    acc += x[base + kx];
                }
            }
            *slot = acc * inv;
        }
    });
    Tensor::chw(c, ho, wo, out)
}

pub fn avg_pool2d_backward(grad_out: &Tensor, input_dims: (usize, usize, usize), k: usize) -> Tensor {
    let (c, h, w) = input_dims;
    let g = grad_out.data();
    let (ho, wo) = (grad_out.h(), grad_out.w());
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * h * w];
    fill_rows(&mut out, w, |row, line| {
        let ch = row / h;
        let iy = row % h;
        let oy = iy / k;
        let grow = ch * ho * wo + oy * wo;
        for (ix, slot) in line.iter_mut().enumerate() {
            *slot = g[grow + ix / k] * inv;
        }
    });
    Tensor::chw(c, h, w, out)
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel statistics produced by the instance-norm forward pass.
pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Instance normalization with affine parameters: per channel,
/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` (biased variance).
pub fn instance_norm_forward(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, NormStats) {
    let (c, h, w) = (input.c(), input.h(), input.w());
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let n = (h * w) as f64;
    let x = input.data();
    let mut stats: Vec<(f64, f64)> = Vec::with_capacity(c);
    for ch in 0..c {
        let s = &x[ch * h * w..(ch + 1) * h * w];
        let mut sum = 0.0;
        for v in s {
            sum += v;
        }
        let mean = sum / n;
        let mut var = 0.0;
        for v in s {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        stats.push((mean, 1.0 / (var + INSTANCE_NORM_EPS).sqrt()));
    }
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; c * h * w];
    fill_rows(&mut out, h * w, |ch, plane| {
        let (mean, inv_std) = stats[ch];
        let scale = g[ch] * inv_std;
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (o, v) in plane.iter_mut().zip(src) {
            *o = (v - mean) * scale + b[ch];
        }
    });
    let (mean, inv_std) = stats.into_iter().unzip();
    (Tensor::chw(c, h, w, out), NormStats { mean, inv_std })
}

/// Backward pass of instance norm. Returns (grad_input, grad_gamma, grad_beta).
pub fn instance_norm_backward(
    grad_out: &Tensor,
    input: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = (input.c(), input.h(), input.w());
    let n = (h * w) as f64;
    let x = input.data();
    let g = grad_out.data();
    let gam = gamma.data();

    // per-channel reductions: sum(g), sum(g * xhat)
    let mut sums = vec![(0.0f64, 0.0f64); c];
    for (ch, pair) in sums.iter_mut().enumerate() {
        let mean = stats.mean[ch];
        let inv_std = stats.inv_std[ch];
        let go = &g[ch * h * w..(ch + 1) * h * w];
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for (gv, xv) in go.iter().zip(xs) {
            sg += gv;
            sgx += gv * (xv - mean) * inv_std;
        }
        *pair = (sg, sgx);
    }

    let mut gin = vec![0.0; c * h * w];
    fill_rows(&mut gin, h * w, |ch, plane| {
        let mean = stats.mean[ch];
        let inv_std = stats.inv_std[ch];
        let (sg, sgx) = sums[ch];
        let scale = gam[ch] * inv_std;
        let go = &g[ch * h * w..(ch + 1) * h * w];
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        for ((o, gv), xv) in plane.iter_mut().zip(go).zip(xs) {
            let xhat = (xv - mean) * inv_std;
            *o = scale * (*gv - sg / n - xhat * sgx / n);
        }
    });
    let grad_gamma: Vec<f64> = sums.iter().map(|&(_, sgx)| sgx).collect();
    let grad_beta: Vec<f64> = sums.iter().map(|&(sg, _)| sg).collect();
    (
        Tensor::chw(c, h, w, gin),
        Tensor::new(&[c], grad_gamma),
        Tensor::new(&[c], grad_beta),
    )
}

/// L2-normalize along the channel axis at every pixel:
/// `y[c] = x[c] / sqrt(sum_c x[c]^2 + eps)`.
pub fn channel_l2_normalize_forward(input: &Tensor, eps: f64) -> Tensor {
    let (c, h, w) = (input.c(), input.h(), input.w());
    let x = input.data();
    let plane = h * w;
    let mut out = vec![0.0; c * h * w];
    // parallel over spatial rows: each output row needs all channels at that row
    let inv_norms: Vec<f64> = crate::parallel::map_indexed(plane, |p| {
        let mut ss = 0.0;
        for ch in 0..c {
            let v = x[ch * plane + p];
            ss += v * v;
        }
        1.0 / (ss + eps).sqrt()
    });
    fill_rows(&mut out, plane, |ch, dst| {
        let src = &x[ch * plane..(ch + 1) * plane];
        for ((o, v), inv) in dst.iter_mut().zip(src).zip(&inv_norms) {
            *o = v * inv;
        }
    });
    Tensor::chw(c, h, w, out)
}

pub fn channel_l2_normalize_backward(grad_out: &Tensor, input: &Tensor, eps: f64) -> Tensor {
    let (c, h, w) = (input.c(), input.h(), input.w());
    let x = input.data();
    let g = grad_out.data();
    let plane = h * w;
    // per-pixel: inv_norm and dot(g, y)
    let pix: Vec<(f64, f64)> = crate::parallel::map_indexed(plane, |p| {
        let mut ss = 0.0;
        for ch in 0..c {
            let v = x[ch * plane + p];
            ss += v * v;
        }
        let inv = 1.0 / (ss + eps).sqrt();
        let mut dot = 0.0;
        for ch in 0..c {
            dot += g[ch * plane + p] * x[ch * plane + p] * inv;
        }
        (inv, dot)
    });
    let mut out = vec![0.0; c * h * w];
    fill_rows(&mut out, plane, |ch, dst| {
        for (p, o) in dst.iter_mut().enumerate() {
            let (inv, dot) = pix[p];
            let y = x[ch * plane + p] * inv;
            *o = inv * (g[ch * plane + p] - y * dot);
        }
    });
    Tensor::chw(c, h, w, out)
}
