//! Reverse-mode autodiff over a dynamically recorded op tape.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward_into`]
//! walks the nodes in reverse and accumulates parameter gradients into a
//! [`crate::params::ParamStore`]. Recording with gradients disabled skips all backward
//! bookkeeping, which is the inference path.
//!
//! Determinism: the backward walk is a single-threaded reverse scan with a
//! fixed accumulation order; the kernels it calls parallelize only over
//! disjoint output elements. Two identical forward recordings therefore
//! produce bit-identical gradients.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernels as k;
use crate::params::{ParamCtx, ParamId};
use crate::parallel::map_indexed;
use crate::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    needs_grad: bool,
    param: Option<ParamId>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
}

/// Parameter gradients keyed by [`ParamId`], produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    param_nodes: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tape variable, if it was tracked.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Accumulate parameter gradients into the store (`grad +=`).
    pub fn accumulate_into(&self, store: &mut crate::params::ParamStore) {
        for &(node, id) in &self.param_nodes {
            if let Some(g) = &self.by_node[node] {
                let e = store.entry_mut(id);
                debug_assert_eq!(e.data.len(), g.len());
                for (dst, src) in e.grad.iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: false,
            param: None,
            backward: None,
        })
    }

    /// Leaf bound to a store parameter. Receives a gradient when the context
    /// is trainable and the tape records gradients.
    pub fn param(&self, ctx: &ParamCtx<'_>, id: ParamId) -> Var {
        self.push(Node {
            value: ctx.store.tensor(id),
            parents: Vec::new(),
            needs_grad: self.grad_enabled && ctx.trainable,
            param: if ctx.trainable { Some(id) } else { None },
            backward: None,
        })
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    fn unary(
        &self,
        parent: Var,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var {
        let needs = self.grad_enabled && self.needs(&[parent.0]);
        self.push(Node {
            value,
            parents: vec![parent.0],
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                Box::new(move |g: &Tensor, _: &[bool]| vec![Some(backward(g))]) as BackwardFn
            }),
        })
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = tensor::add(&va, &vb);
        let needs = self.grad_enabled && self.needs(&[a.0, b.0]);
        self.push(Node {
            value,
            parents: vec![a.0, b.0],
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                Box::new(move |g: &Tensor, nd: &[bool]| {
                    vec![
                        nd[0].then(|| g.clone()),
                        nd[1].then(|| g.clone()),
                    ]
                }) as BackwardFn
            }),
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(&vb), "sub shape mismatch");
        let value = Tensor::new(
            va.dims(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect(),
        );
        let needs = self.grad_enabled && self.needs(&[a.0, b.0]);
        self.push(Node {
            value,
            parents: vec![a.0, b.0],
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                Box::new(move |g: &Tensor, nd: &[bool]| {
                    vec![
                        nd[0].then(|| g.clone()),
                        nd[1].then(|| g.map(|v| -v)),
                    ]
                }) as BackwardFn
            }),
        })
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.unary(a, value, move |g| g.map(|v| v * factor))
    }

    pub fn sub_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v - c);
        self.unary(a, value, |g| g.clone())
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = va.map(|v| v * v);
        self.unary(a, value, move |g| {
            Tensor::new(
                va.dims(),
                va.data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| 2.0 * x * gv)
                    .collect(),
            )
        })
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = va.map(f64::abs);
        self.unary(a, value, move |g| {
            Tensor::new(
                va.dims(),
                va.data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| gv * sign(*x))
                    .collect(),
            )
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = va.map(|v| v.max(0.0));
        self.unary(a, value, move |g| {
            Tensor::new(
                va.dims(),
                va.data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )
        })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let va = self.value(a);
        let value = va.map(|v| if v > 0.0 { v } else { v * slope });
        self.unary(a, value, move |g| {
            Tensor::new(
                va.dims(),
                va.data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { gv * slope })
                    .collect(),
            )
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let y = value.clone();
        self.unary(a, value, move |g| {
            Tensor::new(
                y.dims(),
                y.data()
                    .iter()
                    .zip(g.data())
                    .map(|(yv, gv)| gv * (1.0 - yv * yv))
                    .collect(),
            )
        })
    }

    /// Inverted dropout: keeps with probability `1 - rate`, scaling kept
    /// activations by `1/(1-rate)`. The mask is drawn from `rng` here, so a
    /// caller-supplied seeded RNG makes the draw reproducible.
    pub fn dropout(&self, a: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return a;
        }
        let va = self.value(a);
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let value = Tensor::new(
            va.dims(),
            va.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let dims = va.dims().to_vec();
        self.unary(a, value, move |g| {
            Tensor::new(
                &dims,
                g.data().iter().zip(&mask).map(|(gv, m)| gv * m).collect(),
            )
        })
    }

    // ---- structure ----

    /// Concatenate two rank-3 tensors along the channel axis.
    pub fn concat(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.h(), vb.h());
        assert_eq!(va.w(), vb.w());
        let (ca, cb, h, w) = (va.c(), vb.c(), va.h(), va.w());
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = Tensor::chw(ca + cb, h, w, data);
        let needs = self.grad_enabled && self.needs(&[a.0, b.0]);
        self.push(Node {
            value,
            parents: vec![a.0, b.0],
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                Box::new(move |g: &Tensor, nd: &[bool]| {
                    let split = ca * h * w;
                    vec![
                        nd[0].then(|| Tensor::chw(ca, h, w, g.data()[..split].to_vec())),
                        nd[1].then(|| Tensor::chw(cb, h, w, g.data()[split..].to_vec())),
                    ]
                }) as BackwardFn
            }),
        })
    }

    /// Copy `count` channels starting at `start` out of a rank-3 tensor.
    pub fn channel_slice(&self, a: Var, start: usize, count: usize, in_dims: (usize, usize, usize)) -> Var {
        let va = self.value(a);
        let (c, h, w) = in_dims;
        assert_eq!(va.dims(), &[c, h, w]);
        assert!(start + count <= c);
        let plane = h * w;
        let value = Tensor::chw(
            count,
            h,
            w,
            va.data()[start * plane..(start + count) * plane].to_vec(),
        );
        self.unary(a, value, move |g| {
            let mut full = vec![0.0; c * plane];
            full[start * plane..(start + count) * plane].copy_from_slice(g.data());
            Tensor::chw(c, h, w, full)
        })
    }

    /// Mean over every element, yielding a scalar.
    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let value = Tensor::scalar(va.data().iter().sum::<f64>() / n);
        let dims = va.dims().to_vec();
        self.unary(a, value, move |g| {
            Tensor::full(&dims, g.item() / n)
        })
    }

    // ---- network ops ----

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let value = k::conv2d_forward(&vx, &vw, vb.as_ref(), stride, pad);
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let needs = self.grad_enabled && self.needs(&parents);
        let kernel = (vw.dims()[2], vw.dims()[3]);
        let in_dims = (vx.c(), vx.h(), vx.w());
        self.push(Node {
            value,
            parents,
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                let has_bias = b.is_some();
                Box::new(move |g: &Tensor, nd: &[bool]| {
                    let mut out = vec![
                        nd[0].then(|| k::conv2d_backward_input(g, &vw, in_dims, stride, pad)),
                        nd[1].then(|| k::conv2d_backward_weight(g, &vx, kernel, stride, pad)),
                    ];
                    if has_bias {
                        out.push(nd[2].then(|| k::conv2d_backward_bias(g)));
                    }
                    out
                }) as BackwardFn
            }),
        })
    }

    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let value = k::conv_transpose2d_forward(&vx, &vw, vb.as_ref(), stride, pad);
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let needs = self.grad_enabled && self.needs(&parents);
        let kernel = (vw.dims()[2], vw.dims()[3]);
        let in_dims = (vx.c(), vx.h(), vx.w());
        self.push(Node {
            value,
            parents,
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                let has_bias = b.is_some();
                Box::new(move |g: &Tensor, nd: &[bool]| {
                    let mut out = vec![
                        nd[0].then(|| {
                            k::conv_transpose2d_backward_input(g, &vw, in_dims, stride, pad)
                        }),
                        nd[1].then(|| {
                            k::conv_transpose2d_backward_weight(g, &vx, kernel, stride, pad)
                        }),
                    ];
                    if has_bias {
                        out.push(nd[2].then(|| k::conv2d_backward_bias(g)));
                    }
                    out
                }) as BackwardFn
            }),
        })
    }

    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (value, stats) = k::instance_norm_forward(&vx, &vg, &vb);
        let parents = vec![x.0, gamma.0, beta.0];
        let needs = self.grad_enabled && self.needs(&parents);
        self.push(Node {
            value,
            parents,
            needs_grad: needs,
            param: None,
            backward: needs.then(|| {
                Box::new(move |g: &Tensor, nd: &[bool]| {
                    let (gi, gg, gb) = k::instance_norm_backward(g, &vx, &vg, &stats);
                    vec![
                        nd[0].then(|| gi),
                        nd[1].then(|| gg),
                        nd[2].then(|| gb),
                    ]
                }) as BackwardFn
            }),
        })
    }

    pub fn avg_pool2d(&self, x: Var, k_size: usize) -> Var {
        let vx = self.value(x);
        let in_dims = (vx.c(), vx.h(), vx.w());
        let value = k::avg_pool2d_forward(&vx, k_size);
        self.unary(x, value, move |g| k::avg_pool2d_backward(g, in_dims, k_size))
    }

    pub fn channel_l2_normalize(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let value = k::channel_l2_normalize_forward(&vx, eps);
        self.unary(x, value, move |g| {
            k::channel_l2_normalize_backward(g, &vx, eps)
        })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let Some(back) = &node.backward else {
                continue;
            };
            let parent_needs: Vec<bool> =
                node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = back(&gout, &parent_needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                grads[*p] = Some(match grads[*p].take() {
                    Some(acc) => tensor::add(&acc, &g),
                    None => g,
                });
            }
        }
        let param_nodes: Vec<(usize, ParamId)> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (i, id)))
            .collect();
        Gradients {
            by_node: grads,
            param_nodes,
        }
    }

    /// Backward sweep that accumulates parameter gradients into the store.
    pub fn backward_into(&self, loss: Var, store: &mut crate::params::ParamStore) {
        self.backward(loss).accumulate_into(store);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise helper used by composite losses: mean((a - target)^2).
pub fn mean_squared_to(tape: &Tape, a: Var, target: f64) -> Var {
    let d = tape.sub_scalar(a, target);
    let sq = tape.square(d);
    tape.mean_all(sq)
}

/// Elementwise helper: mean(|a - b|).
pub fn mean_abs_diff(tape: &Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let ab = tape.abs(d);
    tape.mean_all(ab)
}

/// Deterministic parallel elementwise map used by model code outside the tape.
pub fn map_elementwise(t: &Tensor, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
    let data = map_indexed(t.len(), |i| f(t.data()[i]));
    Tensor::new(t.dims(), data)
}
