//! Dense f64 tensors in channel-major (CHW) layout.
//!
//! Activations are rank-3 `(channels, height, width)`; convolution weights
//! are rank-4 `(out, in, kh, kw)`. Data is shared behind an `Arc` so graph
//! nodes can keep forward values alive without copying.

use std::sync::Arc;

/// Immutable dense tensor. Cloning is cheap (shared buffer).
#[derive(Clone, Debug)]
pub struct Tensor {
    dims: Arc<[usize]>,
    data: Arc<[f64]>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor dims {:?} do not match data length {}",
            dims,
            data.len()
        );
        Self {
            dims: dims.into(),
            data: data.into(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::new(dims, vec![0.0; dims.iter().product()])
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value])
    }

    /// Rank-3 constructor for image-like activations.
    pub fn chw(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        Self::new(&[c, h, w], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.dims);
        self.data[0]
    }

    /// Channel count of a rank-3 tensor.
    pub fn c(&self) -> usize {
        assert_eq!(self.dims.len(), 3);
        self.dims[0]
    }

    pub fn h(&self) -> usize {
        assert_eq!(self.dims.len(), 3);
        self.dims[1]
    }

    pub fn w(&self) -> usize {
        assert_eq!(self.dims.len(), 3);
        self.dims[2]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.dims, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

/// Elementwise a + b.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.same_shape(b), "shape mismatch {:?} vs {:?}", a.dims(), b.dims());
    Tensor::new(
        a.dims(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Accumulate `src` into `dst` elementwise.
pub fn add_assign(dst: &mut Vec<f64>, src: &Tensor) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accessors() {
        let t = Tensor::chw(2, 3, 4, vec![0.0; 24]);
        assert_eq!((t.c(), t.h(), t.w()), (2, 3, 4));
        assert_eq!(t.len(), 24);
    }

    #[test]
    #[should_panic]
    fn dims_must_match_data() {
        let _ = Tensor::new(&[2, 2], vec![0.0; 5]);
    }

    #[test]
    fn add_elementwise() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        let b = Tensor::new(&[3], vec![0.5, 0.5, 0.5]);
        assert_eq!(add(&a, &b).data(), &[1.5, 2.5, 3.5]);
    }
}
