//! Minimal CPU tensor and reverse-mode autodiff engine for the facegan
//! pipeline: dense f64 tensors, conv/transposed-conv/instance-norm kernels,
//! a recording tape, Adam, Gaussian init and a checkpoint container.
//!
//! Everything is deterministic: parallel kernels only ever split work across
//! disjoint output elements (see [`parallel`]), so results are bit-identical
//! across thread counts and between the rayon and sequential paths.

pub mod adam;
pub mod blob;
pub mod error;
pub mod fd;
pub mod kernels;
pub mod parallel;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use error::NnError;
pub use params::{InitKind, ParamCtx, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
