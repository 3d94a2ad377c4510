//! Named parameter storage shared by networks, optimizers and checkpoints.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    /// How the weight is drawn by [`ParamStore::init_gaussian`].
    pub init: InitKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Convolution weight: N(0, std^2).
    Gaussian,
    /// Norm scale: constant 1.
    One,
    /// Bias / norm shift: constant 0.
    Zero,
}

/// Borrowed view of a store used while recording a tape. `trainable`
/// decides whether parameter leaves receive gradients; discriminator
/// weights are passed frozen during the generator step, for example.
pub struct ParamCtx<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> ParamCtx<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }
}

/// Flat registry of named parameters. Names are hierarchical
/// ("gen.enc1.weight") and unique; iteration orders are deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, dims: &[usize], init: InitKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n: usize = dims.iter().product();
        let fill = match init {
            InitKind::One => 1.0,
            _ => 0.0,
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: vec![fill; n],
            grad: vec![0.0; n],
            init,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::new(&e.dims, e.data.clone())
    }

    /// Ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// (name, id) pairs in lexicographic name order.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.by_name.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Draw every Gaussian-initialized weight from N(0, std^2), reset scales
    /// to 1 and shifts to 0. Deterministic in `seed`; parameters are visited
    /// in name order so the draw does not depend on registration order.
    pub fn init_gaussian(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let order: Vec<ParamId> = self.by_name.values().copied().collect();
        for id in order {
            let e = &mut self.entries[id.0];
            match e.init {
                InitKind::Gaussian => {
                    for v in &mut e.data {
                        *v = normal.sample(&mut rng);
                    }
                }
                InitKind::One => e.data.iter_mut().for_each(|v| *v = 1.0),
                InitKind::Zero => e.data.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }

    /// FNV-1a hash over dims and raw bits of every parameter, in name order.
    /// Used by tests to assert that inference never mutates weights.
    pub fn state_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, id) in self.by_name.iter() {
            for b in name.as_bytes() {
                eat(*b);
            }
            let e = &self.entries[id.0];
            for d in &e.dims {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in &e.data {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}
