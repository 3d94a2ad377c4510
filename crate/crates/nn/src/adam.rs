//! Adam optimizer with per-parameter first/second moment state.

use crate::params::{ParamId, ParamStore};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone)]
pub struct AdamParamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub states: Vec<AdamParamState>,
}

impl Adam {
    /// One state slot per parameter in the store, in registration order.
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let states = store
            .ids()
            .map(|id| {
                let n = store.entry(id).data.len();
                AdamParamState {
                    t: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self { beta1, beta2, states }
    }

    /// Apply one update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let st = &mut self.states[id.0];
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let e = store.entry_mut(id);
            for i in 0..e.data.len() {
                let g = e.grad[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                e.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::InitKind;

    #[test]
    fn zero_lr_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.register("w", &[4], InitKind::Gaussian);
        store.init_gaussian(0.1, 3);
        let before = store.entry(id).data.clone();
        store.entry_mut(id).grad.copy_from_slice(&[1.0, -2.0, 3.0, -4.0]);
        let mut opt = Adam::new(&store, 0.5, 0.999);
        opt.step(&mut store, 0.0);
        assert_eq!(store.entry(id).data, before);
        assert_eq!(opt.states[0].t, 1);
    }

    #[test]
    fn single_step_matches_formula() {
        let mut store = ParamStore::new();
        let id = store.register("w", &[1], InitKind::Zero);
        store.entry_mut(id).grad[0] = 0.5;
        let mut opt = Adam::new(&store, 0.5, 0.999);
        opt.step(&mut store, 0.01);
        // t=1: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        let expected = -0.01 * 0.5 / (0.5 + ADAM_EPS);
        assert!((store.entry(id).data[0] - expected).abs() < 1e-15);
    }
}
