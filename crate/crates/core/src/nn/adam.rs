//! Adam update with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamStore};

/// Per-parameter first/second moment accumulators plus step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    /// Standard constants: β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in store.names() {
            let p = store.get(name).expect("name from iterator");
            m.insert(name.clone(), Matrix::zeros(p.rows(), p.cols()));
            v.insert(name.clone(), Matrix::zeros(p.rows(), p.cols()));
        }
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam step over every parameter. Gradients are left untouched;
    /// the caller zeros them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let grad = store.grad(&name)?.clone();
            let m = self
                .m
                .get_mut(&name)
                .ok_or_else(|| Error::State(format!("adam state missing `{name}`")))?;
            let v = self
                .v
                .get_mut(&name)
                .ok_or_else(|| Error::State(format!("adam state missing `{name}`")))?;
            if !m.same_shape(&grad) {
                return Err(Error::Dimension(format!(
                    "adam moments for `{name}` do not match gradient shape"
                )));
            }
            let p = store.get_mut(&name)?;
            for i in 0..grad.data().len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Matrix::from_vec(1, 1, vec![value]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = single_param(1.5);
        let mut adam = AdamState::new(&store, 0.01);
        for _ in 0..3 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.get("p").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_matches_update_equations() {
        // t=1, g=1: m̂=1, v̂=1, Δ = λ/(1+ε).
        let mut store = single_param(0.0);
        store
            .accumulate_grad("p", &Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        let mut adam = AdamState::new(&store, 0.001);
        adam.step(&mut store).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        let got = store.get("p").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        // gradients untouched
        assert_eq!(store.grad("p").unwrap().data(), &[1.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_stores_step_identically() {
        let build = || {
            let mut store = single_param(0.7);
            store
                .accumulate_grad("p", &Matrix::from_vec(1, 1, vec![-0.3]).unwrap())
                .unwrap();
            let mut adam = AdamState::new(&store, 0.01);
            for _ in 0..5 {
                adam.step(&mut store).unwrap();
            }
            store.get("p").unwrap().data()[0]
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
