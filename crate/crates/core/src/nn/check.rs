//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::ParamStore;

const FD_STEP: f64 = 1e-5;

/// Compares tape gradients of a scalar loss against central finite
/// differences and returns the max relative error over all parameters:
/// `|g_auto − g_fd| / max(1e-8, |g_auto| + |g_fd|)`.
///
/// The closure must be deterministic given the store (freeze any noise
/// inputs before calling); a non-deterministic closure is rejected.
pub fn gradient_check<F>(store: &mut ParamStore, mut build_loss: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        tape.scalar(loss)
    };

    let base = eval(store, &mut build_loss)?;
    let again = eval(store, &mut build_loss)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::State(
            "gradient check requires a deterministic loss closure".into(),
        ));
    }

    store.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store)?;
        tape.scalar(loss)?;
        tape.backward(loss, store)?;
    }
    let auto: Vec<(String, Vec<f64>)> = store
        .names()
        .map(|n| (n.clone(), store.grad(n).expect("named grad").data().to_vec()))
        .collect();

    let mut max_rel = 0.0f64;
    for (name, grads) in &auto {
        for i in 0..grads.len() {
            let original = store.get(name)?.data()[i];
            store.get_mut(name)?.data_mut()[i] = original + FD_STEP;
            let plus = eval(store, &mut build_loss)?;
            store.get_mut(name)?.data_mut()[i] = original - FD_STEP;
            let minus = eval(store, &mut build_loss)?;
            store.get_mut(name)?.data_mut()[i] = original;

            let fd = (plus - minus) / (2.0 * FD_STEP);
            let g = grads[i];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    store.zero_grads();
    Ok(max_rel)
}
