//! Test-only helpers: central finite-difference gradient checks.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares tape gradients of `build` against central differences for every
/// coordinate of every listed parameter. Returns the worst relative error.
pub fn max_grad_error<F>(store: &mut ParamStore, ids: &[ParamId], build: F) -> f64
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Var,
{
    let grads = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.backward(loss).expect("backward")
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s);
        tape.scalar(loss)
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = grads
            .param(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).values()[k];
            store.get_mut(id).values_mut()[k] = orig + FD_STEP;
            let plus = eval(store);
            store.get_mut(id).values_mut()[k] = orig - FD_STEP;
            let minus = eval(store);
            store.get_mut(id).values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
