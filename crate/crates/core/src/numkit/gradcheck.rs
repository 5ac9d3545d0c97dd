//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;

/// Relative error with an absolute floor for gradients near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst relative error between backward-pass parameter gradients and
/// central differences of `f`, over every element of every parameter in
/// `store`.
pub fn check_params<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        if !store.get(id).requires_grad {
            continue;
        }
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    Ok(tape.item(loss))
}

/// Worst relative error for gradients with respect to leaf inputs.
///
/// `f` receives one leaf per entry of `inputs` and must return a scalar.
pub fn check_leaves<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.grad_wrt(loss, &vars)?;
        Ok((tape.item(loss), grads))
    };
    let (_, analytic) = run(inputs)?;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[k].data_mut()[j] = orig + STEP;
            let (up, _) = run(&probe)?;
            probe[k].data_mut()[j] = orig - STEP;
            let (down, _) = run(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[k].data()[j], numeric));
        }
    }
    Ok(worst)
}
