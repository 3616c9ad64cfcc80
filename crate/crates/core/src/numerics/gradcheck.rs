//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only evaluates forward values on inference tapes, so it is
//! independent of every backward closure it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Relative error with a floor on the denominator so gradients that are
/// exactly zero compare on an absolute scale.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks `f` (which must return a scalar) at `inputs` with step `h`.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64, floor: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(&loss)?;
        vars.iter()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.data()[0])
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = x0;
            g.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        numeric.push(g);
    }

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            max_rel_err = max_rel_err.max(rel_err(x, y, floor));
            max_abs_err = max_abs_err.max((x - y).abs());
        }
    }
    Ok(GradCheck {
        max_rel_err,
        max_abs_err,
        analytic,
        numeric,
    })
}
