//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker perturbs every element of every input by `±eps`, re-runs the
//! forward closure, and compares the central difference against the gradient
//! the tape reports. It only ever calls the forward path, so it stays
//! independent of the backward implementation it is checking.

use crate::autodiff::{Tape, Var};
use crate::matrix::Matrix;

pub struct CheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks `d f / d inputs` for a scalar-valued tape program `f`.
///
/// `f` receives a fresh tape plus one leaf per input matrix and must return
/// a `[1 x 1]` var. Default `eps` of `1e-5` suits values of order one.
pub fn check_gradients<F>(inputs: &[Matrix], eps: f64, f: F) -> CheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |mats: &[Matrix]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        f(&tape, &vars).scalar_value()
    };

    // Analytic gradients from one taped run.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let root = f(&tape, &vars);
    let grads = tape.backward(root);

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (input_idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[input_idx]);
        for elem in 0..input.len() {
            let base = input.as_slice()[elem];
            work[input_idx].as_mut_slice()[elem] = base + eps;
            let plus = eval(&work);
            work[input_idx].as_mut_slice()[elem] = base - eps;
            let minus = eval(&work);
            work[input_idx].as_mut_slice()[elem] = base;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic.map_or(0.0, |m| m.as_slice()[elem]);
            let err = rel_err(an, fd);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (input_idx, elem);
            }
        }
    }
    report
}

/// Convenience wrapper asserting the check passes at `tol`.
pub fn assert_gradients<F>(inputs: &[Matrix], eps: f64, tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let report = check_gradients(inputs, eps, f);
    assert!(
        report.max_rel_err < tol,
        "gradient check failed: rel err {:.3e} at input {} element {} (tol {tol:.1e})",
        report.max_rel_err,
        report.worst.0,
        report.worst.1
    );
}
