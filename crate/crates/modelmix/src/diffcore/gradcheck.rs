//! Central-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor4};
use crate::Result;

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn aborted(op_name: &str) -> GradCheckReport {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_err: f64::INFINITY,
            max_abs_err: f64::INFINITY,
            passed: false,
        }
    }
}

/// Compare reverse-mode gradients of a scalar-valued computation against
/// central differences.
///
/// `build` records the computation on a tape from leaves mirroring `inputs`;
/// it must be a pure function of the leaf values (fix any randomness before
/// capturing). A non-finite forward value aborts the check and reports
/// failure. Relative error uses `|a - n| / max(|a|, |n|, 1)` so near-zero
/// gradients degrade to absolute error.
pub fn finite_difference_check<E, F>(
    op_name: &str,
    inputs: &[Tensor4<E>],
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.clear_grad();
            tape.leaf(t.with_grad())
        })
        .collect();
    let out = build(&mut tape, &vars)?;
    let y0 = tape.scalar_value(out);
    if !y0.is_finite() {
        return Ok(GradCheckReport::aborted(op_name));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64()).collect(),
            None => vec![0.0; t.shape().len()],
        })
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor4<E>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| {
            let mut t = t.clone();
            t.clear_grad();
            tape.constant(t)
        }).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut work: Vec<Tensor4<E>> = inputs.to_vec();
    for t_idx in 0..inputs.len() {
        for i in 0..inputs[t_idx].shape().len() {
            let orig = inputs[t_idx].data()[i].to_f64();
            work[t_idx].data_mut()[i] = E::from_f64(orig + eps);
            let fp = eval(&work)?;
            work[t_idx].data_mut()[i] = E::from_f64(orig - eps);
            let fm = eval(&work)?;
            work[t_idx].data_mut()[i] = E::from_f64(orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Ok(GradCheckReport::aborted(op_name));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[t_idx][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        passed: max_rel < tol,
    })
}
