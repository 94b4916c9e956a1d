//! Finite-difference gradient verification.

use crate::error::{err_domain, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Relative error between an analytic and a numeric gradient entry. The floor
/// keeps noise on near-zero gradients from dominating the report.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// over every entry of every input, returning the worst relative error.
///
/// `f` must be deterministic (verified by double evaluation) and is expected
/// to produce a scalar; non-scalar outputs are summed.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var, f64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf_grad(t)).collect();
        let out = f(&mut tape, &vars)?;
        let scalar = if tape.value(out).len() == 1 {
            out
        } else {
            tape.sum_all(out)
        };
        let v = tape.value(scalar)[0];
        Ok((tape, vars, scalar, v))
    };

    let (tape, vars, root, v1) = eval(inputs)?;
    let (_, _, _, v2) = eval(inputs)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(err_domain!(
            "function is not deterministic: {v1} vs {v2} on identical inputs"
        ));
    }
    if !v1.is_finite() {
        return Err(crate::error::Error::NonFinite(format!(
            "grad_check output {v1}"
        )));
    }

    let grads = tape.backward(root)?;

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[ti]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.len()],
        };
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let (_, _, _, fp) = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let (_, _, _, fm) = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic[ei], numeric));
        }
    }
    Ok(worst)
}
