//! Small composite layers built from tape primitives.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// x·w + b with b broadcast across rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let m = tape.shape(y)[0];
    let bb = tape.bcast_rows(b, m)?;
    tape.add(y, bb)
}

/// Row-wise layer normalization with learned gain and bias ([1×n] each).
pub fn layer_norm_rows(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let (m, n) = (tape.shape(x)[0], tape.shape(x)[1]);
    let sum = tape.row_sum(x)?;
    let mu = tape.scale(sum, 1.0 / n as f64);
    let mu_b = tape.bcast_col(mu, n)?;
    let xc = tape.sub(x, mu_b)?;
    let sq = tape.mul(xc, xc)?;
    let var_sum = tape.row_sum(sq)?;
    let var = tape.scale(var_sum, 1.0 / n as f64);
    let var_eps = tape.add_scalar(var, LAYER_NORM_EPS);
    let inv_std = tape.powf(var_eps, -0.5);
    let inv_b = tape.bcast_col(inv_std, n)?;
    let normed = tape.mul(xc, inv_b)?;
    let gain_b = tape.bcast_rows(gain, m)?;
    let bias_b = tape.bcast_rows(bias, m)?;
    let scaled = tape.mul(normed, gain_b)?;
    tape.add(scaled, bias_b)
}

/// 1 − x, elementwise.
pub fn one_minus(tape: &mut Tape, x: Var) -> Var {
    let neg = tape.scale(x, -1.0);
    tape.add_scalar(neg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.leaf(&random_tensor(vec![3, 8], 1));
        let gain = tape.leaf(&Tensor::full(vec![1, 8], 1.0));
        let bias = tape.leaf(&Tensor::zeros(vec![1, 8]));
        let y = layer_norm_rows(&mut tape, x, gain, bias).unwrap();
        let v = tape.value(y);
        for i in 0..3 {
            let row = &v[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_and_layer_norm_pass_grad_check() {
        let x = random_tensor(vec![3, 4], 2);
        let w = random_tensor(vec![4, 5], 3);
        let b = random_tensor(vec![1, 5], 4);
        let gain = random_tensor(vec![1, 5], 5);
        let bias = random_tensor(vec![1, 5], 6);
        let err = grad_check(
            |tape, vars| {
                let y = linear(tape, vars[0], vars[1], vars[2])?;
                let n = layer_norm_rows(tape, y, vars[3], vars[4])?;
                Ok(tape.sum_all(n))
            },
            &[x, w, b, gain, bias],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
