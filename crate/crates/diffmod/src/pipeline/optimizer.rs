//! Adam optimizer over the model's named parameter list.

use crate::error::{err_shape, Result};
use crate::numerics::init::Parameter;

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[&Parameter]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.tensor().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor().len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update with bias-corrected first/second moments.
    pub fn step(&mut self, params: &mut [&mut Parameter], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(err_shape!(
                "optimizer state for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.tensor_mut().data_mut();
            if data.len() != g.len() {
                return Err(err_shape!("gradient length mismatch for {}", p.name()));
            }
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
