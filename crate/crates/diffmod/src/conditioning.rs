//! Conditioning operators shared across the network: the Dynamic Interaction
//! Module (per-token low-rank bilinear transform with predicted factors) and
//! Time-Step Scaling (per-channel affine modulation from a timestep
//! embedding).

use crate::error::{err_domain, err_shape, Result};
use crate::numerics::init::Parameter;
use crate::numerics::nn::{layer_norm_rows, linear};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// DIM parameters: a linear estimator mapping each conditioning token to the
/// flattened factor pair (ω₁ ∈ d×k, ω₂ ∈ k×d), plus the post-projection
/// norms. The raw bilinear product would zero out under zero-init, so each
/// projection is followed by a norm (+ReLU after the first) and the whole
/// branch is residual.
#[derive(Debug, Clone)]
pub struct DimParams {
    pub est_w: Parameter,
    pub est_b: Parameter,
    pub norm1_gain: Parameter,
    pub norm1_bias: Parameter,
    pub norm2_gain: Parameter,
    pub norm2_bias: Parameter,
    pub k_dim: usize,
    pub d: usize,
}

pub struct DimVars {
    pub est_w: Var,
    pub est_b: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl DimVars {
    pub fn from_cursor(cur: &mut crate::numerics::tape::VarCursor<'_>) -> Self {
        DimVars {
            est_w: cur.next(),
            est_b: cur.next(),
            norm1_gain: cur.next(),
            norm1_bias: cur.next(),
            norm2_gain: cur.next(),
            norm2_bias: cur.next(),
        }
    }
}

impl DimParams {
    pub fn new(prefix: &str, d: usize, d_cond: usize, k_dim: usize, seed: u64) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        DimParams {
            est_w: Parameter::xavier(p("est_w"), d_cond, 2 * k_dim * d, seed),
            est_b: Parameter::zeros(p("est_b"), vec![1, 2 * k_dim * d], seed),
            norm1_gain: Parameter::new(p("norm1_gain"), vec![1, k_dim], crate::numerics::init::InitKind::Ones, seed),
            norm1_bias: Parameter::zeros(p("norm1_bias"), vec![1, k_dim], seed),
            norm2_gain: Parameter::new(p("norm2_gain"), vec![1, d], crate::numerics::init::InitKind::Ones, seed),
            norm2_bias: Parameter::zeros(p("norm2_bias"), vec![1, d], seed),
            k_dim,
            d,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> DimVars {
        DimVars {
            est_w: tape.leaf(self.est_w.tensor()),
            est_b: tape.leaf(self.est_b.tensor()),
            norm1_gain: tape.leaf(self.norm1_gain.tensor()),
            norm1_bias: tape.leaf(self.norm1_bias.tensor()),
            norm2_gain: tape.leaf(self.norm2_gain.tensor()),
            norm2_bias: tape.leaf(self.norm2_bias.tensor()),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.est_w,
            &self.est_b,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.est_w,
            &mut self.est_b,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }
}

/// Per-token dynamic transform: ω = estimator(cond_i) splits into ω₁ (d×k)
/// and ω₂ (k×d); out_i = norm(relu(norm(F_i·ω₁))·ω₂) + F_i.
pub fn dim_transform(
    tape: &mut Tape,
    features: Var,
    cond: Var,
    params: &DimParams,
    vars: &DimVars,
) -> Result<Var> {
    let (l, d) = (tape.shape(features)[0], tape.shape(features)[1]);
    let (lc, _) = (tape.shape(cond)[0], tape.shape(cond)[1]);
    if d != params.d {
        return Err(err_shape!("dim_transform: feature dim {d} vs {}", params.d));
    }
    if lc != l {
        return Err(err_shape!(
            "dim_transform: one conditioning token per feature token ({lc} vs {l})"
        ));
    }
    let k = params.k_dim;
    let omega = linear(tape, cond, vars.est_w, vars.est_b)?;
    let omega1 = tape.slice_cols(omega, 0, d * k)?;
    let omega2 = tape.slice_cols(omega, d * k, k * d)?;
    let projected = tape.rowwise_matmul(features, omega1, k)?;
    let normed1 = layer_norm_rows(tape, projected, vars.norm1_gain, vars.norm1_bias)?;
    let activated = tape.relu(normed1);
    let back = tape.rowwise_matmul(activated, omega2, d)?;
    let normed2 = layer_norm_rows(tape, back, vars.norm2_gain, vars.norm2_bias)?;
    tape.add(normed2, features)
}

/// Sinusoidal timestep embedding: interleaved sin/cos of `s` against
/// geometric frequencies spanning 1…10⁴.
pub fn timestep_embedding(s: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let sf = s as f64;
    for i in 0..half {
        let denom = if half > 1 {
            (10_000.0_f64).powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let angle = sf / denom;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = sf.sin();
    }
    Tensor::from_raw(vec![1, dim], out)
}

/// TSS parameters: two linear maps producing per-channel scale and shift from
/// the timestep embedding.
#[derive(Debug, Clone)]
pub struct TssParams {
    pub w_scale: Parameter,
    pub b_scale: Parameter,
    pub w_shift: Parameter,
    pub b_shift: Parameter,
    pub emb_dim: usize,
    pub d: usize,
}

pub struct TssVars {
    pub w_scale: Var,
    pub b_scale: Var,
    pub w_shift: Var,
    pub b_shift: Var,
}

impl TssVars {
    pub fn from_cursor(cur: &mut crate::numerics::tape::VarCursor<'_>) -> Self {
        TssVars {
            w_scale: cur.next(),
            b_scale: cur.next(),
            w_shift: cur.next(),
            b_shift: cur.next(),
        }
    }
}

impl TssParams {
    pub fn new(prefix: &str, d: usize, seed: u64) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        TssParams {
            w_scale: Parameter::xavier(p("w_scale"), d, d, seed),
            b_scale: Parameter::zeros(p("b_scale"), vec![1, d], seed),
            w_shift: Parameter::xavier(p("w_shift"), d, d, seed),
            b_shift: Parameter::zeros(p("b_shift"), vec![1, d], seed),
            emb_dim: d,
            d,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> TssVars {
        TssVars {
            w_scale: tape.leaf(self.w_scale.tensor()),
            b_scale: tape.leaf(self.b_scale.tensor()),
            w_shift: tape.leaf(self.w_shift.tensor()),
            b_shift: tape.leaf(self.b_shift.tensor()),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_scale, &self.b_scale, &self.w_shift, &self.b_shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.w_scale,
            &mut self.b_scale,
            &mut self.w_shift,
            &mut self.b_shift,
        ]
    }
}

/// out = F·(1+scale(s)) + shift(s), broadcast over tokens.
pub fn tss_scale(
    tape: &mut Tape,
    features: Var,
    s: usize,
    total_steps: usize,
    params: &TssParams,
    vars: &TssVars,
) -> Result<Var> {
    if s < 1 || s > total_steps {
        return Err(err_domain!("timestep {s} outside 1..={total_steps}"));
    }
    let (l, d) = (tape.shape(features)[0], tape.shape(features)[1]);
    if d != params.d {
        return Err(err_shape!("tss_scale: feature dim {d} vs {}", params.d));
    }
    let emb_t = timestep_embedding(s, params.emb_dim);
    let emb = tape.constant(&emb_t);
    let scale = linear(tape, emb, vars.w_scale, vars.b_scale)?;
    let shift = linear(tape, emb, vars.w_shift, vars.b_shift)?;
    let scale1p = tape.add_scalar(scale, 1.0);
    let scale_b = tape.bcast_rows(scale1p, l)?;
    let shift_b = tape.bcast_rows(shift, l)?;
    let scaled = tape.mul(features, scale_b)?;
    tape.add(scaled, shift_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_estimator_is_residual_passthrough() {
        // Zeroed estimator and zero-init norm biases: the branch is exactly 0
        // and the output equals the input.
        let params = DimParams::new("dim", 6, 6, 3, 1);
        let mut zeroed = params.clone();
        for p in [&mut zeroed.est_w, &mut zeroed.est_b] {
            p.tensor_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = random_tensor(vec![4, 6], 2);
        let cond = random_tensor(vec![4, 6], 3);
        let mut tape = Tape::new();
        let vars = zeroed.bind(&mut tape);
        let fv = tape.leaf(&f);
        let cv = tape.leaf(&cond);
        let out = dim_transform(&mut tape, fv, cv, &zeroed, &vars).unwrap();
        for (a, b) in tape.value(out).iter().zip(f.data()) {
            assert_eq!(*a, *b);
        }
        // and no conditioning leakage: different cond, same output
        let cond2 = random_tensor(vec![4, 6], 99);
        let mut tape2 = Tape::new();
        let vars2 = zeroed.bind(&mut tape2);
        let fv2 = tape2.leaf(&f);
        let cv2 = tape2.leaf(&cond2);
        let out2 = dim_transform(&mut tape2, fv2, cv2, &zeroed, &vars2).unwrap();
        assert_eq!(tape.value(out), tape2.value(out2));
    }

    #[test]
    fn bilinear_product_hand_trace() {
        // L=1, d=2, k=1, ω₁=[1,0]ᵀ, ω₂=[0,1]: (a,b) → inner product a, then
        // mapped back to (0,a) before the norms.
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::from_rows(&[vec![3.0, 5.0]]).unwrap());
        let omega1 = tape.leaf(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let omega2 = tape.leaf(&Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let y = tape.rowwise_matmul(f, omega1, 1).unwrap();
        assert_eq!(tape.value(y), &[3.0]);
        let back = tape.rowwise_matmul(y, omega2, 2).unwrap();
        assert_eq!(tape.value(back), &[0.0, 3.0]);
    }

    #[test]
    fn dim_tokens_are_independent() {
        let params = DimParams::new("dim", 4, 4, 2, 7);
        let f = random_tensor(vec![3, 4], 8);
        let cond = random_tensor(vec![3, 4], 9);
        let run = |f: &Tensor, c: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let fv = tape.leaf(f);
            let cv = tape.leaf(c);
            let out = dim_transform(&mut tape, fv, cv, &params, &vars).unwrap();
            tape.value(out).to_vec()
        };
        let base = run(&f, &cond);
        let perm = [2, 0, 1];
        let fp = Tensor::from_rows(&perm.iter().map(|&i| (0..4).map(|j| f.get2(i, j)).collect()).collect::<Vec<_>>()).unwrap();
        let cp = Tensor::from_rows(&perm.iter().map(|&i| (0..4).map(|j| cond.get2(i, j)).collect()).collect::<Vec<_>>()).unwrap();
        let permuted = run(&fp, &cp);
        for (r, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((permuted[r * 4 + j] - base[src * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_transform_passes_grad_check() {
        let params = DimParams::new("dim", 4, 4, 2, 11);
        let f = random_tensor(vec![2, 4], 12);
        let cond = random_tensor(vec![2, 4], 13);
        let inputs: Vec<Tensor> = [f, cond]
            .into_iter()
            .chain(params.params().iter().map(|p| p.tensor().clone()))
            .collect();
        let p2 = params.clone();
        let err = grad_check(
            move |tape, vars| {
                let dv = DimVars {
                    est_w: vars[2],
                    est_b: vars[3],
                    norm1_gain: vars[4],
                    norm1_bias: vars[5],
                    norm2_gain: vars[6],
                    norm2_bias: vars[7],
                };
                let out = dim_transform(tape, vars[0], vars[1], &p2, &dv)?;
                Ok(tape.sum_all(out))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn tss_identity_with_zero_params() {
        let mut params = TssParams::new("tss", 6, 1);
        for p in params.params_mut() {
            p.tensor_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = random_tensor(vec![3, 6], 2);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fv = tape.leaf(&f);
        let out = tss_scale(&mut tape, fv, 5, 100, &params, &vars).unwrap();
        assert_eq!(tape.value(out), f.data());
    }

    #[test]
    fn tss_distinguishes_timesteps() {
        let params = TssParams::new("tss", 8, 3);
        let f = random_tensor(vec![2, 8], 4);
        let run = |s: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let fv = tape.leaf(&f);
            let out = tss_scale(&mut tape, fv, s, 1000, &params, &vars).unwrap();
            tape.value(out).to_vec()
        };
        let a = run(3);
        let b = run(700);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn tss_rejects_out_of_range_timestep() {
        let params = TssParams::new("tss", 4, 5);
        let f = random_tensor(vec![1, 4], 6);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fv = tape.leaf(&f);
        assert!(tss_scale(&mut tape, fv, 0, 100, &params, &vars).is_err());
        assert!(tss_scale(&mut tape, fv, 101, 100, &params, &vars).is_err());
    }

    #[test]
    fn tss_is_affine_in_features() {
        let params = TssParams::new("tss", 4, 7);
        let f1 = random_tensor(vec![2, 4], 8);
        let f2 = random_tensor(vec![2, 4], 9);
        let run = |f: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let fv = tape.leaf(f);
            let out = tss_scale(&mut tape, fv, 10, 100, &params, &vars).unwrap();
            tape.value(out).to_vec()
        };
        // affine: out(f1) + out(f2) - out(0) == out(f1 + f2)
        let zero = Tensor::zeros(vec![2, 4]);
        let sum_t = Tensor::new(
            vec![2, 4],
            f1.data().iter().zip(f2.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let (o1, o2, oz, os) = (run(&f1), run(&f2), run(&zero), run(&sum_t));
        for i in 0..8 {
            assert!((o1[i] + o2[i] - oz[i] - os[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn tss_passes_grad_check() {
        let params = TssParams::new("tss", 4, 21);
        let f = random_tensor(vec![2, 4], 22);
        let inputs: Vec<Tensor> = std::iter::once(f)
            .chain(params.params().iter().map(|p| p.tensor().clone()))
            .collect();
        let p2 = params.clone();
        let err = grad_check(
            move |tape, vars| {
                let tv = TssVars {
                    w_scale: vars[1],
                    b_scale: vars[2],
                    w_shift: vars[3],
                    b_shift: vars[4],
                };
                let out = tss_scale(tape, vars[0], 17, 100, &p2, &tv)?;
                Ok(tape.sum_all(out))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn embedding_at_zero_is_sin0_cos1() {
        let e = timestep_embedding(0, 8);
        for i in 0..4 {
            assert_eq!(e.data()[2 * i], 0.0);
            assert_eq!(e.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn embeddings_are_pairwise_distinct() {
        let dim = 16;
        let embs: Vec<Vec<f64>> = (1..=1000).map(|s| timestep_embedding(s, dim).data().to_vec()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let max_diff = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(max_diff > 1e-6, "s={} vs s={}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn embedding_norm_is_bounded() {
        for s in [0, 1, 17, 999] {
            let e = timestep_embedding(s, 32);
            let norm: f64 = e.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= (32.0_f64).sqrt() + 1e-12);
        }
    }
}
