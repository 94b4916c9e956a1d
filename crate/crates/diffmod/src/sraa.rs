//! Spatial Relation Aggregation Attention: multi-head attention fused with a
//! learned relational branch indexed by quantized inter-point distance. One
//! implementation serves both the self-attention (SRSA) and cross-attention
//! (SRCA) uses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{err_config, err_domain, err_shape, Result};
use crate::numerics::init::Parameter;
use crate::numerics::nn::{layer_norm_rows, linear};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SraaConfig {
    /// Pixel quantization stride of the distance buckets.
    pub alpha: f64,
    /// Maximum bucket index; indices live in 0..=beta.
    pub beta: usize,
    /// Log-slope base of the far-field bucketing.
    pub gamma: f64,
    pub heads: usize,
    /// Model dimension.
    pub d: usize,
}

impl Default for SraaConfig {
    fn default() -> Self {
        SraaConfig {
            alpha: 16.0,
            beta: 8,
            gamma: 8.0,
            heads: 4,
            d: 64,
        }
    }
}

impl SraaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(err_config!("alpha must be positive"));
        }
        if self.gamma <= 1.0 {
            return Err(err_config!("gamma must exceed 1"));
        }
        if self.beta < 1 {
            return Err(err_config!("beta must be at least 1"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(err_config!("d={} must divide into heads={}", self.d, self.heads));
        }
        Ok(())
    }

    pub fn buckets(&self) -> usize {
        self.beta + 1
    }
}

/// Piecewise distance quantization: linear in strides of `alpha` up close,
/// logarithmic with base `gamma` beyond, saturating at `beta`.
pub fn quantize_distance(x: f64, cfg: &SraaConfig) -> Result<usize> {
    if x < 0.0 {
        return Err(err_domain!("distance {x} is negative"));
    }
    let bucket = if x <= cfg.alpha {
        (x / cfg.alpha).floor() as usize
    } else {
        let raw = 1.0 + (x / cfg.alpha).ln() / cfg.gamma.ln() * (cfg.beta as f64 - 1.0);
        (raw.floor() as usize).min(cfg.beta)
    };
    Ok(bucket)
}

/// Parameters of one SRAA layer: relation encoding, multi-head projections,
/// post-norm, and the output linear map.
#[derive(Debug, Clone)]
pub struct SraaLayer {
    pub eta: Parameter,
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub norm_gain: Parameter,
    pub norm_bias: Parameter,
    pub ff_w: Parameter,
    pub ff_b: Parameter,
}

pub struct SraaLayerVars {
    pub eta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub ff_w: Var,
    pub ff_b: Var,
}

impl SraaLayerVars {
    /// Rebuilds the structure from a flat binding; order matches `params`.
    pub fn from_cursor(cur: &mut crate::numerics::tape::VarCursor<'_>) -> Self {
        SraaLayerVars {
            eta: cur.next(),
            wq: cur.next(),
            bq: cur.next(),
            wk: cur.next(),
            bk: cur.next(),
            wv: cur.next(),
            bv: cur.next(),
            wo: cur.next(),
            bo: cur.next(),
            norm_gain: cur.next(),
            norm_bias: cur.next(),
            ff_w: cur.next(),
            ff_b: cur.next(),
        }
    }
}

impl SraaLayer {
    pub fn new(prefix: &str, cfg: &SraaConfig, seed: u64) -> Self {
        let d = cfg.d;
        let p = |n: &str| format!("{prefix}.{n}");
        SraaLayer {
            eta: Parameter::xavier(p("eta"), cfg.buckets(), d, seed),
            wq: Parameter::xavier(p("wq"), d, d, seed),
            bq: Parameter::zeros(p("bq"), vec![1, d], seed),
            wk: Parameter::xavier(p("wk"), d, d, seed),
            bk: Parameter::zeros(p("bk"), vec![1, d], seed),
            wv: Parameter::xavier(p("wv"), d, d, seed),
            bv: Parameter::zeros(p("bv"), vec![1, d], seed),
            wo: Parameter::xavier(p("wo"), d, d, seed),
            bo: Parameter::zeros(p("bo"), vec![1, d], seed),
            norm_gain: Parameter::new(
                p("norm_gain"),
                vec![1, d],
                crate::numerics::init::InitKind::Ones,
                seed,
            ),
            norm_bias: Parameter::zeros(p("norm_bias"), vec![1, d], seed),
            ff_w: Parameter::xavier(p("ff_w"), d, d, seed),
            ff_b: Parameter::zeros(p("ff_b"), vec![1, d], seed),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SraaLayerVars {
        SraaLayerVars {
            eta: tape.leaf(self.eta.tensor()),
            wq: tape.leaf(self.wq.tensor()),
            bq: tape.leaf(self.bq.tensor()),
            wk: tape.leaf(self.wk.tensor()),
            bk: tape.leaf(self.bk.tensor()),
            wv: tape.leaf(self.wv.tensor()),
            bv: tape.leaf(self.bv.tensor()),
            wo: tape.leaf(self.wo.tensor()),
            bo: tape.leaf(self.bo.tensor()),
            norm_gain: tape.leaf(self.norm_gain.tensor()),
            norm_bias: tape.leaf(self.norm_bias.tensor()),
            ff_w: tape.leaf(self.ff_w.tensor()),
            ff_b: tape.leaf(self.ff_b.tensor()),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.eta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.norm_gain,
            &self.norm_bias,
            &self.ff_w,
            &self.ff_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.eta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.ff_w,
            &mut self.ff_b,
        ]
    }
}

/// Cross weights against the relation encoding: w = f_a · ηᵀ.
pub fn relation_weights(tape: &mut Tape, f_a: Var, eta: Var) -> Result<Var> {
    let eta_t = tape.transpose(eta)?;
    tape.matmul(f_a, eta_t)
}

/// Gathers relational attention logits W[i,j] = w[i, buckets[i,j]].
pub fn gather_relation(tape: &mut Tape, w: Var, buckets: Rc<Vec<usize>>, l_b: usize) -> Result<Var> {
    tape.gather_per_row(w, buckets, l_b)
}

/// Precomputed bucket boundaries: bucket(x) is the largest b with
/// x ≥ boundary[b]. Equivalent to `quantize_distance` but compares squared
/// distances, avoiding per-pair ln/sqrt on the L_a×L_b matrices.
pub struct BucketTable {
    boundaries_sq: Vec<f64>,
}

impl BucketTable {
    pub fn new(cfg: &SraaConfig) -> Self {
        let mut boundaries_sq = Vec::with_capacity(cfg.beta + 1);
        boundaries_sq.push(0.0);
        boundaries_sq.push(cfg.alpha * cfg.alpha);
        for b in 2..=cfg.beta {
            let t = cfg.alpha * cfg.gamma.powf((b as f64 - 1.0) / (cfg.beta as f64 - 1.0));
            boundaries_sq.push(t * t);
        }
        BucketTable { boundaries_sq }
    }

    #[inline]
    pub fn bucket_of_sq(&self, dist_sq: f64) -> usize {
        let mut b = 0;
        for (i, t) in self.boundaries_sq.iter().enumerate().skip(1) {
            if dist_sq >= *t {
                b = i;
            } else {
                break;
            }
        }
        b
    }
}

/// Pairwise Euclidean distances between coordinate sets, quantized to bucket
/// indices. Coordinates are plain values: the bucketing is piecewise constant
/// so it carries no gradient.
pub fn bucket_matrix(
    coords_a: &[f64],
    coords_b: &[f64],
    cfg: &SraaConfig,
) -> Result<Rc<Vec<usize>>> {
    let l_a = coords_a.len() / 2;
    let l_b = coords_b.len() / 2;
    let table = BucketTable::new(cfg);
    let mut out = Vec::with_capacity(l_a * l_b);
    for i in 0..l_a {
        let (ax, ay) = (coords_a[i * 2], coords_a[i * 2 + 1]);
        for j in 0..l_b {
            let dx = ax - coords_b[j * 2];
            let dy = ay - coords_b[j * 2 + 1];
            out.push(table.bucket_of_sq(dx * dx + dy * dy));
        }
    }
    Ok(Rc::new(out))
}

/// One SRAA application: queries (f_a, C_a) attend to keys/values (f_b, C_b).
/// Passing the same pair twice realizes SRSA; distinct pairs realize SRCA.
///
/// The relational branch soft-maxes gathered distance-bucket logits and
/// aggregates the shared value projection; it is added to the multi-head
/// output and the residual input before the post-norm and output linear.
pub fn sraa_attention(
    tape: &mut Tape,
    f_a: Var,
    coords_a: &Tensor,
    f_b: Var,
    coords_b: &Tensor,
    layer: &SraaLayerVars,
    cfg: &SraaConfig,
) -> Result<Var> {
    let buckets = bucket_matrix(coords_a.data(), coords_b.data(), cfg)?;
    sraa_attention_with_buckets(tape, f_a, coords_a, f_b, coords_b, buckets, layer, cfg)
}

/// `sraa_attention` with externally supplied bucket indices. Bucketing is
/// piecewise constant, so finite-difference verification freezes it here.
#[allow(clippy::too_many_arguments)]
pub fn sraa_attention_with_buckets(
    tape: &mut Tape,
    f_a: Var,
    coords_a: &Tensor,
    f_b: Var,
    coords_b: &Tensor,
    buckets: Rc<Vec<usize>>,
    layer: &SraaLayerVars,
    cfg: &SraaConfig,
) -> Result<Var> {
    let (l_a, da) = (tape.shape(f_a)[0], tape.shape(f_a)[1]);
    let (l_b, db) = (tape.shape(f_b)[0], tape.shape(f_b)[1]);
    if da != cfg.d || db != cfg.d {
        return Err(err_shape!("sraa: feature dims {da}/{db} vs d={}", cfg.d));
    }
    if coords_a.rows() != l_a || coords_b.rows() != l_b {
        return Err(err_shape!(
            "sraa: coordinate rows {}/{} vs feature rows {l_a}/{l_b}",
            coords_a.rows(),
            coords_b.rows()
        ));
    }

    let q = linear(tape, f_a, layer.wq, layer.bq)?;
    let k = linear(tape, f_b, layer.wk, layer.bk)?;
    let v = linear(tape, f_b, layer.wv, layer.bv)?;

    // Multi-head dot-product branch.
    let dh = cfg.d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for hix in 0..cfg.heads {
        let qh = tape.slice_cols(q, hix * dh, dh)?;
        let kh = tape.slice_cols(k, hix * dh, dh)?;
        let vh = tape.slice_cols(v, hix * dh, dh)?;
        let kh_t = tape.transpose(kh)?;
        let scores = tape.matmul_scaled(qh, kh_t, scale)?;
        let attn = tape.softmax_rows(scores)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let mut concat = head_outs[0];
    for h in &head_outs[1..] {
        concat = tape.concat_cols(concat, *h)?;
    }
    let mha = linear(tape, concat, layer.wo, layer.bo)?;

    // Relational branch over distance buckets.
    let w = relation_weights(tape, f_a, layer.eta)?;
    let rel_logits = gather_relation(tape, w, buckets, l_b)?;
    let rel_attn = tape.softmax_rows(rel_logits)?;
    let relational = tape.matmul(rel_attn, v)?;

    let sum1 = tape.add(f_a, mha)?;
    let fused = tape.add(sum1, relational)?;
    let normed = layer_norm_rows(tape, fused, layer.norm_gain, layer.norm_bias)?;
    linear(tape, normed, layer.ff_w, layer.ff_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SraaConfig {
        SraaConfig::default()
    }

    #[test]
    fn quantize_examples_from_formula() {
        let c = cfg();
        assert_eq!(quantize_distance(0.0, &c).unwrap(), 0);
        assert_eq!(quantize_distance(8.0, &c).unwrap(), 0);
        assert_eq!(quantize_distance(16.0, &c).unwrap(), 1);
        assert_eq!(quantize_distance(32.0, &c).unwrap(), 3);
        assert_eq!(quantize_distance(128.0, &c).unwrap(), 8);
        assert_eq!(quantize_distance(1e6, &c).unwrap(), 8);
    }

    #[test]
    fn quantize_rejects_negative() {
        assert!(quantize_distance(-1.0, &cfg()).is_err());
    }

    #[test]
    fn bucket_table_matches_formula() {
        let c = cfg();
        let table = BucketTable::new(&c);
        for &x in &[0.0, 8.0, 16.0, 32.0, 128.0, 1e6] {
            assert_eq!(
                table.bucket_of_sq(x * x),
                quantize_distance(x, &c).unwrap(),
                "x = {x}"
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100_000 {
            let x: f64 = rng.random_range(0.0..700.0);
            assert_eq!(
                table.bucket_of_sq(x * x),
                quantize_distance(x, &c).unwrap(),
                "x = {x}"
            );
        }
    }

    #[test]
    fn quantize_is_monotone_and_saturates() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let a: f64 = rng.random_range(0.0..600.0);
            let b: f64 = rng.random_range(0.0..600.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!(quantize_distance(lo, &c).unwrap() <= quantize_distance(hi, &c).unwrap());
        }
        assert_eq!(quantize_distance(1e12, &c).unwrap(), c.beta);
    }

    fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn relation_weights_match_hand_matmul() {
        let mut tape = Tape::new();
        let f = random_tensor(vec![2, 4], 2, -1.0, 1.0);
        let eta = random_tensor(vec![3, 4], 3, -1.0, 1.0);
        let fv = tape.leaf(&f);
        let ev = tape.leaf(&eta);
        let w = relation_weights(&mut tape, fv, ev).unwrap();
        for i in 0..2 {
            for b in 0..3 {
                let expect: f64 = (0..4).map(|c| f.get2(i, c) * eta.get2(b, c)).sum();
                assert!((tape.value(w)[i * 3 + b] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relation_weights_one_hot_probe() {
        // one-hot feature rows pick out η rows directly
        let mut tape = Tape::new();
        let f = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let eta = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let fv = tape.leaf(&f);
        let ev = tape.leaf(&eta);
        let w = relation_weights(&mut tape, fv, ev).unwrap();
        assert_eq!(tape.value(w), &[1.0, 4.0, 3.0, 6.0]);
    }

    #[test]
    fn gather_relation_hand_case() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]).unwrap());
        let buckets = Rc::new(vec![0, 1, 1, 1, 0, 0]);
        let out = gather_relation(&mut tape, w, buckets, 3).unwrap();
        assert_eq!(tape.value(out), &[10.0, 20.0, 20.0, 40.0, 30.0, 30.0]);
    }

    fn make_layer_and_inputs(
        l_a: usize,
        l_b: usize,
        seed: u64,
    ) -> (SraaLayer, SraaConfig, Tensor, Tensor, Tensor, Tensor) {
        let mut c = cfg();
        c.d = 16;
        c.heads = 2;
        let layer = SraaLayer::new("t", &c, seed);
        let f_a = random_tensor(vec![l_a, 16], seed + 1, -1.0, 1.0);
        let f_b = random_tensor(vec![l_b, 16], seed + 2, -1.0, 1.0);
        let c_a = random_tensor(vec![l_a, 2], seed + 3, 0.0, 100.0);
        let c_b = random_tensor(vec![l_b, 2], seed + 4, 0.0, 100.0);
        (layer, c, f_a, f_b, c_a, c_b)
    }

    fn run_attention(
        layer: &SraaLayer,
        c: &SraaConfig,
        f_a: &Tensor,
        c_a: &Tensor,
        f_b: &Tensor,
        c_b: &Tensor,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let fa = tape.leaf(f_a);
        let fb = tape.leaf(f_b);
        let out = sraa_attention(&mut tape, fa, c_a, fb, c_b, &vars, c).unwrap();
        tape.value(out).to_vec()
    }

    #[test]
    fn single_key_relational_branch_ignores_eta() {
        // L_b = 1: softmax over one key is 1 regardless of the logits, so the
        // output cannot depend on η.
        let (mut layer, c, f_a, f_b, c_a, c_b) = make_layer_and_inputs(3, 1, 7);
        let out1 = run_attention(&layer, &c, &f_a, &c_a, &f_b, &c_b);
        for v in layer.eta.tensor_mut().data_mut() {
            *v += 3.21;
        }
        let out2 = run_attention(&layer, &c, &f_a, &c_a, &f_b, &c_b);
        for (a, b) in out1.iter().zip(&out2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn key_permutation_invariance() {
        let (layer, c, f_a, f_b, c_a, c_b) = make_layer_and_inputs(3, 5, 11);
        let out1 = run_attention(&layer, &c, &f_a, &c_a, &f_b, &c_b);
        // permute rows of (f_b, C_b) jointly
        let perm = [4, 2, 0, 1, 3];
        let f_b_p = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| (0..16).map(|j| f_b.get2(i, j)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let c_b_p = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| vec![c_b.get2(i, 0), c_b.get2(i, 1)])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let out2 = run_attention(&layer, &c, &f_a, &c_a, &f_b_p, &c_b_p);
        for (a, b) in out1.iter().zip(&out2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn query_permutation_equivariance() {
        let (layer, c, f_a, f_b, c_a, c_b) = make_layer_and_inputs(4, 3, 13);
        let out1 = run_attention(&layer, &c, &f_a, &c_a, &f_b, &c_b);
        let perm = [2, 0, 3, 1];
        let f_a_p = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| (0..16).map(|j| f_a.get2(i, j)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let c_a_p = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| vec![c_a.get2(i, 0), c_a.get2(i, 1)])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let out2 = run_attention(&layer, &c, &f_a_p, &c_a_p, &f_b, &c_b);
        for (r, &src) in perm.iter().enumerate() {
            for j in 0..16 {
                assert!((out2[r * 16 + j] - out1[src * 16 + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearby_bucket_dominates_when_weights_decrease() {
        // Two keys with identical features but different distance buckets:
        // when the gathered per-bucket weights decrease with bucket index,
        // the nearer key receives at least the attention of the farther one.
        let mut c = cfg();
        c.d = 4;
        c.heads = 1;
        let mut tape = Tape::new();
        // queries at origin; keys at distance 4 (bucket 0) and 200 (bucket >0)
        let f_a = Tensor::from_rows(&[vec![1.0, 0.5, -0.5, 0.25]]).unwrap();
        let c_a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let c_b = Tensor::from_rows(&[vec![4.0, 0.0], vec![200.0, 0.0]]).unwrap();
        // η chosen so w-row is strictly decreasing in bucket index
        let eta_rows: Vec<Vec<f64>> = (0..c.buckets())
            .map(|b| {
                let s = 1.0 - b as f64 * 0.1;
                vec![s, s, s, s]
            })
            .collect();
        let eta = Tensor::from_rows(&eta_rows).unwrap();
        let fa = tape.leaf(&f_a);
        let ev = tape.leaf(&eta);
        let w = relation_weights(&mut tape, fa, ev).unwrap();
        let buckets = bucket_matrix(c_a.data(), c_b.data(), &c).unwrap();
        let logits = gather_relation(&mut tape, w, buckets, 2).unwrap();
        let attn = tape.softmax_rows(logits).unwrap();
        let a = tape.value(attn);
        assert!(a[0] >= a[1], "near {} vs far {}", a[0], a[1]);
    }

    #[test]
    fn attention_gradients_pass_grad_check() {
        use crate::numerics::gradcheck::grad_check;
        let mut c = cfg();
        c.d = 6;
        c.heads = 2;
        let l_a = 3;
        let l_b = 2;
        let c_a = random_tensor(vec![l_a, 2], 31, 0.0, 60.0);
        let c_b = random_tensor(vec![l_b, 2], 32, 0.0, 60.0);
        let layer = SraaLayer::new("g", &c, 5);
        let inputs: Vec<Tensor> = std::iter::once(random_tensor(vec![l_a, 6], 33, -1.0, 1.0))
            .chain(std::iter::once(random_tensor(vec![l_b, 6], 34, -1.0, 1.0)))
            .chain(layer.params().iter().map(|p| p.tensor().clone()))
            .collect();
        let c2 = c.clone();
        let ca = c_a.clone();
        let cb = c_b.clone();
        let err = grad_check(
            move |tape, vars| {
                let layer_vars = SraaLayerVars {
                    eta: vars[2],
                    wq: vars[3],
                    bq: vars[4],
                    wk: vars[5],
                    bk: vars[6],
                    wv: vars[7],
                    bv: vars[8],
                    wo: vars[9],
                    bo: vars[10],
                    norm_gain: vars[11],
                    norm_bias: vars[12],
                    ff_w: vars[13],
                    ff_b: vars[14],
                };
                let out = sraa_attention(tape, vars[0], &ca, vars[1], &cb, &layer_vars, &c2)?;
                Ok(tape.sum_all(out))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
