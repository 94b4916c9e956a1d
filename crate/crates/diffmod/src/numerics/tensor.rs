use crate::error::{err_domain, err_shape, Error, Result};

/// Dense row-major tensor of f64 values.
///
/// All arithmetic in this crate runs in 64-bit; gradient verification needs
/// the precision headroom and determinism tests need bit-exact replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Gradient accumulator, same shape as `data`. Present iff `requires_grad`.
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the element count matches the shape
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(err_shape!(
                "shape {:?} expects {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor contains {v}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Like `new` but skips the finiteness scan. Internal fast path.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![value; n])
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(err_shape!("ragged rows"));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1, 1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a gradient target, allocating the accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let g = self
            .grad
            .as_mut()
            .ok_or_else(|| err_domain!("tensor does not require grad"))?;
        if g.len() != delta.len() {
            return Err(err_shape!("grad length {} vs {}", g.len(), delta.len()));
        }
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    /// Validates internal invariants; used by checked paths and tests.
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(err_shape!("shape/data mismatch"));
        }
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor contains {v}")));
        }
        if let Some(g) = &self.grad {
            if g.len() != self.data.len() {
                return Err(err_shape!("grad shape mismatch"));
            }
        }
        if self.grad.is_some() != self.requires_grad {
            return Err(err_domain!("grad presence inconsistent with requires_grad"));
        }
        Ok(())
    }

    /// Plain (non-recorded) matrix product, used by oracles and inference-only
    /// helpers.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(err_shape!(
                "matmul {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_raw(vec![m, n], out))
    }
}

/// out[m×n] += a[m×k] · b[k×n] with out zeroed by the caller. Row pairs are
/// processed together so each b row is streamed once per pair.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 1 < m {
        let (head, tail) = out.split_at_mut((i + 1) * n);
        let o0 = &mut head[i * n..];
        let o1 = &mut tail[..n];
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        for kk in 0..k {
            let (v0, v1) = (a0[kk], a1[kk]);
            if v0 == 0.0 && v1 == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for ((x0, x1), &bv) in o0.iter_mut().zip(o1.iter_mut()).zip(brow) {
                *x0 += v0 * bv;
                *x1 += v1 * bv;
            }
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}
