//! Named parameters with reproducible initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::tensor::Tensor;

/// 64-bit FNV-1a, used for name-salted seed derivation and file checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a64(label.as_bytes()))
}

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed_index(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum InitKind {
    /// Uniform in ±sqrt(6/(fan_in+fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
    Uniform { lo: f64, hi: f64 },
    Zeros,
    Ones,
    Constant(f64),
}

/// Distribution descriptor plus the seed that makes sampling reproducible.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InitSpec {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitSpec {
    pub fn sample(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match &self.kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::Constant(c) => vec![*c; n],
            InitKind::Uniform { lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..n).map(|_| rng.random_range(*lo..*hi)).collect()
            }
            InitKind::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        Tensor::from_raw(shape.to_vec(), data)
    }
}

/// A named, trainable tensor. Names form a `.`-separated path unique within a
/// model (uniqueness is checked when a model collects its parameters).
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    init: InitSpec,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: InitKind, base_seed: u64) -> Self {
        let name = name.into();
        let init = InitSpec {
            seed: derive_seed(base_seed, &name),
            kind,
        };
        let tensor = init.sample(&shape).with_grad();
        Parameter { name, tensor, init }
    }

    /// Standard linear-layer weight init per the crate-wide convention.
    pub fn xavier(name: impl Into<String>, fan_in: usize, fan_out: usize, base_seed: u64) -> Self {
        Parameter::new(
            name,
            vec![fan_in, fan_out],
            InitKind::XavierUniform { fan_in, fan_out },
            base_seed,
        )
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, base_seed: u64) -> Self {
        Parameter::new(name, shape, InitKind::Zeros, base_seed)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn init(&self) -> &InitSpec {
        &self.init
    }

    /// Replaces the stored values (used by checkpoint loading).
    pub fn set_tensor(&mut self, t: Tensor) -> crate::error::Result<()> {
        if t.shape() != self.tensor.shape() {
            return Err(crate::error::err_shape!(
                "parameter {}: shape {:?} vs {:?}",
                self.name,
                t.shape(),
                self.tensor.shape()
            ));
        }
        self.tensor = t.with_grad();
        Ok(())
    }
}
