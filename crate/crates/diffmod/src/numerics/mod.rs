//! Dense-tensor arithmetic with reverse-mode automatic differentiation, plus
//! parameter initialization, gradient checking, and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use init::{derive_seed, derive_seed_index, fnv1a64, InitKind, InitSpec, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
