//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_against, GradCheckConfig, GradCheckReport, Picks};
pub use optim::{optimizer_step, Optimizer, OptimizerState, UpdateRule};
pub use params::{Bound, Param, ParamSet};
pub use tape::{cosine_raw, Gradients, OpKind, Tape, Var, PROB_EPS};
pub use tensor::Tensor;

use rand::Rng;

/// Glorot-uniform initialization for a `fan_in × fan_out` weight.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

/// `x · w + b` over the rows of a rank-2 input.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> crate::Result<Var<'t>> {
    x.matmul(w)?.add_row(b)
}
