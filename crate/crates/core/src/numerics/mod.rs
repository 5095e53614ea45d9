//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, objective, finite_diff_check, GradCheckReport, DEFAULT_FD_STEP};
pub use params::{normal_vector, Bound, LinearParams, NamedTensor, NormParams, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{sigmoid, Tensor};

pub(crate) use tape::softmax_in_place;
pub(crate) use tensor::dot;


/// Plain (untracked) `x · Wᵀ + b`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let tape = Tape::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(weight.clone()), tape.constant(bias.clone()));
    x.linear(w, b).value()
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut v = x.values().to_vec();
    let m = x.cols();
    for r in 0..x.rows() {
        softmax_in_place(&mut v[r * m..(r + 1) * m]);
    }
    Tensor::new(x.shape().to_vec(), v)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Tensor {
    let tape = Tape::new();
    tape.constant(x.clone()).layer_norm(tape.constant(gain.clone()), tape.constant(shift.clone())).value()
}
