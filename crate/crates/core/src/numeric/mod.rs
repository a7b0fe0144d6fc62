//! Dense 64-bit numeric kernel: tensors, differentiable primitives, layers,
//! seeded randomness and gradient checking.

mod gradcheck;
mod layers;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{central_difference, grad_check, GradCheck, DEFAULT_STEP};
pub use layers::{temporal_conv1d, Conv1d, Linear};
pub use ops::{
    cosine_backward, cosine_similarity, linear, log_sum_exp, softmax, softmax_backward, COSINE_EPS,
};
pub(crate) use ops::{cosine_unchecked, softmax_unchecked};
pub use rng::Rng;
pub use tensor::{axpy, dot, norm, Tensor};
