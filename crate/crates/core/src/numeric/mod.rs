//! Dense tensors, reverse-mode differentiation, losses and optimizers.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff, finite_diff_grad, max_rel_err, rel_err};
pub use optim::{Moments, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tape::{gelu_scalar, OpKind, Tape, Var, GELU_SQRT_2_OVER_PI};
pub use tensor::{Real, Tensor};
