//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod dense;
pub mod gradcheck;
mod param;
mod session;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use session::{Mode, Session};
pub use tape::{LstmWeights, Padding, Tape, Var};
