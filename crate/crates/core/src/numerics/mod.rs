//! Dense tensors, a reverse-mode tape over the model's primitive ops, the
//! `TALLTEN1` codec and a finite-difference gradient checker.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradReport, NamedTensors, ParamCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};
