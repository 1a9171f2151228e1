// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch;
pub mod ppm;
pub mod psm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
