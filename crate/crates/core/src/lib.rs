// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod capest;
pub mod channels;
pub mod dine;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod ndt;
pub mod nn;
pub mod trajectory;

pub use error::{Error, Result};
pub use dine::BatchSource;
pub use trajectory::Trajectories;
