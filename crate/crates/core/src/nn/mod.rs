//! Numeric substrate: parameter tensors, seeded random streams, dense and LSTM
//! layers with exact reverse-mode gradients, Adam, and finite-difference
//! gradient checking.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod lstm;
pub mod rng;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use dense::{Activation, Dense, DenseCache};
pub use gradcheck::{central_difference, grad_check, GradCheckOptions, GradCheckReport};
pub use lstm::{LstmParams, LstmState, LstmStepCache};
pub use rng::RngStream;
pub use tensor::{ParamBlock, Parameterized, Tensor};
