use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

use super::rng::RngStream;

/// Dense row-major 2-D tensor of 64-bit floats. Vectors are stored as
/// `(1, n)` rows so every parameter block shares one shape convention.
pub type Tensor = Array2<f64>;

/// A named parameter tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            value: Tensor::zeros((rows, cols)),
            grad: Tensor::zeros((rows, cols)),
        }
    }

    /// Uniform in `[-k, k]` with `k = 1/sqrt(fan_in)`.
    pub fn uniform(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut RngStream,
    ) -> Self {
        let k = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut block = Self::zeros(name, rows, cols);
        block.value.mapv_inplace(|_| rng.uniform_range(-k, k));
        block
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns trainable parameter blocks.
///
/// Block order is stable; optimizers and gradient checks rely on it.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamBlock>;
    fn params_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn check_cols(context: &'static str, view: &ArrayView2<f64>, cols: usize) -> Result<()> {
    if view.ncols() != cols {
        return Err(Error::Shape {
            context,
            expected: vec![view.nrows(), cols],
            found: vec![view.nrows(), view.ncols()],
        });
    }
    Ok(())
}
