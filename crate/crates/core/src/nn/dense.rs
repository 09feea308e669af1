use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::rng::RngStream;
use super::tensor::{check_cols, ParamBlock, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected layer `act(x W + b)` with `W: (in, out)`, `b: (1, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
    output: Array2<f64>,
}

impl DenseCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl Dense {
    pub fn new(
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            weight: ParamBlock::uniform(format!("{name}.weight"), inputs, outputs, inputs, rng),
            bias: ParamBlock::zeros(format!("{name}.bias"), 1, outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols("dense forward", &input, self.inputs())?;
        let mut out = input.dot(&self.weight.value) + &self.bias.value;
        let act = self.activation;
        if act != Activation::Identity {
            out.mapv_inplace(|v| act.apply(v));
        }
        Ok(out)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        let out = self.forward(input)?;
        let cache = DenseCache {
            input: input.to_owned(),
            output: out.clone(),
        };
        Ok((out, cache))
    }

    /// Backpropagates `d_out` and returns the gradient with respect to the
    /// layer input. Parameter gradients are accumulated only when
    /// `accumulate` is set; a frozen layer still passes gradients through.
    pub fn backward(&mut self, cache: &DenseCache, d_out: ArrayView2<f64>, accumulate: bool) -> Array2<f64> {
        let mut d_pre = d_out.to_owned();
        let act = self.activation;
        if act != Activation::Identity {
            d_pre.zip_mut_with(&cache.output, |d, &o| *d *= act.derivative_from_output(o));
        }
        if accumulate {
            self.weight.grad += &cache.input.t().dot(&d_pre);
            self.bias.grad += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        d_pre.dot(&self.weight.value.t())
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&ParamBlock> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![&mut self.weight, &mut self.bias]
    }
}
