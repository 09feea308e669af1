//! LSTM cell with exact step-level reverse-mode derivatives.
//!
//! Gate pre-activations are laid out as `[input | forget | candidate | output]`
//! blocks of `hidden` columns each:
//!
//! ```text
//! z  = x W_x + h_prev W_h + b
//! i  = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
//! c  = f * c_prev + i * g
//! h  = o * tanh(c)
//! ```
//!
//! The recurrent part `h_prev W_h + b` is exposed separately so that callers
//! can evaluate several inputs against the same previous state without
//! recomputing it.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

use super::rng::RngStream;
use super::tensor::{check_cols, ParamBlock, Parameterized};

pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `(input_size, 4 * hidden)`
    pub w_input: ParamBlock,
    /// `(hidden, 4 * hidden)`
    pub w_hidden: ParamBlock,
    /// `(1, 4 * hidden)`
    pub bias: ParamBlock,
    input_size: usize,
    hidden_size: usize,
}

/// Hidden and cell state for a batch, each `(batch, hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Array2<f64>,
    pub cell: Array2<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            hidden: Array2::zeros((batch, hidden)),
            cell: Array2::zeros((batch, hidden)),
        }
    }
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub input: Array2<f64>,
    /// Activated gates `[i | f | g | o]`, `(batch, 4 * hidden)`.
    pub gates: Array2<f64>,
    pub cell: Array2<f64>,
    pub tanh_cell: Array2<f64>,
    pub hidden: Array2<f64>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl LstmParams {
    pub fn new(name: &str, input_size: usize, hidden_size: usize, rng: &mut RngStream) -> Result<Self> {
        if hidden_size == 0 || input_size == 0 {
            return Err(Error::InvalidParameter(format!(
                "LSTM sizes must be positive (input {input_size}, hidden {hidden_size})"
            )));
        }
        let g = 4 * hidden_size;
        let mut bias = ParamBlock::zeros(format!("{name}.bias"), 1, g);
        bias.value
            .slice_mut(s![.., hidden_size..2 * hidden_size])
            .fill(FORGET_BIAS_INIT);
        Ok(Self {
            w_input: ParamBlock::uniform(format!("{name}.w_input"), input_size, g, input_size, rng),
            w_hidden: ParamBlock::uniform(format!("{name}.w_hidden"), hidden_size, g, hidden_size, rng),
            bias,
            input_size,
            hidden_size,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// `h_prev W_h + b`, shared by every input evaluated against `h_prev`.
    pub fn recurrent_preact(&self, h_prev: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols("lstm hidden state", &h_prev, self.hidden_size)?;
        Ok(h_prev.dot(&self.w_hidden.value) + &self.bias.value)
    }

    /// Finishes a step given the shared recurrent pre-activation.
    pub fn step_from_preact(
        &self,
        input: ArrayView2<f64>,
        shared: ArrayView2<f64>,
        c_prev: ArrayView2<f64>,
    ) -> Result<LstmStepCache> {
        check_cols("lstm input", &input, self.input_size)?;
        check_cols("lstm cell state", &c_prev, self.hidden_size)?;
        if input.nrows() != c_prev.nrows() || shared.nrows() != c_prev.nrows() {
            return Err(Error::LengthMismatch {
                context: "lstm batch",
                left: input.nrows(),
                right: c_prev.nrows(),
            });
        }
        let h = self.hidden_size;
        let mut gates = input.dot(&self.w_input.value);
        gates += &shared;
        for mut row in gates.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
            }
        }
        let batch = input.nrows();
        let mut cell = Array2::zeros((batch, h));
        let mut tanh_cell = Array2::zeros((batch, h));
        let mut hidden = Array2::zeros((batch, h));
        for b in 0..batch {
            let g = gates.row(b);
            for j in 0..h {
                let c = g[h + j] * c_prev[[b, j]] + g[j] * g[2 * h + j];
                let tc = c.tanh();
                cell[[b, j]] = c;
                tanh_cell[[b, j]] = tc;
                hidden[[b, j]] = g[3 * h + j] * tc;
            }
        }
        Ok(LstmStepCache {
            input: input.to_owned(),
            gates,
            cell,
            tanh_cell,
            hidden,
        })
    }

    /// One LSTM step from `state`.
    pub fn step(&self, input: ArrayView2<f64>, state: &LstmState) -> Result<(LstmState, LstmStepCache)> {
        if state.cell.dim() != state.hidden.dim() {
            return Err(Error::Shape {
                context: "lstm state",
                expected: state.hidden.shape().to_vec(),
                found: state.cell.shape().to_vec(),
            });
        }
        let shared = self.recurrent_preact(state.hidden.view())?;
        let cache = self.step_from_preact(input, shared.view(), state.cell.view())?;
        let next = LstmState {
            hidden: cache.hidden.clone(),
            cell: cache.cell.clone(),
        };
        Ok((next, cache))
    }

    /// Backward through the gate nonlinearities of one step.
    ///
    /// `d_hidden` and `d_cell` are the total gradients flowing into this
    /// step's outputs. Returns the pre-activation gradient `dz` and the
    /// gradient with respect to `c_prev`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        c_prev: ArrayView2<f64>,
        d_hidden: ArrayView2<f64>,
        d_cell: Option<ArrayView2<f64>>,
    ) -> (Array2<f64>, Array2<f64>) {
        let h = self.hidden_size;
        let batch = cache.gates.nrows();
        let mut dz = Array2::zeros((batch, 4 * h));
        let mut dc_prev = Array2::zeros((batch, h));
        for b in 0..batch {
            let g = cache.gates.row(b);
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = cache.tanh_cell[[b, j]];
                let dh = d_hidden[[b, j]];
                let mut dc = dh * o * (1.0 - tc * tc);
                if let Some(d_cell) = &d_cell {
                    dc += d_cell[[b, j]];
                }
                dz[[b, j]] = dc * gg * i * (1.0 - i);
                dz[[b, h + j]] = dc * c_prev[[b, j]] * f * (1.0 - f);
                dz[[b, 2 * h + j]] = dc * i * (1.0 - gg * gg);
                dz[[b, 3 * h + j]] = dh * tc * o * (1.0 - o);
                dc_prev[[b, j]] = dc * f;
            }
        }
        (dz, dc_prev)
    }

    /// Accumulates `dW_x += x^T dz_x`.
    pub fn accumulate_input_grad(&mut self, input: ArrayView2<f64>, dz: ArrayView2<f64>) {
        self.w_input.grad += &input.t().dot(&dz);
    }

    /// Accumulates `dW_h += h_prev^T dz` and `db += sum(dz)` for the shared
    /// recurrent pre-activation.
    pub fn accumulate_recurrent_grad(&mut self, h_prev: ArrayView2<f64>, dz: ArrayView2<f64>) {
        self.w_hidden.grad += &h_prev.t().dot(&dz);
        self.bias.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
    }

    /// Gradient with respect to the step input.
    pub fn input_grad(&self, dz: ArrayView2<f64>) -> Array2<f64> {
        dz.dot(&self.w_input.value.t())
    }

    /// Gradient with respect to `h_prev` through the shared pre-activation.
    pub fn hidden_grad(&self, dz: ArrayView2<f64>) -> Array2<f64> {
        dz.dot(&self.w_hidden.value.t())
    }
}

impl Parameterized for LstmParams {
    fn params(&self) -> Vec<&ParamBlock> {
        vec![&self.w_input, &self.w_hidden, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

/// Plain unroll from a zero state with exact BPTT; inputs are `(T, batch,
/// input)` and the objective is `sum_t <weights_t, h_t>`. Used for gradient
/// checking the cell in isolation.
pub fn unroll_weighted_hidden_sum(
    lstm: &mut LstmParams,
    inputs: &[Array2<f64>],
    weights: &[Array2<f64>],
    backward: bool,
) -> Result<f64> {
    let batch = inputs.first().map(|x| x.nrows()).ok_or(Error::Empty("lstm unroll"))?;
    let h = lstm.hidden_size();
    let mut state = LstmState::zeros(batch, h);
    let mut caches = Vec::with_capacity(inputs.len());
    let mut prev = Vec::with_capacity(inputs.len());
    let mut value = 0.0;
    for (x, w) in inputs.iter().zip(weights) {
        let (next, cache) = lstm.step(x.view(), &state)?;
        value += (&next.hidden * w).sum();
        prev.push(state);
        caches.push(cache);
        state = next;
    }
    if backward {
        let mut dh_next = Array2::zeros((batch, h));
        let mut dc_next = Array2::zeros((batch, h));
        for t in (0..inputs.len()).rev() {
            let dh = &weights[t] + &dh_next;
            let (dz, dc_prev) = lstm.step_backward(&caches[t], prev[t].cell.view(), dh.view(), Some(dc_next.view()));
            lstm.accumulate_input_grad(caches[t].input.view(), dz.view());
            lstm.accumulate_recurrent_grad(prev[t].hidden.view(), dz.view());
            dh_next = lstm.hidden_grad(dz.view());
            dc_next = dc_prev;
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};

    #[test]
    fn zero_params_zero_state_is_fixed_point() {
        let mut rng = RngStream::new(1);
        let mut lstm = LstmParams::new("l", 3, 4, &mut rng).unwrap();
        for p in lstm.params_mut() {
            p.value.fill(0.0);
        }
        let x = Array2::from_shape_fn((2, 3), |_| rng.normal());
        let (next, _) = lstm.step(x.view(), &LstmState::zeros(2, 4)).unwrap();
        assert!(next.hidden.iter().all(|&v| v == 0.0));
        assert!(next.cell.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_hold_the_cell() {
        let mut rng = RngStream::new(2);
        let mut lstm = LstmParams::new("l", 2, 3, &mut rng).unwrap();
        let h = 3;
        lstm.bias.value.slice_mut(s![.., 0..h]).fill(-50.0);
        lstm.bias.value.slice_mut(s![.., h..2 * h]).fill(50.0);
        let state = LstmState {
            hidden: Array2::from_shape_fn((1, h), |_| rng.uniform_range(-0.5, 0.5)),
            cell: Array2::from_shape_vec((1, h), vec![0.7, -1.3, 2.0]).unwrap(),
        };
        let x = Array2::from_shape_fn((1, 2), |_| rng.uniform_range(-1.0, 1.0));
        let (next, _) = lstm.step(x.view(), &state).unwrap();
        for (a, b) in next.cell.iter().zip(state.cell.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = RngStream::new(3);
        let lstm = LstmParams::new("l", 2, 3, &mut rng).unwrap();
        assert!(lstm.step(Array2::zeros((1, 3)).view(), &LstmState::zeros(1, 3)).is_err());
        assert!(lstm.step(Array2::zeros((1, 2)).view(), &LstmState::zeros(1, 4)).is_err());
        assert!(LstmParams::new("l", 2, 0, &mut rng).is_err());
    }

    #[test]
    fn bptt_matches_finite_differences_over_five_steps() {
        let mut rng = RngStream::new(5);
        let mut lstm = LstmParams::new("l", 2, 4, &mut rng).unwrap();
        lstm.bias.value.mapv_inplace(|v| v + rng.uniform_range(-0.3, 0.3));
        let inputs: Vec<_> = (0..5).map(|_| Array2::from_shape_fn((3, 2), |_| rng.normal())).collect();
        let weights: Vec<_> = (0..5).map(|_| Array2::from_shape_fn((3, 4), |_| rng.normal())).collect();
        lstm.zero_grad();
        unroll_weighted_hidden_sum(&mut lstm, &inputs, &weights, true).unwrap();
        let report = grad_check(
            &mut lstm,
            |l| unroll_weighted_hidden_sum(&mut l.clone(), &inputs, &weights, false),
            &GradCheckOptions { tolerance: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
