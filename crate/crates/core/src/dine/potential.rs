//! A DV potential: modified LSTM trunk followed by a tanh dense layer and a
//! scalar head.
//!
//! The modified unroll advances the recurrence on the true samples only. At
//! every step the reference sample is pushed through the same cell from the
//! same previous *true* state, producing a branch state that never feeds
//! forward:
//!
//! ```text
//! s_i  = F(u_i,  s_{i-1})
//! s~_i = F(u~_i, s_{i-1})
//! ```
//!
//! where `u_i = (y_i, x_i)` and `u~_i = (y~_i, x_i)` (the `x` part is absent
//! for the output-only potential).

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Dense, DenseCache, LstmParams, LstmState, LstmStepCache, ParamBlock, Parameterized, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub lstm: LstmParams,
    pub hidden: Dense,
    pub head: Dense,
    y_dim: usize,
    x_dim: usize,
}

/// True-path and reference-branch states for every step of an unroll.
#[derive(Debug, Clone)]
pub struct DualStateStream {
    pub states: Vec<LstmState>,
    pub branch_states: Vec<LstmState>,
}

/// Cached forward pass, consumed by [`Potential::backward`].
#[derive(Debug, Clone)]
pub struct PotentialPass {
    true_steps: Vec<LstmStepCache>,
    ref_steps: Vec<LstmStepCache>,
    hidden_true: DenseCache,
    head_true: DenseCache,
    hidden_ref: DenseCache,
    head_ref: DenseCache,
    /// Potential on true samples, `(T, batch)`.
    pub values_true: Array2<f64>,
    /// Potential on reference samples, `(T, batch)`.
    pub values_ref: Array2<f64>,
}

/// Gradients of a scalar objective with respect to the driver sequences.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub dy: Array3<f64>,
    /// Empty (`dim 0`) for the output-only potential.
    pub dx: Array3<f64>,
}

impl Potential {
    pub fn new(name: &str, y_dim: usize, x_dim: usize, hidden: usize, dense: usize, rng: &mut RngStream) -> Result<Self> {
        if y_dim == 0 || dense == 0 {
            return Err(Error::InvalidParameter(format!("potential sizes y_dim={y_dim}, dense={dense}")));
        }
        Ok(Self {
            lstm: LstmParams::new(&format!("{name}.lstm"), y_dim + x_dim, hidden, rng)?,
            hidden: Dense::new(&format!("{name}.dense"), hidden, dense, Activation::Tanh, rng),
            head: Dense::new(&format!("{name}.head"), dense, 1, Activation::Identity, rng),
            y_dim,
            x_dim,
        })
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn check(&self, y: &ArrayView3<f64>, x: &ArrayView3<f64>, y_ref: &ArrayView3<f64>) -> Result<()> {
        let (t, b, dy) = y.dim();
        if dy != self.y_dim {
            return Err(Error::Shape { context: "potential y", expected: vec![t, b, self.y_dim], found: y.shape().to_vec() });
        }
        if y_ref.dim() != y.dim() {
            return Err(Error::LengthMismatch { context: "driver vs reference sequence", left: t, right: y_ref.dim().0 });
        }
        if self.x_dim > 0 && x.dim() != (t, b, self.x_dim) {
            return Err(Error::Shape { context: "potential x", expected: vec![t, b, self.x_dim], found: x.shape().to_vec() });
        }
        if t == 0 || b == 0 {
            return Err(Error::Empty("potential input"));
        }
        Ok(())
    }

    fn driver(y_t: ArrayView2<f64>, x_t: Option<ArrayView2<f64>>) -> Array2<f64> {
        match x_t {
            Some(x_t) => concatenate![Axis(1), y_t, x_t],
            None => y_t.to_owned(),
        }
    }

    fn unroll(
        &self,
        y: ArrayView3<f64>,
        x: ArrayView3<f64>,
        y_ref: ArrayView3<f64>,
    ) -> Result<(Vec<LstmStepCache>, Vec<LstmStepCache>)> {
        self.check(&y, &x, &y_ref)?;
        let (len, batch, _) = y.dim();
        let h = self.lstm.hidden_size();
        let zeros = Array2::zeros((batch, h));
        let mut true_steps: Vec<LstmStepCache> = Vec::with_capacity(len);
        let mut ref_steps = Vec::with_capacity(len);
        for t in 0..len {
            let (h_prev, c_prev) = match true_steps.last() {
                Some(prev) => (prev.hidden.view(), prev.cell.view()),
                None => (zeros.view(), zeros.view()),
            };
            let x_t = (self.x_dim > 0).then(|| x.index_axis(Axis(0), t));
            let input = Self::driver(y.index_axis(Axis(0), t), x_t);
            let ref_input = Self::driver(y_ref.index_axis(Axis(0), t), x_t);
            let shared = self.lstm.recurrent_preact(h_prev)?;
            let true_step = self.lstm.step_from_preact(input.view(), shared.view(), c_prev)?;
            let ref_step = self.lstm.step_from_preact(ref_input.view(), shared.view(), c_prev)?;
            true_steps.push(true_step);
            ref_steps.push(ref_step);
        }
        Ok((true_steps, ref_steps))
    }

    /// Runs the modified unroll and returns the true-path and branch states.
    /// `x` is ignored (may be any shape) for the output-only potential.
    pub fn modified_unroll(&self, y: ArrayView3<f64>, x: ArrayView3<f64>, y_ref: ArrayView3<f64>) -> Result<DualStateStream> {
        let (true_steps, ref_steps) = self.unroll(y, x, y_ref)?;
        let to_state = |c: LstmStepCache| LstmState { hidden: c.hidden, cell: c.cell };
        Ok(DualStateStream {
            states: true_steps.into_iter().map(to_state).collect(),
            branch_states: ref_steps.into_iter().map(to_state).collect(),
        })
    }

    fn stack_hidden(steps: &[LstmStepCache]) -> Array2<f64> {
        let views: Vec<_> = steps.iter().map(|c| c.hidden.view()).collect();
        concatenate(Axis(0), &views).expect("equal step widths")
    }

    /// Forward pass with caches for backpropagation.
    pub fn forward(&self, y: ArrayView3<f64>, x: ArrayView3<f64>, y_ref: ArrayView3<f64>) -> Result<PotentialPass> {
        let (len, batch, _) = y.dim();
        let (true_steps, ref_steps) = self.unroll(y, x, y_ref)?;
        let (hid_t, hidden_true) = self.hidden.forward_cached(Self::stack_hidden(&true_steps).view())?;
        let (out_t, head_true) = self.head.forward_cached(hid_t.view())?;
        let (hid_r, hidden_ref) = self.hidden.forward_cached(Self::stack_hidden(&ref_steps).view())?;
        let (out_r, head_ref) = self.head.forward_cached(hid_r.view())?;
        let values_true = out_t.into_shape_with_order((len, batch)).expect("scalar head");
        let values_ref = out_r.into_shape_with_order((len, batch)).expect("scalar head");
        ensure_finite(values_true.as_slice().unwrap_or(&[]), || "potential on true samples".into())?;
        ensure_finite(values_ref.as_slice().unwrap_or(&[]), || "potential on reference samples".into())?;
        Ok(PotentialPass {
            true_steps,
            ref_steps,
            hidden_true,
            head_true,
            hidden_ref,
            head_ref,
            values_true,
            values_ref,
        })
    }

    /// Forward pass without caches: `(values_true, values_ref)`, each `(T, batch)`.
    pub fn values(&self, y: ArrayView3<f64>, x: ArrayView3<f64>, y_ref: ArrayView3<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let pass = self.forward(y, x, y_ref)?;
        Ok((pass.values_true, pass.values_ref))
    }

    /// Backpropagates objective gradients with respect to the true and
    /// reference potentials (`(T, batch)` each).
    ///
    /// With `accumulate` set, parameter gradients are added to the blocks.
    /// With `input_grads` set, gradients with respect to the true `y` and to
    /// `x` (through both branches) are returned; the reference samples are
    /// treated as constants.
    pub fn backward(
        &mut self,
        pass: &PotentialPass,
        d_true: ArrayView2<f64>,
        d_ref: ArrayView2<f64>,
        accumulate: bool,
        input_grads: bool,
    ) -> Option<InputGrads> {
        let (len, batch) = pass.values_true.dim();
        let h = self.lstm.hidden_size();
        let rows = |a: ArrayView2<f64>| a.to_owned().into_shape_with_order((len * batch, 1)).expect("(T, batch)");

        let d_hid_t = self.head.backward(&pass.head_true, rows(d_true).view(), accumulate);
        let dh_true = self.hidden.backward(&pass.hidden_true, d_hid_t.view(), accumulate);
        let d_hid_r = self.head.backward(&pass.head_ref, rows(d_ref).view(), accumulate);
        let dh_ref = self.hidden.backward(&pass.hidden_ref, d_hid_r.view(), accumulate);

        let mut grads = input_grads.then(|| InputGrads {
            dy: Array3::zeros((len, batch, self.y_dim)),
            dx: Array3::zeros((len, batch, self.x_dim)),
        });
        let zeros = Array2::zeros((batch, h));
        let mut dh_next = Array2::<f64>::zeros((batch, h));
        let mut dc_next = Array2::<f64>::zeros((batch, h));
        for t in (0..len).rev() {
            let (h_prev, c_prev) = if t > 0 {
                (pass.true_steps[t - 1].hidden.view(), pass.true_steps[t - 1].cell.view())
            } else {
                (zeros.view(), zeros.view())
            };
            let block = s![t * batch..(t + 1) * batch, ..];
            let dh = &dh_true.slice(block) + &dh_next;
            let (dz, dc_a) = self.lstm.step_backward(&pass.true_steps[t], c_prev, dh.view(), Some(dc_next.view()));
            let (dz_r, dc_b) = self.lstm.step_backward(&pass.ref_steps[t], c_prev, dh_ref.slice(block), None);
            let dz_shared = &dz + &dz_r;
            if accumulate {
                self.lstm.accumulate_input_grad(pass.true_steps[t].input.view(), dz.view());
                self.lstm.accumulate_input_grad(pass.ref_steps[t].input.view(), dz_r.view());
                self.lstm.accumulate_recurrent_grad(h_prev, dz_shared.view());
            }
            if let Some(g) = grads.as_mut() {
                let d_in = self.lstm.input_grad(dz.view());
                g.dy.index_axis_mut(Axis(0), t).assign(&d_in.slice(s![.., ..self.y_dim]));
                if self.x_dim > 0 {
                    let d_in_r = self.lstm.input_grad(dz_r.view());
                    let dx = &d_in.slice(s![.., self.y_dim..]) + &d_in_r.slice(s![.., self.y_dim..]);
                    g.dx.index_axis_mut(Axis(0), t).assign(&dx);
                }
            }
            dh_next = self.lstm.hidden_grad(dz_shared.view());
            dc_next = dc_a + dc_b;
        }
        grads
    }

    /// Forces the head to output the constant `c` for every input.
    pub fn set_constant(&mut self, c: f64) {
        self.head.weight.value.fill(0.0);
        self.head.bias.value.fill(c);
    }
}

impl Parameterized for Potential {
    fn params(&self) -> Vec<&ParamBlock> {
        let mut v = self.lstm.params();
        v.extend(self.hidden.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = self.lstm.params_mut();
        v.extend(self.hidden.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}
