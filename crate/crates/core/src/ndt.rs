//! Neural distribution transformer: a recurrent generator that shapes i.i.d.
//! Gaussian noise (and, with feedback, the previous channel output) into
//! channel inputs meeting an average power budget.

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, DenseCache, LstmParams, LstmState, LstmStepCache, ParamBlock, Parameterized, RngStream};

/// Regularizer in the power normalization denominator.
pub const POWER_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NdtArch {
    pub hidden: usize,
    pub dense: usize,
}

impl Default for NdtArch {
    fn default() -> Self {
        Self { hidden: 64, dense: 64 }
    }
}

/// How raw generator outputs are scaled onto the power budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PowerNormalization {
    /// One scale for the whole `B × T` batch. Needs every raw sample before
    /// the channel runs, so it is only usable without feedback.
    Batch,
    /// Causal: step `i` is scaled by a bias-corrected exponential average of
    /// the per-step batch mean squares up to and including step `i`.
    /// `decay = 0` normalizes every step on its own.
    Running { decay: f64 },
}

impl PowerNormalization {
    pub fn default_for(feedback: bool) -> Self {
        if feedback {
            PowerNormalization::Running { decay: 0.0 }
        } else {
            PowerNormalization::Batch
        }
    }
}

/// `x = raw * sqrt(P / (mean(raw²) + ε))` over every element. Returns the
/// normalized values and the scale.
pub fn power_normalize(raw: &Array3<f64>, power: f64) -> Result<(Array3<f64>, f64)> {
    if !(power > 0.0) {
        return Err(Error::InvalidParameter(format!("power budget must be positive, got {power}")));
    }
    if raw.is_empty() {
        return Err(Error::Empty("power normalization"));
    }
    let ms = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
    let scale = (power / (ms + POWER_EPS)).sqrt();
    Ok((raw * scale, scale))
}

/// Gradient of [`power_normalize`] with respect to `raw`.
pub fn power_normalize_backward(raw: &Array3<f64>, scale: f64, d_out: &Array3<f64>) -> Array3<f64> {
    let n = raw.len() as f64;
    let ms = raw.iter().map(|v| v * v).sum::<f64>() / n;
    let g_scale: f64 = raw.iter().zip(d_out.iter()).map(|(r, d)| r * d).sum();
    // d scale / d ms = -scale / (2 (ms + ε)); d ms / d raw = 2 raw / n
    let coeff = g_scale * (-0.5 * scale / (ms + POWER_EPS)) * 2.0 / n;
    let mut d_raw = d_out * scale;
    d_raw.zip_mut_with(raw, |d, &r| *d += coeff * r);
    d_raw
}

/// Forward state and per-step record of the running normalization.
#[derive(Debug, Clone)]
pub struct RunningPower {
    power: f64,
    decay: f64,
    average: f64,
    steps: Vec<RunningStep>,
}

#[derive(Debug, Clone)]
struct RunningStep {
    corrected: f64,
    scale: f64,
}

impl RunningPower {
    pub fn new(power: f64, decay: f64) -> Result<Self> {
        if !(power > 0.0) || !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidParameter(format!("running power normalization P={power}, decay={decay}")));
        }
        Ok(Self { power, decay, average: 0.0, steps: Vec::new() })
    }

    /// Normalizes one step `(batch, dim)` of raw outputs.
    pub fn step(&mut self, raw: ArrayView2<f64>) -> Array2<f64> {
        let mean_square = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
        self.average = self.decay * self.average + (1.0 - self.decay) * mean_square;
        let i = self.steps.len() as i32 + 1;
        let corrected = self.average / (1.0 - self.decay.powi(i));
        let scale = (self.power / (corrected + POWER_EPS)).sqrt();
        self.steps.push(RunningStep { corrected, scale });
        &raw * scale
    }

    pub fn scale(&self, t: usize) -> f64 {
        self.steps[t].scale
    }

    /// Reverse-mode companion of [`RunningPower::step`]; call for
    /// `t = T-1, …, 0` in order, threading `carry` (initially 0).
    pub fn backward_step(&self, t: usize, raw: ArrayView2<f64>, d_out: ArrayView2<f64>, carry: &mut f64) -> Array2<f64> {
        let st = &self.steps[t];
        let g_scale: f64 = raw.iter().zip(d_out.iter()).map(|(r, d)| r * d).sum();
        let d_corrected = g_scale * (-0.5 * st.scale / (st.corrected + POWER_EPS));
        let d_average = d_corrected / (1.0 - self.decay.powi(t as i32 + 1)) + *carry;
        *carry = self.decay * d_average;
        let d_ms = (1.0 - self.decay) * d_average;
        let coeff = d_ms * 2.0 / raw.len() as f64;
        let mut d_raw = &d_out * st.scale;
        d_raw.zip_mut_with(&raw, |d, &r| *d += coeff * r);
        d_raw
    }
}

/// i.i.d. standard Gaussian noise, drawn time-major.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub dim: usize,
    rng: RngStream,
}

impl NoiseSource {
    pub fn new(dim: usize, rng: RngStream) -> Self {
        Self { dim, rng }
    }

    pub fn draw(&mut self, len: usize, batch: usize) -> Array3<f64> {
        let mut out = Array3::zeros((len, batch, self.dim));
        self.rng.fill_normal(out.as_slice_mut().expect("fresh array"));
        out
    }
}

#[derive(Debug, Clone)]
pub struct NdtStepCache {
    pub lstm: LstmStepCache,
    hidden: DenseCache,
    out: DenseCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdtModel {
    pub lstm: LstmParams,
    pub hidden: Dense,
    pub out: Dense,
    pub power: f64,
    pub feedback: bool,
    pub noise_dim: usize,
    pub output_dim: usize,
    pub normalization: PowerNormalization,
}

impl NdtModel {
    pub fn new(output_dim: usize, arch: NdtArch, power: f64, feedback: bool, rng: &mut RngStream) -> Result<Self> {
        if !(power > 0.0) {
            return Err(Error::InvalidParameter(format!("power budget must be positive, got {power}")));
        }
        let noise_dim = output_dim;
        let input = noise_dim + if feedback { output_dim } else { 0 };
        Ok(Self {
            lstm: LstmParams::new("ndt.lstm", input, arch.hidden, rng)?,
            hidden: Dense::new("ndt.dense", arch.hidden, arch.dense, Activation::Tanh, rng),
            out: Dense::new("ndt.out", arch.dense, output_dim, Activation::Identity, rng),
            power,
            feedback,
            noise_dim,
            output_dim,
            normalization: PowerNormalization::default_for(feedback),
        })
    }

    pub fn arch(&self) -> NdtArch {
        NdtArch { hidden: self.lstm.hidden_size(), dense: self.hidden.outputs() }
    }

    pub fn initial_state(&self, batch: usize) -> LstmState {
        LstmState::zeros(batch, self.lstm.hidden_size())
    }

    /// One recurrent step. `feedback` must be present exactly when the
    /// model was built with feedback; it carries `y_{i-1}` (`0` at `i = 1`).
    /// Returns the raw, not yet power-normalized, input sample.
    pub fn step(
        &self,
        noise: ArrayView2<f64>,
        feedback: Option<ArrayView2<f64>>,
        state: &LstmState,
    ) -> Result<(Array2<f64>, LstmState, NdtStepCache)> {
        let input = match (self.feedback, feedback) {
            (true, Some(fb)) => concatenate![Axis(1), noise, fb],
            (false, None) => noise.to_owned(),
            (true, None) => return Err(Error::InvalidParameter("feedback model stepped without y_{i-1}".into())),
            (false, Some(_)) => return Err(Error::InvalidParameter("feed-forward model given feedback".into())),
        };
        let (next, lstm) = self.lstm.step(input.view(), state)?;
        let (hid, hidden) = self.hidden.forward_cached(next.hidden.view())?;
        let (raw, out) = self.out.forward_cached(hid.view())?;
        Ok((raw, next, NdtStepCache { lstm, hidden, out }))
    }

    /// Backward through the dense layers of one step: gradient with respect
    /// to the LSTM hidden output.
    pub(crate) fn head_backward(&mut self, cache: &NdtStepCache, d_raw: ArrayView2<f64>) -> Array2<f64> {
        let d_hid = self.out.backward(&cache.out, d_raw, true);
        self.hidden.backward(&cache.hidden, d_hid.view(), true)
    }
}

impl Parameterized for NdtModel {
    fn params(&self) -> Vec<&ParamBlock> {
        let mut v = self.lstm.params();
        v.extend(self.hidden.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = self.lstm.params_mut();
        v.extend(self.hidden.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = RngStream::new(1);
        let mut ndt = NdtModel::new(1, NdtArch { hidden: 4, dense: 3 }, 1.0, false, &mut rng).unwrap();
        for p in ndt.params_mut() {
            p.value.fill(0.0);
        }
        let noise = Array2::from_shape_fn((5, 1), |_| rng.normal());
        let (raw, _, _) = ndt.step(noise.view(), None, &ndt.initial_state(5)).unwrap();
        assert!(raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feedback_presence_must_match_flag() {
        let mut rng = RngStream::new(1);
        let ff = NdtModel::new(1, NdtArch { hidden: 4, dense: 3 }, 1.0, false, &mut rng).unwrap();
        let fb = NdtModel::new(1, NdtArch { hidden: 4, dense: 3 }, 1.0, true, &mut rng).unwrap();
        let n = Array2::zeros((2, 1));
        assert!(ff.step(n.view(), Some(n.view()), &ff.initial_state(2)).is_err());
        assert!(fb.step(n.view(), None, &fb.initial_state(2)).is_err());
        assert_eq!(fb.lstm.input_size(), 2);
    }

    #[test]
    fn normalization_hits_budget() {
        let mut rng = RngStream::new(3);
        let raw = Array3::from_shape_fn((64, 32, 1), |_| 2.0 * rng.normal());
        let (x, _) = power_normalize(&raw, 1.0).unwrap();
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((ms - 1.0).abs() < 1e-6, "{ms}");
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = RngStream::new(4);
        let raw = Array3::from_shape_fn((8, 4, 1), |_| rng.normal());
        let (a, _) = power_normalize(&raw, 2.0).unwrap();
        let (b, _) = power_normalize(&(&raw * 10.0), 2.0).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_of_budget_batch_is_identity() {
        let mut rng = RngStream::new(5);
        let mut raw = Array3::from_shape_fn((8, 4, 1), |_| rng.normal());
        let ms = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
        raw.mapv_inplace(|v| v * (1.5 / ms).sqrt());
        let (_, scale) = power_normalize(&raw, 1.5).unwrap();
        assert!((scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_zero_batch_stays_zero() {
        let raw = Array3::zeros((4, 2, 1));
        let (x, scale) = power_normalize(&raw, 1.0).unwrap();
        assert!(scale.is_finite());
        assert!(x.iter().all(|&v| v == 0.0));
        assert!(power_normalize(&raw, 0.0).is_err());
    }

    #[test]
    fn batch_normalization_gradient() {
        let mut rng = RngStream::new(6);
        let raw = Array3::from_shape_fn((3, 2, 1), |_| rng.normal());
        let w = Array3::from_shape_fn((3, 2, 1), |_| rng.normal());
        let f = |r: &Array3<f64>| (&power_normalize(r, 1.7).unwrap().0 * &w).sum();
        let (_, scale) = power_normalize(&raw, 1.7).unwrap();
        let g = power_normalize_backward(&raw, scale, &w);
        for i in 0..raw.len() {
            let mut p = raw.clone();
            let mut m = raw.clone();
            p.as_slice_mut().unwrap()[i] += 1e-6;
            m.as_slice_mut().unwrap()[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            let ana = g.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 1e-7 * ana.abs().max(1.0), "{num} vs {ana}");
        }
    }

    #[test]
    fn running_normalization_gradient() {
        for decay in [0.0, 0.5, 0.99] {
            let mut rng = RngStream::new(7);
            let raw: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_shape_fn((3, 1), |_| rng.normal())).collect();
            let w: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_shape_fn((3, 1), |_| rng.normal())).collect();
            let f = |raw: &[Array2<f64>]| {
                let mut rp = RunningPower::new(1.3, decay).unwrap();
                raw.iter().zip(&w).map(|(r, w)| (&rp.step(r.view()) * w).sum()).sum::<f64>()
            };
            let mut rp = RunningPower::new(1.3, decay).unwrap();
            for r in &raw {
                rp.step(r.view());
            }
            let mut carry = 0.0;
            let mut grads = vec![Array2::zeros((3, 1)); 4];
            for t in (0..4).rev() {
                grads[t] = rp.backward_step(t, raw[t].view(), w[t].view(), &mut carry);
            }
            for t in 0..4 {
                for b in 0..3 {
                    let mut p = raw.clone();
                    let mut m = raw.clone();
                    p[t][[b, 0]] += 1e-6;
                    m[t][[b, 0]] -= 1e-6;
                    let num = (f(&p) - f(&m)) / 2e-6;
                    let ana = grads[t][[b, 0]];
                    assert!((num - ana).abs() < 1e-7 * ana.abs().max(1.0), "decay {decay}: {num} vs {ana}");
                }
            }
        }
    }

    #[test]
    fn per_step_running_normalization_is_exact() {
        let mut rng = RngStream::new(8);
        let mut rp = RunningPower::new(2.0, 0.0).unwrap();
        for _ in 0..5 {
            let raw = Array2::from_shape_fn((16, 1), |_| 3.0 * rng.normal());
            let x = rp.step(raw.view());
            let ms = x.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms - 2.0).abs() < 1e-9);
        }
    }
}
