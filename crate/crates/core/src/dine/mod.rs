//! Directed-information rate estimation with two recurrent DV potentials.
//!
//! The estimate is the difference of two Donsker–Varadhan objectives, each
//! comparing true next outputs with draws from a uniform reference box:
//!
//! ```text
//! D(θ) = mean_i T_θ(y_i | past_i) − log mean_i exp T_θ(y~_i | past_i)
//! I(X→Y) ≈ D_{Y‖X}(θ_{Y‖X}) − D_Y(θ_Y)
//! ```
//!
//! `D_Y` conditions on `y^{i-1}`, `D_{Y‖X}` additionally on `x^i`. Values are
//! in nats.

pub mod potential;
pub mod reference;
pub mod train;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamBlock, Parameterized, RngStream};
use crate::trajectory::Trajectories;

pub use potential::{DualStateStream, InputGrads, Potential, PotentialPass};
pub use reference::ReferenceBox;
pub use train::{dine_train, BatchSource, CurvePoint, DineConfig, DineTrainer, WindowMode, WindowSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DineArch {
    /// LSTM hidden size of each potential.
    pub hidden: usize,
    /// Width of the tanh layer before the scalar head.
    pub dense: usize,
}

impl Default for DineArch {
    fn default() -> Self {
        Self { hidden: 64, dense: 64 }
    }
}

/// The two DV objectives evaluated on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvValues {
    pub d_y: f64,
    pub d_yx: f64,
    /// Mean true-sample potential per time step, output-only half.
    pub trace_y: Vec<f64>,
    /// Mean true-sample potential per time step, input-output half.
    pub trace_yx: Vec<f64>,
}

impl DvValues {
    pub fn estimate(&self) -> f64 {
        self.d_yx - self.d_y
    }
}

/// Final Monte-Carlo estimate with its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiEstimate {
    pub estimate: f64,
    pub d_y: f64,
    pub d_yx: f64,
    pub samples: usize,
}

/// `mean(t) − log mean(exp(r))`, evaluated with a max shift so that a
/// constant potential yields exactly zero.
pub fn dv_objective(values_true: &[f64], values_ref: &[f64]) -> Result<f64> {
    if values_true.is_empty() || values_ref.is_empty() {
        return Err(Error::Empty("DV objective"));
    }
    let shift = values_ref.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::NonFinite("reference potentials".into()));
    }
    let mean_true = values_true.iter().map(|t| t - shift).sum::<f64>() / values_true.len() as f64;
    let mean_exp = values_ref.iter().map(|r| (r - shift).exp()).sum::<f64>() / values_ref.len() as f64;
    let value = mean_true - mean_exp.ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("DV objective".into()));
    }
    Ok(value)
}

/// DV objective plus its gradient with respect to every potential value.
pub fn dv_objective_with_grad(
    values_true: ArrayView2<f64>,
    values_ref: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let t: Vec<f64> = values_true.iter().copied().collect();
    let r: Vec<f64> = values_ref.iter().copied().collect();
    let value = dv_objective(&t, &r)?;
    let d_true = Array2::from_elem(values_true.raw_dim(), 1.0 / t.len() as f64);
    let shift = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut d_ref = values_ref.mapv(|v| (v - shift).exp());
    let total = d_ref.sum();
    d_ref.mapv_inplace(|w| -w / total);
    Ok((value, d_true, d_ref))
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("potential values are contiguous")
}

fn per_step_mean(values: &Array2<f64>) -> Vec<f64> {
    values.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default()
}

/// Both DV potentials. They share no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DineModel {
    pub y_potential: Potential,
    pub yx_potential: Potential,
    pub arch: DineArch,
}

impl DineModel {
    pub fn new(y_dim: usize, x_dim: usize, arch: DineArch, rng: &mut RngStream) -> Result<Self> {
        if x_dim == 0 {
            return Err(Error::InvalidParameter("input dimension must be positive".into()));
        }
        Ok(Self {
            y_potential: Potential::new("dine.y", y_dim, 0, arch.hidden, arch.dense, rng)?,
            yx_potential: Potential::new("dine.yx", y_dim, x_dim, arch.hidden, arch.dense, rng)?,
            arch,
        })
    }

    pub fn y_dim(&self) -> usize {
        self.y_potential.y_dim()
    }

    pub fn x_dim(&self) -> usize {
        self.yx_potential.x_dim()
    }

    fn check(&self, batch: &Trajectories, y_ref: &Array3<f64>) -> Result<()> {
        if batch.y_dim() != self.y_dim() || batch.x_dim() != self.x_dim() {
            return Err(Error::Shape {
                context: "DINE trajectories (x_dim, y_dim)",
                expected: vec![self.x_dim(), self.y_dim()],
                found: vec![batch.x_dim(), batch.y_dim()],
            });
        }
        if y_ref.dim() != batch.y.dim() {
            return Err(Error::LengthMismatch {
                context: "reference samples vs trajectories",
                left: y_ref.len(),
                right: batch.y.len(),
            });
        }
        Ok(())
    }

    /// Forward-only evaluation of both objectives.
    pub fn dv_values(&self, batch: &Trajectories, y_ref: &Array3<f64>) -> Result<DvValues> {
        self.check(batch, y_ref)?;
        let (ty, ry) = self.y_potential.values(batch.y.view(), batch.x.view(), y_ref.view())?;
        let (tyx, ryx) = self.yx_potential.values(batch.y.view(), batch.x.view(), y_ref.view())?;
        Ok(DvValues {
            d_y: dv_objective(flat(&ty), flat(&ry))?,
            d_yx: dv_objective(flat(&tyx), flat(&ryx))?,
            trace_y: per_step_mean(&ty),
            trace_yx: per_step_mean(&tyx),
        })
    }

    /// Zeroes the gradients and fills each potential's blocks with the
    /// gradient of its own DV objective.
    pub fn accumulate_objective_grads(&mut self, batch: &Trajectories, y_ref: &Array3<f64>) -> Result<DvValues> {
        self.check(batch, y_ref)?;
        self.zero_grad();
        let mut values = [0.0; 2];
        let mut traces = [Vec::new(), Vec::new()];
        for (k, pot) in [&mut self.y_potential, &mut self.yx_potential].into_iter().enumerate() {
            let pass = pot.forward(batch.y.view(), batch.x.view(), y_ref.view())?;
            let (v, d_true, d_ref) = dv_objective_with_grad(pass.values_true.view(), pass.values_ref.view())?;
            pot.backward(&pass, d_true.view(), d_ref.view(), true, false);
            values[k] = v;
            traces[k] = per_step_mean(&pass.values_true);
        }
        let [trace_y, trace_yx] = traces;
        Ok(DvValues { d_y: values[0], d_yx: values[1], trace_y, trace_yx })
    }

    /// Evaluates `D_{Y‖X} − D_Y` and its gradient with respect to the
    /// trajectories, leaving the potentials' parameter gradients untouched.
    pub fn rate_input_grads(&mut self, batch: &Trajectories, y_ref: &Array3<f64>) -> Result<(DvValues, InputGrads)> {
        self.check(batch, y_ref)?;
        let pass_y = self.y_potential.forward(batch.y.view(), batch.x.view(), y_ref.view())?;
        let (d_y, dt_y, dr_y) = dv_objective_with_grad(pass_y.values_true.view(), pass_y.values_ref.view())?;
        let pass_yx = self.yx_potential.forward(batch.y.view(), batch.x.view(), y_ref.view())?;
        let (d_yx, dt_yx, dr_yx) = dv_objective_with_grad(pass_yx.values_true.view(), pass_yx.values_ref.view())?;

        let g_y = self
            .y_potential
            .backward(&pass_y, (-dt_y).view(), (-dr_y).view(), false, true)
            .expect("input grads requested");
        let mut g = self
            .yx_potential
            .backward(&pass_yx, dt_yx.view(), dr_yx.view(), false, true)
            .expect("input grads requested");
        g.dy += &g_y.dy;
        let values = DvValues {
            d_y,
            d_yx,
            trace_y: per_step_mean(&pass_y.values_true),
            trace_yx: per_step_mean(&pass_yx.values_true),
        };
        Ok((values, g))
    }
}

impl Parameterized for DineModel {
    fn params(&self) -> Vec<&ParamBlock> {
        let mut v = self.y_potential.params();
        v.extend(self.yx_potential.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = self.y_potential.params_mut();
        v.extend(self.yx_potential.params_mut());
        v
    }
}

/// Monte-Carlo evaluation of the trained estimator over `data`.
///
/// The reference box is fitted to all of `data` unless one is supplied.
/// Sequences are processed `chunk` at a time; every potential value is kept
/// so the pooled objective is computed exactly as on a single batch.
pub fn dine_estimate(
    model: &DineModel,
    data: &Trajectories,
    reference: Option<&ReferenceBox>,
    margin: f64,
    floor: f64,
    chunk: usize,
    rng: &mut RngStream,
) -> Result<DiEstimate> {
    let fitted;
    let reference = match reference {
        Some(b) => b,
        None => {
            fitted = ReferenceBox::fit(data.y_rows(), margin, floor)?;
            &fitted
        }
    };
    let chunk = chunk.max(1);
    let mut pots: [Vec<f64>; 4] = Default::default();
    let mut start = 0;
    while start < data.batch() {
        let end = (start + chunk).min(data.batch());
        let part = data.select(start..end);
        let y_ref = reference.sample(part.len(), part.batch(), rng);
        let (ty, ry) = model.y_potential.values(part.y.view(), part.x.view(), y_ref.view())?;
        let (tyx, ryx) = model.yx_potential.values(part.y.view(), part.x.view(), y_ref.view())?;
        for (dst, src) in pots.iter_mut().zip([ty, ry, tyx, ryx]) {
            dst.extend(src.iter());
        }
        start = end;
    }
    let d_y = dv_objective(&pots[0], &pots[1])?;
    let d_yx = dv_objective(&pots[2], &pots[3])?;
    Ok(DiEstimate {
        estimate: d_yx - d_y,
        d_y,
        d_yx,
        samples: data.samples(),
    })
}
