//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::error::Result;

use super::rng::RngStream;
use super::tensor::Parameterized;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Denominator floor so that gradients that are zero analytically and
    /// numerically are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many entries per block (randomly chosen); `None`
    /// checks every entry.
    pub max_entries_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-7,
            max_entries_per_block: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients currently stored in `model`'s parameter blocks
/// against central differences of `objective`.
///
/// The caller must populate the gradients (forward + backward) before
/// calling. `objective` must be deterministic; parameters are restored to
/// their original values after each probe.
pub fn grad_check<M, F>(model: &mut M, mut objective: F, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.iter().copied().collect()))
        .collect();
    let mut picker = RngStream::new(options.seed).split("grad-check");
    let mut blocks = Vec::with_capacity(analytic.len());

    for (block_idx, (name, grads)) in analytic.iter().enumerate() {
        let mut indices: Vec<usize> = (0..grads.len()).collect();
        if let Some(limit) = options.max_entries_per_block {
            if limit < indices.len() {
                picker.shuffle(&mut indices);
                indices.truncate(limit);
                indices.sort_unstable();
            }
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &indices {
            let original = nth_value(model, block_idx, i);
            set_nth_value(model, block_idx, i, original + options.step);
            let plus = objective(model)?;
            set_nth_value(model, block_idx, i, original - options.step);
            let minus = objective(model)?;
            set_nth_value(model, block_idx, i, original);
            let numeric = (plus - minus) / (2.0 * options.step);
            let abs = (grads[i] - numeric).abs();
            let rel = relative_error(grads[i], numeric, options.floor);
            // NaN must fail the check, so compare with `!(x <= max)`.
            if !(rel <= max_rel) {
                max_rel = rel;
            }
            max_abs = max_abs.max(abs);
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }

    let max_rel_error = blocks
        .iter()
        .map(|b| b.max_rel_error)
        .fold(0.0, |acc: f64, e| if e.is_nan() || acc.is_nan() { f64::NAN } else { acc.max(e) });
    Ok(GradCheckReport {
        passed: max_rel_error < options.tolerance,
        blocks,
        tolerance: options.tolerance,
        max_rel_error,
    })
}

fn nth_value<M: Parameterized>(model: &M, block: usize, i: usize) -> f64 {
    model.params()[block].value.as_slice().expect("contiguous parameter block")[i]
}

fn set_nth_value<M: Parameterized>(model: &mut M, block: usize, i: usize, v: f64) {
    model.params_mut()[block].value.as_slice_mut().expect("contiguous parameter block")[i] = v;
}

/// Central-difference derivative of a scalar function at `x`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}
