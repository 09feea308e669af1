//! Analytic capacity references for the simulated channels, in nats per
//! channel use.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channels::ChannelSpec;
use crate::error::{Error, Result};

/// Number of Simpson intervals on `[0, π]` used by default.
pub const DEFAULT_GRID: usize = 1 << 14;
/// Tolerance on the water-filling power constraint.
pub const POWER_GAP_TOL: f64 = 1e-9;
/// Bisection tolerance on the feedback polynomial root.
pub const ROOT_TOL: f64 = 1e-12;

/// `½ ln(1 + P/σ²)`.
pub fn awgn_capacity(power: f64, noise_var: f64) -> Result<f64> {
    if !(power >= 0.0) || !power.is_finite() || !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidParameter(format!("AWGN capacity needs P ≥ 0 and σ² > 0, got P={power}, σ²={noise_var}")));
    }
    Ok(0.5 * (power / noise_var).ln_1p())
}

/// Power spectral density of the MA(1) noise, `1 + α² + 2α cos ω`.
pub fn ma1_noise_psd(alpha: f64, omega: f64) -> f64 {
    1.0 + alpha * alpha + 2.0 * alpha * omega.cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterFillSolution {
    pub water_level: f64,
    pub capacity: f64,
    /// Simpson intervals on `[0, π]`.
    pub grid: usize,
    /// `|allocated power − P|` at the returned level.
    pub power_gap: f64,
}

/// Composite Simpson rule for `(1/π) ∫_0^π f(ω) dω` with `grid` (even)
/// intervals, i.e. the average of an even function over the full circle.
fn circle_average(grid: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = PI / grid as f64;
    let mut sum = f(0.0) + f(PI);
    for k in 1..grid {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(k as f64 * h);
    }
    sum * h / 3.0 / PI
}

fn check_grid(grid: usize) -> Result<()> {
    if grid < 2 || !grid.is_multiple_of(2) {
        return Err(Error::Quadrature(format!("Simpson grid must be even and ≥ 2, got {grid}")));
    }
    Ok(())
}

/// Feed-forward capacity of the MA(1) noise channel by water-filling over
/// the noise spectrum, with the default grid.
pub fn ma1_ff_capacity(power: f64, alpha: f64) -> Result<WaterFillSolution> {
    ma1_ff_capacity_with_grid(power, alpha, DEFAULT_GRID)
}

pub fn ma1_ff_capacity_with_grid(power: f64, alpha: f64, grid: usize) -> Result<WaterFillSolution> {
    if !(power >= 0.0) || !power.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("water-filling needs P ≥ 0 and finite α, got P={power}, α={alpha}")));
    }
    if alpha.abs() == 1.0 {
        return Err(Error::Quadrature("noise spectrum vanishes at ω = π for |α| = 1".into()));
    }
    check_grid(grid)?;
    let psd = |w: f64| ma1_noise_psd(alpha, w);
    let s_min = (1.0 - alpha.abs()).powi(2);
    let s_max = (1.0 + alpha.abs()).powi(2);
    let allocated = |nu: f64| circle_average(grid, |w| (nu - psd(w)).max(0.0));
    if power == 0.0 {
        return Ok(WaterFillSolution { water_level: s_min, capacity: 0.0, grid, power_gap: 0.0 });
    }
    let (mut lo, mut hi) = (s_min, s_max + power);
    let mut nu = 0.5 * (lo + hi);
    let mut gap = allocated(nu) - power;
    let mut iterations = 0;
    while gap.abs() >= POWER_GAP_TOL {
        if gap > 0.0 {
            hi = nu;
        } else {
            lo = nu;
        }
        nu = 0.5 * (lo + hi);
        gap = allocated(nu) - power;
        iterations += 1;
        if iterations > 200 || hi - lo < f64::EPSILON * hi {
            if gap.abs() < POWER_GAP_TOL {
                break;
            }
            return Err(Error::Quadrature(format!("water level did not converge, power gap {gap:e}")));
        }
    }
    let capacity = 0.5 * circle_average(grid, |w| {
        let s = psd(w);
        (nu.max(s) / s).ln()
    });
    Ok(WaterFillSolution { water_level: nu, capacity, grid, power_gap: gap.abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ma1FbSolution {
    pub root: f64,
    pub capacity: f64,
}

/// `P x² − (1 − x²)(1 − |α| x)²`; its smallest root in `(0, 1)` gives the
/// feedback capacity.
pub fn ma1_fb_polynomial(power: f64, alpha: f64, x: f64) -> f64 {
    power * x * x - (1.0 - x * x) * (1.0 - alpha.abs() * x).powi(2)
}

/// Feedback capacity of the MA(1) noise channel, `−ln x₀`.
pub fn ma1_fb_capacity(power: f64, alpha: f64) -> Result<Ma1FbSolution> {
    if !(power >= 0.0) || !power.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("feedback capacity needs P ≥ 0 and finite α, got P={power}, α={alpha}")));
    }
    if power == 0.0 {
        return Ok(Ma1FbSolution { root: 1.0, capacity: 0.0 });
    }
    let f = |x: f64| ma1_fb_polynomial(power, alpha, x);
    // f(0) = −1 < 0. Scan for the first sign change so that a second root
    // (possible when |α| > 1) is never picked by accident.
    let scan = 4096;
    let mut lo = 0.0;
    let mut hi = None;
    for k in 1..=scan {
        let x = if k == scan { 1.0 - 1e-15 } else { k as f64 / scan as f64 };
        if f(x) >= 0.0 {
            hi = Some(x);
            break;
        }
        lo = x;
    }
    let mut hi = hi.ok_or(Error::RootNotBracketed("feedback polynomial has no sign change in (0, 1)"))?;
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    Ok(Ma1FbSolution { root, capacity: -root.ln() })
}

/// Outcome of the consistency checks on the feedback baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub trusted: bool,
    pub diagnostics: Vec<String>,
}

pub const GATE_POWERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const GATE_ALPHAS: [f64; 6] = [-0.9, -0.5, -0.1, 0.1, 0.5, 0.9];

/// Checks that the feedback baseline reduces to the AWGN capacity at `α = 0`
/// (to 1e-9) and strictly dominates the water-filling capacity for `α ≠ 0`
/// on the gate grid.
pub fn fb_validation_gate() -> Result<GateReport> {
    let mut diagnostics = Vec::new();
    for &p in &GATE_POWERS {
        let fb = ma1_fb_capacity(p, 0.0)?.capacity;
        let awgn = awgn_capacity(p, 1.0)?;
        if (fb - awgn).abs() >= 1e-9 {
            diagnostics.push(format!("P={p}, α=0: feedback {fb} differs from AWGN {awgn}"));
        }
        for &a in &GATE_ALPHAS {
            let fb = ma1_fb_capacity(p, a)?.capacity;
            let ff = ma1_ff_capacity(p, a)?.capacity;
            if !(fb > ff) {
                diagnostics.push(format!("P={p}, α={a}: feedback {fb} does not exceed feed-forward {ff}"));
            }
        }
    }
    Ok(GateReport { trusted: diagnostics.is_empty(), diagnostics })
}

/// Input process for the covariance oracle. Inputs are independent of the
/// channel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputPolicy {
    IidGaussian { power: f64 },
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub n: usize,
    /// `(1/2n) ln(det Σ_Y / det Σ_Z)` at `n`.
    pub rate: f64,
    /// The same at `2n`.
    pub rate_2n: f64,
}

/// Log-determinant of the `n × n` symmetric Toeplitz matrix with first row
/// `(c0, c1, 0, …, 0)`, by banded Cholesky.
pub fn tridiagonal_toeplitz_log_det(c0: f64, c1: f64, n: usize) -> Result<f64> {
    let mut log_det = 0.0;
    let mut prev_pivot = 0.0;
    for row in 0..n {
        let off = if row == 0 { 0.0 } else { c1 / prev_pivot };
        let pivot_sq = c0 - off * off;
        if !(pivot_sq > 0.0) {
            return Err(Error::NotPositiveDefinite { row, pivot: pivot_sq });
        }
        let pivot = pivot_sq.sqrt();
        log_det += 2.0 * pivot.ln();
        prev_pivot = pivot;
    }
    Ok(log_det)
}

/// `(1/2n) ln(det Σ_{Yⁿ} / det Σ_{Zⁿ})`, the directed information rate of a
/// block of `n` uses when the input is Gaussian and independent of the noise.
pub fn gaussian_di_oracle(policy: InputPolicy, spec: &ChannelSpec, n: usize) -> Result<OracleValue> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("oracle block length"));
    }
    let power = match policy {
        InputPolicy::IidGaussian { power } if power >= 0.0 && power.is_finite() => power,
        InputPolicy::IidGaussian { power } => {
            return Err(Error::InvalidParameter(format!("input power must be non-negative, got {power}")))
        }
        InputPolicy::Zero => 0.0,
    };
    let acov = spec.noise_autocovariance();
    let c0 = acov[0];
    let c1 = acov.get(1).copied().unwrap_or(0.0);
    let rate = |m: usize| -> Result<f64> {
        let y = tridiagonal_toeplitz_log_det(c0 + power, c1, m)?;
        let z = tridiagonal_toeplitz_log_det(c0, c1, m)?;
        Ok((y - z) / (2.0 * m as f64))
    };
    Ok(OracleValue { n, rate: rate(n)?, rate_2n: rate(2 * n)? })
}

/// Limit of [`gaussian_di_oracle`] for i.i.d. `N(0, P)` input as `n → ∞`:
/// `(1/4π) ∫ ln(1 + P / S_Z(ω)) dω`.
pub fn iid_gaussian_spectral_rate(power: f64, spec: &ChannelSpec, grid: usize) -> Result<f64> {
    spec.validate()?;
    check_grid(grid)?;
    if !(power >= 0.0) {
        return Err(Error::InvalidParameter(format!("input power must be non-negative, got {power}")));
    }
    Ok(match *spec {
        ChannelSpec::Awgn { noise_var } => 0.5 * (power / noise_var).ln_1p(),
        ChannelSpec::Ma1 { alpha } => 0.5 * circle_average(grid, |w| (power / ma1_noise_psd(alpha, w)).ln_1p()),
    })
}

/// Capacity reference for a channel: water-filling without feedback, the
/// polynomial root with feedback (AWGN is the same either way).
pub fn reference_capacity(spec: &ChannelSpec, power: f64, feedback: bool) -> Result<f64> {
    spec.validate()?;
    match *spec {
        ChannelSpec::Awgn { noise_var } => awgn_capacity(power, noise_var),
        ChannelSpec::Ma1 { alpha } if feedback => Ok(ma1_fb_capacity(power, alpha)?.capacity),
        ChannelSpec::Ma1 { alpha } => Ok(ma1_ff_capacity(power, alpha)?.capacity),
    }
}
