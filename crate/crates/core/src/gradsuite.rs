//! Finite-difference checks of every hand-written backward pass, grouped by
//! component, on small random configurations.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::channels::{rollout_backward, rollout_with_noise, ChannelSpec, SimulatedChannel};
use crate::dine::{DineArch, DineModel};
use crate::error::{Error, Result};
use crate::ndt::{NdtArch, NdtModel, PowerNormalization};
use crate::nn::gradcheck::{relative_error, BlockCheck};
use crate::nn::{
    grad_check, lstm::unroll_weighted_hidden_sum, Activation, Dense, GradCheckOptions, GradCheckReport, LstmParams,
    Parameterized, RngStream,
};
use crate::trajectory::Trajectories;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Nn,
    Dine,
    Ndt,
    Rollout,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Nn, Component::Dine, Component::Ndt, Component::Rollout];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Nn => "nn",
            Component::Dine => "dine",
            Component::Ndt => "ndt",
            Component::Rollout => "rollout",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Component::Nn),
            "dine" => Ok(Component::Dine),
            "ndt" => Ok(Component::Ndt),
            "rollout" => Ok(Component::Rollout),
            other => Err(Error::InvalidParameter(format!("unknown component `{other}` (nn|dine|ndt|rollout)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteOptions {
    pub hidden: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { hidden: 6, seq_len: 5, batch: 3, seed: 0, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub label: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub component: Component,
    pub options: SuiteOptions,
    pub cases: Vec<SuiteCase>,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn gc_options(o: &SuiteOptions) -> GradCheckOptions {
    GradCheckOptions { tolerance: o.tolerance, seed: o.seed, ..GradCheckOptions::default() }
}

fn random(shape: (usize, usize, usize), rng: &mut RngStream) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.normal())
}

/// Runs the checks of one component.
pub fn run_suite(component: Component, options: &SuiteOptions) -> Result<SuiteReport> {
    if options.hidden == 0 || options.seq_len == 0 || options.batch == 0 {
        return Err(Error::InvalidParameter("suite sizes must be positive".into()));
    }
    let mut rng = RngStream::new(options.seed).split(&format!("grad-suite/{component}"));
    let cases = match component {
        Component::Nn => nn_cases(options, &mut rng)?,
        Component::Dine => dine_cases(options, &mut rng)?,
        Component::Ndt => ndt_cases(options, &mut rng)?,
        Component::Rollout => rollout_cases(options, &mut rng)?,
    };
    let max_rel_error = cases
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, |acc: f64, e| if e.is_nan() || acc.is_nan() { f64::NAN } else { acc.max(e) });
    Ok(SuiteReport {
        component,
        options: *options,
        passed: cases.iter().all(|c| c.report.passed),
        cases,
        max_rel_error,
    })
}

fn nn_cases(o: &SuiteOptions, rng: &mut RngStream) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
        let mut layer = Dense::new("dense", 3, o.hidden, act, rng);
        let x = Array2::from_shape_fn((o.batch, 3), |_| rng.normal());
        let w = Array2::from_shape_fn((o.batch, o.hidden), |_| rng.normal());
        let (_, cache) = layer.forward_cached(x.view())?;
        layer.zero_grad();
        layer.backward(&cache, w.view(), true);
        let report = grad_check(&mut layer, |l: &Dense| Ok((&l.forward(x.view())? * &w).sum()), &gc_options(o))?;
        cases.push(SuiteCase { label: format!("dense/{act:?}").to_lowercase(), report });
    }
    let mut lstm = LstmParams::new("lstm", 2, o.hidden, rng)?;
    let inputs: Vec<Array2<f64>> = (0..o.seq_len).map(|_| Array2::from_shape_fn((o.batch, 2), |_| rng.normal())).collect();
    let weights: Vec<Array2<f64>> = (0..o.seq_len).map(|_| Array2::from_shape_fn((o.batch, o.hidden), |_| rng.normal())).collect();
    lstm.zero_grad();
    unroll_weighted_hidden_sum(&mut lstm, &inputs, &weights, true)?;
    let report = grad_check(
        &mut lstm,
        |l: &LstmParams| unroll_weighted_hidden_sum(&mut l.clone(), &inputs, &weights, false),
        &gc_options(o),
    )?;
    cases.push(SuiteCase { label: "lstm/bptt".into(), report });
    Ok(cases)
}

fn dine_cases(o: &SuiteOptions, rng: &mut RngStream) -> Result<Vec<SuiteCase>> {
    let shape = (o.seq_len, o.batch, 1);
    let x = random(shape, rng);
    let y = &x + &(random(shape, rng) * 0.5);
    let batch = Trajectories::new(x, y)?;
    let y_ref = Array3::from_shape_fn(shape, |_| rng.uniform_range(-3.0, 3.0));
    let mut model = DineModel::new(1, 1, DineArch { hidden: o.hidden, dense: o.hidden }, rng)?;

    model.accumulate_objective_grads(&batch, &y_ref)?;
    let report = grad_check(
        &mut model,
        |m: &DineModel| {
            let v = m.dv_values(&batch, &y_ref)?;
            Ok(v.d_y + v.d_yx)
        },
        &gc_options(o),
    )?;
    let mut cases = vec![SuiteCase { label: "dv-objectives/parameters".into(), report }];

    let (_, g) = model.rate_input_grads(&batch, &y_ref)?;
    let rate = |b: &Trajectories| -> Result<f64> { Ok(model.dv_values(b, &y_ref)?.estimate()) };
    let step = 1e-5;
    let mut blocks = Vec::new();
    for (name, is_y) in [("dy", true), ("dx", false)] {
        let analytic = if is_y { &g.dy } else { &g.dx };
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (idx, &a) in analytic.indexed_iter() {
            let probe = |delta: f64| -> Result<f64> {
                let mut b = batch.clone();
                if is_y {
                    b.y[idx] += delta;
                } else {
                    b.x[idx] += delta;
                }
                rate(&b)
            };
            let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
            let rel = relative_error(a, numeric, 1e-7);
            if !(rel <= max_rel) {
                max_rel = rel;
            }
            max_abs = max_abs.max((a - numeric).abs());
        }
        blocks.push(BlockCheck { name: name.into(), checked: analytic.len(), max_rel_error: max_rel, max_abs_error: max_abs });
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    let max_rel_error = if blocks.iter().any(|b| b.max_rel_error.is_nan()) { f64::NAN } else { max_rel_error };
    cases.push(SuiteCase {
        label: "rate/inputs".into(),
        report: GradCheckReport { blocks, tolerance: o.tolerance, passed: max_rel_error < o.tolerance, max_rel_error },
    });
    Ok(cases)
}

/// Generator plus power normalization, no channel in the objective.
fn ndt_cases(o: &SuiteOptions, rng: &mut RngStream) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    for norm in [PowerNormalization::Batch, PowerNormalization::Running { decay: 0.0 }, PowerNormalization::Running { decay: 0.9 }] {
        let ndt = NdtModel::new(1, NdtArch { hidden: o.hidden, dense: o.hidden }, 1.5, false, rng)?;
        let label = match norm {
            PowerNormalization::Batch => "generator/batch-normalization".to_string(),
            PowerNormalization::Running { decay } => format!("generator/running-normalization-{decay}"),
        };
        cases.push(rollout_case(label, ndt, norm, ChannelSpec::Awgn { noise_var: 1.0 }, false, o, rng)?);
    }
    Ok(cases)
}

fn rollout_cases(o: &SuiteOptions, rng: &mut RngStream) -> Result<Vec<SuiteCase>> {
    let spec = ChannelSpec::Ma1 { alpha: 0.5 };
    let mut cases = Vec::new();
    let ff = NdtModel::new(1, NdtArch { hidden: o.hidden, dense: o.hidden }, 1.0, false, rng)?;
    cases.push(rollout_case("closed-loop/feed-forward".into(), ff, PowerNormalization::Batch, spec, true, o, rng)?);
    for decay in [0.0, 0.9] {
        let fb = NdtModel::new(1, NdtArch { hidden: o.hidden, dense: o.hidden }, 1.0, true, rng)?;
        let norm = PowerNormalization::Running { decay };
        cases.push(rollout_case(format!("closed-loop/feedback-decay-{decay}"), fb, norm, spec, true, o, rng)?);
    }
    Ok(cases)
}

/// Objective `Σ a·x + Σ b·y²` over one rollout with fixed noise; the `y`
/// term is dropped when `use_output` is false.
fn rollout_case(
    label: String,
    mut ndt: NdtModel,
    norm: PowerNormalization,
    spec: ChannelSpec,
    use_output: bool,
    o: &SuiteOptions,
    rng: &mut RngStream,
) -> Result<SuiteCase> {
    ndt.normalization = norm;
    // Keep raw outputs away from zero, where the normalization is sharply
    // curved and central differences lose accuracy.
    ndt.out.bias.value.fill(0.5);
    let shape = (o.seq_len, o.batch, 1);
    let noise = random(shape, rng);
    let a = random(shape, rng);
    let b = if use_output { random(shape, rng) } else { Array3::zeros(shape) };
    let channel_seed = rng.below(1 << 30) as u64;
    let run = |m: &NdtModel| {
        let mut ch = SimulatedChannel::new(spec)?;
        rollout_with_noise(m, &mut ch, noise.clone(), &mut RngStream::new(channel_seed))
    };
    let r = run(&ndt)?;
    let dy = &b * &r.trajectories.y * 2.0;
    ndt.zero_grad();
    rollout_backward(&mut ndt, &r, a.view(), dy.view())?;
    let report = grad_check(
        &mut ndt,
        |m: &NdtModel| {
            let t = run(m)?.trajectories;
            Ok((&a * &t.x).sum() + (&b * &t.y * &t.y).sum())
        },
        &gc_options(o),
    )?;
    Ok(SuiteCase { label, report })
}
