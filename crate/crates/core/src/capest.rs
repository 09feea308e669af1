//! Capacity estimation: alternate DINE ascent steps with generator ascent
//! steps on fresh closed-loop rollouts, then evaluate the trained pair on a
//! long Monte-Carlo run.

use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::baselines::reference_capacity;
use crate::channels::{rollout, rollout_backward, ChannelSpec, Rollout, RolloutStreams, SimulatedChannel};
use crate::dine::{dv_objective, CurvePoint, DineArch, DineModel, DineTrainer, DvValues, ReferenceBox};
use crate::error::{Error, Result};
use crate::ndt::{NdtArch, NdtModel, PowerNormalization};
use crate::nn::{AdamConfig, AdamState, Parameterized, RngStream};
use crate::trajectory::Trajectories;

/// Smallest accepted Monte-Carlo evaluation size.
pub const MIN_EVAL_SAMPLES: usize = 100_000;

/// Relative deviation of the evaluated input power from the budget above
/// which a run is reported as failed.
pub const REALIZED_POWER_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub dine_learning_rate: f64,
    pub ndt_learning_rate: f64,
    /// Number of alternations (each: `dine_steps_per_ndt` DINE steps, then
    /// one generator step).
    pub iterations: usize,
    pub dine_steps_per_ndt: usize,
    /// DINE-only steps before the first generator update.
    pub warmup_steps: usize,
    pub power: f64,
    pub feedback: bool,
    pub eval_samples: usize,
    pub seed: u64,
    pub dine_arch: DineArch,
    pub ndt_arch: NdtArch,
    pub reference_margin: f64,
    pub reference_floor: f64,
    pub clip_norm: Option<f64>,
    /// Decay of the running power average used with feedback.
    pub feedback_power_decay: f64,
    /// Sequences per rollout chunk during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            seq_len: 64,
            dine_learning_rate: 1e-4,
            ndt_learning_rate: 1e-4,
            iterations: 5000,
            dine_steps_per_ndt: 3,
            warmup_steps: 500,
            power: 1.0,
            feedback: false,
            eval_samples: 1_000_000,
            seed: 0,
            dine_arch: DineArch::default(),
            ndt_arch: NdtArch::default(),
            reference_margin: 0.05,
            reference_floor: 0.1,
            clip_norm: Some(1.0),
            feedback_power_decay: 0.0,
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("dine_steps_per_ndt", self.dine_steps_per_ndt),
            ("dine_arch.hidden", self.dine_arch.hidden),
            ("dine_arch.dense", self.dine_arch.dense),
            ("ndt_arch.hidden", self.ndt_arch.hidden),
            ("ndt_arch.dense", self.ndt_arch.dense),
            ("eval_chunk", self.eval_chunk),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive")));
        }
        if self.eval_samples < MIN_EVAL_SAMPLES {
            return Err(Error::InvalidParameter(format!(
                "eval_samples must be at least {MIN_EVAL_SAMPLES}, got {}",
                self.eval_samples
            )));
        }
        let rates_ok = self.dine_learning_rate > 0.0 && self.ndt_learning_rate > 0.0;
        if !rates_ok || !(self.power > 0.0) || !self.power.is_finite() {
            return Err(Error::InvalidParameter("learning rates and power must be positive".into()));
        }
        if !(self.reference_margin >= 0.0) || !(self.reference_floor > 0.0) {
            return Err(Error::InvalidParameter("reference margin must be ≥ 0 and floor > 0".into()));
        }
        if !(0.0..1.0).contains(&self.feedback_power_decay) {
            return Err(Error::InvalidParameter("feedback_power_decay must lie in [0, 1)".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidParameter("clip_norm must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig { learning_rate, clip_norm: self.clip_norm, ..AdamConfig::default() }
    }

    pub fn normalization(&self) -> PowerNormalization {
        if self.feedback {
            PowerNormalization::Running { decay: self.feedback_power_decay }
        } else {
            PowerNormalization::Batch
        }
    }
}

/// Result of a Monte-Carlo evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub estimate: f64,
    pub d_y: f64,
    pub d_yx: f64,
    pub realized_power: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub channel: ChannelSpec,
    pub config: TrainConfig,
    /// Estimate clamped at zero.
    pub capacity_nats: f64,
    pub capacity_bits: f64,
    /// `d_yx − d_y` before clamping.
    pub raw_estimate: f64,
    pub d_y: f64,
    pub d_yx: f64,
    pub realized_power: f64,
    pub eval_samples: usize,
    pub baseline_nats: Option<f64>,
    pub relative_error: Option<f64>,
    pub curve: Vec<CurvePoint>,
    /// Set when training diverged; the curve stops at the failure.
    pub failure: Option<String>,
    pub wall_clock_secs: f64,
}

impl EstimateReport {
    /// Copy with the wall-clock time zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_secs: 0.0, ..self.clone() }
    }

    pub fn summary(&self) -> Option<CurveSummary> {
        let values: Vec<f64> = self.curve.iter().map(|p| p.estimate).collect();
        curve_summary(&values, SMOOTHING_WINDOW)
    }
}

/// Trained models together with their report.
#[derive(Debug, Clone)]
pub struct CapacityRun {
    pub report: EstimateReport,
    pub dine: DineModel,
    pub ndt: NdtModel,
}

/// Owns the estimator, the generator and their optimizers.
#[derive(Debug, Clone)]
pub struct CapacityTrainer {
    pub spec: ChannelSpec,
    pub dine: DineTrainer,
    pub ndt: NdtModel,
    ndt_opt: AdamState,
    streams: RolloutStreams,
    reference_rng: RngStream,
    batch_size: usize,
    seq_len: usize,
    margin: f64,
    floor: f64,
}

impl CapacityTrainer {
    pub fn new(spec: ChannelSpec, config: &TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let root = RngStream::new(config.seed);
        let dine = DineModel::new(1, 1, config.dine_arch, &mut root.split("dine-init"))?;
        let mut ndt = NdtModel::new(1, config.ndt_arch, config.power, config.feedback, &mut root.split("ndt-init"))?;
        ndt.normalization = config.normalization();
        Ok(Self {
            spec,
            dine: DineTrainer::new(
                dine,
                config.adam(config.dine_learning_rate),
                config.reference_margin,
                config.reference_floor,
                root.split("dine-reference"),
            ),
            ndt,
            ndt_opt: AdamState::new(config.adam(config.ndt_learning_rate)),
            streams: RolloutStreams::new(1, &root, "train"),
            reference_rng: root.split("ndt-reference"),
            batch_size: config.batch_size,
            seq_len: config.seq_len,
            margin: config.reference_margin,
            floor: config.reference_floor,
        })
    }

    fn fresh_rollout(&mut self) -> Result<Rollout> {
        let mut channel = SimulatedChannel::new(self.spec)?;
        rollout(&self.ndt, &mut channel, self.batch_size, self.seq_len, &mut self.streams)
    }

    /// One DINE ascent step on a fresh rollout.
    pub fn dine_step(&mut self) -> Result<DvValues> {
        let r = self.fresh_rollout()?;
        self.dine.step(&r.trajectories)
    }

    /// One generator ascent step on a fresh rollout with the estimator
    /// frozen. Returns the estimator's values on that rollout.
    pub fn ndt_step(&mut self) -> Result<DvValues> {
        let r = self.fresh_rollout()?;
        let reference = ReferenceBox::fit(r.trajectories.y_rows(), self.margin, self.floor)?;
        let y_ref = reference.sample(r.trajectories.len(), r.trajectories.batch(), &mut self.reference_rng);
        let (values, grads) = self.dine.model.rate_input_grads(&r.trajectories, &y_ref)?;
        self.ndt.zero_grad();
        rollout_backward(&mut self.ndt, &r, grads.dx.view(), grads.dy.view())?;
        self.ndt_opt.update(&mut self.ndt)?;
        Ok(values)
    }
}

fn push_point(curve: &mut Vec<CurvePoint>, step: Result<DvValues>) -> Result<()> {
    let v = step?;
    if !v.estimate().is_finite() {
        return Err(Error::NonFinite("DV values".into()));
    }
    curve.push(CurvePoint::new(curve.len(), &v));
    Ok(())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NonFiniteGradient(_))
}

/// Runs the full procedure and returns the report with the trained models.
pub fn run_capacity(spec: ChannelSpec, config: &TrainConfig) -> Result<CapacityRun> {
    let started = Instant::now();
    let mut trainer = CapacityTrainer::new(spec, config)?;
    let mut curve = Vec::with_capacity(config.warmup_steps + config.iterations);
    let mut failure = None;

    let outcome: Result<()> = (|| {
        for _ in 0..config.warmup_steps {
            push_point(&mut curve, trainer.dine_step())?;
        }
        for _ in 0..config.iterations {
            for _ in 0..config.dine_steps_per_ndt {
                trainer.dine_step()?;
            }
            push_point(&mut curve, trainer.ndt_step())?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        if !is_divergence(&e) {
            return Err(e);
        }
        let iteration = curve.len();
        let err = Error::Divergence { iteration, last_finite: iteration.checked_sub(1) };
        failure = Some(format!("{err}: {e}"));
    }

    let baseline_nats = reference_capacity(&spec, config.power, config.feedback).ok();
    let evaluation = if failure.is_none() {
        match monte_carlo_eval(&trainer.dine.model, &trainer.ndt, &spec, config, config.eval_samples, config.seed) {
            Ok(e) => Some(e),
            Err(e) if is_divergence(&e) => {
                failure = Some(format!("evaluation failed: {e}"));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    if let Some(problem) = evaluation.as_ref().and_then(|ev| power_violation(ev.realized_power, config.power)) {
        failure = Some(problem);
    }
    let ev = evaluation.unwrap_or(Evaluation { estimate: f64::NAN, d_y: f64::NAN, d_yx: f64::NAN, realized_power: f64::NAN, samples: 0 });
    let capacity_nats = if ev.estimate.is_finite() { ev.estimate.max(0.0) } else { f64::NAN };
    let relative_error = baseline_nats.filter(|b| *b > 0.0).map(|b| (capacity_nats - b).abs() / b);
    let report = EstimateReport {
        channel: spec,
        config: config.clone(),
        capacity_nats,
        capacity_bits: capacity_nats / std::f64::consts::LN_2,
        raw_estimate: ev.estimate,
        d_y: ev.d_y,
        d_yx: ev.d_yx,
        realized_power: ev.realized_power,
        eval_samples: ev.samples,
        baseline_nats,
        relative_error,
        curve,
        failure,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(CapacityRun { report, dine: trainer.dine.model, ndt: trainer.ndt })
}

fn power_violation(realized: f64, budget: f64) -> Option<String> {
    ((realized - budget).abs() > REALIZED_POWER_TOLERANCE * budget).then(|| {
        format!(
            "realized power {realized:.4} is more than {}% away from the budget {budget}",
            REALIZED_POWER_TOLERANCE * 100.0
        )
    })
}

pub fn estimate_capacity(spec: ChannelSpec, config: &TrainConfig) -> Result<EstimateReport> {
    Ok(run_capacity(spec, config)?.report)
}

/// Evaluates the frozen estimator on fresh rollouts of the frozen generator
/// totaling at least `samples` channel uses, in sequences of the training
/// length. The reference box is fitted to every evaluation output.
pub fn monte_carlo_eval(
    dine: &DineModel,
    ndt: &NdtModel,
    spec: &ChannelSpec,
    config: &TrainConfig,
    samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    if samples == 0 {
        return Err(Error::Empty("evaluation samples"));
    }
    let root = RngStream::new(seed).split("eval");
    let mut streams = RolloutStreams::new(ndt.noise_dim, &root, "rollout");
    let mut reference_rng = root.split("reference");
    let len = config.seq_len;
    let sequences = samples.div_ceil(len);
    let mut chunks: Vec<Trajectories> = Vec::new();
    let mut left = sequences;
    while left > 0 {
        let b = left.min(config.eval_chunk);
        let mut channel = SimulatedChannel::new(*spec)?;
        chunks.push(rollout(ndt, &mut channel, b, len, &mut streams)?.trajectories);
        left -= b;
    }
    let reference = fit_over(&chunks, config.reference_margin, config.reference_floor)?;
    let mut pots: [Vec<f64>; 4] = Default::default();
    let mut power_sum = 0.0;
    let mut count = 0usize;
    for part in &chunks {
        let y_ref: Array3<f64> = reference.sample(part.len(), part.batch(), &mut reference_rng);
        let (ty, ry) = dine.y_potential.values(part.y.view(), part.x.view(), y_ref.view())?;
        let (tyx, ryx) = dine.yx_potential.values(part.y.view(), part.x.view(), y_ref.view())?;
        for (dst, src) in pots.iter_mut().zip([ty, ry, tyx, ryx]) {
            dst.extend(src.iter());
        }
        power_sum += part.x.iter().map(|v| v * v).sum::<f64>();
        count += part.x.len();
    }
    let d_y = dv_objective(&pots[0], &pots[1])?;
    let d_yx = dv_objective(&pots[2], &pots[3])?;
    Ok(Evaluation {
        estimate: d_yx - d_y,
        d_y,
        d_yx,
        realized_power: power_sum / count as f64,
        samples: sequences * len,
    })
}

fn fit_over(chunks: &[Trajectories], margin: f64, floor: f64) -> Result<ReferenceBox> {
    let boxes = chunks
        .iter()
        .map(|c| ReferenceBox::fit(c.y_rows(), 0.0, floor))
        .collect::<Result<Vec<_>>>()?;
    let first = boxes.first().ok_or(Error::Empty("evaluation rollouts"))?;
    let mut lo = first.lo.clone();
    let mut hi = first.hi.clone();
    for b in &boxes[1..] {
        for k in 0..lo.len() {
            lo[k] = lo[k].min(b.lo[k]);
            hi[k] = hi[k].max(b.hi[k]);
        }
    }
    for k in 0..lo.len() {
        let pad = margin * (hi[k] - lo[k]);
        lo[k] -= pad;
        hi[k] += pad;
    }
    ReferenceBox::new(lo, hi, margin)
}

/// Smoothing window used for training-curve diagnostics.
pub const SMOOTHING_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub window: usize,
    /// Largest moving average.
    pub peak: f64,
    /// Moving average over the last window.
    pub final_mean: f64,
    /// `final_mean / peak`, absent when the peak is not positive.
    pub ratio: Option<f64>,
}

/// Moving-average diagnostics of a training curve. The window shrinks to the
/// curve length for short curves. Returns `None` for an empty curve.
pub fn curve_summary(values: &[f64], window: usize) -> Option<CurveSummary> {
    if values.is_empty() {
        return None;
    }
    let w = window.clamp(1, values.len());
    let mut sum: f64 = values[..w].iter().sum();
    let mut peak = sum / w as f64;
    for i in w..values.len() {
        sum += values[i] - values[i - w];
        peak = peak.max(sum / w as f64);
    }
    let final_mean = values[values.len() - w..].iter().sum::<f64>() / w as f64;
    let ratio = (peak > 0.0).then(|| final_mean / peak);
    Some(CurveSummary { window: w, peak, final_mean, ratio })
}
