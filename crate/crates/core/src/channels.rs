//! Differentiable additive-noise channel simulators and the closed loop
//! generator → channel (→ generator, with feedback).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::dine::BatchSource;
use crate::error::{Error, Result};
use crate::ndt::{power_normalize, power_normalize_backward, NdtModel, NdtStepCache, NoiseSource, PowerNormalization, RunningPower};
use crate::nn::{LstmState, RngStream};
use crate::trajectory::Trajectories;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ChannelSpec {
    /// `y_i = x_i + z_i`, `z_i ~ N(0, noise_var)` i.i.d.
    Awgn { noise_var: f64 },
    /// `y_i = x_i + α u_{i-1} + u_i`, `u_i ~ N(0, 1)` i.i.d.
    Ma1 { alpha: f64 },
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ChannelSpec::Awgn { noise_var } if !(noise_var > 0.0 && noise_var.is_finite()) => {
                Err(Error::InvalidParameter(format!("AWGN noise variance must be positive, got {noise_var}")))
            }
            ChannelSpec::Ma1 { alpha } if !alpha.is_finite() => {
                Err(Error::InvalidParameter(format!("MA(1) coefficient must be finite, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ChannelSpec::Awgn { .. } => "awgn",
            ChannelSpec::Ma1 { .. } => "ma1",
        }
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            ChannelSpec::Awgn { .. } => 0.0,
            ChannelSpec::Ma1 { alpha } => alpha,
        }
    }

    /// Autocovariance of the noise process at lags `0, 1, ...` (zero beyond
    /// the returned entries).
    pub fn noise_autocovariance(&self) -> Vec<f64> {
        match *self {
            ChannelSpec::Awgn { noise_var } => vec![noise_var],
            ChannelSpec::Ma1 { alpha } => vec![1.0 + alpha * alpha, alpha],
        }
    }
}

/// Noise memory carried between steps: the previous innovation of each
/// sequence (unused by AWGN).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub prev_innovation: Array2<f64>,
}

impl ChannelState {
    pub fn reset(batch: usize, dim: usize) -> Self {
        Self { prev_innovation: Array2::zeros((batch, dim)) }
    }
}

/// One channel use for a batch `x: (batch, dim)`. Returns `(y, z, state')`
/// where `z` is the additive noise realization.
pub fn channel_step(
    spec: &ChannelSpec,
    state: &ChannelState,
    x: ArrayView2<f64>,
    rng: &mut RngStream,
) -> Result<(Array2<f64>, Array2<f64>, ChannelState)> {
    if state.prev_innovation.dim() != x.dim() {
        return Err(Error::Shape {
            context: "channel state",
            expected: x.shape().to_vec(),
            found: state.prev_innovation.shape().to_vec(),
        });
    }
    let mut u = Array2::zeros(x.raw_dim());
    rng.fill_normal(u.as_slice_mut().expect("fresh array"));
    let z = match *spec {
        ChannelSpec::Awgn { noise_var } => {
            let sigma = noise_var.sqrt();
            u.mapv(|v| sigma * v)
        }
        ChannelSpec::Ma1 { alpha } => {
            let mut z = &state.prev_innovation * alpha;
            z += &u;
            z
        }
    };
    let y = &x + &z;
    Ok((y, z, ChannelState { prev_innovation: u }))
}

/// Contract for a simulated channel the closed loop can drive.
pub trait Channel {
    fn reset(&mut self, batch: usize, dim: usize);
    /// One use: returns `(y_i, z_i)`.
    fn step(&mut self, x: ArrayView2<f64>, rng: &mut RngStream) -> Result<(Array2<f64>, Array2<f64>)>;
    /// `∂y_i/∂x_i` along a fixed noise realization (with `∂y_i/∂x_j = 0` for
    /// `j < i`), or `None` when no pathwise derivative is available.
    fn pathwise_derivative(&self) -> Option<f64>;
}

#[derive(Debug, Clone)]
pub struct SimulatedChannel {
    pub spec: ChannelSpec,
    state: ChannelState,
}

impl SimulatedChannel {
    pub fn new(spec: ChannelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, state: ChannelState::reset(0, 0) })
    }
}

impl Channel for SimulatedChannel {
    fn reset(&mut self, batch: usize, dim: usize) {
        self.state = ChannelState::reset(batch, dim);
    }

    fn step(&mut self, x: ArrayView2<f64>, rng: &mut RngStream) -> Result<(Array2<f64>, Array2<f64>)> {
        let (y, z, next) = channel_step(&self.spec, &self.state, x, rng)?;
        self.state = next;
        Ok((y, z))
    }

    fn pathwise_derivative(&self) -> Option<f64> {
        // Additive noise.
        Some(1.0)
    }
}

/// Random streams consumed by a rollout: generator noise and channel noise
/// are kept separate so the channel realization does not depend on the
/// generator.
#[derive(Debug, Clone)]
pub struct RolloutStreams {
    pub noise: NoiseSource,
    pub channel: RngStream,
}

impl RolloutStreams {
    pub fn new(dim: usize, root: &RngStream, tag: &str) -> Self {
        Self {
            noise: NoiseSource::new(dim, root.split(&format!("{tag}/ndt-noise"))),
            channel: root.split(&format!("{tag}/channel")),
        }
    }
}

#[derive(Debug, Clone)]
enum NormRecord {
    Batch { scale: f64 },
    Running(RunningPower),
}

/// One closed-loop rollout with every intermediate needed for BPTT.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub noise: Array3<f64>,
    pub raw: Array3<f64>,
    pub trajectories: Trajectories,
    /// Additive channel noise `z = y − x`.
    pub channel_noise: Array3<f64>,
    pub feedback: bool,
    /// `∂y_i/∂x_i` of the channel.
    pub pathwise: Option<f64>,
    steps: Vec<NdtStepCache>,
    states: Vec<LstmState>,
    norm: NormRecord,
}

impl Rollout {
    pub fn realized_power(&self) -> f64 {
        self.trajectories.mean_square_x()
    }
}

/// Runs the generator against the channel for `batch` sequences of `len`
/// steps. Without feedback the whole raw batch is generated first, then
/// normalized and sent through the channel; with feedback the three stages
/// interleave per time step and `y_{i-1}` is fed back (`y_0 = 0`).
pub fn rollout(
    ndt: &NdtModel,
    channel: &mut dyn Channel,
    batch: usize,
    len: usize,
    streams: &mut RolloutStreams,
) -> Result<Rollout> {
    if batch == 0 || len == 0 {
        return Err(Error::Empty("rollout"));
    }
    let noise = streams.noise.draw(len, batch);
    rollout_with_noise(ndt, channel, noise, &mut streams.channel)
}

/// [`rollout`] driven by an explicit generator noise block `(len, batch, dim)`.
pub fn rollout_with_noise(
    ndt: &NdtModel,
    channel: &mut dyn Channel,
    noise: Array3<f64>,
    channel_rng: &mut RngStream,
) -> Result<Rollout> {
    let (len, batch, noise_dim) = noise.dim();
    if batch == 0 || len == 0 {
        return Err(Error::Empty("rollout"));
    }
    if noise_dim != ndt.noise_dim {
        return Err(Error::Shape { context: "generator noise", expected: vec![len, batch, ndt.noise_dim], found: noise.shape().to_vec() });
    }
    let d = ndt.output_dim;
    let mut raw = Array3::zeros((len, batch, d));
    let mut x = Array3::zeros((len, batch, d));
    let mut y = Array3::zeros((len, batch, d));
    let mut z = Array3::zeros((len, batch, d));
    let mut steps = Vec::with_capacity(len);
    let mut states = Vec::with_capacity(len + 1);
    let mut state = ndt.initial_state(batch);
    channel.reset(batch, d);

    let mut running = match ndt.normalization {
        PowerNormalization::Batch if ndt.feedback => {
            return Err(Error::Unsupported("batch power normalization cannot be used with feedback".into()))
        }
        PowerNormalization::Batch => None,
        PowerNormalization::Running { decay } => Some(RunningPower::new(ndt.power, decay)?),
    };

    let mut prev_y = Array2::zeros((batch, d));
    for t in 0..len {
        let fb = ndt.feedback.then(|| prev_y.view());
        let (r, next, cache) = ndt.step(noise.index_axis(Axis(0), t), fb, &state)?;
        raw.index_axis_mut(Axis(0), t).assign(&r);
        states.push(std::mem::replace(&mut state, next));
        steps.push(cache);
        if let Some(rp) = running.as_mut() {
            let xt = rp.step(r.view());
            let (yt, zt) = channel.step(xt.view(), channel_rng)?;
            x.index_axis_mut(Axis(0), t).assign(&xt);
            y.index_axis_mut(Axis(0), t).assign(&yt);
            z.index_axis_mut(Axis(0), t).assign(&zt);
            prev_y = yt;
        }
    }
    let norm = match running {
        Some(rp) => NormRecord::Running(rp),
        None => {
            let (xn, scale) = power_normalize(&raw, ndt.power)?;
            for t in 0..len {
                let (yt, zt) = channel.step(xn.index_axis(Axis(0), t), channel_rng)?;
                y.index_axis_mut(Axis(0), t).assign(&yt);
                z.index_axis_mut(Axis(0), t).assign(&zt);
            }
            x = xn;
            NormRecord::Batch { scale }
        }
    };
    Ok(Rollout {
        noise,
        raw,
        trajectories: Trajectories::new(x, y)?,
        channel_noise: z,
        feedback: ndt.feedback,
        pathwise: channel.pathwise_derivative(),
        steps,
        states,
        norm,
    })
}

/// Backpropagates gradients with respect to the rollout's `x` and `y`
/// (direct partials, e.g. from the estimator) into the generator's
/// parameter gradients, through the channel's pathwise derivative, the power
/// normalization and, with feedback, the closed loop.
pub fn rollout_backward(ndt: &mut NdtModel, rollout: &Rollout, dx: ArrayView3<f64>, dy: ArrayView3<f64>) -> Result<()> {
    let pathwise = rollout
        .pathwise
        .ok_or_else(|| Error::Unsupported("channel has no pathwise derivative".into()))?;
    let (len, batch, d) = rollout.raw.dim();
    if dx.dim() != (len, batch, d) || dy.dim() != (len, batch, d) {
        return Err(Error::Shape {
            context: "rollout gradients",
            expected: vec![len, batch, d],
            found: dx.shape().to_vec(),
        });
    }
    let h = ndt.lstm.hidden_size();

    // Without feedback nothing flows back into y, so the input gradient is
    // complete up front and the batch normalization can be inverted at once.
    let batch_d_raw = match &rollout.norm {
        NormRecord::Batch { scale } => {
            let d_x_total = &dx + &(&dy * pathwise);
            Some(power_normalize_backward(&rollout.raw, *scale, &d_x_total))
        }
        NormRecord::Running(_) => None,
    };

    let mut carry = 0.0;
    let mut d_feedback = Array2::<f64>::zeros((batch, d));
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dc_next = Array2::<f64>::zeros((batch, h));
    for t in (0..len).rev() {
        let d_raw = match (&rollout.norm, &batch_d_raw) {
            (_, Some(all)) => all.index_axis(Axis(0), t).to_owned(),
            (NormRecord::Running(rp), None) => {
                let d_y_total = &dy.index_axis(Axis(0), t) + &d_feedback;
                let d_x_total = &dx.index_axis(Axis(0), t) + &(d_y_total * pathwise);
                rp.backward_step(t, rollout.raw.index_axis(Axis(0), t), d_x_total.view(), &mut carry)
            }
            (NormRecord::Batch { .. }, None) => unreachable!("batch gradient precomputed"),
        };
        let cache = &rollout.steps[t];
        let prev = &rollout.states[t];
        let dh = ndt.head_backward(cache, d_raw.view()) + &dh_next;
        let (dz, dc_prev) = ndt.lstm.step_backward(&cache.lstm, prev.cell.view(), dh.view(), Some(dc_next.view()));
        ndt.lstm.accumulate_input_grad(cache.lstm.input.view(), dz.view());
        ndt.lstm.accumulate_recurrent_grad(prev.hidden.view(), dz.view());
        if ndt.feedback {
            let d_in = ndt.lstm.input_grad(dz.view());
            d_feedback = d_in.slice(ndarray::s![.., ndt.noise_dim..]).to_owned();
        }
        dh_next = ndt.lstm.hidden_grad(dz.view());
        dc_next = dc_prev;
    }
    Ok(())
}

/// Channel driven by a fixed i.i.d. `N(0, power)` input, as a DINE batch
/// source.
#[derive(Debug, Clone)]
pub struct GaussianInputSource {
    pub power: f64,
    channel: SimulatedChannel,
    input_rng: RngStream,
    channel_rng: RngStream,
}

impl GaussianInputSource {
    pub fn new(spec: ChannelSpec, power: f64, root: &RngStream) -> Result<Self> {
        if !(power >= 0.0) {
            return Err(Error::InvalidParameter(format!("input power must be non-negative, got {power}")));
        }
        Ok(Self {
            power,
            channel: SimulatedChannel::new(spec)?,
            input_rng: root.split("gaussian-input"),
            channel_rng: root.split("gaussian-input/channel"),
        })
    }

    /// One contiguous realization of `n` channel uses, as `(n, 1)` columns.
    pub fn series(&mut self, n: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let traj = self.next_batch(1, n)?;
        Ok(traj.to_series())
    }
}

impl BatchSource for GaussianInputSource {
    fn next_batch(&mut self, batch: usize, len: usize) -> Result<Trajectories> {
        let sigma = self.power.sqrt();
        let mut x = Array3::zeros((len, batch, 1));
        self.input_rng.fill_normal(x.as_slice_mut().expect("fresh array"));
        x.mapv_inplace(|v| sigma * v);
        let mut y = Array3::zeros((len, batch, 1));
        self.channel.reset(batch, 1);
        for t in 0..len {
            let (yt, _) = self.channel.step(x.index_axis(Axis(0), t), &mut self.channel_rng)?;
            y.index_axis_mut(Axis(0), t).assign(&yt);
        }
        Trajectories::new(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndt::NdtArch;
    use crate::nn::{grad_check, GradCheckOptions, Parameterized};

    fn noise_series(spec: ChannelSpec, n: usize, seed: u64) -> Vec<f64> {
        let mut ch = SimulatedChannel::new(spec).unwrap();
        ch.reset(1, 1);
        let mut rng = RngStream::new(seed);
        let x = Array2::zeros((1, 1));
        (0..n).map(|_| ch.step(x.view(), &mut rng).unwrap().1[[0, 0]]).collect()
    }

    fn autocov(z: &[f64], lag: usize) -> f64 {
        let n = z.len() - lag;
        (0..n).map(|i| z[i] * z[i + lag]).sum::<f64>() / n as f64
    }

    #[test]
    fn ma1_with_zero_alpha_matches_unit_awgn_bit_for_bit() {
        let a = noise_series(ChannelSpec::Ma1 { alpha: 0.0 }, 1000, 11);
        let b = noise_series(ChannelSpec::Awgn { noise_var: 1.0 }, 1000, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn awgn_noise_variance() {
        let z = noise_series(ChannelSpec::Awgn { noise_var: 0.5 }, 1_000_000, 3);
        assert!((autocov(&z, 0) - 0.5).abs() < 0.005);
        assert!(autocov(&z, 1).abs() < 0.005);
    }

    #[test]
    fn ma1_noise_autocovariance() {
        let spec = ChannelSpec::Ma1 { alpha: 0.5 };
        let z = noise_series(spec, 1_000_000, 5);
        let expected = spec.noise_autocovariance();
        assert!((autocov(&z, 0) - expected[0]).abs() < 0.01, "{}", autocov(&z, 0));
        assert!((autocov(&z, 1) - expected[1]).abs() < 0.01, "{}", autocov(&z, 1));
        assert!(autocov(&z, 2).abs() < 0.01);
    }

    #[test]
    fn invalid_channels_rejected() {
        assert!(SimulatedChannel::new(ChannelSpec::Awgn { noise_var: 0.0 }).is_err());
        assert!(SimulatedChannel::new(ChannelSpec::Ma1 { alpha: f64::NAN }).is_err());
    }

    #[test]
    fn channel_state_shape_checked() {
        let st = ChannelState::reset(2, 1);
        let x = Array2::zeros((3, 1));
        let mut rng = RngStream::new(0);
        assert!(channel_step(&ChannelSpec::Ma1 { alpha: 0.3 }, &st, x.view(), &mut rng).is_err());
    }

    fn small_ndt(feedback: bool, seed: u64) -> NdtModel {
        let mut rng = RngStream::new(seed);
        NdtModel::new(1, NdtArch { hidden: 5, dense: 4 }, 1.0, feedback, &mut rng).unwrap()
    }

    #[test]
    fn channel_noise_does_not_depend_on_generator() {
        let spec = ChannelSpec::Ma1 { alpha: 0.5 };
        let root = RngStream::new(9);
        let mut zs = Vec::new();
        for (fb, seed) in [(false, 1), (true, 2)] {
            let ndt = small_ndt(fb, seed);
            let mut ch = SimulatedChannel::new(spec).unwrap();
            let mut streams = RolloutStreams::new(1, &root, "t");
            zs.push(rollout(&ndt, &mut ch, 3, 7, &mut streams).unwrap().channel_noise);
        }
        assert_eq!(zs[0], zs[1]);
    }

    #[test]
    fn batch_normalization_with_feedback_is_rejected() {
        let mut ndt = small_ndt(true, 1);
        ndt.normalization = PowerNormalization::Batch;
        let mut ch = SimulatedChannel::new(ChannelSpec::Awgn { noise_var: 1.0 }).unwrap();
        let mut streams = RolloutStreams::new(1, &RngStream::new(0), "t");
        assert!(matches!(rollout(&ndt, &mut ch, 2, 3, &mut streams), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rollout_is_causal() {
        let spec = ChannelSpec::Ma1 { alpha: 0.7 };
        for fb in [false, true] {
            let mut ndt = small_ndt(fb, 4);
            ndt.normalization = PowerNormalization::Running { decay: 0.5 };
            let mut rng = RngStream::new(1);
            let noise = Array3::from_shape_fn((8, 3, 1), |_| rng.normal());
            let mut perturbed = noise.clone();
            perturbed[[5, 1, 0]] += 1.0;
            let run = |n: Array3<f64>| {
                let mut ch = SimulatedChannel::new(spec).unwrap();
                rollout_with_noise(&ndt, &mut ch, n, &mut RngStream::new(2)).unwrap()
            };
            let a = run(noise);
            let b = run(perturbed);
            for t in 0..5 {
                assert_eq!(a.trajectories.x.index_axis(Axis(0), t), b.trajectories.x.index_axis(Axis(0), t));
                assert_eq!(a.trajectories.y.index_axis(Axis(0), t), b.trajectories.y.index_axis(Axis(0), t));
            }
            assert_ne!(a.trajectories.x[[5, 1, 0]], b.trajectories.x[[5, 1, 0]]);
            if fb {
                // Sequence 1's own feedback changes its later inputs.
                assert_ne!(a.trajectories.x[[6, 1, 0]], b.trajectories.x[[6, 1, 0]]);
            }
        }
    }

    #[test]
    fn feedback_with_zero_feedback_weights_matches_feed_forward() {
        let ff = small_ndt(false, 6);
        let mut fb = small_ndt(true, 7);
        fb.normalization = PowerNormalization::Running { decay: 0.0 };
        let mut ff = ff;
        ff.normalization = fb.normalization;
        fb.lstm.w_input.value.fill(0.0);
        fb.lstm.w_input.value.row_mut(0).assign(&ff.lstm.w_input.value.row(0));
        fb.lstm.w_hidden.value.assign(&ff.lstm.w_hidden.value);
        fb.lstm.bias.value.assign(&ff.lstm.bias.value);
        fb.hidden = ff.hidden.clone();
        fb.out = ff.out.clone();
        let spec = ChannelSpec::Ma1 { alpha: 0.5 };
        let root = RngStream::new(3);
        let run = |m: &NdtModel| {
            let mut ch = SimulatedChannel::new(spec).unwrap();
            let mut streams = RolloutStreams::new(1, &root, "w");
            rollout(m, &mut ch, 4, 9, &mut streams).unwrap().trajectories
        };
        assert_eq!(run(&ff), run(&fb));
    }

    #[test]
    fn running_normalization_meets_budget_each_step() {
        let mut ndt = small_ndt(true, 8);
        ndt.power = 2.0;
        let mut ch = SimulatedChannel::new(ChannelSpec::Ma1 { alpha: 0.5 }).unwrap();
        let mut streams = RolloutStreams::new(1, &RngStream::new(0), "p");
        let r = rollout(&ndt, &mut ch, 16, 10, &mut streams).unwrap();
        for t in 0..10 {
            let ms = r.trajectories.x.index_axis(Axis(0), t).iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms - 2.0).abs() < 1e-6, "step {t}: {ms}");
        }
    }

    /// `J = Σ a·x + Σ b·y²` with fixed weights, so both partials are nonzero.
    fn check_rollout_gradient(mut ndt: NdtModel, spec: ChannelSpec) {
        // Keep raw outputs away from zero, where the normalization is sharply
        // curved and central differences lose accuracy.
        ndt.out.bias.value.fill(0.5);
        let (len, batch) = (6, 3);
        let mut rng = RngStream::new(21);
        let noise = Array3::from_shape_fn((len, batch, 1), |_| rng.normal());
        let a = Array3::from_shape_fn((len, batch, 1), |_| rng.normal());
        let b = Array3::from_shape_fn((len, batch, 1), |_| rng.normal());
        let objective = |m: &NdtModel| -> Result<f64> {
            let mut ch = SimulatedChannel::new(spec)?;
            let r = rollout_with_noise(m, &mut ch, noise.clone(), &mut RngStream::new(5))?;
            let t = &r.trajectories;
            Ok((&a * &t.x).sum() + (&b * &t.y * &t.y).sum())
        };
        let mut ch = SimulatedChannel::new(spec).unwrap();
        let r = rollout_with_noise(&ndt, &mut ch, noise.clone(), &mut RngStream::new(5)).unwrap();
        let dy = &b * &r.trajectories.y * 2.0;
        ndt.zero_grad();
        rollout_backward(&mut ndt, &r, a.view(), dy.view()).unwrap();
        let report = grad_check(&mut ndt, objective, &GradCheckOptions { tolerance: 1e-4, ..Default::default() }).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn rollout_gradient_feed_forward() {
        check_rollout_gradient(small_ndt(false, 31), ChannelSpec::Ma1 { alpha: 0.5 });
    }

    #[test]
    fn rollout_gradient_feedback() {
        for decay in [0.0, 0.9] {
            let mut ndt = small_ndt(true, 32);
            ndt.normalization = PowerNormalization::Running { decay };
            check_rollout_gradient(ndt, ChannelSpec::Ma1 { alpha: 0.5 });
        }
        check_rollout_gradient(small_ndt(true, 33), ChannelSpec::Awgn { noise_var: 0.7 });
    }

    #[test]
    fn gaussian_source_power() {
        let mut src = GaussianInputSource::new(ChannelSpec::Ma1 { alpha: 0.5 }, 2.0, &RngStream::new(1)).unwrap();
        let t = src.next_batch(100, 1000).unwrap();
        assert!((t.mean_square_x() - 2.0).abs() < 0.05);
        let ms_y = t.y.iter().map(|v| v * v).sum::<f64>() / t.samples() as f64;
        assert!((ms_y - 3.25).abs() < 0.08, "{ms_y}");
    }
}
