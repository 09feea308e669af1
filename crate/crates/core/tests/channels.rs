use dinecap::channels::{rollout, ChannelSpec, GaussianInputSource, RolloutStreams, SimulatedChannel};
use dinecap::ndt::{NdtArch, NdtModel, PowerNormalization};
use dinecap::nn::RngStream;

fn lag_cov(a: &[f64], b: &[f64], lag: usize) -> f64 {
    let n = a.len() - lag;
    (0..n).map(|i| a[i + lag] * b[i]).sum::<f64>() / n as f64
}

#[test]
fn gaussian_input_output_covariances_match_the_model() {
    let (alpha, power) = (0.5, 1.5);
    let mut src = GaussianInputSource::new(ChannelSpec::Ma1 { alpha }, power, &RngStream::new(21)).unwrap();
    let (x, y) = src.series(400_000).unwrap();
    let (x, y) = (x.column(0).to_vec(), y.column(0).to_vec());
    // y_i = x_i + α u_{i−1} + u_i with unit innovations.
    assert!((lag_cov(&x, &x, 0) - power).abs() < 0.02);
    assert!((lag_cov(&y, &y, 0) - (power + 1.0 + alpha * alpha)).abs() < 0.03);
    assert!((lag_cov(&y, &y, 1) - alpha).abs() < 0.02);
    assert!(lag_cov(&y, &y, 2).abs() < 0.02);
    assert!((lag_cov(&y, &x, 0) - power).abs() < 0.02);
    assert!(lag_cov(&y, &x, 1).abs() < 0.02);
}

#[test]
fn fresh_generators_meet_the_power_budget_on_average() {
    let mut rng = RngStream::new(2);
    let arch = NdtArch { hidden: 8, dense: 8 };
    for (feedback, norm) in [(false, PowerNormalization::Batch), (true, PowerNormalization::Running { decay: 0.0 })] {
        let mut ndt = NdtModel::new(1, arch, 2.0, feedback, &mut rng).unwrap();
        ndt.normalization = norm;
        let mut ch = SimulatedChannel::new(ChannelSpec::Ma1 { alpha: -0.5 }).unwrap();
        let mut streams = RolloutStreams::new(ndt.noise_dim, &RngStream::new(3), "t");
        let r = rollout(&ndt, &mut ch, 64, 16, &mut streams).unwrap();
        assert!((r.realized_power() - 2.0).abs() < 1e-6, "feedback={feedback}: {}", r.realized_power());
        assert!(r.trajectories.y.iter().all(|v| v.is_finite()));
    }
}
