#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::io::Write as _;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dinecap::baselines::{awgn_capacity, fb_validation_gate, ma1_fb_capacity, ma1_ff_capacity};
use dinecap::capest::{run_capacity, EstimateReport, TrainConfig};
use dinecap::channels::{ChannelSpec, GaussianInputSource};
use dinecap::dine::{dine_estimate, dine_train, DineConfig, DineModel, WindowSampler};
use dinecap::gradsuite::{run_suite, Component, SuiteOptions};
use dinecap::io;
use dinecap::nn::RngStream;
use dinecap::Trajectories;
use serde::Serialize;
use serde_json::json;

use config::RunConfigFile;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Parser)]
#[command(name = "dinecap", version, about = "Directed-information rate and channel capacity estimation")]
struct Cli {
    /// Directory for result files (falls back to the config file's
    /// `out_dir`, then the current directory).
    #[arg(long, global = true, env = "DINECAP_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train DINE on a trajectory CSV and report the DI rate estimate.
    DiEstimate(DiEstimateArgs),
    /// Estimate channel capacity by training a generator against DINE.
    Capacity(CapacityArgs),
    /// Print the analytic capacity of a channel as JSON.
    Baseline(BaselineArgs),
    /// Run finite-difference gradient checks.
    GradCheck(GradCheckArgs),
    /// Run `capacity` for several powers and write one table.
    Sweep(SweepArgs),
    /// Write a trajectory CSV of i.i.d. Gaussian inputs through a channel.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Awgn,
    Ma1,
}

#[derive(Debug, Args)]
struct ChannelArgs {
    /// Channel family (falls back to the config file's `[channel]`).
    #[arg(long, value_enum)]
    family: Option<Family>,
    /// MA(1) noise coefficient.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// AWGN noise variance.
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of DINE/generator alternations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct DiEstimateArgs {
    /// Trajectory CSV with header `x0..,y0..`.
    csv: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct CapacityArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    /// Average input power budget.
    #[arg(long)]
    power: f64,
    /// Feed the previous channel output back to the generator.
    #[arg(long)]
    feedback: bool,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    #[arg(long)]
    power: f64,
    #[arg(long)]
    feedback: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Selector {
    Nn,
    Dine,
    Ndt,
    Rollout,
    All,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(value_enum)]
    component: Selector,
    #[arg(long, default_value_t = 6)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    seq_len: usize,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    /// Comma-separated power budgets.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    powers: Vec<f64>,
    #[arg(long)]
    feedback: bool,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    /// Variance of the i.i.d. Gaussian input.
    #[arg(long)]
    power: f64,
    #[arg(long)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    output: PathBuf,
}

/// Errors that should exit with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

struct RunContext {
    out_dir: PathBuf,
    file: RunConfigFile,
}

impl RunContext {
    fn new(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => RunConfigFile::load(p).map_err(|e| usage(format!("{e:#}")))?,
            None => RunConfigFile::default(),
        };
        let out_dir = cli.out_dir.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self { out_dir, file })
    }

    fn channel(&self, args: &ChannelArgs) -> Result<ChannelSpec> {
        let spec = match args.family {
            Some(Family::Awgn) => ChannelSpec::Awgn { noise_var: args.noise_var },
            Some(Family::Ma1) => ChannelSpec::Ma1 {
                alpha: args.alpha.ok_or_else(|| usage("--family ma1 requires --alpha"))?,
            },
            None => self.file.channel.ok_or_else(|| usage("no channel given: pass --family or a [channel] section"))?,
        };
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }

    fn train_config(&self, power: f64, feedback: bool, o: &TrainOverrides) -> Result<TrainConfig> {
        let mut c = self.file.train.clone().unwrap_or_default();
        c.power = power;
        c.feedback = feedback;
        if let Some(s) = o.seed {
            c.seed = s;
        }
        if let Some(i) = o.iterations {
            c.iterations = i;
        }
        if let Some(n) = o.eval_samples {
            c.eval_samples = n;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Writes a line to stdout, propagating I/O errors such as a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let ctx = RunContext::new(cli)?;
    match &cli.command {
        Command::DiEstimate(a) => di_estimate(&ctx, a),
        Command::Capacity(a) => capacity(&ctx, a),
        Command::Baseline(a) => baseline(&ctx, a),
        Command::GradCheck(a) => grad_check(a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
    }
}

#[derive(Debug, Serialize)]
struct DiSummary<'a> {
    input: String,
    rows: usize,
    estimate_nats: f64,
    estimate_bits: f64,
    d_y: f64,
    d_yx: f64,
    eval_samples: usize,
    config: &'a DineConfig,
}

fn di_estimate(ctx: &RunContext, a: &DiEstimateArgs) -> Result<ExitCode> {
    let mut config = ctx.file.dine.clone().unwrap_or_default();
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(i) = a.iterations {
        config.iterations = i;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let (x, y) = io::read_trajectory_csv(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let rows = x.nrows();
    let needed = config.batch_size * config.seq_len;
    if rows < needed {
        return Err(anyhow!("{} has {rows} rows; at least batch_size × seq_len = {needed} are needed", a.csv.display()));
    }
    let root = RngStream::new(config.seed);
    let model = DineModel::new(y.ncols(), x.ncols(), config.arch, &mut root.split("dine-init"))?;
    let mut sampler = WindowSampler::new(x.clone(), y.clone(), config.window_mode, root.split("windows"))?;
    let (model, curve) = dine_train(model, &mut sampler, &config)?;
    let data = Trajectories::from_series(x.view(), y.view(), config.seq_len)?;
    let est = dine_estimate(
        &model,
        &data,
        None,
        config.reference_margin,
        config.reference_floor,
        config.eval_chunk,
        &mut root.split("evaluation"),
    )?;
    let stem = a.csv.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory").to_string();
    io::write_curve_csv(&ctx.path(&format!("{stem}.dine.curve.csv")), &curve)?;
    let summary = DiSummary {
        input: a.csv.display().to_string(),
        rows,
        estimate_nats: est.estimate,
        estimate_bits: est.estimate / LN2,
        d_y: est.d_y,
        d_yx: est.d_yx,
        eval_samples: est.samples,
        config: &config,
    };
    io::write_json(&ctx.path(&format!("{stem}.dine.json")), &summary)?;
    out!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn write_run(ctx: &RunContext, report: &EstimateReport, ndt: Option<&dinecap::ndt::NdtModel>) -> Result<String> {
    let stem = io::run_file_stem(&report.channel, report.config.power, report.config.feedback, report.config.seed);
    io::write_json(&ctx.path(&format!("{stem}.report.json")), report)?;
    io::write_curve_csv(&ctx.path(&format!("{stem}.curve.csv")), &report.curve)?;
    if let Some(ndt) = ndt {
        io::save_ndt(&ctx.path(&format!("{stem}.ndt.bin")), ndt)?;
    }
    Ok(stem)
}

fn capacity(ctx: &RunContext, a: &CapacityArgs) -> Result<ExitCode> {
    let spec = ctx.channel(&a.channel)?;
    let config = ctx.train_config(a.power, a.feedback, &a.train)?;
    let run = run_capacity(spec, &config)?;
    let report = &run.report;
    let stem = write_run(ctx, report, Some(&run.ndt))?;
    out!("capacity_nats {:.6}", report.capacity_nats);
    out!("capacity_bits {:.6}", report.capacity_bits);
    if let Some(b) = report.baseline_nats {
        out!("baseline_nats {b:.6}");
    }
    if let Some(r) = report.relative_error {
        out!("relative_error {r:.4}");
    }
    out!("realized_power {:.6}", report.realized_power);
    out!("report {}", ctx.path(&format!("{stem}.report.json")).display());
    if let Some(f) = &report.failure {
        eprintln!("training failed: {f}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn baseline(ctx: &RunContext, a: &BaselineArgs) -> Result<ExitCode> {
    let spec = ctx.channel(&a.channel)?;
    let p = a.power;
    let (family, capacity, diagnostics) = match spec {
        ChannelSpec::Awgn { noise_var } => {
            let c = awgn_capacity(p, noise_var).map_err(|e| usage(e.to_string()))?;
            ("awgn", c, json!({ "formula": "0.5 ln(1 + P / noise_var)" }))
        }
        ChannelSpec::Ma1 { alpha } => {
            if !(p >= 0.0) {
                return Err(usage(format!("power must be non-negative, got {p}")));
            }
            let ff = ma1_ff_capacity(p, alpha)?;
            if a.feedback {
                let fb = ma1_fb_capacity(p, alpha)?;
                let gate = fb_validation_gate()?;
                let diag = json!({
                    "root": fb.root,
                    "feed_forward_nats": ff.capacity,
                    "gate_trusted": gate.trusted,
                    "gate_diagnostics": gate.diagnostics,
                });
                ("ma1", fb.capacity, diag)
            } else {
                ("ma1", ff.capacity, json!({ "water_level": ff.water_level, "grid": ff.grid, "power_gap": ff.power_gap }))
            }
        }
    };
    let out = json!({
        "family": family,
        "params": { "alpha": spec.alpha(), "power": p, "noise_var": a.channel.noise_var, "feedback": a.feedback },
        "capacity_nats": capacity,
        "capacity_bits": capacity / LN2,
        "diagnostics": diagnostics,
    });
    out!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: &GradCheckArgs) -> Result<ExitCode> {
    let components: Vec<Component> = match a.component {
        Selector::Nn => vec![Component::Nn],
        Selector::Dine => vec![Component::Dine],
        Selector::Ndt => vec![Component::Ndt],
        Selector::Rollout => vec![Component::Rollout],
        Selector::All => Component::ALL.to_vec(),
    };
    let options = SuiteOptions { hidden: a.hidden, seq_len: a.seq_len, batch: a.batch, seed: a.seed, tolerance: a.tolerance };
    let mut all_passed = true;
    for c in components {
        let report = run_suite(c, &options).map_err(|e| usage(e.to_string()))?;
        for case in &report.cases {
            let status = if case.report.passed { "PASS" } else { "FAIL" };
            out!("{status} {c} {} max_rel_error={:.3e}", case.label, case.report.max_rel_error);
        }
        all_passed &= report.passed;
    }
    out!("{}", if all_passed { "all checks passed" } else { "some checks failed" });
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Debug, Serialize)]
struct SweepRow {
    power: f64,
    estimate_nats: Option<f64>,
    estimate_bits: Option<f64>,
    baseline_nats: Option<f64>,
    relative_error: Option<f64>,
    realized_power: Option<f64>,
    status: String,
}

fn sweep(ctx: &RunContext, a: &SweepArgs) -> Result<ExitCode> {
    let spec = ctx.channel(&a.channel)?;
    if a.powers.is_empty() {
        return Err(usage("--powers needs at least one value"));
    }
    let configs = a
        .powers
        .iter()
        .map(|&p| ctx.train_config(p, a.feedback, &a.train))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for config in &configs {
        let row = match run_capacity(spec, config) {
            Ok(run) => {
                let r = &run.report;
                write_run(ctx, r, Some(&run.ndt))?;
                SweepRow {
                    power: config.power,
                    estimate_nats: Some(r.capacity_nats),
                    estimate_bits: Some(r.capacity_bits),
                    baseline_nats: r.baseline_nats,
                    relative_error: r.relative_error,
                    realized_power: Some(r.realized_power),
                    status: r.failure.clone().map_or_else(|| "ok".into(), |f| format!("failed: {f}")),
                }
            }
            Err(e) => SweepRow {
                power: config.power,
                estimate_nats: None,
                estimate_bits: None,
                baseline_nats: None,
                relative_error: None,
                realized_power: None,
                status: format!("failed: {e}"),
            },
        };
        eprintln!("P={} status={}", row.power, row.status);
        rows.push(row);
    }
    let family = match spec {
        ChannelSpec::Awgn { .. } => "awgn".to_string(),
        ChannelSpec::Ma1 { alpha } => format!("ma1_a{alpha}"),
    };
    let mode = if a.feedback { "fb" } else { "ff" };
    let seed = configs[0].seed;
    let path = ctx.path(&format!("{family}_{mode}_seed{seed}_sweep.csv"));
    write_rows(&path, &rows)?;
    write!(std::io::stdout().lock(), "{}", std::fs::read_to_string(&path)?)?;
    let all_ok = rows.iter().all(|r| r.status == "ok");
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(ctx: &RunContext, a: &SimulateArgs) -> Result<ExitCode> {
    let spec = ctx.channel(&a.channel)?;
    if a.rows == 0 {
        return Err(usage("--rows must be positive"));
    }
    let mut source = GaussianInputSource::new(spec, a.power, &RngStream::new(a.seed)).map_err(|e| usage(e.to_string()))?;
    let (x, y) = source.series(a.rows)?;
    io::write_trajectory_csv(&a.output, &x, &y)?;
    Ok(ExitCode::SUCCESS)
}
