use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, RngStream};
use crate::trajectory::Trajectories;

use super::reference::ReferenceBox;
use super::{DineArch, DineModel, DvValues};

/// How training windows are drawn from a single recorded realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    /// The series is cut into disjoint length-`T` blocks; each batch picks
    /// `B` blocks at random.
    DisjointBlocks,
    /// Each window starts at a uniformly random offset (windows may overlap).
    RandomStarts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DineConfig {
    pub arch: DineArch,
    pub batch_size: usize,
    pub seq_len: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub reference_margin: f64,
    pub reference_floor: f64,
    pub window_mode: WindowMode,
    /// Evaluation is done over chunks of this many sequences.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for DineConfig {
    fn default() -> Self {
        Self {
            arch: DineArch::default(),
            batch_size: 32,
            seq_len: 64,
            iterations: 5000,
            learning_rate: 1e-4,
            clip_norm: Some(1.0),
            reference_margin: 0.05,
            reference_floor: 0.1,
            window_mode: WindowMode::DisjointBlocks,
            eval_chunk: 256,
            seed: 0,
        }
    }
}

impl DineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("iterations", self.iterations),
            ("arch.hidden", self.arch.hidden),
            ("arch.dense", self.arch.dense),
            ("eval_chunk", self.eval_chunk),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) || !(self.reference_floor > 0.0) || !(self.reference_margin >= 0.0) {
            return Err(Error::InvalidParameter("learning rate, margin and floor must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Supplies training batches of `(T, B)` trajectories.
pub trait BatchSource {
    fn next_batch(&mut self, batch: usize, len: usize) -> Result<Trajectories>;
}

/// Draws windows from one contiguous recorded realization.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    x: Array2<f64>,
    y: Array2<f64>,
    mode: WindowMode,
    rng: RngStream,
}

impl WindowSampler {
    pub fn new(x: Array2<f64>, y: Array2<f64>, mode: WindowMode, rng: RngStream) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::LengthMismatch { context: "dataset x/y rows", left: x.nrows(), right: y.nrows() });
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        Ok(Self { x, y, mode, rng })
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn series(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.x, &self.y)
    }
}

impl BatchSource for WindowSampler {
    fn next_batch(&mut self, batch: usize, len: usize) -> Result<Trajectories> {
        let n = self.x.nrows();
        if len == 0 || len > n {
            return Err(Error::InvalidParameter(format!("window length {len} for {n} rows")));
        }
        let starts: Vec<usize> = match self.mode {
            WindowMode::DisjointBlocks => {
                let blocks = n / len;
                (0..batch).map(|_| self.rng.below(blocks) * len).collect()
            }
            WindowMode::RandomStarts => (0..batch).map(|_| self.rng.below(n - len + 1)).collect(),
        };
        Ok(Trajectories::windows(self.x.view(), self.y.view(), &starts, len))
    }
}

impl<F> BatchSource for F
where
    F: FnMut(usize, usize) -> Result<Trajectories>,
{
    fn next_batch(&mut self, batch: usize, len: usize) -> Result<Trajectories> {
        self(batch, len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub d_y: f64,
    pub d_yx: f64,
    pub estimate: f64,
}

impl CurvePoint {
    pub fn new(iteration: usize, values: &DvValues) -> Self {
        Self {
            iteration,
            d_y: values.d_y,
            d_yx: values.d_yx,
            estimate: values.estimate(),
        }
    }
}

/// Owns a [`DineModel`] and one Adam state per potential.
#[derive(Debug, Clone)]
pub struct DineTrainer {
    pub model: DineModel,
    opt_y: AdamState,
    opt_yx: AdamState,
    margin: f64,
    floor: f64,
    reference_rng: RngStream,
}

impl DineTrainer {
    pub fn new(model: DineModel, adam: AdamConfig, margin: f64, floor: f64, reference_rng: RngStream) -> Self {
        Self {
            model,
            opt_y: AdamState::new(adam),
            opt_yx: AdamState::new(adam),
            margin,
            floor,
            reference_rng,
        }
    }

    /// Fits the reference box to this batch and draws one reference sample
    /// per output sample.
    pub fn reference_for(&mut self, batch: &Trajectories) -> Result<Array3<f64>> {
        let reference = ReferenceBox::fit(batch.y_rows(), self.margin, self.floor)?;
        Ok(reference.sample(batch.len(), batch.batch(), &mut self.reference_rng))
    }

    /// One ascent step of each potential on its own objective.
    pub fn step(&mut self, batch: &Trajectories) -> Result<DvValues> {
        let y_ref = self.reference_for(batch)?;
        let values = self.model.accumulate_objective_grads(batch, &y_ref)?;
        self.opt_y.update(&mut self.model.y_potential)?;
        self.opt_yx.update(&mut self.model.yx_potential)?;
        Ok(values)
    }
}

/// Trains both potentials for `config.iterations` steps on batches from
/// `source`, returning the per-iteration curve.
pub fn dine_train(
    model: DineModel,
    source: &mut impl BatchSource,
    config: &DineConfig,
) -> Result<(DineModel, Vec<CurvePoint>)> {
    config.validate()?;
    let rng = RngStream::new(config.seed);
    let mut trainer = DineTrainer::new(
        model,
        config.adam(),
        config.reference_margin,
        config.reference_floor,
        rng.split("dine-reference"),
    );
    let mut curve = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = source.next_batch(config.batch_size, config.seq_len)?;
        let values = match trainer.step(&batch) {
            Ok(v) if v.estimate().is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient(_)) => {
                return Err(Error::Divergence {
                    iteration,
                    last_finite: iteration.checked_sub(1),
                })
            }
            Err(e) => return Err(e),
        };
        curve.push(CurvePoint::new(iteration, &values));
    }
    Ok((trainer.model, curve))
}
