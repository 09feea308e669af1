use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::RngStream;

/// A batch of paired input/output sequences, stored time-major as
/// `(T, batch, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub x: Array3<f64>,
    pub y: Array3<f64>,
}

impl Trajectories {
    pub fn new(x: Array3<f64>, y: Array3<f64>) -> Result<Self> {
        let (tx, bx, _) = x.dim();
        let (ty, by, _) = y.dim();
        if tx != ty || bx != by {
            return Err(Error::Shape {
                context: "trajectory x/y",
                expected: vec![tx, bx],
                found: vec![ty, by],
            });
        }
        if tx == 0 || bx == 0 {
            return Err(Error::Empty("trajectories"));
        }
        Ok(Self {
            x: standard(x),
            y: standard(y),
        })
    }

    pub fn len(&self) -> usize {
        self.x.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.x.dim().1
    }

    pub fn x_dim(&self) -> usize {
        self.x.dim().2
    }

    pub fn y_dim(&self) -> usize {
        self.y.dim().2
    }

    pub fn samples(&self) -> usize {
        self.len() * self.batch()
    }

    /// Cuts one contiguous realization `(n, d)` into `n / window` disjoint
    /// windows; a trailing partial window is dropped.
    pub fn from_series(x: ArrayView2<f64>, y: ArrayView2<f64>, window: usize) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::LengthMismatch {
                context: "series x/y rows",
                left: x.nrows(),
                right: y.nrows(),
            });
        }
        if window == 0 {
            return Err(Error::InvalidParameter("window length must be positive".into()));
        }
        let count = x.nrows() / window;
        if count == 0 {
            return Err(Error::Empty("series shorter than one window"));
        }
        let starts: Vec<usize> = (0..count).map(|k| k * window).collect();
        Ok(Self::windows(x, y, &starts, window))
    }

    pub(crate) fn windows(x: ArrayView2<f64>, y: ArrayView2<f64>, starts: &[usize], window: usize) -> Self {
        let gather = |src: ArrayView2<f64>| {
            let mut out = Array3::zeros((window, starts.len(), src.ncols()));
            for (b, &s0) in starts.iter().enumerate() {
                out.slice_mut(s![.., b, ..]).assign(&src.slice(s![s0..s0 + window, ..]));
            }
            out
        };
        Self {
            x: gather(x),
            y: gather(y),
        }
    }

    /// Sequences `range` of the batch.
    pub fn select(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            x: standard(self.x.slice(s![.., range.clone(), ..]).to_owned()),
            y: standard(self.y.slice(s![.., range, ..]).to_owned()),
        }
    }

    /// Re-pairs x-sequences with randomly permuted y-sequences, destroying
    /// any dependence between them while keeping both marginals.
    pub fn shuffled_pairing(&self, rng: &mut RngStream) -> Self {
        let mut order: Vec<usize> = (0..self.batch()).collect();
        rng.shuffle(&mut order);
        let y = standard(self.y.select(Axis(1), &order));
        Self { x: self.x.clone(), y }
    }

    /// All samples of `y` flattened to `(T * batch, dim)`.
    pub fn y_rows(&self) -> ArrayView2<'_, f64> {
        flatten(&self.y)
    }

    pub fn x_rows(&self) -> ArrayView2<'_, f64> {
        flatten(&self.x)
    }

    /// Mean of `x²` over every sample and dimension.
    pub fn mean_square_x(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>() / self.x.len() as f64
    }

    /// Flattens back into one series of `(T * batch, dim)` rows, sequence by
    /// sequence.
    pub fn to_series(&self) -> (Array2<f64>, Array2<f64>) {
        let series = |a: &Array3<f64>| {
            let (t, b, d) = a.dim();
            let mut out = Array2::zeros((t * b, d));
            for seq in 0..b {
                out.slice_mut(s![seq * t..(seq + 1) * t, ..]).assign(&a.slice(s![.., seq, ..]));
            }
            out
        };
        (series(&self.x), series(&self.y))
    }
}

fn standard(a: Array3<f64>) -> Array3<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn flatten(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (t, b, d) = a.dim();
    a.view()
        .into_shape_with_order((t * b, d))
        .expect("standard layout trajectory")
}
