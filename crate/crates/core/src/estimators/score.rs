use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::ndgrad::Tensor;
use crate::{Error, Result};

/// Running sufficient statistics of per-sample gradient vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments { n: 0, sum: vec![0.0; dim], sumsq: vec![0.0; dim] }
    }

    pub fn push(&mut self, g: &[f64]) {
        self.n += 1;
        for (i, &x) in g.iter().enumerate() {
            self.sum[i] += x;
            self.sumsq[i] += x * x;
        }
    }

    /// Merges statistics from an independent stream.
    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sumsq[i] += other.sumsq[i];
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// Unbiased per-coordinate sample variance.
    pub fn var(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sumsq)
            .map(|(s, ss)| ((ss - s * s / n) / (n - 1.0)).max(0.0))
            .collect()
    }
}

/// A Monte-Carlo gradient estimate with per-coordinate variance.
#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub grad_mean: Tensor,
    pub grad_var: Tensor,
    pub n_samples: usize,
    pub wall_time: f64,
}

impl EstimatorReport {
    pub fn from_moments(m: &Moments, shape: &[usize], wall_time: f64) -> Result<Self> {
        if m.n < 2 {
            return Err(Error::InvalidArgument("a report needs at least 2 samples".into()));
        }
        Ok(EstimatorReport {
            grad_mean: Tensor::new(shape.to_vec(), m.mean()),
            grad_var: Tensor::new(shape.to_vec(), m.var()),
            n_samples: m.n,
            wall_time,
        })
    }

    /// Standard error of the mean, per coordinate.
    pub fn std_err(&self) -> Tensor {
        let n = self.n_samples as f64;
        self.grad_var.map(|v| (v / n).sqrt())
    }

    /// Largest |mean − exact| / SE over coordinates (SE floored at 1e−300).
    pub fn max_z(&self, exact: &Tensor) -> f64 {
        let se = self.std_err();
        self.grad_mean
            .data()
            .iter()
            .zip(exact.data())
            .zip(se.data())
            .map(|((m, e), s)| {
                let d = (m - e).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / s.max(1e-300)
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn mean_var(&self) -> f64 {
        self.grad_var.sum() / self.grad_var.len() as f64
    }
}

/// Control variate subtracted from the reward.
#[derive(Clone)]
pub enum Baseline {
    None,
    Constant(f64),
    /// Sample-independent function of the distribution parameters.
    Function(Arc<dyn Fn(&Tensor) -> f64 + Send + Sync>),
    /// Exponential moving average of past rewards with the given decay.
    MovingAverage(f64),
    /// Exact expected reward, available only when it can be enumerated.
    Optimal,
}

impl std::fmt::Debug for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Baseline::None => write!(f, "none"),
            Baseline::Constant(c) => write!(f, "constant({c})"),
            Baseline::Function(_) => write!(f, "function"),
            Baseline::MovingAverage(d) => write!(f, "moving-average({d})"),
            Baseline::Optimal => write!(f, "optimal"),
        }
    }
}

impl Baseline {
    pub fn label(&self) -> String {
        match self {
            Baseline::None => "none".into(),
            Baseline::Constant(_) => "constant".into(),
            Baseline::Function(_) => "function".into(),
            Baseline::MovingAverage(_) => "moving-average".into(),
            Baseline::Optimal => "optimal".into(),
        }
    }
}

/// Per-stream baseline state.
#[derive(Clone, Debug)]
pub struct BaselineState {
    kind: Baseline,
    theta: Tensor,
    exact: Option<f64>,
    ema: f64,
}

impl BaselineState {
    /// `exact` is the enumerated expected reward, required by `Optimal`.
    pub fn new(kind: Baseline, theta: &Tensor, exact: Option<f64>) -> Result<Self> {
        if matches!(kind, Baseline::Optimal) && exact.is_none() {
            return Err(Error::MissingOracle("optimal baseline needs the exact expected reward".into()));
        }
        Ok(BaselineState { kind, theta: theta.clone(), exact, ema: 0.0 })
    }

    pub fn value(&self) -> f64 {
        match &self.kind {
            Baseline::None => 0.0,
            Baseline::Constant(c) => *c,
            Baseline::Function(f) => f(&self.theta),
            Baseline::MovingAverage(_) => self.ema,
            Baseline::Optimal => self.exact.unwrap(),
        }
    }

    pub fn observe(&mut self, reward: f64) {
        if let Baseline::MovingAverage(d) = self.kind {
            self.ema = d * self.ema + (1.0 - d) * reward;
        }
    }
}

/// REINFORCE: mean of (reward − b)·∇θ log q(sample) over `n` draws.
///
/// `draw` samples from q, `grad_logq` returns ∇θ log q at a sample, and
/// `reward` scores it. The baseline value used for a draw never depends on
/// that draw, so the estimate is unbiased.
pub fn score_function_grad<S, R: Rng>(
    shape: &[usize],
    mut draw: impl FnMut(&mut R) -> S,
    grad_logq: impl Fn(&S) -> Tensor,
    reward: impl Fn(&S) -> f64,
    baseline: &mut BaselineState,
    n: usize,
    rng: &mut R,
) -> Result<EstimatorReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("score_function_grad needs n >= 2".into()));
    }
    let start = Instant::now();
    let dim: usize = shape.iter().product();
    let mut m = Moments::new(dim);
    let mut term = vec![0.0; dim];
    for _ in 0..n {
        let s = draw(rng);
        let r = reward(&s);
        let b = baseline.value();
        let g = grad_logq(&s);
        for (t, &x) in term.iter_mut().zip(g.data()) {
            *t = (r - b) * x;
        }
        m.push(&term);
        baseline.observe(r);
    }
    EstimatorReport::from_moments(&m, shape, start.elapsed().as_secs_f64())
}
