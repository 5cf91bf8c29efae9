use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::score::{Baseline, BaselineState, EstimatorReport, Moments};
use crate::dists::{argmax, sample_index, PROB_FLOOR};
use crate::ndgrad::{logsumexp_slice, Tensor};
use crate::{Error, Result};

/// Gradient estimators compared by the bench.
#[derive(Clone, Debug)]
pub enum EstimatorKind {
    Reparameterization,
    ScoreFunction(Baseline),
    GumbelSoftmax { tau: f64 },
    StraightThrough { tau: f64 },
}

impl EstimatorKind {
    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Reparameterization => "reparam".into(),
            EstimatorKind::ScoreFunction(b) => format!("reinforce-{}", b.label()),
            EstimatorKind::GumbelSoftmax { tau } => format!("gumbel-softmax-tau{tau}"),
            EstimatorKind::StraightThrough { tau } => format!("straight-through-tau{tau}"),
        }
    }

    /// Whether the estimator is unbiased for the exact gradient.
    pub fn is_unbiased(&self) -> bool {
        matches!(self, EstimatorKind::Reparameterization | EstimatorKind::ScoreFunction(_))
    }
}

/// A toy objective E_q[f] with an exact-gradient oracle.
pub trait BenchObjective: Sync {
    fn name(&self) -> String;
    /// Distribution parameters θ.
    fn theta(&self) -> Tensor;
    /// ∇θ E_q[f], if known in closed form or by enumeration.
    fn exact_gradient(&self) -> Option<Tensor>;
    /// E_q[f], if known.
    fn exact_value(&self) -> Option<f64>;
    /// One per-sample gradient term and its reward, given baseline value `b`.
    fn sample_term(&self, kind: &EstimatorKind, b: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)>;
}

/// E_{z ~ N(μ, σ²)} (z − c)² with θ = (μ, log σ).
#[derive(Clone, Debug)]
pub struct GaussianToy {
    pub mu: f64,
    pub log_sigma: f64,
    pub c: f64,
}

impl GaussianToy {
    pub fn shipped() -> Self {
        GaussianToy { mu: 0.5, log_sigma: -0.2, c: 1.5 }
    }
}

impl BenchObjective for GaussianToy {
    fn name(&self) -> String {
        "gaussian-quadratic".into()
    }

    fn theta(&self) -> Tensor {
        Tensor::vector(vec![self.mu, self.log_sigma])
    }

    fn exact_gradient(&self) -> Option<Tensor> {
        let s2 = (2.0 * self.log_sigma).exp();
        Some(Tensor::vector(vec![2.0 * (self.mu - self.c), 2.0 * s2]))
    }

    fn exact_value(&self) -> Option<f64> {
        Some((self.mu - self.c).powi(2) + (2.0 * self.log_sigma).exp())
    }

    fn sample_term(&self, kind: &EstimatorKind, b: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
        let sigma = self.log_sigma.exp();
        let eps: f64 = StandardNormal.sample(rng);
        let z = self.mu + sigma * eps;
        let f = (z - self.c).powi(2);
        match kind {
            EstimatorKind::Reparameterization => {
                let d = 2.0 * (z - self.c);
                Ok((vec![d, d * sigma * eps], f))
            }
            EstimatorKind::ScoreFunction(_) => {
                let a = f - b;
                Ok((vec![a * eps / sigma, a * (eps * eps - 1.0)], f))
            }
            _ => Err(Error::InvalidArgument(format!(
                "{} does not apply to a continuous latent",
                kind.label()
            ))),
        }
    }
}

/// E_{k ~ softmax(θ)} r_k over a small categorical support.
#[derive(Clone, Debug)]
pub struct CategoricalToy {
    pub logits: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl CategoricalToy {
    /// The shipped five-category toy.
    pub fn shipped() -> Self {
        CategoricalToy {
            logits: vec![0.5, -0.3, 0.1, 1.0, -1.0],
            rewards: vec![1.0, 2.0, 0.5, 3.0, 1.5],
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        let z = logsumexp_slice(&self.logits);
        self.logits.iter().map(|l| (l - z).exp()).collect()
    }

    /// Relaxed sample y = softmax((log p + g)/τ) and the gradient of y·r
    /// with respect to θ: v = y ⊙ (r − y·r)/τ (the log-softmax Jacobian
    /// term vanishes because Σ v = 0).
    fn relaxed(&self, tau: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let z = logsumexp_slice(&self.logits);
        let s: Vec<f64> = self
            .logits
            .iter()
            .map(|l| {
                let u = rng.random::<f64>().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                (l - z - (-u.ln()).ln()) / tau
            })
            .collect();
        let zs = logsumexp_slice(&s);
        let y: Vec<f64> = s.iter().map(|x| (x - zs).exp()).collect();
        let yr: f64 = y.iter().zip(&self.rewards).map(|(a, b)| a * b).sum();
        let v = y.iter().zip(&self.rewards).map(|(yk, rk)| yk * (rk - yr) / tau).collect();
        (y, v)
    }
}

impl BenchObjective for CategoricalToy {
    fn name(&self) -> String {
        format!("categorical-{}", self.logits.len())
    }

    fn theta(&self) -> Tensor {
        Tensor::vector(self.logits.clone())
    }

    fn exact_gradient(&self) -> Option<Tensor> {
        let p = self.probs();
        let pr: f64 = p.iter().zip(&self.rewards).map(|(a, b)| a * b).sum();
        Some(Tensor::vector(p.iter().zip(&self.rewards).map(|(pk, rk)| pk * (rk - pr)).collect()))
    }

    fn exact_value(&self) -> Option<f64> {
        Some(self.probs().iter().zip(&self.rewards).map(|(a, b)| a * b).sum())
    }

    fn sample_term(&self, kind: &EstimatorKind, b: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
        match kind {
            EstimatorKind::ScoreFunction(_) => {
                let p = self.probs();
                let k = sample_index(&p, rng);
                let r = self.rewards[k];
                let g = p
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| (r - b) * (if i == k { 1.0 } else { 0.0 } - pi))
                    .collect();
                Ok((g, r))
            }
            EstimatorKind::GumbelSoftmax { tau } => {
                let (y, v) = self.relaxed(*tau, rng);
                let f = y.iter().zip(&self.rewards).map(|(a, b)| a * b).sum();
                Ok((v, f))
            }
            EstimatorKind::StraightThrough { tau } => {
                let (y, v) = self.relaxed(*tau, rng);
                Ok((v, self.rewards[argmax(&y)]))
            }
            EstimatorKind::Reparameterization => Err(Error::InvalidArgument(
                "reparameterization does not apply to a discrete latent".into(),
            )),
        }
    }
}

/// One bench table row.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub estimator: String,
    /// max over coordinates of |MC mean − exact|.
    pub bias: f64,
    /// mean over coordinates of the per-sample variance.
    pub mean_var: f64,
    pub n_samples: usize,
    pub wall_time_s: f64,
    /// max over coordinates of |MC mean − exact| / SE.
    pub max_z: f64,
    pub unbiased: bool,
    #[serde(skip)]
    pub report: EstimatorReport,
}

/// Runs every estimator for `n_trials` independent streams of `n_samples`
/// draws and compares against the exact gradient. Trials run concurrently;
/// statistics are merged in trial order so results depend only on `seed`.
pub fn estimator_bench(
    objective: &dyn BenchObjective,
    estimators: &[EstimatorKind],
    n_trials: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let exact = objective
        .exact_gradient()
        .ok_or_else(|| Error::MissingOracle(format!("objective {} has no exact gradient", objective.name())))?;
    if n_trials == 0 || n_samples == 0 || n_trials * n_samples < 2 {
        return Err(Error::InvalidArgument("bench needs at least 2 draws in total".into()));
    }
    let theta = objective.theta();
    let mut rows = Vec::with_capacity(estimators.len());
    for (e, kind) in estimators.iter().enumerate() {
        let start = Instant::now();
        let baseline_kind = match kind {
            EstimatorKind::ScoreFunction(b) => b.clone(),
            _ => Baseline::None,
        };
        let trials: Vec<Result<Moments>> = (0..n_trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((e as u64) << 32) | t as u64);
                let mut state = BaselineState::new(baseline_kind.clone(), &theta, objective.exact_value())?;
                let mut m = Moments::new(theta.len());
                for _ in 0..n_samples {
                    let (g, r) = objective.sample_term(kind, state.value(), &mut rng)?;
                    m.push(&g);
                    state.observe(r);
                }
                Ok(m)
            })
            .collect();
        let mut total = Moments::new(theta.len());
        for t in trials {
            total.merge(&t?);
        }
        let report = EstimatorReport::from_moments(&total, theta.shape(), start.elapsed().as_secs_f64())?;
        rows.push(BenchRow {
            estimator: kind.label(),
            bias: report.grad_mean.max_abs_diff(&exact),
            mean_var: report.mean_var(),
            n_samples: report.n_samples,
            wall_time_s: report.wall_time,
            max_z: report.max_z(&exact),
            unbiased: kind.is_unbiased(),
            report,
        });
    }
    Ok(rows)
}

/// Writes the bench table as CSV with columns
/// `estimator,bias,mean_var,n_samples,wall_time_s`. With `timing = false`
/// the wall-time column is written as 0 so output is reproducible.
pub fn write_bench_csv(rows: &[BenchRow], mut w: impl Write, timing: bool) -> std::io::Result<()> {
    writeln!(w, "estimator,bias,mean_var,n_samples,wall_time_s")?;
    for r in rows {
        let t = if timing { r.wall_time_s } else { 0.0 };
        writeln!(w, "{},{},{},{},{}", r.estimator, r.bias, r.mean_var, r.n_samples, t)?;
    }
    Ok(())
}
