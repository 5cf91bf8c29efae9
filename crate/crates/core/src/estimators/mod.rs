//! Latent-variable training objectives, stochastic-gradient estimators and
//! the schedules used against posterior collapse.

mod bench;
mod conjugate;
mod score;

pub use bench::{
    estimator_bench, write_bench_csv, BenchObjective, BenchRow, CategoricalToy, EstimatorKind,
    GaussianToy,
};
pub use conjugate::{fit_conjugate_elbo, ConjugateFit, LinearGaussianToy};
pub use score::{score_function_grad, Baseline, BaselineState, EstimatorReport, Moments};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dists::{bernoulli_kl, gaussian_kl, gaussian_rsample, BernoulliMF, DiagGaussian};
use crate::ndgrad::{logsumexp_slice, Tensor, Value};
use crate::{Error, Result};

/// (1/n) Σ log p(x | zᵢ) with zᵢ drawn from the prior: a Jensen lower bound
/// on log p(x).
pub fn prior_mc_bound(
    logcond: impl Fn(&Tensor) -> f64,
    prior: &DiagGaussian,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("prior_mc_bound needs n >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n {
        let z = gaussian_rsample(prior, &prior.noise(rng))?;
        total += logcond(z.data());
    }
    Ok(total / n as f64)
}

/// Reparameterized ELBO estimate (1/n) Σ log p(x | zᵢ) − KL(q‖prior),
/// zᵢ = rsample(q, εᵢ).
pub fn elbo(
    logcond: impl Fn(&Value) -> Value,
    q: &DiagGaussian,
    prior: &DiagGaussian,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Value> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("elbo needs n_samples >= 1".into()));
    }
    let mut rec: Option<Value> = None;
    for _ in 0..n_samples {
        let z = gaussian_rsample(q, &q.noise(rng))?;
        let l = logcond(&z);
        rec = Some(match rec {
            None => l,
            Some(r) => r.add(&l),
        });
    }
    let rec = rec.unwrap().scale(1.0 / n_samples as f64);
    Ok(rec.sub(&gaussian_kl(q, prior)?))
}

/// log (1/n) Σ p(x, zᵢ)/q(zᵢ), zᵢ ~ q: the importance-sampled evidence
/// estimate, which upper-bounds the ELBO in expectation.
pub fn importance_log_evidence(
    logjoint: impl Fn(&Tensor) -> f64,
    q: &DiagGaussian,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("importance estimate needs n >= 1".into()));
    }
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let z = gaussian_rsample(q, &q.noise(rng))?;
        w.push(logjoint(z.data()) - q.log_prob(&z).item());
    }
    Ok(logsumexp_slice(&w) - (n as f64).ln())
}

/// Log-likelihood at the mean mask β = γ: the soft-select approximation
/// of E_β log p(Y | X, β), one evaluation.
pub fn soft_select_logprob(loglik: impl Fn(&Value) -> Value, gamma: &BernoulliMF) -> Value {
    loglik(&gamma.probs())
}

/// Single-sample VRS bound log p(Y | X, β) − KL(q‖prior) at a mask β ~ q.
pub fn vrs_bound(
    loglik_hard: impl Fn(&[f64]) -> Value,
    q: &BernoulliMF,
    prior: &BernoulliMF,
    sample: &[f64],
) -> Result<Value> {
    if sample.len() != q.len() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} coordinates",
            sample.len(),
            q.len()
        )));
    }
    Ok(loglik_hard(sample).sub(&bernoulli_kl(q, prior)?))
}

/// loglik − λ·|kl − eps|, with zero subgradient at kl = eps.
pub fn cmi_objective(loglik: &Value, kl: &Value, eps: f64, lambda: f64) -> Result<Value> {
    if lambda < 0.0 || eps < 0.0 {
        return Err(Error::InvalidArgument("cmi_objective needs lambda >= 0 and eps >= 0".into()));
    }
    Ok(loglik.sub(&kl.add_const(-eps).abs().scale(lambda)))
}

/// nll + λ·|γ̄ − α|, a loss to minimize.
pub fn ratio_penalty(nll: &Value, gamma_mean: &Value, alpha: f64, lambda: f64) -> Result<Value> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("ratio target alpha must be in (0,1), got {alpha}")));
    }
    Ok(nll.add(&gamma_mean.add_const(-alpha).abs().scale(lambda)))
}

/// Selecting-ratio defaults for extractive data.
pub const RATIO_ALPHA_WIKIBIO: f64 = 0.35;
pub const RATIO_ALPHA_GIGAWORD: f64 = 0.25;

/// Linear ramp 0 → 1 over `horizon` steps, 1 afterwards.
pub fn kl_anneal_weight(step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return 1.0;
    }
    (step as f64 / horizon as f64).min(1.0)
}

/// Teacher-forcing probability max(1 − i/k, 0).
pub fn scheduled_sampling_p(i: u64, k: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("scheduled sampling horizon k must be > 0".into()));
    }
    Ok((1.0 - i as f64 / k as f64).max(0.0))
}

/// Which quantity a schedule produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearKlAnneal,
    ScheduledSampling,
    TemperatureDecay,
}

/// A step-indexed schedule. Weight schedules map into [floor, ceiling] ⊆
/// [0, 1]; temperature decay interpolates linearly from `ceiling` down to
/// `floor` over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub kind: ScheduleKind,
    pub horizon: u64,
    pub floor: f64,
    pub ceiling: f64,
}

impl AnnealSchedule {
    pub fn kl_anneal(horizon: u64) -> Self {
        AnnealSchedule { kind: ScheduleKind::LinearKlAnneal, horizon, floor: 0.0, ceiling: 1.0 }
    }

    pub fn scheduled_sampling(horizon: u64) -> Self {
        AnnealSchedule { kind: ScheduleKind::ScheduledSampling, horizon, floor: 0.0, ceiling: 1.0 }
    }

    pub fn temperature(start: f64, end: f64, steps: u64) -> Self {
        AnnealSchedule { kind: ScheduleKind::TemperatureDecay, horizon: steps, floor: end, ceiling: start }
    }

    pub fn value(&self, step: u64) -> f64 {
        let frac = if self.horizon == 0 { 1.0 } else { (step as f64 / self.horizon as f64).min(1.0) };
        match self.kind {
            ScheduleKind::LinearKlAnneal => {
                let w = self.floor + (self.ceiling - self.floor) * frac;
                w.clamp(0.0, 1.0)
            }
            ScheduleKind::ScheduledSampling => {
                let w = self.ceiling - (self.ceiling - self.floor) * frac;
                w.clamp(0.0, 1.0)
            }
            ScheduleKind::TemperatureDecay => self.ceiling + (self.floor - self.ceiling) * frac,
        }
    }
}

/// Free-bits granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreeBitsMode {
    PerDim,
    Total,
}

/// Σᵢ max(klᵢ, eps) per dimension, or max(Σ kl, eps) in total; no gradient
/// flows where the floor is active, ties pass through.
pub fn free_bits_kl(kl_per_dim: &Value, eps: f64, mode: FreeBitsMode) -> Value {
    match mode {
        FreeBitsMode::PerDim => kl_per_dim.max_const(eps).sum(),
        FreeBitsMode::Total => kl_per_dim.sum().max_const(eps),
    }
}

/// Replaces each non-first token by `unk` with probability 1 − keep_rate.
pub fn word_dropout(tokens: &[usize], keep_rate: f64, unk: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&keep_rate) {
        return Err(Error::InvalidArgument(format!("keep_rate must be in [0,1], got {keep_rate}")));
    }
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i == 0 || rng.random::<f64>() < keep_rate {
                t
            } else {
                unk
            }
        })
        .collect())
}

/// Bag-of-words loss −Σ_t log softmax(f(z))[y_t].
pub fn bow_loss(z: &Value, target: &[usize], inputless_logits: impl Fn(&Value) -> Value) -> Result<Value> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("bow_loss needs a nonempty target".into()));
    }
    let logp = inputless_logits(z).log_softmax();
    let v = logp.len();
    if let Some(&bad) = target.iter().find(|&&t| t >= v) {
        return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {v}")));
    }
    Ok(logp.gather(target.to_vec(), &[target.len()]).sum().neg())
}
