use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dists::{bernoulli_kl, BernoulliMF};
use crate::estimators::{cmi_objective, score_function_grad, soft_select_logprob, Baseline, BaselineState};
use crate::ndgrad::{accumulate, Adam, Tensor, Value};
use crate::segmodel::{prior_logits, select_loglik, selector_logits, Pair, SegModel};
use crate::{Error, Result};

/// ε as a fraction of the input length n, for extractive table-to-text data.
pub const EPS_RATE_WIKIBIO: f64 = 0.15;
/// ε as a fraction of n for sentence compression data.
pub const EPS_RATE_GIGAWORD: f64 = 0.25;
/// Redraws allowed when a sampled mask selects nothing.
pub const MAX_MASK_REDRAWS: usize = 10;

/// Settings of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VrsConfig {
    /// ε = eps_rate · n.
    pub eps_rate: f64,
    pub lambda: f64,
    /// Mask samples per example, at least 2.
    pub n_samples: usize,
    /// Warm start: fit the selector to token-overlap pseudo labels instead
    /// of sampling.
    pub pretrain: bool,
}

impl Default for VrsConfig {
    fn default() -> Self {
        VrsConfig { eps_rate: EPS_RATE_WIKIBIO, lambda: 1.0, n_samples: 2, pretrain: false }
    }
}

/// Draws from q conditioned on selecting at least one position: up to
/// `MAX_MASK_REDRAWS` redraws after an empty draw, then an error.
pub fn draw_nonempty_mask(q: &BernoulliMF, rng: &mut impl Rng) -> Result<Vec<f64>> {
    for _ in 0..=MAX_MASK_REDRAWS {
        let m = q.sample(rng);
        if m.iter().any(|&x| x > 0.0) {
            return Ok(m);
        }
    }
    Err(Error::InvalidArgument(format!("selector drew an empty mask {} times in a row", MAX_MASK_REDRAWS + 1)))
}

/// ∇_logits log q(β | β ≠ 0) = β − σ / (1 − q(0)).
fn grad_log_q_nonempty(probs: &[f64], mask: &[f64]) -> Tensor {
    let q0: f64 = probs.iter().map(|p| 1.0 - p).product();
    let z = 1.0 - q0;
    Tensor::vector(mask.iter().zip(probs).map(|(b, p)| b - p / z).collect())
}

/// Objective at one mask: log p(Y | X, β) − KL − λ·|KL − ε|. With λ = 0
/// this is the plain VRS bound.
pub fn vrs_objective(loglik: &Value, kl: &Value, eps: f64, lambda: f64) -> Result<Value> {
    cmi_objective(&loglik.sub(kl), kl, eps, lambda)
}

/// Exact objective by enumerating every nonempty mask, for n ≤ 16.
pub fn vrs_objective_exact(
    loglik: impl Fn(&[f64]) -> f64,
    q: &BernoulliMF,
    prior: &BernoulliMF,
    eps: f64,
    lambda: f64,
) -> Result<f64> {
    let n = q.len();
    if n == 0 || n > 16 {
        return Err(Error::InvalidArgument(format!("enumeration needs 1 <= n <= 16, got {n}")));
    }
    let probs = q.probs().data().data().to_vec();
    let kl = bernoulli_kl(q, prior)?.item();
    let q0: f64 = probs.iter().map(|p| 1.0 - p).product();
    let mut e = 0.0;
    for bits in 1u32..(1 << n) {
        let mask: Vec<f64> = (0..n).map(|i| ((bits >> i) & 1) as f64).collect();
        let w: f64 = mask.iter().zip(&probs).map(|(b, p)| if *b > 0.0 { *p } else { 1.0 - p }).product();
        e += w * loglik(&mask);
    }
    Ok(e / (1.0 - q0) - kl - lambda * (kl - eps).abs())
}

/// Stochastic objective as a surrogate graph value.
pub struct VrsSurrogate {
    /// Value is the sample estimate of the objective; its gradient is the
    /// estimator: pathwise for the likelihood parameters and the KL,
    /// REINFORCE with a soft-select baseline for the selector logits.
    pub value: Value,
    /// Mean log-likelihood over the drawn masks.
    pub loglik: f64,
    pub kl: f64,
    /// Mean fraction of positions selected.
    pub selected: f64,
}

/// `loglik` scores a mask given as a graph value; hard masks are passed as
/// constants and the baseline evaluates it once at the mean mask.
pub fn vrs_surrogate<R: Rng>(
    loglik: impl Fn(&Value) -> Value,
    q: &BernoulliMF,
    prior: &BernoulliMF,
    eps: f64,
    lambda: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<VrsSurrogate> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("vrs needs at least 2 mask samples".into()));
    }
    let n = q.len();
    let probs = q.probs().data().data().to_vec();
    let mut masks = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        masks.push(draw_nonempty_mask(q, rng)?);
    }
    let base = soft_select_logprob(&loglik, q).item();
    let mut state = BaselineState::new(Baseline::Constant(base), q.logits.data(), None)?;
    let terms: RefCell<Vec<Value>> = RefCell::new(Vec::with_capacity(n_samples));
    let mut pending = masks.iter();
    let report = score_function_grad(
        &[n],
        |_: &mut R| pending.next().expect("one mask per draw").clone(),
        |m: &Vec<f64>| grad_log_q_nonempty(&probs, m),
        |m: &Vec<f64>| {
            let l = loglik(&Value::constant(Tensor::vector(m.clone())));
            let r = l.item();
            terms.borrow_mut().push(l);
            r
        },
        &mut state,
        n_samples,
        rng,
    )?;
    let terms = terms.into_inner();
    let mean_ll = Value::concat(&terms.iter().map(|t| t.reshape(&[1])).collect::<Vec<_>>(), 0).mean();
    let kl = bernoulli_kl(q, prior)?;
    let obj = vrs_objective(&mean_ll, &kl, eps, lambda)?;
    let reinforce = q.logits.dot(&Value::constant(report.grad_mean.clone()));
    let reinforce = reinforce.add_const(-reinforce.item());
    let selected = masks.iter().map(|m| m.iter().sum::<f64>() / n as f64).sum::<f64>() / n_samples as f64;
    Ok(VrsSurrogate { loglik: mean_ll.item(), kl: kl.item(), selected, value: obj.add(&reinforce) })
}

/// Per-step means over the batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VrsStepLog {
    pub objective: f64,
    pub loglik: f64,
    pub kl: f64,
    pub selected: f64,
}

/// Source positions whose token occurs in the target; all positions when
/// none does.
pub fn overlap_labels(src: &[usize], y: &[usize]) -> Vec<f64> {
    let l: Vec<f64> = src.iter().map(|t| if y.contains(t) { 1.0 } else { 0.0 }).collect();
    if l.iter().any(|&x| x > 0.0) {
        l
    } else {
        vec![1.0; src.len()]
    }
}

/// One Adam step on a batch. The generator, selector and prior share one
/// parameter set; the batch gradient is the mean over examples.
pub fn vrs_train_step<R: Rng>(
    model: &mut SegModel,
    opt: &mut Adam,
    batch: &[Pair],
    cfg: &VrsConfig,
    rng: &mut R,
) -> Result<VrsStepLog> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = model.params.zeros_like();
    let mut log = VrsStepLog { objective: 0.0, loglik: 0.0, kl: 0.0, selected: 0.0 };
    for p in batch {
        let b = model.params.bind();
        let enc = model.encode(&b, &p.rs);
        let q = BernoulliMF::new(selector_logits(model, &b, &enc, &p.y));
        let prior = BernoulliMF::new(prior_logits(model, &b, &enc));
        let loss = if cfg.pretrain {
            let labels = overlap_labels(&enc.src, &p.y);
            let mv = Value::constant(Tensor::vector(labels.clone()));
            let ll = select_loglik(model, &b, &enc, &mv, &p.y);
            log.loglik += ll.item();
            log.selected += labels.iter().sum::<f64>() / labels.len() as f64;
            log.objective += ll.item();
            ll.add(&q.log_prob(&labels)).add(&prior.log_prob(&labels)).neg()
        } else {
            let eps = cfg.eps_rate * enc.src.len() as f64;
            let s = vrs_surrogate(
                |m: &Value| select_loglik(model, &b, &enc, m, &p.y),
                &q,
                &prior,
                eps,
                cfg.lambda,
                cfg.n_samples,
                rng,
            )?;
            log.objective += s.value.item();
            log.loglik += s.loglik;
            log.kl += s.kl;
            log.selected += s.selected;
            s.value.neg()
        };
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("vrs loss {}", loss.item())));
        }
        loss.backward();
        accumulate(&mut grads, &b.grads());
    }
    let k = batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_assign(1.0 / k));
    opt.step(&mut model.params, &grads);
    log.objective /= k;
    log.loglik /= k;
    log.kl /= k;
    log.selected /= k;
    Ok(log)
}
