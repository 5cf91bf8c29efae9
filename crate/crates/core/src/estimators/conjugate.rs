use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::elbo;
use crate::dists::DiagGaussian;
use crate::ndgrad::{Adam, ParamSet, Tensor, Value};
use crate::Result;

const LN_2PI: f64 = 1.8378770664093453;

/// z ~ N(0, 1), x | z ~ N(a·z + b, s²), one observed x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearGaussianToy {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub x: f64,
}

impl LinearGaussianToy {
    pub fn shipped() -> Self {
        LinearGaussianToy { a: 1.5, b: 0.3, s: 0.8, x: 2.0 }
    }

    /// log p(x) = log N(x; b, a² + s²).
    pub fn log_evidence(&self) -> f64 {
        let v = self.a * self.a + self.s * self.s;
        -0.5 * (LN_2PI + v.ln() + (self.x - self.b).powi(2) / v)
    }

    pub fn posterior_var(&self) -> f64 {
        1.0 / (1.0 + self.a * self.a / (self.s * self.s))
    }

    pub fn posterior_mean(&self) -> f64 {
        self.posterior_var() * self.a * (self.x - self.b) / (self.s * self.s)
    }

    pub fn logcond(&self, z: f64) -> f64 {
        let r = self.x - self.a * z - self.b;
        -0.5 * (LN_2PI + (self.s * self.s).ln() + r * r / (self.s * self.s))
    }

    pub fn logcond_value(&self, z: &Value) -> Value {
        let r = z.scale(-self.a).add_const(self.x - self.b);
        r.mul(&r)
            .scale(-0.5 / (self.s * self.s))
            .add_const(-0.5 * (LN_2PI + (self.s * self.s).ln()))
            .sum()
    }

    /// log p(x, z).
    pub fn logjoint(&self, z: f64) -> f64 {
        self.logcond(z) - 0.5 * (LN_2PI + z * z)
    }

    /// KL(N(m, e^{2 log_std}) ‖ exact posterior).
    pub fn kl_to_posterior(&self, m: f64, log_std: f64) -> f64 {
        let (pm, pv) = (self.posterior_mean(), self.posterior_var());
        let qv = (2.0 * log_std).exp();
        0.5 * (pv.ln() - 2.0 * log_std + (qv + (m - pm).powi(2)) / pv - 1.0)
    }
}

/// Outcome of reparameterized ELBO training on the conjugate toy.
#[derive(Clone, Debug, Serialize)]
pub struct ConjugateFit {
    pub mean: f64,
    pub log_std: f64,
    pub final_kl: f64,
    /// First step after which KL to the posterior fell below the threshold.
    pub first_below: Option<usize>,
    pub kl_trace: Vec<f64>,
}

/// Maximizes the single- or multi-sample ELBO by Adam with exponential
/// learning-rate decay from `lr` to `lr / 100` over `steps`. The returned
/// variational parameters are the average of the iterates over the last
/// quarter of training, which removes most of the stochastic jitter.
pub fn fit_conjugate_elbo(
    toy: &LinearGaussianToy,
    steps: usize,
    lr: f64,
    n_samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<ConjugateFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let mid = ps.insert("q.mean", Tensor::vector(vec![0.0]));
    let sid = ps.insert("q.log_std", Tensor::vector(vec![0.0]));
    let mut opt = Adam::new(lr);
    let prior = DiagGaussian::standard(1);
    let mut trace = Vec::with_capacity(steps);
    let mut first_below = None;
    let tail_start = steps - steps / 4;
    let (mut sum_m, mut sum_s, mut n_tail) = (0.0, 0.0, 0usize);
    for step in 0..steps {
        opt.lr = lr * 0.01f64.powf(step as f64 / steps.max(1) as f64);
        let b = ps.bind();
        let q = DiagGaussian::new(b.get(mid).clone(), b.get(sid).clone())?;
        let obj = elbo(|z| toy.logcond_value(z), &q, &prior, n_samples, &mut rng)?;
        obj.neg().backward();
        opt.step(&mut ps, &b.grads());
        let kl = toy.kl_to_posterior(ps.get(mid).item(), ps.get(sid).item());
        if kl < threshold && first_below.is_none() {
            first_below = Some(step + 1);
        }
        trace.push(kl);
        if step >= tail_start {
            sum_m += ps.get(mid).item();
            sum_s += ps.get(sid).item();
            n_tail += 1;
        }
    }
    let (mean, log_std) = if n_tail == 0 {
        (ps.get(mid).item(), ps.get(sid).item())
    } else {
        (sum_m / n_tail as f64, sum_s / n_tail as f64)
    };
    Ok(ConjugateFit {
        mean,
        log_std,
        final_kl: toy.kl_to_posterior(mean, log_std),
        first_below,
        kl_trace: trace,
    })
}
