//! Latent-variable families: diagonal Gaussians, mean-field Bernoullis and
//! categoricals, with reparameterized sampling, relaxations and closed-form
//! divergences. All functions are pure; callers own the random streams.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndgrad::{Tensor, Value};
use crate::{Error, Result};

/// Floor applied to Bernoulli probabilities and uniform noise.
pub const PROB_FLOOR: f64 = 1e-7;
/// Bounds applied to Gaussian log standard deviations.
pub const LOG_STD_BOUNDS: (f64, f64) = (-10.0, 10.0);

/// Diagonal Gaussian N(mean, diag(exp(2 log_std))).
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    pub mean: Value,
    pub log_std: Value,
}

impl DiagGaussian {
    /// Builds the family, clamping `log_std` into [`LOG_STD_BOUNDS`].
    pub fn new(mean: Value, log_std: Value) -> Result<Self> {
        if mean.shape() != log_std.shape() || mean.is_empty() {
            return Err(Error::Shape(format!(
                "gaussian mean {:?} vs log_std {:?}",
                mean.shape(),
                log_std.shape()
            )));
        }
        let log_std = log_std.clamp(LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1);
        Ok(DiagGaussian { mean, log_std })
    }

    /// Constant standard normal of dimension `d`.
    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mean: Value::constant(Tensor::zeros(&[d])),
            log_std: Value::constant(Tensor::zeros(&[d])),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// log density at `z`, summed over dimensions.
    pub fn log_prob(&self, z: &Value) -> Value {
        let var2 = self.log_std.scale(2.0).exp();
        let diff = z.sub(&self.mean);
        let quad = diff.mul(&diff).div(&var2).scale(-0.5);
        let norm = self.log_std.add_const(0.5 * (2.0 * std::f64::consts::PI).ln());
        quad.sub(&norm).sum()
    }

    /// Draws standard-normal noise of the right dimension.
    pub fn noise(&self, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[self.dim()], |_| StandardNormal.sample(rng))
    }
}

/// Per-dimension KL(q‖p) for diagonal Gaussians.
pub fn gaussian_kl_per_dim(q: &DiagGaussian, p: &DiagGaussian) -> Result<Value> {
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!(
            "gaussian_kl dimension {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    // log σp − log σq + (σq² + (μq − μp)²) / (2σp²) − ½
    let vq = q.log_std.scale(2.0).exp();
    let vp = p.log_std.scale(2.0).exp();
    let d = q.mean.sub(&p.mean);
    let ratio = vq.add(&d.mul(&d)).div(&vp.scale(2.0));
    Ok(p.log_std.sub(&q.log_std).add(&ratio).add_const(-0.5))
}

/// KL(q‖p) for diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<Value> {
    Ok(gaussian_kl_per_dim(q, p)?.sum())
}

/// z = mean + exp(log_std) ⊙ eps, differentiable in mean and log_std.
pub fn gaussian_rsample(q: &DiagGaussian, eps: &Tensor) -> Result<Value> {
    if eps.len() != q.dim() {
        return Err(Error::Shape(format!(
            "rsample noise of length {} for dimension {}",
            eps.len(),
            q.dim()
        )));
    }
    let eps = Value::constant(eps.clone().reshaped(q.mean.shape()));
    Ok(q.mean.add(&q.log_std.exp().mul(&eps)))
}

/// Independent Bernoulli coordinates stored as logits.
#[derive(Clone, Debug)]
pub struct BernoulliMF {
    pub logits: Value,
}

impl BernoulliMF {
    pub fn new(logits: Value) -> Self {
        BernoulliMF { logits }
    }

    /// Constant family from probabilities (clamped interior).
    pub fn from_probs(probs: &[f64]) -> Self {
        let logits: Vec<f64> = probs
            .iter()
            .map(|&p| {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                (p / (1.0 - p)).ln()
            })
            .collect();
        BernoulliMF {
            logits: Value::vector(&logits),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Probabilities clamped into [PROB_FLOOR, 1 − PROB_FLOOR].
    pub fn probs(&self) -> Value {
        self.logits.sigmoid().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }

    /// log q(mask) = Σ log σ(±logit).
    pub fn log_prob(&self, mask: &[f64]) -> Value {
        assert_eq!(mask.len(), self.len(), "mask length");
        let m = Value::vector(mask);
        let one_minus = Value::vector(&mask.iter().map(|x| 1.0 - x).collect::<Vec<_>>());
        let on = self.logits.log_sigmoid().mul(&m);
        let off = self.logits.neg().log_sigmoid().mul(&one_minus);
        on.add(&off).sum()
    }

    /// Independent draws, 1.0 for selected coordinates.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.probs()
            .data()
            .data()
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Σᵢ qᵢ ln(qᵢ/pᵢ) + (1−qᵢ) ln((1−qᵢ)/(1−pᵢ)) with clamped probabilities.
pub fn bernoulli_kl(q: &BernoulliMF, p: &BernoulliMF) -> Result<Value> {
    if q.len() != p.len() {
        return Err(Error::Shape(format!(
            "bernoulli_kl length {} vs {}",
            q.len(),
            p.len()
        )));
    }
    let (qp, pp) = (q.probs(), p.probs());
    let qn = qp.neg().add_const(1.0);
    let pn = pp.neg().add_const(1.0);
    let on = qp.mul(&qp.ln().sub(&pp.ln()));
    let off = qn.mul(&qn.ln().sub(&pn.ln()));
    Ok(on.add(&off).sum())
}

/// Unnormalized logits over categories.
#[derive(Clone, Debug)]
pub struct CategoricalLogits {
    pub logits: Value,
}

impl CategoricalLogits {
    pub fn new(logits: Value) -> Self {
        CategoricalLogits { logits }
    }

    pub fn probs(&self) -> Value {
        self.logits.softmax()
    }

    pub fn log_probs(&self) -> Value {
        self.logits.log_softmax()
    }

    /// Exact draw by inversion.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        sample_index(self.probs().data().data(), rng)
    }
}

/// Draws an index from a probability vector by inversion.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Uniform noise clamped into the open interval used by Gumbel sampling.
pub fn uniform_noise(n: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[n], |_| rng.random::<f64>())
}

/// yᵢ = softmax((log πᵢ + gᵢ)/τ), gᵢ = −log(−log uᵢ).
pub fn gumbel_softmax(pi: &CategoricalLogits, tau: f64, u: &Tensor) -> Result<Value> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if u.len() != pi.logits.len() {
        return Err(Error::Shape(format!(
            "gumbel noise length {} for {} categories",
            u.len(),
            pi.logits.len()
        )));
    }
    let g = u.map(|x| {
        let x = x.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        -(-x.ln()).ln()
    });
    let g = Value::constant(g.reshaped(pi.logits.shape()));
    Ok(pi.log_probs().add(&g).scale(1.0 / tau).softmax())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One-hot at argmax(y_soft) forward, gradient of `y_soft` backward.
pub fn straight_through(y_soft: &Value) -> Value {
    let k = argmax(y_soft.data().data());
    let hard = Tensor::from_fn(y_soft.shape(), |i| if i == k { 1.0 } else { 0.0 });
    y_soft.straight_through(hard)
}

/// Bernoulli variant: forward 1(α > 0.5) per coordinate, identity gradient.
pub fn bernoulli_straight_through(alpha: &Value) -> Value {
    let hard = alpha.data().map(|a| if a > 0.5 { 1.0 } else { 0.0 });
    alpha.straight_through(hard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::gradcheck;
    use proptest::prelude::*;
    use rand::SeedableRng as _;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn gauss(mean: &[f64], log_std: &[f64]) -> DiagGaussian {
        DiagGaussian::new(Value::vector(mean), Value::vector(log_std)).unwrap()
    }

    #[test]
    fn gaussian_kl_examples() {
        let q = gauss(&[0.3, -1.0], &[0.2, -0.4]);
        assert!(gaussian_kl(&q, &q).unwrap().item().abs() < 1e-15);
        let q = gauss(&[1.0, 2.0], &[0.0, 0.0]);
        let kl = gaussian_kl(&q, &DiagGaussian::standard(2)).unwrap().item();
        assert!((kl - 2.5).abs() < 1e-12);
        let q = gauss(&[0.0], &[2f64.ln()]);
        let kl = gaussian_kl(&q, &DiagGaussian::standard(1)).unwrap().item();
        assert!((kl - (1.5 - 2f64.ln())).abs() < 1e-12);
        assert!(gaussian_kl(&q, &DiagGaussian::standard(2)).is_err());
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = 2.0 * e;
            // log q − log p with q = N(0, 4), p = N(0, 1)
            let d = -2f64.ln() - z * z / 8.0 + z * z / 2.0;
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - (1.5 - 2f64.ln())).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn rsample_examples() {
        let q = gauss(&[0.5, -1.0], &[0.3, 0.1]);
        let z = gaussian_rsample(&q, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(z.data().data(), &[0.5, -1.0]);
        let floor = gauss(&[0.5], &[-1e6]);
        let z = gaussian_rsample(&floor, &Tensor::vector(vec![3.0])).unwrap();
        assert!((z.item() - 0.5).abs() < 1e-3);
        assert!(gaussian_rsample(&q, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn rsample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = gauss(&[1.5], &[-0.3]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_rsample(&q, &q.noise(&mut rng)).unwrap().item())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = (-0.6f64).exp();
        assert!((mean - 1.5).abs() <= 3.0 * (true_var / n as f64).sqrt());
        // SE of sample variance for a normal: var·sqrt(2/(n−1))
        assert!((var - true_var).abs() <= 3.0 * true_var * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn rsample_gradient_flows() {
        let mean = Value::param(Tensor::vector(vec![0.1]));
        let ls = Value::param(Tensor::vector(vec![0.2]));
        let q = DiagGaussian::new(mean.clone(), ls.clone()).unwrap();
        gaussian_rsample(&q, &Tensor::vector(vec![0.7])).unwrap().sum().backward();
        assert_eq!(mean.grad().item(), 1.0);
        assert!((ls.grad().item() - 0.2f64.exp() * 0.7).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_kl_examples() {
        let q = BernoulliMF::from_probs(&[0.75]);
        let p = BernoulliMF::from_probs(&[0.5]);
        let kl = bernoulli_kl(&q, &p).unwrap().item();
        let exact = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - exact).abs() < 1e-12);
        // two-outcome expectation of log q/p
        let direct: f64 = [(0.75, 0.5), (0.25, 0.5)]
            .iter()
            .map(|&(qv, pv): &(f64, f64)| qv * (qv / pv).ln())
            .sum();
        assert!((kl - direct).abs() < 1e-12);
        let rev = bernoulli_kl(&p, &q).unwrap().item();
        assert!((rev - kl).abs() > 1e-3);
        assert!(bernoulli_kl(&q, &q).unwrap().item().abs() < 1e-15);

        let edge = BernoulliMF::from_probs(&[1.0]);
        let kl = bernoulli_kl(&edge, &p).unwrap().item();
        assert!(kl.is_finite() && (kl - 2f64.ln()).abs() < 1e-5);
        let zero = BernoulliMF::new(Value::vector(&[f64::NEG_INFINITY]));
        assert!(bernoulli_kl(&zero, &edge).unwrap().item().is_finite());
    }

    #[test]
    fn gumbel_softmax_on_simplex_and_rejects_bad_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pi = CategoricalLogits::new(Value::vector(&[0.2, -1.0, 3.0, 0.0]));
        for tau in [0.05, 0.5, 1.0, 5.0] {
            let y = gumbel_softmax(&pi, tau, &uniform_noise(4, &mut rng)).unwrap();
            assert!((y.data().sum() - 1.0).abs() < 1e-12);
        }
        assert!(gumbel_softmax(&pi, 0.0, &uniform_noise(4, &mut rng)).is_err());
        let edge = Tensor::vector(vec![0.0, 1.0, 0.5, 0.5]);
        assert!(gumbel_softmax(&pi, 1.0, &edge).unwrap().data().all_finite());
    }

    #[test]
    fn gumbel_max_law_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi = CategoricalLogits::new(Value::vector(&[0.5, -0.2, 1.0, 0.0]));
        let probs = pi.probs().data().clone();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let y = gumbel_softmax(&pi, 1.0, &uniform_noise(4, &mut rng)).unwrap();
            counts[argmax(y.data().data())] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(probs.data())
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let pval = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(pval > 0.01, "chi2 {stat}, p {pval}");
    }

    fn near_one_hot_rate(tau: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = CategoricalLogits::new(Value::vector(&[0.0, 0.0, 0.0]));
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| {
                let y = gumbel_softmax(&pi, tau, &uniform_noise(3, &mut rng)).unwrap();
                y.data().data().iter().cloned().fold(0.0, f64::max) > 0.999
            })
            .count();
        hits as f64 / n as f64
    }

    #[test]
    fn low_temperature_is_nearly_one_hot() {
        // At τ = 0.01 a component exceeds 0.999 only when the top two perturbed
        // logits differ by more than τ·ln 1998 ≈ 0.076, which happens in about
        // 95.6% of draws; the 99% level needs τ ≈ 0.002 or below.
        let r = near_one_hot_rate(0.01, 9);
        assert!(r > 0.95 && r < 0.965, "{r}");
        assert!(near_one_hot_rate(0.001, 9) >= 0.99);
    }

    #[test]
    fn straight_through_examples() {
        let y = Value::param(Tensor::vector(vec![0.2, 0.7, 0.1]));
        let h = straight_through(&y);
        assert_eq!(h.data().data(), &[0.0, 1.0, 0.0]);
        h.dot(&Value::vector(&[1.0, -2.0, 0.5])).backward();
        assert_eq!(y.grad().data(), &[1.0, -2.0, 0.5]);
        let tie = straight_through(&Value::vector(&[0.4, 0.4, 0.2]));
        assert_eq!(tie.data().data(), &[1.0, 0.0, 0.0]);

        let a = Value::param(Tensor::scalar(0.7));
        let b = bernoulli_straight_through(&a);
        assert_eq!(b.item(), 1.0);
        b.scale(3.0).backward();
        assert_eq!(a.grad().item(), 3.0);
    }

    #[test]
    fn divergences_pass_gradcheck() {
        let x0 = Tensor::vector(vec![0.3, -0.2, 0.1, 0.4, 0.5, -0.6, -0.3, 0.2]);
        let err = gradcheck(
            |x| {
                let q = DiagGaussian::new(x.gather(vec![0, 1], &[2]), x.gather(vec![2, 3], &[2])).unwrap();
                let p = DiagGaussian::new(x.gather(vec![4, 5], &[2]), x.gather(vec![6, 7], &[2])).unwrap();
                gaussian_kl(&q, &p).unwrap()
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let err = gradcheck(
            |x| {
                let q = BernoulliMF::new(x.gather(vec![0, 1, 2, 3], &[4]));
                let p = BernoulliMF::new(x.gather(vec![4, 5, 6, 7], &[4]));
                bernoulli_kl(&q, &p).unwrap().add(&q.log_prob(&[1.0, 0.0, 1.0, 1.0]))
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let err = gradcheck(
            |x| {
                let pi = CategoricalLogits::new(x.gather(vec![0, 1, 2], &[3]));
                let u = Tensor::vector(vec![0.3, 0.8, 0.5]);
                gumbel_softmax(&pi, 0.7, &u).unwrap().at(1)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn gaussian_kl_nonnegative(
            a in prop::collection::vec(-3.0..3.0f64, 3),
            b in prop::collection::vec(-2.0..2.0f64, 3),
            c in prop::collection::vec(-3.0..3.0f64, 3),
            d in prop::collection::vec(-2.0..2.0f64, 3),
        ) {
            let kl = gaussian_kl(&gauss(&a, &b), &gauss(&c, &d)).unwrap().item();
            prop_assert!(kl >= -1e-12);
            let same = gaussian_kl(&gauss(&a, &b), &gauss(&a, &b)).unwrap().item();
            prop_assert!(same.abs() < 1e-12);
        }

        #[test]
        fn bernoulli_kl_nonnegative(q in prop::collection::vec(0.0..=1.0f64, 1..6), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = q.iter().map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let kl = bernoulli_kl(&BernoulliMF::from_probs(&q), &BernoulliMF::from_probs(&p)).unwrap().item();
            prop_assert!(kl.is_finite() && kl >= -1e-12);
        }

        #[test]
        fn gumbel_softmax_always_simplex(l in prop::collection::vec(-20.0..20.0f64, 2..6), tau in 0.01..10.0f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pi = CategoricalLogits::new(Value::vector(&l));
            let y = gumbel_softmax(&pi, tau, &uniform_noise(l.len(), &mut rng)).unwrap();
            prop_assert!((y.data().sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().data().iter().all(|&v| v >= 0.0));
        }
    }
}
