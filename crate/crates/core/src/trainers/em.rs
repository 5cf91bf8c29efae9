use serde::Serialize;

use crate::lattice::{
    hmm_forward_value, hmm_pair_posteriors, hmm_posteriors, semimarkov_forward_value, semimarkov_marginals,
    HmmPotentials, SegmentalValues,
};
use crate::ndgrad::{Tensor, Value};
use crate::{Error, Result};

/// Lattice potentials built from parameters, as graph values.
pub enum LatticeValues {
    /// `init: [K]`, `trans: [T, K, K]`, `emit: [T, K]`, laid out as in
    /// [`HmmPotentials`].
    Hmm { init: Value, trans: Value, emit: Value },
    Segmental(SegmentalValues),
}

impl LatticeValues {
    /// log p(data) through the autodiff recursion.
    pub fn log_marginal(&self) -> Value {
        match self {
            LatticeValues::Hmm { init, trans, emit } => hmm_forward_value(init, trans, emit),
            LatticeValues::Segmental(sv) => semimarkov_forward_value(sv),
        }
    }

    /// A surrogate whose value is log p(data) and whose gradient is the
    /// posterior-weighted sum of potential gradients: the expected complete
    /// data log-likelihood with the E-step posteriors held fixed.
    pub fn expected_complete(&self) -> Result<Value> {
        match self {
            LatticeValues::Hmm { init, trans, emit } => {
                let pots = HmmPotentials::new_unchecked(init.data().clone(), trans.data().clone(), emit.data().clone())?;
                let post = hmm_posteriors(&pots)?;
                let pair = hmm_pair_posteriors(&pots)?;
                let z = crate::lattice::hmm_forward(&pots)?;
                let post0 = Tensor::vector(post.row(0).to_vec());
                let s = weighted_sum(init, &post0).add(&weighted_sum(trans, &pair)).add(&weighted_sum(emit, &post));
                Ok(detached_offset(&s, z))
            }
            LatticeValues::Segmental(sv) => {
                let pots = sv.to_potentials();
                let marg = semimarkov_marginals(&pots)?;
                let (l, k1) = (pots.max_len(), pots.labels());
                let mut s = weighted_sum(&sv.init, &marg.init);
                for p in 0..sv.len() {
                    let g = Tensor::new(vec![l, k1], marg.gen.data()[p * l * k1..(p + 1) * l * k1].to_vec());
                    s = s.add(&weighted_sum(&sv.gen[p], &g));
                    if p > 0 {
                        let t = Tensor::new(vec![k1, k1], marg.trans.data()[p * k1 * k1..(p + 1) * k1 * k1].to_vec());
                        s = s.add(&weighted_sum(&sv.trans[p], &t));
                    }
                }
                Ok(detached_offset(&s, marg.log_z))
            }
        }
    }
}

/// Σ w ⊙ x over entries with nonzero weight. Entries holding −∞ carry zero
/// posterior mass, so skipping them avoids 0·∞.
fn weighted_sum(x: &Value, w: &Tensor) -> Value {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| w.data()[i] != 0.0).collect();
    if idx.is_empty() {
        return Value::scalar(0.0);
    }
    let n = idx.len();
    let wv: Vec<f64> = idx.iter().map(|&i| w.data()[i]).collect();
    x.reshape(&[x.len()]).gather(idx, &[n]).mul(&Value::vector(&wv)).sum()
}

/// `s − s.value + z`: keeps the gradient of `s` while reporting `z`.
fn detached_offset(s: &Value, z: f64) -> Value {
    s.add_const(z - s.item())
}

/// How the log-marginal gradient is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GradRoute {
    /// Backward through the forward recursion.
    Autodiff,
    /// Posterior marginals from the exact lattice routines, then the
    /// gradient of the expected complete-data log-likelihood.
    Posterior,
}

/// Result of [`em_fit`].
#[derive(Clone, Debug)]
pub struct EmFit {
    pub theta: Tensor,
    /// Mean negative log-marginal before each step, then after the last.
    pub losses: Vec<f64>,
}

/// Mean negative log-marginal and its gradient at `theta`.
pub fn em_loss_grad<D>(
    pots_fn: &impl Fn(&Value, &D) -> Result<LatticeValues>,
    data: &[D],
    theta: &Tensor,
    route: GradRoute,
) -> Result<(f64, Tensor)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("em_fit needs data".into()));
    }
    let th = Value::param(theta.clone());
    let mut total: Option<Value> = None;
    for d in data {
        let lv = pots_fn(&th, d)?;
        let ll = match route {
            GradRoute::Autodiff => lv.log_marginal(),
            GradRoute::Posterior => lv.expected_complete()?,
        };
        total = Some(match total {
            None => ll,
            Some(t) => t.add(&ll),
        });
    }
    let loss = total.unwrap().scale(-1.0 / data.len() as f64);
    loss.backward();
    Ok((loss.item(), th.grad()))
}

/// Gradient descent on the mean negative log-marginal: the generalized EM
/// step, since the log-marginal gradient is the expected complete-data
/// gradient under the current posteriors. Aborts when the loss or the
/// parameters stop being finite.
pub fn em_fit<D>(
    pots_fn: impl Fn(&Value, &D) -> Result<LatticeValues>,
    data: &[D],
    theta0: &Tensor,
    steps: usize,
    lr: f64,
    route: GradRoute,
) -> Result<EmFit> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let mut theta = theta0.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grad) = em_loss_grad(&pots_fn, data, &theta, route)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "em_fit diverged at step {step}: loss {loss}, gradient norm {}",
                grad.sq_norm().sqrt()
            )));
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        theta = theta.zip_map(&grad, |t, g| t - lr * g);
    }
    Ok(EmFit { theta, losses })
}
