use super::HmmPotentials;
use crate::ndgrad::{logsumexp_slice, Tensor};
use crate::Result;

fn forward_table(p: &HmmPotentials) -> Vec<Vec<f64>> {
    let (t_len, k) = (p.len(), p.states());
    let mut alpha = vec![vec![0.0; k]; t_len];
    for i in 0..k {
        alpha[0][i] = p.init.data()[i] + p.em(0, i);
    }
    let mut buf = vec![0.0; k];
    for t in 1..t_len {
        for i in 0..k {
            for j in 0..k {
                buf[j] = p.tr(t, i, j) + alpha[t - 1][j];
            }
            alpha[t][i] = p.em(t, i) + logsumexp_slice(&buf);
        }
    }
    alpha
}

fn backward_table(p: &HmmPotentials) -> Vec<Vec<f64>> {
    let (t_len, k) = (p.len(), p.states());
    let mut beta = vec![vec![0.0; k]; t_len];
    let mut buf = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for j in 0..k {
            for i in 0..k {
                buf[i] = p.tr(t + 1, i, j) + p.em(t + 1, i) + beta[t + 1][i];
            }
            beta[t][j] = logsumexp_slice(&buf);
        }
    }
    beta
}

/// log p(y_1..T) by the forward recursion.
pub fn hmm_forward(p: &HmmPotentials) -> Result<f64> {
    let alpha = forward_table(p);
    Ok(logsumexp_slice(&alpha[p.len() - 1]))
}

/// Unary posteriors p(a_t = i | y) as a `[T, K]` tensor.
pub fn hmm_posteriors(p: &HmmPotentials) -> Result<Tensor> {
    let alpha = forward_table(p);
    let beta = backward_table(p);
    let z = logsumexp_slice(&alpha[p.len() - 1]);
    let k = p.states();
    Ok(Tensor::from_fn(&[p.len(), k], |idx| {
        let (t, i) = (idx / k, idx % k);
        (alpha[t][i] + beta[t][i] - z).exp()
    }))
}

/// Pairwise posteriors p(a_t = i, a_{t-1} = j | y) as `[T, K, K]`; slice 0 is
/// zero.
pub fn hmm_pair_posteriors(p: &HmmPotentials) -> Result<Tensor> {
    let alpha = forward_table(p);
    let beta = backward_table(p);
    let z = logsumexp_slice(&alpha[p.len() - 1]);
    let k = p.states();
    Ok(Tensor::from_fn(&[p.len(), k, k], |idx| {
        let t = idx / (k * k);
        let (i, j) = ((idx / k) % k, idx % k);
        if t == 0 {
            0.0
        } else {
            (alpha[t - 1][j] + p.tr(t, i, j) + p.em(t, i) + beta[t][i] - z).exp()
        }
    }))
}
