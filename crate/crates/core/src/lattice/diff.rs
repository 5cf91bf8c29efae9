use super::SegmentalPotentials;
use crate::ndgrad::{Tensor, Value};

/// Segmental potentials as graph values, one slice per start position so
/// that neural scorers can build them position by position.
#[derive(Clone, Debug)]
pub struct SegmentalValues {
    /// `gen[p]`: `[L, K+1]` log-scores of segments starting at `p`.
    pub gen: Vec<Value>,
    /// `trans[p]`: `[K+1, K+1]` with rows indexed by the next record; entry 0
    /// is never read.
    pub trans: Vec<Value>,
    /// `[K+1]` first-segment record log-probabilities.
    pub init: Value,
}

impl SegmentalValues {
    /// Slices whole-table values `gen: [m, L, K+1]`, `trans: [m, K+1, K+1]`.
    pub fn from_tables(gen: &Value, trans: &Value, init: &Value) -> Self {
        let m = gen.shape()[0];
        SegmentalValues {
            gen: (0..m).map(|p| gen.row(p)).collect(),
            trans: (0..m).map(|p| trans.row(p)).collect(),
            init: init.clone(),
        }
    }

    /// Constant values for fixed potentials.
    pub fn constant(s: &SegmentalPotentials) -> Self {
        SegmentalValues::from_tables(
            &Value::constant(s.gen.clone()),
            &Value::constant(s.trans.clone()),
            &Value::constant(s.init_trans.clone()),
        )
    }

    pub fn len(&self) -> usize {
        self.gen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gen.is_empty()
    }

    /// The plain-table view of the current values.
    pub fn to_potentials(&self) -> SegmentalPotentials {
        let m = self.len();
        let (l, k1) = (self.gen[0].shape()[0], self.gen[0].shape()[1]);
        let mut gen = Vec::with_capacity(m * l * k1);
        let mut trans = Vec::with_capacity(m * k1 * k1);
        for p in 0..m {
            gen.extend_from_slice(self.gen[p].data().data());
            trans.extend_from_slice(self.trans[p].data().data());
        }
        SegmentalPotentials {
            gen: Tensor::new(vec![m, l, k1], gen),
            trans: Tensor::new(vec![m, k1, k1], trans),
            init_trans: self.init.data().clone(),
        }
    }
}

fn stack_rows(rows: &[Value]) -> Value {
    if rows.len() == 1 {
        let k = rows[0].len();
        return rows[0].reshape(&[1, k]);
    }
    let k = rows[0].len();
    let parts: Vec<Value> = rows.iter().map(|r| r.reshape(&[1, k])).collect();
    Value::concat(&parts, 0)
}

/// Differentiable forward pass returning `(log p(y), E[τ])`.
///
/// The log-marginal uses the cached recursion
/// `enter(p, j) = lse_q α(p, q) + trans[p][j][q]`,
/// `α(i, j) = lse_p enter(p, j) + gen[p][i-p-1][j]`.
/// The expected segment count rides along in the expectation semiring:
/// each α cell carries the posterior-weighted mean count of segments so far.
pub fn semimarkov_forward_and_expected(sv: &SegmentalValues, with_expected: bool) -> (Value, Option<Value>) {
    let m = sv.len();
    assert!(m >= 1, "empty input");
    let (l, k1) = (sv.gen[0].shape()[0], sv.gen[0].shape()[1]);
    let mut alpha: Vec<Option<Value>> = vec![None; m + 1];
    let mut mu: Vec<Option<Value>> = vec![None; m + 1];
    let mut enter: Vec<Value> = Vec::with_capacity(m);
    let mut mu_enter: Vec<Value> = Vec::with_capacity(m);
    for i in 1..=m {
        let p_new = i - 1;
        if p_new == 0 {
            enter.push(sv.init.clone());
            mu_enter.push(Value::constant(Tensor::zeros(&[k1])));
        } else {
            let a = alpha[p_new].as_ref().unwrap();
            let scores = sv.trans[p_new].add(&a.broadcast_to(&[k1, k1]));
            enter.push(scores.logsumexp_axis(1));
            if with_expected {
                let w = scores.softmax();
                let mu_p = mu[p_new].as_ref().unwrap().broadcast_to(&[k1, k1]);
                mu_enter.push(w.mul(&mu_p).sum_axis(1));
            }
        }
        let lo = i.saturating_sub(l);
        let terms: Vec<Value> = (lo..i)
            .map(|p| enter[p].add(&sv.gen[p].row(i - p - 1)))
            .collect();
        let stacked = stack_rows(&terms);
        alpha[i] = Some(stacked.logsumexp_axis(0));
        if with_expected {
            let w = stacked.transpose().softmax();
            let counts: Vec<Value> = (lo..i).map(|p| mu_enter[p].add_const(1.0)).collect();
            let c = stack_rows(&counts).transpose();
            mu[i] = Some(w.mul(&c).sum_axis(1));
        }
    }
    let last = alpha[m].take().unwrap();
    let log_z = last.logsumexp();
    let expected = if with_expected {
        Some(last.softmax().dot(mu[m].as_ref().unwrap()))
    } else {
        None
    };
    (log_z, expected)
}

/// Differentiable semi-Markov log-marginal.
pub fn semimarkov_forward_value(sv: &SegmentalValues) -> Value {
    semimarkov_forward_and_expected(sv, false).0
}

/// Differentiable E[τ] under the segmentation posterior.
pub fn semimarkov_expected_segments_value(sv: &SegmentalValues) -> Value {
    semimarkov_forward_and_expected(sv, true).1.unwrap()
}

/// Differentiable HMM log-marginal from `init: [K]`, `trans: [T, K, K]`,
/// `emit: [T, K]`.
pub fn hmm_forward_value(init: &Value, trans: &Value, emit: &Value) -> Value {
    let (t_len, k) = (emit.shape()[0], emit.shape()[1]);
    let mut beta = init.add(&emit.row(0));
    for t in 1..t_len {
        let scores = trans.row(t).add(&beta.broadcast_to(&[k, k]));
        beta = emit.row(t).add(&scores.logsumexp_axis(1));
    }
    beta.logsumexp()
}
