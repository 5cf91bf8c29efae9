use super::{SegmentalPotentials, SegmentationPath, NEG_INF};
use crate::ndgrad::{logsumexp_slice, Tensor};
use crate::{Error, Result};

/// Forward tables in the cached formulation.
///
/// `alpha[i][j]`: log-mass of `y[..i]` with the last segment ending at `i`
/// under record `j` (row 0 unused).
/// `enter[p][j]`: log-mass of entering record `j` at position `p`, i.e.
/// `init_trans[j]` for `p = 0` and `lse_q alpha[p][q] + trans[p][j][q]` after.
struct Forward {
    alpha: Vec<Vec<f64>>,
    enter: Vec<Vec<f64>>,
}

fn forward_tables(s: &SegmentalPotentials) -> Forward {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    let mut alpha = vec![vec![NEG_INF; k1]; m + 1];
    let mut enter = vec![vec![NEG_INF; k1]; m];
    let mut buf = vec![0.0; k1.max(l)];
    for i in 1..=m {
        let p_new = i - 1;
        if p_new == 0 {
            enter[0].copy_from_slice(s.init_trans.data());
        } else {
            for j in 0..k1 {
                for q in 0..k1 {
                    buf[q] = alpha[p_new][q] + s.tr(p_new, j, q);
                }
                enter[p_new][j] = logsumexp_slice(&buf[..k1]);
            }
        }
        let lo = i.saturating_sub(l);
        for j in 0..k1 {
            let n = i - lo;
            for (k, p) in (lo..i).enumerate() {
                buf[k] = enter[p][j] + s.g(p, i - p - 1, j);
            }
            alpha[i][j] = logsumexp_slice(&buf[..n]);
        }
    }
    Forward { alpha, enter }
}

/// `rest[i][j]`: log-mass of `y[i..]` given a segment labeled `j` starts at `i`.
fn backward_tables(s: &SegmentalPotentials) -> Vec<Vec<f64>> {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    // beta[i][q]: log-mass of y[i..] given the segment ending at i had label q.
    let mut beta = vec![vec![NEG_INF; k1]; m + 1];
    let mut rest = vec![vec![NEG_INF; k1]; m];
    beta[m].iter_mut().for_each(|b| *b = 0.0);
    let mut buf = vec![0.0; k1.max(l)];
    for i in (0..m).rev() {
        for j in 0..k1 {
            let n = l.min(m - i);
            for ll in 0..n {
                buf[ll] = s.g(i, ll, j) + beta[i + ll + 1][j];
            }
            rest[i][j] = logsumexp_slice(&buf[..n]);
        }
        if i > 0 {
            for q in 0..k1 {
                for j in 0..k1 {
                    buf[j] = s.tr(i, j, q) + rest[i][j];
                }
                beta[i][q] = logsumexp_slice(&buf[..k1]);
            }
        }
    }
    rest
}

/// log p(y | X): the semi-Markov forward algorithm, O(m·K² + m·L·K).
pub fn semimarkov_forward(s: &SegmentalPotentials) -> Result<f64> {
    let f = forward_tables(s);
    Ok(logsumexp_slice(&f.alpha[s.len()]))
}

/// The same log-marginal by the direct per-cell sum over start `p` and
/// previous record `q`, O(m·L·K²). Kept as a cross-check for the cached form.
pub fn semimarkov_forward_direct(s: &SegmentalPotentials) -> Result<f64> {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    let mut alpha = vec![vec![NEG_INF; k1]; m + 1];
    let mut terms = Vec::with_capacity(l * k1);
    for i in 1..=m {
        for j in 0..k1 {
            terms.clear();
            for p in i.saturating_sub(l)..i {
                let g = s.g(p, i - p - 1, j);
                if p == 0 {
                    terms.push(s.init_trans.data()[j] + g);
                } else {
                    for q in 0..k1 {
                        terms.push(alpha[p][q] + s.tr(p, j, q) + g);
                    }
                }
            }
            alpha[i][j] = logsumexp_slice(&terms);
        }
    }
    Ok(logsumexp_slice(&alpha[m]))
}

/// Posterior usage probabilities of every table entry.
#[derive(Clone, Debug)]
pub struct SegmentalMarginals {
    pub log_z: f64,
    /// P(segment of length l+1 starting at p labeled j), shape `[m, L, K+1]`.
    pub gen: Tensor,
    /// P(record j entered at p ≥ 1 after record q), shape `[m, K+1, K+1]`.
    pub trans: Tensor,
    /// P(first record is j), shape `[K+1]`.
    pub init: Tensor,
}

impl SegmentalMarginals {
    /// Expected number of segments, as the total segment usage mass.
    pub fn expected_segments(&self) -> f64 {
        self.gen.sum()
    }
}

/// Inside-outside marginals. These equal the gradients of the log-marginal
/// with respect to the corresponding tables.
pub fn semimarkov_marginals(s: &SegmentalPotentials) -> Result<SegmentalMarginals> {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    let f = forward_tables(s);
    let rest = backward_tables(s);
    let z = logsumexp_slice(&f.alpha[m]);
    if z == NEG_INF {
        return Err(Error::InvalidArgument("no segmentation has positive mass".into()));
    }
    // beta[i][j] for segment end i: y[i..] mass after a segment labeled j ends at i.
    let beta_end = |i: usize, j: usize| -> f64 {
        if i == m {
            0.0
        } else {
            let terms: Vec<f64> = (0..k1).map(|jj| s.tr(i, jj, j) + rest[i][jj]).collect();
            logsumexp_slice(&terms)
        }
    };
    let mut beta = vec![vec![0.0; k1]; m + 1];
    for (i, row) in beta.iter_mut().enumerate().skip(1) {
        for (j, b) in row.iter_mut().enumerate() {
            *b = beta_end(i, j);
        }
    }
    let gen = Tensor::from_fn(&[m, l, k1], |idx| {
        let j = idx % k1;
        let ll = (idx / k1) % l;
        let p = idx / (k1 * l);
        if p + ll + 1 > m {
            0.0
        } else {
            (f.enter[p][j] + s.g(p, ll, j) + beta[p + ll + 1][j] - z).exp()
        }
    });
    let trans = Tensor::from_fn(&[m, k1, k1], |idx| {
        let q = idx % k1;
        let j = (idx / k1) % k1;
        let p = idx / (k1 * k1);
        if p == 0 {
            0.0
        } else {
            (f.alpha[p][q] + s.tr(p, j, q) + rest[p][j] - z).exp()
        }
    });
    let init = Tensor::from_fn(&[k1], |j| (s.init_trans.data()[j] + rest[0][j] - z).exp());
    Ok(SegmentalMarginals { log_z: z, gen, trans, init })
}

/// E[τ] under the segmentation posterior, by an expectation-semiring pass
/// that shares the forward structure.
pub fn semimarkov_expected_segments(s: &SegmentalPotentials) -> Result<f64> {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    let f = forward_tables(s);
    let z = logsumexp_slice(&f.alpha[m]);
    if z == NEG_INF {
        return Err(Error::InvalidArgument("no segmentation has positive mass".into()));
    }
    let weight = |num: f64, den: f64| if den == NEG_INF { 0.0 } else { (num - den).exp() };
    // mu[i][j]: expected segment count of y[..i] given the last segment ends at i with j.
    let mut mu = vec![vec![0.0; k1]; m + 1];
    // mu_enter[p][j]: expected count before a segment labeled j starting at p.
    let mut mu_enter = vec![vec![0.0; k1]; m];
    for i in 1..=m {
        let p_new = i - 1;
        if p_new > 0 {
            for j in 0..k1 {
                mu_enter[p_new][j] = (0..k1)
                    .map(|q| weight(f.alpha[p_new][q] + s.tr(p_new, j, q), f.enter[p_new][j]) * mu[p_new][q])
                    .sum();
            }
        }
        for j in 0..k1 {
            mu[i][j] = (i.saturating_sub(l)..i)
                .map(|p| weight(f.enter[p][j] + s.g(p, i - p - 1, j), f.alpha[i][j]) * (mu_enter[p][j] + 1.0))
                .sum();
        }
    }
    Ok((0..k1).map(|j| weight(f.alpha[m][j], z) * mu[m][j]).sum())
}

/// Highest-scoring segmentation and its log-score (max-product recursion).
pub fn semimarkov_map(s: &SegmentalPotentials) -> Result<(SegmentationPath, f64)> {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    let mut best = vec![vec![NEG_INF; k1]; m + 1];
    // back[i][j] = (start p, previous label q or usize::MAX for the first segment)
    let mut back = vec![vec![(0usize, usize::MAX); k1]; m + 1];
    for i in 1..=m {
        for j in 0..k1 {
            for p in i.saturating_sub(l)..i {
                let g = s.g(p, i - p - 1, j);
                if p == 0 {
                    let v = s.init_trans.data()[j] + g;
                    if v > best[i][j] {
                        best[i][j] = v;
                        back[i][j] = (0, usize::MAX);
                    }
                } else {
                    for q in 0..k1 {
                        let v = best[p][q] + s.tr(p, j, q) + g;
                        if v > best[i][j] {
                            best[i][j] = v;
                            back[i][j] = (p, q);
                        }
                    }
                }
            }
        }
    }
    let mut j = (0..k1)
        .max_by(|&a, &b| best[m][a].total_cmp(&best[m][b]))
        .expect("at least one label");
    let score = best[m][j];
    if score == NEG_INF {
        return Err(Error::InvalidArgument("no segmentation has positive mass".into()));
    }
    let mut i = m;
    let mut cuts = vec![m];
    let mut labels = vec![];
    loop {
        let (p, q) = back[i][j];
        labels.push(j);
        cuts.push(p);
        if q == usize::MAX {
            break;
        }
        i = p;
        j = q;
    }
    cuts.reverse();
    labels.reverse();
    Ok((SegmentationPath { cuts, labels }, score))
}
