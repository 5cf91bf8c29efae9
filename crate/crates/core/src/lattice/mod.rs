//! Log-space dynamic programs over latent alignments (first-order HMM) and
//! latent segmentations (semi-Markov), with brute-force enumeration oracles.
//!
//! Potentials are plain tables decoupled from any neural scorer. The plain
//! `f64` routines serve inference and checks; the `*_value` routines in
//! [`diff`] run the same recursions through `ndgrad` for training.

mod check;
mod diff;
mod enumerate;
mod hmm;
mod semimarkov;

pub use check::{oracle_suite, OracleCheck, OracleSuiteConfig};
pub use diff::{
    hmm_forward_value, semimarkov_expected_segments_value, semimarkov_forward_and_expected,
    semimarkov_forward_value,
    SegmentalValues,
};
pub use enumerate::{
    alignment_score, brute_force_alignment_posteriors, brute_force_expected_segments,
    brute_force_hmm_log_marginal, brute_force_segment_posteriors, brute_force_semimarkov,
    count_segmentations, enumerate_alignments, enumerate_segmentations, path_score,
    MAX_ALIGNMENT_PATHS, MAX_ENUM_LENGTH,
};
pub use hmm::{hmm_forward, hmm_pair_posteriors, hmm_posteriors};
pub use semimarkov::{
    semimarkov_expected_segments, semimarkov_forward, semimarkov_forward_direct,
    semimarkov_map, semimarkov_marginals, SegmentalMarginals,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndgrad::{logsumexp_slice, Tensor};
use crate::{Error, Result};

const NORM_TOL: f64 = 1e-9;
const NEG_INF: f64 = f64::NEG_INFINITY;

/// First-order HMM potentials in log space.
///
/// `trans[t][i][j] = log p(a_t = i | a_{t-1} = j)`; slice `t = 0` is unused
/// because the first step draws from `init`.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmPotentials {
    pub init: Tensor,
    pub trans: Tensor,
    pub emit: Tensor,
}

impl HmmPotentials {
    /// Validates shapes and normalization.
    pub fn new(init: Tensor, trans: Tensor, emit: Tensor) -> Result<Self> {
        let p = HmmPotentials::new_unchecked(init, trans, emit)?;
        p.validate()?;
        Ok(p)
    }

    /// Validates shapes only.
    pub fn new_unchecked(init: Tensor, trans: Tensor, emit: Tensor) -> Result<Self> {
        if emit.rank() != 2 || emit.shape()[0] == 0 || emit.shape()[1] == 0 {
            return Err(Error::Shape(format!("emit must be [T, K] with T, K >= 1, got {:?}", emit.shape())));
        }
        let (t, k) = (emit.shape()[0], emit.shape()[1]);
        if init.shape() != [k] || trans.shape() != [t, k, k] {
            return Err(Error::Shape(format!(
                "hmm shapes init {:?} trans {:?} emit {:?}",
                init.shape(),
                trans.shape(),
                emit.shape()
            )));
        }
        Ok(HmmPotentials { init, trans, emit })
    }

    pub fn len(&self) -> usize {
        self.emit.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> usize {
        self.emit.shape()[1]
    }

    #[inline]
    pub fn tr(&self, t: usize, i: usize, j: usize) -> f64 {
        let k = self.states();
        self.trans.data()[(t * k + i) * k + j]
    }

    #[inline]
    pub fn em(&self, t: usize, i: usize) -> f64 {
        self.emit.data()[t * self.states() + i]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states();
        check_normalized(self.init.data(), "hmm init")?;
        for t in 1..self.len() {
            for j in 0..k {
                let col: Vec<f64> = (0..k).map(|i| self.tr(t, i, j)).collect();
                check_normalized(&col, "hmm transition column")?;
            }
        }
        if self.emit.data().iter().any(|&e| e > 0.0 || e.is_nan()) {
            return Err(Error::InvalidArgument("hmm emissions must be log-probabilities <= 0".into()));
        }
        Ok(())
    }

    /// Random normalized tables.
    pub fn random(t: usize, k: usize, rng: &mut impl Rng) -> Self {
        let init = random_log_simplex(k, rng);
        let mut trans = vec![0.0; t * k * k];
        for s in 0..t {
            for j in 0..k {
                let col = random_log_simplex(k, rng);
                for i in 0..k {
                    trans[(s * k + i) * k + j] = col[i];
                }
            }
        }
        let emit: Vec<f64> = (0..t * k).map(|_| rng.random_range(1e-3..1.0f64).ln()).collect();
        HmmPotentials {
            init: Tensor::vector(init),
            trans: Tensor::new(vec![t, k, k], trans),
            emit: Tensor::matrix(t, k, emit),
        }
    }
}

/// Semi-Markov segmentation potentials in log space.
///
/// Records are indexed `0..=K` with 0 the null record.
/// `gen[p][l][j]` scores the segment `y[p..p+l+1]` (length `l + 1`) plus its
/// end marker under record `j` given the prefix `y[..p]`.
/// `trans[p][j][q] = log p(next record j | previous record q, y[..p])`;
/// slice `p = 0` is unused because the first segment draws from `init_trans`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentalPotentials {
    pub gen: Tensor,
    pub trans: Tensor,
    pub init_trans: Tensor,
}

impl SegmentalPotentials {
    /// Validates shapes and the table invariants.
    pub fn new(gen: Tensor, trans: Tensor, init_trans: Tensor) -> Result<Self> {
        let p = SegmentalPotentials::new_unchecked(gen, trans, init_trans)?;
        p.validate()?;
        Ok(p)
    }

    /// Validates shapes only.
    pub fn new_unchecked(gen: Tensor, trans: Tensor, init_trans: Tensor) -> Result<Self> {
        if gen.rank() != 3 {
            return Err(Error::Shape(format!("gen must be [m, L, K+1], got {:?}", gen.shape())));
        }
        let (m, l, k1) = (gen.shape()[0], gen.shape()[1], gen.shape()[2]);
        if m == 0 {
            return Err(Error::InvalidArgument("empty input: m = 0".into()));
        }
        if l == 0 {
            return Err(Error::InvalidArgument("maximum segment length L must be >= 1".into()));
        }
        if k1 == 0 || trans.shape() != [m, k1, k1] || init_trans.shape() != [k1] {
            return Err(Error::Shape(format!(
                "segmental shapes gen {:?} trans {:?} init {:?}",
                gen.shape(),
                trans.shape(),
                init_trans.shape()
            )));
        }
        Ok(SegmentalPotentials { gen, trans, init_trans })
    }

    /// Sequence length m.
    pub fn len(&self) -> usize {
        self.gen.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maximum segment length L.
    pub fn max_len(&self) -> usize {
        self.gen.shape()[1]
    }

    /// Number of records including null, K + 1.
    pub fn labels(&self) -> usize {
        self.gen.shape()[2]
    }

    #[inline]
    pub fn g(&self, p: usize, l: usize, j: usize) -> f64 {
        let (ll, k1) = (self.max_len(), self.labels());
        self.gen.data()[(p * ll + l) * k1 + j]
    }

    #[inline]
    pub fn tr(&self, p: usize, j: usize, q: usize) -> f64 {
        let k1 = self.labels();
        self.trans.data()[(p * k1 + j) * k1 + q]
    }

    pub fn validate(&self) -> Result<()> {
        let k1 = self.labels();
        check_normalized(self.init_trans.data(), "init_trans")?;
        for p in 1..self.len() {
            for q in 0..k1 {
                let col: Vec<f64> = (0..k1).map(|j| self.tr(p, j, q)).collect();
                check_normalized(&col, "transition row")?;
                if q != 0 && self.tr(p, q, q) != NEG_INF {
                    return Err(Error::InvalidArgument(format!(
                        "self-transition of record {q} at position {p} must be -inf"
                    )));
                }
            }
        }
        if self.gen.data().iter().any(|&e| e > 0.0 || e.is_nan()) {
            return Err(Error::InvalidArgument("gen entries must be log-probabilities <= 0".into()));
        }
        Ok(())
    }

    /// Random tables honoring the invariants. `k` counts non-null records.
    pub fn random(m: usize, k: usize, l: usize, rng: &mut impl Rng) -> Self {
        let k1 = k + 1;
        let init = random_log_simplex(k1, rng);
        let mut trans = vec![NEG_INF; m * k1 * k1];
        for p in 0..m {
            for q in 0..k1 {
                let allowed: Vec<usize> = (0..k1).filter(|&j| j == 0 || j != q).collect();
                let col = random_log_simplex(allowed.len(), rng);
                for (&j, &v) in allowed.iter().zip(&col) {
                    trans[(p * k1 + j) * k1 + q] = v;
                }
            }
        }
        let gen: Vec<f64> = (0..m * l * k1).map(|_| rng.random_range(1e-3..1.0f64).ln()).collect();
        SegmentalPotentials {
            gen: Tensor::new(vec![m, l, k1], gen),
            trans: Tensor::new(vec![m, k1, k1], trans),
            init_trans: Tensor::vector(init),
        }
    }

    /// Same potentials with the length cap raised to `l_new`, new lengths
    /// filled with −∞.
    pub fn with_max_len(&self, l_new: usize) -> Self {
        let (m, l, k1) = (self.len(), self.max_len(), self.labels());
        assert!(l_new >= l, "can only widen the length cap");
        let gen = Tensor::from_fn(&[m, l_new, k1], |idx| {
            let j = idx % k1;
            let ll = (idx / k1) % l_new;
            let p = idx / (k1 * l_new);
            if ll < l {
                self.g(p, ll, j)
            } else {
                NEG_INF
            }
        });
        SegmentalPotentials {
            gen,
            trans: self.trans.clone(),
            init_trans: self.init_trans.clone(),
        }
    }

    /// Relabels non-null records by `perm` (a permutation of `1..=K`, given
    /// as `perm[old] = new` with `perm[0] = 0`).
    pub fn permute_records(&self, perm: &[usize]) -> Self {
        let (m, l, k1) = (self.len(), self.max_len(), self.labels());
        assert_eq!(perm.len(), k1);
        let mut inv = vec![0; k1];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let gen = Tensor::from_fn(&[m, l, k1], |idx| {
            let j = idx % k1;
            let rest = idx / k1;
            self.gen.data()[rest * k1 + inv[j]]
        });
        let trans = Tensor::from_fn(&[m, k1, k1], |idx| {
            let q = idx % k1;
            let j = (idx / k1) % k1;
            let p = idx / (k1 * k1);
            self.tr(p, inv[j], inv[q])
        });
        let init_trans = Tensor::from_fn(&[k1], |j| self.init_trans.data()[inv[j]]);
        SegmentalPotentials { gen, trans, init_trans }
    }
}

/// A labeled segmentation: cut points `0 = b0 < b1 < … < bτ = m` and one
/// record label per segment (0 = null).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentationPath {
    pub cuts: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SegmentationPath {
    pub fn num_segments(&self) -> usize {
        self.labels.len()
    }

    /// `(start, length, label)` for every segment.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.cuts
            .windows(2)
            .zip(&self.labels)
            .map(|(w, &c)| (w[0], w[1] - w[0], c))
    }

    /// Checks length cap and the no-repeat rule for non-null labels.
    pub fn is_valid(&self, m: usize, l: usize) -> bool {
        self.cuts.first() == Some(&0)
            && self.cuts.last() == Some(&m)
            && self.cuts.len() == self.labels.len() + 1
            && self.segments().all(|(_, len, _)| len >= 1 && len <= l)
            && self.labels.windows(2).all(|w| w[0] == 0 || w[0] != w[1])
    }
}

fn check_normalized(logp: &[f64], what: &str) -> Result<()> {
    let total: f64 = logp.iter().map(|x| x.exp()).sum();
    if (total - 1.0).abs() > NORM_TOL || logp.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "{what} does not normalize: mass {total}"
        )));
    }
    Ok(())
}

fn random_log_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = logsumexp_slice(&raw);
    raw.iter().map(|x| x - z).collect()
}

#[cfg(test)]
mod tests;
