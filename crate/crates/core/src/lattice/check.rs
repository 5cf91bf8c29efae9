use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diff::{hmm_forward_value, semimarkov_forward_and_expected, SegmentalValues};
use super::enumerate::{
    brute_force_alignment_posteriors, brute_force_expected_segments, brute_force_hmm_log_marginal,
    brute_force_segment_posteriors, brute_force_semimarkov, enumerate_segmentations, path_score,
};
use super::hmm::hmm_forward;
use super::semimarkov::{semimarkov_expected_segments, semimarkov_forward, semimarkov_map};
use super::{HmmPotentials, SegmentalPotentials};
use crate::ndgrad::{gradcheck, Value};
use crate::Result;

/// Sizes of the oracle suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSuiteConfig {
    /// Random instances per log-marginal family.
    pub n_marginal: usize,
    /// Random micro instances for the gradient and expectation checks.
    pub n_micro: usize,
    pub seed: u64,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        OracleSuiteConfig { n_marginal: 1000, n_micro: 100, seed: 0 }
    }
}

/// Worst deviation of one DP-versus-oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub instances: usize,
    pub max_dev: f64,
    pub tol: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, devs: Vec<f64>, tol: f64) -> Self {
        let max_dev = devs.iter().copied().fold(0.0, f64::max);
        let passed = devs.iter().all(|d| d.is_finite() && *d <= tol);
        OracleCheck { name: name.into(), instances: devs.len(), max_dev, tol, passed }
    }
}

const FD_STEP: f64 = 1e-6;

fn seg_instances(n: usize, max_m: usize, rng: &mut ChaCha8Rng) -> Vec<SegmentalPotentials> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(1..=max_m);
            let k = rng.random_range(0..=3);
            let l = rng.random_range(1..=3);
            SegmentalPotentials::random(m, k, l, rng)
        })
        .collect()
}

fn hmm_instances(n: usize, max_t: usize, rng: &mut ChaCha8Rng) -> Vec<HmmPotentials> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=max_t);
            let k = rng.random_range(1..=5);
            HmmPotentials::random(t, k, rng)
        })
        .collect()
}

fn collect<T: Sync>(xs: &[T], f: impl Fn(&T) -> Result<f64> + Sync + Send) -> Result<Vec<f64>> {
    xs.par_iter().map(f).collect()
}

fn seg_with_gen(s: &SegmentalPotentials, gen: &Value) -> SegmentalValues {
    SegmentalValues::from_tables(
        &gen.reshape(s.gen.shape()),
        &Value::constant(s.trans.clone()),
        &Value::constant(s.init_trans.clone()),
    )
}

/// Runs every brute-force equivalence check: log-marginals of both lattices
/// (m ≤ 8, K ≤ 3, L ≤ 3 and T ≤ 6, K ≤ 5), gradient identities against
/// enumerated posteriors and central differences, the expected segment count
/// and its gradient, and MAP optimality. Instances are drawn from `seed`.
pub fn oracle_suite(cfg: &OracleSuiteConfig) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let segs = seg_instances(cfg.n_marginal, 8, &mut rng);
    let hmms = hmm_instances(cfg.n_marginal, 6, &mut rng);
    let micro_segs = seg_instances(cfg.n_micro, 5, &mut rng);
    let micro_hmms = hmm_instances(cfg.n_micro, 4, &mut rng);

    let mut out = Vec::new();
    out.push(OracleCheck::new(
        "semimarkov-log-marginal",
        collect(&segs, |s| Ok((semimarkov_forward(s)? - brute_force_semimarkov(s)?).abs()))?,
        1e-9,
    ));
    out.push(OracleCheck::new(
        "hmm-log-marginal",
        collect(&hmms, |p| Ok((hmm_forward(p)? - brute_force_hmm_log_marginal(p)?).abs()))?,
        1e-9,
    ));
    out.push(OracleCheck::new(
        "semimarkov-map",
        collect(&segs, |s| {
            let (path, score) = semimarkov_map(s)?;
            let best = enumerate_segmentations(s.len(), s.labels() - 1, s.max_len())?
                .iter()
                .map(|p| path_score(s, p))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((score - best).abs().max((path_score(s, &path) - score).abs()))
        })?,
        1e-9,
    ));
    out.push(OracleCheck::new(
        "semimarkov-grad-vs-posteriors",
        collect(&micro_segs, |s| {
            let gen = Value::param(s.gen.clone());
            semimarkov_forward_and_expected(&seg_with_gen(s, &gen), false).0.backward();
            Ok(gen.grad().max_abs_diff(&brute_force_segment_posteriors(s)?.gen))
        })?,
        1e-8,
    ));
    out.push(OracleCheck::new(
        "hmm-grad-vs-posteriors",
        collect(&micro_hmms, |p| {
            let emit = Value::param(p.emit.clone());
            hmm_forward_value(&Value::constant(p.init.clone()), &Value::constant(p.trans.clone()), &emit).backward();
            Ok(emit.grad().max_abs_diff(&brute_force_alignment_posteriors(p)?))
        })?,
        1e-8,
    ));
    out.push(OracleCheck::new(
        "semimarkov-grad-vs-finite-diff",
        collect(&micro_segs, |s| {
            let x0 = s.gen.clone().reshaped(&[s.gen.len()]);
            gradcheck(|x| semimarkov_forward_and_expected(&seg_with_gen(s, x), false).0, &x0, FD_STEP)
        })?,
        1e-6,
    ));
    out.push(OracleCheck::new(
        "hmm-grad-vs-finite-diff",
        collect(&micro_hmms, |p| {
            let x0 = p.emit.clone().reshaped(&[p.emit.len()]);
            let (init, trans) = (Value::constant(p.init.clone()), Value::constant(p.trans.clone()));
            gradcheck(|x| hmm_forward_value(&init, &trans, &x.reshape(p.emit.shape())), &x0, FD_STEP)
        })?,
        1e-6,
    ));
    out.push(OracleCheck::new(
        "expected-segments",
        collect(&micro_segs, |s| Ok((semimarkov_expected_segments(s)? - brute_force_expected_segments(s)?).abs()))?,
        1e-8,
    ));
    out.push(OracleCheck::new(
        "expected-segments-gradcheck",
        collect(&micro_segs, |s| {
            let x0 = s.gen.clone().reshaped(&[s.gen.len()]);
            gradcheck(|x| semimarkov_forward_and_expected(&seg_with_gen(s, x), true).1.expect("requested"), &x0, FD_STEP)
        })?,
        1e-6,
    ));
    Ok(out)
}
