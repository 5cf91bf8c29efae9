use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::align::{boundary_counts, boundary_f1};
use super::data::{segment_faithful, Example, Vocab};
use super::decode::{constrained_decode, DecodeOptions};
use super::model::{score_tables, train_loss, RecordSet, SegModel};
use crate::lattice::{semimarkov_expected_segments, semimarkov_map};
use crate::ndgrad::{accumulate, Adam};
use crate::{Error, Result};

/// A corpus example in model ids.
#[derive(Clone, Debug)]
pub struct Pair {
    pub rs: RecordSet,
    pub y: Vec<usize>,
    pub example: Example,
}

impl Pair {
    pub fn new(vocab: &Vocab, example: &Example) -> Result<Self> {
        let rs = vocab.record_set(&example.records)?;
        let y = vocab.encode(&example.text);
        if y.is_empty() {
            return Err(Error::InvalidArgument("example with empty text".into()));
        }
        Ok(Pair { rs, y, example: example.clone() })
    }

    /// K, the number of non-null records.
    pub fn k(&self) -> usize {
        self.rs.len()
    }
}

pub fn prepare(vocab: &Vocab, examples: &[Example]) -> Result<Vec<Pair>> {
    examples.iter().map(|e| Pair::new(vocab, e)).collect()
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 3, batch_size: 8, lr: 3e-3, clip: 5.0, seed: 0 }
    }
}

/// Mean statistics over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub expected_segments: f64,
    pub abs_tau_dev: f64,
}

/// Minibatch Adam on the summed pair losses. Pairs are visited in a seeded
/// shuffled order and gradients are summed in that order, so results depend
/// only on the seed.
pub fn fit(model: &mut SegModel, pairs: &[Pair], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog, &SegModel)) -> Result<Vec<EpochLog>> {
    if pairs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs pairs and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr).with_clip(Some(cfg.clip));
    let (eta_off, gamma) = (model.cfg.eta_offset, model.cfg.gamma);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tot_loss, mut tot_nll, mut tot_et, mut tot_dev) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let p = &pairs[i];
                let b = model.params.bind();
                let eta = p.k() as f64 + eta_off;
                let parts = train_loss(model, &b, &p.rs, &p.y, eta, gamma)?;
                parts.loss.backward();
                accumulate(&mut grads, &b.grads());
                tot_loss += parts.loss.item();
                tot_nll -= parts.log_z;
                tot_et += parts.expected_segments;
                tot_dev += (parts.expected_segments - p.k() as f64).abs();
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            opt.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(Error::NonFinite(format!("parameters diverged in epoch {epoch}")));
            }
        }
        let n = pairs.len() as f64;
        let log = EpochLog {
            epoch,
            loss: tot_loss / n,
            nll: tot_nll / n,
            expected_segments: tot_et / n,
            abs_tau_dev: tot_dev / n,
        };
        on_epoch(&log, model);
        logs.push(log);
    }
    Ok(logs)
}

/// Held-out metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    /// Realized non-null records over all non-null records.
    pub coverage: f64,
    /// Extra realizations of a non-null record, summed.
    pub repetitions: usize,
    /// Faithful record segments over realized record segments.
    pub faithfulness: f64,
    pub exact_match: f64,
    /// Mean E[τ] on the reference texts.
    pub mean_expected_segments: f64,
    /// Mean |E[τ] − K| on the reference texts.
    pub mean_abs_tau_dev: f64,
    /// Boundary F1 of the MAP segmentation of the reference against gold.
    pub boundary_f1: f64,
    pub decode_failures: usize,
}

struct One {
    realized: usize,
    total: usize,
    repeats: usize,
    faithful: usize,
    segs: usize,
    exact: bool,
    et: f64,
    k: usize,
    f1: [usize; 3],
    failed: bool,
}

fn eval_one(model: &SegModel, p: &Pair, opts: &DecodeOptions) -> Result<One> {
    let k = p.k();
    let pots = score_tables(model, &p.rs, &p.y)?;
    let et = semimarkov_expected_segments(&pots)?;
    let (map, _) = semimarkov_map(&pots)?;
    let f1 = boundary_counts(&map, &p.example);
    let mut one = One { realized: 0, total: k, repeats: 0, faithful: 0, segs: 0, exact: false, et, k, f1, failed: false };
    let dec = match constrained_decode(model, &p.rs, opts) {
        Ok(d) => d,
        Err(Error::DecodeFailure(_)) => {
            one.failed = true;
            return Ok(one);
        }
        Err(e) => return Err(e),
    };
    let words = model.vocab.decode(&dec.tokens);
    let mut seen = vec![0usize; k + 1];
    for (j, range) in dec.segments() {
        if j == 0 {
            continue;
        }
        seen[j] += 1;
        one.segs += 1;
        let (slot, value) = &p.example.records[j - 1];
        if segment_faithful(slot, value, &words[range]) {
            one.faithful += 1;
        }
    }
    one.realized = seen[1..].iter().filter(|&&c| c > 0).count();
    one.repeats = seen[1..].iter().map(|&c| c.saturating_sub(1)).sum();
    one.exact = words == p.example.text;
    Ok(one)
}

/// Decodes every pair and scores the references. Pairs are evaluated
/// concurrently and reduced in input order.
pub fn evaluate(model: &SegModel, pairs: &[Pair], opts: &DecodeOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let ones: Vec<One> = pairs.par_iter().map(|p| eval_one(model, p, opts)).collect::<Result<_>>()?;
    let n = ones.len();
    let sum = |f: &dyn Fn(&One) -> usize| ones.iter().map(f).sum::<usize>();
    let f1 = [0, 1, 2].map(|i| sum(&|o: &One| o.f1[i]));
    let segs = sum(&|o| o.segs);
    Ok(EvalReport {
        n,
        coverage: sum(&|o| o.realized) as f64 / sum(&|o| o.total) as f64,
        repetitions: sum(&|o| o.repeats),
        faithfulness: if segs == 0 { 0.0 } else { sum(&|o| o.faithful) as f64 / segs as f64 },
        exact_match: sum(&|o| o.exact as usize) as f64 / n as f64,
        mean_expected_segments: ones.iter().map(|o| o.et).sum::<f64>() / n as f64,
        mean_abs_tau_dev: ones.iter().map(|o| (o.et - o.k as f64).abs()).sum::<f64>() / n as f64,
        boundary_f1: boundary_f1(f1),
        decode_failures: sum(&|o| o.failed as usize),
    })
}

/// Outcome of [`fit_select`].
#[derive(Clone, Debug, Serialize)]
pub struct Selection {
    pub logs: Vec<EpochLog>,
    /// Dev metrics after each epoch.
    pub dev: Vec<EvalReport>,
    pub best_epoch: usize,
}

fn better(a: &EvalReport, b: &EvalReport) -> bool {
    a.faithfulness > b.faithfulness
        || (a.faithfulness == b.faithfulness && a.mean_abs_tau_dev < b.mean_abs_tau_dev)
}

/// Trains like [`fit`], evaluates on `dev` after every epoch and leaves the
/// model at the epoch with the highest dev faithfulness. Ties go to the
/// lower dev |E[τ] − K|, then to the earlier epoch.
pub fn fit_select(
    model: &mut SegModel,
    train: &[Pair],
    dev: &[Pair],
    cfg: &TrainConfig,
    opts: &DecodeOptions,
    mut on_epoch: impl FnMut(&EpochLog, &EvalReport),
) -> Result<Selection> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("model selection needs dev pairs".into()));
    }
    let mut reports: Vec<EvalReport> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, SegModel)> = None;
    let mut failure: Option<Error> = None;
    let logs = fit(model, train, cfg, |log, m| {
        if failure.is_some() {
            return;
        }
        match evaluate(m, dev, opts) {
            Ok(r) => {
                let keep = match &best {
                    None => true,
                    Some((e, _)) => better(&r, &reports[*e]),
                };
                if keep {
                    best = Some((log.epoch, m.clone()));
                }
                on_epoch(log, &r);
                reports.push(r);
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let (best_epoch, snapshot) = best.ok_or_else(|| Error::InvalidArgument("training ran zero epochs".into()))?;
    *model = snapshot;
    Ok(Selection { logs, dev: reports, best_epoch })
}
