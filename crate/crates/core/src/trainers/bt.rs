use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ndgrad::{accumulate, Adam, Bound, ParamId, ParamSet, Tensor, Value};
use crate::segmodel::GruIds;
use crate::{Error, Result};

/// Toy transduction: a fixed symbol permutation followed by swapping each
/// adjacent pair of positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtTask {
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `mapping[s]` is the target symbol of source symbol `s`.
    pub mapping: Vec<usize>,
}

impl BtTask {
    pub fn new(alphabet: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if alphabet < 2 || min_len == 0 || min_len > max_len {
            return Err(Error::Config("bt task needs alphabet >= 2 and 1 <= min_len <= max_len".into()));
        }
        let mut mapping: Vec<usize> = (0..alphabet).collect();
        mapping.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(BtTask { alphabet, min_len, max_len, mapping })
    }

    /// 30 symbols, lengths 4 to 12.
    pub fn shipped(seed: u64) -> Self {
        BtTask::new(30, 4, 12, seed).expect("shipped task is valid")
    }

    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = src.iter().map(|&s| self.mapping[s]).collect();
        for pair in out.chunks_mut(2) {
            pair.reverse();
        }
        out
    }

    pub fn sample_source(&self, rng: &mut impl Rng) -> Vec<usize> {
        let n = rng.random_range(self.min_len..=self.max_len);
        (0..n).map(|_| rng.random_range(0..self.alphabet)).collect()
    }
}

/// A (source, target) pair of symbol sequences.
pub type SeqPair = (Vec<usize>, Vec<usize>);

/// Labeled pairs, disjoint monolingual pools and held-out pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtData {
    pub labeled: Vec<SeqPair>,
    pub mono_src: Vec<Vec<usize>>,
    pub mono_tgt: Vec<Vec<usize>>,
    pub valid: Vec<SeqPair>,
    pub test: Vec<SeqPair>,
}

impl BtData {
    /// 10 labeled pairs, 500 unpaired sequences per side, 100 validation
    /// and 200 test pairs.
    pub fn shipped(task: &BtTask, seed: u64) -> Self {
        BtData::generate(task, 10, 500, 100, 200, seed)
    }

    /// Every sequence is distinct from every other across all splits, and
    /// the target pool is translated from sources never used elsewhere, so
    /// the monolingual pools are not parallel.
    pub fn generate(task: &BtTask, n_labeled: usize, n_mono: usize, n_valid: usize, n_test: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng| loop {
            let s = task.sample_source(rng);
            if seen.insert(s.clone()) {
                return s;
            }
        };
        let mut pairs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<SeqPair> {
            (0..n).map(|_| {
                let s = fresh(rng);
                let t = task.translate(&s);
                (s, t)
            }).collect()
        };
        let labeled = pairs(n_labeled, &mut rng);
        let mono_src = pairs(n_mono, &mut rng).into_iter().map(|p| p.0).collect();
        let mono_tgt = pairs(n_mono, &mut rng).into_iter().map(|p| p.1).collect();
        let valid = pairs(n_valid, &mut rng);
        let test = pairs(n_test, &mut rng);
        BtData { labeled, mono_src, mono_tgt, valid, test }
    }
}

/// Hyperparameters of the back-translation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BtConfig {
    pub embed: usize,
    pub hidden: usize,
    /// Width of the learned position vectors used in attention.
    pub pos_dim: usize,
    pub init_scale: f64,
    pub lr: f64,
    pub clip: f64,
    pub beam: usize,
    pub batch_size: usize,
    /// Passes over the pseudo pairs per phase.
    pub phase_epochs: usize,
    pub seed: u64,
}

impl Default for BtConfig {
    fn default() -> Self {
        BtConfig {
            embed: 32,
            hidden: 16,
            pos_dim: 16,
            init_scale: 0.1,
            lr: 1e-3,
            clip: 5.0,
            beam: 3,
            batch_size: 10,
            phase_epochs: 2,
            seed: 0,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.pos_dim == 0 || self.beam == 0 || self.batch_size == 0 {
            return Err(Error::Config("bt sizes, beam and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("bt lr and clip must be positive".into()));
        }
        Ok(())
    }
}

/// Translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Source to target, P_f.
    Forward,
    /// Target to source, P_b.
    Backward,
}

/// Full-batch supervised steps per direction before back-translation on
/// the shipped toy.
pub const SHIPPED_INIT_STEPS: usize = 300;

const EOS: usize = 0;
const MAX_POS: usize = 24;

#[derive(Clone, Copy, Debug)]
struct DecIds {
    gru: GruIds,
    w_init: ParamId,
    b_init: ParamId,
    w_att: ParamId,
    pos: ParamId,
    w_od: ParamId,
    w_oe: ParamId,
    w_oh: ParamId,
    b_o: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Two attention decoders over one shared encoder. Source and target
/// symbols live in disjoint ranges of a joint vocabulary after the end
/// marker at id 0.
#[derive(Clone, Debug)]
pub struct BtModel {
    pub cfg: BtConfig,
    pub alphabet: usize,
    pub params: ParamSet,
    emb: ParamId,
    enc: GruIds,
    enc_pos: ParamId,
    fwd: DecIds,
    bwd: DecIds,
}

impl BtModel {
    pub fn new(cfg: BtConfig, alphabet: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (e, h, p, s) = (cfg.embed, cfg.hidden, cfg.pos_dim, cfg.init_scale);
        let v = 1 + 2 * alphabet;
        let mut ps = ParamSet::new();
        let emb = ps.insert_uniform("shared.emb", &[v, e], s, &mut rng);
        let enc = GruIds::insert(&mut ps, "shared.enc", e, h, s, &mut rng);
        let enc_pos = ps.insert_uniform("shared.pos", &[MAX_POS, p], s, &mut rng);
        let mut dec = |name: &str, rng: &mut ChaCha8Rng| DecIds {
            gru: GruIds::insert(&mut ps, &format!("{name}.gru"), e, h, s, rng),
            w_init: ps.insert_uniform(format!("{name}.w_init"), &[h, h], s, rng),
            b_init: ps.insert(format!("{name}.b_init"), Tensor::zeros(&[h])),
            w_att: ps.insert_uniform(format!("{name}.w_att"), &[h, h], s, rng),
            pos: ps.insert_uniform(format!("{name}.pos"), &[MAX_POS, p], s, rng),
            w_od: ps.insert_uniform(format!("{name}.w_od"), &[h, e], s, rng),
            w_oe: ps.insert_uniform(format!("{name}.w_oe"), &[e, e], s, rng),
            w_oh: ps.insert_uniform(format!("{name}.w_oh"), &[h, e], s, rng),
            b_o: ps.insert(format!("{name}.b_o"), Tensor::zeros(&[e])),
            w_out: ps.insert_uniform(format!("{name}.w_out"), &[e, v], s, rng),
            b_out: ps.insert(format!("{name}.b_out"), Tensor::zeros(&[v])),
        };
        let fwd = dec("fwd", &mut rng);
        let bwd = dec("bwd", &mut rng);
        Ok(BtModel { cfg, alphabet, params: ps, emb, enc, enc_pos, fwd, bwd })
    }

    fn vocab(&self) -> usize {
        1 + 2 * self.alphabet
    }

    fn ids(&self, dir: Direction) -> &DecIds {
        match dir {
            Direction::Forward => &self.fwd,
            Direction::Backward => &self.bwd,
        }
    }

    /// Joint-vocabulary ids of the input side and output side symbols.
    fn in_id(&self, dir: Direction, s: usize) -> usize {
        match dir {
            Direction::Forward => 1 + s,
            Direction::Backward => 1 + self.alphabet + s,
        }
    }

    fn out_id(&self, dir: Direction, s: usize) -> usize {
        match dir {
            Direction::Forward => 1 + self.alphabet + s,
            Direction::Backward => 1 + s,
        }
    }

    fn out_symbol(&self, dir: Direction, id: usize) -> usize {
        match dir {
            Direction::Forward => id - 1 - self.alphabet,
            Direction::Backward => id - 1,
        }
    }

    /// Parameters a phase training `dir` may touch: the shared encoder and
    /// that direction's decoder.
    pub fn update_mask(&self, dir: Direction) -> Vec<bool> {
        let prefix = match dir {
            Direction::Forward => "fwd.",
            Direction::Backward => "bwd.",
        };
        self.params.iter().map(|(n, _)| n.starts_with("shared.") || n.starts_with(prefix)).collect()
    }

    /// Whether parameter `name` belongs to the decoder of `dir`.
    pub fn is_decoder_param(name: &str, dir: Direction) -> bool {
        match dir {
            Direction::Forward => name.starts_with("fwd."),
            Direction::Backward => name.starts_with("bwd."),
        }
    }

    fn out_mask(&self, dir: Direction, rows: usize) -> Tensor {
        let v = self.vocab();
        let lo = self.out_id(dir, 0);
        let a = self.alphabet;
        Tensor::from_fn(&[rows, v], |i| {
            let w = i % v;
            if w == EOS || (w >= lo && w < lo + a) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    fn pos_rows(n: usize) -> Vec<usize> {
        (0..n).map(|i| i.min(MAX_POS - 1)).collect()
    }

    fn encode(&self, b: &Bound, dir: Direction, src: &[usize]) -> (Value, Value) {
        let ids: Vec<usize> = src.iter().map(|&s| self.in_id(dir, s)).collect();
        let x = b.get(self.emb).rows(&ids);
        let h0 = Value::constant(Tensor::zeros(&[1, self.cfg.hidden]));
        let h = Value::concat(&self.enc.run(b, &x, &h0), 0);
        (x, h)
    }

    fn init_state(&self, b: &Bound, dec: &DecIds, h: &Value) -> Value {
        let (n, hd) = (h.shape()[0], self.cfg.hidden);
        let pooled = h.sum_axis(0).scale(1.0 / n as f64).reshape(&[1, hd]);
        pooled.matmul(b.get(dec.w_init)).add(&b.get(dec.b_init).reshape(&[1, hd])).tanh()
    }

    /// Output log-probabilities `[r, V]` for decoder rows `d` at output
    /// positions `first..first + r`.
    fn out_logprobs(&self, b: &Bound, dir: Direction, d: &Value, first: usize, x: &Value, h: &Value) -> Value {
        let dec = self.ids(dir);
        let (r, n, e) = (d.shape()[0], h.shape()[0], self.cfg.embed);
        let v = self.vocab();
        let pd = b.get(dec.pos).rows(&Self::pos_rows(first + r)[first..]);
        let pe = b.get(self.enc_pos).rows(&Self::pos_rows(n));
        let scores = d.matmul(b.get(dec.w_att)).matmul(&h.transpose()).add(&pd.matmul(&pe.transpose()));
        let alpha = scores.softmax();
        let ce = alpha.matmul(x);
        let chh = alpha.matmul(h);
        let o = d
            .matmul(b.get(dec.w_od))
            .add(&ce.matmul(b.get(dec.w_oe)))
            .add(&chh.matmul(b.get(dec.w_oh)))
            .add(&b.get(dec.b_o).broadcast_to(&[r, e]))
            .tanh();
        o.matmul(b.get(dec.w_out))
            .add(&b.get(dec.b_out).broadcast_to(&[r, v]))
            .add_tensor(&self.out_mask(dir, r))
            .log_softmax()
    }

    /// −log P(out | inp) summed over the output symbols and the end marker.
    pub fn nll(&self, b: &Bound, dir: Direction, inp: &[usize], out: &[usize]) -> Value {
        let dec = self.ids(dir);
        let (x, h) = self.encode(b, dir, inp);
        let d0 = self.init_state(b, dec, &h);
        let mut states = vec![d0.clone()];
        // d_t predicts output t; output t then advances the state
        let ins: Vec<usize> = out.iter().map(|&s| self.out_id(dir, s)).collect();
        if !ins.is_empty() {
            let xe = b.get(self.emb).rows(&ins);
            states.extend(dec.gru.run(b, &xe, &d0));
        }
        let d = Value::concat(&states, 0);
        let lp = self.out_logprobs(b, dir, &d, 0, &x, &h);
        let v = self.vocab();
        let mut idx: Vec<usize> = ins.iter().enumerate().map(|(t, &w)| t * v + w).collect();
        idx.push(ins.len() * v + EOS);
        let n = idx.len();
        lp.gather(idx, &[n]).sum().neg()
    }

    /// Beam search; returns the best finished hypothesis by total log-prob.
    pub fn translate(&self, dir: Direction, inp: &[usize], beam: usize, max_len: usize) -> Vec<usize> {
        let b = self.params.bind_const();
        let dec = self.ids(dir);
        let (x, h) = self.encode(&b, dir, inp);
        let d0 = self.init_state(&b, dec, &h);
        let mut live: Vec<(Vec<usize>, Value, f64)> = vec![(Vec::new(), d0, 0.0)];
        let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
        for step in 0..=max_len {
            let mut cands: Vec<(Vec<usize>, Value, usize, f64)> = Vec::new();
            for (toks, d, s) in &live {
                let lp = self.out_logprobs(&b, dir, d, step, &x, &h);
                let row = lp.data().data();
                for (w, &l) in row.iter().enumerate() {
                    if l > f64::NEG_INFINITY && (w != EOS || step > 0) && (w == EOS || step < max_len) {
                        cands.push((toks.clone(), d.clone(), w, s + l));
                    }
                }
            }
            cands.sort_by(|a, c| c.3.total_cmp(&a.3).then(a.2.cmp(&c.2)));
            cands.truncate(beam);
            live.clear();
            for (mut toks, d, w, s) in cands {
                if w == EOS {
                    done.push((toks, s));
                } else {
                    let xe = b.get(self.emb).rows(&[w]);
                    let nd = dec.gru.step(&b, &xe, &d);
                    toks.push(self.out_symbol(dir, w));
                    live.push((toks, nd, s));
                }
            }
            let best_done = done.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.2).fold(f64::NEG_INFINITY, f64::max);
            if live.is_empty() || best_done >= best_live {
                break;
            }
        }
        done.into_iter()
            .max_by(|a, c| a.1.total_cmp(&c.1))
            .map(|d| d.0)
            .unwrap_or_default()
    }

    /// Mean per-symbol cross-entropy (end marker included) on pairs.
    pub fn cross_entropy(&self, dir: Direction, pairs: &[SeqPair]) -> f64 {
        let b = self.params.bind_const();
        let (mut tot, mut n) = (0.0, 0usize);
        for (s, t) in pairs {
            let (inp, out) = orient(dir, s, t);
            tot += self.nll(&b, dir, inp, out).item();
            n += out.len() + 1;
        }
        tot / n as f64
    }

    /// Fraction of pairs translated exactly.
    pub fn exact_match(&self, dir: Direction, pairs: &[SeqPair], beam: usize) -> f64 {
        let hits: usize = pairs
            .par_iter()
            .map(|(s, t)| {
                let (inp, out) = orient(dir, s, t);
                (self.translate(dir, inp, beam, out.len().max(inp.len()) + 4) == *out) as usize
            })
            .sum();
        hits as f64 / pairs.len().max(1) as f64
    }
}

fn orient<'a>(dir: Direction, s: &'a [usize], t: &'a [usize]) -> (&'a [usize], &'a [usize]) {
    match dir {
        Direction::Forward => (s, t),
        Direction::Backward => (t, s),
    }
}

/// Models, data and optimizer state of the loop.
#[derive(Clone, Debug)]
pub struct BtState {
    pub model: BtModel,
    pub data: BtData,
    pub iteration: usize,
    opt: Adam,
    rng: ChaCha8Rng,
}

/// One line of the per-iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtLogRow {
    pub iter: usize,
    pub fwd_ce: f64,
    pub bwd_ce: f64,
    pub exact_match: f64,
}

impl BtState {
    pub fn new(cfg: BtConfig, task: &BtTask, data: BtData) -> Result<Self> {
        if data.labeled.is_empty() {
            return Err(Error::InvalidArgument("back-translation needs labeled pairs".into()));
        }
        let opt = Adam::new(cfg.lr).with_clip(Some(cfg.clip));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let model = BtModel::new(cfg, task.alphabet)?;
        Ok(BtState { model, data, iteration: 0, opt, rng })
    }

    /// Validation cross-entropies and forward test exact-match.
    pub fn metrics(&self) -> BtLogRow {
        BtLogRow {
            iter: self.iteration,
            fwd_ce: self.model.cross_entropy(Direction::Forward, &self.data.valid),
            bwd_ce: self.model.cross_entropy(Direction::Backward, &self.data.valid),
            exact_match: self.model.exact_match(Direction::Forward, &self.data.test, self.model.cfg.beam),
        }
    }

    /// One optimizer step per minibatch of `pairs` for direction `dir`;
    /// parameters outside the direction's mask are left bit-identical.
    fn train_pairs(&mut self, dir: Direction, pairs: &[SeqPair], epochs: usize) -> Vec<f64> {
        let mask = self.model.update_mask(dir);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for batch in order.chunks(self.model.cfg.batch_size) {
                let mut grads = self.model.params.zeros_like();
                let mut tot = 0.0;
                for &i in batch {
                    let b = self.model.params.bind();
                    let (inp, out) = orient(dir, &pairs[i].0, &pairs[i].1);
                    let l = self.model.nll(&b, dir, inp, out);
                    l.backward();
                    tot += l.item();
                    accumulate(&mut grads, &b.grads());
                }
                let scale = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| g.scale_assign(scale));
                self.opt.step_masked(&mut self.model.params, &grads, &mask);
                losses.push(tot * scale);
            }
        }
        losses
    }
}

/// Maximum likelihood on the labeled pairs in both directions, `steps`
/// full-batch updates each.
pub fn bt_init(state: &mut BtState, steps: usize) -> Vec<f64> {
    let labeled = state.data.labeled.clone();
    let mut losses = Vec::with_capacity(2 * steps);
    for _ in 0..steps {
        for dir in [Direction::Forward, Direction::Backward] {
            let bs = state.model.cfg.batch_size;
            state.model.cfg.batch_size = labeled.len();
            losses.extend(state.train_pairs(dir, &labeled, 1));
            state.model.cfg.batch_size = bs;
        }
    }
    losses
}

/// Pseudo pairs `(inp, dec(inp))` decoded by `dir` with the configured
/// beam, in pool order.
pub fn pseudo_pairs(model: &BtModel, dir: Direction, pool: &[Vec<usize>]) -> Vec<SeqPair> {
    let beam = model.cfg.beam;
    pool.par_iter()
        .map(|inp| {
            let out = model.translate(dir, inp, beam, inp.len() + 4);
            (inp.clone(), out)
        })
        .collect()
}

/// Decodes pseudo sources for the target pool with P_b (no gradient through
/// the decode) and trains P_f on them plus the labeled pairs. Returns the
/// per-batch training losses.
pub fn bt_backward_phase(state: &mut BtState) -> Vec<f64> {
    let pseudo = pseudo_pairs(&state.model, Direction::Backward, &state.data.mono_tgt);
    let mut pairs: Vec<SeqPair> = pseudo.into_iter().map(|(t, s)| (s, t)).collect();
    pairs.extend(state.data.labeled.iter().cloned());
    let epochs = state.model.cfg.phase_epochs;
    state.train_pairs(Direction::Forward, &pairs, epochs)
}

/// The mirror phase: pseudo targets from P_f train P_b.
pub fn bt_forward_phase(state: &mut BtState) -> Vec<f64> {
    let mut pairs = pseudo_pairs(&state.model, Direction::Forward, &state.data.mono_src);
    pairs.extend(state.data.labeled.iter().cloned());
    let epochs = state.model.cfg.phase_epochs;
    state.train_pairs(Direction::Backward, &pairs, epochs)
}

/// Alternates the two phases `n_iters` times, logging metrics after each
/// iteration. Zero iterations leave the state untouched.
pub fn bt_train(state: &mut BtState, n_iters: usize, mut on_iter: impl FnMut(&BtLogRow)) -> Vec<BtLogRow> {
    let mut log = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        bt_backward_phase(state);
        bt_forward_phase(state);
        state.iteration += 1;
        let row = state.metrics();
        on_iter(&row);
        log.push(row);
    }
    log
}

/// Writes the log as JSON lines.
pub fn write_bt_log(rows: &[BtLogRow], mut w: impl Write) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
