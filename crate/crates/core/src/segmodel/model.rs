use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Vocab, SEG_END, UNK};
use crate::dists::PROB_FLOOR;
use crate::lattice::{semimarkov_forward_and_expected, SegmentalPotentials, SegmentalValues};
use crate::ndgrad::{Bound, ParamId, ParamSet, Tensor, Value};
use crate::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// One input record: a slot marker token and the value's token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub slot: String,
    pub slot_id: usize,
    pub value: Vec<usize>,
}

/// Input records r₁…r_K; the null record r₀ is implicit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSet {
    records: Vec<Record>,
}

pub const MAX_RECORDS: usize = 8;

impl RecordSet {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() || records.len() > MAX_RECORDS {
            return Err(Error::InvalidArgument(format!(
                "record count {} outside 1..={MAX_RECORDS}",
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.value.is_empty() {
                return Err(Error::InvalidArgument(format!("record {} has an empty value", r.slot)));
            }
            if records[..i].iter().any(|o| o.slot == r.slot) {
                return Err(Error::InvalidArgument(format!("slot {} repeated", r.slot)));
            }
        }
        Ok(RecordSet { records })
    }

    /// K, the number of non-null records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record `i` for `i` in `1..=K`.
    pub fn get(&self, i: usize) -> &Record {
        &self.records[i - 1]
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Flattened input tokens and each record's span in them.
    pub fn flatten(&self) -> (Vec<usize>, Vec<Range<usize>>) {
        let mut toks = Vec::new();
        let mut spans = Vec::with_capacity(self.len());
        for r in &self.records {
            let s = toks.len();
            toks.push(r.slot_id);
            toks.extend_from_slice(&r.value);
            spans.push(s..toks.len());
        }
        (toks, spans)
    }
}

/// Model sizes and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegModelConfig {
    pub embed: usize,
    pub hidden: usize,
    /// Longest segment L.
    pub max_seg_len: usize,
    pub init_scale: f64,
    /// η = K + eta_offset.
    pub eta_offset: f64,
    pub gamma: f64,
    /// Whether the granularity regularizer is part of the loss.
    pub regularize: bool,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig { embed: 32, hidden: 32, max_seg_len: 6, init_scale: 0.1, eta_offset: 0.0, gamma: 1.0, regularize: true }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.max_seg_len == 0 {
            return Err(Error::Config("embed, hidden and max_seg_len must be positive".into()));
        }
        if self.gamma < 0.0 || !self.init_scale.is_finite() || self.init_scale <= 0.0 {
            return Err(Error::Config("gamma must be >= 0 and init_scale > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruIds {
    wz: ParamId,
    wr: ParamId,
    wn: ParamId,
    uz: ParamId,
    ur: ParamId,
    un: ParamId,
    bz: ParamId,
    br: ParamId,
    bn: ParamId,
}

impl GruIds {
    pub(crate) fn insert(ps: &mut ParamSet, prefix: &str, e: usize, h: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |n: &str, r: usize| ps.insert_uniform(format!("{prefix}.{n}"), &[r, h], scale, rng);
        let (wz, wr, wn) = (w("wz", e), w("wr", e), w("wn", e));
        let (uz, ur, un) = (w("uz", h), w("ur", h), w("un", h));
        let mut b = |n: &str| ps.insert(format!("{prefix}.{n}"), Tensor::zeros(&[h]));
        GruIds { wz, wr, wn, uz, ur, un, bz: b("bz"), br: b("br"), bn: b("bn") }
    }

    /// Runs the cell over the rows of `x: [n, e]` from `h0: [1, h]` and
    /// returns the n states, each `[1, h]`.
    pub(crate) fn run(&self, b: &Bound, x: &Value, h0: &Value) -> Vec<Value> {
        let n = x.shape()[0];
        let h = h0.shape()[1];
        let proj = |w: ParamId, bias: ParamId| x.matmul(b.get(w)).add(&b.get(bias).broadcast_to(&[n, h]));
        let (xz, xr, xn) = (proj(self.wz, self.bz), proj(self.wr, self.br), proj(self.wn, self.bn));
        let mut out = Vec::with_capacity(n);
        let mut cur = h0.clone();
        for t in 0..n {
            cur = self.cell(b, &xz.rows(&[t]), &xr.rows(&[t]), &xn.rows(&[t]), &cur);
            out.push(cur.clone());
        }
        out
    }

    /// One step with pre-projected input gates.
    fn cell(&self, b: &Bound, xz: &Value, xr: &Value, xn: &Value, h: &Value) -> Value {
        let z = xz.add(&h.matmul(b.get(self.uz))).sigmoid();
        let r = xr.add(&h.matmul(b.get(self.ur))).sigmoid();
        let n = xn.add(&r.mul(&h.matmul(b.get(self.un)))).tanh();
        n.add(&z.mul(&h.sub(&n)))
    }

    /// One step from an embedded token `x: [1, e]`.
    pub(crate) fn step(&self, b: &Bound, x: &Value, h: &Value) -> Value {
        let hd = h.shape()[1];
        let proj = |w: ParamId, bias: ParamId| x.matmul(b.get(w)).add(&b.get(bias).reshape(&[1, hd]));
        self.cell(b, &proj(self.wz, self.bz), &proj(self.wr, self.br), &proj(self.wn, self.bn), h)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ids {
    pub(crate) emb: ParamId,
    enc: GruIds,
    dec: GruIds,
    w_init: ParamId,
    b_init: ParamId,
    pub(crate) w_sinit: ParamId,
    pub(crate) b_sinit: ParamId,
    w_att: ParamId,
    w_od: ParamId,
    w_oc: ParamId,
    w_of: ParamId,
    b_o: ParamId,
    w_gd: ParamId,
    w_gc: ParamId,
    b_g: ParamId,
    m: ParamId,
    n: ParamId,
    f0: ParamId,
    pub(crate) sel_w: ParamId,
    pub(crate) sel_b: ParamId,
    pub(crate) sel_wy: ParamId,
    pub(crate) prior_w: ParamId,
    pub(crate) prior_b: ParamId,
}

/// The segmental data-to-text model.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: SegModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub(crate) ids: Ids,
}

/// Encoder outputs for one record set.
pub struct Encoded {
    /// [n, h] token states of the flattened records.
    pub h: Value,
    /// Flattened input token ids.
    pub src: Vec<usize>,
    /// Span of record `i` (1-based) at index `i - 1`.
    pub spans: Vec<Range<usize>>,
    /// [K+1, e] record representations; row 0 is the learned null vector.
    pub f: Value,
    /// [K+1, h] record context vectors; row 0 is zero.
    pub a: Value,
    /// [1, h] initial decoder state.
    pub d0: Value,
}

impl Encoded {
    /// K + 1.
    pub fn labels(&self) -> usize {
        self.spans.len() + 1
    }
}

/// Output distribution of one record-conditioned step, for `r` decoder rows.
pub struct StepDist {
    /// [r, V] pointer-mixture probabilities.
    pub probs: Value,
    /// [r, n_j] attention over the record's tokens (absent for null).
    pub attention: Option<Value>,
    /// [r, 1] generation probability.
    pub p_gen: Value,
    /// [r, V] vocabulary distribution before mixing.
    pub p_vocab: Value,
}

impl SegModel {
    pub fn new(cfg: SegModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, h) = (vocab.len(), cfg.embed, cfg.hidden);
        let s = cfg.init_scale;
        let mut ps = ParamSet::new();
        let emb = ps.insert_uniform("emb", &[v, e], s, &mut rng);
        let enc = GruIds::insert(&mut ps, "enc", e, h, s, &mut rng);
        let dec = GruIds::insert(&mut ps, "dec", e, h, s, &mut rng);
        let w_init = ps.insert_uniform("dec.w_init", &[h, h], s, &mut rng);
        let b_init = ps.insert("dec.b_init", Tensor::zeros(&[h]));
        let w_sinit = ps.insert_uniform("sel.w_init", &[h, h], s, &mut rng);
        let b_sinit = ps.insert("sel.b_init", Tensor::zeros(&[h]));
        let w_att = ps.insert_uniform("att.w", &[h, h], s, &mut rng);
        let w_od = ps.insert_uniform("out.w_d", &[h, e], s, &mut rng);
        let w_oc = ps.insert_uniform("out.w_c", &[h, e], s, &mut rng);
        let w_of = ps.insert_uniform("out.w_f", &[e, e], s, &mut rng);
        let b_o = ps.insert("out.b", Tensor::zeros(&[e]));
        let w_gd = ps.insert_uniform("gen.w_d", &[h, 1], s, &mut rng);
        let w_gc = ps.insert_uniform("gen.w_c", &[h, 1], s, &mut rng);
        let b_g = ps.insert("gen.b", Tensor::zeros(&[1]));
        let m = ps.insert_uniform("trans.m", &[h, e], s, &mut rng);
        let n = ps.insert_uniform("trans.n", &[h, e], s, &mut rng);
        let f0 = ps.insert_uniform("rec.null", &[e], s, &mut rng);
        let sel_w = ps.insert_uniform("sel.w", &[h, 1], s, &mut rng);
        let sel_b = ps.insert("sel.b", Tensor::zeros(&[1]));
        let sel_wy = ps.insert_uniform("sel.w_y", &[h, e], s, &mut rng);
        let prior_w = ps.insert_uniform("prior.w", &[h, 1], s, &mut rng);
        let prior_b = ps.insert("prior.b", Tensor::zeros(&[1]));
        let ids = Ids {
            emb, enc, dec, w_init, b_init, w_sinit, b_sinit, w_att, w_od, w_oc, w_of, b_o, w_gd, w_gc, b_g, m, n, f0,
            sel_w, sel_b, sel_wy, prior_w, prior_b,
        };
        Ok(SegModel { cfg, vocab, params: ps, ids })
    }

    pub fn embed_tokens(&self, b: &Bound, toks: &[usize]) -> Value {
        b.get(self.ids.emb).rows(toks)
    }

    pub fn encode(&self, b: &Bound, rs: &RecordSet) -> Encoded {
        let (src, spans) = rs.flatten();
        let (e, hd) = (self.cfg.embed, self.cfg.hidden);
        let x = self.embed_tokens(b, &src);
        let h0 = Value::constant(Tensor::zeros(&[1, hd]));
        let states = self.ids.enc.run(b, &x, &h0);
        let h = Value::concat(&states, 0);
        let mut f_rows = vec![b.get(self.ids.f0).reshape(&[1, e])];
        let mut a_rows = vec![Value::constant(Tensor::zeros(&[1, hd]))];
        let xd = x.data();
        for sp in &spans {
            // elementwise max over the record's token embeddings
            let idx: Vec<usize> = (0..e)
                .map(|c| {
                    let best = sp.clone().fold(sp.start, |bi, r| if xd.data()[r * e + c] > xd.data()[bi * e + c] { r } else { bi });
                    best * e + c
                })
                .collect();
            f_rows.push(x.gather(idx, &[1, e]));
            let rows: Vec<usize> = sp.clone().collect();
            a_rows.push(h.rows(&rows).sum_axis(0).scale(1.0 / rows.len() as f64).reshape(&[1, hd]));
        }
        let n = src.len();
        let pooled = h.sum_axis(0).scale(1.0 / n as f64).reshape(&[1, hd]);
        let d0 = pooled.matmul(b.get(self.ids.w_init)).add(&b.get(self.ids.b_init).reshape(&[1, hd])).tanh();
        Encoded { h, src, spans, f: Value::concat(&f_rows, 0), a: Value::concat(&a_rows, 0), d0 }
    }

    /// Decoder states `[d_0; …; d_m]` after teacher-forcing `y`, as `[m+1, h]`.
    pub fn decoder_states(&self, b: &Bound, d0: &Value, y: &[usize]) -> Value {
        let mut states = vec![d0.clone()];
        if !y.is_empty() {
            states.extend(self.ids.dec.run(b, &self.embed_tokens(b, y), d0));
        }
        Value::concat(&states, 0)
    }

    /// Advances the decoder by one emitted token.
    pub fn advance(&self, b: &Bound, d: &Value, tok: usize) -> Value {
        self.ids.dec.step(b, &self.embed_tokens(b, &[tok]), d)
    }

    fn unk_mask(&self, r: usize) -> Tensor {
        let v = self.vocab.len();
        Tensor::from_fn(&[r, v], |i| if i % v == UNK { NEG_INF } else { 0.0 })
    }

    /// Pointer-mixture output for rows of decoder states `d: [r, h]` given
    /// attention keys `keys: [n_j, h]` over source ids `src` (None for a zero
    /// context and pure generation). `weights` optionally rescales attention
    /// before renormalization (selection masks). `record: [1, e]` is the
    /// selected record's representation, when there is one.
    pub fn output_dist(
        &self,
        b: &Bound,
        d: &Value,
        keys: Option<(&Value, &[usize])>,
        weights: Option<&Value>,
        record: Option<&Value>,
    ) -> StepDist {
        let (r, e) = (d.shape()[0], self.cfg.embed);
        let v = self.vocab.len();
        let emb_t = b.get(self.ids.emb).transpose();
        let mut feat = d.matmul(b.get(self.ids.w_od));
        if let Some(f) = record {
            feat = feat.add(&f.matmul(b.get(self.ids.w_of)).broadcast_to(&[r, e]));
        }
        let mut gate = d.matmul(b.get(self.ids.w_gd));
        let mut attention = None;
        let mut copy = None;
        if let Some((keys, src)) = keys {
            let n = keys.shape()[0];
            let scores = d.matmul(b.get(self.ids.w_att)).matmul(&keys.transpose());
            let mut alpha = scores.softmax();
            if let Some(w) = weights {
                let un = alpha.mul(&w.reshape(&[1, n]).broadcast_to(&[r, n]));
                let z = un.sum_axis(1).reshape(&[r, 1]).broadcast_to(&[r, n]);
                alpha = un.div(&z);
            }
            let ctx = alpha.matmul(keys);
            feat = feat.add(&ctx.matmul(b.get(self.ids.w_oc)));
            gate = gate.add(&ctx.matmul(b.get(self.ids.w_gc)));
            let onehot = Tensor::from_fn(&[n, v], |i| if src[i / v] == i % v { 1.0 } else { 0.0 });
            copy = Some(alpha.matmul(&Value::constant(onehot)));
            attention = Some(alpha);
        }
        let o = feat.add(&b.get(self.ids.b_o).broadcast_to(&[r, e])).tanh();
        let p_vocab = o.matmul(&emb_t).add_tensor(&self.unk_mask(r)).softmax();
        match copy {
            None => StepDist { probs: p_vocab.clone(), attention, p_gen: Value::constant(Tensor::full(&[r, 1], 1.0)), p_vocab },
            Some(copy) => {
                let pg = gate
                    .add(&b.get(self.ids.b_g).broadcast_to(&[r, 1]))
                    .sigmoid()
                    .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                let pgb = pg.broadcast_to(&[r, v]);
                let probs = pgb.mul(&p_vocab).add(&pgb.neg().add_const(1.0).mul(&copy));
                StepDist { probs, attention, p_gen: pg, p_vocab }
            }
        }
    }

    /// Record-conditioned output for decoder rows `d: [r, h]`.
    pub fn record_dist(&self, b: &Bound, enc: &Encoded, d: &Value, j: usize) -> StepDist {
        let f = enc.f.rows(&[j]);
        if j == 0 {
            return self.output_dist(b, d, None, None, Some(&f));
        }
        let sp = &enc.spans[j - 1];
        let rows: Vec<usize> = sp.clone().collect();
        let keys = enc.h.rows(&rows);
        self.output_dist(b, d, Some((&keys, &enc.src[sp.clone()])), None, Some(&f))
    }

    /// `[K+1]` log-probabilities of the next record given the previous
    /// record `prev` (None at the start) and the current decoder state.
    pub fn transition_logprobs(&self, b: &Bound, enc: &Encoded, d: &Value, prev: Option<usize>) -> Value {
        let k1 = enc.labels();
        let e = self.cfg.embed;
        let mut u = d.matmul(b.get(self.ids.n));
        if let Some(q) = prev {
            u = u.add(&enc.a.rows(&[q]).matmul(b.get(self.ids.m)));
        }
        let mut s = u.matmul(&enc.f.transpose()).reshape(&[k1]);
        if let Some(q) = prev.filter(|&q| q != 0) {
            s = s.add_tensor(&Tensor::from_fn(&[k1], |j| if j == q { NEG_INF } else { 0.0 }));
        }
        debug_assert_eq!(u.shape(), &[1, e]);
        s.log_softmax()
    }

    /// Differentiable lattice potentials for target `y` in one decoder sweep.
    pub fn score_values(&self, b: &Bound, enc: &Encoded, y: &[usize]) -> Result<SegmentalValues> {
        let m = y.len();
        if m == 0 {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        let (k1, l, v) = (enc.labels(), self.cfg.max_seg_len, self.vocab.len());
        let d = self.decoder_states(b, &enc.d0, y);
        let mut idx: Vec<usize> = (0..m).map(|t| t * v + y[t]).collect();
        idx.extend((0..m).map(|t| (t + 1) * v + SEG_END));
        let mut cols = Vec::with_capacity(k1);
        for j in 0..k1 {
            let p = self.record_dist(b, enc, &d, j).probs;
            cols.push(p.gather(idx.clone(), &[2 * m, 1]).ln());
        }
        // [2m, K+1]: rows 0..m token log-probs, rows m..2m end-marker log-probs
        let te = Value::concat(&cols, 1);
        let tok_rows: Vec<usize> = (0..m).collect();
        let eos_rows: Vec<usize> = (m..2 * m).collect();
        let tok = te.rows(&tok_rows);
        let eos = te.rows(&eos_rows);
        let cum = Value::concat(&[Value::constant(Tensor::zeros(&[1, k1])), tok.cumsum()], 0);
        let ends: Vec<usize> = (1..=m).collect();
        let fin = cum.rows(&ends).add(&eos);
        let padded = Value::concat(&[fin, Value::constant(Tensor::full(&[l, k1], NEG_INF))], 0);
        let gen: Vec<Value> = (0..m)
            .map(|p| {
                let rows: Vec<usize> = (p..p + l).collect();
                padded.rows(&rows).sub(&cum.rows(&[p]).broadcast_to(&[l, k1]))
            })
            .collect();

        let ft = enc.f.transpose();
        let x = enc.a.matmul(b.get(self.ids.m)).matmul(&ft);
        let yv = d.matmul(b.get(self.ids.n)).matmul(&ft);
        let mask = Tensor::from_fn(&[k1, k1], |i| if i / k1 == i % k1 && i % k1 != 0 { NEG_INF } else { 0.0 });
        let mut trans = Vec::with_capacity(m);
        trans.push(Value::constant(Tensor::zeros(&[k1, k1])));
        for p in 1..m {
            let s = x.add(&yv.rows(&[p]).broadcast_to(&[k1, k1])).add_tensor(&mask);
            trans.push(s.log_softmax().transpose());
        }
        let init = yv.row(0).log_softmax();
        Ok(SegmentalValues { gen, trans, init })
    }

    /// η for an input with `k` records.
    pub fn eta(&self, k: usize) -> f64 {
        k as f64 + self.cfg.eta_offset
    }
}

/// Loss terms of one pair.
pub struct LossParts {
    pub loss: Value,
    pub log_z: f64,
    pub expected_segments: f64,
}

/// −log Z + max(|E[τ] − η|, γ), the regularizer dropped when disabled.
pub fn train_loss(model: &SegModel, b: &Bound, rs: &RecordSet, y: &[usize], eta: f64, gamma: f64) -> Result<LossParts> {
    if eta < 1.0 || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("need eta >= 1 and gamma >= 0, got {eta}, {gamma}")));
    }
    let enc = model.encode(b, rs);
    let sv = model.score_values(b, &enc, y)?;
    let (log_z, et) = semimarkov_forward_and_expected(&sv, true);
    let et = et.unwrap();
    let mut loss = log_z.neg();
    if model.cfg.regularize {
        loss = loss.add(&et.add_const(-eta).abs().max_const(gamma));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite(format!("loss {} on a target of length {}", loss.item(), y.len())));
    }
    Ok(LossParts { log_z: log_z.item(), expected_segments: et.item(), loss })
}

/// Plain potentials for inspection and the exact lattice routines.
pub fn score_tables(model: &SegModel, rs: &RecordSet, y: &[usize]) -> Result<SegmentalPotentials> {
    let b = model.params.bind_const();
    let enc = model.encode(&b, rs);
    Ok(model.score_values(&b, &enc, y)?.to_potentials())
}
