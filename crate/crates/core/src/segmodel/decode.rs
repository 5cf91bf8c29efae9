use serde::{Deserialize, Serialize};

use super::data::{EOS, SEG_END, UNK};
use super::model::{Encoded, RecordSet, SegModel};
use crate::lattice::SegmentationPath;
use crate::ndgrad::{Bound, Tensor, Value};
use crate::{Error, Result};

/// Decoder settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    /// 1 is greedy.
    pub beam: usize,
    /// Rank beam hypotheses by score per emitted token.
    pub length_norm: bool,
    /// Forbid any token that would repeat a trigram.
    pub trigram_block: bool,
    /// Forbid closing a segment made only of punctuation.
    pub no_punct_segments: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 1, length_norm: true, trigram_block: false, no_punct_segments: false }
    }
}

/// A decoded utterance with its segmentation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub path: SegmentationPath,
    pub score: f64,
}

impl Decoded {
    /// `(record, token range)` per segment.
    pub fn segments(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        self.path.segments().map(|(s, len, j)| (j, s..s + len)).collect()
    }
}

#[derive(Clone)]
struct Hyp {
    d: Value,
    tokens: Vec<usize>,
    cuts: Vec<usize>,
    labels: Vec<usize>,
    /// Record of the open segment.
    cur: Option<usize>,
    used: Vec<bool>,
    score: f64,
    done: bool,
}

impl Hyp {
    fn seg_len(&self) -> usize {
        self.tokens.len() - self.cuts.last().copied().unwrap_or(0)
    }

    fn prev(&self) -> Option<usize> {
        self.labels.last().copied()
    }

    fn covered(&self) -> bool {
        self.used[1..].iter().all(|&u| u)
    }

    fn rank(&self, norm: bool) -> f64 {
        if norm {
            self.score / self.tokens.len().max(1) as f64
        } else {
            self.score
        }
    }
}

fn repeats_trigram(tokens: &[usize], next: usize) -> bool {
    let n = tokens.len();
    if n < 2 {
        return false;
    }
    let (a, b) = (tokens[n - 2], tokens[n - 1]);
    tokens.windows(3).any(|w| w[0] == a && w[1] == b && w[2] == next)
}

/// Segment-by-segment generation under the hard constraints: no empty
/// segment, no non-null record twice, no two null segments in a row, and
/// the output ends as soon as every non-null record has been realized.
/// Segments are closed by the end marker or forced closed at length L.
pub fn constrained_decode(model: &SegModel, rs: &RecordSet, opts: &DecodeOptions) -> Result<Decoded> {
    if opts.beam == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    let b = model.params.bind_const();
    let enc = model.encode(&b, rs);
    let k1 = enc.labels();
    let l = model.cfg.max_seg_len;
    let start = Hyp {
        d: enc.d0.clone(),
        tokens: Vec::new(),
        cuts: vec![0],
        labels: Vec::new(),
        cur: None,
        used: vec![false; k1],
        score: 0.0,
        done: false,
    };
    let mut beam = vec![start];
    // every other segment realizes a new record, so this bounds the search
    let max_steps = (2 * k1 + 1) * (l + 2);
    for _ in 0..max_steps {
        if beam.iter().all(|h| h.done) {
            break;
        }
        let mut cands: Vec<Hyp> = Vec::new();
        for h in &beam {
            if h.done {
                cands.push(h.clone());
                continue;
            }
            expand(model, &b, &enc, h, opts, &mut cands)?;
        }
        if cands.is_empty() {
            return Err(Error::DecodeFailure(format!(
                "no admissible continuation with {} records",
                k1 - 1
            )));
        }
        cands.sort_by(|a, c| c.rank(opts.length_norm).total_cmp(&a.rank(opts.length_norm)));
        cands.truncate(opts.beam);
        beam = cands;
    }
    let best = beam
        .into_iter()
        .filter(|h| h.done)
        .max_by(|a, c| a.rank(opts.length_norm).total_cmp(&c.rank(opts.length_norm)))
        .ok_or_else(|| Error::DecodeFailure("search budget exhausted before all records were realized".into()))?;
    if !best.covered() {
        return Err(Error::DecodeFailure("finished without covering every record".into()));
    }
    Ok(Decoded {
        path: SegmentationPath { cuts: best.cuts.clone(), labels: best.labels.clone() },
        tokens: best.tokens,
        score: best.score,
    })
}

fn expand(model: &SegModel, b: &Bound, enc: &Encoded, h: &Hyp, opts: &DecodeOptions, out: &mut Vec<Hyp>) -> Result<()> {
    let k1 = enc.labels();
    match h.cur {
        None => {
            let lp = model.transition_logprobs(b, enc, &h.d, h.prev());
            for j in 0..k1 {
                let admissible = if j == 0 { h.prev() != Some(0) } else { !h.used[j] };
                let s = lp.data().data()[j];
                if admissible && s > f64::NEG_INFINITY {
                    let mut n = h.clone();
                    n.cur = Some(j);
                    n.score += s;
                    out.push(n);
                }
            }
        }
        Some(j) => {
            let probs = model.record_dist(b, enc, &h.d, j).probs;
            let p = probs.data().data();
            let seg_len = h.seg_len();
            let voc = model.vocab.len();
            let seg_start = *h.cuts.last().unwrap();
            let punct_only = h.tokens[seg_start..].iter().all(|&t| model.vocab.is_punct_id(t));
            let end_ok = seg_len > 0 && !(opts.no_punct_segments && punct_only);
            let mut options: Vec<(usize, f64)> = Vec::new();
            if seg_len >= model.cfg.max_seg_len {
                // forced close, even when the punctuation rule would object
                options.push((SEG_END, p[SEG_END].ln()));
            } else {
                for (w, &pw) in p.iter().enumerate().take(voc) {
                    if w == UNK || w == EOS || pw <= 0.0 {
                        continue;
                    }
                    if w == SEG_END {
                        if end_ok {
                            options.push((w, pw.ln()));
                        }
                        continue;
                    }
                    if opts.trigram_block && repeats_trigram(&h.tokens, w) {
                        continue;
                    }
                    options.push((w, pw.ln()));
                }
                options.sort_by(|a, c| c.1.total_cmp(&a.1).then(a.0.cmp(&c.0)));
                options.truncate(opts.beam);
            }
            for (w, s) in options {
                let mut n = h.clone();
                n.score += s;
                if w == SEG_END {
                    n.cuts.push(n.tokens.len());
                    n.labels.push(j);
                    if j != 0 {
                        n.used[j] = true;
                    }
                    n.cur = None;
                    if n.covered() {
                        n.done = true;
                    }
                } else {
                    n.d = model.advance(b, &h.d, w);
                    n.tokens.push(w);
                }
                out.push(n);
            }
        }
    }
    Ok(())
}

/// Mean-pooled selected encodings and the renormalized attention path
/// used for content selection. `mask` holds one weight per flattened input
/// token; 0/1 for hard selections.
pub(crate) fn select_init(model: &SegModel, b: &Bound, enc: &Encoded, mask: &Value) -> Value {
    let n = enc.h.shape()[0];
    let hd = model.cfg.hidden;
    let w = mask.reshape(&[n, 1]);
    let pooled = w.broadcast_to(&[n, hd]).mul(&enc.h).sum_axis(0).div(&mask.sum()).reshape(&[1, hd]);
    pooled.matmul(b.get(model.ids.w_sinit)).add(&b.get(model.ids.b_sinit).reshape(&[1, hd])).tanh()
}

/// log p(Y | X, β) under the selection path, including the end-of-text
/// token. `mask` may be soft.
pub fn select_loglik(model: &SegModel, b: &Bound, enc: &Encoded, mask: &Value, y: &[usize]) -> Value {
    let v = model.vocab.len();
    let d0 = select_init(model, b, enc, mask);
    let d = model.decoder_states(b, &d0, y);
    let probs = model.output_dist(b, &d, Some((&enc.h, &enc.src)), Some(mask), None).probs;
    let mut idx: Vec<usize> = y.iter().enumerate().map(|(t, &w)| t * v + w).collect();
    idx.push(y.len() * v + EOS);
    let n = idx.len();
    probs.gather(idx, &[n]).ln().sum()
}

/// Selector logits over the flattened input tokens, conditioned on the
/// target through its mean token embedding.
pub fn selector_logits(model: &SegModel, b: &Bound, enc: &Encoded, y: &[usize]) -> Value {
    let n = enc.h.shape()[0];
    let e = model.cfg.embed;
    let mut s = enc.h.matmul(b.get(model.ids.sel_w)).add(&b.get(model.ids.sel_b).broadcast_to(&[n, 1]));
    if !y.is_empty() {
        let ybar = model.embed_tokens(b, y).sum_axis(0).scale(1.0 / y.len() as f64).reshape(&[e, 1]);
        s = s.add(&enc.h.matmul(b.get(model.ids.sel_wy)).matmul(&ybar));
    }
    s.reshape(&[n])
}

/// Prior selection logits, from the input alone.
pub fn prior_logits(model: &SegModel, b: &Bound, enc: &Encoded) -> Value {
    let n = enc.h.shape()[0];
    enc.h.matmul(b.get(model.ids.prior_w)).add(&b.get(model.ids.prior_b).broadcast_to(&[n, 1])).reshape(&[n])
}

/// Greedy generation from the selected input tokens; attention and copy
/// mass on unselected positions is exactly zero.
pub fn vrs_select_decode(model: &SegModel, rs: &RecordSet, mask: &[f64], max_len: usize) -> Result<Vec<usize>> {
    let b = model.params.bind_const();
    let enc = model.encode(&b, rs);
    if mask.len() != enc.src.len() {
        return Err(Error::Shape(format!("mask of length {} for {} input tokens", mask.len(), enc.src.len())));
    }
    if !mask.iter().any(|&m| m > 0.0) {
        return Err(Error::InvalidArgument("selection mask selects nothing".into()));
    }
    let mv = Value::constant(Tensor::vector(mask.to_vec()));
    let mut d = select_init(model, &b, &enc, &mv);
    let mut out = Vec::new();
    for _ in 0..max_len {
        let probs = model.output_dist(&b, &d, Some((&enc.h, &enc.src)), Some(&mv), None).probs;
        let p = probs.data().data();
        let w = (0..p.len())
            .filter(|&w| w != UNK && w != SEG_END)
            .max_by(|&a, &c| p[a].total_cmp(&p[c]).then(c.cmp(&a)))
            .unwrap();
        if w == EOS {
            break;
        }
        out.push(w);
        d = model.advance(&b, &d, w);
    }
    Ok(out)
}

/// Attention rows of the selection path, for inspection.
pub fn select_attention(model: &SegModel, rs: &RecordSet, mask: &[f64], y: &[usize]) -> Tensor {
    let b = model.params.bind_const();
    let enc = model.encode(&b, rs);
    let mv = Value::constant(Tensor::vector(mask.to_vec()));
    let d0 = select_init(model, &b, &enc, &mv);
    let d = model.decoder_states(&b, &d0, y);
    model.output_dist(&b, &d, Some((&enc.h, &enc.src)), Some(&mv), None).attention.unwrap().data().clone()
}
