use serde::Serialize;

use super::data::{Example, SEG_END};
use super::decode::Decoded;
use super::model::{RecordSet, SegModel};
use crate::lattice::{semimarkov_map, SegmentationPath};
use crate::pointer::{posterior_alignment, PointerState};
use crate::{Error, Result};

/// Posterior over the sources of one emitted token.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenAlignment {
    pub token: String,
    /// Posterior mass of generating from the vocabulary.
    pub gen: f64,
    /// Posterior mass of copying each token of the segment's record, slot
    /// marker first. Empty for the null record. `gen + Σ positions = 1`.
    pub positions: Vec<f64>,
}

/// One decoded segment and the record it realizes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentTrace {
    /// Record index, 0 for null.
    pub record: usize,
    /// `slot=value`, or `null`.
    pub label: String,
    /// Record tokens the position columns refer to.
    pub source: Vec<String>,
    pub tokens: Vec<TokenAlignment>,
}

/// Per-segment, per-token copy posteriors for a decoded output, read from
/// the decoder's pointer mixture at every step.
pub fn trace_alignment(model: &SegModel, rs: &RecordSet, dec: &Decoded) -> Result<Vec<SegmentTrace>> {
    let b = model.params.bind_const();
    let enc = model.encode(&b, rs);
    let d = model.decoder_states(&b, &enc.d0, &dec.tokens);
    let mut out = Vec::new();
    for (j, range) in dec.segments() {
        if j > rs.len() {
            return Err(Error::InvalidArgument(format!("segment labeled {j} with {} records", rs.len())));
        }
        let rows: Vec<usize> = range.clone().collect();
        let dist = model.record_dist(&b, &enc, &d.rows(&rows), j);
        let (label, src) = if j == 0 {
            ("null".to_string(), Vec::new())
        } else {
            let r = rs.get(j);
            let value: Vec<String> = model.vocab.decode(&r.value);
            (format!("{}={}", r.slot, value.join(" ")), enc.src[enc.spans[j - 1].clone()].to_vec())
        };
        let v = model.vocab.len();
        let pv = dist.p_vocab.data();
        let pg = dist.p_gen.data();
        let att = dist.attention.as_ref().map(|a| a.data());
        let mut tokens = Vec::with_capacity(rows.len());
        for (r, &t) in rows.iter().enumerate() {
            let y = dec.tokens[t];
            let (gen, positions) = match &att {
                None => (1.0, Vec::new()),
                Some(a) => {
                    let n = src.len();
                    let st = PointerState::new(
                        pg.data()[r],
                        a.data()[r * n..(r + 1) * n].to_vec(),
                        pv.data()[r * v..(r + 1) * v].to_vec(),
                        src.clone(),
                        None,
                    )?;
                    let al = posterior_alignment(&st, y)?;
                    (al.gen, al.positions)
                }
            };
            tokens.push(TokenAlignment { token: model.vocab.token(y).to_string(), gen, positions });
        }
        out.push(SegmentTrace { record: j, label, source: model.vocab.decode(&src), tokens });
    }
    Ok(out)
}

/// Interior boundaries of a segmentation of `m` tokens.
fn interior(cuts: impl Iterator<Item = usize>, m: usize) -> Vec<usize> {
    cuts.filter(|&c| c > 0 && c < m).collect()
}

/// Boundary counts `(true positives, predicted, gold)` of the model's MAP
/// segmentation of the reference text against its gold segmentation.
pub fn reference_boundaries(model: &SegModel, rs: &RecordSet, example: &Example) -> Result<(SegmentationPath, [usize; 3])> {
    let y = model.vocab.encode(&example.text);
    if y.contains(&SEG_END) {
        return Err(Error::InvalidArgument("reference contains the segment end marker".into()));
    }
    let pots = super::score_tables(model, rs, &y)?;
    let (path, _) = semimarkov_map(&pots)?;
    let counts = boundary_counts(&path, example);
    Ok((path, counts))
}

/// `(true positives, predicted, gold)` interior boundaries of `path`
/// against the example's gold segmentation.
pub fn boundary_counts(path: &SegmentationPath, example: &Example) -> [usize; 3] {
    let m = example.text.len();
    let pred = interior(path.cuts.iter().copied(), m);
    let gold = interior(example.gold_segments.iter().map(|g| g[1]), m);
    let tp = pred.iter().filter(|c| gold.contains(c)).count();
    [tp, pred.len(), gold.len()]
}

/// F1 from summed boundary counts; 1 when both sides are empty.
pub fn boundary_f1(counts: [usize; 3]) -> f64 {
    let [tp, np, ng] = counts;
    let prec = if np == 0 { 1.0 } else { tp as f64 / np as f64 };
    let rec = if ng == 0 { 1.0 } else { tp as f64 / ng as f64 };
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}
