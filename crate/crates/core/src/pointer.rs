//! Copy and point output distributions: the pointer-generator mixture, the
//! generalized pointer with relation edits and top-k marginalization, and
//! Bayes posterior alignment.

use rand::Rng;
use serde::Serialize;

use crate::dists::PROB_FLOOR;
use crate::ndgrad::{logsumexp_slice, Tensor, Value};
use crate::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Word vectors shared by the input embedding and the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    /// [V, e]
    pub matrix: Tensor,
    /// Token whose output logit is masked to −∞.
    pub unk: Option<usize>,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor, unk: Option<usize>) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[0] == 0 || matrix.shape()[1] == 0 {
            return Err(Error::Shape(format!("embedding table must be [V,e], got {:?}", matrix.shape())));
        }
        if let Some(u) = unk {
            if u >= matrix.shape()[0] {
                return Err(Error::InvalidArgument(format!("unk id {u} outside vocabulary")));
            }
        }
        Ok(EmbeddingTable { matrix, unk })
    }

    /// The toy table with orthonormal rows: emb[w] = e_w, e = V.
    pub fn orthonormal(v: usize) -> Self {
        EmbeddingTable { matrix: Tensor::from_fn(&[v, v], |i| if i / v == i % v { 1.0 } else { 0.0 }), unk: None }
    }

    pub fn random(v: usize, e: usize, scale: f64, rng: &mut impl Rng) -> Self {
        EmbeddingTable { matrix: Tensor::from_fn(&[v, e], |_| rng.random_range(-scale..scale)), unk: None }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, w: usize) -> &[f64] {
        self.matrix.row(w)
    }

    /// Output logits h·embᵀ with UNK masked.
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        assert_eq!(h.len(), self.dim(), "query of length {} for embedding dim {}", h.len(), self.dim());
        (0..self.vocab_size())
            .map(|w| {
                if Some(w) == self.unk {
                    f64::NEG_INFINITY
                } else {
                    dot(self.row(w), h)
                }
            })
            .collect()
    }

    /// softmax(h·embᵀ) with UNK masked.
    pub fn output_distribution(&self, h: &[f64]) -> Vec<f64> {
        softmax(&self.logits(h))
    }
}

/// Everything a single pointer output step needs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointerState {
    pub p_gen: f64,
    /// [n] simplex over source positions.
    pub attention: Vec<f64>,
    /// [V] simplex.
    pub p_vocab: Vec<f64>,
    /// [n] source token ids, each < V.
    pub source_ids: Vec<usize>,
    /// Optional [n][V] edit distributions; absent means hard copy.
    pub delta: Option<Vec<Vec<f64>>>,
}

impl PointerState {
    /// Validates shapes and simplices; `p_gen` must lie in [0, 1].
    pub fn new(
        p_gen: f64,
        attention: Vec<f64>,
        p_vocab: Vec<f64>,
        source_ids: Vec<usize>,
        delta: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let st = PointerState { p_gen, attention, p_vocab, source_ids, delta };
        st.validate()?;
        Ok(st)
    }

    /// Builds a state whose generation probability comes from a logit,
    /// clamped to the interior [PROB_FLOOR, 1 − PROB_FLOOR].
    pub fn from_logit(
        gen_logit: f64,
        attention: Vec<f64>,
        p_vocab: Vec<f64>,
        source_ids: Vec<usize>,
        delta: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let p = (1.0 / (1.0 + (-gen_logit).exp())).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        Self::new(p, attention, p_vocab, source_ids, delta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_gen) {
            return Err(Error::InvalidArgument(format!("p_gen {} outside [0,1]", self.p_gen)));
        }
        check_simplex("attention", &self.attention)?;
        check_simplex("p_vocab", &self.p_vocab)?;
        let (n, v) = (self.attention.len(), self.p_vocab.len());
        if self.source_ids.len() != n {
            return Err(Error::Shape(format!("{} source ids for {n} attention weights", self.source_ids.len())));
        }
        if let Some(&bad) = self.source_ids.iter().find(|&&x| x >= v) {
            return Err(Error::InvalidArgument(format!("source id {bad} outside vocabulary of {v}")));
        }
        if let Some(d) = &self.delta {
            if d.len() != n {
                return Err(Error::Shape(format!("{} delta rows for {n} positions", d.len())));
            }
            for row in d {
                if row.len() != v {
                    return Err(Error::Shape(format!("delta row of length {} for vocabulary {v}", row.len())));
                }
                check_simplex("delta row", row)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attention.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attention.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.p_vocab.len()
    }

    /// δ(y | xᵢ): the edit row if present, else the copy indicator.
    pub fn delta_at(&self, i: usize, y: usize) -> f64 {
        match &self.delta {
            Some(d) => d[i][y],
            None => {
                if self.source_ids[i] == y {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// A random valid state; with `edit` the delta rows are random simplices.
    pub fn random(n: usize, v: usize, edit: bool, rng: &mut impl Rng) -> Self {
        let simplex = |len: usize, rng: &mut dyn rand::RngCore| {
            let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            softmax(&logits)
        };
        let attention = simplex(n, rng);
        let p_vocab = simplex(v, rng);
        // a small id range forces duplicate source tokens
        let source_ids = (0..n).map(|_| rng.random_range(0..v.min(n.max(2)))).collect();
        let delta = edit.then(|| (0..n).map(|_| simplex(v, rng)).collect());
        let p_gen = match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        PointerState { p_gen, attention, p_vocab, source_ids, delta }
    }
}

fn check_simplex(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape(format!("{name} is empty")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidArgument(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp_slice(logits);
    if z == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    logits.iter().map(|l| (l - z).exp()).collect()
}

/// Dot-product attention softmax(keys · query).
pub fn dot_attention(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    softmax(&keys.iter().map(|k| dot(k, query)).collect::<Vec<_>>())
}

/// p(y) = p_gen·p_vocab[y] + (1 − p_gen)·Σᵢ attention[i]·δ(y | xᵢ).
pub fn pointer_mixture(st: &PointerState, y: usize) -> f64 {
    let gen = if y < st.vocab_size() { st.p_gen * st.p_vocab[y] } else { 0.0 };
    let point: f64 = (0..st.len()).map(|i| st.attention[i] * st.delta_at(i, y)).sum();
    gen + (1.0 - st.p_gen) * point
}

/// The full output law over the vocabulary.
pub fn pointer_distribution(st: &PointerState) -> Vec<f64> {
    let mut out: Vec<f64> = st.p_vocab.iter().map(|p| st.p_gen * p).collect();
    for i in 0..st.len() {
        let a = (1.0 - st.p_gen) * st.attention[i];
        match &st.delta {
            Some(d) => out.iter_mut().zip(&d[i]).for_each(|(o, dv)| *o += a * dv),
            None => out[st.source_ids[i]] += a,
        }
    }
    out
}

/// Differentiable hard-copy mixture probability. `p_gen` is a scalar,
/// `p_vocab` is [V] and `attention` is [n].
pub fn pointer_mixture_value(p_gen: &Value, p_vocab: &Value, attention: &Value, source_ids: &[usize], y: usize) -> Value {
    let copy_pos: Vec<usize> = source_ids.iter().enumerate().filter(|(_, &x)| x == y).map(|(i, _)| i).collect();
    let gen = p_gen.mul(&p_vocab.at(y));
    if copy_pos.is_empty() {
        return gen;
    }
    let n = copy_pos.len();
    let copy = attention.gather(copy_pos, &[n]).sum();
    gen.add(&p_gen.neg().add_const(1.0).mul(&copy))
}

/// Two-layer map with a residual connection from (dec ∘ enc) to an
/// e-vector: h = tanh(W1·u + b1), r = h + W2·h + b2.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationNet {
    /// [e, d_dec + d_enc]
    pub w1: Tensor,
    pub b1: Tensor,
    /// [e, e]
    pub w2: Tensor,
    pub b2: Tensor,
}

impl RelationNet {
    pub fn zeros(input: usize, e: usize) -> Self {
        RelationNet {
            w1: Tensor::zeros(&[e, input]),
            b1: Tensor::zeros(&[e]),
            w2: Tensor::zeros(&[e, e]),
            b2: Tensor::zeros(&[e]),
        }
    }

    pub fn random(input: usize, e: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-scale..scale));
        RelationNet { w1: u(&[e, input]), b1: u(&[e]), w2: u(&[e, e]), b2: u(&[e]) }
    }

    pub fn out_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn apply(&self, dec_state: &[f64], enc_state: &[f64]) -> Vec<f64> {
        let u: Vec<f64> = dec_state.iter().chain(enc_state).copied().collect();
        let e = self.out_dim();
        assert_eq!(u.len(), self.w1.shape()[1], "relation net input length");
        let h: Vec<f64> = (0..e).map(|k| (dot(self.w1.row(k), &u) + self.b1.data()[k]).tanh()).collect();
        (0..e).map(|k| h[k] + dot(self.w2.row(k), &h) + self.b2.data()[k]).collect()
    }
}

/// δ(· | xᵢ) = softmax((r + x_embed)·embᵀ) with r = relation_net(dec ∘ enc).
pub fn relation_edit(
    dec_state: &[f64],
    enc_state: &[f64],
    x_embed: &[f64],
    emb: &EmbeddingTable,
    net: &RelationNet,
) -> Vec<f64> {
    let r = net.apply(dec_state, enc_state);
    assert_eq!(r.len(), emb.dim(), "relation output dim must match the embedding dim");
    let q: Vec<f64> = r.iter().zip(x_embed).map(|(a, b)| a + b).collect();
    emb.output_distribution(&q)
}

/// Contextual top-k scores: inner products of encoded source states with
/// the encoded target.
pub fn contextual_scores(enc_states: &[Vec<f64>], target_enc: &[f64]) -> Vec<f64> {
    enc_states.iter().map(|h| dot(h, target_enc)).collect()
}

/// Context-free comparator: inner products of source and target embeddings.
pub fn embedding_scores(source_ids: &[usize], target: usize, emb: &EmbeddingTable) -> Vec<f64> {
    source_ids.iter().map(|&x| dot(emb.row(x), emb.row(target))).collect()
}

/// Positions of the k largest scores, ties broken by lower index.
pub fn topk_positions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Σ over the k top-scoring positions of attention[i]·δ(y | xᵢ): a lower
/// bound on the full pointing marginal, exact at k = n.
pub fn topk_point_marginal(st: &PointerState, target_embed_scores: &[f64], k: usize, y: usize) -> Result<f64> {
    let n = st.len();
    if target_embed_scores.len() != n {
        return Err(Error::Shape(format!("{} scores for {n} positions", target_embed_scores.len())));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    let mut pos = topk_positions(target_embed_scores, k);
    // summing in position order makes k = n bit-identical to the full sum
    pos.sort_unstable();
    Ok(pos.into_iter().map(|i| st.attention[i] * st.delta_at(i, y)).sum())
}

/// The full pointing marginal Σᵢ attention[i]·δ(y | xᵢ).
pub fn point_marginal(st: &PointerState, y: usize) -> f64 {
    (0..st.len()).map(|i| st.attention[i] * st.delta_at(i, y)).sum()
}

/// Posterior over {generation} ∪ source positions for an observed token.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Alignment {
    /// p_gen·p_vocab[y] / p(y)
    pub gen: f64,
    /// (1 − p_gen)·attention[i]·δ(y | xᵢ) / p(y)
    pub positions: Vec<f64>,
    /// positions[i] + gen·attention[i]: generation mass spread by attention.
    pub aligned: Vec<f64>,
    pub prob: f64,
}

pub fn posterior_alignment(st: &PointerState, y: usize) -> Result<Alignment> {
    let p = pointer_mixture(st, y);
    if p <= 0.0 || !p.is_finite() {
        return Err(Error::UndefinedPosterior(format!("token {y} has probability {p}")));
    }
    let gen = if y < st.vocab_size() { st.p_gen * st.p_vocab[y] / p } else { 0.0 };
    let positions: Vec<f64> =
        (0..st.len()).map(|i| (1.0 - st.p_gen) * st.attention[i] * st.delta_at(i, y) / p).collect();
    let aligned = positions.iter().zip(&st.attention).map(|(q, a)| q + gen * a).collect();
    Ok(Alignment { gen, positions, aligned, prob: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn hard(p_gen: f64) -> PointerState {
        PointerState::new(p_gen, vec![0.1, 0.2, 0.3, 0.4], vec![0.25, 0.25, 0.2, 0.2, 0.1], vec![2, 0, 2, 4], None)
            .unwrap()
    }

    #[test]
    fn mixture_examples() {
        let st = hard(1.0);
        for y in 0..5 {
            assert_eq!(pointer_mixture(&st, y), st.p_vocab[y]);
        }
        let st = hard(0.0);
        assert_eq!(pointer_mixture(&st, 0), 0.2);
        assert_eq!(pointer_mixture(&st, 4), 0.4);
        // duplicates at positions 0 and 2
        let st = hard(0.3);
        let mut enumerated = 0.0;
        for i in 0..4 {
            if st.source_ids[i] == 2 {
                enumerated += 0.7 * st.attention[i];
            }
        }
        assert!((pointer_mixture(&st, 2) - (0.3 * 0.2 + enumerated)).abs() < 1e-15);
        assert!((pointer_distribution(&st).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_validation() {
        assert!(PointerState::new(1.2, vec![1.0], vec![1.0], vec![0], None).is_err());
        assert!(PointerState::new(0.5, vec![0.5, 0.4], vec![1.0], vec![0, 0], None).is_err());
        assert!(PointerState::new(0.5, vec![1.0], vec![0.5, 0.5], vec![2], None).is_err());
        assert!(PointerState::new(0.5, vec![1.0], vec![0.5, 0.5], vec![0, 1], None).is_err());
        assert!(PointerState::new(0.5, vec![1.0], vec![0.5, 0.5], vec![0], Some(vec![vec![1.0]])).is_err());
        let st = PointerState::from_logit(50.0, vec![1.0], vec![1.0], vec![0], None).unwrap();
        assert!(st.p_gen < 1.0);
    }

    #[test]
    fn value_mixture_matches_and_differentiates() {
        let st = hard(0.3);
        let pg = Value::param(Tensor::scalar(0.3));
        let pv = Value::param(Tensor::vector(st.p_vocab.clone()));
        let at = Value::param(Tensor::vector(st.attention.clone()));
        for y in 0..5 {
            let v = pointer_mixture_value(&pg, &pv, &at, &st.source_ids, y);
            assert!((v.item() - pointer_mixture(&st, y)).abs() < 1e-15);
        }
        pointer_mixture_value(&pg, &pv, &at, &st.source_ids, 2).backward();
        assert!((pg.grad().item() - (0.2 - 0.4)).abs() < 1e-15);
        assert_eq!(at.grad().data(), &[0.7, 0.0, 0.7, 0.0]);
    }

    #[test]
    fn relation_edit_examples() {
        let mut r = rng(1);
        let emb = EmbeddingTable::random(7, 4, 1.0, &mut r);
        let net = RelationNet::random(6, 4, 0.5, &mut r);
        let d = relation_edit(&[0.1, -0.2, 0.3], &[0.5, 0.0, -1.0], emb.row(3), &emb, &net);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let emb = EmbeddingTable::orthonormal(6);
        let zero = RelationNet::zeros(4, 6);
        let d = relation_edit(&[1.0, 2.0], &[3.0, 4.0], emb.row(2), &emb, &zero);
        assert_eq!(crate::dists::argmax(&d), 2);

        // r = emb[w'] − emb[w], applied through the bias of the residual map
        let mut moved = RelationNet::zeros(4, 6);
        moved.b2 = Tensor::from_fn(&[6], |k| if k == 5 { 1.0 } else if k == 2 { -1.0 } else { 0.0 });
        let d = relation_edit(&[1.0, 2.0], &[3.0, 4.0], emb.row(2), &emb, &moved);
        assert_eq!(crate::dists::argmax(&d), 5);
    }

    #[test]
    fn unk_masked() {
        let emb = EmbeddingTable::new(EmbeddingTable::orthonormal(4).matrix, Some(1)).unwrap();
        let d = emb.output_distribution(&[0.0, 10.0, 0.0, 0.0]);
        assert_eq!(d[1], 0.0);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(EmbeddingTable::new(Tensor::zeros(&[3, 2]), Some(3)).is_err());
    }

    #[test]
    fn topk_examples() {
        let mut r = rng(2);
        let st = PointerState::random(6, 9, true, &mut r);
        let scores: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        for y in 0..9 {
            assert_eq!(topk_point_marginal(&st, &scores, 6, y).unwrap(), point_marginal(&st, y));
        }
        assert!(topk_point_marginal(&st, &scores, 0, 0).is_err());
        assert!(topk_point_marginal(&st, &scores, 7, 0).is_err());
        assert!(topk_point_marginal(&st, &scores[..3], 2, 0).is_err());
        assert_eq!(topk_positions(&[0.5, 0.9, 0.5, 0.1], 3), vec![1, 0, 2]);
    }

    #[test]
    fn contextual_and_embedding_scores() {
        let emb = EmbeddingTable::orthonormal(5);
        assert_eq!(embedding_scores(&[1, 3, 1], 1, &emb), vec![1.0, 0.0, 1.0]);
        assert_eq!(contextual_scores(&[vec![1.0, 2.0], vec![0.0, -1.0]], &[2.0, 1.0]), vec![4.0, -1.0]);
        let a = dot_attention(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((a[0] - 1f64.exp() / (1f64.exp() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn posterior_examples() {
        let st = hard(0.0);
        let post = posterior_alignment(&st, 2).unwrap();
        assert_eq!(post.gen, 0.0);
        assert!((post.positions[0] - 0.25).abs() < 1e-12 && (post.positions[2] - 0.75).abs() < 1e-12);
        assert_eq!(post.positions, post.aligned);

        // Bayes' rule against independently computed joint terms
        let st = hard(0.4);
        let joint_gen = 0.4 * st.p_vocab[2];
        let joint_pos = [0.6 * 0.1, 0.0, 0.6 * 0.3, 0.0];
        let total = joint_gen + joint_pos.iter().sum::<f64>();
        let post = posterior_alignment(&st, 2).unwrap();
        assert!((post.gen - joint_gen / total).abs() < 1e-15);
        for i in 0..4 {
            assert!((post.positions[i] - joint_pos[i] / total).abs() < 1e-15);
        }
        assert!((post.aligned.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let st = PointerState::new(0.0, vec![1.0], vec![0.5, 0.5], vec![0], None).unwrap();
        assert!(matches!(posterior_alignment(&st, 1), Err(Error::UndefinedPosterior(_))));
    }

    proptest! {
        #[test]
        fn laws_hold_on_random_states(seed in any::<u64>(), n in 1usize..8, v in 2usize..12, edit in any::<bool>()) {
            let mut r = rng(seed);
            let st = PointerState::random(n, v, edit, &mut r);
            prop_assert!(st.validate().is_ok());
            let total: f64 = (0..v).map(|y| pointer_mixture(&st, y)).sum();
            prop_assert!((total - 1.0).abs() < 1e-8);
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            for y in 0..v {
                let mut prev = 0.0;
                for k in 1..=n {
                    let m = topk_point_marginal(&st, &scores, k, y).unwrap();
                    prop_assert!(m >= prev);
                    prev = m;
                }
                prop_assert_eq!(prev, point_marginal(&st, y));
                if let Ok(post) = posterior_alignment(&st, y) {
                    let mass = post.gen + post.positions.iter().sum::<f64>();
                    prop_assert!((mass - 1.0).abs() < 1e-9);
                    prop_assert!((post.aligned.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    let p = pointer_mixture(&st, y);
                    prop_assert!((post.gen * p - st.p_gen * st.p_vocab[y]).abs() < 1e-12);
                }
            }
        }
    }
}
