use super::{HmmPotentials, SegmentalMarginals, SegmentalPotentials, SegmentationPath};
use crate::ndgrad::{logsumexp_slice, Tensor};
use crate::{Error, Result};

/// Longest sequence accepted by the segmentation enumerator.
pub const MAX_ENUM_LENGTH: usize = 10;
/// Largest Kᵀ accepted by the alignment enumerator.
pub const MAX_ALIGNMENT_PATHS: usize = 1_000_000;

/// Every valid segmentation of a length-`m` sequence with `k` non-null
/// records and length cap `l`.
pub fn enumerate_segmentations(m: usize, k: usize, l: usize) -> Result<Vec<SegmentationPath>> {
    if m == 0 || l == 0 {
        return Err(Error::InvalidArgument("need m >= 1 and L >= 1".into()));
    }
    if m > MAX_ENUM_LENGTH {
        return Err(Error::InvalidArgument(format!(
            "enumeration limited to m <= {MAX_ENUM_LENGTH}, got {m}"
        )));
    }
    let mut out = Vec::new();
    let mut cuts = vec![0];
    let mut labels = Vec::new();
    extend(m, k, l, &mut cuts, &mut labels, &mut out);
    Ok(out)
}

fn extend(
    m: usize,
    k: usize,
    l: usize,
    cuts: &mut Vec<usize>,
    labels: &mut Vec<usize>,
    out: &mut Vec<SegmentationPath>,
) {
    let pos = *cuts.last().unwrap();
    if pos == m {
        out.push(SegmentationPath {
            cuts: cuts.clone(),
            labels: labels.clone(),
        });
        return;
    }
    for len in 1..=l.min(m - pos) {
        for c in 0..=k {
            if c != 0 && labels.last() == Some(&c) {
                continue;
            }
            cuts.push(pos + len);
            labels.push(c);
            extend(m, k, l, cuts, labels, out);
            cuts.pop();
            labels.pop();
        }
    }
}

/// Number of valid segmentations by a counting recurrence over
/// (end position, last label); independent of the enumerator.
pub fn count_segmentations(m: usize, k: usize, l: usize) -> u128 {
    let k1 = k + 1;
    // n[i][j]: segmentations of the first i tokens whose last label is j.
    let mut n = vec![vec![0u128; k1]; m + 1];
    for i in 1..=m {
        for j in 0..k1 {
            for p in i.saturating_sub(l)..i {
                n[i][j] += if p == 0 {
                    1
                } else {
                    (0..k1).filter(|&q| j == 0 || q != j).map(|q| n[p][q]).sum()
                };
            }
        }
    }
    n[m].iter().sum()
}

/// Log-score of one segmentation under the potentials.
pub fn path_score(s: &SegmentalPotentials, path: &SegmentationPath) -> f64 {
    let mut total = 0.0;
    let mut prev = None;
    for (start, len, c) in path.segments() {
        total += match prev {
            None => s.init_trans.data()[c],
            Some(q) => s.tr(start, c, q),
        };
        total += s.g(start, len - 1, c);
        prev = Some(c);
    }
    total
}

fn scored_paths(s: &SegmentalPotentials) -> Result<(Vec<SegmentationPath>, Vec<f64>, f64)> {
    let paths = enumerate_segmentations(s.len(), s.labels() - 1, s.max_len())?;
    let scores: Vec<f64> = paths.iter().map(|p| path_score(s, p)).collect();
    let z = logsumexp_slice(&scores);
    Ok((paths, scores, z))
}

/// log Σ over all valid segmentations of exp(path score).
pub fn brute_force_semimarkov(s: &SegmentalPotentials) -> Result<f64> {
    Ok(scored_paths(s)?.2)
}

/// Posterior usage of every table entry by explicit enumeration.
pub fn brute_force_segment_posteriors(s: &SegmentalPotentials) -> Result<SegmentalMarginals> {
    let (m, l, k1) = (s.len(), s.max_len(), s.labels());
    let (paths, scores, z) = scored_paths(s)?;
    let mut gen = Tensor::zeros(&[m, l, k1]);
    let mut trans = Tensor::zeros(&[m, k1, k1]);
    let mut init = Tensor::zeros(&[k1]);
    for (path, &sc) in paths.iter().zip(&scores) {
        let w = (sc - z).exp();
        let mut prev = None;
        for (start, len, c) in path.segments() {
            match prev {
                None => init.data_mut()[c] += w,
                Some(q) => trans.data_mut()[(start * k1 + c) * k1 + q] += w,
            }
            gen.data_mut()[(start * l + len - 1) * k1 + c] += w;
            prev = Some(c);
        }
    }
    Ok(SegmentalMarginals { log_z: z, gen, trans, init })
}

/// Σ_paths P(path)·τ(path) by explicit enumeration.
pub fn brute_force_expected_segments(s: &SegmentalPotentials) -> Result<f64> {
    let (paths, scores, z) = scored_paths(s)?;
    Ok(paths
        .iter()
        .zip(&scores)
        .map(|(p, &sc)| (sc - z).exp() * p.num_segments() as f64)
        .sum())
}

/// All Kᵀ state sequences, in lexicographic order.
pub fn enumerate_alignments(t: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if t == 0 || k == 0 {
        return Err(Error::InvalidArgument("need T >= 1 and K >= 1".into()));
    }
    let total = (k as u128).checked_pow(t as u32).unwrap_or(u128::MAX);
    if total > MAX_ALIGNMENT_PATHS as u128 {
        return Err(Error::InvalidArgument(format!(
            "{k}^{t} alignment paths exceed the limit {MAX_ALIGNMENT_PATHS}"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut cur = vec![0usize; t];
    loop {
        out.push(cur.clone());
        let mut d = t;
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            cur[d] += 1;
            if cur[d] < k {
                break;
            }
            cur[d] = 0;
        }
    }
}

/// Log-score of one alignment.
pub fn alignment_score(p: &HmmPotentials, path: &[usize]) -> f64 {
    let mut s = p.init.data()[path[0]] + p.em(0, path[0]);
    for t in 1..path.len() {
        s += p.tr(t, path[t], path[t - 1]) + p.em(t, path[t]);
    }
    s
}

/// log Σ over all alignments of exp(score).
pub fn brute_force_hmm_log_marginal(p: &HmmPotentials) -> Result<f64> {
    let paths = enumerate_alignments(p.len(), p.states())?;
    let scores: Vec<f64> = paths.iter().map(|a| alignment_score(p, a)).collect();
    Ok(logsumexp_slice(&scores))
}

/// Unary posteriors `[T, K]` by explicit enumeration.
pub fn brute_force_alignment_posteriors(p: &HmmPotentials) -> Result<Tensor> {
    let (t, k) = (p.len(), p.states());
    let paths = enumerate_alignments(t, k)?;
    let scores: Vec<f64> = paths.iter().map(|a| alignment_score(p, a)).collect();
    let z = logsumexp_slice(&scores);
    let mut post = Tensor::zeros(&[t, k]);
    for (a, &sc) in paths.iter().zip(&scores) {
        let w = (sc - z).exp();
        for (s, &i) in a.iter().enumerate() {
            post.data_mut()[s * k + i] += w;
        }
    }
    Ok(post)
}
