//! Attention and similarity maps over the patch grid.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

/// Element-wise mean of per-head `[N×N]` attention matrices.
pub fn mean_attention(heads: &[Tensor]) -> Result<Tensor> {
    let first = heads.first().ok_or(Error::Empty("attention heads"))?;
    let mut out = Tensor::zeros(first.shape());
    for h in heads {
        if h.shape() != first.shape() {
            return Err(Error::Dimension {
                op: "mean_attention",
                lhs: first.shape().to_vec(),
                rhs: h.shape().to_vec(),
            });
        }
        out.data_mut().iter_mut().zip(h.data()).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / heads.len() as f64;
    out.data_mut().iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub query: usize,
    /// Cosine of every patch against the query, in `[-1, 1]`.
    pub scores: Vec<f64>,
    /// Exactly `⌈fraction·N⌉` patches set.
    pub mask: Vec<bool>,
}

/// Number of patches kept by `fraction` of `n`, without float drift for
/// values like 0.1·20.
pub fn top_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = libm::round(raw);
    let count = if (raw - nearest).abs() < 1e-9 { nearest } else { libm::ceil(raw) };
    (count as usize).clamp(1, n)
}

/// Cosine map of `query` against every row of `feats` with the top
/// `⌈fraction·N⌉` patches masked. The query ranks first (its score is the
/// maximum, 1); the rest rank by score, ties by ascending index.
pub fn similarity_map(feats: &Tensor, query: usize, fraction: f64) -> Result<SimilarityMap> {
    let (n, _) = feats.dims2()?;
    if query >= n {
        return Err(Error::OutOfRange {
            what: "patches",
            index: query,
            len: n,
        });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(alloc::format!("fraction {fraction} outside (0, 1]")));
    }
    let mut scores = (0..n)
        .map(|j| cosine(feats.row(query), feats.row(j)))
        .collect::<Result<Vec<f64>>>()?;
    scores[query] = 1.0;
    let mut order: Vec<usize> = (0..n).filter(|&j| j != query).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = alloc::vec![false; n];
    mask[query] = true;
    order.iter().take(top_count(fraction, n) - 1).for_each(|&j| mask[j] = true);
    Ok(SimilarityMap { query, scores, mask })
}
