//! Retrieval and sampling statistics.

use alloc::vec::Vec;

use crate::data::IdentityId;
use crate::error::check_len;
use crate::linalg::{dot, sq_dist};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapReport {
    /// Mean over evaluated queries; 0 when none could be evaluated.
    pub map: f64,
    pub evaluated: usize,
    /// Queries skipped because no other row shares their identity.
    pub without_positive: usize,
}

/// Average precision given the 1-based ranks of all positives, ascending.
fn ap_from_ranks(ranks: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        sum += (i + 1) as f64 / r as f64;
    }
    sum / ranks.len() as f64
}

/// Average precision of one ranked relevance list.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let ranks: Vec<usize> = ranked_relevance
        .iter()
        .enumerate()
        .filter(|(_, &rel)| rel)
        .map(|(i, _)| i + 1)
        .collect();
    (!ranks.is_empty()).then(|| ap_from_ranks(&ranks))
}

/// mAP of `queries` against all other rows, ranking by descending dot
/// product with ties broken by ascending row index.
///
/// Runs in `O(N * P)` per query, where `P` is the number of positives.
pub fn mean_average_precision(
    emb: &[f64],
    dim: usize,
    ids: &[IdentityId],
    queries: &[usize],
) -> Result<MapReport> {
    let n = ids.len();
    check_len(n * dim, emb.len())?;
    if n < 2 {
        return Err(Error::Contract("mAP needs at least two samples".into()));
    }
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let mut scores = alloc::vec![0.0; n];
    let mut positives: Vec<usize> = Vec::new();
    let mut ranks: Vec<usize> = Vec::new();
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut without_positive = 0;
    for &q in queries {
        if q >= n {
            return Err(Error::Index { index: q, len: n });
        }
        let eq = row(q);
        positives.clear();
        for j in 0..n {
            if j != q {
                scores[j] = dot(eq, row(j));
                if ids[j] == ids[q] {
                    positives.push(j);
                }
            }
        }
        if positives.is_empty() {
            without_positive += 1;
            continue;
        }
        ranks.clear();
        ranks.resize(positives.len(), 1);
        for j in 0..n {
            if j == q {
                continue;
            }
            let sj = scores[j];
            for (r, &p) in ranks.iter_mut().zip(&positives) {
                let sp = scores[p];
                if sj > sp || (sj == sp && j < p) {
                    *r += 1;
                }
            }
        }
        ranks.sort_unstable();
        total += ap_from_ranks(&ranks);
        evaluated += 1;
    }
    Ok(MapReport {
        map: if evaluated == 0 { 0.0 } else { total / evaluated as f64 },
        evaluated,
        without_positive,
    })
}

/// Share of strictly positive hinge terms.
pub fn nonzero_triplet_fraction(terms: &[f64]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Contract("no triplets evaluated".into()));
    }
    Ok(terms.iter().filter(|&&t| t > 0.0).count() as f64 / terms.len() as f64)
}

/// Exhaustive relevant-negative probability for one anchor-positive pair:
/// the share of other-identity rows `n` with
/// `d2(a, p) - d2(a, n) + alpha > 0`, i.e. `n_hat / (N - n_ID)`.
pub fn p_hat_bruteforce(
    emb: &[f64],
    dim: usize,
    ids: &[IdentityId],
    anchor: usize,
    positive: usize,
    alpha: f64,
) -> Result<f64> {
    let n = ids.len();
    check_len(n * dim, emb.len())?;
    for i in [anchor, positive] {
        if i >= n {
            return Err(Error::Index { index: i, len: n });
        }
    }
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let d_ap = sq_dist(row(anchor), row(positive));
    let mut negatives = 0usize;
    let mut relevant = 0usize;
    for j in 0..n {
        if ids[j] == ids[anchor] {
            continue;
        }
        negatives += 1;
        if d_ap - sq_dist(row(anchor), row(j)) + alpha > 0.0 {
            relevant += 1;
        }
    }
    if negatives == 0 {
        return Err(Error::Contract("anchor has no negatives".into()));
    }
    Ok(relevant as f64 / negatives as f64)
}
