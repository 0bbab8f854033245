//! Ranking losses on unit-norm embeddings and the auto-encoder loss.
//!
//! Distances inside every hinge are squared Euclidean. Batch losses take a
//! flat row-major embedding matrix and report one hinge term per triplet (or
//! per anchor for batch hard), plus the gradient with respect to every row.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::IdentityId;
use crate::error::check_len;
use crate::linalg::sq_dist;
use crate::{Error, Result};

/// Default margin.
pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Sum of all hinge terms.
    pub value: f64,
    /// Individual hinge terms, each `>= 0`.
    pub terms: Vec<f64>,
    /// Row-major gradient, one row per input embedding.
    pub grads: Vec<f64>,
    pub dim: usize,
}

impl LossReport {
    pub fn nonzero(&self) -> bool {
        self.value > 0.0
    }

    pub fn nonzero_terms(&self) -> usize {
        self.terms.iter().filter(|&&t| t > 0.0).count()
    }

    pub fn grad(&self, row: usize) -> &[f64] {
        &self.grads[row * self.dim..(row + 1) * self.dim]
    }
}

fn row(emb: &[f64], dim: usize, i: usize) -> &[f64] {
    &emb[i * dim..(i + 1) * dim]
}

/// Adds the gradient of `d2(a,p) - d2(a,n)` into rows `a`, `p`, `n`.
fn add_hinge_grad(emb: &[f64], grads: &mut [f64], dim: usize, a: usize, p: usize, n: usize) {
    for j in 0..dim {
        let (ea, ep, en) = (emb[a * dim + j], emb[p * dim + j], emb[n * dim + j]);
        grads[a * dim + j] += 2.0 * (en - ep);
        grads[p * dim + j] += 2.0 * (ep - ea);
        grads[n * dim + j] += 2.0 * (ea - en);
    }
}

/// `[|fa - fp|^2 - |fa - fn|^2 + alpha]_+` with gradients in rows `[a, p, n]`.
pub fn triplet_loss(fa: &[f64], fp: &[f64], fn_: &[f64], alpha: f64) -> Result<LossReport> {
    let dim = fa.len();
    check_len(dim, fp.len())?;
    check_len(dim, fn_.len())?;
    let mut emb = Vec::with_capacity(3 * dim);
    emb.extend_from_slice(fa);
    emb.extend_from_slice(fp);
    emb.extend_from_slice(fn_);
    triplet_batch_loss(&emb, dim, &[(0, 1, 2)], alpha)
}

/// Summed triplet loss over `(anchor, positive, negative)` row triples.
pub fn triplet_batch_loss(
    emb: &[f64],
    dim: usize,
    triplets: &[(usize, usize, usize)],
    alpha: f64,
) -> Result<LossReport> {
    let rows = rows_of(emb, dim)?;
    let mut grads = vec![0.0; emb.len()];
    let mut terms = Vec::with_capacity(triplets.len());
    for &(a, p, n) in triplets {
        for i in [a, p, n] {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
        }
        let (ea, ep, en) = (row(emb, dim, a), row(emb, dim, p), row(emb, dim, n));
        let t = finite_term(sq_dist(ea, ep) - sq_dist(ea, en) + alpha)?;
        if t > 0.0 {
            add_hinge_grad(emb, &mut grads, dim, a, p, n);
            terms.push(t);
        } else {
            terms.push(0.0);
        }
    }
    Ok(LossReport {
        value: terms.iter().sum(),
        terms,
        grads,
        dim,
    })
}

/// Overflowing distances would otherwise turn into NaN terms that the hinge
/// silently clamps to zero.
fn finite_term(t: f64) -> Result<f64> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite("triplet loss term"))
    }
}

fn rows_of(emb: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || emb.len() % dim != 0 {
        return Err(Error::Contract(format!(
            "embedding buffer of {} values is not a whole number of {dim}-vectors",
            emb.len()
        )));
    }
    Ok(emb.len() / dim)
}

fn check_groups(labels: &[IdentityId]) -> Result<()> {
    let mut counts: BTreeMap<IdentityId, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Contract("batch needs at least two identities".into()));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Contract(format!(
            "identity {id} has fewer than two samples in the batch"
        )));
    }
    Ok(())
}

/// Batch-hard loss: for every anchor, the farthest same-label row and the
/// closest other-label row form the hinge term. Terms are summed.
pub fn batch_hard_loss(
    emb: &[f64],
    dim: usize,
    labels: &[IdentityId],
    alpha: f64,
) -> Result<LossReport> {
    let rows = rows_of(emb, dim)?;
    check_len(rows, labels.len())?;
    check_groups(labels)?;
    let d2 = pairwise_sq_dists(emb, dim);
    let mut grads = vec![0.0; emb.len()];
    let mut terms = Vec::with_capacity(rows);
    for a in 0..rows {
        let mut hard_p = None;
        let mut hard_n = None;
        for j in 0..rows {
            if j == a {
                continue;
            }
            let d = d2[a * rows + j];
            if labels[j] == labels[a] {
                if hard_p.is_none_or(|(_, best)| d > best) {
                    hard_p = Some((j, d));
                }
            } else if hard_n.is_none_or(|(_, best)| d < best) {
                hard_n = Some((j, d));
            }
        }
        let ((p, dp), (n, dn)) = (hard_p.unwrap(), hard_n.unwrap());
        let t = finite_term(dp - dn + alpha)?;
        if t > 0.0 {
            add_hinge_grad(emb, &mut grads, dim, a, p, n);
            terms.push(t);
        } else {
            terms.push(0.0);
        }
    }
    Ok(LossReport {
        value: terms.iter().sum(),
        terms,
        grads,
        dim,
    })
}

/// Index of the semi-hard negative: the closest candidate farther than the
/// positive. Falls back to the farthest candidate when none is.
pub fn semi_hard_select(d_ap: f64, candidate_dists: &[f64]) -> Result<usize> {
    if candidate_dists.is_empty() {
        return Err(Error::Contract("no candidate negatives".into()));
    }
    let mut semi: Option<(usize, f64)> = None;
    let mut farthest = (0, candidate_dists[0]);
    for (i, &d) in candidate_dists.iter().enumerate() {
        if d > d_ap && semi.is_none_or(|(_, best)| d < best) {
            semi = Some((i, d));
        }
        if d > farthest.1 {
            farthest = (i, d);
        }
    }
    Ok(semi.unwrap_or(farthest).0)
}

/// Semi-hard triplet loss: every ordered same-label pair `(a, p)` is paired
/// with its semi-hard negative from the other labels in the batch.
pub fn semi_hard_loss(
    emb: &[f64],
    dim: usize,
    labels: &[IdentityId],
    alpha: f64,
) -> Result<LossReport> {
    let rows = rows_of(emb, dim)?;
    check_len(rows, labels.len())?;
    check_groups(labels)?;
    let d2 = pairwise_sq_dists(emb, dim);
    let mut triplets = Vec::new();
    let mut cand_idx = Vec::with_capacity(rows);
    let mut cand_d = Vec::with_capacity(rows);
    for a in 0..rows {
        cand_idx.clear();
        cand_d.clear();
        for j in 0..rows {
            if labels[j] != labels[a] {
                cand_idx.push(j);
                cand_d.push(d2[a * rows + j]);
            }
        }
        for p in 0..rows {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let pick = semi_hard_select(d2[a * rows + p], &cand_d)?;
            triplets.push((a, p, cand_idx[pick]));
        }
    }
    triplet_batch_loss(emb, dim, &triplets, alpha)
}

pub fn pairwise_sq_dists(emb: &[f64], dim: usize) -> Vec<f64> {
    let rows = emb.len() / dim;
    let mut d2 = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in (i + 1)..rows {
            let d = sq_dist(row(emb, dim, i), row(emb, dim, j));
            d2[i * rows + j] = d;
            d2[j * rows + i] = d;
        }
    }
    d2
}

/// `|fx - fx_hat|^2` and its gradient with respect to `fx_hat`.
///
/// `fx` is treated as a constant target: no gradient is produced for it.
pub fn ae_loss(fx: &[f64], fx_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(fx.len(), fx_hat.len())?;
    let grad: Vec<f64> = fx_hat.iter().zip(fx).map(|(h, x)| 2.0 * (h - x)).collect();
    let value = fx_hat.iter().zip(fx).map(|(h, x)| (h - x) * (h - x)).sum();
    Ok((value, grad))
}
