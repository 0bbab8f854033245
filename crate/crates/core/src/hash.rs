//! Online hashing of embeddings into `2^s` bins.
//!
//! Each mini-batch embedding `f(x)` is projected by a linear auto-encoder to
//! `h(x) = W1 f(x) + b1`, binarized against a per-dimension running mean `mu`
//! and packed into a [`Codeword`]. The [`HashTable`] keeps every sample in the
//! bin of its most recent codeword. [`BonState::process_minibatch`] runs the
//! three steps for one batch and then takes one auto-encoder gradient step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::IdentityId;
use crate::error::check_len;
use crate::linalg::{add_outer, affine, matvec_t};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::{Error, Result};

/// Marks a sample that has not been hashed yet.
pub const UNASSIGNED: u32 = u32::MAX;

/// Largest supported codeword width.
pub const MAX_BITS: u32 = 24;

/// Bit `d` of the codeword is set iff `h[d] > mu[d]`; it has weight `2^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Codeword(pub u32);

impl Codeword {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub fn codeword(h: &[f64], mu: &[f64]) -> Result<Codeword> {
    check_len(h.len(), mu.len())?;
    if h.len() > MAX_BITS as usize {
        return Err(Error::Config(format!("codeword wider than {MAX_BITS} bits")));
    }
    let mut cw = 0u32;
    for (d, (x, m)) in h.iter().zip(mu).enumerate() {
        if x - m > 0.0 {
            cw |= 1 << d;
        }
    }
    Ok(Codeword(cw))
}

/// Linear auto-encoder `f -> h -> f_hat` trained on `|f - f_hat|^2`.
///
/// Parameter layout: `W1` (`s x e`), `b1`, `W2` (`e x s`), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAe {
    bits: usize,
    embed_dim: usize,
    params: Vec<f64>,
    opt: Optimizer,
}

impl LinearAe {
    pub fn new<R: Rng + ?Sized>(
        bits: usize,
        embed_dim: usize,
        optimizer: OptimizerKind,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ae = Self::from_params(
            bits,
            embed_dim,
            vec![0.0; 2 * bits * embed_dim + bits + embed_dim],
            optimizer,
            lr,
        )?;
        let (w1, w2) = (ae.w1_range(), ae.w2_range());
        for (range, fan_in) in [(w1, embed_dim), (w2, bits)] {
            if fan_in == 0 {
                continue;
            }
            let dist = Normal::new(0.0, 1.0 / libm::sqrt(fan_in as f64))
                .map_err(|_| Error::Config("bad init scale".into()))?;
            for w in &mut ae.params[range] {
                *w = dist.sample(rng);
            }
        }
        Ok(ae)
    }

    pub fn from_params(
        bits: usize,
        embed_dim: usize,
        params: Vec<f64>,
        optimizer: OptimizerKind,
        lr: f64,
    ) -> Result<Self> {
        if bits > MAX_BITS as usize {
            return Err(Error::Config(format!("s = {bits} exceeds {MAX_BITS}")));
        }
        if embed_dim == 0 || bits > embed_dim {
            return Err(Error::Config(format!(
                "auto-encoder needs s <= e (s = {bits}, e = {embed_dim})"
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::Config("auto-encoder learning rate must be positive".into()));
        }
        check_len(2 * bits * embed_dim + bits + embed_dim, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("auto-encoder parameters"));
        }
        let n = params.len();
        Ok(Self {
            bits,
            embed_dim,
            params,
            opt: Optimizer::new(optimizer, LrSchedule::constant(lr), n),
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.schedule.base_lr
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.opt.kind
    }

    fn w1_range(&self) -> core::ops::Range<usize> {
        0..self.bits * self.embed_dim
    }

    fn b1_range(&self) -> core::ops::Range<usize> {
        let start = self.bits * self.embed_dim;
        start..start + self.bits
    }

    fn w2_range(&self) -> core::ops::Range<usize> {
        let start = self.bits * self.embed_dim + self.bits;
        start..start + self.embed_dim * self.bits
    }

    fn b2_range(&self) -> core::ops::Range<usize> {
        let start = 2 * self.bits * self.embed_dim + self.bits;
        start..start + self.embed_dim
    }

    /// Returns `(h, f_hat)`.
    pub fn forward(&self, fx: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len(self.embed_dim, fx.len())?;
        let mut h = vec![0.0; self.bits];
        affine(&self.params[self.w1_range()], &self.params[self.b1_range()], fx, &mut h);
        let mut fx_hat = vec![0.0; self.embed_dim];
        affine(&self.params[self.w2_range()], &self.params[self.b2_range()], &h, &mut fx_hat);
        Ok((h, fx_hat))
    }

    /// Mean reconstruction loss over `batch` and its gradient with respect to
    /// the auto-encoder parameters. The inputs are constants.
    pub fn loss_and_grad(&self, batch: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
        let mut codes = Vec::with_capacity(batch.len() * self.bits);
        let mut recon = Vec::with_capacity(batch.len() * self.embed_dim);
        for fx in batch {
            let (h, fx_hat) = self.forward(fx)?;
            codes.extend_from_slice(&h);
            recon.extend_from_slice(&fx_hat);
        }
        self.grad_from_forward(batch, &codes, &recon)
    }

    /// [`LinearAe::loss_and_grad`] given the forward pass of every batch row
    /// (`codes` and `recon` row-major).
    fn grad_from_forward(&self, batch: &[&[f64]], codes: &[f64], recon: &[f64]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty auto-encoder batch".into()));
        }
        let (s, e) = (self.bits, self.embed_dim);
        check_len(batch.len() * s, codes.len())?;
        check_len(batch.len() * e, recon.len())?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let mut g = vec![0.0; e];
        let mut dh = vec![0.0; s];
        let (w1r, b1r, w2r, b2r) = (self.w1_range(), self.b1_range(), self.w2_range(), self.b2_range());
        for (i, fx) in batch.iter().enumerate() {
            check_len(e, fx.len())?;
            let h = &codes[i * s..(i + 1) * s];
            let fx_hat = &recon[i * e..(i + 1) * e];
            // d/df_hat |f_hat - f|^2 = 2 (f_hat - f)
            for ((gj, y), x) in g.iter_mut().zip(fx_hat).zip(fx.iter()) {
                let r = y - x;
                total += r * r;
                *gj = 2.0 * r * scale;
            }
            add_outer(&mut grad[w2r.clone()], &g, h);
            for (d, x) in grad[b2r.clone()].iter_mut().zip(&g) {
                *d += x;
            }
            matvec_t(&self.params[w2r.clone()], &g, &mut dh);
            add_outer(&mut grad[w1r.clone()], &dh, fx);
            for (d, x) in grad[b1r.clone()].iter_mut().zip(&dh) {
                *d += x;
            }
        }
        Ok((total * scale, grad))
    }

    fn apply(&mut self, loss: f64, grad: &[f64]) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("auto-encoder loss"));
        }
        self.opt.step(&mut self.params, grad)?;
        Ok(loss)
    }

    /// One optimizer step on the mean reconstruction loss. Returns the loss
    /// measured before the step.
    pub fn train_step(&mut self, batch: &[&[f64]]) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        self.apply(loss, &grad)
    }
}

/// Running-mean binarization thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    mu: Vec<f64>,
    beta: f64,
    initialized: bool,
}

pub const BETA_RANGE: core::ops::RangeInclusive<f64> = 0.95..=0.999;

impl ThresholdState {
    /// Uninitialized state: the first observed `h` becomes `mu`.
    pub fn new(bits: usize, beta: f64) -> Result<Self> {
        Self::check_beta(beta)?;
        Ok(Self {
            mu: vec![0.0; bits],
            beta,
            initialized: false,
        })
    }

    pub fn with_mean(mu: Vec<f64>, beta: f64) -> Result<Self> {
        Self::check_beta(beta)?;
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("threshold mean"));
        }
        Ok(Self {
            mu,
            beta,
            initialized: true,
        })
    }

    fn check_beta(beta: f64) -> Result<()> {
        if BETA_RANGE.contains(&beta) {
            Ok(())
        } else {
            Err(Error::Config(format!("beta = {beta} outside [0.95, 0.999]")))
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// `mu <- beta mu + (1 - beta) h`.
    pub fn update(&mut self, h: &[f64]) -> Result<()> {
        check_len(self.mu.len(), h.len())?;
        if !self.initialized {
            self.mu.copy_from_slice(h);
            self.initialized = true;
            return Ok(());
        }
        for (m, x) in self.mu.iter_mut().zip(h) {
            *m = self.beta * *m + (1.0 - self.beta) * x;
        }
        Ok(())
    }
}

/// Bins of `(v, ID(v))` pairs plus the current bin of every sample.
///
/// Each bin is kept sorted by `v`, so the table content is a pure function of
/// the assignment array. Equality compares that content only, not the
/// history-dependent order of the non-empty list.
#[derive(Debug, Clone)]
pub struct HashTable {
    buckets: Vec<Vec<(u32, IdentityId)>>,
    current: Vec<u32>,
    /// Non-empty bins in no particular order, with each bin's slot in it.
    nonempty: Vec<u32>,
    nonempty_pos: Vec<u32>,
}

impl PartialEq for HashTable {
    fn eq(&self, other: &Self) -> bool {
        self.buckets == other.buckets && self.current == other.current
    }
}

impl HashTable {
    /// Table with `2^bits` bins for `num_samples` samples.
    pub fn new(bits: u32, num_samples: usize) -> Result<Self> {
        if bits > MAX_BITS {
            return Err(Error::Config(format!("s = {bits} exceeds {MAX_BITS}")));
        }
        Self::with_buckets(1usize << bits, num_samples)
    }

    pub fn with_buckets(num_buckets: usize, num_samples: usize) -> Result<Self> {
        if num_buckets == 0 || num_buckets > (1usize << MAX_BITS) {
            return Err(Error::Config(format!("unsupported bucket count {num_buckets}")));
        }
        if num_samples >= UNASSIGNED as usize {
            return Err(Error::Config("too many samples for 32-bit indices".into()));
        }
        Ok(Self {
            buckets: vec![Vec::new(); num_buckets],
            current: vec![UNASSIGNED; num_samples],
            nonempty: Vec::new(),
            nonempty_pos: vec![UNASSIGNED; num_buckets],
        })
    }

    /// Rebuilds a table from per-sample bins (`UNASSIGNED` allowed).
    pub fn from_assignments(
        num_buckets: usize,
        ids: &[IdentityId],
        current: &[u32],
    ) -> Result<Self> {
        check_len(ids.len(), current.len())?;
        let mut table = Self::with_buckets(num_buckets, ids.len())?;
        for (v, (&id, &c)) in ids.iter().zip(current).enumerate() {
            if c != UNASSIGNED {
                table.update(v, id, Codeword(c))?;
            }
        }
        Ok(table)
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn num_samples(&self) -> usize {
        self.current.len()
    }

    pub fn bucket(&self, cw: Codeword) -> &[(u32, IdentityId)] {
        &self.buckets[cw.index()]
    }

    pub fn current(&self, v: usize) -> Option<Codeword> {
        match self.current.get(v) {
            Some(&c) if c != UNASSIGNED => Some(Codeword(c)),
            _ => None,
        }
    }

    /// Per-sample bin array, `UNASSIGNED` for samples never hashed.
    pub fn assignments(&self) -> &[u32] {
        &self.current
    }

    pub fn num_assigned(&self) -> usize {
        self.current.iter().filter(|&&c| c != UNASSIGNED).count()
    }

    /// Non-empty bins, in arbitrary but deterministic order.
    pub fn nonempty_bins(&self) -> &[u32] {
        &self.nonempty
    }

    /// Integer payload in bytes: 8 per stored pair plus 4 per sample.
    pub fn payload_bytes(&self) -> usize {
        8 * self.buckets.iter().map(Vec::len).sum::<usize>() + 4 * self.current.len()
    }

    fn mark_nonempty(&mut self, b: usize) {
        if self.nonempty_pos[b] == UNASSIGNED {
            self.nonempty_pos[b] = self.nonempty.len() as u32;
            self.nonempty.push(b as u32);
        }
    }

    fn mark_empty(&mut self, b: usize) {
        let pos = self.nonempty_pos[b] as usize;
        self.nonempty.swap_remove(pos);
        if let Some(&moved) = self.nonempty.get(pos) {
            self.nonempty_pos[moved as usize] = pos as u32;
        }
        self.nonempty_pos[b] = UNASSIGNED;
    }

    /// Moves sample `v` into bin `cw`, removing it from its previous bin.
    ///
    /// # Panics
    /// If `v` is recorded in a bin that does not contain it.
    pub fn update(&mut self, v: usize, id: IdentityId, cw: Codeword) -> Result<()> {
        if v >= self.current.len() {
            return Err(Error::Index {
                index: v,
                len: self.current.len(),
            });
        }
        if cw.index() >= self.buckets.len() {
            return Err(Error::Index {
                index: cw.index(),
                len: self.buckets.len(),
            });
        }
        let key = v as u32;
        let prev = self.current[v];
        if prev == cw.0 {
            return Ok(());
        }
        if prev != UNASSIGNED {
            let bucket = &mut self.buckets[prev as usize];
            let pos = bucket
                .binary_search_by_key(&key, |&(u, _)| u)
                .unwrap_or_else(|_| panic!("sample {v} missing from its bin {prev}"));
            bucket.remove(pos);
            if bucket.is_empty() {
                self.mark_empty(prev as usize);
            }
        }
        let bucket = &mut self.buckets[cw.index()];
        match bucket.binary_search_by_key(&key, |&(u, _)| u) {
            Ok(_) => panic!("sample {v} already present in bin {}", cw.0),
            Err(pos) => bucket.insert(pos, (key, id)),
        }
        self.mark_nonempty(cw.index());
        self.current[v] = cw.0;
        Ok(())
    }

    /// Samples in bin `cw` whose identity differs from `exclude`.
    pub fn negatives_in_bin(&self, cw: Codeword, exclude: IdentityId) -> Vec<usize> {
        self.bucket(cw)
            .iter()
            .filter(|&&(_, id)| id != exclude)
            .map(|&(v, _)| v as usize)
            .collect()
    }

    pub fn count_negatives_in_bin(&self, cw: Codeword, exclude: IdentityId) -> usize {
        self.bucket(cw).iter().filter(|&&(_, id)| id != exclude).count()
    }

    /// The `nth` entry of [`HashTable::negatives_in_bin`] without allocating.
    pub fn nth_negative_in_bin(&self, cw: Codeword, exclude: IdentityId, nth: usize) -> Option<usize> {
        self.bucket(cw)
            .iter()
            .filter(|&&(_, id)| id != exclude)
            .nth(nth)
            .map(|&(v, _)| v as usize)
    }

    /// Distinct identities stored in bin `cw`, ascending.
    pub fn distinct_ids_in_bin(&self, cw: Codeword) -> Vec<IdentityId> {
        let mut ids: Vec<IdentityId> = self.bucket(cw).iter().map(|&(_, id)| id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Full structural check of the table invariants.
    pub fn check_consistency(&self) -> Result<()> {
        let mut seen = vec![false; self.current.len()];
        let mut stored = 0;
        for (b, bucket) in self.buckets.iter().enumerate() {
            for w in bucket.windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(Error::Contract(format!("bin {b} not strictly sorted")));
                }
            }
            for &(v, _) in bucket {
                let v = v as usize;
                if v >= seen.len() || seen[v] {
                    return Err(Error::Contract(format!("sample {v} stored twice")));
                }
                seen[v] = true;
                if self.current[v] as usize != b {
                    return Err(Error::Contract(format!("sample {v} in bin {b} but C says {}", self.current[v])));
                }
            }
            stored += bucket.len();
            let listed = self.nonempty_pos[b] != UNASSIGNED;
            if listed != !bucket.is_empty() {
                return Err(Error::Contract(format!("non-empty index wrong for bin {b}")));
            }
        }
        if stored != self.num_assigned() {
            return Err(Error::Contract("assigned count differs from stored pairs".into()));
        }
        Ok(())
    }
}

/// Order of the threshold update relative to codeword extraction for the
/// same sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdOrder {
    #[default]
    UpdateThenExtract,
    ExtractThenUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonConfig {
    /// Codeword width `s`.
    pub bits: u32,
    pub beta: f64,
    pub ae_lr: f64,
    pub ae_optimizer: OptimizerKind,
    pub order: ThresholdOrder,
}

impl Default for BonConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            beta: 0.99,
            ae_lr: 1e-3,
            ae_optimizer: OptimizerKind::ADAM,
            order: ThresholdOrder::UpdateThenExtract,
        }
    }
}

/// Auto-encoder, thresholds and table, updated together once per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BonState {
    pub ae: LinearAe,
    pub thresholds: ThresholdState,
    pub table: HashTable,
    pub order: ThresholdOrder,
}

impl BonState {
    pub fn new<R: Rng + ?Sized>(
        cfg: &BonConfig,
        embed_dim: usize,
        num_samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bits = cfg.bits as usize;
        if bits >= embed_dim {
            return Err(Error::Config(format!(
                "hashing needs s < e (s = {bits}, e = {embed_dim})"
            )));
        }
        Ok(Self {
            ae: LinearAe::new(bits, embed_dim, cfg.ae_optimizer, cfg.ae_lr, rng)?,
            thresholds: ThresholdState::new(bits, cfg.beta)?,
            table: HashTable::new(cfg.bits, num_samples)?,
            order: cfg.order,
        })
    }

    pub fn bits(&self) -> usize {
        self.ae.bits()
    }

    /// Hashes every sample of the batch into the table, then trains the
    /// auto-encoder one step on the batch. `embeddings` is row-major with one
    /// row per entry of `samples`. Returns the auto-encoder loss.
    pub fn process_minibatch(
        &mut self,
        samples: &[usize],
        ids: &[IdentityId],
        embeddings: &[f64],
    ) -> Result<f64> {
        let e = self.ae.embed_dim();
        check_len(samples.len(), ids.len())?;
        check_len(samples.len() * e, embeddings.len())?;
        let rows: Vec<&[f64]> = embeddings.chunks_exact(e).collect();
        let s = self.ae.bits();
        let mut codes = vec![0.0; rows.len() * s];
        let mut recon = vec![0.0; rows.len() * e];
        for (i, ((&v, &id), fx)) in samples.iter().zip(ids).zip(&rows).enumerate() {
            let h = &mut codes[i * s..(i + 1) * s];
            affine(&self.ae.params[self.ae.w1_range()], &self.ae.params[self.ae.b1_range()], fx, h);
            let cw = match self.order {
                ThresholdOrder::UpdateThenExtract => {
                    self.thresholds.update(h)?;
                    codeword(h, self.thresholds.mu())?
                }
                ThresholdOrder::ExtractThenUpdate => {
                    if !self.thresholds.is_initialized() {
                        self.thresholds.update(h)?;
                        codeword(h, self.thresholds.mu())?
                    } else {
                        let cw = codeword(h, self.thresholds.mu())?;
                        self.thresholds.update(h)?;
                        cw
                    }
                }
            };
            self.table.update(v, id, cw)?;
            let h = &codes[i * s..(i + 1) * s];
            affine(
                &self.ae.params[self.ae.w2_range()],
                &self.ae.params[self.ae.b2_range()],
                h,
                &mut recon[i * e..(i + 1) * e],
            );
        }
        if rows.is_empty() {
            return Ok(0.0);
        }
        let (loss, grad) = self.ae.grad_from_forward(&rows, &codes, &recon)?;
        self.ae.apply(loss, &grad)
    }
}
