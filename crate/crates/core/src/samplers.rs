//! Mini-batch construction.
//!
//! Triplet samplers (`vanilla`, `bon_random`) emit `b` independent
//! `(anchor, positive, negative)` triplets. Group samplers emit `l`
//! identities with `k` images each; the loss then mines inside the batch.
//! The binned group sampler serves the BoN table as well as the offline
//! Spectral-Hashing and static-cluster tables.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::data::{Dataset, IdentityId};
use crate::hash::{Codeword, HashTable};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SamplerKind {
    Vanilla,
    BonRandom,
    SemiHard,
    BatchHard,
    BonBatchHard,
    ShOracleBatchHard,
    StaticClusterBatchHard,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 7] = [
        SamplerKind::Vanilla,
        SamplerKind::BonRandom,
        SamplerKind::SemiHard,
        SamplerKind::BatchHard,
        SamplerKind::BonBatchHard,
        SamplerKind::ShOracleBatchHard,
        SamplerKind::StaticClusterBatchHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Vanilla => "vanilla",
            SamplerKind::BonRandom => "bon_random",
            SamplerKind::SemiHard => "semi_hard",
            SamplerKind::BatchHard => "batch_hard",
            SamplerKind::BonBatchHard => "bon_batch_hard",
            SamplerKind::ShOracleBatchHard => "sh_oracle_batch_hard",
            SamplerKind::StaticClusterBatchHard => "static_cluster_batch_hard",
        }
    }

    /// Whether batches are `l x k` identity groups rather than triplets.
    pub fn is_group(self) -> bool {
        !matches!(self, SamplerKind::Vanilla | SamplerKind::BonRandom)
    }

    /// Whether the sampler reads the online BoN state.
    pub fn uses_bon(self) -> bool {
        matches!(self, SamplerKind::BonRandom | SamplerKind::BonBatchHard)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = SamplerKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown sampler {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub a: usize,
    pub p: usize,
    pub n: usize,
}

impl Triplet {
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        let n = ds.len();
        for i in [self.a, self.p, self.n] {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
        }
        if self.a == self.p || ds.id_of(self.a) != ds.id_of(self.p) || ds.id_of(self.n) == ds.id_of(self.a) {
            return Err(Error::Contract(format!("invalid triplet {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        self.triplets.iter().try_for_each(|t| t.check(ds))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdGroup {
    pub id: IdentityId,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupBatch {
    pub groups: Vec<IdGroup>,
}

impl GroupBatch {
    /// Sample indices in group order.
    pub fn sample_indices(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.samples.iter().copied()).collect()
    }

    /// Identity label of each entry of [`GroupBatch::sample_indices`].
    pub fn labels(&self) -> Vec<IdentityId> {
        self.groups
            .iter()
            .flat_map(|g| core::iter::repeat_n(g.id, g.samples.len()))
            .collect()
    }

    /// `l` distinct identities, exactly `k` distinct samples of the right
    /// identity each.
    pub fn check(&self, ds: &Dataset, l: usize, k: usize) -> Result<()> {
        if self.groups.len() != l {
            return Err(Error::Contract(format!("{} groups, expected {l}", self.groups.len())));
        }
        let mut ids: Vec<IdentityId> = self.groups.iter().map(|g| g.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != l {
            return Err(Error::Contract("duplicate identity in batch".into()));
        }
        let mut all = self.sample_indices();
        for g in &self.groups {
            if g.samples.len() != k {
                return Err(Error::Contract(format!("group {} has {} samples", g.id, g.samples.len())));
            }
            for &v in &g.samples {
                if v >= ds.len() || ds.id_of(v) != g.id {
                    return Err(Error::Contract(format!("sample {v} not of identity {}", g.id)));
                }
            }
        }
        all.sort_unstable();
        all.dedup();
        if all.len() != l * k {
            return Err(Error::Contract("duplicate sample in batch".into()));
        }
        Ok(())
    }
}

fn check_pairs_possible(ds: &Dataset) -> Result<()> {
    if ds.num_identities() < 2 {
        return Err(Error::Contract("triplets need at least two identities".into()));
    }
    if ds.min_images_per_id() < 2 {
        return Err(Error::Contract("every identity needs at least two images".into()));
    }
    Ok(())
}

fn anchor_positive<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> (usize, usize) {
    let a = rng.random_range(0..ds.len());
    let members = ds.group_members(ds.group_of(a));
    let own = members.binary_search(&a).expect("anchor in its own group");
    let mut j = rng.random_range(0..members.len() - 1);
    if j >= own {
        j += 1;
    }
    (a, members[j])
}

/// Uniform draw over all samples whose identity differs from the anchor's.
pub fn vanilla_negative<R: Rng + ?Sized>(ds: &Dataset, anchor: usize, rng: &mut R) -> usize {
    let members = ds.group_members(ds.group_of(anchor));
    let mut j = rng.random_range(0..ds.len() - members.len());
    // j-th element of the complement of the (sorted) member list
    for &m in members {
        if m <= j {
            j += 1;
        } else {
            break;
        }
    }
    j
}

/// `b` triplets with random anchor, positive and negative.
pub fn vanilla_batch<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R, b: usize) -> Result<TripletBatch> {
    check_pairs_possible(ds)?;
    let triplets = (0..b)
        .map(|_| {
            let (a, p) = anchor_positive(ds, rng);
            let n = vanilla_negative(ds, a, rng);
            Triplet { a, p, n }
        })
        .collect();
    Ok(TripletBatch { triplets })
}

/// Random anchor-positive pairs with the negative drawn uniformly from the
/// other identities in the anchor's bin. Falls back to a dataset-wide draw
/// when the anchor is unhashed or its bin has no other identity.
pub fn bon_random_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    table: &HashTable,
    rng: &mut R,
    b: usize,
) -> Result<TripletBatch> {
    check_pairs_possible(ds)?;
    if table.num_samples() != ds.len() {
        return Err(Error::Shape {
            expected: ds.len(),
            got: table.num_samples(),
        });
    }
    let triplets = (0..b)
        .map(|_| {
            let (a, p) = anchor_positive(ds, rng);
            let n = bin_negative(ds, table, a, rng).unwrap_or_else(|| vanilla_negative(ds, a, rng));
            Triplet { a, p, n }
        })
        .collect();
    Ok(TripletBatch { triplets })
}

fn bin_negative<R: Rng + ?Sized>(ds: &Dataset, table: &HashTable, anchor: usize, rng: &mut R) -> Option<usize> {
    let cw = table.current(anchor)?;
    let id = ds.id_of(anchor);
    let count = table.count_negatives_in_bin(cw, id);
    if count == 0 {
        return None;
    }
    table.nth_negative_in_bin(cw, id, rng.random_range(0..count))
}

fn check_group_request(ds: &Dataset, l: usize, k: usize) -> Result<()> {
    if l < 2 || k < 2 {
        return Err(Error::Config(format!("group batches need l >= 2 and k >= 2 (l = {l}, k = {k})")));
    }
    if ds.num_identities() < l {
        return Err(Error::Contract(format!(
            "dataset has {} identities, batch needs {l}",
            ds.num_identities()
        )));
    }
    if ds.min_images_per_id() < k {
        return Err(Error::Contract(format!("some identity has fewer than k = {k} images")));
    }
    Ok(())
}

fn fill_random_groups<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R, chosen: &mut Vec<usize>, l: usize) {
    while chosen.len() < l {
        let g = rng.random_range(0..ds.num_identities());
        if !chosen.contains(&g) {
            chosen.push(g);
        }
    }
}

/// `k` random distinct images for each chosen identity group.
fn materialize<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R, chosen: &[usize], k: usize) -> GroupBatch {
    let groups = chosen
        .iter()
        .map(|&g| {
            let members = ds.group_members(g);
            let samples = index::sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect();
            IdGroup {
                id: ds.identities()[g],
                samples,
            }
        })
        .collect();
    GroupBatch { groups }
}

/// `l` uniformly random identities with `k` random images each.
pub fn random_group_batch<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R, l: usize, k: usize) -> Result<GroupBatch> {
    check_group_request(ds, l, k)?;
    let chosen: Vec<usize> = index::sample(rng, ds.num_identities(), l).into_vec();
    Ok(materialize(ds, rng, &chosen, k))
}

/// What to do when the first drawn bin holds a single identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingleIdPolicy {
    /// Keep the bin's identity and add `l - 1` random ones.
    #[default]
    KeepBinId,
    /// Draw all `l` identities at random.
    AllRandom,
}

impl FromStr for SingleIdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_bin_id" => Ok(SingleIdPolicy::KeepBinId),
            "all_random" => Ok(SingleIdPolicy::AllRandom),
            other => Err(Error::Config(format!("unknown single-id policy {other:?}"))),
        }
    }
}

impl fmt::Display for SingleIdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SingleIdPolicy::KeepBinId => "keep_bin_id",
            SingleIdPolicy::AllRandom => "all_random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinnedBatchOptions {
    /// Extra bins drawn while topping up identities before random fill.
    pub max_bin_draws: usize,
    pub single_id: SingleIdPolicy,
}

impl Default for BinnedBatchOptions {
    fn default() -> Self {
        Self {
            max_bin_draws: 16,
            single_id: SingleIdPolicy::KeepBinId,
        }
    }
}

fn bin_groups(ds: &Dataset, table: &HashTable, bin: u32) -> Result<Vec<usize>> {
    table
        .distinct_ids_in_bin(Codeword(bin))
        .into_iter()
        .map(|id| {
            ds.group_index(id)
                .ok_or_else(|| Error::Contract(format!("table holds unknown identity {id}")))
        })
        .collect()
}

/// Group batch whose identities come from shared bins of `table`:
///
/// 1. draw a random non-empty bin with `r` distinct identities;
/// 2. `r == 1`: see [`SingleIdPolicy`]; `r >= l`: `l` of them at random;
/// 3. otherwise take all `r` and keep drawing random non-empty bins (repeats
///    allowed) for the missing identities, at most `max_bin_draws` times,
///    then fill up with random identities.
pub fn binned_group_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    table: &HashTable,
    rng: &mut R,
    l: usize,
    k: usize,
    opts: &BinnedBatchOptions,
) -> Result<GroupBatch> {
    check_group_request(ds, l, k)?;
    let nonempty = table.nonempty_bins();
    let mut chosen: Vec<usize> = Vec::with_capacity(l);
    if !nonempty.is_empty() {
        let first = nonempty[rng.random_range(0..nonempty.len())];
        let ids = bin_groups(ds, table, first)?;
        let r = ids.len();
        if r == 1 {
            if opts.single_id == SingleIdPolicy::KeepBinId {
                chosen.push(ids[0]);
            }
        } else if r >= l {
            chosen.extend(index::sample(rng, r, l).into_iter().map(|i| ids[i]));
        } else {
            chosen.extend_from_slice(&ids);
            let mut draws = 0;
            while chosen.len() < l && draws < opts.max_bin_draws {
                draws += 1;
                let bin = nonempty[rng.random_range(0..nonempty.len())];
                let fresh: Vec<usize> = bin_groups(ds, table, bin)?
                    .into_iter()
                    .filter(|g| !chosen.contains(g))
                    .collect();
                let need = l - chosen.len();
                if fresh.len() <= need {
                    chosen.extend_from_slice(&fresh);
                } else {
                    chosen.extend(index::sample(rng, fresh.len(), need).into_iter().map(|i| fresh[i]));
                }
            }
        }
    }
    fill_random_groups(ds, rng, &mut chosen, l);
    Ok(materialize(ds, rng, &chosen, k))
}
