//! Datasets of identity-labelled feature vectors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Identity label, `ID(v)`.
pub type IdentityId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Unique sample index, equal to the sample's position in its dataset.
    pub v: usize,
    pub id: IdentityId,
    pub features: Vec<f64>,
}

/// Immutable table of samples with an identity index.
///
/// Identities are kept in ascending label order; each identity's member list
/// is in ascending sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    identities: Vec<IdentityId>,
    members: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, dim: usize) -> Result<Self> {
        let mut by_id: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.v != i {
                return Err(Error::Contract(format!(
                    "sample at position {i} has index {}",
                    s.v
                )));
            }
            if s.features.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
            by_id.entry(s.id).or_default().push(i);
        }
        let mut group_of = alloc::vec![0; samples.len()];
        let mut identities = Vec::with_capacity(by_id.len());
        let mut members = Vec::with_capacity(by_id.len());
        for (g, (id, list)) in by_id.into_iter().enumerate() {
            for &v in &list {
                group_of[v] = g;
            }
            identities.push(id);
            members.push(list);
        }
        Ok(Self {
            samples,
            dim,
            identities,
            members,
            group_of,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn features(&self, v: usize) -> &[f64] {
        &self.samples[v].features
    }

    pub fn id_of(&self, v: usize) -> IdentityId {
        self.samples[v].id
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Distinct identity labels, ascending.
    pub fn identities(&self) -> &[IdentityId] {
        &self.identities
    }

    /// Position of `v`'s identity in [`Dataset::identities`].
    pub fn group_of(&self, v: usize) -> usize {
        self.group_of[v]
    }

    /// Members of the identity at position `group`.
    pub fn group_members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn group_index(&self, id: IdentityId) -> Option<usize> {
        self.identities.binary_search(&id).ok()
    }

    /// Sample indices carrying identity `id`, ascending; empty if unknown.
    pub fn index_by_id(&self, id: IdentityId) -> &[usize] {
        match self.group_index(id) {
            Some(g) => &self.members[g],
            None => &[],
        }
    }

    /// Average number of images per identity, `n = N / #ids`.
    pub fn mean_images_per_id(&self) -> f64 {
        if self.identities.is_empty() {
            0.0
        } else {
            self.len() as f64 / self.identities.len() as f64
        }
    }

    pub fn min_images_per_id(&self) -> usize {
        self.members.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// All samples sharing `v`'s identity except `v`, ascending.
    pub fn positives_of(&self, v: usize) -> Result<Vec<usize>> {
        if v >= self.len() {
            return Err(Error::Index {
                index: v,
                len: self.len(),
            });
        }
        Ok(self.members[self.group_of[v]]
            .iter()
            .copied()
            .filter(|&u| u != v)
            .collect())
    }

    /// New dataset holding the given identities' samples, re-indexed in
    /// ascending order of their original index. Identity labels are kept.
    pub fn subset_by_identity(&self, ids: &[IdentityId]) -> Result<Self> {
        let mut keep = alloc::vec![false; self.identities.len()];
        for id in ids {
            let g = self
                .group_index(*id)
                .ok_or_else(|| Error::Contract(format!("unknown identity {id}")))?;
            keep[g] = true;
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| keep[self.group_of[s.v]])
            .enumerate()
            .map(|(i, s)| Sample {
                v: i,
                id: s.id,
                features: s.features.clone(),
            })
            .collect();
        Self::new(samples, self.dim)
    }

    /// Splits identities (not images) into a train and a validation set.
    /// `train_fraction` of the identities, rounded, go to the first dataset.
    pub fn split_by_identity<R: Rng + ?Sized>(
        &self,
        train_fraction: f64,
        rng: &mut R,
    ) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut ids = self.identities.clone();
        ids.shuffle(rng);
        let cut = libm::round(train_fraction * ids.len() as f64) as usize;
        let (train, val) = ids.split_at(cut);
        Ok((self.subset_by_identity(train)?, self.subset_by_identity(val)?))
    }
}

/// Parameters of the synthetic clustered-identity generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub input_dim: usize,
    /// Standard deviation of the per-identity centers.
    pub cluster_spread: f64,
    /// Standard deviation of the within-identity noise.
    pub noise_sigma: f64,
    /// Number of leading input coordinates that carry identity information.
    /// `None` places centers in all `input_dim` coordinates.
    pub signal_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 500,
            images_per_id: 10,
            input_dim: 64,
            cluster_spread: 1.0,
            noise_sigma: 0.3,
            signal_dim: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Config("num_ids must be at least 2".into()));
        }
        if self.images_per_id < 2 {
            return Err(Error::Config("images_per_id must be at least 2".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be finite and >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if let Some(sd) = self.signal_dim {
            if sd == 0 || sd > self.input_dim {
                return Err(Error::Config("signal_dim must be in 1..=input_dim".into()));
            }
        }
        Ok(())
    }
}

/// Gaussian identity centers plus Gaussian within-identity noise. Samples are
/// laid out identity-major: `v = id * images_per_id + j`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.input_dim;
    let signal = cfg.signal_dim.unwrap_or(d);
    let mut centers = alloc::vec![0.0; cfg.num_ids * d];
    for c in centers.chunks_exact_mut(d) {
        for x in c[..signal].iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = cfg.cluster_spread * z;
        }
    }
    let mut samples = Vec::with_capacity(cfg.num_ids * cfg.images_per_id);
    for (id, center) in centers.chunks_exact(d).enumerate() {
        for _ in 0..cfg.images_per_id {
            let features = center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + cfg.noise_sigma * z
                })
                .collect();
            samples.push(Sample {
                v: samples.len(),
                id: id as IdentityId,
                features,
            });
        }
    }
    Dataset::new(samples, d)
}
