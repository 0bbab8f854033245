//! Run configuration shared by `train`, `compare` and the tests.

use std::path::PathBuf;

use bon_core::data::SynthConfig;
use bon_core::embedding::Arch;
use bon_core::hash::ThresholdOrder;
use bon_core::optim::{LrSchedule, OptimizerKind};
use bon_core::samplers::{SamplerKind, SingleIdPolicy};
use serde::{Deserialize, Serialize};

use crate::error::{BonError, Result};

/// Serde adapters for core enums, spelled with their CLI names.
macro_rules! named_enum {
    ($module:ident, $ty:ty) => {
        mod $module {
            use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

            pub fn serialize<S: Serializer>(v: &$ty, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(v)
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<$ty, D::Error> {
                let name = String::deserialize(d)?;
                name.parse().map_err(|e: bon_core::Error| D::Error::custom(e))
            }
        }
    };
}

named_enum!(sampler_name, bon_core::samplers::SamplerKind);
named_enum!(policy_name, bon_core::samplers::SingleIdPolicy);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Linear,
    #[default]
    OneHiddenTanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerName {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::ADAM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderName {
    #[default]
    UpdateThenExtract,
    ExtractThenUpdate,
}

impl From<OrderName> for ThresholdOrder {
    fn from(o: OrderName) -> Self {
        match o {
            OrderName::UpdateThenExtract => ThresholdOrder::UpdateThenExtract,
            OrderName::ExtractThenUpdate => ThresholdOrder::ExtractThenUpdate,
        }
    }
}

/// Synthetic dataset parameters.
///
/// The defaults are the calibrated desk benchmark: identity centers live in
/// a 16-dimensional subspace of the 64 input coordinates and the remaining
/// coordinates are pure noise, so a random embedding starts far from
/// separating the identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub noise_sigma: f64,
    pub signal_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_ids: 500,
            images_per_id: 10,
            input_dim: 64,
            cluster_spread: 1.0,
            noise_sigma: 0.4,
            signal_dim: Some(16),
            seed: 0,
        }
    }
}

impl From<&SynthParams> for SynthConfig {
    fn from(p: &SynthParams) -> Self {
        SynthConfig {
            num_ids: p.num_ids,
            images_per_id: p.images_per_id,
            input_dim: p.input_dim,
            cluster_spread: p.cluster_spread,
            noise_sigma: p.noise_sigma,
            signal_dim: p.signal_dim,
            seed: p.seed,
        }
    }
}

impl From<&SynthConfig> for SynthParams {
    fn from(c: &SynthConfig) -> Self {
        SynthParams {
            num_ids: c.num_ids,
            images_per_id: c.images_per_id,
            input_dim: c.input_dim,
            cluster_spread: c.cluster_spread,
            noise_sigma: c.noise_sigma,
            signal_dim: c.signal_dim,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Label used for output file names in `compare`.
    pub name: Option<String>,
    #[serde(with = "sampler_name")]
    pub sampler: SamplerKind,
    pub alpha: f64,
    /// Batch size; `l = m / k` for group samplers, `b = m / 3` for triplets.
    pub m: usize,
    pub k: usize,
    /// Codeword bits.
    pub s: u32,
    pub beta: f64,
    pub steps: u64,
    pub eval_interval: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub optimizer: OptimizerName,
    pub ae_lr: f64,
    pub threshold_order: OrderName,
    /// Fill the table with every training sample before the first step.
    pub warm_start: bool,
    pub sh_rebuild_interval: u64,
    pub num_clusters: usize,
    pub max_bin_draws: usize,
    #[serde(with = "policy_name")]
    pub single_id_policy: SingleIdPolicy,
    pub arch: ArchName,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Upper bound on the samples of each evaluation subset.
    pub eval_subset: usize,
    /// Evaluate on the full splits instead of the subsets.
    pub full_eval: bool,
    /// Anchor-positive pairs averaged into the `p_hat` column.
    pub p_hat_pairs: usize,
    /// Batches drawn to estimate the step-0 loss statistics.
    pub probe_batches: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// End the run at the first evaluation reaching this training mAP.
    pub stop_at_train_map: Option<f64>,
    /// Dataset file; the synthetic generator is used when absent.
    pub dataset: Option<PathBuf>,
    pub synth: SynthParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: None,
            sampler: SamplerKind::BonBatchHard,
            alpha: bon_core::losses::DEFAULT_MARGIN,
            m: 48,
            k: 2,
            s: 8,
            beta: 0.99,
            steps: 20_000,
            eval_interval: 500,
            lr: 1e-4,
            lr_decay: 0.9,
            lr_decay_every: 50_000,
            optimizer: OptimizerName::Adam,
            ae_lr: 1e-3,
            threshold_order: OrderName::UpdateThenExtract,
            warm_start: true,
            sh_rebuild_interval: 1000,
            num_clusters: bon_core::offline::DEFAULT_NUM_CLUSTERS,
            max_bin_draws: 16,
            single_id_policy: SingleIdPolicy::KeepBinId,
            arch: ArchName::OneHiddenTanh,
            hidden: 64,
            embed_dim: 32,
            eval_subset: 2000,
            full_eval: false,
            p_hat_pairs: 64,
            probe_batches: 20,
            seed: 0,
            train_fraction: 0.8,
            stop_at_train_map: None,
            dataset: None,
            synth: SynthParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Arch {
        match self.arch {
            ArchName::Linear => Arch::Linear,
            ArchName::OneHiddenTanh => Arch::OneHiddenTanh { hidden: self.hidden },
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            decay_factor: self.lr_decay,
            decay_every: self.lr_decay_every,
        }
    }

    /// Identities per group batch.
    pub fn l(&self) -> usize {
        self.m / self.k.max(1)
    }

    /// Triplets per triplet batch.
    pub fn b(&self) -> usize {
        self.m / 3
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_seed{}", self.sampler, self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BonError::Usage(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.sampler.is_group() {
            if self.k < 2 {
                return bad(format!("k must be at least 2, got {}", self.k));
            }
            if self.m % self.k != 0 || self.l() < 2 {
                return bad(format!("m = {} must be l * k with l >= 2 (k = {})", self.m, self.k));
            }
        } else if self.m % 3 != 0 || self.m == 0 {
            return bad(format!("m = {} must be a positive multiple of 3 for triplet samplers", self.m));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if !(self.lr > 0.0 && self.ae_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_decay_every == 0 || !(self.lr_decay > 0.0) {
            return bad("lr decay factor and period must be positive".into());
        }
        if !bon_core::hash::BETA_RANGE.contains(&self.beta) {
            return bad(format!("beta must lie in [0.95, 0.999], got {}", self.beta));
        }
        if self.s > bon_core::hash::MAX_BITS {
            return bad(format!("s must be at most {}", bon_core::hash::MAX_BITS));
        }
        let uses_codes = self.sampler.uses_bon() || self.sampler == SamplerKind::ShOracleBatchHard;
        if uses_codes && self.s as usize >= self.embed_dim {
            return bad(format!("s = {} must be smaller than embed_dim = {}", self.s, self.embed_dim));
        }
        if self.sampler == SamplerKind::StaticClusterBatchHard && self.num_clusters == 0 {
            return bad("num_clusters must be positive".into());
        }
        if self.sampler == SamplerKind::ShOracleBatchHard && self.sh_rebuild_interval == 0 {
            return bad("sh_rebuild_interval must be positive".into());
        }
        if self.embed_dim == 0 || (self.arch == ArchName::OneHiddenTanh && self.hidden == 0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1".into());
        }
        if self.eval_subset < 4 {
            return bad("eval_subset must be at least 4".into());
        }
        Ok(())
    }
}
