//! The training loop and its evaluation log.

use std::time::{Duration, Instant};

use bon_core::data::{generate_synthetic, Dataset, IdentityId};
use bon_core::embedding::{EmbeddingModel, ForwardCache, GradientBuffer};
use bon_core::hash::{BonConfig, BonState, HashTable};
use bon_core::losses::{batch_hard_loss, semi_hard_loss, triplet_batch_loss, LossReport};
use bon_core::metrics::{mean_average_precision, p_hat_bruteforce};
use bon_core::offline::{embed_dataset, sh_oracle_rebuild, static_cluster_table};
use bon_core::optim::Optimizer;
use bon_core::samplers::{
    binned_group_batch, bon_random_batch, random_group_batch, vanilla_batch, BinnedBatchOptions, SamplerKind,
};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{BonError, Result};
use crate::format::read_dataset;

/// Independent random streams of one run, all derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    ModelInit = 0,
    Sampler = 1,
    Hashing = 2,
    Probe = 3,
    Split = 4,
    EvalSubset = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: u64,
    pub train_map: f64,
    pub val_map: f64,
    pub nonzero_frac: f64,
    pub mean_loss: f64,
    pub p_hat: f64,
    pub wall_ms: f64,
}

impl RunRow {
    /// Equality on every column except wall time.
    pub fn same_values(&self, other: &RunRow) -> bool {
        self.step == other.step
            && self.train_map.to_bits() == other.train_map.to_bits()
            && self.val_map.to_bits() == other.val_map.to_bits()
            && self.nonzero_frac.to_bits() == other.nonzero_frac.to_bits()
            && self.mean_loss.to_bits() == other.mean_loss.to_bits()
            && self.p_hat.to_bits() == other.p_hat.to_bits()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

pub const RUNLOG_HEADER: [&str; 7] = ["step", "train_map", "val_map", "nonzero_frac", "mean_loss", "p_hat", "wall_ms"];

impl RunLog {
    /// Equality ignoring the wall-time column.
    pub fn same_values(&self, other: &RunLog) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_values(b))
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for w in self.rows.windows(2) {
            if w[1].step <= w[0].step {
                return Err(format!("step {} follows {}", w[1].step, w[0].step));
            }
        }
        for r in &self.rows {
            for (name, x) in [
                ("train_map", r.train_map),
                ("val_map", r.val_map),
                ("nonzero_frac", r.nonzero_frac),
                ("p_hat", r.p_hat),
            ] {
                if !(0.0..=1.0).contains(&x) {
                    return Err(format!("{name} = {x} at step {}", r.step));
                }
            }
        }
        Ok(())
    }

    /// First step whose training mAP reaches `target`.
    pub fn steps_to_train_map(&self, target: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.train_map >= target).map(|r| r.step)
    }

    /// Peak validation mAP and the first step attaining it.
    pub fn peak_val(&self) -> Option<(f64, u64)> {
        let mut best: Option<(f64, u64)> = None;
        for r in &self.rows {
            if best.is_none_or(|(m, _)| r.val_map > m) {
                best = Some((r.val_map, r.step));
            }
        }
        best
    }

    /// Non-zero fraction at the point where training mAP first crosses
    /// `target`, linearly interpolated between the bracketing rows.
    pub fn nonzero_frac_at_train_map(&self, target: f64) -> Option<f64> {
        let first = self.rows.first()?;
        if first.train_map >= target {
            return Some(first.nonzero_frac);
        }
        for w in self.rows.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.train_map >= target {
                let t = (target - a.train_map) / (b.train_map - a.train_map);
                return Some(a.nonzero_frac + t * (b.nonzero_frac - a.nonzero_frac));
            }
        }
        None
    }
}

/// Wall time split of the training steps, evaluation excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Everything spent on training steps, hash maintenance included.
    pub train_ms: f64,
    /// Hash table, auto-encoder and offline table maintenance.
    pub hash_ms: f64,
    pub eval_ms: f64,
}

impl Timing {
    pub fn hash_fraction(&self) -> f64 {
        if self.train_ms > 0.0 {
            self.hash_ms / self.train_ms
        } else {
            0.0
        }
    }
}

/// Sample tables consulted by the binned samplers.
#[derive(Debug, Clone)]
pub enum SamplerState {
    None,
    Bon(Box<BonState>),
    Frozen(HashTable),
}

impl SamplerState {
    pub fn table(&self) -> Option<&HashTable> {
        match self {
            SamplerState::None => None,
            SamplerState::Bon(b) => Some(&b.table),
            SamplerState::Frozen(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: RunLog,
    pub model: EmbeddingModel,
    pub state: SamplerState,
    pub timing: Timing,
    /// Number of optimizer steps actually applied.
    pub steps_run: u64,
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => read_dataset(path),
        None => generate_synthetic(&(&cfg.synth).into()).map_err(|e| BonError::Usage(e.to_string())),
    }
}

/// Train/validation split by identity.
pub fn split(cfg: &TrainConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut rng = stream_rng(cfg.seed, Stream::Split);
    ds.split_by_identity(cfg.train_fraction, &mut rng).map_err(BonError::Data)
}

/// Whole-identity subset of at most `limit` samples, as sorted indices.
fn eval_indices(ds: &Dataset, limit: usize, full: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if full || ds.len() <= limit {
        return (0..ds.len()).collect();
    }
    let mut groups: Vec<usize> = (0..ds.num_identities()).collect();
    groups.shuffle(rng);
    let mut chosen = Vec::new();
    for g in groups {
        let members = ds.group_members(g);
        if chosen.len() + members.len() <= limit {
            chosen.extend_from_slice(members);
        }
    }
    chosen.sort_unstable();
    chosen
}

struct EvalSet {
    indices: Vec<usize>,
    ids: Vec<IdentityId>,
    /// Anchor-positive pairs as positions within `indices`.
    pairs: Vec<(usize, usize)>,
}

impl EvalSet {
    fn new(ds: &Dataset, indices: Vec<usize>, pairs: usize, rng: &mut ChaCha8Rng) -> Self {
        let ids: Vec<IdentityId> = indices.iter().map(|&v| ds.id_of(v)).collect();
        let mut out = Vec::with_capacity(pairs);
        if !indices.is_empty() {
            while out.len() < pairs {
                let a = index::sample(rng, indices.len(), 1).index(0);
                let mates: Vec<usize> = (0..indices.len()).filter(|&j| j != a && ids[j] == ids[a]).collect();
                if mates.is_empty() {
                    continue;
                }
                out.push((a, mates[index::sample(rng, mates.len(), 1).index(0)]));
            }
        }
        EvalSet { indices, ids, pairs: out }
    }

    fn embed(&self, ds: &Dataset, model: &EmbeddingModel) -> bon_core::Result<Vec<f64>> {
        let mut emb = Vec::with_capacity(self.indices.len() * model.embed_dim());
        for &v in &self.indices {
            emb.extend(model.embed(ds.features(v))?);
        }
        Ok(emb)
    }
}

/// Loss statistics accumulated between two evaluations.
#[derive(Default)]
struct Window {
    nonzero: usize,
    terms: usize,
    loss: f64,
}

impl Window {
    fn add(&mut self, report: &LossReport) {
        self.nonzero += report.nonzero_terms();
        self.terms += report.terms.len();
        self.loss += report.value;
    }

    fn take(&mut self) -> (f64, f64) {
        let out = if self.terms == 0 {
            (0.0, 0.0)
        } else {
            (self.nonzero as f64 / self.terms as f64, self.loss / self.terms as f64)
        };
        *self = Window::default();
        out
    }
}

enum Batch {
    Triplets(Vec<(usize, usize, usize)>),
    Groups(Vec<usize>, Vec<IdentityId>),
}

impl Batch {
    /// Distinct sample indices and, per role slot, the position in that list.
    fn unique(&self) -> (Vec<usize>, Vec<usize>) {
        let flat: Vec<usize> = match self {
            Batch::Triplets(t) => t.iter().flat_map(|&(a, p, n)| [a, p, n]).collect(),
            Batch::Groups(s, _) => s.clone(),
        };
        let mut uniq: Vec<usize> = Vec::with_capacity(flat.len());
        let slots = flat
            .iter()
            .map(|v| match uniq.iter().position(|u| u == v) {
                Some(i) => i,
                None => {
                    uniq.push(*v);
                    uniq.len() - 1
                }
            })
            .collect();
        (uniq, slots)
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    model: EmbeddingModel,
    state: SamplerState,
    opts: BinnedBatchOptions,
    hash_rng: ChaCha8Rng,
    hash_time: Duration,
}

impl Trainer<'_> {
    fn build_batch(&self, rng: &mut ChaCha8Rng) -> bon_core::Result<Batch> {
        let (cfg, ds) = (self.cfg, self.train);
        let (l, k) = (cfg.l(), cfg.k);
        let groups = |b: bon_core::samplers::GroupBatch| Batch::Groups(b.sample_indices(), b.labels());
        let triplets = |b: bon_core::samplers::TripletBatch| {
            Batch::Triplets(b.triplets.iter().map(|t| (t.a, t.p, t.n)).collect())
        };
        Ok(match cfg.sampler {
            SamplerKind::Vanilla => triplets(vanilla_batch(ds, rng, cfg.b())?),
            SamplerKind::BonRandom => {
                let table = self.state.table().expect("bon state");
                triplets(bon_random_batch(ds, table, rng, cfg.b())?)
            }
            SamplerKind::SemiHard | SamplerKind::BatchHard => groups(random_group_batch(ds, rng, l, k)?),
            SamplerKind::BonBatchHard | SamplerKind::ShOracleBatchHard | SamplerKind::StaticClusterBatchHard => {
                let table = self.state.table().expect("sampler table");
                groups(binned_group_batch(ds, table, rng, l, k, &self.opts)?)
            }
        })
    }

    /// Forward pass and loss of one batch. Returns the unique samples, their
    /// forward caches and the loss over the unique rows.
    fn forward_loss(&self, batch: &Batch) -> bon_core::Result<(Vec<usize>, Vec<ForwardCache>, LossReport)> {
        let (uniq, slots) = batch.unique();
        let caches = uniq
            .iter()
            .map(|&v| self.model.forward(self.train.features(v)))
            .collect::<bon_core::Result<Vec<_>>>()?;
        let e = self.model.embed_dim();
        let mut emb = Vec::with_capacity(uniq.len() * e);
        for c in &caches {
            emb.extend_from_slice(c.output());
        }
        let alpha = self.cfg.alpha;
        let report = match batch {
            Batch::Triplets(_) => {
                let t: Vec<(usize, usize, usize)> = slots.chunks_exact(3).map(|c| (c[0], c[1], c[2])).collect();
                triplet_batch_loss(&emb, e, &t, alpha)?
            }
            Batch::Groups(_, labels) => match self.cfg.sampler {
                SamplerKind::SemiHard => semi_hard_loss(&emb, e, labels, alpha)?,
                _ => batch_hard_loss(&emb, e, labels, alpha)?,
            },
        };
        Ok((uniq, caches, report))
    }

    fn rebuild_offline(&mut self) -> bon_core::Result<()> {
        let t0 = Instant::now();
        match self.cfg.sampler {
            SamplerKind::ShOracleBatchHard => {
                let sh = sh_oracle_rebuild(self.train, &self.model, self.cfg.s)?;
                if sh.deficient_bits() > 0 {
                    log::warn!("embedding rank below s: {} constant bits", sh.deficient_bits());
                }
                self.state = SamplerState::Frozen(sh.table);
            }
            SamplerKind::StaticClusterBatchHard => {
                let clusters = static_cluster_table(self.train, &self.model, self.cfg.num_clusters, &mut self.hash_rng)?;
                self.state = SamplerState::Frozen(clusters.table);
            }
            _ => {}
        }
        self.hash_time += t0.elapsed();
        Ok(())
    }

    fn warm_start(&mut self) -> bon_core::Result<()> {
        let t0 = Instant::now();
        if let SamplerState::Bon(bon) = &mut self.state {
            let all: Vec<usize> = (0..self.train.len()).collect();
            let emb = embed_dataset(self.train, &self.model)?;
            let e = self.model.embed_dim();
            for chunk in all.chunks(self.cfg.m) {
                let ids: Vec<IdentityId> = chunk.iter().map(|&v| self.train.id_of(v)).collect();
                let rows = &emb[chunk[0] * e..(chunk[chunk.len() - 1] + 1) * e];
                bon.process_minibatch(chunk, &ids, rows)?;
            }
        }
        self.hash_time += t0.elapsed();
        Ok(())
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs one training configuration on an already loaded dataset.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let echo = serde_json::to_string(cfg).unwrap_or_default();
    let fail = |step: u64| {
        let echo = echo.clone();
        move |source: bon_core::Error| BonError::Training { step, source, config: echo }
    };

    let (train, val) = split(cfg, ds)?;
    if cfg.sampler.is_group() && train.num_identities() < cfg.l() {
        return Err(BonError::Usage(format!(
            "training split has {} identities, batches need l = {}",
            train.num_identities(),
            cfg.l()
        )));
    }
    let mut eval_rng = stream_rng(cfg.seed, Stream::EvalSubset);
    let train_eval = EvalSet::new(&train, eval_indices(&train, cfg.eval_subset, cfg.full_eval, &mut eval_rng), cfg.p_hat_pairs, &mut eval_rng);
    let val_eval = EvalSet::new(&val, eval_indices(&val, cfg.eval_subset, cfg.full_eval, &mut eval_rng), 0, &mut eval_rng);

    let mut init_rng = stream_rng(cfg.seed, Stream::ModelInit);
    let model = EmbeddingModel::new(cfg.arch(), train.dim(), cfg.embed_dim, &mut init_rng).map_err(fail(0))?;
    let mut hash_rng = stream_rng(cfg.seed, Stream::Hashing);
    let state = if cfg.sampler.uses_bon() {
        let bon_cfg = BonConfig {
            bits: cfg.s,
            beta: cfg.beta,
            ae_lr: cfg.ae_lr,
            ae_optimizer: cfg.optimizer.kind(),
            order: cfg.threshold_order.into(),
        };
        SamplerState::Bon(Box::new(
            BonState::new(&bon_cfg, cfg.embed_dim, train.len(), &mut hash_rng).map_err(fail(0))?,
        ))
    } else {
        SamplerState::None
    };
    let mut t = Trainer {
        cfg,
        train: &train,
        model,
        state,
        opts: BinnedBatchOptions {
            max_bin_draws: cfg.max_bin_draws,
            single_id: cfg.single_id_policy,
        },
        hash_rng,
        hash_time: Duration::ZERO,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer.kind(), cfg.schedule(), t.model.num_params());
    let mut sampler_rng = stream_rng(cfg.seed, Stream::Sampler);
    let mut probe_rng = stream_rng(cfg.seed, Stream::Probe);

    let start = Instant::now();
    let mut train_time = Duration::ZERO;
    let mut eval_time = Duration::ZERO;

    let t0 = Instant::now();
    if cfg.warm_start {
        t.warm_start().map_err(fail(0))?;
    }
    t.rebuild_offline().map_err(fail(0))?;
    train_time += t0.elapsed();

    let evaluate = |t: &Trainer, step: u64, window: (f64, f64), start: Instant| -> bon_core::Result<RunRow> {
        let e = t.model.embed_dim();
        let temb = train_eval.embed(&train, &t.model)?;
        let vemb = val_eval.embed(&val, &t.model)?;
        let train_map = mean_average_precision(&temb, e, &train_eval.ids, &(0..train_eval.ids.len()).collect::<Vec<_>>())?.map;
        let val_map = if val_eval.ids.len() >= 2 {
            mean_average_precision(&vemb, e, &val_eval.ids, &(0..val_eval.ids.len()).collect::<Vec<_>>())?.map
        } else {
            0.0
        };
        let mut p_hat = 0.0;
        for &(a, p) in &train_eval.pairs {
            p_hat += p_hat_bruteforce(&temb, e, &train_eval.ids, a, p, cfg.alpha)?;
        }
        if !train_eval.pairs.is_empty() {
            p_hat /= train_eval.pairs.len() as f64;
        }
        Ok(RunRow {
            step,
            train_map,
            val_map,
            nonzero_frac: window.0,
            mean_loss: window.1,
            p_hat,
            wall_ms: ms(start.elapsed()),
        })
    };

    // Step-0 loss statistics come from probe batches that leave the
    // training stream and all state untouched.
    let mut probe = Window::default();
    for _ in 0..cfg.probe_batches {
        let batch = t.build_batch(&mut probe_rng).map_err(fail(0))?;
        let (_, _, report) = t.forward_loss(&batch).map_err(fail(0))?;
        probe.add(&report);
    }
    let t0 = Instant::now();
    let mut log = RunLog {
        rows: vec![evaluate(&t, 0, probe.take(), start).map_err(fail(0))?],
    };
    eval_time += t0.elapsed();

    let target_hit = |log: &RunLog| {
        cfg.stop_at_train_map
            .is_some_and(|target| log.rows.last().is_some_and(|r| r.train_map >= target))
    };
    let mut window = Window::default();
    let mut steps_run = 0;
    let ids_of = |uniq: &[usize]| -> Vec<IdentityId> { uniq.iter().map(|&v| train.id_of(v)).collect() };
    if !target_hit(&log) {
        for step in 1..=cfg.steps {
            let t0 = Instant::now();
            let batch = t.build_batch(&mut sampler_rng).map_err(fail(step))?;
            let (uniq, caches, report) = t.forward_loss(&batch).map_err(fail(step))?;
            window.add(&report);
            let e = t.model.embed_dim();
            let scale = 1.0 / report.terms.len().max(1) as f64;
            let mut grads: GradientBuffer = t.model.zero_grads();
            if report.nonzero() {
                for (row, cache) in caches.iter().enumerate() {
                    let g = report.grad(row);
                    if g.iter().any(|&x| x != 0.0) {
                        let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
                        t.model.accumulate_backward(cache, &g, &mut grads).map_err(fail(step))?;
                    }
                }
            }
            optimizer.step(t.model.params_mut(), &grads.0).map_err(fail(step))?;

            let h0 = Instant::now();
            if let SamplerState::Bon(bon) = &mut t.state {
                let mut emb = Vec::with_capacity(uniq.len() * e);
                for c in &caches {
                    emb.extend_from_slice(c.output());
                }
                bon.process_minibatch(&uniq, &ids_of(&uniq), &emb).map_err(fail(step))?;
            }
            t.hash_time += h0.elapsed();
            if cfg.sampler == SamplerKind::ShOracleBatchHard && step % cfg.sh_rebuild_interval == 0 {
                t.rebuild_offline().map_err(fail(step))?;
            }
            train_time += t0.elapsed();
            steps_run = step;

            if step % cfg.eval_interval == 0 || step == cfg.steps {
                let t0 = Instant::now();
                log.rows.push(evaluate(&t, step, window.take(), start).map_err(fail(step))?);
                eval_time += t0.elapsed();
                if target_hit(&log) {
                    break;
                }
            }
        }
    }
    let timing = Timing {
        train_ms: ms(train_time),
        hash_ms: ms(t.hash_time),
        eval_ms: ms(eval_time),
    };
    Ok(RunOutput {
        log,
        model: t.model,
        state: t.state,
        timing,
        steps_run,
    })
}

/// Loads the configured dataset and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    train_on(cfg, &ds)
}

/// mAP of `model` over every sample of `ds`.
pub fn evaluate_model(ds: &Dataset, model: &EmbeddingModel) -> Result<bon_core::metrics::MapReport> {
    if model.input_dim() != ds.dim() {
        return Err(BonError::Usage(format!(
            "model expects {} input features, dataset has {}",
            model.input_dim(),
            ds.dim()
        )));
    }
    let emb = embed_dataset(ds, model).map_err(BonError::Data)?;
    let ids: Vec<IdentityId> = ds.samples().iter().map(|s| s.id).collect();
    let queries: Vec<usize> = (0..ds.len()).collect();
    mean_average_precision(&emb, model.embed_dim(), &ids, &queries).map_err(BonError::Data)
}
