//! Offline tables rebuilt from a full pass over the dataset: the
//! Spectral-Hashing oracle (PCA + sign) and static identity clusters.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Dataset;
use crate::embedding::EmbeddingModel;
use crate::hash::{Codeword, HashTable, MAX_BITS};
use crate::linalg::{dot, mean_covariance, sq_dist, symmetric_eigen};
use crate::{Error, Result};

/// Embeds every sample; row `v` of the result belongs to sample `v`.
pub fn embed_dataset(ds: &Dataset, model: &EmbeddingModel) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * model.embed_dim());
    for s in ds.samples() {
        out.extend_from_slice(model.forward(&s.features)?.output());
    }
    Ok(out)
}

/// Centering plus projection onto the leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `s x e`, row `i` is the `i`-th principal direction (or zero if the
    /// data has fewer than `s` directions with variance).
    pub components: Vec<f64>,
    /// Variance along each component, descending.
    pub variances: Vec<f64>,
    pub dim: usize,
    /// Components replaced by zero for lack of variance.
    pub deficient: usize,
}

impl PcaProjection {
    pub fn fit(rows: &[f64], dim: usize, s: usize) -> Result<Self> {
        if s > dim {
            return Err(Error::Config("PCA rank larger than the dimension".into()));
        }
        let (mean, cov) = mean_covariance(rows, dim);
        let eig = symmetric_eigen(&cov, dim);
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let mut components = vec![0.0; s * dim];
        let mut variances = vec![0.0; s];
        let mut deficient = 0;
        for i in 0..s {
            if eig.values[i] > 1e-12 * top && eig.values[i] > 0.0 {
                components[i * dim..(i + 1) * dim].copy_from_slice(eig.vector(i));
                variances[i] = eig.values[i];
            } else {
                deficient += 1;
            }
        }
        Ok(Self {
            mean,
            components,
            variances,
            dim,
            deficient,
        })
    }

    pub fn rank(&self) -> usize {
        self.variances.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components
            .chunks_exact(self.dim.max(1))
            .take(self.rank())
            .map(|c| dot(c, &centered))
            .collect()
    }

    /// Mean squared reconstruction error of `rows` from their projection.
    pub fn reconstruction_mse(&self, rows: &[f64]) -> f64 {
        let n = rows.len() / self.dim;
        let mut total = 0.0;
        for x in rows.chunks_exact(self.dim) {
            let p = self.project(x);
            let mut rec = self.mean.clone();
            for (coef, c) in p.iter().zip(self.components.chunks_exact(self.dim)) {
                for (r, ci) in rec.iter_mut().zip(c) {
                    *r += coef * ci;
                }
            }
            total += sq_dist(&rec, x);
        }
        total / n as f64
    }

    /// Sign of every projected coordinate, packed like an online codeword.
    pub fn codeword(&self, x: &[f64]) -> Codeword {
        let mut cw = 0u32;
        for (d, p) in self.project(x).iter().enumerate() {
            if *p > 0.0 {
                cw |= 1 << d;
            }
        }
        Codeword(cw)
    }
}

/// Frozen Spectral-Hashing table plus the number of padded (constant-zero)
/// bits, which is non-zero when the embedding has rank below `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShOracle {
    pub table: HashTable,
    pub projection: PcaProjection,
}

impl ShOracle {
    pub fn deficient_bits(&self) -> usize {
        self.projection.deficient
    }
}

/// Builds a Spectral-Hashing table from precomputed embeddings (one row per
/// sample of `ds`).
pub fn sh_table_from_embeddings(ds: &Dataset, emb: &[f64], dim: usize, bits: u32) -> Result<ShOracle> {
    if bits > MAX_BITS {
        return Err(Error::Config("too many bits".into()));
    }
    crate::error::check_len(ds.len() * dim, emb.len())?;
    let projection = PcaProjection::fit(emb, dim, bits as usize)?;
    let mut table = HashTable::new(bits, ds.len())?;
    for (v, x) in emb.chunks_exact(dim).enumerate() {
        table.update(v, ds.id_of(v), projection.codeword(x))?;
    }
    Ok(ShOracle { table, projection })
}

/// Embeds the whole dataset with the current model, then hashes it with
/// top-`s` PCA directions thresholded at zero.
pub fn sh_oracle_rebuild(ds: &Dataset, model: &EmbeddingModel, bits: u32) -> Result<ShOracle> {
    if bits as usize >= model.embed_dim() {
        return Err(Error::Config("Spectral Hashing needs s < e".into()));
    }
    let emb = embed_dataset(ds, model)?;
    sh_table_from_embeddings(ds, &emb, model.embed_dim(), bits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(cen, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by up to `iterations` Lloyd rounds. An empty
/// cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[f64], dim: usize, k: usize, iterations: usize, rng: &mut R) -> Result<KMeans> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    if k == 0 || k > n {
        return Err(Error::Config("k-means needs 1 <= k <= number of points".into()));
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(pt(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = pt(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(&centroids, dim, pt(i));
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(pt(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
                continue;
            }
            // empty: move to the point worst served by its current centroid
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(pt(a), &centroids[labels[a] * dim..(labels[a] + 1) * dim]);
                    let db = sq_dist(pt(b), &centroids[labels[b] * dim..(labels[b] + 1) * dim]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(pt(i));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KMeans { centroids, labels, dim })
}

/// Static identity clusters: per-identity mean embeddings clustered once,
/// every sample stored in its identity's cluster bin.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticClusters {
    pub table: HashTable,
    /// Cluster of each identity group (indexed like `Dataset::identities`).
    pub cluster_of_group: Vec<usize>,
}

pub const DEFAULT_NUM_CLUSTERS: usize = 10;
pub const KMEANS_ITERATIONS: usize = 50;

pub fn static_clusters_from_embeddings<R: Rng + ?Sized>(
    ds: &Dataset,
    emb: &[f64],
    dim: usize,
    num_clusters: usize,
    rng: &mut R,
) -> Result<StaticClusters> {
    crate::error::check_len(ds.len() * dim, emb.len())?;
    let g = ds.num_identities();
    let mut means = vec![0.0; g * dim];
    for group in 0..g {
        let members = ds.group_members(group);
        let m = &mut means[group * dim..(group + 1) * dim];
        for &v in members {
            for (a, x) in m.iter_mut().zip(&emb[v * dim..(v + 1) * dim]) {
                *a += x;
            }
        }
        m.iter_mut().for_each(|a| *a /= members.len() as f64);
    }
    let km = kmeans(&means, dim, num_clusters, KMEANS_ITERATIONS, rng)?;
    let mut table = HashTable::with_buckets(num_clusters, ds.len())?;
    for v in 0..ds.len() {
        table.update(v, ds.id_of(v), Codeword(km.labels[ds.group_of(v)] as u32))?;
    }
    Ok(StaticClusters {
        table,
        cluster_of_group: km.labels,
    })
}

pub fn static_cluster_table<R: Rng + ?Sized>(
    ds: &Dataset,
    model: &EmbeddingModel,
    num_clusters: usize,
    rng: &mut R,
) -> Result<StaticClusters> {
    let emb = embed_dataset(ds, model)?;
    static_clusters_from_embeddings(ds, &emb, model.embed_dim(), num_clusters, rng)
}
