//! Balanced K-Means partitioning of FFN neurons into equal-sized experts.
//!
//! Each neuron is represented by its up-projection row. The resulting
//! assignment also governs the matching gate-projection rows and
//! down-projection columns; parameters are never modified.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[serde(rename = "kmeans++")]
    KMeansPlusPlus,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_experts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub init: Init,
    /// Standardize each feature column before clustering. Off by default.
    pub standardize: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { n_experts: 256, max_iterations: 100, seed: 0, init: Init::KMeansPlusPlus, standardize: false }
    }
}

impl ClusterConfig {
    pub fn new(n_experts: usize, seed: u64) -> Self {
        Self { n_experts, seed, ..Self::default() }
    }
}

/// Assignment of every FFN neuron of every layer to one of `n_experts` equal-sized experts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertPartition {
    d_ff: usize,
    n_experts: usize,
    seed: u64,
    assignment: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    version: u32,
    n_layers: usize,
    d_ff: usize,
    n_experts: usize,
    seed: u64,
    assignment: Vec<Vec<usize>>,
}

impl ExpertPartition {
    /// Validates that every layer assigns exactly `d_ff / n_experts` neurons to each expert.
    pub fn new(assignment: Vec<Vec<usize>>, n_experts: usize, seed: u64) -> Result<Self> {
        let d_ff = assignment.first().map_or(0, Vec::len);
        if assignment.is_empty() || d_ff == 0 || n_experts == 0 {
            return Err(Error::Empty("partition needs at least one layer, neuron and expert".into()));
        }
        if d_ff % n_experts != 0 {
            return Err(Error::NotDivisible { d_ff, n_experts });
        }
        let per = d_ff / n_experts;
        for (l, layer) in assignment.iter().enumerate() {
            if layer.len() != d_ff {
                return Err(Error::DimMismatch(format!("layer {l} assigns {} neurons, expected {d_ff}", layer.len())));
            }
            let mut sizes = vec![0usize; n_experts];
            for &e in layer {
                if e >= n_experts {
                    return Err(Error::OutOfRange(format!("layer {l}: expert index {e} >= {n_experts}")));
                }
                sizes[e] += 1;
            }
            if let Some(e) = sizes.iter().position(|&s| s != per) {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: expert {e} has {} neurons, expected {per}",
                    sizes[e]
                )));
            }
        }
        Ok(Self { d_ff, n_experts, seed, assignment })
    }

    pub fn n_layers(&self) -> usize {
        self.assignment.len()
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn neurons_per_expert(&self) -> usize {
        self.d_ff / self.n_experts
    }

    /// Expert index of every neuron in `layer`.
    pub fn layer(&self, layer: usize) -> &[usize] {
        &self.assignment[layer]
    }

    /// Neuron indices of one expert, ascending.
    pub fn members(&self, layer: usize, expert: usize) -> Vec<usize> {
        self.assignment[layer].iter().enumerate().filter(|(_, &e)| e == expert).map(|(i, _)| i).collect()
    }

    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers() != config.n_layers || self.d_ff != config.d_ff {
            return Err(Error::DimMismatch(format!(
                "partition covers {} layers x {} neurons, model has {} x {}",
                self.n_layers(),
                self.d_ff,
                config.n_layers,
                config.d_ff
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PartitionFile {
            version: 1,
            n_layers: self.n_layers(),
            d_ff: self.d_ff,
            n_experts: self.n_experts,
            seed: self.seed,
            assignment: self.assignment.clone(),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PartitionFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(Error::Parse(format!("unsupported partition version {}", file.version)));
        }
        let p = Self::new(file.assignment, file.n_experts, file.seed)?;
        if p.n_layers() != file.n_layers || p.d_ff != file.d_ff {
            return Err(Error::DimMismatch("partition header disagrees with assignment".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Short content digest identifying this partition.
    pub fn digest(&self) -> String {
        let json = self.to_json().expect("partition serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Outcome of one balanced K-Means run.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squares after the initial assignment and after every accepted iteration.
    pub objective_history: Vec<f64>,
}

/// Partitions `rows` (one row per neuron) into `cfg.n_experts` clusters of equal size.
pub fn split_layer<T: Scalar>(rows: &Matrix<T>, cfg: &ClusterConfig) -> Result<Vec<usize>> {
    balanced_kmeans(rows, cfg).map(|c| c.assignment)
}

/// Balanced K-Means with the full iteration trace.
pub fn balanced_kmeans<T: Scalar>(rows: &Matrix<T>, cfg: &ClusterConfig) -> Result<Clustering> {
    let n = rows.rows();
    let k = cfg.n_experts;
    if k == 0 || n == 0 {
        return Err(Error::Empty("clustering needs rows and at least one cluster".into()));
    }
    if n % k != 0 {
        return Err(Error::NotDivisible { d_ff: n, n_experts: k });
    }
    if !rows.is_finite() {
        return Err(Error::NonFiniteInput("up-projection rows".into()));
    }
    let mut points = rows.map(|v| v.as_f64());
    if cfg.standardize {
        standardize_columns(&mut points);
    }
    let capacity = n / k;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = match cfg.init {
        Init::KMeansPlusPlus => kmeans_plus_plus(&points, k, &mut rng),
        Init::Random => {
            let idx: Vec<usize> = index::sample(&mut rng, n, k).into_vec();
            points.select_rows(&idx)
        }
    };
    let mut assignment = balanced_assign(&points, &centroids, capacity);
    let mut history = vec![wcss(&points, &assignment, k)];
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        centroids = cluster_means(&points, &assignment, k);
        let candidate = balanced_assign(&points, &centroids, capacity);
        if candidate == assignment {
            break;
        }
        // The greedy step is not guaranteed to improve on the current
        // assignment; stop rather than accept a worse one.
        if cost(&points, &candidate, &centroids) >= cost(&points, &assignment, &centroids) {
            break;
        }
        assignment = candidate;
        history.push(wcss(&points, &assignment, k));
    }
    Ok(Clustering { assignment, iterations, objective_history: history })
}

/// Applies [`split_layer`] to every layer's up-projection.
pub fn split_model<T: Scalar>(model: &ModelBundle<T>, cfg: &ClusterConfig) -> Result<ExpertPartition> {
    if model.config.d_ff % cfg.n_experts.max(1) != 0 || cfg.n_experts == 0 {
        return Err(Error::NotDivisible { d_ff: model.config.d_ff, n_experts: cfg.n_experts });
    }
    let assignment = model
        .layers
        .par_iter()
        .map(|layer| split_layer(&layer.up_proj, cfg))
        .collect::<Result<Vec<_>>>()?;
    ExpertPartition::new(assignment, cfg.n_experts, cfg.seed)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Total squared distance of each point to its cluster's centroid.
pub fn cost(points: &Matrix<f64>, assignment: &[usize], centroids: &Matrix<f64>) -> f64 {
    assignment.iter().enumerate().map(|(i, &c)| sq_dist(points.row(i), centroids.row(c))).sum()
}

/// Within-cluster sum of squares about the member means.
pub fn wcss(points: &Matrix<f64>, assignment: &[usize], k: usize) -> f64 {
    cost(points, assignment, &cluster_means(points, assignment, k))
}

fn cluster_means(points: &Matrix<f64>, assignment: &[usize], k: usize) -> Matrix<f64> {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= count as f64);
        }
    }
    sums
}

fn kmeans_plus_plus(points: &Matrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = Some(i);
                    if target < acc {
                        break;
                    }
                }
            }
            pick.expect("positive total weight")
        } else {
            // All remaining points coincide with a chosen centroid.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Capacity-constrained assignment: neurons with the largest gap between
/// their best and second-best centroid choose first, each taking its nearest
/// centroid that still has room. Ties resolve to the lowest index.
fn balanced_assign(points: &Matrix<f64>, centroids: &Matrix<f64>, capacity: usize) -> Vec<usize> {
    let n = points.rows();
    let k = centroids.rows();
    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..k).map(|c| sq_dist(points.row(i), centroids.row(c)).sqrt()).collect())
        .collect();
    let ranked: Vec<Vec<usize>> = dist
        .iter()
        .map(|d| {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            order
        })
        .collect();
    let margin: Vec<f64> = (0..n)
        .map(|i| if k > 1 { dist[i][ranked[i][1]] - dist[i][ranked[i][0]] } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| margin[b].total_cmp(&margin[a]).then(a.cmp(&b)));

    let mut load = vec![0usize; k];
    let mut assignment = vec![0usize; n];
    for i in order {
        let c = *ranked[i].iter().find(|&&c| load[c] < capacity).expect("total capacity equals n");
        load[c] += 1;
        assignment[i] = c;
    }
    assignment
}

fn standardize_columns(points: &mut Matrix<f64>) {
    let (n, d) = points.shape();
    for c in 0..d {
        let mean = (0..n).map(|r| points.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (points.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for r in 0..n {
            let v = points.get(r, c) - mean;
            points.set(r, c, if std > 0.0 { v / std } else { 0.0 });
        }
    }
}
