//! Cluster-level statistics of the validation set and the selection
//! diagnostics built on them: discrete target loss, discretized source KL and
//! the diameter-weighted KL bound.

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterDiameters, DiameterEstimator, KMeansModel};
use crate::error::{CraftError, Result};

pub const DEFAULT_KL_SMOOTHING: f64 = 1e-9;
pub const DEFAULT_LIPSCHITZ: f64 = 1.0;

/// Joint (source cluster, target cluster) counts of the validation set and
/// the marginal / conditional distributions derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationDistribution {
    m_s: usize,
    m_t: usize,
    total: u64,
    joint_counts: Vec<u64>,
    source_counts: Vec<u64>,
    marginal: Vec<f64>,
    conditional: Vec<f64>,
}

impl ValidationDistribution {
    pub fn m_s(&self) -> usize {
        self.m_s
    }

    pub fn m_t(&self) -> usize {
        self.m_t
    }

    /// Validation set size.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn joint_count(&self, a: usize, b: usize) -> u64 {
        self.joint_counts[a * self.m_t + b]
    }

    pub fn source_counts(&self) -> &[u64] {
        &self.source_counts
    }

    /// `p_a`, the fraction of validation pairs in source cluster `a`.
    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    /// `p(. | a)` over target clusters; all zeros when source cluster `a` is empty.
    pub fn conditional(&self, a: usize) -> &[f64] {
        &self.conditional[a * self.m_t..(a + 1) * self.m_t]
    }

    pub fn is_empty_source(&self, a: usize) -> bool {
        self.source_counts[a] == 0
    }
}

pub fn estimate_distribution(
    src_assign: &[usize],
    tgt_assign: &[usize],
    m_s: usize,
    m_t: usize,
) -> Result<ValidationDistribution> {
    if src_assign.len() != tgt_assign.len() {
        return Err(CraftError::LengthMismatch(format!(
            "{} source assignments vs {} target assignments",
            src_assign.len(),
            tgt_assign.len()
        )));
    }
    if src_assign.is_empty() {
        return Err(CraftError::invalid("validation set is empty"));
    }
    if m_s == 0 || m_t == 0 {
        return Err(CraftError::invalid("cluster counts must be positive"));
    }
    let mut joint_counts = vec![0u64; m_s * m_t];
    for (i, (&a, &b)) in src_assign.iter().zip(tgt_assign).enumerate() {
        if a >= m_s || b >= m_t {
            return Err(CraftError::invalid(format!(
                "pair {i}: cluster ({a}, {b}) out of range for {m_s} x {m_t}"
            )));
        }
        joint_counts[a * m_t + b] += 1;
    }
    let total = src_assign.len() as u64;
    let source_counts: Vec<u64> = joint_counts.chunks(m_t).map(|r| r.iter().sum()).collect();
    let marginal = source_counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    let mut conditional = vec![0.0; m_s * m_t];
    for a in 0..m_s {
        if source_counts[a] == 0 {
            log::debug!("source cluster {a} has no validation pairs");
            continue;
        }
        for b in 0..m_t {
            conditional[a * m_t + b] = joint_counts[a * m_t + b] as f64 / source_counts[a] as f64;
        }
    }
    Ok(ValidationDistribution {
        m_s,
        m_t,
        total,
        joint_counts,
        source_counts,
        marginal,
        conditional,
    })
}

/// Euclidean distances between target centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidDistanceMatrix {
    size: usize,
    values: Vec<f64>,
}

impl CentroidDistanceMatrix {
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(CraftError::LengthMismatch(format!(
                "{} distances for a {size} x {size} matrix",
                values.len()
            )));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.size + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.size..(j + 1) * self.size]
    }
}

pub fn centroid_distances(target_model: &KMeansModel) -> CentroidDistanceMatrix {
    let m = target_model.k();
    let mut values = vec![0.0; m * m];
    for j in 0..m {
        for k in j + 1..m {
            let d = target_model
                .centroid(j)
                .iter()
                .zip(target_model.centroid(k))
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            if d == 0.0 {
                log::warn!("target centroids {j} and {k} coincide");
            }
            values[j * m + k] = d;
            values[k * m + j] = d;
        }
    }
    CentroidDistanceMatrix { size: m, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLoss {
    /// Bucket terms weighted by the validation marginal `p_i`.
    pub weighted: f64,
    /// Plain sum of bucket terms.
    pub unweighted: f64,
}

/// `sum_{j,k} d_jk p(j|i) q_{k|i}` for one source bucket, where `q_{.|i}` is
/// the empirical target-cluster distribution of `targets`. Empty lists give 0.
pub fn bucket_loss(
    dist: &ValidationDistribution,
    d: &CentroidDistanceMatrix,
    source_cluster: usize,
    targets: &[usize],
) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let m_t = dist.m_t();
    let mut counts = vec![0usize; m_t];
    for &t in targets {
        counts[t] += 1;
    }
    let n = targets.len() as f64;
    let p = dist.conditional(source_cluster);
    let mut term = 0.0;
    for j in 0..m_t {
        if p[j] == 0.0 {
            continue;
        }
        for k in 0..m_t {
            if counts[k] == 0 {
                continue;
            }
            term += d.get(j, k) * p[j] * (counts[k] as f64 / n);
        }
    }
    term
}

/// Discrete target loss of a selection given, per source cluster, the target
/// clusters of its selected candidates.
pub fn discrete_loss(
    dist: &ValidationDistribution,
    d: &CentroidDistanceMatrix,
    selection_tgt_clusters: &[Vec<usize>],
) -> Result<DiscreteLoss> {
    if selection_tgt_clusters.len() != dist.m_s() {
        return Err(CraftError::LengthMismatch(format!(
            "{} buckets for {} source clusters",
            selection_tgt_clusters.len(),
            dist.m_s()
        )));
    }
    if d.size() != dist.m_t() {
        return Err(CraftError::DimensionMismatch {
            expected: dist.m_t(),
            actual: d.size(),
        });
    }
    let mut loss = DiscreteLoss {
        weighted: 0.0,
        unweighted: 0.0,
    };
    for (i, targets) in selection_tgt_clusters.iter().enumerate() {
        if let Some(&bad) = targets.iter().find(|&&t| t >= dist.m_t()) {
            return Err(CraftError::invalid(format!(
                "target cluster {bad} out of range in bucket {i}"
            )));
        }
        let term = bucket_loss(dist, d, i, targets);
        loss.unweighted += term;
        loss.weighted += dist.marginal()[i] * term;
    }
    Ok(loss)
}

/// `KL(p || q)` in nats over cluster proportions. When some `q_i = 0` while
/// `p_i > 0`, `q` is smoothed to `(q + eps) / (1 + m eps)` so the result stays finite.
pub fn discretized_kl(p: &[f64], q: &[f64], epsilon: f64) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must have equal length");
    let needs_smoothing = p.iter().zip(q).any(|(&pi, &qi)| pi > 0.0 && qi <= 0.0);
    let m = p.len() as f64;
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let qi = if needs_smoothing {
                (qi + epsilon) / (1.0 + m * epsilon)
            } else {
                qi
            };
            pi * (pi / qi).ln()
        })
        .sum()
}

/// `sum_i p_i * lipschitz * eps_i`, the diameter term of the KL bound.
pub fn weighted_diameter(dist: &ValidationDistribution, diameters: &[f64]) -> f64 {
    dist.marginal()
        .iter()
        .zip(diameters)
        .map(|(p, e)| p * e)
        .sum()
}

/// Upper bound on the continuous source KL: `sum_i p_i L eps_i + kl_discrete`.
pub fn diameter_bound(
    dist: &ValidationDistribution,
    diameters: &[f64],
    lipschitz: f64,
    kl_discrete: f64,
) -> Result<f64> {
    if diameters.len() != dist.m_s() {
        return Err(CraftError::LengthMismatch(format!(
            "{} diameters for {} source clusters",
            diameters.len(),
            dist.m_s()
        )));
    }
    if !(lipschitz >= 0.0) {
        return Err(CraftError::invalid("Lipschitz constant must be non-negative"));
    }
    Ok(lipschitz * weighted_diameter(dist, diameters) + kl_discrete)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub cluster: usize,
    pub p: f64,
    /// Allotted budget; absent for selectors that do not allocate one.
    pub budget: Option<usize>,
    pub filled: usize,
    pub epsilon: f64,
    pub epsilon_estimator: DiameterEstimator,
}

/// Everything reported alongside a selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub selected: usize,
    /// Same value as `discrete_loss_weighted`.
    pub discrete_loss: f64,
    pub discrete_loss_weighted: f64,
    pub discrete_loss_unweighted: f64,
    pub source_kl: f64,
    pub weighted_diameter: f64,
    pub diameter_bound: f64,
    pub lipschitz: f64,
    pub per_cluster: Vec<ClusterDiagnostics>,
}

/// Cluster-level view of the pool: assignments of every candidate plus the
/// validation statistics needed to score a selection.
#[derive(Debug, Clone)]
pub struct SelectionContext<'a> {
    pub pool_src_assign: &'a [usize],
    pub pool_tgt_assign: &'a [usize],
    pub dist: &'a ValidationDistribution,
    pub distances: &'a CentroidDistanceMatrix,
    pub diameters: &'a ClusterDiameters,
    pub lipschitz: f64,
}

impl SelectionContext<'_> {
    /// Groups selected indices into per-source-cluster target lists.
    pub fn bucket_targets(&self, indices: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut buckets = vec![Vec::new(); self.dist.m_s()];
        for &idx in indices {
            if idx >= self.pool_src_assign.len() {
                return Err(CraftError::invalid(format!(
                    "selected index {idx} is out of range for a pool of {}",
                    self.pool_src_assign.len()
                )));
            }
            buckets[self.pool_src_assign[idx]].push(self.pool_tgt_assign[idx]);
        }
        Ok(buckets)
    }

    pub fn evaluate(&self, indices: &[usize], budgets: Option<&[usize]>) -> Result<Diagnostics> {
        if indices.is_empty() {
            return Err(CraftError::invalid("cannot evaluate an empty selection"));
        }
        if self.pool_src_assign.len() != self.pool_tgt_assign.len() {
            return Err(CraftError::LengthMismatch(
                "pool source and target assignments differ in length".into(),
            ));
        }
        let buckets = self.bucket_targets(indices)?;
        let loss = discrete_loss(self.dist, self.distances, &buckets)?;
        let q: Vec<f64> = buckets
            .iter()
            .map(|b| b.len() as f64 / indices.len() as f64)
            .collect();
        let source_kl = discretized_kl(self.dist.marginal(), &q, DEFAULT_KL_SMOOTHING);
        let eps = &self.diameters.values;
        let bound = diameter_bound(self.dist, eps, self.lipschitz, source_kl)?;
        let per_cluster = (0..self.dist.m_s())
            .map(|a| ClusterDiagnostics {
                cluster: a,
                p: self.dist.marginal()[a],
                budget: budgets.map(|b| b[a]),
                filled: buckets[a].len(),
                epsilon: eps[a],
                epsilon_estimator: self.diameters.estimators[a],
            })
            .collect();
        Ok(Diagnostics {
            selected: indices.len(),
            discrete_loss: loss.weighted,
            discrete_loss_weighted: loss.weighted,
            discrete_loss_unweighted: loss.unweighted,
            source_kl,
            weighted_diameter: weighted_diameter(self.dist, eps),
            diameter_bound: bound,
            lipschitz: self.lipschitz,
            per_cluster,
        })
    }
}
