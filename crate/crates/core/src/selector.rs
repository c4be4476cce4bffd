//! Two-stage conditional selection plus the baselines it is compared against.
//!
//! Stage one apportions the budget over source clusters in proportion to the
//! validation marginal (largest-remainder rounding with capacity repair).
//! Stage two scores every candidate in a source bucket by the expected
//! distance between its target centroid and the validation target
//! distribution conditioned on that bucket, and keeps the cheapest ones.

use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign_nearest, kmeans_fit, KMeansConfig};
use crate::error::{CraftError, Result};
use crate::stats::{
    bucket_loss, discrete_loss, CentroidDistanceMatrix, Diagnostics, DiscreteLoss,
    ValidationDistribution,
};
use crate::vectors::VectorSet;

/// Remainders closer than this (after scaling by 1e9) are treated as tied.
const REMAINDER_RESOLUTION: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub budgets: Vec<usize>,
    pub total: usize,
    /// Budget units moved away from clusters whose bucket was too small.
    pub underflow_moved: usize,
}

/// Hamilton apportionment of `total` seats over `weights`. Ties in the
/// fractional remainder go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if total == 0 || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<(i64, usize)> = quotas
        .iter()
        .enumerate()
        .filter(|(_, q)| **q > 0.0)
        .map(|(a, q)| (((q - q.floor()) * REMAINDER_RESOLUTION).round() as i64, a))
        .collect();
    order.sort_unstable_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    let remaining = total.saturating_sub(assigned);
    for &(_, a) in order.iter().cycle().take(remaining) {
        seats[a] += 1;
    }
    seats
}

/// Apportions `k` over source clusters in proportion to `marginal`, then moves
/// any budget exceeding a bucket's size to the remaining clusters by the same
/// rule until every budget fits. Clusters with zero mass never receive budget.
pub fn allocate_budget(marginal: &[f64], bucket_sizes: &[usize], k: usize) -> Result<BudgetAllocation> {
    if marginal.len() != bucket_sizes.len() {
        return Err(CraftError::LengthMismatch(format!(
            "{} marginal entries for {} buckets",
            marginal.len(),
            bucket_sizes.len()
        )));
    }
    if k == 0 {
        return Err(CraftError::invalid("budget k must be at least 1"));
    }
    if marginal.iter().any(|p| !(*p >= 0.0)) {
        return Err(CraftError::invalid("marginal must be non-negative"));
    }
    let mass: f64 = marginal.iter().sum();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(CraftError::invalid(format!("marginal sums to {mass}, not 1")));
    }
    let available: usize = marginal
        .iter()
        .zip(bucket_sizes)
        .filter(|(p, _)| **p > 0.0)
        .map(|(_, &s)| s)
        .sum();
    if available < k {
        return Err(CraftError::PoolTooSmall {
            available,
            requested: k,
        });
    }

    let mut budgets = largest_remainder(k, marginal);
    let mut clipped = vec![false; marginal.len()];
    let mut underflow_moved = 0;
    loop {
        let mut surplus = 0;
        for a in 0..budgets.len() {
            if budgets[a] > bucket_sizes[a] {
                surplus += budgets[a] - bucket_sizes[a];
                budgets[a] = bucket_sizes[a];
                clipped[a] = true;
            }
        }
        if surplus == 0 {
            break;
        }
        underflow_moved += surplus;
        let weights: Vec<f64> = marginal
            .iter()
            .zip(&clipped)
            .map(|(&p, &c)| if c { 0.0 } else { p })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            return Err(CraftError::PoolTooSmall {
                available,
                requested: k,
            });
        }
        for (b, extra) in budgets.iter_mut().zip(largest_remainder(surplus, &weights)) {
            *b += extra;
        }
    }
    debug_assert_eq!(budgets.iter().sum::<usize>(), k);
    Ok(BudgetAllocation {
        budgets,
        total: k,
        underflow_moved,
    })
}

/// Expected target distance of each (source cluster, target cluster) cell:
/// `C[i][b] = sum_j p(j | i) * d(j, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    m_s: usize,
    m_t: usize,
    values: Vec<f64>,
    unused: Vec<bool>,
}

impl CostTable {
    pub fn m_s(&self) -> usize {
        self.m_s
    }

    pub fn m_t(&self) -> usize {
        self.m_t
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m_t..(i + 1) * self.m_t]
    }

    /// Rows of source clusters with no validation pairs.
    pub fn is_unused(&self, i: usize) -> bool {
        self.unused[i]
    }
}

pub fn precompute_cost_table(dist: &ValidationDistribution, d: &CentroidDistanceMatrix) -> Result<CostTable> {
    let (m_s, m_t) = (dist.m_s(), dist.m_t());
    if d.size() != m_t {
        return Err(CraftError::DimensionMismatch {
            expected: m_t,
            actual: d.size(),
        });
    }
    let mut values = vec![0.0; m_s * m_t];
    for i in 0..m_s {
        let p = dist.conditional(i);
        for b in 0..m_t {
            values[i * m_t + b] = (0..m_t).map(|j| p[j] * d.get(j, b)).sum();
        }
    }
    let unused = (0..m_s).map(|i| dist.is_empty_source(i)).collect();
    Ok(CostTable {
        m_s,
        m_t,
        values,
        unused,
    })
}

#[inline]
pub fn score_candidate(table: &CostTable, src_cluster: usize, tgt_cluster: usize) -> f64 {
    table.values[src_cluster * table.m_t + tgt_cluster]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFill {
    pub cluster: usize,
    pub budget: usize,
    pub filled: usize,
    pub cost_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected pool indices, ascending.
    pub indices: Vec<usize>,
    pub per_cluster: Vec<ClusterFill>,
    pub allocation: Option<BudgetAllocation>,
    pub diagnostics: Option<Diagnostics>,
}

impl SelectionResult {
    pub fn with_diagnostics(mut self, diagnostics: Diagnostics) -> Self {
        self.diagnostics = Some(diagnostics);
        self
    }

    pub fn budgets(&self) -> Option<&[usize]> {
        self.allocation.as_ref().map(|a| a.budgets.as_slice())
    }
}

fn check_assignments(src: &[usize], tgt: &[usize], m_s: usize, m_t: usize) -> Result<()> {
    if src.len() != tgt.len() {
        return Err(CraftError::LengthMismatch(format!(
            "{} source vs {} target pool assignments",
            src.len(),
            tgt.len()
        )));
    }
    if let Some(i) = src.iter().zip(tgt).position(|(&a, &b)| a >= m_s || b >= m_t) {
        return Err(CraftError::invalid(format!(
            "pool candidate {i} has a cluster index out of range"
        )));
    }
    Ok(())
}

fn buckets_of(assign: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); m];
    for (idx, &a) in assign.iter().enumerate() {
        buckets[a].push(idx);
    }
    buckets
}

fn by_cost_then_index(x: &(f64, usize), y: &(f64, usize)) -> Ordering {
    x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))
}

/// The `budget` cheapest `(cost, index)` entries, ordered; partial selection, no full sort.
fn min_k(mut scored: Vec<(f64, usize)>, budget: usize) -> Vec<(f64, usize)> {
    if budget == 0 {
        return Vec::new();
    }
    if budget < scored.len() {
        scored.select_nth_unstable_by(budget - 1, by_cost_then_index);
        scored.truncate(budget);
    }
    scored
}

/// Conditional selection of `k` pool candidates.
pub fn select_craft(
    pool_src_assign: &[usize],
    pool_tgt_assign: &[usize],
    dist: &ValidationDistribution,
    d: &CentroidDistanceMatrix,
    k: usize,
) -> Result<SelectionResult> {
    check_assignments(pool_src_assign, pool_tgt_assign, dist.m_s(), dist.m_t())?;
    if k > pool_src_assign.len() {
        return Err(CraftError::PoolTooSmall {
            available: pool_src_assign.len(),
            requested: k,
        });
    }
    let buckets = buckets_of(pool_src_assign, dist.m_s());
    let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let allocation = allocate_budget(dist.marginal(), &sizes, k)?;
    let table = precompute_cost_table(dist, d)?;

    let picks: Vec<Vec<(f64, usize)>> = buckets
        .par_iter()
        .enumerate()
        .map(|(a, members)| {
            let scored = members
                .iter()
                .map(|&l| (score_candidate(&table, a, pool_tgt_assign[l]), l))
                .collect();
            min_k(scored, allocation.budgets[a])
        })
        .collect();

    let per_cluster = picks
        .iter()
        .enumerate()
        .map(|(a, p)| ClusterFill {
            cluster: a,
            budget: allocation.budgets[a],
            filled: p.len(),
            cost_sum: p.iter().map(|(c, _)| c).sum(),
        })
        .collect();
    let mut indices: Vec<usize> = picks.into_iter().flatten().map(|(_, l)| l).collect();
    indices.sort_unstable();
    Ok(SelectionResult {
        indices,
        per_cluster,
        allocation: Some(allocation),
        diagnostics: None,
    })
}

/// Uniform sample of `k` distinct pool indices.
pub fn select_random(pool_size: usize, k: usize, seed: u64) -> Result<SelectionResult> {
    if k > pool_size {
        return Err(CraftError::PoolTooSmall {
            available: pool_size,
            requested: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, pool_size, k).into_vec();
    indices.sort_unstable();
    Ok(SelectionResult {
        indices,
        per_cluster: Vec::new(),
        allocation: None,
        diagnostics: None,
    })
}

/// Ablation baseline: k-means on concatenated (source, target) vectors of the
/// validation set, proportional budgets per joint cluster, and uniform random
/// picks inside each pool bucket.
pub fn select_joint_ablation(
    validation_joint: &VectorSet,
    pool_joint: &VectorSet,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<SelectionResult> {
    if validation_joint.dim() != pool_joint.dim() {
        return Err(CraftError::DimensionMismatch {
            expected: validation_joint.dim(),
            actual: pool_joint.dim(),
        });
    }
    let model = kmeans_fit(validation_joint, &KMeansConfig::new(m, seed))?;
    let pool_assign = assign_nearest(&model, pool_joint)?;
    let mut counts = vec![0usize; m];
    for &l in &model.labels {
        counts[l] += 1;
    }
    let marginal: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / validation_joint.count() as f64)
        .collect();
    let buckets = buckets_of(&pool_assign, m);
    let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let allocation = allocate_budget(&marginal, &sizes, k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(k);
    let mut per_cluster = Vec::with_capacity(m);
    for (a, members) in buckets.iter().enumerate() {
        let budget = allocation.budgets[a];
        let picked = index::sample(&mut rng, members.len(), budget);
        indices.extend(picked.iter().map(|i| members[i]));
        per_cluster.push(ClusterFill {
            cluster: a,
            budget,
            filled: budget,
            cost_sum: 0.0,
        });
    }
    indices.sort_unstable();
    Ok(SelectionResult {
        indices,
        per_cluster,
        allocation: Some(allocation),
        diagnostics: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_loss: DiscreteLoss,
    /// An optimal selection, ascending.
    pub witness: Vec<usize>,
}

const ORACLE_MAX_BUCKET: usize = 25;
const ORACLE_MAX_COMBINATIONS: u128 = 1_000_000;
/// Relative gap below which two bucket losses count as tied.
const ORACLE_TIE_TOLERANCE: f64 = 1e-12;

fn binomial(n: usize, r: usize) -> u128 {
    let r = r.min(n - r);
    (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive optimum of the discrete loss under fixed per-bucket budgets.
/// Buckets are independent, so each is enumerated on its own. Among tied
/// subsets the lexicographically smallest index set wins, which is also the
/// set [`select_craft`] picks.
pub fn brute_force_oracle(
    pool_src_assign: &[usize],
    pool_tgt_assign: &[usize],
    dist: &ValidationDistribution,
    d: &CentroidDistanceMatrix,
    budgets: &[usize],
) -> Result<OracleResult> {
    check_assignments(pool_src_assign, pool_tgt_assign, dist.m_s(), dist.m_t())?;
    if budgets.len() != dist.m_s() {
        return Err(CraftError::LengthMismatch(format!(
            "{} budgets for {} source clusters",
            budgets.len(),
            dist.m_s()
        )));
    }
    let buckets = buckets_of(pool_src_assign, dist.m_s());
    let mut witness_buckets = Vec::with_capacity(buckets.len());
    let mut witness = Vec::new();
    for (a, members) in buckets.iter().enumerate() {
        let (n, r) = (members.len(), budgets[a]);
        if r > n {
            return Err(CraftError::invalid(format!(
                "budget {r} exceeds bucket {a} of size {n}"
            )));
        }
        if r > 0 && (n > ORACLE_MAX_BUCKET || binomial(n, r) > ORACLE_MAX_COMBINATIONS) {
            return Err(CraftError::CombinatorialCap(format!(
                "bucket {a}: choosing {r} of {n}"
            )));
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut combo: Vec<usize> = (0..r).collect();
        loop {
            let targets: Vec<usize> = combo.iter().map(|&c| pool_tgt_assign[members[c]]).collect();
            let loss = bucket_loss(dist, d, a, &targets);
            if best
                .as_ref()
                .is_none_or(|(b, _)| loss < b - ORACLE_TIE_TOLERANCE * b.abs().max(1.0))
            {
                best = Some((loss, combo.clone()));
            }
            // Next r-combination of 0..n in lexicographic order.
            let Some(pos) = (0..r).rev().find(|&i| combo[i] < n - r + i) else {
                break;
            };
            combo[pos] += 1;
            for i in pos + 1..r {
                combo[i] = combo[i - 1] + 1;
            }
        }
        let chosen: Vec<usize> = best
            .map(|(_, c)| c.into_iter().map(|i| members[i]).collect())
            .unwrap_or_default();
        witness_buckets.push(chosen.iter().map(|&l| pool_tgt_assign[l]).collect());
        witness.extend(chosen);
    }
    witness.sort_unstable();
    let best_loss = discrete_loss(dist, d, &witness_buckets)?;
    Ok(OracleResult { best_loss, witness })
}
