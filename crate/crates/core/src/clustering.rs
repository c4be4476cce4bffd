//! k-means over a [`VectorSet`]: k-means++ seeding followed by Lloyd
//! iterations, nearest-centroid assignment, and per-cluster diameters.
//!
//! All per-row work runs in parallel, but every reduction is performed in row
//! order on one thread, so a fixed seed gives bit-identical models for any
//! worker count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io;
use crate::error::{CraftError, Result};
use crate::vectors::VectorSet;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_DIAMETER_EXACT_CAP: usize = 2_000;

const MIN_ROWS_PER_TASK: usize = 256;

/// `min(100, floor(sqrt(m)))`, at least 1.
pub fn default_cluster_count(validation_size: usize) -> usize {
    ((validation_size as f64).sqrt().floor() as usize).clamp(1, 100)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CraftError::invalid("k must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(CraftError::invalid("max_iters must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(CraftError::invalid("tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    sq_norms: Vec<f64>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step, in order.
    pub inertia_history: Vec<f64>,
    /// Final assignment of the fit set (empty for loaded models).
    pub labels: Vec<usize>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    k: usize,
    dim: usize,
    inertia: f64,
    seed: u64,
    iterations_run: usize,
}

impl KMeansModel {
    /// Wraps fixed centroids (row-major `k x dim`) as a model.
    pub fn from_centroids(k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if k == 0 {
            return Err(CraftError::invalid("a model needs at least one centroid"));
        }
        if centroids.len() != k * dim {
            return Err(CraftError::LengthMismatch(format!(
                "{} centroid values for {k} x {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(CraftError::invalid("centroids must be finite"));
        }
        let mut model = Self {
            k,
            dim,
            centroids,
            sq_norms: Vec::new(),
            inertia: 0.0,
            iterations_run: 0,
            inertia_history: Vec::new(),
            labels: Vec::new(),
            seed: 0,
        };
        model.refresh_norms();
        Ok(model)
    }

    fn refresh_norms(&mut self) {
        self.sq_norms = (0..self.k)
            .map(|c| {
                self.centroid(c)
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum()
            })
            .collect();
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid_set(&self) -> VectorSet {
        VectorSet::dense(self.k, self.dim, self.centroids.clone()).expect("centroids are finite")
    }

    /// Index and squared distance of the nearest centroid; ties go to the lower index.
    fn nearest(&self, row: crate::vectors::Row<'_>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k {
            let d = row.squared_distance(self.centroid(c), self.sq_norms[c]);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    fn assign_with_distances(&self, vs: &VectorSet) -> (Vec<usize>, Vec<f64>) {
        (0..vs.count())
            .into_par_iter()
            .with_min_len(MIN_ROWS_PER_TASK)
            .map(|r| self.nearest(vs.row(r)))
            .unzip()
    }

    /// Writes centroids as a dense vector file plus `<stem>.json` metadata.
    pub fn save(&self, centroids_path: &Path, meta_path: &Path) -> Result<()> {
        corpus_io::save_vectors(&self.centroid_set(), centroids_path)?;
        let meta = ModelMeta {
            k: self.k,
            dim: self.dim,
            inertia: self.inertia,
            seed: self.seed,
            iterations_run: self.iterations_run,
        };
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(meta_path, json).map_err(|e| CraftError::io(meta_path, e))
    }

    pub fn load(centroids_path: &Path, meta_path: &Path) -> Result<Self> {
        let vs = corpus_io::load_dense_vectors(centroids_path)?;
        let text = std::fs::read_to_string(meta_path).map_err(|e| CraftError::io(meta_path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        if meta.k != vs.count() || meta.dim != vs.dim() {
            return Err(CraftError::invalid(format!(
                "model metadata declares {} x {} but centroid file holds {} x {}",
                meta.k,
                meta.dim,
                vs.count(),
                vs.dim()
            )));
        }
        let values = match vs.storage() {
            crate::vectors::Storage::Dense(v) => v.clone(),
            crate::vectors::Storage::Sparse { .. } => unreachable!("load_dense_vectors"),
        };
        let mut model = Self::from_centroids(meta.k, meta.dim, values)?;
        model.inertia = meta.inertia;
        model.seed = meta.seed;
        model.iterations_run = meta.iterations_run;
        Ok(model)
    }
}

fn kmeans_plus_plus(vs: &VectorSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = vs.count();
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;

    let distances_to = |c: usize| -> Vec<f64> {
        let point = vs.dense_row(c);
        let norm = vs.row(c).squared_norm();
        (0..n)
            .into_par_iter()
            .with_min_len(MIN_ROWS_PER_TASK)
            .map(|r| vs.row(r).squared_distance(&point, norm))
            .collect()
    };
    let mut min_d = distances_to(first);

    while chosen.len() < k {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every point coincides with a chosen centre.
            (0..n).find(|&i| !is_chosen[i]).expect("count >= k")
        };
        chosen.push(next);
        is_chosen[next] = true;
        let d_new = distances_to(next);
        min_d
            .iter_mut()
            .zip(d_new)
            .for_each(|(m, d)| *m = m.min(d));
    }
    chosen
}

/// Fits k-means on `vs`. Clusters emptied during Lloyd iterations are reseeded
/// from the point farthest from its centroid, so no cluster is empty at exit.
pub fn kmeans_fit(vs: &VectorSet, cfg: &KMeansConfig) -> Result<KMeansModel> {
    cfg.validate()?;
    let (n, k, dim) = (vs.count(), cfg.k, vs.dim());
    if n < k {
        return Err(CraftError::invalid(format!(
            "cannot fit {k} clusters on {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeans_plus_plus(vs, k, &mut rng);
    let mut centroids = Vec::with_capacity(k * dim);
    for &s in &seeds {
        centroids.extend(vs.dense_row(s));
    }
    let mut model = KMeansModel::from_centroids(k, dim, centroids)?;
    model.seed = cfg.seed;

    for iter in 0..cfg.max_iters {
        let (mut labels, mut dists) = model.assign_with_distances(vs);
        repair_empty_clusters(&mut model, vs, &mut labels, &mut dists);
        let inertia: f64 = dists.iter().sum();
        let previous = model.inertia_history.last().copied();
        model.inertia_history.push(inertia);
        model.inertia = inertia;
        model.iterations_run = iter + 1;

        let converged = inertia == 0.0
            || previous.is_some_and(|prev| prev - inertia <= cfg.tol * prev);
        if converged || iter + 1 == cfg.max_iters {
            model.labels = labels;
            break;
        }
        update_centroids(&mut model, vs, &labels);
    }
    log::debug!(
        "k-means k={k} n={n}: {} iterations, inertia {:.6}",
        model.iterations_run,
        model.inertia
    );
    Ok(model)
}

fn repair_empty_clusters(
    model: &mut KMeansModel,
    vs: &VectorSet,
    labels: &mut [usize],
    dists: &mut [f64],
) {
    let mut sizes = vec![0usize; model.k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut repaired = false;
    for empty in 0..model.k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for (i, &d) in dists.iter().enumerate() {
            if sizes[labels[i]] > 1 && far.is_none_or(|f| d > dists[f]) {
                far = Some(i);
            }
        }
        let Some(p) = far else { break };
        sizes[labels[p]] -= 1;
        sizes[empty] = 1;
        labels[p] = empty;
        dists[p] = 0.0;
        let point = vs.dense_row(p);
        model.centroids[empty * model.dim..(empty + 1) * model.dim].copy_from_slice(&point);
        repaired = true;
    }
    if repaired {
        model.refresh_norms();
    }
}

fn update_centroids(model: &mut KMeansModel, vs: &VectorSet, labels: &[usize]) {
    let dim = model.dim;
    let mut sums = vec![0.0f64; model.k * dim];
    let mut counts = vec![0usize; model.k];
    for (r, &l) in labels.iter().enumerate() {
        vs.row(r).add_to_f64(&mut sums[l * dim..(l + 1) * dim]);
        counts[l] += 1;
    }
    for c in 0..model.k {
        if counts[c] == 0 {
            continue;
        }
        let inv = counts[c] as f64;
        for j in 0..dim {
            model.centroids[c * dim + j] = (sums[c * dim + j] / inv) as f32;
        }
    }
    model.refresh_norms();
}

/// Nearest-centroid index for every row; ties resolve to the lowest index.
pub fn assign_nearest(model: &KMeansModel, vs: &VectorSet) -> Result<Vec<usize>> {
    if vs.dim() != model.dim {
        return Err(CraftError::DimensionMismatch {
            expected: model.dim,
            actual: vs.dim(),
        });
    }
    Ok(model.assign_with_distances(vs).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiameterEstimator {
    /// Maximum pairwise distance among members.
    Exact,
    /// `2 * max ||x - centroid||`, an upper bound on the exact value.
    CentroidBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDiameters {
    pub values: Vec<f64>,
    pub estimators: Vec<DiameterEstimator>,
}

/// Per-cluster diameters. Clusters with at most `exact_cap` members get the
/// exact maximum pairwise distance; larger ones the centroid bound.
pub fn cluster_diameters(
    model: &KMeansModel,
    vs: &VectorSet,
    assignment: &[usize],
    exact_cap: usize,
) -> Result<ClusterDiameters> {
    if assignment.len() != vs.count() {
        return Err(CraftError::LengthMismatch(format!(
            "{} assignments for {} rows",
            assignment.len(),
            vs.count()
        )));
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= model.k) {
        return Err(CraftError::invalid(format!("cluster index {bad} out of range")));
    }
    let mut members = vec![Vec::new(); model.k];
    for (r, &a) in assignment.iter().enumerate() {
        members[a].push(r);
    }
    let (values, estimators) = members
        .par_iter()
        .enumerate()
        .map(|(c, rows)| {
            if rows.len() <= exact_cap {
                (exact_diameter(vs, rows), DiameterEstimator::Exact)
            } else {
                let far = rows
                    .iter()
                    .map(|&r| {
                        vs.row(r)
                            .squared_distance(model.centroid(c), model.sq_norms[c])
                    })
                    .fold(0.0f64, f64::max);
                (2.0 * far.sqrt(), DiameterEstimator::CentroidBound)
            }
        })
        .unzip();
    Ok(ClusterDiameters { values, estimators })
}

fn exact_diameter(vs: &VectorSet, rows: &[usize]) -> f64 {
    let mut best = 0.0f64;
    for (i, &a) in rows.iter().enumerate() {
        let ra = vs.row(a);
        for &b in &rows[i + 1..] {
            best = best.max(ra.squared_distance_to_row(&vs.row(b)));
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(points: &[f32]) -> VectorSet {
        VectorSet::dense(points.len(), 1, points.to_vec()).unwrap()
    }

    /// Minimum inertia over every 2-partition of the points, by enumeration.
    fn best_two_partition_inertia(points: &[f64]) -> f64 {
        let n = points.len();
        let sse = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
        };
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (i, &p) in points.iter().enumerate() {
                    if mask & (1 << i) != 0 { a.push(p) } else { b.push(p) }
                }
                (a, b)
            };
            best = best.min(sse(&a) + sse(&b));
        }
        best
    }

    #[test]
    fn two_clusters_on_a_line() {
        let oracle = best_two_partition_inertia(&[0.0, 1.0, 9.0, 10.0]);
        assert_eq!(oracle, 1.0);
        for seed in 0..20 {
            let m = kmeans_fit(&line(&[0.0, 1.0, 9.0, 10.0]), &KMeansConfig::new(2, seed)).unwrap();
            let mut c: Vec<f32> = m.centroids().to_vec();
            c.sort_by(f32::total_cmp);
            assert_eq!(c, vec![0.5, 9.5], "seed {seed}");
            assert_eq!(m.inertia, oracle);
        }
    }

    #[test]
    fn k_equal_to_count_recovers_points() {
        let vs = VectorSet::from_dense_rows(&[vec![0.0, 1.0], vec![5.0, 5.0], vec![-3.0, 2.0]]).unwrap();
        let m = kmeans_fit(&vs, &KMeansConfig::new(3, 11)).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut got: Vec<Vec<f32>> = (0..3).map(|c| m.centroid(c).to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, vec![vec![-3.0, 2.0], vec![0.0, 1.0], vec![5.0, 5.0]]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let vs = VectorSet::from_dense_rows(&[vec![0.0, 2.0], vec![4.0, 6.0], vec![2.0, 1.0]]).unwrap();
        let m = kmeans_fit(&vs, &KMeansConfig::new(1, 3)).unwrap();
        assert_eq!(m.centroid(0), &[2.0, 3.0]);
    }

    #[test]
    fn too_few_points_is_error() {
        assert!(kmeans_fit(&line(&[1.0]), &KMeansConfig::new(2, 0)).is_err());
        assert!(kmeans_fit(&line(&[1.0]), &KMeansConfig::new(0, 0)).is_err());
    }

    #[test]
    fn duplicate_points_still_yield_nonempty_clusters() {
        let vs = line(&[1.0, 1.0, 1.0, 1.0, 2.0]);
        let m = kmeans_fit(&vs, &KMeansConfig::new(3, 5)).unwrap();
        let labels = assign_nearest(&m, &vs).unwrap();
        assert_eq!(m.k(), 3);
        assert!(m.centroids().iter().all(|v| v.is_finite()));
        assert_eq!(labels.len(), 5);
    }

    #[test]
    fn assign_nearest_and_tie_break() {
        let m = KMeansModel::from_centroids(2, 1, vec![0.5, 9.5]).unwrap();
        assert_eq!(assign_nearest(&m, &line(&[0.4])).unwrap(), vec![0]);
        let m = KMeansModel::from_centroids(4, 1, vec![10.0, 1.0, 7.0, 3.0]).unwrap();
        assert_eq!(assign_nearest(&m, &line(&[2.0])).unwrap(), vec![1]);
        let wrong = VectorSet::from_dense_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(assign_nearest(&m, &wrong), Err(CraftError::DimensionMismatch { .. })));
    }

    #[test]
    fn sparse_fit_matches_dense_fit() {
        let dense_rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.2, 0.8],
        ];
        let dense = VectorSet::from_dense_rows(&dense_rows).unwrap();
        let sparse = VectorSet::from_sparse_rows(
            3,
            dense_rows
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(c, &v)| (c as u32, v))
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let cfg = KMeansConfig::new(2, 9);
        let a = kmeans_fit(&dense, &cfg).unwrap();
        let b = kmeans_fit(&sparse, &cfg).unwrap();
        assert_eq!(assign_nearest(&a, &dense).unwrap(), assign_nearest(&b, &sparse).unwrap());
        for (x, y) in a.centroids().iter().zip(b.centroids()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn diameters_small_cases() {
        let vs = line(&[0.0, 1.0, 5.0]);
        let m = KMeansModel::from_centroids(3, 1, vec![0.5, 5.0, 100.0]).unwrap();
        let d = cluster_diameters(&m, &vs, &[0, 0, 1], DEFAULT_DIAMETER_EXACT_CAP).unwrap();
        assert_eq!(d.values, vec![1.0, 0.0, 0.0]);
        assert!(d.estimators.iter().all(|e| *e == DiameterEstimator::Exact));

        let vs = VectorSet::from_dense_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![3.0, 0.0]]).unwrap();
        let m = KMeansModel::from_centroids(1, 2, vec![2.0, 4.0 / 3.0]).unwrap();
        // Pairwise distances 5, 3, 4.
        let d = cluster_diameters(&m, &vs, &[0, 0, 0], 10).unwrap();
        assert_eq!(d.values, vec![5.0]);
        let bound = cluster_diameters(&m, &vs, &[0, 0, 0], 2).unwrap();
        assert_eq!(bound.estimators, vec![DiameterEstimator::CentroidBound]);
        assert!(bound.values[0] >= 5.0);
    }

    #[test]
    fn model_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let vs = line(&[0.0, 1.0, 9.0, 10.0]);
        let m = kmeans_fit(&vs, &KMeansConfig::new(2, 1)).unwrap();
        let (c, j) = (dir.path().join("c.cvec"), dir.path().join("m.json"));
        m.save(&c, &j).unwrap();
        let back = KMeansModel::load(&c, &j).unwrap();
        assert_eq!(back.centroids(), m.centroids());
        assert_eq!(back.inertia, m.inertia);
        assert_eq!(back.iterations_run, m.iterations_run);
        assert_eq!(back.seed, 1);
    }

    fn points_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-50.0f32..50.0, 3), 6..60)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fit_is_deterministic_and_monotone(rows in points_strategy(), k in 1usize..5, seed in any::<u64>()) {
            let vs = VectorSet::from_dense_rows(&rows).unwrap();
            let cfg = KMeansConfig { k, max_iters: 50, tol: 0.0, seed };
            let a = kmeans_fit(&vs, &cfg).unwrap();
            let b = kmeans_fit(&vs, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "inertia rose: {:?}", a.inertia_history);
            }
            // Every centroid owns at least one point.
            let labels = assign_nearest(&a, &vs).unwrap();
            prop_assert_eq!(&labels, &a.labels);
            let mut sizes = vec![0; k];
            labels.iter().for_each(|&l| sizes[l] += 1);
            prop_assert!(sizes.iter().all(|&s| s > 0), "sizes {:?}", sizes);
        }

        #[test]
        fn assignment_is_minimal(rows in points_strategy(), k in 1usize..6, seed in any::<u64>()) {
            let vs = VectorSet::from_dense_rows(&rows).unwrap();
            prop_assume!(vs.count() >= k);
            let m = kmeans_fit(&vs, &KMeansConfig::new(k, seed)).unwrap();
            let labels = assign_nearest(&m, &vs).unwrap();
            for (r, &l) in labels.iter().enumerate() {
                let row = vs.row(r);
                let own = row.squared_distance_to_row(&crate::vectors::Row::Dense(m.centroid(l)));
                for c in 0..k {
                    let other = row.squared_distance_to_row(&crate::vectors::Row::Dense(m.centroid(c)));
                    prop_assert!(own <= other);
                    if other == own { prop_assert!(l <= c); }
                }
            }
        }

        #[test]
        fn diameter_bound_dominates_exact(rows in points_strategy(), k in 1usize..4, seed in any::<u64>()) {
            let vs = VectorSet::from_dense_rows(&rows).unwrap();
            let m = kmeans_fit(&vs, &KMeansConfig::new(k, seed)).unwrap();
            let labels = assign_nearest(&m, &vs).unwrap();
            let exact = cluster_diameters(&m, &vs, &labels, usize::MAX).unwrap();
            let bound = cluster_diameters(&m, &vs, &labels, 0).unwrap();
            for (e, b) in exact.values.iter().zip(&bound.values) {
                prop_assert!(*b + 1e-4 >= *e, "bound {} < exact {}", b, e);
            }
        }
    }
}
