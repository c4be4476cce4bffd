//! End-to-end selection over pre-computed vectors: cluster the validation
//! sides, estimate cluster statistics, assign the pool, select, and report.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::clustering::{
    assign_nearest, cluster_diameters, kmeans_fit, ClusterDiameters, KMeansConfig, KMeansModel,
    DEFAULT_DIAMETER_EXACT_CAP,
};
use crate::error::{CraftError, Result};
use crate::selector::{select_craft, select_joint_ablation, select_random, SelectionResult};
use crate::stats::{
    centroid_distances, estimate_distribution, CentroidDistanceMatrix, Diagnostics, SelectionContext,
    ValidationDistribution, DEFAULT_LIPSCHITZ,
};
use crate::vectors::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Craft,
    Random,
    JointAblation,
}

impl FromStr for Method {
    type Err = CraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "craft" => Ok(Method::Craft),
            "random" => Ok(Method::Random),
            "joint-ablation" => Ok(Method::JointAblation),
            other => Err(CraftError::invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Craft => "craft",
            Method::Random => "random",
            Method::JointAblation => "joint-ablation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub m_s: usize,
    pub m_t: usize,
    pub k: usize,
    pub seed: u64,
    pub method: Method,
    pub lipschitz: f64,
    pub diameter_exact_cap: usize,
}

impl PipelineConfig {
    pub fn new(m_s: usize, m_t: usize, k: usize, seed: u64) -> Self {
        Self {
            m_s,
            m_t,
            k,
            seed,
            method: Method::Craft,
            lipschitz: DEFAULT_LIPSCHITZ,
            diameter_exact_cap: DEFAULT_DIAMETER_EXACT_CAP,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }
}

/// The source model is seeded with `seed`, the target model with `seed + 1`.
pub fn target_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

/// Validation-side cluster models and the statistics derived from them.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub source_model: KMeansModel,
    pub target_model: KMeansModel,
    pub dist: ValidationDistribution,
    pub distances: CentroidDistanceMatrix,
    pub diameters: ClusterDiameters,
}

impl ClusterState {
    pub fn fit(val_src: &VectorSet, val_tgt: &VectorSet, cfg: &PipelineConfig) -> Result<Self> {
        if val_src.count() != val_tgt.count() {
            return Err(CraftError::LengthMismatch(format!(
                "validation has {} source and {} target rows",
                val_src.count(),
                val_tgt.count()
            )));
        }
        let source_model = kmeans_fit(val_src, &KMeansConfig::new(cfg.m_s, cfg.seed))?;
        let target_model = kmeans_fit(val_tgt, &KMeansConfig::new(cfg.m_t, target_seed(cfg.seed)))?;
        Self::from_models(source_model, target_model, val_src, val_tgt, cfg.diameter_exact_cap)
    }

    /// Rebuilds statistics for already fitted (or loaded) models.
    pub fn from_models(
        source_model: KMeansModel,
        target_model: KMeansModel,
        val_src: &VectorSet,
        val_tgt: &VectorSet,
        diameter_exact_cap: usize,
    ) -> Result<Self> {
        let src_assign = assign_nearest(&source_model, val_src)?;
        let tgt_assign = assign_nearest(&target_model, val_tgt)?;
        let dist = estimate_distribution(&src_assign, &tgt_assign, source_model.k(), target_model.k())?;
        let distances = centroid_distances(&target_model);
        let diameters = cluster_diameters(&source_model, val_src, &src_assign, diameter_exact_cap)?;
        Ok(Self {
            source_model,
            target_model,
            dist,
            distances,
            diameters,
        })
    }

    pub fn assign_pool(&self, pool_src: &VectorSet, pool_tgt: &VectorSet) -> Result<PoolAssignment> {
        if pool_src.count() != pool_tgt.count() {
            return Err(CraftError::LengthMismatch(format!(
                "pool has {} source and {} target rows",
                pool_src.count(),
                pool_tgt.count()
            )));
        }
        Ok(PoolAssignment {
            source: assign_nearest(&self.source_model, pool_src)?,
            target: assign_nearest(&self.target_model, pool_tgt)?,
        })
    }

    pub fn context<'a>(&'a self, pool: &'a PoolAssignment, lipschitz: f64) -> SelectionContext<'a> {
        SelectionContext {
            pool_src_assign: &pool.source,
            pool_tgt_assign: &pool.target,
            dist: &self.dist,
            distances: &self.distances,
            diameters: &self.diameters,
            lipschitz,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.source_model
            .save(&dir.join("source_centroids.bin"), &dir.join("source_model.json"))?;
        self.target_model
            .save(&dir.join("target_centroids.bin"), &dir.join("target_model.json"))
    }

    pub fn load_models(dir: &Path) -> Result<(KMeansModel, KMeansModel)> {
        Ok((
            KMeansModel::load(&dir.join("source_centroids.bin"), &dir.join("source_model.json"))?,
            KMeansModel::load(&dir.join("target_centroids.bin"), &dir.join("target_model.json"))?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolAssignment {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl PoolAssignment {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Paired vectors for both splits.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub val_src: &'a VectorSet,
    pub val_tgt: &'a VectorSet,
    pub pool_src: &'a VectorSet,
    pub pool_tgt: &'a VectorSet,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub state: ClusterState,
    pub pool: PoolAssignment,
    /// Carries diagnostics measured against `state`.
    pub result: SelectionResult,
}

/// Runs the selector named in `cfg` on already assigned pool clusters.
/// The joint ablation needs raw vectors and is handled by [`run`].
pub fn select_assigned(state: &ClusterState, pool: &PoolAssignment, cfg: &PipelineConfig) -> Result<SelectionResult> {
    let result = match cfg.method {
        Method::Craft => select_craft(&pool.source, &pool.target, &state.dist, &state.distances, cfg.k)?,
        Method::Random => select_random(pool.len(), cfg.k, cfg.seed)?,
        Method::JointAblation => {
            return Err(CraftError::invalid(
                "the joint ablation clusters raw vectors; use the full pipeline",
            ))
        }
    };
    let diagnostics = evaluate(state, pool, &result.indices, result.budgets(), cfg.lipschitz)?;
    Ok(result.with_diagnostics(diagnostics))
}

pub fn evaluate(
    state: &ClusterState,
    pool: &PoolAssignment,
    indices: &[usize],
    budgets: Option<&[usize]>,
    lipschitz: f64,
) -> Result<Diagnostics> {
    state.context(pool, lipschitz).evaluate(indices, budgets)
}

pub fn run(inputs: PipelineInputs<'_>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let state = ClusterState::fit(inputs.val_src, inputs.val_tgt, cfg)?;
    let pool = state.assign_pool(inputs.pool_src, inputs.pool_tgt)?;
    let result = match cfg.method {
        Method::JointAblation => {
            let val_joint = inputs.val_src.concat_columns(inputs.val_tgt)?;
            let pool_joint = inputs.pool_src.concat_columns(inputs.pool_tgt)?;
            let m = cfg.m_s.max(cfg.m_t);
            let r = select_joint_ablation(&val_joint, &pool_joint, m, cfg.k, cfg.seed)?;
            // Budgets refer to joint clusters, not source clusters.
            let diagnostics = evaluate(&state, &pool, &r.indices, None, cfg.lipschitz)?;
            r.with_diagnostics(diagnostics)
        }
        _ => select_assigned(&state, &pool, cfg)?,
    };
    log::info!(
        "{} selected {} of {} candidates",
        cfg.method,
        result.indices.len(),
        pool.len()
    );
    Ok(PipelineOutput { state, pool, result })
}
