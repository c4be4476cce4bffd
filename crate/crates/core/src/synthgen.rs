//! Seeded synthetic paired data with a tunable source-to-target coupling.
//!
//! Source and target vectors come from Gaussian mixtures whose means sit on a
//! grid with spacing `10 * noise_sigma`. Every pair draws a source component;
//! with probability `coupling` its target component is the source component's
//! fixed image, otherwise it is drawn uniformly.
//!
//! Each pair has its own random streams (labels, source noise, target noise),
//! so any side of any row can be regenerated on its own and in parallel.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CraftError, Result};
use crate::vectors::VectorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_components: usize,
    pub dim_s: usize,
    pub dim_t: usize,
    /// Fraction of pairs whose target component follows the source component.
    pub coupling: f64,
    pub noise_sigma: f64,
    pub n_validation: usize,
    pub n_pool: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_components: 8,
            dim_s: 1,
            dim_t: 1,
            coupling: 0.8,
            noise_sigma: 1.0,
            n_validation: 1_000,
            n_pool: 10_000,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(CraftError::invalid(format!(
                "coupling must lie in [0, 1], got {}",
                self.coupling
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(CraftError::invalid("noise sigma must be finite and non-negative"));
        }
        if self.n_components == 0 || self.dim_s == 0 || self.dim_t == 0 {
            return Err(CraftError::invalid("components and dimensions must be at least 1"));
        }
        if self.n_validation == 0 || self.n_pool == 0 {
            return Err(CraftError::invalid("validation and pool sizes must be at least 1"));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        if self.noise_sigma > 0.0 {
            10.0 * self.noise_sigma
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub source: VectorSet,
    pub target: VectorSet,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.source.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> PairSet {
        PairSet {
            source: self.source.select_rows(indices),
            target: self.target.select_rows(indices),
        }
    }
}

/// Generated pairs with their ground-truth mixture components.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPairs {
    pub vectors: PairSet,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub validation: LabeledPairs,
    pub pool: LabeledPairs,
}

/// Mixture layout derived from a config; produces rows on demand.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: SyntheticConfig,
    source_means: Vec<Vec<f32>>,
    target_means: Vec<Vec<f32>>,
    source_weights: Vec<f64>,
    image: Vec<usize>,
}

/// Grid slot `slot` in `dim` dimensions, side length `side`.
fn grid_point(slot: usize, dim: usize, side: usize, spacing: f64) -> Vec<f32> {
    let mut rest = slot;
    (0..dim)
        .map(|_| {
            let digit = rest % side;
            rest /= side;
            (digit as f64 * spacing) as f32
        })
        .collect()
}

fn grid_means(rng: &mut ChaCha8Rng, n: usize, dim: usize, spacing: f64) -> Vec<Vec<f32>> {
    let mut side = 1usize;
    while (side as f64).powi(dim.min(64) as i32) < n as f64 {
        side += 1;
    }
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    slots.into_iter().map(|s| grid_point(s, dim, side, spacing)).collect()
}

const LABEL_STREAM: u64 = 0;
const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

impl Generator {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let spacing = cfg.spacing();
        let source_means = grid_means(&mut rng, cfg.n_components, cfg.dim_s, spacing);
        let target_means = grid_means(&mut rng, cfg.n_components, cfg.dim_t, spacing);
        let raw: Vec<f64> = (0..cfg.n_components).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let source_weights = raw.iter().map(|w| w / total).collect();
        let mut image: Vec<usize> = (0..cfg.n_components).collect();
        image.shuffle(&mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            source_means,
            target_means,
            source_weights,
            image,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn source_means(&self) -> &[Vec<f32>] {
        &self.source_means
    }

    pub fn target_means(&self) -> &[Vec<f32>] {
        &self.target_means
    }

    pub fn source_weights(&self) -> &[f64] {
        &self.source_weights
    }

    /// Target component paired with each source component under coupling.
    pub fn coupled_image(&self) -> &[usize] {
        &self.image
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Validation => self.cfg.n_validation,
            Split::Pool => self.cfg.n_pool,
        }
    }

    fn rng_for(&self, split: Split, row: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let global = match split {
            Split::Validation => row as u64,
            Split::Pool => self.cfg.n_validation as u64 + row as u64,
        };
        rng.set_stream(global * 3 + stream + 1);
        rng
    }

    fn labels_of(&self, split: Split, row: usize) -> (usize, usize) {
        let mut rng = self.rng_for(split, row, LABEL_STREAM);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut s = self.cfg.n_components - 1;
        for (c, w) in self.source_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                s = c;
                break;
            }
        }
        let coupled: f64 = rng.random();
        let t = if coupled < self.cfg.coupling {
            self.image[s]
        } else {
            rng.random_range(0..self.cfg.n_components)
        };
        (s, t)
    }

    pub fn labels(&self, split: Split) -> (Vec<usize>, Vec<usize>) {
        (0..self.size(split))
            .into_par_iter()
            .map(|r| self.labels_of(split, r))
            .unzip()
    }

    /// Vectors for one side of one split; labels must come from [`Generator::labels`].
    pub fn side(&self, split: Split, side: Side, labels: &[usize]) -> VectorSet {
        let (means, dim, stream) = match side {
            Side::Source => (&self.source_means, self.cfg.dim_s, SOURCE_STREAM),
            Side::Target => (&self.target_means, self.cfg.dim_t, TARGET_STREAM),
        };
        let sigma = self.cfg.noise_sigma as f32;
        let mut values = vec![0f32; labels.len() * dim];
        values
            .par_chunks_mut(dim)
            .zip(labels.par_iter())
            .enumerate()
            .for_each(|(r, (out, &c))| {
                let mut rng = self.rng_for(split, r, stream);
                for (o, m) in out.iter_mut().zip(&means[c]) {
                    let z: f32 = rng.sample(StandardNormal);
                    *o = m + sigma * z;
                }
            });
        VectorSet::dense(labels.len(), dim, values).expect("generated values are finite")
    }

    pub fn split(&self, split: Split) -> LabeledPairs {
        let (source_labels, target_labels) = self.labels(split);
        let vectors = PairSet {
            source: self.side(split, Side::Source, &source_labels),
            target: self.side(split, Side::Target, &target_labels),
        };
        LabeledPairs {
            vectors,
            source_labels,
            target_labels,
        }
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    let g = Generator::new(cfg)?;
    Ok(SyntheticData {
        validation: g.split(Split::Validation),
        pool: g.split(Split::Pool),
    })
}

/// Writes `source,target,role` rows for 1-D data.
pub fn emit_scatter(validation: &PairSet, selected: &PairSet, path: &Path) -> Result<()> {
    for set in [validation, selected] {
        if set.source.dim() != 1 || set.target.dim() != 1 {
            return Err(CraftError::invalid(format!(
                "scatter output needs 1-D vectors on both sides, got {} and {}; project the data first",
                set.source.dim(),
                set.target.dim()
            )));
        }
    }
    let mut out = String::from("source,target,role\n");
    for (set, role) in [(validation, "validation"), (selected, "selected")] {
        for r in 0..set.len() {
            let s = set.source.dense_row(r)[0];
            let t = set.target.dense_row(r)[0];
            let _ = writeln!(out, "{s},{t},{role}");
        }
    }
    std::fs::write(path, out).map_err(|e| CraftError::io(path, e))
}

/// Mean distance between each selected target and the validation mean of
/// targets sharing its source component.
pub fn conditional_concentration(validation: &LabeledPairs, pool: &LabeledPairs, selection: &[usize]) -> Result<f64> {
    if selection.is_empty() {
        return Err(CraftError::invalid("selection is empty"));
    }
    let dim = validation.vectors.target.dim();
    let n_comp = validation
        .source_labels
        .iter()
        .chain(&pool.source_labels)
        .max()
        .map_or(0, |m| m + 1);
    let mut sums = vec![vec![0f64; dim]; n_comp];
    let mut counts = vec![0usize; n_comp];
    for (r, &s) in validation.source_labels.iter().enumerate() {
        for (acc, v) in sums[s].iter_mut().zip(validation.vectors.target.dense_row(r)) {
            *acc += v as f64;
        }
        counts[s] += 1;
    }
    let mut total = 0.0;
    for &l in selection {
        if l >= pool.source_labels.len() {
            return Err(CraftError::invalid(format!("selected index {l} is out of range")));
        }
        let s = pool.source_labels[l];
        if counts[s] == 0 {
            return Err(CraftError::invalid(format!(
                "source component {s} never appears in the validation set"
            )));
        }
        let sq: f64 = pool
            .vectors
            .target
            .dense_row(l)
            .iter()
            .zip(&sums[s])
            .map(|(&v, m)| (v as f64 - m / counts[s] as f64).powi(2))
            .sum();
        total += sq.sqrt();
    }
    Ok(total / selection.len() as f64)
}
