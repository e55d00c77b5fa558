//! The merging pipeline.
//!
//! Per layer: decompose every task update into a truncated basis and
//! coordinates, rescale the coordinates (per task, then per input column),
//! stack the factors, replace each stack by its polar factor and multiply the
//! two back together. Across layers: rescale each merged update against the
//! other layers of the same type, then add `α·β·Δ` to the base weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::decomp::{self, DecompError};
use crate::linalg::{self, LinalgError};
use crate::scaling::{self, LayerRules, ScaleReport, ScalingError, Variant, DEFAULT_EXPONENT};
use crate::tensorstore::{self, add_delta, DenseTensor, TaskUpdate, TensorMap, TensorStoreError};

/// Coarse grid step of the α search.
pub const ALPHA_GRID_STEP: f64 = 0.05;
/// Final bracket width of the α search.
pub const ALPHA_TOLERANCE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("no expert checkpoints supplied")]
    NoTasks,
    #[error("expected one proxy container per expert ({experts}), got {proxies}")]
    ProxyCount { experts: usize, proxies: usize },
    #[error("proxy container for task {task} has no `{key}`")]
    MissingProxy { task: usize, key: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error(transparent)]
    Tensor(#[from] TensorStoreError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

pub type Result<T> = std::result::Result<T, MergeError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankRule {
    /// `⌊ratio · d_out / T⌋`, clamped to the layer's valid range.
    Auto { ratio: f64 },
    Fixed(usize),
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule::Auto { ratio: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalingToggles {
    pub task: bool,
    pub dim: bool,
    pub layer: bool,
}

impl ScalingToggles {
    pub const ALL: Self = Self {
        task: true,
        dim: true,
        layer: true,
    };
    pub const NONE: Self = Self {
        task: false,
        dim: false,
        layer: false,
    };
}

impl Default for ScalingToggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScalingOrder {
    #[default]
    TaskThenDim,
    DimThenTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decomposition {
    Esd { centered: bool },
    Svd,
}

impl Default for Decomposition {
    fn default() -> Self {
        Decomposition::Esd { centered: false }
    }
}

/// Scores a candidate merged checkpoint; higher is better.
pub type Scorer = Arc<dyn Fn(&TensorMap) -> std::result::Result<f64, String> + Send + Sync>;

#[derive(Clone)]
pub enum AlphaPolicy {
    Fixed(f64),
    Search { lo: f64, hi: f64, scorer: Scorer },
}

impl fmt::Debug for AlphaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaPolicy::Fixed(a) => f.debug_tuple("Fixed").field(a).finish(),
            AlphaPolicy::Search { lo, hi, .. } => f
                .debug_struct("Search")
                .field("lo", lo)
                .field("hi", hi)
                .finish_non_exhaustive(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergeConfig {
    pub rank_rule: RankRule,
    pub scaling: ScalingToggles,
    pub variant: Variant,
    pub exponent: f64,
    pub order: ScalingOrder,
    pub alpha: AlphaPolicy,
    pub decomposition: Decomposition,
    pub layer_rules: LayerRules,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            rank_rule: RankRule::default(),
            scaling: ScalingToggles::ALL,
            variant: Variant::Full,
            exponent: DEFAULT_EXPONENT,
            order: ScalingOrder::TaskThenDim,
            alpha: AlphaPolicy::Fixed(1.0),
            decomposition: Decomposition::default(),
            layer_rules: LayerRules::default(),
        }
    }
}

impl MergeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.exponent >= 0.0) || !self.exponent.is_finite() {
            return Err(MergeError::InvalidConfig(format!(
                "exponent must be a finite value >= 0, got {}",
                self.exponent
            )));
        }
        match self.rank_rule {
            RankRule::Auto { ratio } if !(ratio > 0.0) || !ratio.is_finite() => {
                return Err(MergeError::InvalidConfig(format!("rank ratio must be > 0, got {ratio}")))
            }
            RankRule::Fixed(0) => return Err(MergeError::InvalidConfig("fixed rank must be >= 1".into())),
            _ => {}
        }
        match &self.alpha {
            AlphaPolicy::Fixed(a) if !a.is_finite() => {
                Err(MergeError::InvalidConfig(format!("alpha must be finite, got {a}")))
            }
            AlphaPolicy::Search { lo, hi, .. } if !(lo < hi) => {
                Err(MergeError::InvalidConfig(format!("alpha search needs lo < hi, got [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }

    /// Rank kept per task for a `d_out × d_in` layer merged from `tasks` updates.
    pub fn rank_for(&self, d_out: usize, d_in: usize, tasks: usize) -> Result<usize> {
        let max = match self.decomposition {
            Decomposition::Esd { .. } => d_out,
            Decomposition::Svd => d_out.min(d_in),
        };
        let k = match self.rank_rule {
            RankRule::Auto { ratio } => decomp::scaled_rank_budget(d_out, tasks, ratio)?,
            RankRule::Fixed(k) => k,
        };
        Ok(k.clamp(1, max.max(1)))
    }
}

/// Stack bases left to right and coordinates top to bottom, in task order.
pub fn concat_factors(factors: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (first_basis, first_coords) = factors.first().ok_or(MergeError::NoTasks)?;
    let (d_out, d_in) = (first_basis.nrows(), first_coords.ncols());
    let mut total_k = 0;
    for (t, (basis, coords)) in factors.iter().enumerate() {
        if basis.nrows() != d_out || coords.ncols() != d_in || basis.ncols() != coords.nrows() {
            return Err(MergeError::DimensionMismatch(format!(
                "task {t}: basis {:?} / coords {:?} do not fit d_out={d_out}, d_in={d_in}",
                basis.shape(),
                coords.shape()
            )));
        }
        total_k += basis.ncols();
    }
    let mut p_cat = DMatrix::zeros(d_out, total_k);
    let mut a_cat = DMatrix::zeros(total_k, d_in);
    let mut offset = 0;
    for (basis, coords) in factors {
        let k = basis.ncols();
        p_cat.columns_mut(offset, k).copy_from(basis);
        a_cat.rows_mut(offset, k).copy_from(coords);
        offset += k;
    }
    Ok((p_cat, a_cat))
}

pub fn orthogonalize_pair(p_cat: &DMatrix<f64>, a_cat: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((linalg::whiten(p_cat)?, linalg::whiten(a_cat)?))
}

pub fn reconstruct(p: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p.ncols() != a.nrows() {
        return Err(MergeError::DimensionMismatch(format!(
            "cannot multiply {:?} by {:?}",
            p.shape(),
            a.shape()
        )));
    }
    Ok(p * a)
}

/// Result of merging one layer, before inter-layer scaling and α.
#[derive(Clone, Debug)]
pub struct LayerMerge {
    pub delta: DMatrix<f64>,
    /// Every task update (or the scaled coordinate stack) was exactly zero.
    pub zero_update: bool,
    pub k: usize,
    pub task_coeffs: Vec<f64>,
    pub dim_coeffs: Vec<f64>,
}

fn varied(coeffs: Vec<f64>, variant: Variant) -> Result<Vec<f64>> {
    coeffs
        .into_iter()
        .map(|g| scaling::apply_variant(g, variant).map_err(MergeError::from))
        .collect()
}

fn scale_tasks(a_cat: &mut DMatrix<f64>, ranks: &[usize], cfg: &MergeConfig) -> Result<Vec<f64>> {
    let mut blocks = Vec::with_capacity(ranks.len());
    let mut offset = 0;
    for &k in ranks {
        blocks.push(a_cat.rows(offset, k).into_owned());
        offset += k;
    }
    let coeffs = varied(scaling::inter_task_coeffs(&blocks, cfg.exponent), cfg.variant)?;
    let mut offset = 0;
    for (&k, &s) in ranks.iter().zip(&coeffs) {
        a_cat.rows_mut(offset, k).scale_mut(s);
        offset += k;
    }
    Ok(coeffs)
}

fn scale_dims(a_cat: &mut DMatrix<f64>, cfg: &MergeConfig) -> Result<Vec<f64>> {
    let coeffs = varied(scaling::inter_dim_coeffs(a_cat, cfg.exponent), cfg.variant)?;
    for (j, &c) in coeffs.iter().enumerate() {
        a_cat.column_mut(j).scale_mut(c);
    }
    Ok(coeffs)
}

/// Merge one layer's task updates. `proxies[t]` is the `n × d_in` input sample
/// of task `t`; it is ignored (and may be empty) for SVD decomposition.
pub fn merge_layer(dws: &[DMatrix<f64>], proxies: &[DMatrix<f64>], cfg: &MergeConfig) -> Result<LayerMerge> {
    let first = dws.first().ok_or(MergeError::NoTasks)?;
    let (d_out, d_in) = first.shape();
    if let Some(bad) = dws.iter().find(|d| d.shape() != (d_out, d_in)) {
        return Err(MergeError::DimensionMismatch(format!(
            "task updates disagree in shape: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let k = cfg.rank_for(d_out, d_in, dws.len())?;
    let zero = |k| LayerMerge {
        delta: DMatrix::zeros(d_out, d_in),
        zero_update: true,
        k,
        task_coeffs: vec![1.0; dws.len()],
        dim_coeffs: vec![1.0; d_in],
    };
    if dws.iter().all(|d| d.iter().all(|&v| v == 0.0)) {
        return Ok(zero(k));
    }

    let factors = match cfg.decomposition {
        Decomposition::Esd { centered } => {
            if proxies.len() != dws.len() {
                return Err(MergeError::ProxyCount {
                    experts: dws.len(),
                    proxies: proxies.len(),
                });
            }
            dws.iter()
                .zip(proxies)
                .map(|(dw, x)| {
                    let f = decomp::esd_with(dw, x, k, centered)?;
                    Ok((f.basis, f.coords))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Decomposition::Svd => dws
            .iter()
            .map(|dw| {
                let f = decomp::svd_truncate(dw, k)?;
                Ok((f.left, f.coords))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let ranks: Vec<usize> = factors.iter().map(|(b, _)| b.ncols()).collect();
    let (p_cat, mut a_cat) = concat_factors(&factors)?;

    let mut task_coeffs = vec![1.0; dws.len()];
    let mut dim_coeffs = vec![1.0; d_in];
    match cfg.order {
        ScalingOrder::TaskThenDim => {
            if cfg.scaling.task {
                task_coeffs = scale_tasks(&mut a_cat, &ranks, cfg)?;
            }
            if cfg.scaling.dim {
                dim_coeffs = scale_dims(&mut a_cat, cfg)?;
            }
        }
        ScalingOrder::DimThenTask => {
            if cfg.scaling.dim {
                dim_coeffs = scale_dims(&mut a_cat, cfg)?;
            }
            if cfg.scaling.task {
                task_coeffs = scale_tasks(&mut a_cat, &ranks, cfg)?;
            }
        }
    }
    if a_cat.iter().all(|&v| v == 0.0) {
        return Ok(LayerMerge {
            task_coeffs,
            dim_coeffs,
            ..zero(k)
        });
    }

    let (p_orth, a_orth) = orthogonalize_pair(&p_cat, &a_cat)?;
    let delta = reconstruct(&p_orth, &a_orth)?;
    Ok(LayerMerge {
        delta,
        zero_update: false,
        k,
        task_coeffs,
        dim_coeffs,
    })
}

/// Merged updates for every matrix layer plus averaged non-matrix parameters.
#[derive(Clone, Debug, Default)]
pub struct MergedUpdate {
    /// Pre-β merged update per layer.
    pub layers: BTreeMap<String, DMatrix<f64>>,
    pub betas: BTreeMap<String, f64>,
    pub zero_layers: BTreeSet<String>,
    pub ranks: BTreeMap<String, usize>,
    /// Final values (base + mean update) of every non-matrix tensor.
    pub non_matrix: BTreeMap<String, DenseTensor>,
    pub report: ScaleReport,
}

/// Input sample key for a weight tensor: `blk.0.mlp.c_fc.weight` → `blk.0.mlp.c_fc.input`.
pub fn proxy_key(weight_name: &str) -> String {
    let stem = weight_name.strip_suffix(".weight").unwrap_or(weight_name);
    format!("{stem}.input")
}

fn lookup_proxy(proxies: &TensorMap, task: usize, name: &str, d_in: usize) -> Result<DMatrix<f64>> {
    let primary = proxy_key(name);
    let fallback = format!("{name}.input");
    let tensor = proxies
        .get(&primary)
        .or_else(|| proxies.get(&fallback))
        .ok_or(MergeError::MissingProxy { task, key: primary.clone() })?;
    let x = tensor.to_row_matrix().filter(|x| x.ncols() == d_in).ok_or_else(|| {
        MergeError::DimensionMismatch(format!(
            "proxy `{primary}` of task {task} has shape {:?}, expected last axis {d_in}",
            tensor.shape()
        ))
    })?;
    if x.nrows() == 0 {
        return Err(MergeError::Decomp(DecompError::EmptyProxy));
    }
    Ok(x)
}

/// Everything up to (not including) α: per-layer merges, β coefficients, non-matrix averages.
pub fn compute_merged_update(
    base: &TensorMap,
    experts: &[TensorMap],
    proxies: &[TensorMap],
    cfg: &MergeConfig,
) -> Result<MergedUpdate> {
    cfg.validate()?;
    if experts.is_empty() {
        return Err(MergeError::NoTasks);
    }
    let needs_proxies = matches!(cfg.decomposition, Decomposition::Esd { .. });
    if needs_proxies && proxies.len() != experts.len() {
        return Err(MergeError::ProxyCount {
            experts: experts.len(),
            proxies: proxies.len(),
        });
    }
    let updates: Vec<TaskUpdate> = experts
        .par_iter()
        .map(|e| tensorstore::compute_task_update(base, e, &cfg.layer_rules))
        .collect::<std::result::Result<_, _>>()?;
    let non_matrix = tensorstore::average_non_matrix(base, &updates)?;

    let names: Vec<&String> = updates[0].matrix_layers.keys().collect();
    let merged: Vec<(String, LayerMerge)> = names
        .par_iter()
        .map(|&name| {
            let dws: Vec<DMatrix<f64>> = updates.iter().map(|u| u.matrix_layers[name].clone()).collect();
            let xs = if needs_proxies {
                let d_in = dws[0].ncols();
                proxies
                    .iter()
                    .enumerate()
                    .map(|(t, p)| lookup_proxy(p, t, name, d_in))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok((name.clone(), merge_layer(&dws, &xs, cfg)?))
        })
        .collect::<Result<_>>()?;

    let mut out = MergedUpdate {
        non_matrix,
        ..MergedUpdate::default()
    };
    for (name, lm) in merged {
        out.report
            .per_task
            .extend(lm.task_coeffs.iter().enumerate().map(|(t, &s)| ((name.clone(), t), s)));
        out.report.per_dim.insert(name.clone(), lm.dim_coeffs);
        out.ranks.insert(name.clone(), lm.k);
        if lm.zero_update {
            out.zero_layers.insert(name.clone());
        }
        out.layers.insert(name, lm.delta);
    }

    let mut betas: BTreeMap<String, f64> = out.layers.keys().map(|n| (n.clone(), 1.0)).collect();
    if cfg.scaling.layer {
        let live: BTreeMap<String, DMatrix<f64>> = out
            .layers
            .iter()
            .filter(|(n, _)| !out.zero_layers.contains(*n))
            .map(|(n, m)| (n.clone(), m.clone()))
            .collect();
        for (name, g) in scaling::inter_layer_coeffs(&live, &cfg.layer_rules, cfg.exponent) {
            betas.insert(name, scaling::apply_variant(g, cfg.variant)?);
        }
    }
    out.report.per_layer = betas.clone();
    out.betas = betas;
    Ok(out)
}

/// `θ_M = θ_0 + α·β_ℓ·Δ_ℓ` on matrix layers; averaged values elsewhere.
/// Entries whose added term is exactly zero keep the base bits.
pub fn assemble(base: &TensorMap, merged: &MergedUpdate, alpha: f64) -> TensorMap {
    base.iter()
        .map(|(name, b)| {
            let tensor = if let Some(delta) = merged.layers.get(name) {
                let gain = alpha * merged.betas.get(name).copied().unwrap_or(1.0);
                if gain == 0.0 || merged.zero_layers.contains(name) {
                    b.clone()
                } else {
                    let cols = delta.ncols();
                    let data = b
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, &v)| add_delta(v, gain * delta[(idx / cols, idx % cols)]))
                        .collect();
                    DenseTensor::new(b.shape().to_vec(), data).expect("shape preserved")
                }
            } else if let Some(avg) = merged.non_matrix.get(name) {
                avg.clone()
            } else {
                b.clone()
            };
            (name.to_string(), tensor)
        })
        .collect()
}

#[derive(Debug)]
pub struct MergeOutcome {
    pub model: TensorMap,
    pub alpha: f64,
    pub merged: MergedUpdate,
}

/// Full pipeline: merge, choose α (fixed or searched), assemble the checkpoint.
pub fn merge_model(
    base: &TensorMap,
    experts: &[TensorMap],
    proxies: &[TensorMap],
    cfg: &MergeConfig,
) -> Result<MergeOutcome> {
    let merged = compute_merged_update(base, experts, proxies, cfg)?;
    let alpha = match &cfg.alpha {
        AlphaPolicy::Fixed(a) => *a,
        AlphaPolicy::Search { lo, hi, scorer } => {
            select_alpha(*lo, *hi, |a| scorer(&assemble(base, &merged, a))).map_err(|e| match e {
                SearchError::InvalidRange { lo, hi } => {
                    MergeError::InvalidConfig(format!("alpha search needs lo < hi, got [{lo}, {hi}]"))
                }
                SearchError::Scorer(msg) => MergeError::Scorer(msg),
            })?
        }
    };
    let model = assemble(base, &merged, alpha);
    Ok(MergeOutcome { model, alpha, merged })
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SearchError<E> {
    #[error("search interval [{lo}, {hi}] is empty")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("scorer failed")]
    Scorer(E),
}

/// Maximize `scorer` over `[lo, hi]`: a 0.05-step grid, then ternary refinement
/// around the best grid point down to a 0.01-wide bracket. Ties go to the smaller α.
pub fn select_alpha<E>(
    lo: f64,
    hi: f64,
    mut scorer: impl FnMut(f64) -> std::result::Result<f64, E>,
) -> std::result::Result<f64, SearchError<E>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(SearchError::InvalidRange { lo, hi });
    }
    let mut seen: Vec<(f64, f64)> = Vec::new();
    let mut eval = |a: f64, seen: &mut Vec<(f64, f64)>| -> std::result::Result<f64, SearchError<E>> {
        if let Some(&(_, s)) = seen.iter().find(|(x, _)| *x == a) {
            return Ok(s);
        }
        let s = scorer(a).map_err(SearchError::Scorer)?;
        let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
        seen.push((a, s));
        Ok(s)
    };
    let best_of = |seen: &[(f64, f64)]| {
        seen.iter()
            .copied()
            .fold(None::<(f64, f64)>, |best, (a, s)| match best {
                Some((ba, bs)) if bs > s || (bs == s && ba <= a) => Some((ba, bs)),
                _ => Some((a, s)),
            })
            .map(|(a, _)| a)
            .expect("at least one evaluation")
    };

    let steps = ((hi - lo) / ALPHA_GRID_STEP - 1e-9).ceil() as usize;
    for i in 0..steps {
        eval(lo + i as f64 * ALPHA_GRID_STEP, &mut seen)?;
    }
    eval(hi, &mut seen)?;
    let centre = best_of(&seen);

    let (mut a, mut b) = ((centre - ALPHA_GRID_STEP).max(lo), (centre + ALPHA_GRID_STEP).min(hi));
    while b - a > ALPHA_TOLERANCE {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if eval(m1, &mut seen)? >= eval(m2, &mut seen)? {
            b = m2;
        } else {
            a = m1;
        }
    }
    eval(0.5 * (a + b), &mut seen)?;
    Ok(best_of(&seen))
}
