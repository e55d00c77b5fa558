//! Executable oracles for the truncation-error identities, the whitening /
//! Procrustes equivalence and the ESD-vs-SVD optimality claim, plus linear CKA.
//!
//! Each oracle draws random instances (i.i.d. standard normal entries, proxy
//! sample of `4 · d_in` rows) from a seeded generator and reports the worst
//! deviation it saw. Trial `i` is generated from its own stream, so reports
//! do not depend on how trials are scheduled.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::decomp::{self, DecompError};
use crate::linalg::{self, LinalgError};

pub const SVD_THEOREM_TOL: f64 = 1e-6;
pub const ESD_THEOREM_TOL: f64 = 1e-6;
pub const PROCRUSTES_TOL: f64 = 1e-8;
pub const ESD_VS_SVD_SLACK: f64 = 1e-9;
/// Matrices above this condition number are redrawn by the Procrustes oracle.
pub const PROCRUSTES_MAX_COND: f64 = 1e6;
/// Relative deviations are measured against at least this fraction of the
/// trial's total output energy, so two sides that are both round-off zero
/// do not register as a large relative gap.
pub const RELATIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("feature matrices need the same row count >= 2 (got {0} and {1})")]
    RowMismatch(usize, usize),
    #[error("feature matrix is constant after centering")]
    Degenerate,
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Pass iff `max_rel_deviation <= tolerance`.
    Relative,
    /// Pass iff `max_abs_deviation <= tolerance`.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub oracle: &'static str,
    pub trials: usize,
    pub seed: u64,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub criterion: Criterion,
    pub pass: bool,
}

impl OracleReport {
    fn new(oracle: &'static str, trials: usize, seed: u64, devs: &[(f64, f64)], tolerance: f64, criterion: Criterion) -> Self {
        let max_abs = devs.iter().map(|d| d.0).fold(0.0, f64::max);
        let max_rel = devs.iter().map(|d| d.1).fold(0.0, f64::max);
        let worst = match criterion {
            Criterion::Relative => max_rel,
            Criterion::Absolute => max_abs,
        };
        let pass = devs.iter().all(|d| d.0.is_finite() && d.1.is_finite()) && worst <= tolerance;
        Self {
            oracle,
            trials,
            seed,
            max_abs_deviation: max_abs,
            max_rel_deviation: max_rel,
            tolerance,
            criterion,
            pass,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<11} {} trials={} seed={} max_abs={:.3e} max_rel={:.3e} tol={:.0e} ({})",
            self.oracle,
            if self.pass { "PASS" } else { "FAIL" },
            self.trials,
            self.seed,
            self.max_abs_deviation,
            self.max_rel_deviation,
            self.tolerance,
            match self.criterion {
                Criterion::Relative => "relative",
                Criterion::Absolute => "absolute",
            }
        )
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn deviation(a: f64, b: f64, floor: f64) -> (f64, f64) {
    let abs = (a - b).abs();
    let denom = a.abs().max(b.abs()).max(floor);
    (abs, if denom > 0.0 { abs / denom } else { 0.0 })
}

/// One instance of the SVD truncation identity: `(empirical, closed_form, total_energy)`.
pub fn svd_theorem_instance(dw: &DMatrix<f64>, x: &DMatrix<f64>, k: usize) -> Result<(f64, f64, f64)> {
    let r = dw.nrows().min(dw.ncols());
    let full = decomp::svd_truncate(dw, r)?;
    let u_k = full.left.columns(0, k.min(r));
    let approx = u_k * (u_k.transpose() * dw);
    let empirical = decomp::empirical_error(dw, &approx, x)?;
    let closed = decomp::expected_error_svd(&full, x, k)?;
    let total = decomp::empirical_error(dw, &DMatrix::zeros(dw.nrows(), dw.ncols()), x)?;
    Ok((empirical, closed, total))
}

/// One instance of the ESD truncation identity: `(empirical, Σ discarded λ, total_energy)`.
pub fn esd_theorem_instance(dw: &DMatrix<f64>, x: &DMatrix<f64>, k: usize) -> Result<(f64, f64, f64)> {
    let d_out = dw.nrows();
    let full = decomp::esd(dw, x, d_out)?;
    let p_k = full.basis.columns(0, k.min(d_out));
    let approx = p_k * (p_k.transpose() * dw);
    let empirical = decomp::empirical_error(dw, &approx, x)?;
    let closed = decomp::expected_error_esd(&full.spectrum, k);
    let total = decomp::empirical_error(dw, &DMatrix::zeros(d_out, dw.ncols()), x)?;
    Ok((empirical, closed, total))
}

fn random_dims(rng: &mut impl Rng, dims: &RangeInclusive<usize>) -> (usize, usize) {
    (rng.random_range(dims.clone()), rng.random_range(dims.clone()))
}

fn run_trials<F>(trials: usize, seed: u64, f: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<(f64, f64)> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| f(&mut trial_rng(seed, t)))
        .collect()
}

pub fn check_svd_theorem(trials: usize, seed: u64, dims: RangeInclusive<usize>) -> Result<OracleReport> {
    let devs = run_trials(trials, seed, |rng| {
        let (d_out, d_in) = random_dims(rng, &dims);
        let dw = gaussian(d_out, d_in, rng);
        let x = gaussian(4 * d_in, d_in, rng);
        let k = rng.random_range(0..d_out.min(d_in));
        let (emp, closed, total) = svd_theorem_instance(&dw, &x, k)?;
        Ok(deviation(emp, closed, RELATIVE_FLOOR * total))
    })?;
    Ok(OracleReport::new("svd-theorem", trials, seed, &devs, SVD_THEOREM_TOL, Criterion::Relative))
}

pub fn check_esd_theorem(trials: usize, seed: u64, dims: RangeInclusive<usize>) -> Result<OracleReport> {
    let devs = run_trials(trials, seed, |rng| {
        let (d_out, d_in) = random_dims(rng, &dims);
        let dw = gaussian(d_out, d_in, rng);
        let x = gaussian(4 * d_in, d_in, rng);
        let k = rng.random_range(0..d_out.min(d_in));
        let (emp, closed, total) = esd_theorem_instance(&dw, &x, k)?;
        Ok(deviation(emp, closed, RELATIVE_FLOOR * total))
    })?;
    Ok(OracleReport::new("esd-theorem", trials, seed, &devs, ESD_THEOREM_TOL, Criterion::Relative))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Kept separate from the library's eigensolver so the Procrustes oracle does
/// not share a code path with the routine it checks. Values are unsorted.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= 1e-34 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// `M (MᵀM)^{-1/2}` through the Jacobi eigendecomposition of the Gram matrix.
pub fn inverse_sqrt_whiten(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = jacobi_eigen(&m.tr_mul(m));
    let inv = DVector::from_iterator(values.len(), values.iter().map(|&l| 1.0 / l.sqrt()));
    m * (&vectors * DMatrix::from_diagonal(&inv) * vectors.transpose())
}

/// Largest absolute entrywise gap between the SVD polar factor and the inverse-square-root route.
pub fn procrustes_instance(m: &DMatrix<f64>) -> Result<f64> {
    let via_svd = linalg::whiten(m)?;
    let via_gram = inverse_sqrt_whiten(m);
    Ok((via_svd - via_gram).amax())
}

pub fn check_procrustes(trials: usize, seed: u64, dims: RangeInclusive<usize>) -> Result<OracleReport> {
    let devs = run_trials(trials, seed, |rng| {
        let (a, b) = random_dims(rng, &dims);
        let (rows, cols) = (a.max(b), a.min(b));
        let m = loop {
            let m = gaussian(rows, cols, rng);
            let s = linalg::thin_svd(&m)?.s;
            let smallest = *s.last().expect("non-empty");
            if smallest > 0.0 && s[0] / smallest <= PROCRUSTES_MAX_COND {
                break m;
            }
        };
        let abs = procrustes_instance(&m)?;
        Ok((abs, abs))
    })?;
    Ok(OracleReport::new("procrustes", trials, seed, &devs, PROCRUSTES_TOL, Criterion::Absolute))
}

/// `(k, esd_error, svd_error)` for every `k` in `1..=min(d_out, d_in)`.
pub fn esd_vs_svd_instance(dw: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Vec<(usize, f64, f64)>> {
    let (d_out, d_in) = dw.shape();
    let r = d_out.min(d_in);
    let esd = decomp::esd(dw, x, d_out)?;
    let svd = decomp::svd_truncate(dw, r)?;
    (1..=r)
        .map(|k| {
            let p = esd.basis.columns(0, k);
            let u = svd.left.columns(0, k);
            let e = decomp::empirical_error(dw, &(p * (p.transpose() * dw)), x)?;
            let s = decomp::empirical_error(dw, &(u * (u.transpose() * dw)), x)?;
            Ok((k, e, s))
        })
        .collect()
}

pub fn compare_esd_svd(trials: usize, seed: u64, dims: RangeInclusive<usize>) -> Result<OracleReport> {
    let devs = run_trials(trials, seed, |rng| {
        let (d_out, d_in) = random_dims(rng, &dims);
        let dw = gaussian(d_out, d_in, rng);
        let x = gaussian(4 * d_in, d_in, rng);
        let rows = esd_vs_svd_instance(&dw, &x)?;
        let total = decomp::empirical_error(&dw, &DMatrix::zeros(d_out, d_in), &x)?;
        Ok(rows.iter().fold((0.0f64, 0.0f64), |(abs, rel), &(_, e, s)| {
            let excess = (e - s).max(0.0);
            let scale = s.abs().max(RELATIVE_FLOOR * total);
            (abs.max(excess), rel.max(if scale > 0.0 { excess / scale } else { 0.0 }))
        }))
    })?;
    Ok(OracleReport::new("esd-vs-svd", trials, seed, &devs, ESD_VS_SVD_SLACK, Criterion::Absolute))
}

fn center_columns(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = f.row_mean();
    let mut c = f.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

/// Linear CKA between two feature matrices sharing their row (example) axis.
pub fn linear_cka(f1: &DMatrix<f64>, f2: &DMatrix<f64>) -> Result<f64> {
    if f1.nrows() != f2.nrows() || f1.nrows() < 2 {
        return Err(VerifyError::RowMismatch(f1.nrows(), f2.nrows()));
    }
    let (c1, c2) = (center_columns(f1), center_columns(f2));
    let cross = c2.tr_mul(&c1).norm_squared();
    let denom = c1.tr_mul(&c1).norm() * c2.tr_mul(&c2).norm();
    if denom == 0.0 {
        return Err(VerifyError::Degenerate);
    }
    Ok((cross / denom).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    SvdTheorem,
    EsdTheorem,
    Procrustes,
    Compare,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "all" => Suite::All,
            "svd" | "svd-theorem" => Suite::SvdTheorem,
            "esd" | "esd-theorem" => Suite::EsdTheorem,
            "procrustes" => Suite::Procrustes,
            "compare" | "esd-vs-svd" => Suite::Compare,
            _ => return Err(format!("unknown suite `{s}` (all|svd|esd|procrustes|compare)")),
        })
    }
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64, dims: RangeInclusive<usize>) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::SvdTheorem) {
        out.push(check_svd_theorem(trials, seed, dims.clone())?);
    }
    if matches!(suite, Suite::All | Suite::EsdTheorem) {
        out.push(check_esd_theorem(trials, seed, dims.clone())?);
    }
    if matches!(suite, Suite::All | Suite::Procrustes) {
        out.push(check_procrustes(trials, seed, dims.clone())?);
    }
    if matches!(suite, Suite::All | Suite::Compare) {
        out.push(compare_esd_svd(trials, seed, dims)?);
    }
    Ok(out)
}
