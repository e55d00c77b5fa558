//! Task-matrix decompositions and their truncation errors.
//!
//! ESD builds its basis from the principal directions of the activation shift
//! `X·ΔWᵀ` instead of from `ΔW` alone, so the output error of a rank-`k`
//! truncation on the proxy sample equals the sum of the discarded
//! eigenvalues. The SVD truncation is kept as the baseline.

use nalgebra::DMatrix;

use crate::linalg::{self, LinalgError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecompError {
    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },
    #[error("proxy sample is empty")]
    EmptyProxy,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("spectrum is entirely zero")]
    ZeroSpectrum,
    #[error("cannot budget rank: output dimension {d_out} is smaller than task count {tasks}")]
    BudgetTooSmall { d_out: usize, tasks: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DecompError>;

/// Truncated ESD factors of one task matrix.
#[derive(Clone, Debug)]
pub struct EsdFactors {
    /// `d_out × k`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// `k × d_in`, equal to `basisᵀ·ΔW`.
    pub coords: DMatrix<f64>,
    /// All `d_out` eigenvalues of the shift's second moment, non-increasing.
    pub spectrum: Vec<f64>,
    pub k: usize,
}

impl EsdFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.basis * &self.coords
    }
}

/// Truncated SVD factors of one task matrix.
#[derive(Clone, Debug)]
pub struct SvdTruncFactors {
    /// `d_out × k`, the leading left singular vectors.
    pub left: DMatrix<f64>,
    /// `k × d_in`, `diag(σ₁…σ_k)·V_kᵀ`.
    pub coords: DMatrix<f64>,
    /// All `min(d_out, d_in)` singular values, non-increasing.
    pub spectrum: Vec<f64>,
    /// `d_in × r`, every right singular vector (needed by the error formula).
    pub right: DMatrix<f64>,
    pub k: usize,
}

impl SvdTruncFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.left * &self.coords
    }
}

/// `X·ΔWᵀ`: how the update moves each proxy row's output.
pub fn activation_shift(x: &DMatrix<f64>, dw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != dw.ncols() {
        return Err(DecompError::DimensionMismatch(format!(
            "proxy has {} columns, update has d_in = {}",
            x.ncols(),
            dw.ncols()
        )));
    }
    Ok(x * dw.transpose())
}

pub fn esd(dw: &DMatrix<f64>, x: &DMatrix<f64>, k: usize) -> Result<EsdFactors> {
    esd_with(dw, x, k, false)
}

/// ESD with the PCA centering made explicit.
pub fn esd_with(dw: &DMatrix<f64>, x: &DMatrix<f64>, k: usize, centered: bool) -> Result<EsdFactors> {
    let d_out = dw.nrows();
    if k == 0 || k > d_out {
        return Err(DecompError::RankOutOfRange { k, max: d_out });
    }
    if x.nrows() == 0 {
        return Err(DecompError::EmptyProxy);
    }
    let shift = activation_shift(x, dw)?;
    let eig = linalg::pca_basis(&shift, centered)?;
    let basis = if eig.values.first().is_some_and(|&v| v > 0.0) {
        eig.vectors.columns(0, k).into_owned()
    } else {
        // Zero shift: no preferred directions, fall back to the canonical ones.
        DMatrix::identity(d_out, k)
    };
    let coords = basis.tr_mul(dw);
    Ok(EsdFactors {
        basis,
        coords,
        spectrum: eig.values,
        k,
    })
}

pub fn svd_truncate(dw: &DMatrix<f64>, k: usize) -> Result<SvdTruncFactors> {
    let max = dw.nrows().min(dw.ncols());
    if k == 0 || k > max {
        return Err(DecompError::RankOutOfRange { k, max });
    }
    let f = linalg::thin_svd(dw)?;
    let left = f.u.columns(0, k).into_owned();
    let mut coords = f.v.columns(0, k).transpose();
    for (i, mut row) in coords.row_iter_mut().enumerate() {
        row *= f.s[i];
    }
    Ok(SvdTruncFactors {
        left,
        coords,
        spectrum: f.s,
        right: f.v,
        k,
    })
}

/// Sum of the eigenvalues past index `k`.
pub fn expected_error_esd(spectrum: &[f64], k: usize) -> f64 {
    spectrum.iter().skip(k).sum()
}

/// `Σ_{i>k} σ_i² · mean_x (v_iᵀx)²` over the rows of `x`.
pub fn expected_error_svd(factors: &SvdTruncFactors, x: &DMatrix<f64>, k: usize) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(DecompError::EmptyProxy);
    }
    if x.ncols() != factors.right.nrows() {
        return Err(DecompError::DimensionMismatch(format!(
            "proxy has {} columns, right singular vectors have {} rows",
            x.ncols(),
            factors.right.nrows()
        )));
    }
    let n = x.nrows() as f64;
    let mut total = 0.0;
    for (i, &sigma) in factors.spectrum.iter().enumerate().skip(k) {
        let proj = x * factors.right.column(i);
        total += sigma * sigma * proj.norm_squared() / n;
    }
    Ok(total)
}

/// Mean squared output error `‖ΔW x − ΔŴ x‖²` over the rows of `x`.
pub fn empirical_error(dw: &DMatrix<f64>, dw_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<f64> {
    if dw.shape() != dw_hat.shape() {
        return Err(DecompError::DimensionMismatch(format!(
            "update {:?} vs approximation {:?}",
            dw.shape(),
            dw_hat.shape()
        )));
    }
    if x.ncols() != dw.ncols() {
        return Err(DecompError::DimensionMismatch(format!(
            "proxy has {} columns, update has d_in = {}",
            x.ncols(),
            dw.ncols()
        )));
    }
    if x.nrows() == 0 {
        return Err(DecompError::EmptyProxy);
    }
    let residual = x * (dw - dw_hat).transpose();
    Ok(residual.norm_squared() / x.nrows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumKind {
    /// Singular values; energy is their square.
    Svd,
    /// Eigenvalues; energy is the value itself.
    Esd,
}

/// Cumulative fraction of energy retained when keeping the first `i + 1` components.
pub fn energy_retention(spectrum: &[f64], kind: SpectrumKind) -> Result<Vec<f64>> {
    let energy: Vec<f64> = match kind {
        SpectrumKind::Svd => spectrum.iter().map(|s| s * s).collect(),
        SpectrumKind::Esd => spectrum.to_vec(),
    };
    let mut cumulative = Vec::with_capacity(energy.len());
    let mut acc = 0.0;
    for e in &energy {
        acc += e;
        cumulative.push(acc);
    }
    let total = acc;
    if !(total > 0.0) {
        return Err(DecompError::ZeroSpectrum);
    }
    Ok(cumulative.into_iter().map(|c| c / total).collect())
}

/// Per-task rank `⌊d_out / T⌋`.
pub fn rank_budget(d_out: usize, tasks: usize) -> Result<usize> {
    if tasks == 0 || d_out < tasks {
        return Err(DecompError::BudgetTooSmall { d_out, tasks });
    }
    Ok(d_out / tasks)
}

/// `⌊ρ · d_out / T⌋` clamped to `[1, d_out]`.
pub fn scaled_rank_budget(d_out: usize, tasks: usize, ratio: f64) -> Result<usize> {
    let base = rank_budget(d_out, tasks)?;
    if ratio == 1.0 {
        return Ok(base);
    }
    let k = (ratio * d_out as f64 / tasks as f64).floor();
    Ok((k.max(1.0) as usize).min(d_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn shift_examples() {
        let i2 = DMatrix::identity(2, 2);
        assert_eq!(activation_shift(&i2, &i2).unwrap(), i2);
        let x = m(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(activation_shift(&x, &i2).unwrap(), x);
        let got = activation_shift(&m(1, 2, &[1.0, 1.0]), &m(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        assert_eq!(got, m(1, 2, &[1.0, -1.0]));
        assert!(matches!(
            activation_shift(&DMatrix::zeros(2, 3), &i2),
            Err(DecompError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn esd_rank_one_update_is_exact() {
        let dw = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let f = esd(&dw, &DMatrix::identity(2, 2), 1).unwrap();
        assert_abs_diff_eq!(f.basis, m(2, 1, &[1.0, 0.0]));
        assert_abs_diff_eq!(f.coords, m(1, 2, &[1.0, 0.0]));
        assert_eq!(f.reconstruct(), dw);
    }

    #[test]
    fn esd_picks_functional_direction() {
        let dw = DMatrix::identity(2, 2);
        let x = m(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let f = esd(&dw, &x, 1).unwrap();
        assert_eq!(f.spectrum, vec![2.0, 0.5]);
        assert_abs_diff_eq!(f.basis, m(2, 1, &[0.0, 1.0]));
        assert_abs_diff_eq!(f.reconstruct(), m(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        assert_eq!(expected_error_esd(&f.spectrum, 1), 0.5);
        assert_eq!(empirical_error(&dw, &f.reconstruct(), &x).unwrap(), 0.5);
    }

    #[test]
    fn esd_rank_one_outer_product() {
        let u = m(3, 1, &[1.0, -2.0, 0.5]);
        let v = m(1, 4, &[0.3, 0.0, -1.0, 2.0]);
        let dw = &u * &v;
        let x = m(2, 4, &[1.0, 1.0, 1.0, 1.0, 0.0, 2.0, -1.0, 0.5]);
        let f = esd(&dw, &x, 1).unwrap();
        assert_abs_diff_eq!(f.reconstruct(), dw, epsilon = 1e-12);
    }

    #[test]
    fn esd_zero_shift_uses_canonical_basis() {
        let f = esd(&DMatrix::zeros(3, 2), &DMatrix::identity(2, 2), 2).unwrap();
        assert_eq!(f.basis, DMatrix::identity(3, 2));
        assert_eq!(f.coords, DMatrix::zeros(2, 2));
        assert_eq!(f.spectrum, vec![0.0; 3]);
    }

    #[test]
    fn esd_errors() {
        let dw = DMatrix::identity(2, 2);
        assert_eq!(
            esd(&dw, &dw, 3).unwrap_err(),
            DecompError::RankOutOfRange { k: 3, max: 2 }
        );
        assert_eq!(esd(&dw, &dw, 0).unwrap_err(), DecompError::RankOutOfRange { k: 0, max: 2 });
        assert_eq!(esd(&dw, &DMatrix::zeros(0, 2), 1).unwrap_err(), DecompError::EmptyProxy);
    }

    #[test]
    fn svd_truncate_examples() {
        let f = svd_truncate(&m(2, 2, &[3.0, 0.0, 0.0, 1.0]), 1).unwrap();
        assert_abs_diff_eq!(f.left, m(2, 1, &[1.0, 0.0]));
        assert_abs_diff_eq!(f.coords, m(1, 2, &[3.0, 0.0]));

        let z = svd_truncate(&DMatrix::zeros(3, 2), 2).unwrap();
        assert!(z.coords.iter().all(|&v| v == 0.0));

        assert_eq!(
            svd_truncate(&DMatrix::zeros(3, 2), 3).unwrap_err(),
            DecompError::RankOutOfRange { k: 3, max: 2 }
        );
    }

    #[test]
    fn svd_expected_error_hand_case() {
        let dw = m(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let x = DMatrix::identity(2, 2);
        let f = svd_truncate(&dw, 1).unwrap();
        assert_eq!(expected_error_svd(&f, &x, 1).unwrap(), 0.5);
        assert_eq!(expected_error_svd(&f, &x, 2).unwrap(), 0.0);
        let orth = m(3, 2, &[1.0, 0.0, -2.0, 0.0, 0.5, 0.0]);
        assert_eq!(expected_error_svd(&f, &orth, 1).unwrap(), 0.0);
        assert!(matches!(
            expected_error_svd(&f, &DMatrix::zeros(1, 3), 1),
            Err(DecompError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn empirical_error_brute_force() {
        let dw = m(2, 3, &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0]);
        let x = m(3, 3, &[1.0, 0.0, 2.0, -1.0, 1.0, 1.0, 0.5, 0.5, 0.5]);
        assert_eq!(empirical_error(&dw, &dw, &x).unwrap(), 0.0);
        let mut brute = 0.0;
        for r in 0..3 {
            for o in 0..2 {
                let y: f64 = (0..3).map(|i| dw[(o, i)] * x[(r, i)]).sum();
                brute += y * y;
            }
        }
        brute /= 3.0;
        assert_abs_diff_eq!(empirical_error(&dw, &DMatrix::zeros(2, 3), &x).unwrap(), brute, epsilon = 1e-12);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy_retention(&[2.0, 1.0], SpectrumKind::Svd).unwrap(), vec![0.8, 1.0]);
        assert_eq!(energy_retention(&[3.0, 1.0], SpectrumKind::Esd).unwrap(), vec![0.75, 1.0]);
        assert_eq!(energy_retention(&[4.0], SpectrumKind::Esd).unwrap(), vec![1.0]);
        assert_eq!(
            energy_retention(&[0.0, 0.0], SpectrumKind::Svd).unwrap_err(),
            DecompError::ZeroSpectrum
        );
    }

    #[test]
    fn budgets() {
        assert_eq!(rank_budget(768, 8).unwrap(), 96);
        assert_eq!(rank_budget(10, 3).unwrap(), 3);
        assert_eq!(rank_budget(17, 1).unwrap(), 17);
        assert!(rank_budget(2, 3).is_err());
        assert_eq!(scaled_rank_budget(768, 8, 0.5).unwrap(), 48);
        assert_eq!(scaled_rank_budget(768, 8, 2.0).unwrap(), 192);
        assert_eq!(scaled_rank_budget(10, 3, 0.05).unwrap(), 1);
        assert_eq!(scaled_rank_budget(4, 1, 2.0).unwrap(), 4);
    }

    #[test]
    fn expected_error_esd_edges() {
        let l = [2.0, 0.5];
        assert_eq!(expected_error_esd(&l, 0), 2.5);
        assert_eq!(expected_error_esd(&l, 2), 0.0);
        assert_eq!(expected_error_esd(&l, 5), 0.0);
    }
}
