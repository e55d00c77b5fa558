//! Dense kernels: thin SVD, symmetric eigendecomposition, polar factor, PCA.
//!
//! All factorizations are made deterministic by sorting (stable, descending)
//! and by flipping each singular/eigen vector so that its largest-magnitude
//! entry (lowest index on ties) is non-negative. For SVD the left vector sets
//! the sign and the paired right vector follows it.
//!
//! The SVD first tries nalgebra's bidiagonal solver and keeps the result only
//! if it reconstructs the input and has orthonormal factors. That solver can
//! lose all accuracy on rank-deficient inputs with repeated singular values
//! (merged layers are exactly that); those fall back to a Householder QR
//! followed by one-sided Jacobi on the triangular factor.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Relative floor below which eigenvalues are treated as round-off.
pub const EIGEN_CLAMP_REL: f64 = 1e-12;
/// Allowed `|a_ij − a_ji|`, relative to `max(1, max |a|)`.
pub const SYMMETRY_TOL: f64 = 1e-8;
const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (max |a_ij - a_ji| = {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("empty matrix")]
    Empty,
    #[error("factorization did not converge")]
    NoConvergence,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `m × r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Non-increasing, length `r = min(m, n)`.
    pub s: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, &s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(s);
        }
        us * self.v.transpose()
    }
}

#[derive(Clone, Debug)]
pub struct EigFactors {
    /// Non-increasing, non-negative after clamping.
    pub values: Vec<f64>,
    /// `d × d`, column `i` pairs with `values[i]`.
    pub vectors: DMatrix<f64>,
}

fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Index of the entry with the largest magnitude; the first one wins ties.
fn dominant_index(col: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, v) in col.enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    best
}

/// Stable descending order of `values`.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Rotate columns `p < q` of a column-major buffer with `rows` rows.
fn rotate(buf: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unsorted SVD of a matrix with `rows >= cols`.
fn tall_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let n = m.ncols();
    let qr = m.clone().qr();
    let q = qr.q();
    let mut r = qr.r();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = f64::EPSILON * n as f64;

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut norms: Vec<f64> = r.column_iter().map(|c| c.norm_squared()).collect();
        let mut rotated = false;
        let rb = r.as_mut_slice();
        for p in 0..n - 1 {
            for j in p + 1..n {
                let gamma = dot(&rb[p * n..(p + 1) * n], &rb[j * n..(j + 1) * n]);
                let (alpha, beta) = (norms[p], norms[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                rotate(rb, n, p, j, c, c * t);
                rotate(v.as_mut_slice(), n, p, j, c, c * t);
                norms[p] = (alpha - t * gamma).max(0.0);
                norms[j] = beta + t * gamma;
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence);
    }

    // Recompute exactly; the running norms drift by a few ulps.
    let s: Vec<f64> = r.column_iter().map(|c| c.norm()).collect();
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let floor = s_max * tol;
    let mut u_r = DMatrix::<f64>::zeros(n, n);
    let mut missing = Vec::new();
    for (j, &sj) in s.iter().enumerate() {
        if sj > floor && sj > 0.0 {
            u_r.set_column(j, &(r.column(j) / sj));
        } else {
            missing.push(j);
        }
    }
    // Null directions: complete the basis from unit vectors, Gram-Schmidt twice.
    let mut candidate = 0;
    for j in missing {
        loop {
            let mut e = DVector::<f64>::zeros(n);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in 0..n {
                    let col = u_r.column(k);
                    let proj = col.dot(&e);
                    e -= col * proj;
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                u_r.set_column(j, &(e / norm));
                break;
            }
        }
    }
    Ok((q * u_r, s, v))
}

fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    (m.transpose() * m - DMatrix::<f64>::identity(m.ncols(), m.ncols())).amax()
}

/// nalgebra's SVD, kept only if its factors pass a reconstruction and orthogonality check.
fn checked_bidiagonal_svd(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    let svd = SVD::try_new_unordered(m.clone(), true, true, f64::EPSILON, 0)?;
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    if s.iter().any(|&x| !(x >= 0.0)) {
        return None;
    }
    let v = v_t.transpose();
    let scale = s.iter().copied().fold(0.0, f64::max);
    let tol = 64.0 * (rows + cols) as f64 * f64::EPSILON;
    let mut us = u.clone();
    for (j, &sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(sj);
    }
    let residual = (us * v.transpose() - m).amax();
    let ok = residual <= tol * scale.max(f64::MIN_POSITIVE)
        && orthonormality_error(&u) <= tol
        && orthonormality_error(&v) <= tol;
    ok.then_some((u, s, v))
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<SvdFactors> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let r = rows.min(cols);
    if r == 0 {
        return Ok(SvdFactors {
            u: DMatrix::zeros(rows, 0),
            s: Vec::new(),
            v: DMatrix::zeros(cols, 0),
        });
    }
    let (u_raw, raw_s, v_raw) = if let Some(fast) = checked_bidiagonal_svd(m) {
        fast
    } else if rows >= cols {
        tall_svd(m)?
    } else {
        let (u, s, v) = tall_svd(&m.transpose())?;
        (v, s, u)
    };
    let order = descending_order(&raw_s);

    let mut u = DMatrix::zeros(rows, r);
    let mut v = DMatrix::zeros(cols, r);
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let ucol = u_raw.column(src);
        let flip = ucol[dominant_index(ucol.iter().copied())] < 0.0;
        let sign = if flip { -1.0 } else { 1.0 };
        u.set_column(dst, &(ucol * sign));
        v.set_column(dst, &(v_raw.column(src) * sign));
        s.push(raw_s[src]);
    }
    Ok(SvdFactors { u, s, v })
}

pub fn sym_eig(a: &DMatrix<f64>) -> Result<EigFactors> {
    ensure_finite(a)?;
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare(rows, cols));
    }
    let scale = a.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..rows {
        for j in (i + 1)..rows {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(LinalgError::Asymmetric(asym));
    }
    if rows == 0 {
        return Ok(EigFactors {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(LinalgError::NoConvergence)?;
    let raw: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let order = descending_order(&raw);

    let top = order.first().map(|&i| raw[i]).unwrap_or(0.0);
    let floor = EIGEN_CLAMP_REL * top.max(0.0);
    let mut vectors = DMatrix::zeros(rows, rows);
    let mut values = Vec::with_capacity(rows);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let flip = col[dominant_index(col.iter().copied())] < 0.0;
        vectors.set_column(dst, &(col * if flip { -1.0 } else { 1.0 }));
        let lambda = raw[src];
        values.push(if lambda <= floor { 0.0 } else { lambda });
    }
    Ok(EigFactors { values, vectors })
}

/// Polar factor `U·Vᵀ` of the thin SVD; equals `M (MᵀM)^{-1/2}` for full column rank.
pub fn whiten(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = thin_svd(m)?;
    Ok(&f.u * f.v.transpose())
}

/// Eigendecomposition of the second-moment (or, if `centered`, covariance)
/// matrix of the rows of `shift`, normalized by the row count.
pub fn pca_basis(shift: &DMatrix<f64>, centered: bool) -> Result<EigFactors> {
    let n = shift.nrows();
    if n == 0 || shift.ncols() == 0 {
        return Err(LinalgError::Empty);
    }
    ensure_finite(shift)?;
    let moment = if centered {
        let mean: DVector<f64> = shift.row_mean().transpose();
        let mut c = shift.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        second_moment(&c)
    } else {
        second_moment(shift)
    };
    sym_eig(&moment)
}

/// `Sᵀ S / n`, filled from the upper triangle so the result is exactly symmetric.
fn second_moment(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows() as f64;
    let g = s.tr_mul(s);
    let d = g.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        g[(a, b)] / n
    })
}
