//! Dense symmetric-matrix kernels.
//!
//! Everything downstream works with small dense symmetric matrices (p up to a
//! few hundred), so the routines here favour full eigendecompositions and
//! explicit Cholesky factors over iterative schemes.

use std::fmt::Write as _;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative symmetry tolerance: `max |M_ij - M_ji| <= SYM_TOL * (1 + max |M|)`.
pub const SYM_TOL: f64 = 1e-12;

/// A symmetric positive (semi)definite matrix.
///
/// Construction symmetrizes its input as `(M + M') / 2`; use
/// [`SpdMatrix::new_strict`] to reject asymmetric input instead.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Mat);

impl SpdMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        check_square(&m)?;
        Ok(SpdMatrix(symmetrize(&m)))
    }

    pub fn new_strict(m: Mat) -> Result<Self> {
        check_square(&m)?;
        check_symmetric(&m)?;
        Ok(SpdMatrix(symmetrize(&m)))
    }

    /// Like [`SpdMatrix::new`] but additionally requires strict positive definiteness.
    pub fn new_pd(m: Mat) -> Result<Self> {
        let s = Self::new(m)?;
        chol_upper(&s.0)?;
        Ok(s)
    }

    pub fn identity(p: usize) -> Self {
        SpdMatrix(Mat::identity(p, p))
    }

    pub fn scaled_identity(p: usize, s: f64) -> Self {
        SpdMatrix(Mat::identity(p, p) * s)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SpdMatrix(Mat::from_diagonal(&Vector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }
}

impl Deref for SpdMatrix {
    type Target = Mat;

    fn deref(&self) -> &Mat {
        &self.0
    }
}

impl From<SpdMatrix> for Mat {
    fn from(s: SpdMatrix) -> Mat {
        s.0
    }
}

fn check_square(m: &Mat) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::dim(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_symmetric(m: &Mat) -> Result<()> {
    check_square(m)?;
    let scale = 1.0 + m.amax();
    let asym = asymmetry(m);
    if asym > SYM_TOL * scale {
        return Err(Error::dim(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition of `(M + M') / 2`.
pub fn sym_eigen(m: &Mat) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

/// Rebuilds `V f(Λ) V'` from an eigendecomposition.
fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> Mat {
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let fl = f(lam);
        scaled.column_mut(j).scale_mut(fl);
    }
    symmetrize(&(scaled * v.transpose()))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigen(m).eigenvalues.min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    sym_eigen(m).eigenvalues.max()
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clamped to zero.
pub fn sym_sqrt(m: &Mat) -> Result<Mat> {
    check_symmetric(m)?;
    Ok(sym_sqrt_unchecked(m))
}

/// [`sym_sqrt`] without the symmetry check (the input is symmetrized).
pub fn sym_sqrt_unchecked(m: &Mat) -> Mat {
    spectral_map(&sym_eigen(m), |l| l.max(0.0).sqrt())
}

/// `(M^{1/2}, M^{-1/2})` for a strictly PD matrix, sharing one eigendecomposition.
pub fn sym_sqrt_and_inv_sqrt(m: &Mat) -> Result<(Mat, Mat)> {
    let eig = sym_eigen(m);
    let lmin = eig.eigenvalues.min();
    if lmin <= 0.0 || !lmin.is_finite() {
        return Err(Error::Domain(format!(
            "inverse square root needs a PD matrix (min eigenvalue {lmin:e})"
        )));
    }
    Ok((
        spectral_map(&eig, f64::sqrt),
        spectral_map(&eig, |l| 1.0 / l.sqrt()),
    ))
}

pub fn sym_inv_sqrt(m: &Mat) -> Result<Mat> {
    Ok(sym_sqrt_and_inv_sqrt(m)?.1)
}

/// Upper Cholesky factor `U` with `U'U = M` and positive diagonal.
pub fn chol_upper(m: &Mat) -> Result<Mat> {
    check_square(m)?;
    let n = m.nrows();
    let mut u = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= u[(k, j)] * u[(k, j)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Singular { pivot: j, value: d });
        }
        let djj = d.sqrt();
        u[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(j, i)];
            for k in 0..j {
                s -= u[(k, j)] * u[(k, i)];
            }
            u[(j, i)] = s / djj;
        }
    }
    Ok(u)
}

pub fn log_det_pd(m: &Mat) -> Result<f64> {
    let u = chol_upper(m)?;
    Ok(2.0 * u.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a strictly PD matrix via its Cholesky factor.
pub fn inv_pd(m: &Mat) -> Result<Mat> {
    let u = chol_upper(m)?;
    let n = u.nrows();
    let uinv = u
        .solve_upper_triangular(&Mat::identity(n, n))
        .ok_or(Error::Singular { pivot: 0, value: 0.0 })?;
    Ok(symmetrize(&(&uinv * uinv.transpose())))
}

/// Clamps eigenvalues below `floor` up to `floor`. Returns the input unchanged
/// (symmetrized) when it is already PD with minimum eigenvalue at least `floor`.
pub fn nearest_pd(m: &Mat, floor: f64) -> Mat {
    let eig = sym_eigen(m);
    if eig.eigenvalues.min() >= floor {
        return symmetrize(m);
    }
    spectral_map(&eig, |l| l.max(floor))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::dim(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

/// Lower triangle stacked column by column.
pub fn vech(m: &Mat) -> Vector {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in j..n {
            out.push(m[(i, j)]);
        }
    }
    Vector::from_vec(out)
}

pub fn unvech(v: &[f64]) -> Result<Mat> {
    let len = v.len();
    let p = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if p * (p + 1) / 2 != len {
        return Err(Error::dim(format!("length {len} is not triangular")));
    }
    let mut m = Mat::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Duplication matrix `D_p` with `D_p vech(M) = vec(M)` for symmetric `M`.
pub fn duplication(p: usize) -> Mat {
    let q = p * (p + 1) / 2;
    let mut d = Mat::zeros(p * p, q);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            d[(j * p + i, k)] = 1.0;
            d[(i * p + j, k)] = 1.0;
            k += 1;
        }
    }
    d
}

/// `‖A − B‖_F`.
pub fn frobenius(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "frobenius: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a - b).norm())
}

/// `‖AB − BA‖_F`.
pub fn commutator_norm(a: &Mat, b: &Mat) -> f64 {
    (a * b - b * a).norm()
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Dense CSV block: one row per line, comma-separated, no header.
pub fn parse_matrix_csv(text: &str) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected {} entries, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty matrix".into(),
        });
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn format_matrix_csv(m: &Mat) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_f64(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}
