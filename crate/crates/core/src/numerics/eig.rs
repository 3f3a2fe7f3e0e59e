use std::cmp::Ordering;

use nalgebra::linalg::{Schur, SVD};
use num_complex::Complex64;

use super::{is_finite, CMatrix, CVector};
use super::{COND_CAP, EIG_RESIDUAL_TOL, INV_RESIDUAL_TOL, SING_TOL};
use crate::error::{Error, Result};

/// Diagonalization `L = V diag(lambda) V^{-1}` with eigenvalues sorted by
/// descending magnitude, then descending real part, then descending
/// imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomposition {
    vectors: CMatrix,
    values: Vec<Complex64>,
    vectors_inv: CMatrix,
    condition_number: f64,
}

impl EigDecomposition {
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Eigenvector columns.
    pub fn vectors(&self) -> &CMatrix {
        &self.vectors
    }

    pub fn vectors_inv(&self) -> &CMatrix {
        &self.vectors_inv
    }

    /// Spectral condition number of the eigenvector matrix.
    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    /// Magnitude of the leading eigenvalue.
    pub fn spectral_radius(&self) -> f64 {
        self.values.first().map_or(0.0, |z| z.norm())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(d) V^{-1}`.
    pub fn with_diagonal(&self, d: impl Fn(Complex64) -> Complex64) -> CMatrix {
        let mut scaled = self.vectors.clone();
        for (k, lambda) in self.values.iter().enumerate() {
            let f = d(*lambda);
            for r in 0..scaled.nrows() {
                scaled[(r, k)] *= f;
            }
        }
        scaled * &self.vectors_inv
    }

    /// `L^t` through the eigenbasis.
    pub fn power(&self, t: usize) -> CMatrix {
        self.with_diagonal(|l| l.powu(t as u32))
    }

    /// `L^{-1}` through the eigenbasis.
    pub fn inverse(&self) -> CMatrix {
        self.with_diagonal(|l| l.inv())
    }

    /// Applies `L^t` to a vector without forming the matrix.
    pub fn apply_power(&self, t: usize, x: &CVector) -> CVector {
        let mut coords = &self.vectors_inv * x;
        for (k, lambda) in self.values.iter().enumerate() {
            coords[k] *= lambda.powu(t as u32);
        }
        &self.vectors * coords
    }

    /// `V diag(lambda) V^{-1}`.
    pub fn reconstruct(&self) -> CMatrix {
        self.with_diagonal(|l| l)
    }
}

fn eigen_order(a: &Complex64, b: &Complex64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then_with(|| b.re.total_cmp(&a.re))
        .then_with(|| b.im.total_cmp(&a.im))
}

/// Eigenvectors of an upper-triangular matrix by back substitution.
fn triangular_eigenvectors(t: &CMatrix) -> CMatrix {
    let n = t.nrows();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let small = f64::EPSILON * scale;
    let mut y = CMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        y[(k, k)] = Complex64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in (j + 1)..=k {
                acc += t[(j, l)] * y[(l, k)];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < small {
                denom = Complex64::new(small, 0.0);
            }
            y[(j, k)] = -acc / denom;
        }
    }
    y
}

fn condition_number(v: &CMatrix) -> f64 {
    let sv = SVD::new(v.clone(), false, false).singular_values;
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Diagonalizes a square complex matrix.
///
/// Rejects singular inputs (some `|lambda| < SING_TOL`) and inputs whose
/// eigenvector matrix has condition number above `COND_CAP`.
pub fn eig(l: &CMatrix) -> Result<EigDecomposition> {
    let (rows, cols) = l.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if !is_finite(l) {
        return Err(Error::InvalidSpec("matrix has non-finite entries".into()));
    }
    let n = rows;
    if n == 0 {
        return Ok(EigDecomposition {
            vectors: CMatrix::zeros(0, 0),
            values: Vec::new(),
            vectors_inv: CMatrix::zeros(0, 0),
            condition_number: 1.0,
        });
    }

    let (q, t) = Schur::new(l.clone()).unpack();
    let raw_values: Vec<Complex64> = (0..n).map(|k| t[(k, k)]).collect();

    if let Some(m) = raw_values.iter().map(|z| z.norm()).reduce(f64::min) {
        if m < SING_TOL {
            return Err(Error::SingularMatrix { magnitude: m });
        }
    }

    let raw_vectors = q * triangular_eigenvectors(&t);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen_order(&raw_values[a], &raw_values[b]));

    let mut vectors = CMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(raw_values[src]);
        let col = raw_vectors.column(src);
        let norm = col.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NotDiagonalizable {
                condition_number: f64::INFINITY,
            });
        }
        // Fix the phase: the first entry of largest magnitude becomes real positive.
        let pivot = col
            .iter()
            .copied()
            .reduce(|a, b| if b.norm() > a.norm() { b } else { a })
            .unwrap_or(Complex64::new(1.0, 0.0));
        let phase = pivot.conj() / pivot.norm();
        for r in 0..n {
            vectors[(r, dst)] = col[r] * phase / norm;
        }
    }

    let cond = condition_number(&vectors);
    if !(cond <= COND_CAP) {
        return Err(Error::NotDiagonalizable {
            condition_number: cond,
        });
    }
    let vectors_inv = vectors
        .clone()
        .try_inverse()
        .ok_or(Error::NotDiagonalizable {
            condition_number: f64::INFINITY,
        })?;

    let identity_err = (&vectors * &vectors_inv - CMatrix::identity(n, n)).norm();
    if identity_err > INV_RESIDUAL_TOL {
        return Err(Error::NotDiagonalizable {
            condition_number: cond,
        });
    }

    let mut lv_minus_vl = l * &vectors;
    for (k, lambda) in values.iter().enumerate() {
        for r in 0..n {
            lv_minus_vl[(r, k)] -= vectors[(r, k)] * lambda;
        }
    }
    let residual = lv_minus_vl.norm();
    let tolerance = EIG_RESIDUAL_TOL * l.norm();
    if residual > tolerance {
        return Err(Error::EigenResidual {
            residual,
            tolerance,
        });
    }

    Ok(EigDecomposition {
        vectors,
        values,
        vectors_inv,
        condition_number: cond,
    })
}
