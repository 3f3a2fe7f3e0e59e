//! Dense complex linear algebra used throughout the crate.
//!
//! Matrices are `nalgebra` dynamic matrices over `Complex64`. Vector norms
//! are Euclidean and operator norms are the induced spectral norm.

mod eig;
pub mod wide;
pub mod json;

pub use eig::{eig, EigDecomposition};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Relative residual allowed for `L V - V diag(lambda)`.
pub const EIG_RESIDUAL_TOL: f64 = 1e-8;
/// Allowed `||V Vinv - I||_F`.
pub const INV_RESIDUAL_TOL: f64 = 1e-8;
/// Eigenvalues smaller than this in magnitude make a layer singular.
pub const SING_TOL: f64 = 1e-12;
/// Eigenvector condition numbers above this are treated as defective.
pub const COND_CAP: f64 = 1e8;
/// Retry budget for random draws.
pub const MAX_RESAMPLE: usize = 100;

/// Largest singular value of `m`.
pub fn operator_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return 0.0;
    }
    let svd = nalgebra::linalg::SVD::new(m.clone(), false, false);
    svd.singular_values.max()
}

/// Sum of the per-layer Euclidean norms.
pub fn composite_norm<'a, I>(layers: I) -> f64
where
    I: IntoIterator<Item = &'a CVector>,
{
    layers.into_iter().map(|x| x.norm()).sum()
}

/// Matrix with real entries drawn uniformly from `[-1, 1]`.
pub fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    // Row-major draw order so the stream does not depend on storage layout.
    let mut m = CMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = Complex64::new(rng.gen_range(-1.0..=1.0), 0.0);
        }
    }
    m
}

/// Uniform `[-1, 1]` draw rescaled to have spectral norm `target_norm`.
pub fn random_matrix_with_norm<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    target_norm: f64,
    rng: &mut R,
) -> Result<CMatrix> {
    if !(target_norm > 0.0 && target_norm.is_finite()) {
        return Err(Error::Precondition(format!(
            "target norm must be positive and finite, got {target_norm}"
        )));
    }
    for _ in 0..MAX_RESAMPLE {
        let raw = uniform_matrix(rows, cols, rng);
        let norm = operator_norm(&raw);
        if norm > 0.0 {
            return Ok(raw.map(|z| z * (target_norm / norm)));
        }
    }
    Err(Error::DegenerateDraw {
        attempts: MAX_RESAMPLE,
    })
}

/// Random complex vector with unit Euclidean norm.
pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<CVector> {
    for _ in 0..MAX_RESAMPLE {
        let v = CVector::from_fn(dim, |_, _| {
            let re = rng.gen_range(-1.0..=1.0);
            let im = rng.gen_range(-1.0..=1.0);
            Complex64::new(re, im)
        });
        let n = v.norm();
        if n > 0.0 {
            return Ok(v.unscale(n));
        }
    }
    Err(Error::DegenerateDraw {
        attempts: MAX_RESAMPLE,
    })
}

pub(crate) fn is_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}
