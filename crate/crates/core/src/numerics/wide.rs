//! Double-double complex arithmetic for computations that cancel large
//! terms down to a small result.

use nalgebra::{DMatrix, DVector};
use num_complex::{Complex, Complex64};
use twofloat::TwoFloat;

use super::{CMatrix, CVector, EigDecomposition};

/// Correction passes allowed in [`refine_left_eigenpair`].
pub const EIGEN_REFINE_MAX_ITER: usize = 8;

pub type WComplex = Complex<TwoFloat>;
pub type WMatrix = DMatrix<WComplex>;
pub type WVector = DVector<WComplex>;

pub fn widen(z: Complex64) -> WComplex {
    Complex::new(TwoFloat::from(z.re), TwoFloat::from(z.im))
}

pub fn narrow(z: WComplex) -> Complex64 {
    Complex64::new(f64::from(z.re), f64::from(z.im))
}

pub fn widen_matrix(m: &CMatrix) -> WMatrix {
    m.map(widen)
}

pub fn narrow_matrix(m: &WMatrix) -> CMatrix {
    m.map(narrow)
}

pub fn widen_vector(v: &CVector) -> WVector {
    v.map(widen)
}

pub fn narrow_vector(v: &WVector) -> CVector {
    v.map(narrow)
}

/// Largest entry magnitude, rounded to `f64`.
pub fn max_abs(m: &WMatrix) -> f64 {
    m.iter().map(|z| narrow(*z).norm()).fold(0.0, f64::max)
}

/// `m^(2^k)` for `k = 0..count`.
pub fn repeated_squares(m: &WMatrix, count: usize) -> Vec<WMatrix> {
    let mut out = Vec::with_capacity(count);
    let mut cur = m.clone();
    for _ in 0..count {
        let next = &cur * &cur;
        out.push(cur);
        cur = next;
    }
    out
}

/// `m^t v` from the table of [`repeated_squares`], extending it locally
/// when `t` needs more squares than it holds.
pub fn apply_power(squares: &[WMatrix], t: usize, v: &WVector) -> WVector {
    let mut out = v.clone();
    let mut extra: Option<WMatrix> = None;
    let mut bit = 0;
    let mut rest = t;
    while rest > 0 {
        if bit >= squares.len() {
            let base = extra.take().unwrap_or_else(|| squares.last().expect("nonempty table").clone());
            let sq = &base * &base;
            extra = Some(sq);
        }
        if rest & 1 == 1 {
            let m = if bit < squares.len() { &squares[bit] } else { extra.as_ref().expect("extended") };
            out = m * out;
        }
        rest >>= 1;
        bit += 1;
    }
    out
}

/// Row `k` of `V^{-1}` and its eigenvalue, refined in double-double so that
/// `w L = lambda w` holds to working precision for the exact matrix `l`.
/// The component along the starting row is kept fixed.
pub fn refine_left_eigenpair(l: &CMatrix, e: &EigDecomposition, k: usize) -> (WMatrix, WComplex) {
    let lw = widen_matrix(l);
    let mut w = widen_matrix(&e.vectors_inv().rows(k, 1).into_owned());
    let mut lambda = widen(e.values()[k]);
    for _ in 0..EIGEN_REFINE_MAX_ITER {
        let r = &w * &lw - w.map(|z| z * lambda);
        if max_abs(&r) <= 1e-30 * max_abs(&w) {
            break;
        }
        // Expand the residual in the left eigenbasis: r = sum_m c_m u_m.
        let c = narrow_matrix(&r) * e.vectors();
        let lam = narrow(lambda);
        let mut a = CMatrix::zeros(1, e.dim());
        for (m, mu) in e.values().iter().enumerate() {
            if m != k {
                a[(0, m)] = -c[(0, m)] / (mu - lam);
            }
        }
        w += widen_matrix(&(a * e.vectors_inv()));
        lambda += widen(c[(0, k)]);
    }
    (w, lambda)
}
