//! Closed-form perturbation of initial conditions for chained cascades.
//!
//! For a chained cascade satisfying the standing conditions, layer `i` of
//! the coupled orbit is
//!
//! ```text
//! x_i(t) = sum_{j<=i} (-1)^{i-j} D_{i,j} L_j^t pert_j(x_1, ..., x_j)
//! ```
//!
//! with `D_{i,i} = I`, `D_{i,j} = L_i^{-1} V_i Ct_{i,j} V_j^{-1}`, and
//! `Ct_{i,j}` the entrywise geometric-sum transform of
//! `V_i^{-1} C_{i,i-1} D_{i-1,j} V_j`. Every `pert_i` is linear, so it is
//! stored as a row of blocks `P_{i,1}, ..., P_{i,i}` with `P_{i,i} = I`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::Serialize;

use crate::cascade::{validate_conditions, CascadeSystem, ConditionReport, StateVector, GAP_TOL};
use crate::error::{Error, Result};
use crate::numerics::json::MatrixJson;
use crate::numerics::wide::{
    apply_power, max_abs, narrow_matrix, narrow_vector, repeated_squares, widen_matrix, widen_vector, WMatrix, WVector,
};
use crate::numerics::{CMatrix, CVector, EigDecomposition};

/// Refinement passes allowed for each `D_{i,j}`.
pub const REFINE_MAX_ITER: usize = 8;
/// Refinement stops once the Sylvester residual is below this fraction of
/// the solution.
pub const REFINE_TOL: f64 = 1e-30;
/// Squares of each layer matrix kept by [`ClosedFormSolution`]; covers
/// `t < 2^POWER_TABLE`.
const POWER_TABLE: usize = 10;

/// Entrywise `B[l,m] / (1 - lambda_j[m] / lambda_i[l])`.
///
/// This is the matrix `Bt` for which
/// `sum_{k<t} Lambda_i^{-k} B Lambda_j^k = Bt - Lambda_i^{-t} Bt Lambda_j^t`.
pub fn geometric_sum_twiddle(b: &CMatrix, lambda_i: &[Complex64], lambda_j: &[Complex64]) -> Result<CMatrix> {
    if b.shape() != (lambda_i.len(), lambda_j.len()) {
        return Err(Error::DimensionMismatch(format!(
            "B is {:?} but spectra have lengths {} and {}",
            b.shape(),
            lambda_i.len(),
            lambda_j.len()
        )));
    }
    let one = Complex64::new(1.0, 0.0);
    let mut out = CMatrix::zeros(b.nrows(), b.ncols());
    for (l, li) in lambda_i.iter().enumerate() {
        for (m, lj) in lambda_j.iter().enumerate() {
            let denom = one - lj / li;
            let margin = denom.norm();
            if !(margin > GAP_TOL) {
                return Err(Error::ResonantPair { margin });
            }
            out[(l, m)] = b[(l, m)] / denom;
        }
    }
    Ok(out)
}

/// All coupling data of the perturbation map. Keys are 1-based `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationData {
    dims: Vec<usize>,
    d: BTreeMap<(usize, usize), CMatrix>,
    ctilde: BTreeMap<(usize, usize), CMatrix>,
    /// `pert[i-1][j-1] = P_{i,j}`.
    pert: Vec<Vec<CMatrix>>,
    /// Double-double copies; the rounded ones above are for reporting.
    d_wide: BTreeMap<(usize, usize), WMatrix>,
    pert_wide: Vec<Vec<WMatrix>>,
}

impl PerturbationData {
    /// Validates `sys` and computes its perturbation data.
    pub fn for_system(sys: &CascadeSystem) -> Result<Self> {
        compute_perturbation(sys, &validate_conditions(sys))
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// `D_{i,j}` for `j <= i`.
    pub fn d(&self, i: usize, j: usize) -> Option<&CMatrix> {
        self.d.get(&(i, j))
    }

    /// `Ct_{i,j}` for `j < i`.
    pub fn ctilde(&self, i: usize, j: usize) -> Option<&CMatrix> {
        self.ctilde.get(&(i, j))
    }

    /// `P_{i,j}`: the block of `pert_i` acting on `x_j`.
    pub fn pert_block(&self, i: usize, j: usize) -> Option<&CMatrix> {
        self.pert.get(i.checked_sub(1)?)?.get(j.checked_sub(1)?)
    }

    /// `[P_{i,1} ... P_{i,i}]` as one `d_i x (d_1 + ... + d_i)` matrix.
    pub fn pert_row(&self, i: usize) -> CMatrix {
        let blocks = &self.pert[i - 1];
        let width: usize = self.dims[..i].iter().sum();
        let mut out = CMatrix::zeros(self.dims[i - 1], width);
        let mut offset = 0;
        for b in blocks {
            out.columns_mut(offset, b.ncols()).copy_from(b);
            offset += b.ncols();
        }
        out
    }

    /// `pert_i(x_1, ..., x_i)`.
    pub fn pert_layer(&self, i: usize, x: &StateVector) -> Result<CVector> {
        x.check_dims(&self.dims)?;
        Ok(narrow_vector(&self.pert_layer_wide(i, x)))
    }

    fn pert_layer_wide(&self, i: usize, x: &StateVector) -> WVector {
        let mut acc = WVector::zeros(self.dims[i - 1]);
        for (j, block) in self.pert_wide[i - 1].iter().enumerate() {
            acc += block * widen_vector(&x.layers()[j]);
        }
        acc
    }

    /// Double-double `P_{i,j}`.
    pub(crate) fn pert_block_wide(&self, i: usize, j: usize) -> &WMatrix {
        &self.pert_wide[i - 1][j - 1]
    }

    fn d_wide(&self, i: usize, j: usize) -> &WMatrix {
        &self.d_wide[&(i, j)]
    }

    /// Block lower-triangular matrix of the whole map.
    pub fn assembled(&self) -> CMatrix {
        let total: usize = self.dims.iter().sum();
        let mut out = CMatrix::zeros(total, total);
        let mut row = 0;
        for (i, blocks) in self.pert.iter().enumerate() {
            let mut col = 0;
            for b in blocks {
                out.view_mut((row, col), b.shape()).copy_from(b);
                col += b.ncols();
            }
            row += self.dims[i];
        }
        out
    }

    /// Solves `pert(x) = y` by block forward substitution.
    pub fn apply_inverse(&self, y: &StateVector) -> Result<StateVector> {
        y.check_dims(&self.dims)?;
        let mut xs: Vec<WVector> = Vec::with_capacity(self.dims.len());
        for (i, blocks) in self.pert_wide.iter().enumerate() {
            let mut xi = widen_vector(&y.layers()[i]);
            for (j, b) in blocks.iter().enumerate().take(i) {
                xi -= b * &xs[j];
            }
            xs.push(xi);
        }
        Ok(StateVector::new(xs.iter().map(narrow_vector).collect()))
    }

    pub fn to_json(&self) -> PerturbationJson {
        let key = |&(i, j): &(usize, usize)| format!("{i},{j}");
        PerturbationJson {
            d: self.d.iter().map(|(k, m)| (key(k), MatrixJson::from(m))).collect(),
            ctilde: self.ctilde.iter().map(|(k, m)| (key(k), MatrixJson::from(m))).collect(),
            pert: (1..=self.n_layers()).map(|i| MatrixJson::from(&self.pert_row(i))).collect(),
        }
    }
}

/// Export form: `{"D":{"i,j":..},"Ctilde":{"i,j":..},"pert":[..]}`.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationJson {
    #[serde(rename = "D")]
    pub d: BTreeMap<String, MatrixJson>,
    #[serde(rename = "Ctilde")]
    pub ctilde: BTreeMap<String, MatrixJson>,
    pub pert: Vec<MatrixJson>,
}

/// Computes `Ct_{i,j}`, `D_{i,j}` and the blocks of `pert_i`, row by row.
pub fn compute_perturbation(sys: &CascadeSystem, report: &ConditionReport) -> Result<PerturbationData> {
    if !sys.is_chained() {
        return Err(Error::NotChained);
    }
    report.require_pass()?;
    compute_perturbation_unchecked(sys)
}

/// Same recursion without consulting the condition report. Resonance and
/// missing eigendecompositions are still errors; a broken norm hierarchy is
/// not. Used to study what happens outside the standing conditions.
pub fn compute_perturbation_unchecked(sys: &CascadeSystem) -> Result<PerturbationData> {
    if !sys.is_chained() {
        return Err(Error::NotChained);
    }
    let n = sys.n_layers();
    let dims = sys.dims().to_vec();
    let mut d_wide: BTreeMap<(usize, usize), WMatrix> = BTreeMap::new();
    let mut ctilde = BTreeMap::new();
    let mut pert_wide: Vec<Vec<WMatrix>> = Vec::with_capacity(n);

    for i in 1..=n {
        d_wide.insert((i, i), WMatrix::identity(dims[i - 1], dims[i - 1]));
        let ei = sys.eig(i)?;
        let mut row: Vec<WMatrix> = Vec::with_capacity(i);

        if i > 1 {
            let coupling = match sys.coupling(i, i - 1) {
                Some(c) => widen_matrix(c),
                None => WMatrix::zeros(dims[i - 1], dims[i - 2]),
            };
            let li = widen_matrix(sys.layer_matrix(i)?);
            for j in 1..i {
                let ej = sys.eig(j)?;
                let rhs = &coupling * &d_wide[&(i - 1, j)];
                let (ct, dij) = solve_sylvester(ei, ej, &li, &widen_matrix(sys.layer_matrix(j)?), &rhs)?;
                ctilde.insert((i, j), ct);
                d_wide.insert((i, j), dij);
            }
            // P_{i,j} = sum_{k=j}^{i-1} (-1)^{i-1-k} D_{i,k} P_{k,j}
            for j in 1..i {
                let mut acc = WMatrix::zeros(dims[i - 1], dims[j - 1]);
                for k in j..i {
                    let term = &d_wide[&(i, k)] * &pert_wide[k - 1][j - 1];
                    if (i - 1 - k) % 2 == 0 {
                        acc += term;
                    } else {
                        acc -= term;
                    }
                }
                row.push(acc);
            }
        }
        row.push(WMatrix::identity(dims[i - 1], dims[i - 1]));
        pert_wide.push(row);
    }

    let d: BTreeMap<(usize, usize), CMatrix> = d_wide.iter().map(|(k, m)| (*k, narrow_matrix(m))).collect();
    let pert: Vec<Vec<CMatrix>> = pert_wide.iter().map(|r| r.iter().map(narrow_matrix).collect()).collect();
    let finite = d.values().chain(ctilde.values()).chain(pert.iter().flatten()).all(crate::numerics::is_finite);
    if !finite {
        return Err(Error::Precondition("perturbation data is not finite".into()));
    }

    Ok(PerturbationData { dims, d, ctilde, pert, d_wide, pert_wide })
}

/// Eigenbasis solution of `L_i X - X L_j = rhs` in double precision;
/// returns the transformed coefficients and `X`.
fn sylvester_f64(ei: &EigDecomposition, ej: &EigDecomposition, rhs: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    // V_i Lambda_i^{-1}
    let mut vi_lambda_inv = ei.vectors().clone();
    for (k, lam) in ei.values().iter().enumerate() {
        let s = lam.inv();
        vi_lambda_inv.column_mut(k).iter_mut().for_each(|z| *z *= s);
    }
    let b = ei.vectors_inv() * rhs * ej.vectors();
    let ct = geometric_sum_twiddle(&b, ei.values(), ej.values())?;
    let x = &vi_lambda_inv * &ct * ej.vectors_inv();
    Ok((ct, x))
}

/// Solves the Sylvester equation for `D_{i,j}` and refines the solution in
/// double-double arithmetic against the exact layer matrices.
fn solve_sylvester(
    ei: &EigDecomposition,
    ej: &EigDecomposition,
    li: &WMatrix,
    lj: &WMatrix,
    rhs: &WMatrix,
) -> Result<(CMatrix, WMatrix)> {
    let (ct, x0) = sylvester_f64(ei, ej, &narrow_matrix(rhs))?;
    let mut x = widen_matrix(&x0);
    for _ in 0..REFINE_MAX_ITER {
        let residual = rhs - (li * &x - &x * lj);
        if max_abs(&residual) <= REFINE_TOL * max_abs(&x) {
            break;
        }
        let (_, dx) = sylvester_f64(ei, ej, &narrow_matrix(&residual))?;
        x += widen_matrix(&dx);
    }
    Ok((ct, x))
}

/// Applies the full perturbation map.
pub fn apply_pert(pd: &PerturbationData, x: &StateVector) -> Result<StateVector> {
    x.check_dims(pd.dims())?;
    let layers = (1..=pd.n_layers())
        .map(|i| pd.pert_layer(i, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(StateVector::new(layers))
}

/// Closed-form solution of a chained cascade.
///
/// The sum cancels terms far larger than the state, so it is evaluated in
/// double-double arithmetic and rounded once at the end.
#[derive(Debug, Clone)]
pub struct ClosedFormSolution<'a> {
    sys: &'a CascadeSystem,
    pd: &'a PerturbationData,
    /// `squares[j-1][k] = L_j^(2^k)`.
    squares: Vec<Vec<WMatrix>>,
}

impl<'a> ClosedFormSolution<'a> {
    pub fn new(sys: &'a CascadeSystem, pd: &'a PerturbationData) -> Result<Self> {
        if sys.dims() != pd.dims() {
            return Err(Error::DimensionMismatch("system and perturbation data disagree".into()));
        }
        let squares = sys
            .layer_matrices()
            .iter()
            .map(|l| repeated_squares(&widen_matrix(l), POWER_TABLE))
            .collect();
        Ok(ClosedFormSolution { sys, pd, squares })
    }

    pub fn system(&self) -> &'a CascadeSystem {
        self.sys
    }

    pub fn perturbation(&self) -> &'a PerturbationData {
        self.pd
    }

    fn nominal_terms_wide(&self, x: &StateVector, t: usize) -> Result<Vec<WVector>> {
        x.check_dims(self.pd.dims())?;
        Ok((1..=self.pd.n_layers())
            .map(|j| apply_power(&self.squares[j - 1], t, &self.pd.pert_layer_wide(j, x)))
            .collect())
    }

    /// `L_j^t pert_j(x)` for every layer `j`; layer `j` of the nominal orbit
    /// started at `pert(x)`.
    pub fn nominal_terms(&self, x: &StateVector, t: usize) -> Result<StateVector> {
        let terms = self.nominal_terms_wide(x, t)?;
        Ok(StateVector::new(terms.iter().map(narrow_vector).collect()))
    }

    /// Layer `i` equals `sum_{j<=i} (-1)^{i-j} D_{i,j} L_j^t pert_j(x)`.
    pub fn at(&self, x: &StateVector, t: usize) -> Result<StateVector> {
        let terms = self.nominal_terms_wide(x, t)?;
        let n = self.pd.n_layers();
        let layers = (1..=n)
            .map(|i| {
                let mut acc = WVector::zeros(self.pd.dims()[i - 1]);
                for j in 1..=i {
                    let term = self.pd.d_wide(i, j) * &terms[j - 1];
                    if (i - j) % 2 == 0 {
                        acc += term;
                    } else {
                        acc -= term;
                    }
                }
                narrow_vector(&acc)
            })
            .collect();
        Ok(StateVector::new(layers))
    }
}

/// Convenience wrapper over [`ClosedFormSolution::at`].
pub fn closed_form_at(cf: &ClosedFormSolution<'_>, x: &StateVector, t: usize) -> Result<StateVector> {
    cf.at(x, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{norm_schedule, random_chained_cascade, random_dims};
    use crate::numerics::uniform_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    fn scalar_state(vals: &[f64]) -> StateVector {
        StateVector::new(vals.iter().map(|&v| CVector::from_element(1, c(v))).collect())
    }

    /// Direct iteration of the chained recursion, independent of the
    /// library's orbit module.
    fn iterate(sys: &CascadeSystem, x: &StateVector, t: usize) -> StateVector {
        let mut cur = x.layers().to_vec();
        for _ in 0..t {
            let next: Vec<CVector> = (1..=sys.n_layers())
                .map(|i| {
                    let mut v = sys.layer_matrix(i).unwrap() * &cur[i - 1];
                    if let Some(cp) = sys.coupling(i, i.wrapping_sub(1)) {
                        v += cp * &cur[i - 2];
                    }
                    v
                })
                .collect();
            cur = next;
        }
        StateVector::new(cur)
    }

    #[test]
    fn twiddle_of_zero_is_zero() {
        let b = CMatrix::zeros(2, 3);
        let out = geometric_sum_twiddle(&b, &[c(0.9), c(0.3)], &[c(0.5), c(0.2), c(0.1)]).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn twiddle_scalar_matches_finite_sums() {
        let b = CMatrix::from_element(1, 1, c(1.0));
        let bt = geometric_sum_twiddle(&b, &[c(0.9)], &[c(0.5)]).unwrap();
        assert!((bt[(0, 0)] - c(2.25)).norm() < 1e-15);
        // Oracle: the finite geometric sum itself.
        for t in 1..=20 {
            let direct: Complex64 = (0..t).map(|k| c(0.9f64.powi(-k) * 0.5f64.powi(k))).sum();
            let closed = bt[(0, 0)] - bt[(0, 0)] * c((0.5f64 / 0.9).powi(t));
            assert!((direct - closed).norm() < 1e-12);
        }
    }

    #[test]
    fn twiddle_detects_resonance() {
        let b = CMatrix::from_element(1, 1, c(1.0));
        assert!(matches!(
            geometric_sum_twiddle(&b, &[c(0.7)], &[c(0.7)]),
            Err(Error::ResonantPair { .. })
        ));
    }

    #[test]
    fn single_layer_is_identity() {
        let sys = CascadeSystem::scalar_chain(&[0.7], &[]).unwrap();
        let pd = PerturbationData::for_system(&sys).unwrap();
        assert_eq!(pd.pert_block(1, 1).unwrap(), &CMatrix::identity(1, 1));
        assert_eq!(pd.d(1, 1).unwrap(), &CMatrix::identity(1, 1));
        assert!(pd.ctilde(1, 1).is_none());
    }

    #[test]
    fn decoupled_system_has_trivial_pert() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_chained_cascade(&[2, 3, 2], &[0.5, 0.7, 0.9], &mut rng).unwrap();
        let zeros: Vec<CMatrix> = vec![CMatrix::zeros(3, 2), CMatrix::zeros(2, 3)];
        let sys = CascadeSystem::chained(base.layer_matrices().to_vec(), zeros).unwrap();
        let pd = PerturbationData::for_system(&sys).unwrap();
        for i in 2..=3 {
            for j in 1..i {
                assert_eq!(pd.ctilde(i, j).unwrap().norm(), 0.0);
                assert_eq!(pd.d(i, j).unwrap().norm(), 0.0);
                assert_eq!(pd.pert_block(i, j).unwrap().norm(), 0.0);
            }
        }
        let x = StateVector::random_unit(sys.dims(), &mut rng).unwrap();
        assert_eq!(apply_pert(&pd, &x).unwrap(), x);
    }

    #[test]
    fn scalar_example_values() {
        let sys = CascadeSystem::scalar_chain(&[0.5, 0.9], &[1.0]).unwrap();
        let pd = PerturbationData::for_system(&sys).unwrap();
        assert!((pd.ctilde(2, 1).unwrap()[(0, 0)] - c(2.25)).norm() < 1e-12);
        assert!((pd.d(2, 1).unwrap()[(0, 0)] - c(2.5)).norm() < 1e-12);
        assert!((pd.pert_block(2, 1).unwrap()[(0, 0)] - c(2.5)).norm() < 1e-12);
        let p = apply_pert(&pd, &scalar_state(&[1.0, 1.0])).unwrap();
        assert!((p.layers()[0][0] - c(1.0)).norm() < 1e-15);
        assert!((p.layers()[1][0] - c(3.5)).norm() < 1e-12);
        // Closed form against the hand recursion x2(1) = 0.9 + 1.
        let cf = ClosedFormSolution::new(&sys, &pd).unwrap();
        let one = cf.at(&scalar_state(&[1.0, 1.0]), 1).unwrap();
        assert!((one.layers()[0][0] - c(0.5)).norm() < 1e-12);
        assert!((one.layers()[1][0] - c(1.9)).norm() < 1e-12);
    }

    #[test]
    fn zero_state_maps_to_zero() {
        let sys = CascadeSystem::scalar_chain(&[0.5, 0.9], &[1.0]).unwrap();
        let pd = PerturbationData::for_system(&sys).unwrap();
        let z = sys.zero_state();
        assert_eq!(apply_pert(&pd, &z).unwrap(), z);
    }

    #[test]
    fn non_chained_is_rejected() {
        let one = |v: f64| CMatrix::from_element(1, 1, c(v));
        let mut couplings = BTreeMap::new();
        couplings.insert((3, 1), one(1.0));
        let sys = CascadeSystem::new(vec![one(0.2), one(0.5), one(0.8)], couplings).unwrap();
        assert!(matches!(PerturbationData::for_system(&sys), Err(Error::NotChained)));
    }

    #[test]
    fn failed_conditions_are_rejected() {
        let sys = CascadeSystem::scalar_chain(&[0.9, 0.5], &[1.0]).unwrap();
        assert!(matches!(PerturbationData::for_system(&sys), Err(Error::ConditionsNotMet)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sys = CascadeSystem::scalar_chain(&[0.5, 0.9], &[1.0]).unwrap();
        let pd = PerturbationData::for_system(&sys).unwrap();
        let bad = StateVector::zeros(&[1, 2]);
        assert!(matches!(apply_pert(&pd, &bad), Err(Error::DimensionMismatch(_))));
    }

    fn random_system(seed: u64) -> (CascadeSystem, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=7);
        let dims = random_dims(n, 1, 6, &mut rng).unwrap();
        let sys = random_chained_cascade(&dims, &norm_schedule(n, 0.9), &mut rng).unwrap();
        (sys, rng)
    }

    #[test]
    fn refined_d_solves_sylvester_to_double_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dims = random_dims(7, 2, 6, &mut rng).unwrap();
        let sys = random_chained_cascade(&dims, &norm_schedule(7, 0.9), &mut rng).unwrap();
        let pd = PerturbationData::for_system(&sys).unwrap();
        for i in 2..=7 {
            let li = widen_matrix(sys.layer_matrix(i).unwrap());
            let c = widen_matrix(sys.coupling(i, i - 1).unwrap());
            for j in 1..i {
                let lj = widen_matrix(sys.layer_matrix(j).unwrap());
                let d = pd.d_wide(i, j);
                let r = &li * d - d * &lj - &c * pd.d_wide(i - 1, j);
                assert!(max_abs(&r) <= 1e-26 * max_abs(d).max(1.0), "({i},{j}): {:e}", max_abs(&r));
            }
        }
    }

    #[test]
    fn closed_form_reproduces_initial_condition() {
        let (sys, mut rng) = random_system(17);
        let pd = PerturbationData::for_system(&sys).unwrap();
        let x = StateVector::random_unit(sys.dims(), &mut rng).unwrap();
        let cf = ClosedFormSolution::new(&sys, &pd).unwrap();
        let at0 = cf.at(&x, 0).unwrap();
        assert!((&at0 - &x).composite_norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn twiddle_identity_on_random_spectra(seed in any::<u64>(), di in 1usize..7, dj in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                let r = rng.gen_range(lo..hi);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Complex64::from_polar(r, a)
            };
            let li: Vec<_> = (0..di).map(|_| draw(&mut rng, 0.6, 0.95)).collect();
            let lj: Vec<_> = (0..dj).map(|_| draw(&mut rng, 0.1, 0.55)).collect();
            let b = uniform_matrix(di, dj, &mut rng);
            let bt = geometric_sum_twiddle(&b, &li, &lj).unwrap();
            for t in 1..=50u32 {
                for l in 0..di {
                    for m in 0..dj {
                        let direct: Complex64 = (0..t).map(|k| li[l].powi(-(k as i32)) * b[(l, m)] * lj[m].powu(k)).sum();
                        let closed = bt[(l, m)] - li[l].powi(-(t as i32)) * bt[(l, m)] * lj[m].powu(t);
                        prop_assert!((direct - closed).norm() <= 1e-10 * (1.0 + direct.norm()));
                    }
                }
            }
        }

        #[test]
        fn closed_form_matches_iteration(seed in any::<u64>()) {
            let (sys, mut rng) = random_system(seed);
            let pd = PerturbationData::for_system(&sys).unwrap();
            let cf = ClosedFormSolution::new(&sys, &pd).unwrap();
            let x = StateVector::random_unit(sys.dims(), &mut rng).unwrap();
            for t in [0usize, 1, 2, 5, 17, 60] {
                let a = cf.at(&x, t).unwrap();
                let b = iterate(&sys, &x, t);
                for (u, v) in a.layers().iter().zip(b.layers()) {
                    prop_assert!((u - v).norm() <= 1e-8 * v.norm().max(f64::MIN_POSITIVE));
                }
            }
        }

        #[test]
        fn pert_is_invertible(seed in any::<u64>()) {
            let (sys, mut rng) = random_system(seed);
            let pd = PerturbationData::for_system(&sys).unwrap();
            let x = StateVector::random_unit(sys.dims(), &mut rng).unwrap();
            let y = apply_pert(&pd, &x).unwrap();
            let back = pd.apply_inverse(&y).unwrap();
            prop_assert!((&back - &x).composite_norm() <= 1e-10 * (1.0 + y.composite_norm()));
            let full = pd.assembled();
            let inv = full.clone().try_inverse();
            prop_assert!(inv.is_some());
            let flat = inv.unwrap() * y.to_flat();
            prop_assert!((flat - x.to_flat()).norm() <= 1e-10 * (1.0 + y.composite_norm()));
        }
    }
}
