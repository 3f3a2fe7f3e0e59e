//! Cascade systems, their state space, and the standing-condition validator.
//!
//! Layers are indexed from 1 in every public interface, matching the usual
//! `x_1, ..., x_n` notation for cascades. A coupling `C_{i,j}` with `j < i`
//! feeds layer `j` into layer `i`.

use std::collections::BTreeMap;
use std::ops::{Add, Sub};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::json::MatrixJson;
use crate::numerics::{
    self, eig, operator_norm, random_unit_vector, uniform_matrix, CMatrix, CVector,
    EigDecomposition, COND_CAP, MAX_RESAMPLE,
};

/// Minimum spectral gap and resonance margin accepted by the validator.
pub const GAP_TOL: f64 = 1e-9;
/// Slack on the `||L_n|| <= 1` test.
pub const NORM_TOL: f64 = 1e-12;

/// Element of `C^{d_1} x ... x C^{d_n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    layers: Vec<CVector>,
}

impl StateVector {
    pub fn new(layers: Vec<CVector>) -> Self {
        StateVector { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        StateVector {
            layers: dims.iter().map(|&d| CVector::zeros(d)).collect(),
        }
    }

    /// Per-layer random complex vectors of unit Euclidean norm.
    pub fn random_unit<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = dims
            .iter()
            .map(|&d| random_unit_vector(d, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(StateVector { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(|x| x.len()).collect()
    }

    pub fn layers(&self) -> &[CVector] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CVector] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<CVector> {
        self.layers
    }

    /// Borrowing projection onto layer `i` (1-based).
    pub fn layer(&self, i: usize) -> Result<&CVector> {
        if i == 0 || i > self.layers.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.layers.len(),
            });
        }
        Ok(&self.layers[i - 1])
    }

    /// Canonical projection onto layer `i`.
    pub fn slice(&self, i: usize) -> Result<CVector> {
        self.layer(i).cloned()
    }

    /// Layers `i..=j`.
    pub fn slice_range(&self, i: usize, j: usize) -> Result<Vec<CVector>> {
        let n = self.layers.len();
        if i == 0 || i > n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if j < i || j > n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        Ok(self.layers[i - 1..j].to_vec())
    }

    pub fn composite_norm(&self) -> f64 {
        numerics::composite_norm(&self.layers)
    }

    pub fn scaled(&self, alpha: Complex64) -> StateVector {
        StateVector {
            layers: self.layers.iter().map(|x| x * alpha).collect(),
        }
    }

    /// Concatenation of all layers.
    pub fn to_flat(&self) -> CVector {
        let total: usize = self.layers.iter().map(|x| x.len()).sum();
        let mut out = CVector::zeros(total);
        let mut offset = 0;
        for x in &self.layers {
            out.rows_mut(offset, x.len()).copy_from(x);
            offset += x.len();
        }
        out
    }

    pub fn from_flat(dims: &[usize], flat: &CVector) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has length {}, expected {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len());
        for &d in dims {
            layers.push(flat.rows(offset, d).into_owned());
            offset += d;
        }
        Ok(StateVector { layers })
    }

    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch(format!(
                "state has layer dims {:?}, system has {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|x| x.iter())
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

fn zip_layers(a: &StateVector, b: &StateVector, f: impl Fn(&CVector, &CVector) -> CVector) -> StateVector {
    assert_eq!(a.dims(), b.dims(), "state dimensions differ");
    StateVector {
        layers: a.layers.iter().zip(&b.layers).map(|(x, y)| f(x, y)).collect(),
    }
}

impl Add for &StateVector {
    type Output = StateVector;

    fn add(self, rhs: &StateVector) -> StateVector {
        zip_layers(self, rhs, |x, y| x + y)
    }
}

impl Sub for &StateVector {
    type Output = StateVector;

    fn sub(self, rhs: &StateVector) -> StateVector {
        zip_layers(self, rhs, |x, y| x - y)
    }
}

/// JSON form of a state: one list of `[re, im]` pairs per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateJson {
    pub layers: Vec<Vec<[f64; 2]>>,
}

impl From<&StateVector> for StateJson {
    fn from(x: &StateVector) -> Self {
        StateJson {
            layers: x
                .layers
                .iter()
                .map(|v| v.iter().map(|z| [z.re, z.im]).collect())
                .collect(),
        }
    }
}

impl From<StateJson> for StateVector {
    fn from(j: StateJson) -> Self {
        StateVector {
            layers: j
                .layers
                .into_iter()
                .map(|v| CVector::from_iterator(v.len(), v.into_iter().map(|[re, im]| Complex64::new(re, im))))
                .collect(),
        }
    }
}

/// A lower block-triangular linear cascade
/// `x_i(t+1) = L_i x_i(t) + sum_{j<i} C_{i,j} x_j(t)`.
#[derive(Debug, Clone)]
pub struct CascadeSystem {
    dims: Vec<usize>,
    layers: Vec<CMatrix>,
    couplings: BTreeMap<(usize, usize), CMatrix>,
    eig: Vec<std::result::Result<EigDecomposition, String>>,
    norms: Vec<f64>,
}

impl CascadeSystem {
    /// General cascade. Coupling keys are 1-based `(i, j)` with `j < i`.
    pub fn new(layers: Vec<CMatrix>, couplings: BTreeMap<(usize, usize), CMatrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("a cascade needs at least one layer".into()));
        }
        let mut dims = Vec::with_capacity(layers.len());
        for (k, l) in layers.iter().enumerate() {
            if !l.is_square() || l.nrows() == 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer {} matrix must be square and nonempty, got {}x{}",
                    k + 1,
                    l.nrows(),
                    l.ncols()
                )));
            }
            if !numerics::is_finite(l) {
                return Err(Error::InvalidSpec(format!("layer {} has non-finite entries", k + 1)));
            }
            dims.push(l.nrows());
        }
        let n = layers.len();
        for (&(i, j), c) in &couplings {
            if !(1 <= j && j < i && i <= n) {
                return Err(Error::InvalidSpec(format!(
                    "coupling ({i},{j}) is not strictly lower block-triangular for {n} layers"
                )));
            }
            if c.shape() != (dims[i - 1], dims[j - 1]) {
                return Err(Error::InvalidSpec(format!(
                    "coupling ({i},{j}) has shape {:?}, expected {:?}",
                    c.shape(),
                    (dims[i - 1], dims[j - 1])
                )));
            }
            if !numerics::is_finite(c) {
                return Err(Error::InvalidSpec(format!("coupling ({i},{j}) has non-finite entries")));
            }
        }
        let eig = layers.iter().map(|l| eig(l).map_err(|e| e.to_string())).collect();
        let norms = layers.iter().map(operator_norm).collect();
        Ok(CascadeSystem {
            dims,
            layers,
            couplings,
            eig,
            norms,
        })
    }

    /// Chained cascade; `couplings[k]` is `C_{k+2,k+1}`.
    pub fn chained(layers: Vec<CMatrix>, couplings: Vec<CMatrix>) -> Result<Self> {
        if couplings.len() + 1 != layers.len() {
            return Err(Error::InvalidSpec(format!(
                "{} layers need {} couplings, got {}",
                layers.len(),
                layers.len().saturating_sub(1),
                couplings.len()
            )));
        }
        let map = couplings
            .into_iter()
            .enumerate()
            .map(|(k, c)| ((k + 2, k + 1), c))
            .collect();
        Self::new(layers, map)
    }

    /// Chained cascade of scalar layers.
    pub fn scalar_chain(layers: &[f64], couplings: &[f64]) -> Result<Self> {
        let one = |v: f64| CMatrix::from_element(1, 1, Complex64::new(v, 0.0));
        Self::chained(
            layers.iter().copied().map(one).collect(),
            couplings.iter().copied().map(one).collect(),
        )
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// `L_i` (1-based).
    pub fn layer_matrix(&self, i: usize) -> Result<&CMatrix> {
        self.check_layer(i)?;
        Ok(&self.layers[i - 1])
    }

    pub fn layer_matrices(&self) -> &[CMatrix] {
        &self.layers
    }

    pub fn coupling(&self, i: usize, j: usize) -> Option<&CMatrix> {
        self.couplings.get(&(i, j))
    }

    pub fn couplings(&self) -> &BTreeMap<(usize, usize), CMatrix> {
        &self.couplings
    }

    /// `||L_i||` (1-based).
    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i - 1]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// True iff every present coupling links adjacent layers.
    pub fn is_chained(&self) -> bool {
        self.couplings.keys().all(|&(i, j)| j + 1 == i)
    }

    /// Cached eigendecomposition of `L_i` (1-based).
    pub fn eig(&self, i: usize) -> Result<&EigDecomposition> {
        self.check_layer(i)?;
        self.eig[i - 1]
            .as_ref()
            .map_err(|msg| Error::Precondition(format!("layer {i} has no usable eigendecomposition: {msg}")))
    }

    pub fn check_layer(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.layers.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.layers.len(),
            });
        }
        Ok(())
    }

    pub fn zero_state(&self) -> StateVector {
        StateVector::zeros(&self.dims)
    }

    /// Same layers with every coupling removed.
    pub fn nominal(&self) -> CascadeSystem {
        CascadeSystem {
            couplings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_spec(&self) -> CascadeSpec {
        let chained = self.is_chained();
        let layers = (1..=self.n_layers())
            .map(|i| {
                let mut spec = LayerSpec {
                    dim: self.dims[i - 1],
                    l: MatrixJson::from(&self.layers[i - 1]),
                    c_prev: None,
                    c: None,
                };
                if chained {
                    spec.c_prev = self.coupling(i, i.wrapping_sub(1)).map(MatrixJson::from);
                } else {
                    let map: BTreeMap<String, MatrixJson> = self
                        .couplings
                        .range((i, 0)..(i + 1, 0))
                        .map(|(&(_, j), c)| (j.to_string(), MatrixJson::from(c)))
                        .collect();
                    if !map.is_empty() {
                        spec.c = Some(map);
                    }
                }
                spec
            })
            .collect();
        CascadeSpec { layers }
    }

    pub fn from_spec(spec: CascadeSpec) -> Result<Self> {
        let n = spec.layers.len();
        let mut layers = Vec::with_capacity(n);
        let mut couplings = BTreeMap::new();
        for (k, ls) in spec.layers.into_iter().enumerate() {
            let i = k + 1;
            let l = CMatrix::try_from(ls.l)?;
            if l.shape() != (ls.dim, ls.dim) {
                return Err(Error::InvalidSpec(format!(
                    "layer {i} declares dim {} but L is {}x{}",
                    ls.dim,
                    l.nrows(),
                    l.ncols()
                )));
            }
            layers.push(l);
            if let Some(c) = ls.c_prev {
                if i == 1 {
                    return Err(Error::InvalidSpec("layer 1 cannot have C_prev".into()));
                }
                couplings.insert((i, i - 1), CMatrix::try_from(c)?);
            }
            for (key, c) in ls.c.into_iter().flatten() {
                let j: usize = key
                    .parse()
                    .map_err(|_| Error::InvalidSpec(format!("layer {i}: bad coupling key {key:?}")))?;
                if couplings.insert((i, j), CMatrix::try_from(c)?).is_some() {
                    return Err(Error::InvalidSpec(format!("duplicate coupling ({i},{j})")));
                }
            }
        }
        Self::new(layers, couplings)
    }

    /// Reads a cascade spec file and validates it.
    pub fn load(path: &Path) -> Result<(Self, ConditionReport)> {
        let text = std::fs::read_to_string(path)?;
        let spec: CascadeSpec = serde_json::from_str(&text)?;
        let sys = Self::from_spec(spec)?;
        let report = validate_conditions(&sys);
        Ok((sys, report))
    }
}

/// On-disk cascade description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub dim: usize,
    #[serde(rename = "L")]
    pub l: MatrixJson,
    #[serde(rename = "C_prev", default, skip_serializing_if = "Option::is_none")]
    pub c_prev: Option<MatrixJson>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<BTreeMap<String, MatrixJson>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub pass: bool,
    pub condition_number: Option<f64>,
    pub min_abs_eigenvalue: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormHierarchy {
    pub norms: Vec<f64>,
    /// Smallest `||L_{i+1}|| - ||L_i||`; absent for a single layer.
    pub min_increment: Option<f64>,
    pub top_norm: f64,
    /// `||L_n||` equals 1 within tolerance. Flagged, not failed.
    pub marginal_top: bool,
    pub pass: bool,
}

/// Outcome of checking invertibility/diagonalizability, disjoint spectra,
/// and the norm hierarchy. Failures are recorded, never raised.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub invertible_diagonalizable: Vec<LayerCheck>,
    pub layers_pass: bool,
    /// `min |lambda_{i,l} - lambda_{j,m}|` over distinct layers.
    pub disjoint_spectra: Option<f64>,
    pub disjoint_pass: bool,
    pub norm_hierarchy: NormHierarchy,
    /// `min |1 - lambda_{j,m} / lambda_{i,l}|` over `i > j`.
    pub resonance_margin: Option<f64>,
    pub resonance_pass: bool,
    pub cond_cap: f64,
    pub gap_tol: f64,
    pub overall: bool,
}

impl ConditionReport {
    pub fn require_pass(&self) -> Result<()> {
        if self.overall {
            Ok(())
        } else {
            Err(Error::ConditionsNotMet)
        }
    }
}

pub fn validate_conditions(sys: &CascadeSystem) -> ConditionReport {
    let n = sys.n_layers();
    let checks: Vec<LayerCheck> = (1..=n)
        .map(|i| match sys.eig(i) {
            Ok(e) => LayerCheck {
                layer: i,
                pass: true,
                condition_number: Some(e.condition_number()),
                min_abs_eigenvalue: e.values().iter().map(|z| z.norm()).reduce(f64::min),
                failure: None,
            },
            Err(err) => LayerCheck {
                layer: i,
                pass: false,
                condition_number: None,
                min_abs_eigenvalue: None,
                failure: Some(err.to_string()),
            },
        })
        .collect();
    let layers_pass = checks.iter().all(|c| c.pass);

    let mut disjoint: Option<f64> = None;
    let mut resonance: Option<f64> = None;
    if layers_pass {
        for i in 1..=n {
            for j in 1..i {
                let li = sys.eig(i).expect("checked").values();
                let lj = sys.eig(j).expect("checked").values();
                for a in li {
                    for b in lj {
                        let gap = (a - b).norm();
                        let res = (Complex64::new(1.0, 0.0) - b / a).norm();
                        disjoint = Some(disjoint.map_or(gap, |d| d.min(gap)));
                        resonance = Some(resonance.map_or(res, |r| r.min(res)));
                    }
                }
            }
        }
    }
    let disjoint_pass = layers_pass && disjoint.map_or(true, |d| d > GAP_TOL);
    let resonance_pass = layers_pass && resonance.map_or(true, |r| r > GAP_TOL);

    let norms = sys.norms().to_vec();
    let min_increment = norms.windows(2).map(|w| w[1] - w[0]).reduce(f64::min);
    let top_norm = *norms.last().expect("nonempty cascade");
    let hierarchy = NormHierarchy {
        min_increment,
        top_norm,
        marginal_top: (top_norm - 1.0).abs() <= NORM_TOL,
        pass: min_increment.map_or(true, |m| m > GAP_TOL) && top_norm <= 1.0 + NORM_TOL,
        norms,
    };

    let overall = layers_pass && disjoint_pass && resonance_pass && hierarchy.pass;
    ConditionReport {
        invertible_diagonalizable: checks,
        layers_pass,
        disjoint_spectra: disjoint,
        disjoint_pass,
        norm_hierarchy: hierarchy,
        resonance_margin: resonance,
        resonance_pass,
        cond_cap: COND_CAP,
        gap_tol: GAP_TOL,
        overall,
    }
}

/// `norm_base^{n+1-i}` for `i = 1..=n`.
pub fn norm_schedule(n: usize, norm_base: f64) -> Vec<f64> {
    (1..=n).map(|i| norm_base.powi((n + 1 - i) as i32)).collect()
}

/// Layer dimensions drawn uniformly from `lo..=hi`.
pub fn random_dims<R: Rng + ?Sized>(n: usize, lo: usize, hi: usize, rng: &mut R) -> Result<Vec<usize>> {
    if lo == 0 || lo > hi {
        return Err(Error::Precondition(format!("invalid dimension range [{lo}, {hi}]")));
    }
    Ok((0..n).map(|_| rng.gen_range(lo..=hi)).collect())
}

/// Random chained cascade with `||L_i|| = norm_schedule[i]` and unscaled
/// uniform `[-1, 1]` couplings, redrawn until the validator passes.
pub fn random_chained_cascade<R: Rng + ?Sized>(
    layer_dims: &[usize],
    norm_schedule: &[f64],
    rng: &mut R,
) -> Result<CascadeSystem> {
    if layer_dims.is_empty() || layer_dims.len() != norm_schedule.len() {
        return Err(Error::Precondition(format!(
            "{} dims but {} norms",
            layer_dims.len(),
            norm_schedule.len()
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Precondition("layer dimensions must be positive".into()));
    }
    if norm_schedule.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Precondition("norm schedule must be positive".into()));
    }
    if norm_schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Precondition("norm schedule must be strictly increasing".into()));
    }
    if *norm_schedule.last().expect("nonempty") > 1.0 {
        return Err(Error::Precondition("largest layer norm must be at most 1".into()));
    }
    for _ in 0..MAX_RESAMPLE {
        let mut layers = Vec::with_capacity(layer_dims.len());
        for (&d, &target) in layer_dims.iter().zip(norm_schedule) {
            layers.push(numerics::random_matrix_with_norm(d, d, target, rng)?);
        }
        let couplings = layer_dims
            .windows(2)
            .map(|w| uniform_matrix(w[1], w[0], rng))
            .collect();
        let sys = CascadeSystem::chained(layers, couplings)?;
        if validate_conditions(&sys).overall {
            return Ok(sys);
        }
    }
    Err(Error::GenerationFailed {
        attempts: MAX_RESAMPLE,
    })
}
