//! Nonlinear cascades realized by conjugating the linear one.
//!
//! A [`Conjugacy`] is a homeomorphism `tau` of the state space fixing the
//! origin. The nonlinear cascade is `tau o Lin o tau^{-1}`, its nominal part
//! `tau o Nom o tau^{-1}` and its perturbation map `tau o pert o tau^{-1}`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeSystem, StateVector};
use crate::error::{Error, Result};
use crate::observables::{eigenfunction_deviation, principal_eigenfunction, Observable, StateMap};
use crate::orbit::{iterate_map, lin_step, nom_step, safe_ratio, OrbitTrace, SystemKind, DECAY_FACTOR};
use crate::perturbation::{apply_pert, PerturbationData};

pub const DEFAULT_WORKING_RADIUS: f64 = 2.0;
/// Round-trip tolerance `||tau(tau^{-1}(y)) - y|| <= CONJ_TOL (1 + ||y||)`.
pub const CONJ_TOL: f64 = 1e-10;
/// Newton acceptance: residual relative to the target.
pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 100;

pub type StateFn = Arc<dyn Fn(&StateVector) -> Result<StateVector> + Send + Sync>;

#[derive(Clone)]
pub enum ConjugacyKind {
    Identity,
    /// `r -> r + a_i r^3` on the real and imaginary part of each layer-`i`
    /// coordinate.
    PolynomialDiagonal { a: Vec<f64> },
    UserSupplied { name: String, forward: StateFn, inverse: StateFn },
}

impl fmt::Debug for ConjugacyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConjugacyKind::Identity => write!(f, "Identity"),
            ConjugacyKind::PolynomialDiagonal { a } => f.debug_struct("PolynomialDiagonal").field("a", a).finish(),
            ConjugacyKind::UserSupplied { name, .. } => f.debug_struct("UserSupplied").field("name", name).finish(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum InverseMode {
    ClosedForm,
    Newton,
}

/// Serialized form; user-supplied conjugacies have none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ConjugacyJson {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "polynomialDiagonal")]
    PolynomialDiagonal { a: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Conjugacy {
    kind: ConjugacyKind,
    inverse_mode: InverseMode,
    dims: Vec<usize>,
    working_radius: f64,
}

/// Solves `r + a r^3 = y` for `a >= 0`. The root lies between 0 and `y`;
/// Newton steps leaving that bracket are replaced by bisection.
pub fn invert_cubic(a: f64, y: f64) -> Result<f64> {
    if a == 0.0 || y == 0.0 {
        return Ok(y);
    }
    let f = |r: f64| r + a * r * r * r - y;
    let (mut lo, mut hi) = if y > 0.0 { (0.0, y) } else { (y, 0.0) };
    // Real-root estimate for large |y|, otherwise y itself.
    let mut r = if a * y * y > 1.0 { (y / a).cbrt() } else { y };
    r = r.clamp(lo, hi);
    for _ in 0..NEWTON_MAX_ITER {
        let fr = f(r);
        if fr == 0.0 {
            return Ok(r);
        }
        if fr > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        let mut next = r - fr / (1.0 + 3.0 * a * r * r);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - r).abs() <= f64::EPSILON * r.abs() || next == r {
            r = next;
            break;
        }
        r = next;
    }
    if f(r).abs() <= NEWTON_TOL * y.abs() {
        Ok(r)
    } else {
        Err(Error::NewtonDivergence { target: y })
    }
}

fn map_parts(x: &StateVector, a: &[f64], g: impl Fn(f64, f64) -> Result<f64>) -> Result<StateVector> {
    let layers = x
        .layers()
        .iter()
        .zip(a)
        .map(|(v, &ai)| {
            let mut out = v.clone();
            for z in out.iter_mut() {
                *z = Complex64::new(g(ai, z.re)?, g(ai, z.im)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StateVector::new(layers))
}

impl Conjugacy {
    pub fn identity(dims: &[usize]) -> Self {
        Conjugacy {
            kind: ConjugacyKind::Identity,
            inverse_mode: InverseMode::ClosedForm,
            dims: dims.to_vec(),
            working_radius: DEFAULT_WORKING_RADIUS,
        }
    }

    /// Registers caller-provided maps. The pair must be mutually inverse
    /// and fix the origin; [`Conjugacy::round_trip_error`] checks the former.
    pub fn user_supplied(dims: &[usize], name: &str, forward: StateFn, inverse: StateFn) -> Self {
        Conjugacy {
            kind: ConjugacyKind::UserSupplied {
                name: name.to_string(),
                forward,
                inverse,
            },
            inverse_mode: InverseMode::ClosedForm,
            dims: dims.to_vec(),
            working_radius: DEFAULT_WORKING_RADIUS,
        }
    }

    pub fn with_working_radius(mut self, radius: f64) -> Self {
        self.working_radius = radius;
        self
    }

    pub fn kind(&self) -> &ConjugacyKind {
        &self.kind
    }

    pub fn inverse_mode(&self) -> InverseMode {
        self.inverse_mode
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn working_radius(&self) -> f64 {
        self.working_radius
    }

    pub fn in_working_ball(&self, y: &StateVector) -> bool {
        y.composite_norm() <= self.working_radius
    }

    pub fn forward(&self, x: &StateVector) -> Result<StateVector> {
        x.check_dims(&self.dims)?;
        match &self.kind {
            ConjugacyKind::Identity => Ok(x.clone()),
            ConjugacyKind::PolynomialDiagonal { a } => map_parts(x, a, |ai, r| Ok(r + ai * r * r * r)),
            ConjugacyKind::UserSupplied { forward, .. } => forward(x),
        }
    }

    pub fn inverse(&self, y: &StateVector) -> Result<StateVector> {
        y.check_dims(&self.dims)?;
        match &self.kind {
            ConjugacyKind::Identity => Ok(y.clone()),
            ConjugacyKind::PolynomialDiagonal { a } => map_parts(y, a, invert_cubic),
            ConjugacyKind::UserSupplied { inverse, .. } => inverse(y),
        }
    }

    /// Largest `||tau(tau^{-1}(y)) - y|| / (1 + ||y||)` over the samples.
    pub fn round_trip_error(&self, samples: &[StateVector]) -> Result<f64> {
        samples.iter().try_fold(0.0f64, |worst, y| {
            let back = self.forward(&self.inverse(y)?)?;
            Ok(worst.max((&back - y).composite_norm() / (1.0 + y.composite_norm())))
        })
    }

    pub fn to_json(&self) -> Option<ConjugacyJson> {
        match &self.kind {
            ConjugacyKind::Identity => Some(ConjugacyJson::Identity),
            ConjugacyKind::PolynomialDiagonal { a } => Some(ConjugacyJson::PolynomialDiagonal { a: a.clone() }),
            ConjugacyKind::UserSupplied { .. } => None,
        }
    }

    pub fn from_json(json: &ConjugacyJson, sys: &CascadeSystem) -> Result<Self> {
        match json {
            ConjugacyJson::Identity => Ok(Conjugacy::identity(sys.dims())),
            ConjugacyJson::PolynomialDiagonal { a } => make_polynomial_conjugacy(sys, a),
        }
    }
}

/// `tau^{-1}` as a state map, for precomposing observables.
pub struct InverseMap<'a>(pub &'a Conjugacy);

impl StateMap for Conjugacy {
    fn map_state(&self, x: &StateVector) -> Result<StateVector> {
        self.forward(x)
    }
}

impl StateMap for InverseMap<'_> {
    fn map_state(&self, x: &StateVector) -> Result<StateVector> {
        self.0.inverse(x)
    }
}

/// Diagonal cubic conjugacy with one coefficient per layer. All-zero
/// coefficients give the identity.
pub fn make_polynomial_conjugacy(sys: &CascadeSystem, coeffs: &[f64]) -> Result<Conjugacy> {
    if coeffs.len() != sys.n_layers() {
        return Err(Error::DimensionMismatch(format!(
            "{} cubic coefficients for {} layers",
            coeffs.len(),
            sys.n_layers()
        )));
    }
    if let Some(bad) = coeffs.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::Precondition(format!("cubic coefficient {bad} must be finite and nonnegative")));
    }
    if coeffs.iter().all(|&a| a == 0.0) {
        return Ok(Conjugacy::identity(sys.dims()));
    }
    Ok(Conjugacy {
        kind: ConjugacyKind::PolynomialDiagonal { a: coeffs.to_vec() },
        inverse_mode: InverseMode::Newton,
        dims: sys.dims().to_vec(),
        working_radius: DEFAULT_WORKING_RADIUS,
    })
}

#[derive(Debug, Clone)]
pub struct NonlinearCascade {
    pub base: CascadeSystem,
    pub conj: Conjugacy,
}

impl NonlinearCascade {
    pub fn new(base: CascadeSystem, conj: Conjugacy) -> Result<Self> {
        if base.dims() != conj.dims() {
            return Err(Error::DimensionMismatch(format!(
                "conjugacy dims {:?} vs cascade dims {:?}",
                conj.dims(),
                base.dims()
            )));
        }
        Ok(NonlinearCascade { base, conj })
    }

    /// `tau(Lin(tau^{-1}(y)))`.
    pub fn step(&self, y: &StateVector) -> Result<StateVector> {
        self.conj.forward(&lin_step(&self.base, &self.conj.inverse(y)?)?)
    }

    /// `tau(Nom(tau^{-1}(y)))`.
    pub fn nominal_step(&self, y: &StateVector) -> Result<StateVector> {
        self.conj.forward(&nom_step(&self.base, &self.conj.inverse(y)?)?)
    }

    /// `tau(pert(tau^{-1}(y)))`.
    pub fn perturbation(&self, pd: &PerturbationData, y: &StateVector) -> Result<StateVector> {
        self.conj.forward(&apply_pert(pd, &self.conj.inverse(y)?)?)
    }
}

pub fn iterate_nonlin(nl: &NonlinearCascade, y0: &StateVector, horizon: usize) -> Result<OrbitTrace> {
    iterate_map(SystemKind::NonLin, y0, horizon, |y| nl.step(y))
}

pub fn iterate_nominal_nonlin(nl: &NonlinearCascade, y0: &StateVector, horizon: usize) -> Result<OrbitTrace> {
    iterate_map(SystemKind::NominalNonlinear, y0, horizon, |y| nl.nominal_step(y))
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem3Report {
    /// `e(t)` for `t = 0..=T`.
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub terminal_error: f64,
    /// `e(T) / max_t e(t)`.
    pub ratio: f64,
    pub decay_factor: f64,
    pub working_radius: f64,
    pub initial_in_working_ball: bool,
    pub pass: bool,
}

/// Distance between the nonlinear orbit of `y0` and the nominal nonlinear
/// orbit of its nonlinear perturbation.
pub fn check_theorem3(
    nl: &NonlinearCascade,
    pd: &PerturbationData,
    y0: &StateVector,
    horizon: usize,
) -> Result<Theorem3Report> {
    let coupled = iterate_nonlin(nl, y0, horizon)?;
    let nominal = iterate_nominal_nonlin(nl, &nl.perturbation(pd, y0)?, horizon)?;
    let errors: Vec<f64> = coupled
        .states()
        .iter()
        .zip(nominal.states())
        .map(|(a, b)| (a - b).composite_norm())
        .collect();
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let terminal_error = *errors.last().expect("trace holds t = 0");
    let ratio = safe_ratio(terminal_error, max_error);
    Ok(Theorem3Report {
        max_error,
        terminal_error,
        ratio,
        decay_factor: DECAY_FACTOR,
        working_radius: nl.conj.working_radius(),
        initial_in_working_ball: nl.conj.in_working_ball(y0),
        pass: ratio < DECAY_FACTOR,
        errors,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem4Report {
    pub layer: usize,
    pub index: usize,
    /// Scaled quantity along the nonlinear orbit, `t = 0..=T`.
    pub nonlinear_path: Vec<f64>,
    /// Same quantity from the linear orbit of `tau^{-1}(y0)`.
    pub linear_path: Vec<f64>,
    /// `max_t |nonlinear - linear| / max(1, linear)`.
    pub max_path_gap: f64,
    pub path_tol: f64,
    pub ratio: f64,
    pub decay_factor: f64,
    pub initial_in_working_ball: bool,
    pub pass: bool,
}

/// Tolerance on the agreement of the two evaluations in [`check_theorem4`].
pub const PATH_TOL: f64 = 1e-8;

/// `|U_NonLin^t (psi o tau^{-1})(y0) - lambda^t (psi o tau^{-1})(tau pert tau^{-1} y0)| / ||L_i||^t`,
/// evaluated along the nonlinear orbit and, independently, as the linear
/// quantity at `tau^{-1}(y0)`.
pub fn check_theorem4(
    nl: &NonlinearCascade,
    pd: &PerturbationData,
    i: usize,
    s: usize,
    y0: &StateVector,
    horizon: usize,
) -> Result<Theorem4Report> {
    let psi = principal_eigenfunction(&nl.base, i, s)?;
    let lambda = psi.eigenvalue();
    let norm = nl.base.norm(i);

    let orbit = iterate_nonlin(nl, y0, horizon)?;
    let shifted = nl.conj.inverse(&nl.perturbation(pd, y0)?)?;
    let psi_shifted = psi.eval_layer(&shifted.layers()[i - 1])?;

    let x0 = nl.conj.inverse(y0)?;
    let (_, linear_path) = eigenfunction_deviation(&nl.base, pd, &psi, &x0, horizon)?;

    let mut nonlinear_path = Vec::with_capacity(horizon + 1);
    let mut lam_t = Complex64::new(1.0, 0.0);
    let mut norm_t = 1.0;
    for t in 0..=horizon {
        if t > 0 {
            lam_t *= lambda;
            norm_t *= norm;
        }
        let back = nl.conj.inverse(orbit.at(t))?;
        let q = (psi.eval(&back)? - lam_t * psi_shifted).norm();
        nonlinear_path.push(safe_ratio(q, norm_t));
    }
    let max_path_gap = nonlinear_path
        .iter()
        .zip(&linear_path)
        .map(|(a, b)| (a - b).abs() / b.max(1.0))
        .fold(0.0, f64::max);
    let peak = nonlinear_path.iter().copied().fold(0.0, f64::max);
    let ratio = safe_ratio(*nonlinear_path.last().expect("t = 0 present"), peak);
    Ok(Theorem4Report {
        layer: i,
        index: s,
        max_path_gap,
        path_tol: PATH_TOL,
        ratio,
        decay_factor: DECAY_FACTOR,
        initial_in_working_ball: nl.conj.in_working_ball(y0),
        pass: ratio < DECAY_FACTOR && max_path_gap <= PATH_TOL,
        nonlinear_path,
        linear_path,
    })
}
