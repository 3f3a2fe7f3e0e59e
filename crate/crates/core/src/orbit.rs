//! Orbit iteration and the coupled-versus-nominal error series.

use std::io::Write;

use serde::Serialize;

use crate::cascade::{CascadeSystem, StateVector};
use crate::error::{Error, Result};
use crate::numerics::{operator_norm, CVector};
use crate::perturbation::{apply_pert, PerturbationData};

/// Orbits whose composite norm exceeds this are treated as diverging.
pub const OVERFLOW_NORM: f64 = 1e12;
/// Slack added to every inequality check.
pub const BOUND_SLACK: f64 = 1e-9;
/// Required decay of the relative error across the check window.
pub const DECAY_FACTOR: f64 = 1e-3;
/// Length of the trailing window used by the decay check.
pub const DECAY_WINDOW: usize = 100;
/// Floor applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;
pub const DEFAULT_HORIZON: usize = 100;
/// `rel_err` below this fraction of its peak is treated as rounding noise:
/// further decay inside the window is not resolvable in double precision.
pub const RESOLUTION_RATIO: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SystemKind {
    Lin,
    Nom,
    NonLin,
    NominalNonlinear,
}

/// States at `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct OrbitTrace {
    pub kind: SystemKind,
    states: Vec<StateVector>,
}

impl OrbitTrace {
    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn at(&self, t: usize) -> &StateVector {
        &self.states[t]
    }

    pub fn last(&self) -> &StateVector {
        self.states.last().expect("trace always holds the initial state")
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

/// Iterates an arbitrary step map. The overflow budget is `OVERFLOW_NORM`
/// times the initial norm (at least 1), so far-out starting points such as
/// perturbed nonlinear states are not mistaken for divergence.
pub fn iterate_map<F>(kind: SystemKind, x0: &StateVector, horizon: usize, mut step: F) -> Result<OrbitTrace>
where
    F: FnMut(&StateVector) -> Result<StateVector>,
{
    let budget = OVERFLOW_NORM * x0.composite_norm().max(1.0);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(x0.clone());
    for t in 1..=horizon {
        let next = step(&states[t - 1])?;
        let norm = next.composite_norm();
        if !(norm <= budget) {
            return Err(Error::Overflow { t, norm });
        }
        states.push(next);
    }
    Ok(OrbitTrace { kind, states })
}

fn step(sys: &CascadeSystem, x: &StateVector, coupled: bool) -> StateVector {
    let layers = x.layers();
    let next = sys
        .layer_matrices()
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let mut v: CVector = l * &layers[k];
            if coupled {
                for (&(_, j), c) in sys.couplings().range((k + 1, 0)..(k + 2, 0)) {
                    v += c * &layers[j - 1];
                }
            }
            v
        })
        .collect();
    StateVector::new(next)
}

/// One step of the coupled cascade.
pub fn lin_step(sys: &CascadeSystem, x: &StateVector) -> Result<StateVector> {
    x.check_dims(sys.dims())?;
    Ok(step(sys, x, true))
}

/// One step of the decoupled nominal system.
pub fn nom_step(sys: &CascadeSystem, x: &StateVector) -> Result<StateVector> {
    x.check_dims(sys.dims())?;
    Ok(step(sys, x, false))
}

/// Orbit of the coupled cascade. Works for general lower-triangular couplings.
pub fn iterate_lin(sys: &CascadeSystem, x0: &StateVector, horizon: usize) -> Result<OrbitTrace> {
    x0.check_dims(sys.dims())?;
    iterate_map(SystemKind::Lin, x0, horizon, |x| Ok(step(sys, x, true)))
}

/// Orbit of the nominal system (couplings ignored).
pub fn iterate_nom(sys: &CascadeSystem, x0: &StateVector, horizon: usize) -> Result<OrbitTrace> {
    x0.check_dims(sys.dims())?;
    iterate_map(SystemKind::Nom, x0, horizon, |x| Ok(step(sys, x, false)))
}

/// Per-layer error series; `layer` arguments are 1-based and the inner
/// index is `t`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorSeries {
    pub horizon: usize,
    /// `||L_i||`.
    pub layer_norms: Vec<f64>,
    /// `||Pi_i Lin^t(x) - Pi_i Nom^t(pert(x))||`.
    pub abs_err: Vec<Vec<f64>>,
    /// `abs_err / ||L_i||^t`.
    pub rel_err: Vec<Vec<f64>>,
    /// `sum_{j<i} ||D_{i,j}|| ||L_j^t pert_j(x)||`.
    pub bound_a: Vec<Vec<f64>>,
    /// `sum_{j<i} ||D_{i,j}|| ||pert_j(x)||`.
    pub bound_b: Vec<f64>,
    /// Composite-norm distance between the two orbits.
    pub composite_err: Vec<f64>,
}

impl ErrorSeries {
    pub fn n_layers(&self) -> usize {
        self.layer_norms.len()
    }

    pub fn abs(&self, layer: usize) -> &[f64] {
        &self.abs_err[layer - 1]
    }

    pub fn rel(&self, layer: usize) -> &[f64] {
        &self.rel_err[layer - 1]
    }

    /// `bound_b * ||L_i||^t`.
    pub fn bound_b_at(&self, layer: usize, t: usize) -> f64 {
        self.bound_b[layer - 1] * self.layer_norms[layer - 1].powi(t as i32)
    }

    /// Writes `t,layer,abs_err,rel_err,bound_a,bound_b_times_norm_pow,log_abs_err,log_rel_err`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,layer,abs_err,rel_err,bound_a,bound_b_times_norm_pow,log_abs_err,log_rel_err"
        )?;
        for t in 0..=self.horizon {
            for i in 1..=self.n_layers() {
                let abs = self.abs_err[i - 1][t];
                let rel = self.rel_err[i - 1][t];
                writeln!(
                    w,
                    "{t},{i},{abs:e},{rel:e},{:e},{:e},{:e},{:e}",
                    self.bound_a[i - 1][t],
                    self.bound_b_at(i, t),
                    abs.max(LOG_FLOOR).ln(),
                    rel.max(LOG_FLOOR).ln(),
                )?;
            }
        }
        Ok(())
    }
}

/// Simulates `Lin` from `x0` and `Nom` from `pert(x0)` and records the
/// per-layer errors and both upper bounds.
pub fn compute_error_series(
    sys: &CascadeSystem,
    pd: &PerturbationData,
    x0: &StateVector,
    horizon: usize,
) -> Result<ErrorSeries> {
    let n = sys.n_layers();
    let lin = iterate_lin(sys, x0, horizon)?;
    let nom = iterate_nom(sys, &apply_pert(pd, x0)?, horizon)?;

    let d_norms: Vec<Vec<f64>> = (1..=n)
        .map(|i| (1..i).map(|j| operator_norm(pd.d(i, j).expect("D is complete"))).collect())
        .collect();
    // L_j^t pert_j is the nominal orbit itself; reading it from there keeps
    // bound_a(0) identical to bound_b instead of off by eigenbasis rounding.
    let pert0 = nom.at(0);
    let bound_b: Vec<f64> = (1..=n)
        .map(|i| {
            (1..i)
                .map(|j| d_norms[i - 1][j - 1] * pert0.layers()[j - 1].norm())
                .fold(0.0, |a, b| a + b)
        })
        .collect();

    let mut abs_err = vec![Vec::with_capacity(horizon + 1); n];
    let mut rel_err = vec![Vec::with_capacity(horizon + 1); n];
    let mut bound_a = vec![Vec::with_capacity(horizon + 1); n];
    let mut composite_err = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let term_norms: Vec<f64> = nom.at(t).layers().iter().map(|v| v.norm()).collect();
        let mut total = 0.0;
        for i in 1..=n {
            let e = (&lin.at(t).layers()[i - 1] - &nom.at(t).layers()[i - 1]).norm();
            total += e;
            abs_err[i - 1].push(e);
            rel_err[i - 1].push(e / sys.norm(i).powi(t as i32));
            bound_a[i - 1].push((1..i).map(|j| d_norms[i - 1][j - 1] * term_norms[j - 1]).fold(0.0, |a, b| a + b));
        }
        composite_err.push(total);
    }

    Ok(ErrorSeries {
        horizon,
        layer_norms: sys.norms().to_vec(),
        abs_err,
        rel_err,
        bound_a,
        bound_b,
        composite_err,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerBoundCheck {
    pub layer: usize,
    /// `max_t (abs_err - bound_a)`; nonpositive when the first bound holds.
    pub max_excess_a: f64,
    /// `max_t (bound_a - bound_b ||L_i||^t)`.
    pub max_excess_b: f64,
    pub violations: usize,
    /// `rel_err(T) / rel_err(T0)`, or 0 when both vanish.
    pub window_decay: f64,
    /// `rel_err(T) / max_t rel_err`.
    pub terminal_ratio: f64,
    /// `rel_err(T0)` and `rel_err(T)` are both below `RESOLUTION_RATIO` times
    /// the peak.
    pub window_at_floor: bool,
    pub decay_pass: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Report {
    pub window_start: usize,
    pub decay_factor: f64,
    pub slack: f64,
    pub layers: Vec<LayerBoundCheck>,
    pub pass: bool,
}

/// `value / reference`, treating `0 / 0` as 0.
pub fn safe_ratio(value: f64, reference: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else if reference == 0.0 {
        f64::INFINITY
    } else {
        value / reference
    }
}

/// Terminal value over the running maximum.
pub fn terminal_ratio(series: &[f64]) -> f64 {
    let max = series.iter().copied().fold(0.0, f64::max);
    safe_ratio(*series.last().unwrap_or(&0.0), max)
}

/// Least-squares slope of `ln(max(y, LOG_FLOOR))` against `t` over `from..=to`.
pub fn log_slope(series: &[f64], from: usize, to: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (from..=to.min(series.len() - 1))
        .map(|t| (t as f64, series[t].max(LOG_FLOOR).ln()))
        .collect();
    let m = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let num: f64 = pts.iter().map(|(t, y)| (t - mean_t) * (y - mean_y)).sum();
    let den: f64 = pts.iter().map(|(t, _)| (t - mean_t).powi(2)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Checks both absolute-error bounds at every `t` and the decay of the
/// relative error over the trailing window.
pub fn check_theorem1(es: &ErrorSeries) -> Theorem1Report {
    let horizon = es.horizon;
    let window_start = horizon.saturating_sub(DECAY_WINDOW);
    let layers: Vec<LayerBoundCheck> = (1..=es.n_layers())
        .map(|i| {
            let mut max_a = f64::NEG_INFINITY;
            let mut max_b = f64::NEG_INFINITY;
            let mut violations = 0;
            for t in 0..=horizon {
                let a = es.abs(i)[t] - es.bound_a[i - 1][t];
                let b = es.bound_a[i - 1][t] - es.bound_b_at(i, t);
                max_a = max_a.max(a);
                max_b = max_b.max(b);
                violations += usize::from(!(a <= BOUND_SLACK)) + usize::from(!(b <= BOUND_SLACK));
            }
            let rel = es.rel(i);
            let window_decay = safe_ratio(rel[horizon], rel[window_start]);
            let peak = rel.iter().copied().fold(0.0, f64::max);
            let window_at_floor =
                rel[window_start] <= RESOLUTION_RATIO * peak && rel[horizon] <= RESOLUTION_RATIO * peak;
            let decay_pass = rel[horizon] <= DECAY_FACTOR * rel[window_start] || window_at_floor;
            LayerBoundCheck {
                layer: i,
                max_excess_a: max_a,
                max_excess_b: max_b,
                violations,
                window_decay,
                terminal_ratio: terminal_ratio(rel),
                window_at_floor,
                decay_pass,
                pass: violations == 0 && decay_pass,
            }
        })
        .collect();
    let pass = layers.iter().all(|l| l.pass);
    Theorem1Report {
        window_start,
        decay_factor: DECAY_FACTOR,
        slack: BOUND_SLACK,
        layers,
        pass,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Corollary1Report {
    pub peak: f64,
    pub terminal: f64,
    pub ratio: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Composite distance at the horizon must fall below `threshold` times its
/// maximum over the run.
pub fn check_corollary1(es: &ErrorSeries, threshold: f64) -> Corollary1Report {
    let peak = es.composite_err.iter().copied().fold(0.0, f64::max);
    let terminal = *es.composite_err.last().expect("nonempty");
    let ratio = safe_ratio(terminal, peak);
    Corollary1Report {
        peak,
        terminal,
        ratio,
        threshold,
        pass: ratio < threshold,
    }
}
