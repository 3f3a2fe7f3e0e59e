//! Acceptance suite with its own harness: prints one line per criterion and
//! exits nonzero if any fails.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade_koopman::cascade::CascadeSystem;
use cascade_koopman::conjugacy::{check_theorem3, check_theorem4, make_polynomial_conjugacy, NonlinearCascade};
use cascade_koopman::experiments::{
    generate, repro_paper, sample_states, seeded_initial_state, ExperimentConfig, TolProfile, DEFAULT_CUBIC,
    RESIDUAL_SAMPLES, RESIDUAL_STEPS,
};
use cascade_koopman::observables::{eigenfunction_residual, laplace_average, perturbed_eigenfunction_value};
use cascade_koopman::orbit::{check_theorem1, compute_error_series, iterate_lin, lin_step, log_slope, terminal_ratio, BOUND_SLACK};
use cascade_koopman::perturbation::{compute_perturbation, geometric_sum_twiddle, ClosedFormSolution, PerturbationData};
use cascade_koopman::{CMatrix, CVector, StateVector};

const SYSTEMS: u64 = 20;
const HORIZON: usize = 200;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, v: &Verdict) {
    println!("criterion {id} {:<28} {}  {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn seeded_systems() -> Vec<(CascadeSystem, PerturbationData, StateVector)> {
    (0..SYSTEMS)
        .map(|seed| {
            let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
            let (sys, rep) = generate(&cfg).unwrap();
            let pd = compute_perturbation(&sys, &rep).unwrap();
            let x0 = seeded_initial_state(sys.dims(), seed).unwrap();
            (sys, pd, x0)
        })
        .collect()
}

fn replica() -> (CascadeSystem, PerturbationData, StateVector) {
    let cfg = ExperimentConfig::default();
    let (sys, rep) = generate(&cfg).unwrap();
    let pd = compute_perturbation(&sys, &rep).unwrap();
    let x0 = seeded_initial_state(sys.dims(), cfg.seed).unwrap();
    (sys, pd, x0)
}

fn scalar(vals: &[f64]) -> StateVector {
    StateVector::new(vals.iter().map(|&v| CVector::from_element(1, Complex64::new(v, 0.0))).collect())
}

fn random_spectrum(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> Vec<Complex64> {
    (0..dim)
        .map(|_| Complex64::from_polar(rng.gen_range(lo..hi), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect()
}

fn twiddle_identity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut triples = 0;
    while triples < 100 {
        let (di, dj) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let li = random_spectrum(&mut rng, di, 0.6, 1.0);
        let lj = random_spectrum(&mut rng, dj, 0.6, 1.0);
        let disjoint = li.iter().all(|a| lj.iter().all(|b| (a - b).norm() > 1e-3));
        if !disjoint {
            continue;
        }
        triples += 1;
        let b = CMatrix::from_fn(di, dj, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let bt = geometric_sum_twiddle(&b, &li, &lj).unwrap();
        let mut partial = CMatrix::zeros(di, dj);
        for t in 1..=50usize {
            let k = (t - 1) as i32;
            partial += CMatrix::from_fn(di, dj, |l, m| b[(l, m)] * lj[m].powi(k) / li[l].powi(k));
            for l in 0..di {
                for m in 0..dj {
                    let rhs = bt[(l, m)] - bt[(l, m)] * lj[m].powi(t as i32) / li[l].powi(t as i32);
                    let err = (partial[(l, m)] - rhs).norm() / partial[(l, m)].norm().max(1.0);
                    worst = worst.max(err);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        pass: worst <= 1e-10 && elapsed < Duration::from_secs(5),
        detail: format!("max entry error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    }
}

fn closed_form(systems: &[(CascadeSystem, PerturbationData, StateVector)]) -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut at = (0, 0, 0);
    for (k, (sys, pd, x0)) in systems.iter().enumerate() {
        let cf = ClosedFormSolution::new(sys, pd).unwrap();
        let orbit = iterate_lin(sys, x0, HORIZON).unwrap();
        for t in 0..=HORIZON {
            let c = cf.at(x0, t).unwrap();
            for (i, (u, v)) in c.layers().iter().zip(orbit.at(t).layers()).enumerate() {
                let rel = (u - v).norm() / v.norm().max(f64::MIN_POSITIVE);
                if rel > worst {
                    worst = rel;
                    at = (k, i + 1, t);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        pass: worst < 1e-8 && elapsed < Duration::from_secs(30),
        detail: format!(
            "max per-layer relative error {worst:.2e} (system {}, layer {}, t {}), {:.2}s",
            at.0,
            at.1,
            at.2,
            elapsed.as_secs_f64()
        ),
    }
}

fn bounds(systems: &[(CascadeSystem, PerturbationData, StateVector)]) -> Verdict {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for (sys, pd, x0) in systems {
        let es = compute_error_series(sys, pd, x0, HORIZON).unwrap();
        for i in 2..=sys.n_layers() {
            for t in 0..=HORIZON {
                let a = es.abs(i)[t] - es.bound_a[i - 1][t];
                let b = es.bound_a[i - 1][t] - es.bound_b_at(i, t);
                worst = worst.max(a).max(b);
                violations += usize::from(!(a <= BOUND_SLACK)) + usize::from(!(b <= BOUND_SLACK));
            }
        }
    }
    Verdict {
        pass: violations == 0,
        detail: format!("{violations} violations, worst excess {worst:.2e}"),
    }
}

fn asymptotic_decay() -> Verdict {
    let (sys, pd, x0) = replica();
    let es = compute_error_series(&sys, &pd, &x0, HORIZON).unwrap();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_slope = f64::NEG_INFINITY;
    for i in 2..=sys.n_layers() {
        worst_ratio = worst_ratio.max(terminal_ratio(es.rel(i)));
        worst_slope = worst_slope.max(log_slope(es.rel(i), 100, 200));
    }
    let t1 = check_theorem1(&es);
    Verdict {
        pass: worst_ratio < 1e-3 && worst_slope < 0.0,
        detail: format!(
            "max terminal/peak {worst_ratio:.2e}, max log slope {worst_slope:.3e}, theorem check {}",
            if t1.pass { "pass" } else { "fail" }
        ),
    }
}

fn residuals(systems: &[(CascadeSystem, PerturbationData, StateVector)]) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, (sys, pd, _)) in systems.iter().enumerate() {
        let samples = sample_states(sys.dims(), k as u64, RESIDUAL_SAMPLES).unwrap();
        for i in 1..=sys.n_layers() {
            for s in 1..=sys.dims()[i - 1] {
                worst = worst.max(eigenfunction_residual(sys, pd, i, s, &samples, RESIDUAL_STEPS).unwrap());
                count += 1;
            }
        }
    }
    Verdict {
        pass: worst < 1e-8,
        detail: format!("{count} eigenfunctions, max residual {worst:.2e}"),
    }
}

fn scalar_example() -> Verdict {
    let sys = CascadeSystem::scalar_chain(&[0.5, 0.9], &[1.0]).unwrap();
    let pd = PerturbationData::for_system(&sys).unwrap();
    let ct = pd.ctilde(2, 1).unwrap()[(0, 0)];
    let d = pd.d(2, 1).unwrap()[(0, 0)];
    let mut worst = (ct - 2.25).norm().max((d - 2.5).norm());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let x = scalar(&[a, b]);
        let p2 = pd.pert_layer(2, &x).unwrap()[0];
        worst = worst.max((p2 - (b + 2.5 * a)).norm());
        let now = perturbed_eigenfunction_value(&sys, &pd, 2, 1, &x).unwrap();
        let next = perturbed_eigenfunction_value(&sys, &pd, 2, 1, &lin_step(&sys, &x).unwrap()).unwrap();
        worst = worst.max((next - 0.9 * now).norm());
    }
    Verdict {
        pass: worst <= 1e-12,
        detail: format!("Ct {:.12}, D {:.12}, max deviation {worst:.2e}", ct.re, d.re),
    }
}

fn laplace() -> Verdict {
    let sys = CascadeSystem::scalar_chain(&[0.5, 0.9], &[1.0]).unwrap();
    let pd = PerturbationData::for_system(&sys).unwrap();
    let x = scalar(&[1.0, 1.0]);
    let target = perturbed_eigenfunction_value(&sys, &pd, 2, 1, &x).unwrap();
    let gap = |n| (laplace_average(&sys, &pd, 2, 1, &x, n).unwrap() - target).norm();
    let (e1000, e2000) = (gap(1000), gap(2000));
    let rel = e1000 / target.norm();
    Verdict {
        pass: rel < 5e-3 && e2000 < e1000,
        detail: format!("relative gap {rel:.2e} at N=1000, {:.2e} at N=2000", e2000 / target.norm()),
    }
}

fn nonlinear() -> Verdict {
    let (sys, pd, x0) = replica();
    let conj = make_polynomial_conjugacy(&sys, &vec![DEFAULT_CUBIC; sys.n_layers()]).unwrap();
    let nl = NonlinearCascade::new(sys.clone(), conj).unwrap();
    let y0 = nl.conj.forward(&x0).unwrap();
    let t3 = check_theorem3(&nl, &pd, &y0, HORIZON).unwrap();
    let mut gap: f64 = 0.0;
    for i in 1..=sys.n_layers() {
        for s in 1..=sys.dims()[i - 1] {
            gap = gap.max(check_theorem4(&nl, &pd, i, s, &y0, 50).unwrap().max_path_gap);
        }
    }
    Verdict {
        pass: t3.ratio < 1e-3 && gap <= 1e-8,
        detail: format!("e(200)/max e {:.2e}, max path gap {gap:.2e}", t3.ratio),
    }
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig::default();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let csv: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            repro_paper(&cfg, d.path(), TolProfile::Default).unwrap();
            std::fs::read(d.path().join("errors.csv")).unwrap()
        })
        .collect();
    Verdict {
        pass: !csv[0].is_empty() && csv[0] == csv[1],
        detail: format!("{} bytes per run", csv[0].len()),
    }
}

fn main() {
    let systems = seeded_systems();
    let verdicts = [
        ("twiddle identity", twiddle_identity()),
        ("closed form vs iteration", closed_form(&systems)),
        ("error bounds", bounds(&systems)),
        ("asymptotic relative error", asymptotic_decay()),
        ("eigenfunction residuals", residuals(&systems)),
        ("scalar example", scalar_example()),
        ("Laplace average", laplace()),
        ("nonlinear conjugate cascade", nonlinear()),
        ("repro determinism", determinism()),
    ];
    for (k, (name, v)) in verdicts.iter().enumerate() {
        report(k + 1, name, v);
    }
    let failed: Vec<usize> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| !v.pass)
        .map(|(k, _)| k + 1)
        .collect();
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
