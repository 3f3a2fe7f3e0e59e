//! Experiment pipeline behind the command-line tool: seeded generation,
//! simulation, verification reports, eigenfunction inventories and the
//! seven-layer reproduction run with its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cascade::{
    norm_schedule, random_chained_cascade, random_dims, validate_conditions, CascadeSystem, ConditionReport,
    StateJson, StateVector,
};
use crate::conjugacy::{check_theorem3, check_theorem4, make_polynomial_conjugacy, Conjugacy, ConjugacyJson, NonlinearCascade};
use crate::error::{Error, Result};
use crate::observables::{
    check_theorem2, deflated_laplace_average, eigenfunction_residual, is_peripheral, laplace_average,
    perturbed_eigenfunction_value, principal_eigenfunction, EigenfunctionJson,
};
use crate::orbit::{check_corollary1, check_theorem1, compute_error_series, ErrorSeries, DECAY_FACTOR};
use crate::perturbation::{compute_perturbation, PerturbationData};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_LAYERS: usize = 7;
pub const DEFAULT_NORM_BASE: f64 = 0.9;
pub const DEFAULT_DIM_RANGE: [usize; 2] = [2, 6];
pub const REPRO_HORIZON: usize = 200;
pub const DEFAULT_CUBIC: f64 = 0.1;
pub const RESIDUAL_SAMPLES: usize = 20;
pub const RESIDUAL_STEPS: usize = 50;
pub const LAPLACE_TERMS: [usize; 3] = [10, 100, 1000];

/// Independent random streams derived from one seed.
const STREAM_SYSTEM: u64 = 0;
const STREAM_INITIAL: u64 = 1;
const STREAM_SAMPLES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TolProfile {
    Strict,
    Default,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerances {
    /// Eigenfunction residual limit.
    pub residual: f64,
    /// Agreement of the two nonlinear evaluations.
    pub path: f64,
}

impl TolProfile {
    pub fn tolerances(self) -> Tolerances {
        match self {
            TolProfile::Default => Tolerances {
                residual: 1e-8,
                path: 1e-8,
            },
            TolProfile::Strict => Tolerances {
                residual: 1e-10,
                path: 1e-10,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub layers: usize,
    pub norm_base: f64,
    pub dim_range: [usize; 2],
    pub seed: u64,
    pub horizon: usize,
    pub conjugacy: Option<ConjugacyJson>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            layers: DEFAULT_LAYERS,
            norm_base: DEFAULT_NORM_BASE,
            dim_range: DEFAULT_DIM_RANGE,
            seed: DEFAULT_SEED,
            horizon: REPRO_HORIZON,
            conjugacy: None,
        }
    }
}

impl ExperimentConfig {
    pub fn schedule(&self) -> Vec<f64> {
        norm_schedule(self.layers, self.norm_base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Precondition("at least one layer is required".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Precondition("horizon must be at least 1".into()));
        }
        let [lo, hi] = self.dim_range;
        if lo == 0 || lo > hi {
            return Err(Error::Precondition(format!("invalid dimension range [{lo}, {hi}]")));
        }
        let sched = self.schedule();
        let increasing = sched.windows(2).all(|w| w[0] < w[1]);
        if !(self.norm_base > 0.0 && increasing && sched[self.layers - 1] <= 1.0) {
            return Err(Error::Precondition(format!(
                "norm base {} does not give an increasing schedule bounded by 1",
                self.norm_base
            )));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random chained cascade following the configured schedule.
pub fn generate(cfg: &ExperimentConfig) -> Result<(CascadeSystem, ConditionReport)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_SYSTEM);
    let dims = random_dims(cfg.layers, cfg.dim_range[0], cfg.dim_range[1], &mut rng)?;
    let sys = random_chained_cascade(&dims, &cfg.schedule(), &mut rng)?;
    let report = validate_conditions(&sys);
    Ok((sys, report))
}

/// Unit-norm complex initial condition on every layer.
pub fn seeded_initial_state(dims: &[usize], seed: u64) -> Result<StateVector> {
    StateVector::random_unit(dims, &mut stream(seed, STREAM_INITIAL))
}

pub fn sample_states(dims: &[usize], seed: u64, count: usize) -> Result<Vec<StateVector>> {
    let mut rng = stream(seed, STREAM_SAMPLES);
    (0..count).map(|_| StateVector::random_unit(dims, &mut rng)).collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_state(path: &Path) -> Result<StateVector> {
    let j: StateJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(StateVector::from(j))
}

pub fn read_conjugacy(path: &Path, sys: &CascadeSystem) -> Result<Conjugacy> {
    let j: ConjugacyJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    Conjugacy::from_json(&j, sys)
}

/// Error series of `x0`, written as CSV.
pub fn simulate(
    sys: &CascadeSystem,
    pd: &PerturbationData,
    x0: &StateVector,
    horizon: usize,
    csv_path: &Path,
) -> Result<ErrorSeries> {
    let es = compute_error_series(sys, pd, x0, horizon)?;
    let mut w = BufWriter::new(fs::File::create(csv_path)?);
    es.write_csv(&mut w)?;
    w.flush()?;
    Ok(es)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Theorem1,
    Corollary1,
    Theorem2,
    Corollary2,
    Theorem3,
    Theorem4,
}

impl Check {
    pub const LINEAR: [Check; 4] = [Check::Theorem1, Check::Corollary1, Check::Theorem2, Check::Corollary2];
    pub const ALL: [Check; 6] = [
        Check::Theorem1,
        Check::Corollary1,
        Check::Theorem2,
        Check::Corollary2,
        Check::Theorem3,
        Check::Theorem4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Theorem1 => "theorem1",
            Check::Corollary1 => "corollary1",
            Check::Theorem2 => "theorem2",
            Check::Corollary2 => "corollary2",
            Check::Theorem3 => "theorem3",
            Check::Theorem4 => "theorem4",
        }
    }

    pub fn needs_conjugacy(self) -> bool {
        matches!(self, Check::Theorem3 | Check::Theorem4)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub pass: bool,
    /// Worst observed value as a fraction of its limit; below 1 passes.
    pub margin: f64,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub validation: ConditionReport,
    pub skipped: bool,
    pub horizon: usize,
    pub tolerances: Tolerances,
    pub checks: BTreeMap<String, CheckOutcome>,
    pub failing: Vec<String>,
    pub pass: bool,
}

impl VerifyReport {
    fn finish(validation: ConditionReport, skipped: bool, horizon: usize, tolerances: Tolerances, checks: BTreeMap<String, CheckOutcome>) -> Self {
        let failing: Vec<String> = checks.iter().filter(|(_, c)| !c.pass).map(|(k, _)| k.clone()).collect();
        let pass = !skipped && validation.overall && failing.is_empty();
        VerifyReport {
            validation,
            skipped,
            horizon,
            tolerances,
            checks,
            failing,
            pass,
        }
    }
}

fn layer_indices(sys: &CascadeSystem, from: usize) -> Vec<(usize, usize)> {
    (from..=sys.n_layers())
        .flat_map(|i| (1..=sys.dims()[i - 1]).map(move |s| (i, s)))
        .collect()
}

fn run_check(
    check: Check,
    sys: &CascadeSystem,
    pd: &PerturbationData,
    x0: &StateVector,
    es: &ErrorSeries,
    conj: Option<&Conjugacy>,
    samples: &[StateVector],
    tol: Tolerances,
) -> Result<CheckOutcome> {
    let horizon = es.horizon;
    let outcome = match check {
        Check::Theorem1 => {
            let rep = check_theorem1(es);
            let margin = rep
                .layers
                .iter()
                .filter(|l| l.layer >= 2)
                .map(|l| if l.violations > 0 { f64::INFINITY } else { l.window_decay / rep.decay_factor })
                .fold(0.0, f64::max);
            CheckOutcome {
                pass: rep.pass,
                margin,
                detail: serde_json::to_value(&rep)?,
            }
        }
        Check::Corollary1 => {
            let rep = check_corollary1(es, DECAY_FACTOR);
            CheckOutcome {
                pass: rep.pass,
                margin: rep.ratio / rep.threshold,
                detail: serde_json::to_value(&rep)?,
            }
        }
        Check::Theorem2 => {
            let mut rows = Vec::new();
            let mut margin: f64 = 0.0;
            let mut pass = true;
            for (i, s) in layer_indices(sys, 2) {
                let rep = check_theorem2(sys, pd, i, s, x0, horizon)?;
                margin = margin.max(rep.ratio / rep.decay_factor);
                pass &= rep.pass;
                rows.push(json!({
                    "layer": i, "index": s, "ratio": rep.ratio,
                    "max_bound_excess": rep.max_bound_excess, "pass": rep.pass,
                }));
            }
            CheckOutcome {
                pass,
                margin,
                detail: Value::Array(rows),
            }
        }
        Check::Corollary2 => {
            let mut rows = Vec::new();
            let mut worst: f64 = 0.0;
            for (i, s) in layer_indices(sys, 1) {
                let r = eigenfunction_residual(sys, pd, i, s, samples, RESIDUAL_STEPS)?;
                worst = worst.max(r);
                rows.push(json!({ "layer": i, "index": s, "residual": r }));
            }
            CheckOutcome {
                pass: worst < tol.residual,
                margin: worst / tol.residual,
                detail: json!({ "samples": samples.len(), "steps": RESIDUAL_STEPS, "entries": rows }),
            }
        }
        Check::Theorem3 | Check::Theorem4 => {
            let conj = conj.ok_or_else(|| Error::InvalidSpec(format!("{} needs a conjugacy", check.name())))?;
            let nl = NonlinearCascade::new(sys.clone(), conj.clone())?;
            if check == Check::Theorem3 {
                let rep = check_theorem3(&nl, pd, x0, horizon)?;
                CheckOutcome {
                    pass: rep.pass,
                    margin: rep.ratio / rep.decay_factor,
                    detail: json!({
                        "max_error": rep.max_error, "terminal_error": rep.terminal_error, "ratio": rep.ratio,
                        "working_radius": rep.working_radius,
                        "initial_in_working_ball": rep.initial_in_working_ball,
                    }),
                }
            } else {
                let mut rows = Vec::new();
                let mut margin: f64 = 0.0;
                let mut pass = true;
                for (i, s) in layer_indices(sys, 2) {
                    let rep = check_theorem4(&nl, pd, i, s, x0, horizon)?;
                    let ok = rep.ratio < rep.decay_factor && rep.max_path_gap <= tol.path;
                    margin = margin.max(rep.ratio / rep.decay_factor);
                    pass &= ok;
                    rows.push(json!({
                        "layer": i, "index": s, "ratio": rep.ratio,
                        "max_path_gap": rep.max_path_gap, "pass": ok,
                    }));
                }
                CheckOutcome {
                    pass,
                    margin,
                    detail: Value::Array(rows),
                }
            }
        }
    };
    Ok(outcome)
}

/// Runs the selected checks. A system failing validation yields a report
/// with every check skipped.
pub fn verify(
    sys: &CascadeSystem,
    x0: &StateVector,
    checks: &[Check],
    conj: Option<&Conjugacy>,
    horizon: usize,
    tol: Tolerances,
    sample_seed: u64,
) -> Result<VerifyReport> {
    let validation = validate_conditions(sys);
    if !validation.overall || !sys.is_chained() {
        return Ok(VerifyReport::finish(validation, true, horizon, tol, BTreeMap::new()));
    }
    let pd = compute_perturbation(sys, &validation)?;
    let es = compute_error_series(sys, &pd, x0, horizon)?;
    let samples = sample_states(sys.dims(), sample_seed, RESIDUAL_SAMPLES)?;
    let mut out = BTreeMap::new();
    for &c in checks {
        out.insert(c.name().to_string(), run_check(c, sys, &pd, x0, &es, conj, &samples, tol)?);
    }
    Ok(VerifyReport::finish(validation, false, horizon, tol, out))
}

#[derive(Debug, Clone, Serialize)]
pub struct AverageRow {
    pub terms: usize,
    pub method: &'static str,
    pub value: [f64; 2],
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EigEntry {
    pub layer: usize,
    pub index: usize,
    pub eigenvalue: [f64; 2],
    pub peripheral: bool,
    pub eigenfunction: EigenfunctionJson,
    pub residual: f64,
    pub residual_pass: bool,
    /// `(psi o pert)(x0)`.
    pub target: [f64; 2],
    pub averages: Vec<AverageRow>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EigsReport {
    pub samples: usize,
    pub steps: usize,
    pub residual_tol: f64,
    pub entries: Vec<EigEntry>,
    pub pass: bool,
}

/// Eigenfunction inventory with Corollary-2 residuals and Laplace-average
/// convergence at `LAPLACE_TERMS`. Non-peripheral eigenvalues fall back to
/// the deflated average.
pub fn eigs(
    sys: &CascadeSystem,
    pd: &PerturbationData,
    x0: &StateVector,
    layer: Option<usize>,
    index: Option<usize>,
    samples: &[StateVector],
    tol: Tolerances,
) -> Result<EigsReport> {
    let mut entries = Vec::new();
    let layers: Vec<usize> = match layer {
        Some(i) => {
            sys.check_layer(i)?;
            vec![i]
        }
        None => (1..=sys.n_layers()).collect(),
    };
    for i in layers {
        let indices: Vec<usize> = match index {
            Some(s) => vec![s],
            None => (1..=sys.dims()[i - 1]).collect(),
        };
        for s in indices {
            let psi = principal_eigenfunction(sys, i, s)?;
            let lambda = psi.eigenvalue();
            let peripheral = is_peripheral(sys, i, lambda);
            let residual = eigenfunction_residual(sys, pd, i, s, samples, RESIDUAL_STEPS)?;
            let target = perturbed_eigenfunction_value(sys, pd, i, s, x0)?;
            let mut note = None;
            let mut averages = Vec::new();
            for n in LAPLACE_TERMS {
                let (value, method) = match laplace_average(sys, pd, i, s, x0, n) {
                    Ok(v) => (v, "plain"),
                    Err(e @ Error::NotPeripheral { .. }) => {
                        note.get_or_insert_with(|| format!("{e}; using deflated average"));
                        (deflated_laplace_average(sys, pd, i, s, x0, n)?, "deflated")
                    }
                    Err(e) => return Err(e),
                };
                let abs_error = (value - target).norm();
                averages.push(AverageRow {
                    terms: n,
                    method,
                    value: [value.re, value.im],
                    abs_error,
                    rel_error: if target.norm() > 0.0 { abs_error / target.norm() } else { abs_error },
                });
            }
            entries.push(EigEntry {
                layer: i,
                index: s,
                eigenvalue: [lambda.re, lambda.im],
                peripheral,
                eigenfunction: psi.to_json(true),
                residual,
                residual_pass: residual < tol.residual,
                target: [target.re, target.im],
                averages,
                note,
            });
        }
    }
    let pass = entries.iter().all(|e| e.residual_pass);
    Ok(EigsReport {
        samples: samples.len(),
        steps: RESIDUAL_STEPS,
        residual_tol: tol.residual,
        entries,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn hash_file(dir: &Path, name: &str) -> Result<FileRecord> {
    let data = fs::read(dir.join(name))?;
    Ok(FileRecord {
        path: name.to_string(),
        bytes: data.len() as u64,
        sha256: hex::encode(Sha256::digest(&data)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub checks: BTreeMap<String, bool>,
    /// Layers whose error rows are identically zero and left out of plots.
    pub excluded_layers: Vec<usize>,
    pub files: Vec<FileRecord>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: u64, started_unix: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed,
            started_unix,
            finished_unix: started_unix,
            checks: BTreeMap::new(),
            excluded_layers: vec![1],
            files: Vec::new(),
        }
    }

    /// Hashes the named files in `dir` and writes `manifest.json` there.
    pub fn write(mut self, dir: &Path, files: &[&str]) -> Result<Self> {
        self.files = files.iter().map(|f| hash_file(dir, f)).collect::<Result<_>>()?;
        self.finished_unix = unix_now();
        write_json(&dir.join("manifest.json"), &self)?;
        Ok(self)
    }
}

/// gnuplot script for the error CSV: log relative and absolute errors per
/// layer from 2 on, with the bound as points.
pub fn gnuplot_script(csv_name: &str, n_layers: usize) -> String {
    format!(
        "# Layer 1 has zero error and is not plotted.\n\
         set datafile separator ','\n\
         set key outside right\n\
         set xlabel 't'\n\
         n = {n_layers}\n\
         set terminal pngcairo size 900,600\n\
         set output 'log_rel_err.png'\n\
         set ylabel 'log relative error'\n\
         plot for [i=2:n] '{csv_name}' skip 1 using 1:($2==i ? $8 : 1/0) with lines title sprintf('layer %d', i)\n\
         set output 'log_abs_err.png'\n\
         set ylabel 'log absolute error'\n\
         plot for [i=2:n] '{csv_name}' skip 1 using 1:($2==i ? $7 : 1/0) with lines title sprintf('layer %d', i), \\\n\
         \x20    for [i=2:n] '{csv_name}' skip 1 using 1:($2==i ? log($5) : 1/0) with points pt 3 notitle\n"
    )
}

pub const REPRO_FILES: [&str; 9] = [
    "cascade.json",
    "conditions.json",
    "perturbation.json",
    "x0.json",
    "conjugacy.json",
    "errors.csv",
    "verify.json",
    "eigs.json",
    "plot.gp",
];

#[derive(Debug, Clone, Serialize)]
pub struct ReproOutcome {
    pub out_dir: PathBuf,
    pub verify_pass: bool,
    pub eigs_pass: bool,
    pub failing: Vec<String>,
    pub manifest: RunManifest,
}

/// One full reproduction run into `out_dir`.
pub fn repro_paper(cfg: &ExperimentConfig, out_dir: &Path, profile: TolProfile) -> Result<ReproOutcome> {
    let started = unix_now();
    let tol = profile.tolerances();
    fs::create_dir_all(out_dir)?;
    let (sys, report) = generate(cfg)?;
    write_json(&out_dir.join("cascade.json"), &sys.to_spec())?;
    write_json(&out_dir.join("conditions.json"), &report)?;
    let pd = compute_perturbation(&sys, &report)?;
    write_json(&out_dir.join("perturbation.json"), &pd.to_json())?;
    let x0 = seeded_initial_state(sys.dims(), cfg.seed)?;
    write_json(&out_dir.join("x0.json"), &StateJson::from(&x0))?;
    let conj = match &cfg.conjugacy {
        Some(j) => Conjugacy::from_json(j, &sys)?,
        None => make_polynomial_conjugacy(&sys, &vec![DEFAULT_CUBIC; sys.n_layers()])?,
    };
    write_json(&out_dir.join("conjugacy.json"), &conj.to_json())?;

    simulate(&sys, &pd, &x0, cfg.horizon, &out_dir.join("errors.csv"))?;
    let vr = verify(&sys, &x0, &Check::ALL, Some(&conj), cfg.horizon, tol, cfg.seed)?;
    write_json(&out_dir.join("verify.json"), &vr)?;
    let samples = sample_states(sys.dims(), cfg.seed, RESIDUAL_SAMPLES)?;
    let er = eigs(&sys, &pd, &x0, None, None, &samples, tol)?;
    write_json(&out_dir.join("eigs.json"), &er)?;
    fs::write(out_dir.join("plot.gp"), gnuplot_script("errors.csv", sys.n_layers()))?;

    let mut manifest = RunManifest::new("repro-paper", serde_json::to_value(cfg)?, cfg.seed, started);
    manifest.checks = vr.checks.iter().map(|(k, c)| (k.clone(), c.pass)).collect();
    manifest.checks.insert("eigenfunction_residuals".into(), er.pass);
    let manifest = manifest.write(out_dir, &REPRO_FILES)?;
    Ok(ReproOutcome {
        out_dir: out_dir.to_path_buf(),
        verify_pass: vr.pass,
        eigs_pass: er.pass,
        failing: vr.failing,
        manifest,
    })
}

/// `trials` independent runs with seeds `seed, seed + 1, ...`, one worker
/// thread and one `trial-NNN` directory each.
pub fn repro_trials(cfg: &ExperimentConfig, out_dir: &Path, trials: usize, profile: TolProfile) -> Vec<Result<ReproOutcome>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..trials)
            .map(|k| {
                let mut trial_cfg = cfg.clone();
                trial_cfg.seed = cfg.seed.wrapping_add(k as u64);
                let dir = out_dir.join(format!("trial-{k:03}"));
                scope.spawn(move || repro_paper(&trial_cfg, &dir, profile))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Precondition("trial worker panicked".into()))))
            .collect()
    })
}

/// Process exit code for an error: 2 generation, 3 validation or input,
/// 4 overflow, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::GenerationFailed { .. } => 2,
        Error::Overflow { .. } => 4,
        Error::ConditionsNotMet
        | Error::NotChained
        | Error::InvalidSpec(_)
        | Error::Json(_)
        | Error::NotSquare { .. }
        | Error::NotDiagonalizable { .. }
        | Error::SingularMatrix { .. }
        | Error::ResonantPair { .. }
        | Error::DimensionMismatch(_) => 3,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbation::compute_perturbation;

    fn small_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            layers: 3,
            dim_range: [1, 3],
            seed,
            horizon: 60,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig {
            norm_base: 1.0,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let one = ExperimentConfig {
            layers: 1,
            norm_base: 1.0,
            ..ExperimentConfig::default()
        };
        assert!(one.validate().is_ok());
        assert!(ExperimentConfig { horizon: 0, ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig { dim_range: [3, 2], ..ExperimentConfig::default() }.validate().is_err());
    }

    #[test]
    fn default_schedule() {
        let s = ExperimentConfig::default().schedule();
        for (k, v) in s.iter().enumerate() {
            assert!((v - 0.9f64.powi(7 - k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, ra) = generate(&small_config(3)).unwrap();
        let (b, _) = generate(&small_config(3)).unwrap();
        assert!(ra.overall);
        assert_eq!(
            serde_json::to_string(&a.to_spec()).unwrap(),
            serde_json::to_string(&b.to_spec()).unwrap()
        );
        let (c, _) = generate(&small_config(4)).unwrap();
        assert_ne!(
            serde_json::to_string(&a.to_spec()).unwrap(),
            serde_json::to_string(&c.to_spec()).unwrap()
        );
    }

    #[test]
    fn single_layer_has_identity_pert() {
        let cfg = ExperimentConfig {
            layers: 1,
            ..small_config(1)
        };
        let (sys, report) = generate(&cfg).unwrap();
        let pd = compute_perturbation(&sys, &report).unwrap();
        let p = pd.assembled();
        assert_eq!(p, crate::numerics::CMatrix::identity(p.nrows(), p.ncols()));
    }

    #[test]
    fn initial_state_is_unit_per_layer() {
        let x = seeded_initial_state(&[2, 3, 4], 5).unwrap();
        for v in x.layers() {
            assert!((v.norm() - 1.0).abs() < 1e-14);
        }
        assert_eq!(x, seeded_initial_state(&[2, 3, 4], 5).unwrap());
    }

    #[test]
    fn verify_small_system() {
        let (sys, _) = generate(&small_config(11)).unwrap();
        let x0 = seeded_initial_state(sys.dims(), 11).unwrap();
        let conj = Conjugacy::identity(sys.dims());
        let rep = verify(&sys, &x0, &Check::ALL, Some(&conj), 150, TolProfile::Default.tolerances(), 11).unwrap();
        assert!(rep.pass, "{:?}", rep.failing);
        // Identity conjugacy reproduces the linear margins.
        assert_eq!(rep.checks["theorem3"].margin, rep.checks["corollary1"].margin);
        assert_eq!(rep.checks["theorem4"].margin, rep.checks["theorem2"].margin);
    }

    #[test]
    fn verify_skips_resonant_system() {
        let sys = CascadeSystem::scalar_chain(&[0.5, 0.5], &[1.0]).unwrap();
        let x0 = seeded_initial_state(sys.dims(), 1).unwrap();
        let rep = verify(&sys, &x0, &Check::LINEAR, None, 50, TolProfile::Default.tolerances(), 1).unwrap();
        assert!(rep.skipped && !rep.pass && rep.checks.is_empty());
    }

    #[test]
    fn nonlinear_checks_need_conjugacy() {
        let (sys, _) = generate(&small_config(2)).unwrap();
        let x0 = seeded_initial_state(sys.dims(), 2).unwrap();
        let err = verify(&sys, &x0, &[Check::Theorem3], None, 50, TolProfile::Default.tolerances(), 2).unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn eigs_on_scalar_example() {
        let sys = CascadeSystem::scalar_chain(&[0.5, 0.9], &[1.0]).unwrap();
        let report = validate_conditions(&sys);
        let pd = compute_perturbation(&sys, &report).unwrap();
        let x0 = StateVector::new(vec![
            crate::numerics::CVector::from_element(1, num_complex::Complex64::new(1.0, 0.0)),
            crate::numerics::CVector::from_element(1, num_complex::Complex64::new(1.0, 0.0)),
        ]);
        let samples = sample_states(sys.dims(), 0, RESIDUAL_SAMPLES).unwrap();
        let rep = eigs(&sys, &pd, &x0, Some(2), None, &samples, TolProfile::Default.tolerances()).unwrap();
        assert_eq!(rep.entries.len(), 1);
        let e = &rep.entries[0];
        assert!(e.peripheral && e.residual < 1e-10);
        assert!((e.target[0] - 3.5).abs() < 1e-12);
        let last = e.averages.last().unwrap();
        assert_eq!((last.terms, last.method), (1000, "plain"));
        assert!(last.rel_error < 5e-3);
    }

    #[test]
    fn manifest_hashes_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "abc").unwrap();
        let m = RunManifest::new("test", Value::Null, 0, 0).write(dir.path(), &["a.txt"]).unwrap();
        assert_eq!(
            m.files[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn plot_script_skips_layer_one() {
        let s = gnuplot_script("errors.csv", 7);
        assert!(s.contains("for [i=2:n]") && s.contains("n = 7"));
    }
}
