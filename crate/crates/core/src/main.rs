use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cascade_koopman::cascade::{CascadeSystem, StateJson};
use cascade_koopman::conjugacy::Conjugacy;
use cascade_koopman::experiments::{
    self, eigs, exit_code, gnuplot_script, read_conjugacy, read_state, repro_paper, repro_trials,
    sample_states, seeded_initial_state, simulate, unix_now, verify, write_json, Check, ExperimentConfig,
    RunManifest, TolProfile, RESIDUAL_SAMPLES,
};
use cascade_koopman::orbit::DEFAULT_HORIZON;
use cascade_koopman::perturbation::compute_perturbation;
use cascade_koopman::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cascade-koopman", version, about = "Koopman analysis of linear cascades")]
struct Cli {
    #[arg(long, global = true, default_value_t = experiments::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Default)]
    tol_profile: Profile,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Profile {
    Strict,
    Default,
}

impl From<Profile> for TolProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Strict => TolProfile::Strict,
            Profile::Default => TolProfile::Default,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CheckArg {
    Theorem1,
    Corollary1,
    Theorem2,
    Corollary2,
    Theorem3,
    Theorem4,
}

impl From<CheckArg> for Check {
    fn from(c: CheckArg) -> Self {
        match c {
            CheckArg::Theorem1 => Check::Theorem1,
            CheckArg::Corollary1 => Check::Corollary1,
            CheckArg::Theorem2 => Check::Theorem2,
            CheckArg::Corollary2 => Check::Corollary2,
            CheckArg::Theorem3 => Check::Theorem3,
            CheckArg::Theorem4 => Check::Theorem4,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = experiments::DEFAULT_LAYERS)]
    layers: usize,
    #[arg(long, default_value_t = experiments::DEFAULT_NORM_BASE)]
    norm_base: f64,
    #[arg(long, default_value_t = experiments::DEFAULT_DIM_RANGE[0])]
    dim_min: usize,
    #[arg(long, default_value_t = experiments::DEFAULT_DIM_RANGE[1])]
    dim_max: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random chained cascade and write cascade.json and conditions.json.
    Generate(GenArgs),
    /// Write the per-layer error series of one initial condition as CSV.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Initial condition file; seeded unit vectors otherwise.
        #[arg(long)]
        x0: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long, default_value = "errors.csv")]
        csv: String,
    },
    /// Run theorem checks and write verify.json.
    Verify {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        x0: Option<PathBuf>,
        #[arg(long)]
        conjugacy: Option<PathBuf>,
        /// Defaults to every check the inputs allow.
        #[arg(long, value_enum, value_delimiter = ',')]
        checks: Vec<CheckArg>,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
    },
    /// Eigenfunction inventory, residuals and Laplace averages; writes eigs.json.
    Eigs {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        x0: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        index: Option<usize>,
    },
    /// Seven-layer experiment end to end.
    ReproPaper {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = experiments::REPRO_HORIZON)]
        horizon: usize,
        /// Cubic coefficient of the conjugacy on every layer.
        #[arg(long, default_value_t = experiments::DEFAULT_CUBIC)]
        cubic: f64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
}

enum Outcome {
    Done,
    ChecksFailed(Vec<String>),
}

fn config(cli: &Cli, gen: &GenArgs, horizon: usize) -> ExperimentConfig {
    ExperimentConfig {
        layers: gen.layers,
        norm_base: gen.norm_base,
        dim_range: [gen.dim_min, gen.dim_max],
        seed: cli.seed,
        horizon,
        conjugacy: None,
    }
}

fn initial_state(sys: &CascadeSystem, x0: &Option<PathBuf>, seed: u64) -> Result<cascade_koopman::StateVector> {
    let x = match x0 {
        Some(p) => read_state(p)?,
        None => seeded_initial_state(sys.dims(), seed)?,
    };
    x.check_dims(sys.dims())?;
    Ok(x)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let out = &cli.out_dir;
    std::fs::create_dir_all(out)?;
    let tol = TolProfile::from(cli.tol_profile).tolerances();
    match &cli.command {
        Command::Generate(gen) => {
            let cfg = config(cli, gen, DEFAULT_HORIZON);
            let (sys, report) = experiments::generate(&cfg)?;
            write_json(&out.join("cascade.json"), &sys.to_spec())?;
            write_json(&out.join("conditions.json"), &report)?;
            println!("generated {} layers with dims {:?} (conditions pass: {})", sys.n_layers(), sys.dims(), report.overall);
            Ok(Outcome::Done)
        }
        Command::Simulate { spec, x0, horizon, csv } => {
            let started = unix_now();
            let (sys, report) = CascadeSystem::load(spec)?;
            report.require_pass()?;
            let pd = compute_perturbation(&sys, &report)?;
            let x = initial_state(&sys, x0, cli.seed)?;
            write_json(&out.join("x0.json"), &StateJson::from(&x))?;
            let es = simulate(&sys, &pd, &x, *horizon, &out.join(csv))?;
            std::fs::write(out.join("plot.gp"), gnuplot_script(csv, sys.n_layers()))?;
            let mut manifest = RunManifest::new(
                "simulate",
                serde_json::json!({ "spec": spec, "x0": x0, "horizon": horizon }),
                cli.seed,
                started,
            );
            manifest.checks.insert("bounds_dominate".into(), bounds_dominate(&es));
            manifest.write(out, &[csv.as_str(), "x0.json", "plot.gp"])?;
            println!("wrote {} rows to {}", es.horizon + 1, out.join(csv).display());
            Ok(Outcome::Done)
        }
        Command::Verify { spec, x0, conjugacy, checks, horizon } => {
            let (sys, _) = CascadeSystem::load(spec)?;
            let conj: Option<Conjugacy> = conjugacy.as_ref().map(|p| read_conjugacy(p, &sys)).transpose()?;
            let selected: Vec<Check> = if checks.is_empty() {
                Check::ALL
                    .into_iter()
                    .filter(|c| conj.is_some() || !c.needs_conjugacy())
                    .collect()
            } else {
                checks.iter().map(|&c| Check::from(c)).collect()
            };
            let x = initial_state(&sys, x0, cli.seed)?;
            let report = verify(&sys, &x, &selected, conj.as_ref(), *horizon, tol, cli.seed)?;
            write_json(&out.join("verify.json"), &report)?;
            if report.skipped {
                eprintln!("validation failed; checks skipped");
                return Err(Error::ConditionsNotMet);
            }
            for (name, c) in &report.checks {
                println!("{name:<11} {}  margin {:.3e}", if c.pass { "pass" } else { "FAIL" }, c.margin);
            }
            if report.pass {
                Ok(Outcome::Done)
            } else {
                Ok(Outcome::ChecksFailed(report.failing))
            }
        }
        Command::Eigs { spec, x0, layer, index } => {
            let (sys, report) = CascadeSystem::load(spec)?;
            report.require_pass()?;
            let pd = compute_perturbation(&sys, &report)?;
            let x = initial_state(&sys, x0, cli.seed)?;
            let samples = sample_states(sys.dims(), cli.seed, RESIDUAL_SAMPLES)?;
            let rep = eigs(&sys, &pd, &x, *layer, *index, &samples, tol)?;
            write_json(&out.join("eigs.json"), &rep)?;
            let worst = rep.entries.iter().map(|e| e.residual).fold(0.0, f64::max);
            println!("{} eigenfunctions, worst residual {worst:.3e}", rep.entries.len());
            if rep.pass {
                Ok(Outcome::Done)
            } else {
                Ok(Outcome::ChecksFailed(vec!["corollary2".into()]))
            }
        }
        Command::ReproPaper { gen, horizon, cubic, trials } => {
            let mut cfg = config(cli, gen, *horizon);
            cfg.conjugacy = Some(cascade_koopman::conjugacy::ConjugacyJson::PolynomialDiagonal {
                a: vec![*cubic; gen.layers],
            });
            let outcomes = if *trials <= 1 {
                vec![repro_paper(&cfg, out, cli.tol_profile.into())]
            } else {
                repro_trials(&cfg, out, *trials, cli.tol_profile.into())
            };
            let mut failing = Vec::new();
            for (k, o) in outcomes.into_iter().enumerate() {
                let o = o?;
                let ok = o.verify_pass && o.eigs_pass;
                println!("trial {k}: {} ({})", if ok { "pass" } else { "FAIL" }, o.out_dir.display());
                for name in &o.failing {
                    failing.push(format!("trial {k}: {name}"));
                }
                if !o.eigs_pass {
                    failing.push(format!("trial {k}: eigenfunction residuals"));
                }
            }
            if failing.is_empty() {
                Ok(Outcome::Done)
            } else {
                Ok(Outcome::ChecksFailed(failing))
            }
        }
    }
}

fn bounds_dominate(es: &cascade_koopman::orbit::ErrorSeries) -> bool {
    (1..es.n_layers()).all(|k| {
        (0..=es.horizon).all(|t| es.abs_err[k][t] <= es.bound_a[k][t] + cascade_koopman::orbit::BOUND_SLACK)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed(names)) => {
            eprintln!("failing checks: {}", names.join(", "));
            ExitCode::from(5)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
