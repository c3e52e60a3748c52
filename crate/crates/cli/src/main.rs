use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use chronofit::io::{
    read_json, save_dataset, write_curve_csv, write_hazard_band_csv, write_json, write_summary_csv, BootDoc, DataDir, FitDoc, IoError,
    LoadOptions, ParameterDoc, Schema, TruthDoc,
};
use chronofit::initializer::InitError;
use chronofit::likelihood::LikError;
use chronofit::simulator::{gen_dataset, SimConfig};
use chronofit::spline::{default_spec, spec_with_knot_count, SplineSpec};
use chronofit::study::{bootstrap, fit_dataset, run_mc_study, FitSettings, McConfig, StudyError};
use chronofit::{Dataset, Error};

#[derive(Parser)]
#[command(name = "chronofit", version, about = "Joint longitudinal and interval-censored event-time models")]
struct Cli {
    /// Worker threads (0 = all cores); falls back to CHRONOFIT_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it with its generating truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the sample size of the config.
        #[arg(long)]
        n: Option<usize>,
        /// Override the seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Interior knots used to project the true baseline.
        #[arg(long, default_value = "auto")]
        knots: Knots,
    },
    /// Fit the joint model by Fisher scoring.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "auto")]
        knots: Knots,
        #[command(flatten)]
        quad: QuadArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bootstrap standard errors, confidence intervals and p-values.
    Bootstrap {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long = "B", default_value_t = 50)]
        b: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicated simulation study: bias, SD, ASE, CP and the hazard band.
    McStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "R", default_value_t = 200)]
        r: usize,
        #[arg(long = "B", default_value_t = 50)]
        b: usize,
        #[arg(long, default_value_t = 6)]
        knots: usize,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        quad: QuadArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate the fitted cumulative baseline hazard on a grid.
    HazardCurve {
        /// A fit.json or truth.json document.
        #[arg(long)]
        fit: PathBuf,
        /// `start:end:points`.
        #[arg(long, default_value = "0:10:200")]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory with longitudinal.csv, brackets.csv and optionally schema.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    exclude_first_visit_diagnoses: bool,
    #[arg(long)]
    min_visits: Option<usize>,
    #[arg(long)]
    snap_bracket: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, Error> {
        let opts = LoadOptions {
            exclude_first_visit_diagnoses: self.exclude_first_visit_diagnoses,
            min_visits: self.min_visits,
            snap_bracket: self.snap_bracket,
        };
        Ok(DataDir::new(&self.data).load(&opts)?)
    }
}

#[derive(Args)]
struct QuadArgs {
    #[arg(long, default_value_t = 20)]
    gl_nodes: usize,
    #[arg(long, default_value_t = 20)]
    gh_nodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
}

impl QuadArgs {
    fn settings(&self) -> FitSettings {
        let mut s = FitSettings {
            gl_nodes: self.gl_nodes,
            gh_nodes: self.gh_nodes,
            ..FitSettings::default()
        };
        s.options.rel_tol = self.rel_tol;
        s.options.max_iter = self.max_iter;
        s
    }
}

#[derive(Clone, Copy, Debug)]
enum Knots {
    Auto,
    Count(usize),
}

impl FromStr for Knots {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Knots::Auto);
        }
        s.parse().map(Knots::Count).map_err(|_| format!("expected a knot count or `auto`, got {s:?}"))
    }
}

impl Knots {
    fn spec(self, data: &Dataset) -> Result<SplineSpec<f64>, Error> {
        Ok(match self {
            Knots::Auto => default_spec(data)?,
            Knots::Count(c) => spec_with_knot_count(data, c)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Grid {
    start: f64,
    end: f64,
    points: usize,
}

impl FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || format!("expected start:end:points, got {s:?}");
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].parse().map_err(|_| bad())?;
        let end: f64 = parts[1].parse().map_err(|_| bad())?;
        let points: usize = parts[2].parse().map_err(|_| bad())?;
        if points < 2 || !(end > start) || start < 0.0 {
            return Err(bad());
        }
        Ok(Grid { start, end, points })
    }
}

impl Grid {
    fn values(self) -> Vec<f64> {
        let step = (self.end - self.start) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.start + step * i as f64).collect()
    }
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    NotConverged(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::NotConverged(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

fn is_validation(e: &Error) -> bool {
    match e {
        Error::Io(io) => !matches!(io, IoError::File { .. }),
        Error::Model(_) | Error::Spline(_) | Error::Simulation(_) => true,
        Error::Likelihood(l) => is_validation_lik(l),
        Error::Init(InitError::NoEvents) => true,
        Error::Study(StudyError::TooManyFailures { .. } | StudyError::NotConverged) => false,
        Error::Study(StudyError::TooFewResamples(_) | StudyError::NoReplicates | StudyError::Spline(_) | StudyError::Simulation(_)) => true,
        Error::Study(StudyError::Init(InitError::NoEvents)) => true,
        Error::Study(StudyError::Likelihood(l)) | Error::Study(StudyError::Init(InitError::Likelihood(l))) => is_validation_lik(l),
        _ => false,
    }
}

fn is_validation_lik(e: &LikError) -> bool {
    matches!(
        e,
        LikError::NoPriorMarker { .. } | LikError::UnsupportedReDim(_) | LikError::NodeCount { .. } | LikError::OutsideBracket { .. }
    )
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Study(StudyError::TooManyFailures { .. } | StudyError::NotConverged) => Failure::NotConverged(e.to_string()),
            _ if is_validation(&e) => Failure::Validation(e.into()),
            _ => Failure::Other(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn lib<T, E: Into<Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::from(e.into()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn simulate(config: &Path, out_dir: &Path, n: Option<usize>, seed: Option<u64>, knots: Knots) -> Result<(), Failure> {
    let mut cfg: SimConfig = lib(read_json(config))?;
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sim = lib(gen_dataset(&cfg))?;
    create_dir(out_dir)?;
    let dir = DataDir::new(out_dir);
    let schema = Schema::simulated(sim.dataset.panel_dim);
    lib(save_dataset(&sim.dataset, &schema, &dir.longitudinal(), &dir.brackets()))?;
    lib(write_json(&dir.schema(), &schema))?;
    let spec = lib(knots.spec(&sim.dataset))?;
    let parameters = lib(cfg.truth.parameters(&spec))?;
    let doc = TruthDoc {
        context: FitSettings::default().context(spec),
        parameters,
        subjects: sim.truth,
        config: cfg,
    };
    lib(write_json(&dir.truth(), &doc))?;
    info!(
        "simulated {} subjects ({} events) into {}",
        sim.dataset.len(),
        sim.dataset.event_count(),
        out_dir.display()
    );
    Ok(())
}

fn fit(data: &DataArgs, knots: Knots, quad: &QuadArgs, out: &Path) -> Result<(), Failure> {
    let dataset = data.load().map_err(Failure::from)?;
    let spec = lib(knots.spec(&dataset))?;
    let settings = quad.settings();
    let ctx = settings.context(spec);
    let result = lib(fit_dataset(&dataset, &ctx, &settings.options))?;
    let converged = result.converged;
    let doc = FitDoc {
        context: ctx,
        options: settings.options.clone(),
        parameters: result.params_hat.clone(),
        fit: result,
    };
    lib(write_json(out, &doc))?;
    if !converged {
        return Err(Failure::NotConverged(format!(
            "Fisher scoring stopped without convergence ({:?}); estimates written to {}",
            doc.fit.stop,
            out.display()
        )));
    }
    info!("log-likelihood {:.6} after {} iterations", doc.fit.loglik(), doc.fit.iterations);
    Ok(())
}

fn boot(data: &DataArgs, fit: &Path, b: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let dataset = data.load().map_err(Failure::from)?;
    let doc: FitDoc = lib(read_json(fit))?;
    let result = lib(bootstrap(&dataset, &doc.fit, b, &doc.context, &doc.options, seed))?;
    if !result.dropped.is_empty() {
        warn!("{} of {} resamples dropped", result.dropped.len(), b);
    }
    lib(write_json(out, &BootDoc::new(seed, result)))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn mc_study(config: &Path, r: usize, b: usize, knots: usize, n: Option<usize>, seed: u64, quad: &QuadArgs, out_dir: &Path) -> Result<(), Failure> {
    let mut sim: SimConfig = lib(read_json(config))?;
    if let Some(n) = n {
        sim.n = n;
    }
    let mut cfg = McConfig::new(sim, r, b, knots, seed);
    cfg.fit = quad.settings();
    let summary = lib(run_mc_study(&cfg))?;
    create_dir(out_dir)?;
    lib(write_summary_csv(&out_dir.join("summary.csv"), &summary))?;
    lib(write_hazard_band_csv(&out_dir.join("hazard_band.csv"), &summary))?;
    lib(write_json(&out_dir.join("mc.json"), &summary))?;
    if !summary.excluded.is_empty() {
        warn!("{} replicate(s) excluded", summary.excluded.len());
    }
    Ok(())
}

fn hazard_curve(fit: &Path, grid: Grid, out: &Path) -> Result<(), Failure> {
    let doc: ParameterDoc = lib(read_json(fit))?;
    let spec = &doc.context.spec;
    let h = lib(spec.with_coefficients(&doc.parameters.xi))?;
    let base = lib(h.cumulative(0.0))?;
    let t = grid.values();
    if grid.end > spec.tau() {
        warn!("grid end {} beyond the spline support {}; the curve is held constant there", grid.end, spec.tau());
    }
    let mut cum = Vec::with_capacity(t.len());
    let mut rate = Vec::with_capacity(t.len());
    for &x in &t {
        let c = x.min(spec.tau());
        cum.push(lib(h.cumulative(c))? - base);
        rate.push(if x > spec.tau() { 0.0 } else { lib(h.rate(c))? });
    }
    lib(write_curve_csv(out, &t, &cum, &rate))?;
    Ok(())
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("CHRONOFIT_THREADS") {
        Ok(v) if !v.is_empty() => match v.parse() {
            Ok(n) => Ok(Some(n)),
            Err(_) => bail!("CHRONOFIT_THREADS must be a non-negative integer, got {v:?}"),
        },
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = thread_count(cli.threads).map_err(Failure::Validation)? {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
        }
    }
    match &cli.command {
        Command::Simulate {
            config,
            out_dir,
            n,
            seed,
            knots,
        } => simulate(config, out_dir, *n, *seed, *knots),
        Command::Fit { data, knots, quad, out } => fit(data, *knots, quad, out),
        Command::Bootstrap { data, fit, b, seed, out } => boot(data, fit, *b, *seed, out),
        Command::McStudy {
            config,
            r,
            b,
            knots,
            n,
            seed,
            quad,
            out_dir,
        } => mc_study(config, *r, *b, *knots, *n, *seed, quad, out_dir),
        Command::HazardCurve { fit, grid, out } => hazard_curve(fit, *grid, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(e) => eprintln!("validation error: {e:#}"),
                Failure::NotConverged(m) => eprintln!("not converged: {m}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
