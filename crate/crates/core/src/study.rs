//! Bootstrap inference for one dataset and the replicated simulation study.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::initializer::{initial_parameters, InitError};
use crate::likelihood::{ChangePointShape, HermiteMode, LikContext, LikError};
use crate::model::{Dataset, LogCholesky};
use crate::optimizer::{fisher_scoring_fit, FitOptions, FitResult, OptError};
use crate::simulator::{derive_seed, gen_dataset, SimConfig, SimError};
use crate::spline::{quantile_sorted, spec_with_knot_count, SplineError, SplineSpec};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Optimizer(#[from] OptError),
    #[error(transparent)]
    Likelihood(#[from] LikError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("bootstrap needs B >= 2, got {0}")]
    TooFewResamples(usize),
    #[error("the fit to bootstrap did not converge")]
    NotConverged,
    #[error("{dropped} of {total} {what} failed, more than the allowed {limit}")]
    TooManyFailures {
        what: &'static str,
        dropped: usize,
        total: usize,
        limit: usize,
    },
    #[error("replicate count must be at least 1")]
    NoReplicates,
}

const TAG_BOOT: u64 = 0xB007;
const TAG_MC_SIM: u64 = 0x5131;
const TAG_MC_BOOT: u64 = 0x5132;

/// Spline, quadrature and optimizer settings for a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub gl_nodes: usize,
    pub gh_nodes: usize,
    #[serde(default)]
    pub changepoint_shape: ChangePointShape,
    #[serde(default)]
    pub hermite: HermiteMode,
    #[serde(default)]
    pub options: FitOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            gl_nodes: 20,
            gh_nodes: 20,
            changepoint_shape: ChangePointShape::Linear,
            hermite: HermiteMode::Centered,
            options: FitOptions::default(),
        }
    }
}

impl FitSettings {
    pub fn context(&self, spec: SplineSpec<f64>) -> LikContext {
        LikContext {
            spec,
            gl_nodes: self.gl_nodes,
            gh_nodes: self.gh_nodes,
            changepoint_shape: self.changepoint_shape,
            hermite: self.hermite,
        }
    }
}

/// Two-stage initialization followed by Fisher scoring.
pub fn fit_dataset(dataset: &Dataset, ctx: &LikContext, opts: &FitOptions) -> Result<FitResult, StudyError> {
    let init = initial_parameters(dataset, &ctx.spec, ctx.changepoint_shape)?;
    Ok(fisher_scoring_fit(dataset, &init.params, ctx, opts)?)
}

/// Two-sided normal p-value of `z`.
pub fn normal_p_value(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let n = Normal::standard();
    2.0 * n.cdf(-z.abs())
}

fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

fn is_survival_coefficient(name: &str) -> bool {
    name.starts_with("theta_")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientInference {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_value: f64,
    /// 2.5% and 97.5% percentiles of the bootstrap estimates.
    pub percentile_lower: f64,
    pub percentile_upper: f64,
    /// `(exp(estimate), exp(lower), exp(upper))` for hazard coefficients.
    pub hazard_ratio: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub resamples: usize,
    /// Indices of resamples whose refit failed or did not converge.
    pub dropped: Vec<usize>,
    pub coefficients: Vec<CoefficientInference>,
    /// Packed estimates of the retained refits.
    pub estimates: Vec<Vec<f64>>,
}

impl BootstrapResult {
    pub fn se(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.se).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CoefficientInference> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Subject indices of resample `b` under `seed`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_BOOT, b as u64));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Nonparametric bootstrap with `b` subject resamples, each refitted from
/// the point estimate.
pub fn bootstrap(
    dataset: &Dataset,
    fit: &FitResult,
    b: usize,
    ctx: &LikContext,
    opts: &FitOptions,
    seed: u64,
) -> Result<BootstrapResult, StudyError> {
    let sets: Vec<Vec<usize>> = (0..b).map(|r| resample_indices(dataset.len(), seed, r)).collect();
    bootstrap_from_resamples(dataset, fit, &sets, ctx, opts)
}

/// Bootstrap over explicit resample index sets.
pub fn bootstrap_from_resamples(
    dataset: &Dataset,
    fit: &FitResult,
    sets: &[Vec<usize>],
    ctx: &LikContext,
    opts: &FitOptions,
) -> Result<BootstrapResult, StudyError> {
    let b = sets.len();
    if b < 2 {
        return Err(StudyError::TooFewResamples(b));
    }
    if !fit.converged {
        return Err(StudyError::NotConverged);
    }
    let outcomes: Vec<Option<Vec<f64>>> = sets
        .par_iter()
        .enumerate()
        .map(|(r, idx)| {
            let data = dataset.resample(idx);
            match fisher_scoring_fit(&data, &fit.params_hat, ctx, opts) {
                Ok(f) if f.converged => Some(f.packed),
                Ok(f) => {
                    warn!("bootstrap resample {r}: no convergence ({:?})", f.stop);
                    None
                }
                Err(e) => {
                    warn!("bootstrap resample {r}: {e}");
                    None
                }
            }
        })
        .collect();
    let dropped: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.is_none()).map(|(i, _)| i).collect();
    let limit = b / 5;
    if dropped.len() > limit || b - dropped.len() < 2 {
        return Err(StudyError::TooManyFailures {
            what: "bootstrap refits",
            dropped: dropped.len(),
            total: b,
            limit,
        });
    }
    let estimates: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let coefficients = fit
        .names
        .iter()
        .enumerate()
        .map(|(u, name)| {
            let mut col: Vec<f64> = estimates.iter().map(|e| e[u]).collect();
            let est = fit.packed[u];
            let se = sample_sd(&col);
            col.sort_by(|a, c| a.total_cmp(c));
            let (lower, upper) = (est - 1.96 * se, est + 1.96 * se);
            let p_value = if se > 0.0 { normal_p_value(est / se) } else if est == 0.0 { 1.0 } else { 0.0 };
            CoefficientInference {
                name: name.clone(),
                estimate: est,
                se,
                lower,
                upper,
                p_value,
                percentile_lower: quantile_sorted(&col, 0.025),
                percentile_upper: quantile_sorted(&col, 0.975),
                hazard_ratio: is_survival_coefficient(name).then(|| [est.exp(), lower.exp(), upper.exp()]),
            }
        })
        .collect();
    Ok(BootstrapResult {
        resamples: b,
        dropped,
        coefficients,
        estimates,
    })
}

/// Configuration of a replicated simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub sim: SimConfig,
    pub replicates: usize,
    pub bootstrap: usize,
    pub knots: usize,
    pub seed: u64,
    #[serde(default)]
    pub fit: FitSettings,
    /// Grid `[0, hazard_end]` with `hazard_points` points.
    #[serde(default = "default_hazard_end")]
    pub hazard_end: f64,
    #[serde(default = "default_hazard_points")]
    pub hazard_points: usize,
}

fn default_hazard_end() -> f64 {
    10.0
}
fn default_hazard_points() -> usize {
    200
}

impl McConfig {
    pub fn new(sim: SimConfig, replicates: usize, bootstrap: usize, knots: usize, seed: u64) -> Self {
        McConfig {
            sim,
            replicates,
            bootstrap,
            knots,
            seed,
            fit: FitSettings::default(),
            hazard_end: default_hazard_end(),
            hazard_points: default_hazard_points(),
        }
    }

    pub fn hazard_grid(&self) -> Vec<f64> {
        let m = self.hazard_points.max(2);
        (0..m).map(|i| self.hazard_end * i as f64 / (m - 1) as f64).collect()
    }
}

/// Names and true values of the summarized coefficients: the table's 13
/// regression coefficients, then the log-Cholesky entries.
pub fn summary_targets(sim: &SimConfig, hazard_dim: usize) -> Result<Vec<(String, f64)>, StudyError> {
    let t = &sim.truth;
    let k = t.panel_dim();
    let mut out = Vec::new();
    for b in 0..k {
        for (j, v) in t.beta[b].iter().enumerate() {
            out.push((format!("beta{}_{}", b + 1, j), *v));
        }
        out.push((format!("gamma{}", b + 1), t.gamma[b]));
    }
    for j in 0..hazard_dim {
        out.push((format!("theta_x{}", j + 1), t.theta_x));
    }
    for b in 0..k {
        out.push((format!("theta_m{}", b + 1), t.theta_m[b]));
    }
    for b in 0..k {
        out.push((format!("theta_a{}", b + 1), t.theta_a[b]));
    }
    for (label, cov) in [("chol_a", &t.sigma_a), ("chol_e", &t.sigma_e)] {
        let lc = LogCholesky::from_covariance(cov, k).map_err(|e| StudyError::Likelihood(e.into()))?;
        let mut idx = 0;
        for i in 0..k {
            for j in 0..=i {
                out.push((format!("{label}{}{}", i + 1, j + 1), lc.entries[idx]));
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Outcome of one simulation replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    /// Estimates in summary order.
    pub estimates: Vec<f64>,
    /// Bootstrap SEs in summary order (empty when B = 0).
    pub se: Vec<f64>,
    /// `Λ̂₀` on the hazard grid.
    pub hazard: Vec<f64>,
    pub iterations: usize,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCoefficient {
    pub name: String,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    /// Mean bootstrap SE; absent without bootstrap.
    pub ase: Option<f64>,
    /// Wald coverage with bootstrap SEs; absent without bootstrap.
    pub cp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardBand {
    pub t: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub coefficients: Vec<McCoefficient>,
    pub hazard: HazardBand,
    pub replicates: Vec<Replicate>,
    /// `(replicate index, reason)` of excluded replicates.
    pub excluded: Vec<(usize, String)>,
}

impl McSummary {
    pub fn get(&self, name: &str) -> Option<&McCoefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// `Λ̂₀(t) − Λ̂₀(0)` with `t` clamped to the spline support.
fn fitted_hazard(spec: &SplineSpec<f64>, xi: &[f64], grid: &[f64]) -> Result<Vec<f64>, StudyError> {
    let h = spec.with_coefficients(xi)?;
    let base = h.cumulative(0.0)?;
    grid.iter()
        .map(|&t| Ok(h.cumulative(t.clamp(0.0, spec.tau()))? - base))
        .collect()
}

/// Simulate, initialize, fit and bootstrap replicate `index`.
pub fn run_replicate(config: &McConfig, index: usize) -> Result<Replicate, StudyError> {
    let seed = derive_seed(config.seed, TAG_MC_SIM, index as u64);
    let sim = SimConfig { seed, ..config.sim.clone() };
    let data = gen_dataset(&sim)?.dataset;
    let spec = spec_with_knot_count(&data, config.knots)?;
    let ctx = config.fit.context(spec);
    let opts = &config.fit.options;
    let fit = fit_dataset(&data, &ctx, opts)?;
    if !fit.converged {
        return Err(StudyError::NotConverged);
    }
    let targets = summary_targets(&config.sim, data.hazard_dim)?;
    let pos: Vec<usize> = targets
        .iter()
        .map(|(n, _)| fit.names.iter().position(|m| m == n).expect("summary names come from the layout"))
        .collect();
    let se = if config.bootstrap > 0 {
        let boot_seed = derive_seed(config.seed, TAG_MC_BOOT, index as u64);
        let boot = bootstrap(&data, &fit, config.bootstrap, &ctx, opts, boot_seed)?;
        pos.iter().map(|&p| boot.coefficients[p].se).collect()
    } else {
        Vec::new()
    };
    let hazard = fitted_hazard(&ctx.spec, &fit.params_hat.xi, &config.hazard_grid())?;
    info!("replicate {index}: {} iterations, loglik {:.4}", fit.iterations, fit.loglik());
    Ok(Replicate {
        index,
        seed,
        estimates: pos.iter().map(|&p| fit.packed[p]).collect(),
        se,
        hazard,
        iterations: fit.iterations,
        loglik: fit.loglik(),
    })
}

/// Aggregates replicates into bias, SD, ASE and CP against the configured truth.
pub fn summarize(config: &McConfig, replicates: Vec<Replicate>, excluded: Vec<(usize, String)>) -> Result<McSummary, StudyError> {
    let targets = summary_targets(&config.sim, 1)?;
    let r = replicates.len();
    let coefficients = targets
        .iter()
        .enumerate()
        .map(|(u, (name, truth))| {
            let est: Vec<f64> = replicates.iter().map(|rep| rep.estimates[u]).collect();
            let mean = est.iter().sum::<f64>() / r as f64;
            let with_se: Vec<&Replicate> = replicates.iter().filter(|rep| !rep.se.is_empty()).collect();
            let (ase, cp) = if with_se.is_empty() {
                (None, None)
            } else {
                let m = with_se.len() as f64;
                let ase = with_se.iter().map(|rep| rep.se[u]).sum::<f64>() / m;
                let hits = with_se
                    .iter()
                    .filter(|rep| (rep.estimates[u] - truth).abs() <= 1.96 * rep.se[u])
                    .count();
                (Some(ase), Some(hits as f64 / m))
            };
            McCoefficient {
                name: name.clone(),
                truth: *truth,
                bias: mean - truth,
                sd: sample_sd(&est),
                ase,
                cp,
            }
        })
        .collect();
    let t = config.hazard_grid();
    let baseline = &config.sim.truth.baseline;
    let truth_curve: Vec<f64> = t.iter().map(|&x| baseline.cumulative(x)).collect();
    let mut mean = Vec::with_capacity(t.len());
    let mut q025 = Vec::with_capacity(t.len());
    let mut q975 = Vec::with_capacity(t.len());
    for g in 0..t.len() {
        let mut col: Vec<f64> = replicates.iter().map(|rep| rep.hazard[g]).collect();
        mean.push(col.iter().sum::<f64>() / r as f64);
        col.sort_by(|a, b| a.total_cmp(b));
        q025.push(quantile_sorted(&col, 0.025));
        q975.push(quantile_sorted(&col, 0.975));
    }
    Ok(McSummary {
        coefficients,
        hazard: HazardBand {
            t,
            truth: truth_curve,
            mean,
            q025,
            q975,
        },
        replicates,
        excluded,
    })
}

/// Runs `config.replicates` independent replicates in parallel.
pub fn run_mc_study(config: &McConfig) -> Result<McSummary, StudyError> {
    if config.replicates == 0 {
        return Err(StudyError::NoReplicates);
    }
    config.sim.check()?;
    let outcomes: Vec<Result<Replicate, StudyError>> =
        (0..config.replicates).into_par_iter().map(|i| run_replicate(config, i)).collect();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rep) => kept.push(rep),
            Err(e) => {
                warn!("replicate {i} excluded: {e}");
                excluded.push((i, e.to_string()));
            }
        }
    }
    let limit = config.replicates / 20;
    if excluded.len() > limit || kept.is_empty() {
        return Err(StudyError::TooManyFailures {
            what: "replicates",
            dropped: excluded.len(),
            total: config.replicates,
            limit,
        });
    }
    summarize(config, kept, excluded)
}
