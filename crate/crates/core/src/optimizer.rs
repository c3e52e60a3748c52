//! Fisher scoring with finite-difference per-unit scores, the empirical
//! (outer-product) information and a step-halving line search.

use log::{debug, info};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{JointLikelihood, LikContext, LikError};
use crate::model::{Dataset, Layout, Parameters};

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Likelihood(#[from] LikError),
    #[error("finite-difference step must be positive, got {0}")]
    BadDelta(f64),
    #[error("log-likelihood is not finite at coordinate {coord} after {retries} step reductions")]
    NonFiniteScore { coord: usize, retries: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("log-likelihood at the starting point is not finite ({0})")]
    InfeasibleStart(f64),
    #[error("invalid options: {0}")]
    Options(String),
}

/// A sum of per-unit log-likelihood contributions over packed coordinates.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn n_units(&self) -> usize;
    /// Per-unit log-likelihoods; `-inf` entries mark infeasible points.
    fn unit_logliks(&self, theta: &[f64]) -> Result<Vec<f64>, OptError>;

    fn total(&self, theta: &[f64]) -> Result<f64, OptError> {
        let v = self.unit_logliks(theta)?;
        Ok(crate::linalg::compensated_sum(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub fd_delta: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Eigenvalues below `pinv_tol × λ_max` are zeroed in the pseudo-inverse.
    pub pinv_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            fd_delta: 1e-6,
            rel_tol: 1e-3,
            max_iter: 200,
            max_halvings: 30,
            pinv_tol: 1e-8,
        }
    }
}

impl FitOptions {
    pub fn check(&self) -> Result<(), OptError> {
        let ok = self.fd_delta > 0.0 && self.rel_tol > 0.0 && self.max_iter > 0 && self.max_halvings > 0 && self.pinv_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptError::Options(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIter,
    LineSearch,
}

/// Result of a run on a generic objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRun {
    pub theta: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub final_score_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params_hat: Parameters,
    pub packed: Vec<f64>,
    pub names: Vec<String>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub final_score_norm: f64,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Central-difference per-unit scores, `n_units × dim`.
///
/// Coordinate `u` uses `δ_u = delta·max(1, |θ_u|)`, divided by ten (up to
/// three times) while either side is non-finite.
pub fn fd_score<O: Objective + ?Sized>(obj: &O, theta: &[f64], delta: f64) -> Result<DMatrix<f64>, OptError> {
    if !(delta > 0.0) {
        return Err(OptError::BadDelta(delta));
    }
    const RETRIES: usize = 3;
    let n = obj.n_units();
    let p = obj.dim();
    let mut out = DMatrix::zeros(n, p);
    let mut work = theta.to_vec();
    for u in 0..p {
        let mut step = delta * theta[u].abs().max(1.0);
        let mut done = false;
        for _ in 0..=RETRIES {
            work[u] = theta[u] + step;
            let plus = obj.unit_logliks(&work)?;
            work[u] = theta[u] - step;
            let minus = obj.unit_logliks(&work)?;
            work[u] = theta[u];
            if all_finite(&plus) && all_finite(&minus) {
                for i in 0..n {
                    out[(i, u)] = (plus[i] - minus[i]) / (2.0 * step);
                }
                done = true;
                break;
            }
            step /= 10.0;
        }
        if !done {
            return Err(OptError::NonFiniteScore { coord: u, retries: RETRIES });
        }
    }
    Ok(out)
}

/// `Σ_i s_i s_iᵀ`.
pub fn empirical_info(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let m = scores.transpose() * scores;
    (&m + m.transpose()) * 0.5
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix by eigendecomposition,
/// zeroing eigenvalues below `rel_tol × λ_max`.
pub fn generalized_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>, OptError> {
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(OptError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, |a, b| a.max(b.abs()));
    let cut = rel_tol * lmax;
    let inv_vals = eig
        .eigenvalues
        .map(|l| if l.abs() > cut && l.abs() > 0.0 { 1.0 / l } else { 0.0 });
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv_vals) * v.transpose())
}

/// `max_u |new_u − old_u| / max(|old_u|, 1e-8)`.
pub fn max_relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(&o, &n)| (n - o).abs() / o.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Maximizes `obj` from `init` by `θ ← θ + η·pinv(I)·score`.
pub fn fisher_scoring<O: Objective + ?Sized>(obj: &O, init: &[f64], opts: &FitOptions) -> Result<ScoringRun, OptError> {
    opts.check()?;
    let mut theta = init.to_vec();
    let mut ll = obj.total(&theta)?;
    if !ll.is_finite() {
        return Err(OptError::InfeasibleStart(ll));
    }
    let mut trace = vec![ll];
    let mut score_norm = f64::NAN;
    let mut stop = StopReason::MaxIter;
    let mut iterations = 0;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        let scores = fd_score(obj, &theta, opts.fd_delta)?;
        let g: DVector<f64> = scores.row_sum().transpose();
        score_norm = g.amax();
        let info_m = empirical_info(&scores);
        let dir = generalized_inverse(&info_m, opts.pinv_tol)? * &g;
        let full: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + d).collect();
        let mut eta = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + eta * d).collect();
            let cl = obj.total(&cand).unwrap_or(f64::NEG_INFINITY);
            if cl.is_finite() && cl > ll {
                accepted = Some((cand, cl));
                break;
            }
            eta *= 0.5;
        }
        let Some((cand, cl)) = accepted else {
            // no ascent left along the scoring direction
            if max_relative_change(&theta, &full) < opts.rel_tol {
                stop = StopReason::Converged;
            } else {
                stop = StopReason::LineSearch;
            }
            debug!("iteration {iter}: line search exhausted, score ∞-norm {score_norm:e}");
            break;
        };
        let rel = max_relative_change(&theta, &cand);
        debug!("iteration {iter}: loglik {cl:.6} (+{:.3e}), step {eta}, rel change {rel:.3e}", cl - ll);
        theta = cand;
        ll = cl;
        trace.push(ll);
        if rel < opts.rel_tol {
            stop = StopReason::Converged;
            break;
        }
    }
    let converged = stop == StopReason::Converged;
    info!("fisher scoring: {iterations} iterations, loglik {ll:.6}, stop {stop:?}");
    Ok(ScoringRun {
        theta,
        loglik_trace: trace,
        iterations,
        converged,
        stop,
        final_score_norm: score_norm,
    })
}

/// The joint model's log-likelihood over packed coordinates.
pub struct JointObjective {
    lik: JointLikelihood,
    layout: Layout,
}

impl JointObjective {
    pub fn new(dataset: &Dataset, ctx: &LikContext) -> Result<Self, LikError> {
        let lik = JointLikelihood::new(dataset, ctx)?;
        let layout = *lik.layout();
        Ok(JointObjective { lik, layout })
    }

    pub fn likelihood(&self) -> &JointLikelihood {
        &self.lik
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

impl Objective for JointObjective {
    fn dim(&self) -> usize {
        self.layout.packed_len()
    }

    fn n_units(&self) -> usize {
        self.lik.len()
    }

    fn unit_logliks(&self, theta: &[f64]) -> Result<Vec<f64>, OptError> {
        let p = Parameters::unpack(&self.layout, theta).map_err(LikError::from)?;
        Ok(self.lik.per_subject(&p)?)
    }
}

/// Fits the joint model by Fisher scoring from `init`.
pub fn fisher_scoring_fit(dataset: &Dataset, init: &Parameters, ctx: &LikContext, opts: &FitOptions) -> Result<FitResult, OptError> {
    let obj = JointObjective::new(dataset, ctx)?;
    fit_objective(&obj, init, opts)
}

pub fn fit_objective(obj: &JointObjective, init: &Parameters, opts: &FitOptions) -> Result<FitResult, OptError> {
    init.check_shape(obj.layout()).map_err(LikError::from)?;
    if !init.is_finite() {
        return Err(LikError::NonFiniteParameters.into());
    }
    let run = fisher_scoring(obj, &init.pack(), opts)?;
    Ok(FitResult {
        params_hat: Parameters::unpack(obj.layout(), &run.theta).map_err(LikError::from)?,
        names: obj.layout().names(),
        packed: run.theta,
        loglik_trace: run.loglik_trace,
        iterations: run.iterations,
        converged: run.converged,
        stop: run.stop,
        final_score_norm: run.final_score_norm,
    })
}
