//! Two-stage starting values: separate mixed models for each biomarker with
//! the change point imputed at the bracket midpoint, a Cox model on the
//! midpoint times, then an interval-censored fit of the spline coefficients
//! with the hazard regression part held fixed.

pub mod cox;
pub mod lmm;

use log::warn;
use thiserror::Error;

use crate::likelihood::{hazard_segments, ChangePointShape, LikError};
use crate::linalg::cholesky;
use crate::model::{xi_from_alpha, Dataset, LogCholesky, ModelError, Parameters, Subject};
use crate::optimizer::{fisher_scoring, FitOptions, Objective, OptError};
use crate::spline::{BasisRow, SplineError, SplineSpec};

use cox::{CoxData, CoxSubject};
use lmm::{fit_random_intercept, Group};

#[derive(Debug, Error)]
pub enum InitError {
    #[error("no observed events; the hazard cannot be initialized")]
    NoEvents,
    #[error(transparent)]
    Likelihood(#[from] LikError),
    #[error(transparent)]
    Optimizer(#[from] OptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Bracket midpoint for observed events, `inf` otherwise.
pub fn impute_midpoint(subject: &Subject) -> f64 {
    if subject.delta {
        0.5 * (subject.bracket_v + subject.bracket_u)
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct LongitudinalInit {
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// Row-major `K × K`.
    pub sigma_a: Vec<f64>,
    pub sigma_e: Vec<f64>,
    /// `n × K` intercept predictions.
    pub blups: Vec<Vec<f64>>,
}

fn shrink_to_spd(mut m: Vec<f64>, k: usize) -> Vec<f64> {
    for _ in 0..60 {
        if cholesky(&m, k).is_some() {
            return m;
        }
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    m[i * k + j] *= 0.8;
                }
            }
        }
    }
    (0..k * k).map(|idx| if idx / k == idx % k { m[idx].abs().max(1e-4) } else { 0.0 }).collect()
}

/// Per-biomarker REML fits with design `[X(t), g((t − E₀)₊)]`.
pub fn init_longitudinal(dataset: &Dataset, shape: ChangePointShape) -> LongitudinalInit {
    let k = dataset.panel_dim;
    let p = dataset.fixed_dim;
    let n = dataset.len();
    let mids: Vec<f64> = dataset.subjects.iter().map(impute_midpoint).collect();
    let shift = |t: f64, e: f64| if e.is_finite() { shape.eval(t - e) } else { 0.0 };
    let mut beta = Vec::with_capacity(k);
    let mut gamma = Vec::with_capacity(k);
    let mut sigma2 = Vec::with_capacity(k);
    let mut inflate = Vec::with_capacity(k);
    let mut blups = vec![vec![0.0; k]; n];
    // residuals e_ij after removing fixed part and BLUP, per subject/visit
    let mut resid: Vec<Vec<Vec<Option<f64>>>> = dataset
        .subjects
        .iter()
        .map(|s| vec![vec![None; k]; s.visits.len()])
        .collect();
    for b in 0..k {
        let groups: Vec<Group> = dataset
            .subjects
            .iter()
            .zip(&mids)
            .map(|(s, &e)| {
                let mut g = Group::default();
                for v in &s.visits {
                    if let Some(y) = v.markers[b] {
                        let mut row = v.covariates_x.clone();
                        row.push(shift(v.time, e));
                        g.x.push(row);
                        g.z.push(v.covariates_z.first().copied().unwrap_or(1.0));
                        g.y.push(y);
                    }
                }
                g
            })
            .collect();
        let fit = fit_random_intercept(&groups, p + 1);
        let coef = &fit.coef;
        let counts: Vec<usize> = groups.iter().map(|g| g.y.len()).collect();
        let mean_visits = counts.iter().sum::<usize>() as f64 / n.max(1) as f64;
        for (i, s) in dataset.subjects.iter().enumerate() {
            blups[i][b] = fit.blups[i];
            for (j, v) in s.visits.iter().enumerate() {
                if let Some(y) = v.markers[b] {
                    let z = v.covariates_z.first().copied().unwrap_or(1.0);
                    let mu: f64 = v.covariates_x.iter().zip(coef).map(|(x, c)| x * c).sum::<f64>()
                        + coef[p] * shift(v.time, mids[i])
                        + z * fit.blups[i];
                    resid[i][j][b] = Some(y - mu);
                }
            }
        }
        let vb = fit.sigma2_b.max(1e-12);
        inflate.push(1.0 + fit.sigma2 / (mean_visits.max(1.0) * vb));
        beta.push(coef[..p].to_vec());
        gamma.push(coef[p]);
        sigma2.push(fit.sigma2.max(1e-8));
    }

    let mut sigma_e = vec![0.0; k * k];
    for a in 0..k {
        sigma_e[a * k + a] = sigma2[a];
        for c in 0..a {
            let pairs: Vec<(f64, f64)> = resid
                .iter()
                .flatten()
                .filter_map(|r| Some((r[a]?, r[c]?)))
                .collect();
            let corr = correlation(&pairs).clamp(-0.95, 0.95);
            let cov = corr * (sigma2[a] * sigma2[c]).sqrt();
            sigma_e[a * k + c] = cov;
            sigma_e[c * k + a] = cov;
        }
    }

    let mut sigma_a = vec![0.0; k * k];
    let denom = (n.max(2) - 1) as f64;
    let means: Vec<f64> = (0..k).map(|b| blups.iter().map(|r| r[b]).sum::<f64>() / n.max(1) as f64).collect();
    for a in 0..k {
        for c in 0..=a {
            let cov = blups.iter().map(|r| (r[a] - means[a]) * (r[c] - means[c])).sum::<f64>() / denom;
            let v = cov * (inflate[a] * inflate[c]).sqrt();
            sigma_a[a * k + c] = v;
            sigma_a[c * k + a] = v;
        }
        sigma_a[a * k + a] = sigma_a[a * k + a].max(1e-4);
    }
    LongitudinalInit {
        beta,
        gamma,
        sigma_a: shrink_to_spd(sigma_a, k),
        sigma_e: shrink_to_spd(sigma_e, k),
        blups,
    }
}

fn correlation(pairs: &[(f64, f64)]) -> f64 {
    if pairs.len() < 3 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SurvivalInit {
    pub theta_x: Vec<f64>,
    pub theta_a: Vec<f64>,
    pub theta_m: Vec<f64>,
    pub converged: bool,
}

/// Covariate rows `[s, blup, carried-forward markers]` per hazard segment.
fn cox_subjects(dataset: &Dataset, blups: &[Vec<f64>]) -> Result<Vec<CoxSubject>, InitError> {
    dataset
        .subjects
        .iter()
        .zip(blups)
        .map(|(s, b)| {
            let segs = hazard_segments(s, dataset.panel_dim)?;
            let time = if s.delta { impute_midpoint(s) } else { s.bracket_v };
            Ok(CoxSubject {
                time,
                event: s.delta,
                starts: segs.iter().map(|g| g.lower).collect(),
                rows: segs
                    .iter()
                    .map(|g| {
                        let mut r = g.covariates.clone();
                        r.extend_from_slice(b);
                        r.extend_from_slice(&g.markers);
                        r
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Cox partial-likelihood fit on midpoint-imputed onset times.
pub fn init_survival(dataset: &Dataset, blups: &[Vec<f64>]) -> Result<SurvivalInit, InitError> {
    if dataset.event_count() == 0 {
        return Err(InitError::NoEvents);
    }
    let k = dataset.panel_dim;
    let ps = dataset.hazard_dim;
    let data = CoxData::new(&cox_subjects(dataset, blups)?, ps + 2 * k);
    let fit = data.fit();
    Ok(SurvivalInit {
        theta_x: fit.coef[..ps].to_vec(),
        theta_a: fit.coef[ps..ps + k].to_vec(),
        theta_m: fit.coef[ps + k..].to_vec(),
        converged: fit.converged,
    })
}

/// Score statistic of the initial Cox model at zero coefficients.
pub fn cox_null_score(dataset: &Dataset, blups: &[Vec<f64>]) -> Result<f64, InitError> {
    let k = dataset.panel_dim;
    let data = CoxData::new(&cox_subjects(dataset, blups)?, dataset.hazard_dim + 2 * k);
    Ok(data.score_test_at_zero())
}

/// Per-segment hazard offsets `θ_xᵀs_j + θ_mᵀM_j + θ_aᵀb̂` for every subject.
pub fn hazard_offsets(dataset: &Dataset, surv: &SurvivalInit, blups: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, InitError> {
    dataset
        .subjects
        .iter()
        .zip(blups)
        .map(|(s, b)| {
            let shared: f64 = surv.theta_a.iter().zip(b).map(|(t, v)| t * v).sum();
            Ok(hazard_segments(s, dataset.panel_dim)?
                .iter()
                .map(|g| {
                    shared
                        + g.covariates.iter().zip(&surv.theta_x).map(|(a, t)| a * t).sum::<f64>()
                        + g.markers.iter().zip(&surv.theta_m).map(|(a, t)| a * t).sum::<f64>()
                })
                .collect())
        })
        .collect()
}

struct XiUnit {
    /// `(lower, upper ∧ V)` rows with the segment multiplier.
    pieces: Vec<(BasisRow<f64>, BasisRow<f64>, f64)>,
    v_row: BasisRow<f64>,
    u_row: Option<BasisRow<f64>>,
    last_mult: f64,
}

/// Interval-censored survival likelihood over `ξ` with fixed offsets.
struct XiObjective<'a> {
    spec: &'a SplineSpec<f64>,
    units: Vec<XiUnit>,
}

impl<'a> XiObjective<'a> {
    fn new(dataset: &Dataset, spec: &'a SplineSpec<f64>, offsets: &[Vec<f64>]) -> Result<Self, InitError> {
        let mut units = Vec::with_capacity(dataset.len());
        for (s, off) in dataset.subjects.iter().zip(offsets) {
            let segs = hazard_segments(s, dataset.panel_dim)?;
            let v = s.bracket_v;
            let mut pieces = Vec::new();
            for (g, &o) in segs.iter().zip(off) {
                if g.lower > v {
                    break;
                }
                pieces.push((spec.basis_row(g.lower)?, spec.basis_row(g.upper.min(v))?, o.exp()));
            }
            units.push(XiUnit {
                pieces,
                v_row: spec.basis_row(v)?,
                u_row: if s.delta { Some(spec.basis_row(s.bracket_u)?) } else { None },
                last_mult: off.last().copied().unwrap_or(0.0).exp(),
            });
        }
        Ok(XiObjective { spec, units })
    }
}

impl Objective for XiObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.basis_count()
    }

    fn n_units(&self) -> usize {
        self.units.len()
    }

    fn unit_logliks(&self, xi: &[f64]) -> Result<Vec<f64>, OptError> {
        let h = self.spec.with_coefficients(xi).map_err(LikError::from)?;
        Ok(self
            .units
            .iter()
            .map(|u| {
                let cum_v: f64 = u
                    .pieces
                    .iter()
                    .map(|(lo, hi, m)| m * (h.cumulative_at_row(hi) - h.cumulative_at_row(lo)))
                    .sum();
                match &u.u_row {
                    None => -cum_v,
                    Some(ur) => {
                        let d = u.last_mult * (h.cumulative_at_row(ur) - h.cumulative_at_row(&u.v_row));
                        let v = -cum_v + (-(-d).exp_m1()).ln();
                        if v.is_nan() {
                            f64::NEG_INFINITY
                        } else {
                            v
                        }
                    }
                }
            })
            .collect())
    }
}

/// Small constant-α coefficients used when no events are observed.
pub fn flat_xi(basis_count: usize) -> Vec<f64> {
    let mut xi = vec![-20.0; basis_count];
    xi[0] = 1e-3f64.ln();
    xi
}

#[derive(Debug, Clone)]
pub struct XiInit {
    pub xi: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
}

/// Maximizes `Π [S(V)−S(U)]^Δ S(V)^{1−Δ}` over ξ from a linear start
/// `α_j = rate·(Greville abscissa j)`, offsets held fixed.
pub fn init_xi(dataset: &Dataset, spec: &SplineSpec<f64>, offsets: &[Vec<f64>]) -> Result<XiInit, InitError> {
    let obj = XiObjective::new(dataset, spec, offsets)?;
    let flat = flat_xi(spec.basis_count());
    let flat_ll = obj.total(&flat)?;
    if dataset.event_count() == 0 {
        warn!("no observed events; using a flat cumulative hazard");
        return Ok(XiInit {
            xi: flat,
            loglik: flat_ll,
            converged: false,
        });
    }
    // crude rate: events over multiplier-weighted exposure up to the midpoint
    let mut exposure = 0.0;
    for (s, off) in dataset.subjects.iter().zip(offsets) {
        let end = if s.delta { impute_midpoint(s) } else { s.bracket_v };
        for (g, o) in hazard_segments(s, dataset.panel_dim)?.iter().zip(off) {
            if g.lower >= end {
                break;
            }
            exposure += o.exp() * (g.upper.min(end) - g.lower);
        }
    }
    let rate = dataset.event_count() as f64 / exposure.max(1e-12);
    let alpha: Vec<f64> = spec.greville().iter().map(|g| rate * g + 1e-6).collect();
    let start = xi_from_alpha(&alpha, 1e-8);
    let run = fisher_scoring(&obj, &start, &FitOptions::default())?;
    let ll = *run.loglik_trace.last().unwrap();
    if ll < flat_ll {
        return Ok(XiInit {
            xi: flat,
            loglik: flat_ll,
            converged: false,
        });
    }
    Ok(XiInit {
        xi: run.theta,
        loglik: ll,
        converged: run.converged,
    })
}

/// Interval-censored log-likelihood over ξ with fixed offsets.
pub fn xi_loglik(dataset: &Dataset, spec: &SplineSpec<f64>, offsets: &[Vec<f64>], xi: &[f64]) -> Result<f64, InitError> {
    Ok(XiObjective::new(dataset, spec, offsets)?.total(xi)?)
}

#[derive(Debug, Clone)]
pub struct InitialValues {
    pub params: Parameters,
    pub longitudinal: LongitudinalInit,
    pub survival: SurvivalInit,
    pub xi: XiInit,
}

/// Full starting point for Fisher scoring.
pub fn initial_parameters(dataset: &Dataset, spec: &SplineSpec<f64>, shape: ChangePointShape) -> Result<InitialValues, InitError> {
    if dataset.event_count() == 0 {
        return Err(InitError::NoEvents);
    }
    let k = dataset.panel_dim;
    let long = init_longitudinal(dataset, shape);
    let surv = init_survival(dataset, &long.blups)?;
    let offsets = hazard_offsets(dataset, &surv, &long.blups)?;
    let xi = init_xi(dataset, spec, &offsets)?;
    let params = Parameters {
        xi: xi.xi.clone(),
        beta: long.beta.clone(),
        gamma: long.gamma.clone(),
        theta_x: surv.theta_x.clone(),
        theta_a: surv.theta_a.clone(),
        theta_m: surv.theta_m.clone(),
        chol_a: LogCholesky::from_covariance(&long.sigma_a, k)?,
        chol_e: LogCholesky::from_covariance(&long.sigma_e, k)?,
    };
    Ok(InitialValues {
        params,
        longitudinal: long,
        survival: surv,
        xi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{gen_dataset, SimConfig};
    use crate::spline::spec_with_knot_count;

    #[test]
    fn midpoint_examples() {
        let d = gen_dataset(&SimConfig::new(200, 8)).unwrap();
        for s in &d.dataset.subjects {
            let m = impute_midpoint(s);
            if s.delta {
                assert!(m > s.bracket_v && m <= s.bracket_u);
            } else {
                assert_eq!(m, f64::INFINITY);
            }
        }
        let mut s = d.dataset.subjects[0].clone();
        s.bracket_v = 2.0;
        s.bracket_u = 4.0;
        s.delta = true;
        assert_eq!(impute_midpoint(&s), 3.0);
    }

    #[test]
    fn no_events_is_error() {
        let mut d = gen_dataset(&SimConfig::new(30, 9)).unwrap().dataset;
        for s in &mut d.subjects {
            s.delta = false;
            s.bracket_v = s.last_time();
            s.bracket_u = f64::INFINITY;
        }
        let long = init_longitudinal(&d, ChangePointShape::Linear);
        assert!(matches!(init_survival(&d, &long.blups), Err(InitError::NoEvents)));
        let spec = spec_with_knot_count(&d, 3).unwrap();
        let offsets = vec![vec![0.0; 11]; d.len()];
        let xi = init_xi(&d, &spec, &offsets).unwrap();
        assert_eq!(xi.xi, flat_xi(spec.basis_count()));
    }

    #[test]
    fn xi_fit_beats_flat_fallback() {
        let d = gen_dataset(&SimConfig::new(200, 10)).unwrap().dataset;
        let spec = spec_with_knot_count(&d, 4).unwrap();
        let offsets: Vec<Vec<f64>> = d.subjects.iter().map(|s| vec![0.0; s.phase1_visits().count()]).collect();
        let fit = init_xi(&d, &spec, &offsets).unwrap();
        let flat = xi_loglik(&d, &spec, &offsets, &flat_xi(spec.basis_count())).unwrap();
        assert!(fit.loglik >= flat);
    }
}
