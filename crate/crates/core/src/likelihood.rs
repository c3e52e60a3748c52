//! Observed-data log-likelihood of the two-phase joint model.
//!
//! For subject `i` with random effects `a ~ N(0, Σ_a)`:
//!
//! ```text
//! L_i = E_a[ f(M₁ | a) · { ∫_V^U f(M₂ | a, e) f(e | M₁, a) de }^Δ · S(V | a)^{1−Δ} ]
//! ```
//!
//! The Gaussian marker densities are quadratic in `a`, so each subject is
//! reduced once per parameter value to `c + hᵀa − ½aᵀHa` pieces and the
//! quadrature loops only touch `O(K)` work plus one exponential per point.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{chol_inverse, chol_logdet, chol_solve_upper, cholesky, compensated_sum, dot, quad_form};
use crate::model::{Dataset, Layout, ModelError, Parameters, Subject, Visit};
use crate::quadrature::{gauss_legendre, HermiteGrid, QuadRule, QuadratureError};
use crate::spline::{BasisRow, SplineError, SplineHazard, SplineSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Σ_e is treated as numerically singular above this condition number.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum LikError {
    #[error("parameters contain non-finite values")]
    NonFiniteParameters,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("node counts must be at least 2 (gl = {gl}, gh = {gh})")]
    NodeCount { gl: usize, gh: usize },
    #[error("only a scalar random-effect design is supported (re_dim = {0})")]
    UnsupportedReDim(usize),
    #[error("subject {subject}: marker {marker} has no observed value at or before t = {time} for the hazard")]
    NoPriorMarker { subject: String, marker: usize, time: f64 },
    #[error("subject {subject}: event density requested at t = {t} outside ({v}, {u}]")]
    OutsideBracket { subject: String, t: f64, v: f64, u: f64 },
    #[error("log-likelihood is -inf for subject {subject}")]
    Degenerate { subject: String },
}

/// Shape `g(s)` of the post-event shift `γ·g(t − E)`, with `g(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChangePointShape {
    #[default]
    Linear,
    Log1p,
    Power { exponent: f64 },
}

impl ChangePointShape {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match *self {
            ChangePointShape::Linear => s,
            ChangePointShape::Log1p => s.ln_1p(),
            ChangePointShape::Power { exponent } => s.powf(exponent),
        }
    }
}

/// Placement of the Gauss-Hermite nodes for the random-effect integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HermiteMode {
    /// Nodes centered and scaled on the Gaussian part of each subject's
    /// integrand (marker densities times prior), with the importance ratio
    /// folded into the weights.
    #[default]
    Centered,
    /// Nodes `√2·L_a·u` from the prior alone.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikContext {
    pub spec: SplineSpec<f64>,
    pub gl_nodes: usize,
    pub gh_nodes: usize,
    #[serde(default)]
    pub changepoint_shape: ChangePointShape,
    #[serde(default)]
    pub hermite: HermiteMode,
}

impl LikContext {
    pub fn new(spec: SplineSpec<f64>) -> Self {
        LikContext {
            spec,
            gl_nodes: 20,
            gh_nodes: 20,
            changepoint_shape: ChangePointShape::Linear,
            hermite: HermiteMode::Centered,
        }
    }

    pub fn check(&self) -> Result<(), LikError> {
        if self.gl_nodes < 2 || self.gh_nodes < 2 {
            return Err(LikError::NodeCount {
                gl: self.gl_nodes,
                gh: self.gh_nodes,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Direct evaluation of the individual factors.

fn fixed_mean(visit: &Visit, params: &Parameters, a: &[f64]) -> Vec<f64> {
    let z = visit.covariates_z.first().copied().unwrap_or(1.0);
    params
        .beta
        .iter()
        .enumerate()
        .map(|(k, b)| dot(&visit.covariates_x, b) + z * a[k])
        .collect()
}

/// Condition number of a symmetric matrix, `inf` when not positive definite.
pub fn condition_number(m: &[f64], n: usize) -> f64 {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, m)).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

fn sigma_e_usable(params: &Parameters) -> bool {
    let k = params.chol_e.dim;
    let cond = condition_number(&params.sigma_e(), k);
    if cond > MAX_CONDITION {
        warn!("Σ_e condition number {cond:e} exceeds {MAX_CONDITION:e}; log-likelihood set to -inf");
        false
    } else {
        true
    }
}

/// Log Gaussian density of the observed coordinates of `visit` around `mean`.
fn visit_logdensity(visit: &Visit, mean: &[f64], sigma: &[f64], k: usize) -> f64 {
    let obs: Vec<usize> = (0..k).filter(|&j| visit.markers[j].is_some()).collect();
    let m = obs.len();
    if m == 0 {
        return 0.0;
    }
    let mut sub = vec![0.0; m * m];
    for (p, &i) in obs.iter().enumerate() {
        for (q, &j) in obs.iter().enumerate() {
            sub[p * m + q] = sigma[i * k + j];
        }
    }
    let Some(l) = cholesky(&sub, m) else {
        return f64::NEG_INFINITY;
    };
    let r: Vec<f64> = obs.iter().map(|&i| visit.markers[i].unwrap() - mean[i]).collect();
    let mut x = r.clone();
    chol_solve(&l, m, &mut x);
    -0.5 * (m as f64 * LN_2PI + chol_logdet(&l, m) + dot(&r, &x))
}

use crate::linalg::chol_solve;

/// `log f(M₁ | a)` over visits at or before `V`.
pub fn phase1_logdensity(subject: &Subject, a: &[f64], params: &Parameters) -> f64 {
    if !sigma_e_usable(params) {
        return f64::NEG_INFINITY;
    }
    let k = params.beta.len();
    let sigma = params.sigma_e();
    subject
        .phase1_visits()
        .map(|v| visit_logdensity(v, &fixed_mean(v, params, a), &sigma, k))
        .sum()
}

/// `log f(M₂ | a, E = e)` over visits at or after `U`, each shifted by
/// `γ·g(t_j − e)`.
pub fn phase2_logdensity(
    subject: &Subject,
    a: &[f64],
    params: &Parameters,
    e: f64,
    shape: ChangePointShape,
) -> f64 {
    if !sigma_e_usable(params) {
        return f64::NEG_INFINITY;
    }
    let k = params.beta.len();
    let sigma = params.sigma_e();
    subject
        .phase2_visits()
        .map(|v| {
            let g = shape.eval(v.time - e);
            let mut mean = fixed_mean(v, params, a);
            for (m, gk) in mean.iter_mut().zip(&params.gamma) {
                *m += gk * g;
            }
            visit_logdensity(v, &mean, &sigma, k)
        })
        .sum()
}

/// One constant-multiplier piece of the subject's hazard: `(lower, upper]`
/// with the covariate row and carried-forward markers of visit `j`.
#[derive(Debug, Clone)]
pub struct HazardSegment {
    pub lower: f64,
    pub upper: f64,
    pub covariates: Vec<f64>,
    pub markers: Vec<f64>,
}

/// Piecewise hazard layout from the visits at or before `V`: segment `j`
/// spans `(t_j, t_{j+1}]` with visit `j`'s values, the first starts at 0 and
/// the last is unbounded.
pub fn hazard_segments(subject: &Subject, panel_dim: usize) -> Result<Vec<HazardSegment>, LikError> {
    let visits: Vec<&Visit> = subject.phase1_visits().collect();
    let mut last: Vec<Option<f64>> = vec![None; panel_dim];
    let mut out = Vec::with_capacity(visits.len());
    for (j, v) in visits.iter().enumerate() {
        for (k, slot) in last.iter_mut().enumerate() {
            if let Some(m) = v.markers[k] {
                *slot = Some(m);
            }
        }
        let markers = last
            .iter()
            .enumerate()
            .map(|(k, m)| {
                m.ok_or_else(|| LikError::NoPriorMarker {
                    subject: subject.id.clone(),
                    marker: k,
                    time: v.time,
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        out.push(HazardSegment {
            lower: if j == 0 { 0.0 } else { v.time },
            upper: visits.get(j + 1).map_or(f64::INFINITY, |n| n.time),
            covariates: v.covariates_s.clone(),
            markers,
        });
    }
    Ok(out)
}

fn segment_linear(seg: &HazardSegment, params: &Parameters) -> f64 {
    dot(&params.theta_x, &seg.covariates) + dot(&params.theta_m, &seg.markers)
}

/// Subject-level cumulative hazard `Λ(t | a) = Σ_j exp(η_j)·[Λ₀(upper_j ∧ t) − Λ₀(lower_j)]`.
pub fn cum_hazard_to(
    subject: &Subject,
    a: &[f64],
    params: &Parameters,
    t: f64,
    spec: &SplineSpec<f64>,
) -> Result<f64, LikError> {
    let h = spec.with_coefficients(&params.xi)?;
    let shared = dot(&params.theta_a, a);
    let mut total = 0.0;
    for seg in hazard_segments(subject, params.beta.len())? {
        if seg.lower >= t {
            break;
        }
        let hi = seg.upper.min(t);
        let d = h.cumulative(hi)? - h.cumulative(seg.lower)?;
        total += (segment_linear(&seg, params) + shared).exp() * d;
    }
    Ok(total)
}

/// `log f(e | M₁, a)` for `V < e ≤ U`, using the left-extrapolated values.
pub fn event_logdensity(
    t: f64,
    subject: &Subject,
    a: &[f64],
    params: &Parameters,
    ctx: &LikContext,
) -> Result<f64, LikError> {
    if !(t > subject.bracket_v && t <= subject.bracket_u) {
        return Err(LikError::OutsideBracket {
            subject: subject.id.clone(),
            t,
            v: subject.bracket_v,
            u: subject.bracket_u,
        });
    }
    event_logdensity_unchecked(t, subject, a, params, &ctx.spec)
}

/// `event_logdensity` without the bracket restriction, for any `0 < t ≤ τ`.
pub fn event_logdensity_unchecked(
    t: f64,
    subject: &Subject,
    a: &[f64],
    params: &Parameters,
    spec: &SplineSpec<f64>,
) -> Result<f64, LikError> {
    let segs = hazard_segments(subject, params.beta.len())?;
    let seg = segs
        .iter()
        .rev()
        .find(|s| s.lower < t)
        .unwrap_or(&segs[0]);
    let rate = spec.with_coefficients(&params.xi)?.rate(t)?;
    if rate <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let lin = segment_linear(seg, params) + dot(&params.theta_a, a);
    Ok(rate.ln() + lin - cum_hazard_to(subject, a, params, t, spec)?)
}

// ---------------------------------------------------------------------------
// Prepared evaluation.

#[derive(Debug, Clone)]
struct PrepVisit {
    pattern: usize,
    /// Observed markers, zero where missing.
    y: Vec<f64>,
    x: Vec<f64>,
    z: f64,
}

#[derive(Debug, Clone)]
struct PrepSegment {
    s: Vec<f64>,
    m: Vec<f64>,
    lower: BasisRow<f64>,
    /// Upper end clamped to `V`.
    upper: BasisRow<f64>,
}

#[derive(Debug, Clone)]
struct PrepNode {
    log_w: f64,
    row: BasisRow<f64>,
    /// `g(t_j − e)` for each phase-2 visit.
    shift: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PrepSubject {
    id: String,
    delta: bool,
    phase1: Vec<PrepVisit>,
    phase2: Vec<PrepVisit>,
    segments: Vec<PrepSegment>,
    v_row: BasisRow<f64>,
    nodes: Vec<PrepNode>,
    /// GL weights normalized to sum to one, for centering.
    node_share: Vec<f64>,
}

/// Per-parameter quantities shared by all subjects.
struct ParamCache<'a> {
    k: usize,
    hazard: SplineHazard<'a, f64>,
    beta: &'a [Vec<f64>],
    gamma: &'a [f64],
    theta_x: &'a [f64],
    theta_a: &'a [f64],
    theta_m: &'a [f64],
    /// Embedded precision (K×K, zero rows for missing) and
    /// `−½(n_obs·log 2π + log det Σ_o)` per missingness pattern.
    precision: Vec<(Vec<f64>, f64)>,
    sa_factor: Vec<f64>,
    sa_inv: Vec<f64>,
    sa_logdet: f64,
}

const PRUNE_REL: f64 = 1e-14;

/// Log-likelihood evaluator with per-subject data prepared once.
pub struct JointLikelihood {
    ctx: LikContext,
    layout: Layout,
    panel_dim: usize,
    patterns: Vec<u64>,
    subjects: Vec<PrepSubject>,
    grid: HermiteGrid<f64>,
    unit_gl: QuadRule<f64>,
}

impl JointLikelihood {
    pub fn new(dataset: &Dataset, ctx: &LikContext) -> Result<Self, LikError> {
        ctx.check()?;
        if dataset.re_dim != 1 {
            return Err(LikError::UnsupportedReDim(dataset.re_dim));
        }
        let k = dataset.panel_dim;
        let unit_gl = gauss_legendre::<f64>(ctx.gl_nodes, 0.0, 1.0)?;
        let mut grid = HermiteGrid::tensor(ctx.gh_nodes, k)?;
        if ctx.hermite == HermiteMode::Centered {
            // the centered integrand is close to the Gaussian weight, so
            // nodes below 1e-14 of the peak weight cannot contribute
            grid = grid.pruned(PRUNE_REL);
        }
        let mut patterns: Vec<u64> = Vec::new();
        let mut subjects = Vec::with_capacity(dataset.len());
        for s in &dataset.subjects {
            subjects.push(prepare_subject(s, k, ctx, &unit_gl, &mut patterns)?);
        }
        Ok(JointLikelihood {
            ctx: ctx.clone(),
            layout: dataset.layout(ctx.spec.basis_count()),
            panel_dim: k,
            patterns,
            subjects,
            grid,
            unit_gl,
        })
    }

    pub fn context(&self) -> &LikContext {
        &self.ctx
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject_id(&self, i: usize) -> &str {
        &self.subjects[i].id
    }

    pub fn gl_rule(&self) -> &QuadRule<f64> {
        &self.unit_gl
    }

    fn cache<'a>(&'a self, params: &'a Parameters) -> Result<Option<ParamCache<'a>>, LikError> {
        params.check_shape(&self.layout)?;
        if !params.is_finite() {
            return Err(LikError::NonFiniteParameters);
        }
        if !sigma_e_usable(params) {
            return Ok(None);
        }
        let k = self.panel_dim;
        let sigma_e = params.sigma_e();
        let mut precision = Vec::with_capacity(self.patterns.len());
        for &mask in &self.patterns {
            let obs: Vec<usize> = (0..k).filter(|&j| mask >> j & 1 == 1).collect();
            let m = obs.len();
            let mut emb = vec![0.0; k * k];
            if m == 0 {
                precision.push((emb, 0.0));
                continue;
            }
            let mut sub = vec![0.0; m * m];
            for (p, &i) in obs.iter().enumerate() {
                for (q, &j) in obs.iter().enumerate() {
                    sub[p * m + q] = sigma_e[i * k + j];
                }
            }
            let Some(l) = cholesky(&sub, m) else {
                return Ok(None);
            };
            let inv = chol_inverse(&l, m);
            for (p, &i) in obs.iter().enumerate() {
                for (q, &j) in obs.iter().enumerate() {
                    emb[i * k + j] = inv[p * m + q];
                }
            }
            precision.push((emb, -0.5 * (m as f64 * LN_2PI + chol_logdet(&l, m))));
        }
        let sa_factor = params.chol_a.factor();
        let Some(sa_chol) = cholesky(&params.sigma_a(), k) else {
            return Ok(None);
        };
        Ok(Some(ParamCache {
            k,
            hazard: self.ctx.spec.with_coefficients(&params.xi)?,
            beta: &params.beta,
            gamma: &params.gamma,
            theta_x: &params.theta_x,
            theta_a: &params.theta_a,
            theta_m: &params.theta_m,
            precision,
            sa_inv: chol_inverse(&sa_chol, k),
            sa_logdet: chol_logdet(&sa_chol, k),
            sa_factor,
        }))
    }

    /// Log-likelihood contribution of every subject, in dataset order.
    pub fn per_subject(&self, params: &Parameters) -> Result<Vec<f64>, LikError> {
        let Some(cache) = self.cache(params)? else {
            return Ok(vec![f64::NEG_INFINITY; self.subjects.len()]);
        };
        Ok(self
            .subjects
            .par_iter()
            .map(|s| {
                let v = self.eval_subject(s, &cache);
                if v.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    v
                }
            })
            .collect())
    }

    pub fn subject(&self, i: usize, params: &Parameters) -> Result<f64, LikError> {
        let Some(cache) = self.cache(params)? else {
            return Ok(f64::NEG_INFINITY);
        };
        let v = self.eval_subject(&self.subjects[i], &cache);
        Ok(if v.is_nan() { f64::NEG_INFINITY } else { v })
    }

    /// Compensated sum of the per-subject values; a `-inf` contribution is
    /// an error naming the first offending subject.
    pub fn total(&self, params: &Parameters) -> Result<f64, LikError> {
        let per = self.per_subject(params)?;
        if let Some(i) = per.iter().position(|v| *v == f64::NEG_INFINITY) {
            return Err(LikError::Degenerate {
                subject: self.subjects[i].id.clone(),
            });
        }
        Ok(compensated_sum(per))
    }

    fn eval_subject(&self, s: &PrepSubject, c: &ParamCache<'_>) -> f64 {
        let k = c.k;
        // accumulate c + hᵀa − ½aᵀHa over a visit set with a per-visit offset
        let gaussian = |visits: &[PrepVisit], shift: Option<&[f64]>, h: &mut [f64], hh: Option<&mut [f64]>| -> f64 {
            let mut cst = 0.0;
            let mut hh = hh;
            let mut r = vec![0.0; k];
            let mut pr = vec![0.0; k];
            for (j, v) in visits.iter().enumerate() {
                let mask = self.patterns[v.pattern];
                let (prec, lc) = &c.precision[v.pattern];
                for b in 0..k {
                    r[b] = if mask >> b & 1 == 1 {
                        let mut mu = dot(&v.x, &c.beta[b]);
                        if let Some(g) = shift {
                            mu += c.gamma[b] * g[j];
                        }
                        v.y[b] - mu
                    } else {
                        0.0
                    };
                }
                for p in 0..k {
                    pr[p] = (0..k).map(|q| prec[p * k + q] * r[q]).sum();
                }
                cst += lc - 0.5 * dot(&r, &pr);
                for p in 0..k {
                    h[p] += v.z * pr[p];
                }
                if let Some(hh) = hh.as_deref_mut() {
                    for p in 0..k {
                        for q in 0..k {
                            hh[p * k + q] += v.z * v.z * prec[p * k + q];
                        }
                    }
                }
            }
            cst
        };

        let mut h1 = vec![0.0; k];
        let mut hq = vec![0.0; k * k];
        let c1 = gaussian(&s.phase1, None, &mut h1, Some(&mut hq));

        // hazard pieces: Λ(t|a) = exp(θ_aᵀa)·C(t)
        let mut c_v = 0.0;
        let mut lin_last = 0.0;
        for seg in &s.segments {
            let lin = dot(c.theta_x, &seg.s) + dot(c.theta_m, &seg.m);
            let d = c.hazard.cumulative_at_row(&seg.upper) - c.hazard.cumulative_at_row(&seg.lower);
            c_v += lin.exp() * d;
            lin_last = lin;
        }

        // phase-2 and event pieces per GL node, stored flat:
        // term_l(a) = base_l + h_lᵀa − exp(θ_aᵀa)·cum_l
        let m = s.nodes.len();
        let mut base = Vec::with_capacity(m);
        let mut hmat = Vec::with_capacity(m * k);
        let mut cum = Vec::with_capacity(m);
        let mut h_center = h1.clone();
        if s.delta {
            let lam_v = c.hazard.cumulative_at_row(&s.v_row);
            let m_last = lin_last.exp();
            let mut h2 = vec![0.0; k];
            for (l, (nd, &share)) in s.nodes.iter().zip(&s.node_share).enumerate() {
                h2.iter_mut().for_each(|x| *x = 0.0);
                let c2 = gaussian(&s.phase2, Some(&nd.shift), &mut h2, if l == 0 { Some(&mut hq) } else { None });
                let rate = c.hazard.rate_at_row(&nd.row);
                cum.push(c_v + m_last * (c.hazard.cumulative_at_row(&nd.row) - lam_v));
                for p in 0..k {
                    h_center[p] += share * h2[p];
                }
                hmat.extend_from_slice(&h2);
                base.push(nd.log_w + c2 + rate.ln() + lin_last);
            }
        }

        let mut buf = vec![0.0; m];
        let mut log_f = |a: &[f64]| -> f64 {
            let gauss = c1 + dot(&h1, a) - 0.5 * quad_form(&hq, k, a);
            let ta = dot(c.theta_a, a);
            let big_a = ta.exp();
            if !s.delta {
                return gauss - big_a * c_v;
            }
            let mut max = f64::NEG_INFINITY;
            for l in 0..m {
                let mut t = base[l] - big_a * cum[l];
                for (hp, ap) in hmat[l * k..(l + 1) * k].iter().zip(a) {
                    t += hp * ap;
                }
                buf[l] = t;
                if t > max {
                    max = t;
                }
            }
            if max == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let sum: f64 = buf.iter().map(|t| (t - max).exp()).sum();
            gauss + ta + max + sum.ln()
        };

        let grid = &self.grid;
        let mut a = vec![0.0; k];
        let mut vals = Vec::with_capacity(grid.len());
        let sqrt2 = std::f64::consts::SQRT_2;
        match self.ctx.hermite {
            HermiteMode::Plain => {
                let l = &c.sa_factor;
                for i in 0..grid.len() {
                    let u = &grid.nodes[i * k..(i + 1) * k];
                    for p in 0..k {
                        a[p] = sqrt2 * (0..=p).map(|q| l[p * k + q] * u[q]).sum::<f64>();
                    }
                    vals.push(grid.log_weights[i] + log_f(&a));
                }
            }
            HermiteMode::Centered => {
                let mut htot = hq.clone();
                for p in 0..k * k {
                    htot[p] += c.sa_inv[p];
                }
                let Some(g) = cholesky(&htot, k) else {
                    return f64::NEG_INFINITY;
                };
                let mut mu = h_center.clone();
                crate::linalg::chol_solve(&g, k, &mut mu);
                // log N(a; μ, RRᵀ) with R = G⁻ᵀ is −(K/2)log 2π + log det G − |u|²
                let log_det_g = 0.5 * chol_logdet(&g, k);
                let prior_c = -0.5 * (k as f64 * LN_2PI + c.sa_logdet);
                let q_c = -0.5 * k as f64 * LN_2PI + log_det_g;
                let mut ru = vec![0.0; k];
                for i in 0..grid.len() {
                    let u = &grid.nodes[i * k..(i + 1) * k];
                    ru.copy_from_slice(u);
                    chol_solve_upper(&g, k, &mut ru);
                    for p in 0..k {
                        a[p] = mu[p] + sqrt2 * ru[p];
                    }
                    let log_prior = prior_c - 0.5 * quad_form(&c.sa_inv, k, &a);
                    let log_q = q_c - grid.sq_norms[i];
                    vals.push(grid.log_weights[i] + log_f(&a) + log_prior - log_q);
                }
            }
        }
        crate::linalg::log_sum_exp(&vals)
    }
}

fn prepare_visit(v: &Visit, k: usize, patterns: &mut Vec<u64>) -> PrepVisit {
    let mask = v.observed_mask();
    let pattern = match patterns.iter().position(|&m| m == mask) {
        Some(p) => p,
        None => {
            patterns.push(mask);
            patterns.len() - 1
        }
    };
    PrepVisit {
        pattern,
        y: (0..k).map(|j| v.markers[j].unwrap_or(0.0)).collect(),
        x: v.covariates_x.clone(),
        z: v.covariates_z.first().copied().unwrap_or(1.0),
    }
}

fn prepare_subject(
    s: &Subject,
    k: usize,
    ctx: &LikContext,
    unit_gl: &QuadRule<f64>,
    patterns: &mut Vec<u64>,
) -> Result<PrepSubject, LikError> {
    let spec = &ctx.spec;
    let phase1: Vec<PrepVisit> = s.phase1_visits().map(|v| prepare_visit(v, k, patterns)).collect();
    let p2: Vec<&Visit> = if s.delta { s.phase2_visits().collect() } else { Vec::new() };
    let phase2: Vec<PrepVisit> = p2.iter().map(|v| prepare_visit(v, k, patterns)).collect();
    let v = s.bracket_v;
    let mut segments = Vec::new();
    for seg in hazard_segments(s, k)? {
        if seg.lower > v {
            break;
        }
        segments.push(PrepSegment {
            lower: spec.basis_row(seg.lower)?,
            upper: spec.basis_row(seg.upper.min(v))?,
            s: seg.covariates,
            m: seg.markers,
        });
    }
    let v_row = spec.basis_row(v)?;
    let mut nodes = Vec::new();
    let mut node_share = Vec::new();
    if s.delta {
        let u = s.bracket_u;
        let rule = unit_gl.mapped_from_unit(v, u);
        let wsum: f64 = rule.weights.iter().sum();
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            nodes.push(PrepNode {
                log_w: w.ln(),
                row: spec.basis_row(t)?,
                shift: p2.iter().map(|vis| ctx.changepoint_shape.eval(vis.time - t)).collect(),
            });
            node_share.push(w / wsum);
        }
    }
    Ok(PrepSubject {
        id: s.id.clone(),
        delta: s.delta,
        phase1,
        phase2,
        segments,
        v_row,
        nodes,
        node_share,
    })
}

fn single_dataset(subject: &Subject, params: &Parameters) -> Dataset {
    let l = params.layout();
    Dataset {
        subjects: vec![subject.clone()],
        panel_dim: l.panel_dim,
        fixed_dim: l.fixed_dim,
        hazard_dim: l.hazard_dim,
        re_dim: subject
            .visits
            .first()
            .map_or(1, |v| v.covariates_z.len().max(1)),
    }
}

/// Log-likelihood contribution of one subject.
pub fn subject_loglik(subject: &Subject, params: &Parameters, ctx: &LikContext) -> Result<f64, LikError> {
    let lik = JointLikelihood::new(&single_dataset(subject, params), ctx)?;
    lik.subject(0, params)
}

pub fn per_subject_loglik(dataset: &Dataset, params: &Parameters, ctx: &LikContext) -> Result<Vec<f64>, LikError> {
    JointLikelihood::new(dataset, ctx)?.per_subject(params)
}

pub fn total_loglik(dataset: &Dataset, params: &Parameters, ctx: &LikContext) -> Result<f64, LikError> {
    JointLikelihood::new(dataset, ctx)?.total(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LogCholesky, Visit};

    fn visit(t: f64, m: &[Option<f64>], x: f64) -> Visit {
        Visit {
            time: t,
            markers: m.to_vec(),
            covariates_x: vec![1.0, t, x],
            covariates_s: vec![x],
            covariates_z: vec![1.0],
        }
    }

    fn params2(spec: &SplineSpec<f64>) -> Parameters {
        Parameters {
            xi: vec![-3.0; spec.basis_count()],
            beta: vec![vec![5.0, -0.2, -0.3], vec![5.0, -0.2, -0.3]],
            gamma: vec![-0.4, -0.4],
            theta_x: vec![0.3],
            theta_a: vec![0.1, 0.1],
            theta_m: vec![-0.2, -0.2],
            chol_a: LogCholesky::from_covariance(&[0.5, 0.1, 0.1, 0.5], 2).unwrap(),
            chol_e: LogCholesky::from_covariance(&[0.5, 0.1414, 0.1414, 1.0], 2).unwrap(),
        }
    }

    fn spec() -> SplineSpec<f64> {
        SplineSpec::new(vec![2.0, 4.0, 6.0], 10.1).unwrap()
    }

    fn event_subject() -> Subject {
        let x = 0.4;
        let times = [0.0, 1.1, 2.0, 2.9, 4.1, 5.0, 6.2];
        let visits = times
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let shift = if t >= 4.1 { -0.4 * (t - 3.5) } else { 0.0 };
                let m1 = 5.0 - 0.2 * t - 0.3 * x + 0.2 + shift + 0.1 * (j as f64).sin();
                let m2 = 5.0 - 0.2 * t - 0.3 * x - 0.1 + shift + 0.2 * (j as f64).cos();
                visit(t, &[Some(m1), if j == 3 { None } else { Some(m2) }], x)
            })
            .collect();
        Subject {
            id: "e1".into(),
            visits,
            bracket_v: 2.9,
            bracket_u: 4.1,
            delta: true,
        }
    }

    #[test]
    fn univariate_zero_residual() {
        let v = visit(0.0, &[Some(1.0)], 0.0);
        let s = Subject {
            id: "a".into(),
            visits: vec![v.clone(), visit(1.0, &[Some(1.0)], 0.0)],
            bracket_v: 1.0,
            bracket_u: f64::INFINITY,
            delta: false,
        };
        let p = Parameters {
            xi: vec![0.0; 4],
            beta: vec![vec![1.0, 0.0, 0.0]],
            gamma: vec![0.0],
            theta_x: vec![0.0],
            theta_a: vec![0.0],
            theta_m: vec![0.0],
            chol_a: LogCholesky::zeros(1),
            chol_e: LogCholesky::zeros(1),
        };
        let got = phase1_logdensity(&s, &[0.0], &p);
        assert!((got - 2.0 * (-0.5 * LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn diagonal_sigma_factorizes() {
        let sp = spec();
        let mut p = params2(&sp);
        p.chol_e = LogCholesky::from_covariance(&[0.5, 0.0, 0.0, 1.0], 2).unwrap();
        let s = event_subject();
        let a = [0.3, -0.2];
        let joint = phase1_logdensity(&s, &a, &p);
        let mut sep = 0.0;
        for v in s.phase1_visits() {
            for (k, var) in [(0usize, 0.5f64), (1, 1.0)] {
                if let Some(m) = v.markers[k] {
                    let mu = dot(&v.covariates_x, &p.beta[k]) + a[k];
                    sep += -0.5 * (LN_2PI + var.ln() + (m - mu).powi(2) / var);
                }
            }
        }
        assert!((joint - sep).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_phase2_equals_phase1_form() {
        let sp = spec();
        let mut p = params2(&sp);
        p.gamma = vec![0.0, 0.0];
        let s = event_subject();
        let mut s2 = s.clone();
        s2.bracket_v = 10.0;
        s2.visits.retain(|v| v.time >= s.bracket_u);
        let a = [0.1, 0.2];
        let lhs = phase2_logdensity(&s, &a, &p, 3.5, ChangePointShape::Linear);
        let rhs = phase1_logdensity(&s2, &a, &p);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_reduce_to_baseline() {
        let sp = spec();
        let mut p = params2(&sp);
        p.theta_a = vec![0.0, 0.0];
        p.theta_m = vec![0.0, 0.0];
        p.theta_x = vec![0.0];
        let s = event_subject();
        for t in [0.5, 2.9, 3.3] {
            let got = cum_hazard_to(&s, &[0.5, 0.5], &p, t, &sp).unwrap();
            let want = crate::spline::cumulative_hazard(&sp, &p.xi, t).unwrap() - crate::spline::cumulative_hazard(&sp, &p.xi, 0.0).unwrap();
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn event_density_outside_bracket_is_error() {
        let sp = spec();
        let ctx = LikContext::new(sp.clone());
        let s = event_subject();
        assert!(event_logdensity(2.0, &s, &[0.0, 0.0], &params2(&sp), &ctx).is_err());
        assert!(event_logdensity(3.0, &s, &[0.0, 0.0], &params2(&sp), &ctx).is_ok());
    }

    #[test]
    fn proportional_hazard_shift() {
        let sp = spec();
        let ctx = LikContext::new(sp.clone());
        let s = event_subject();
        let p = params2(&sp);
        let t = 3.4;
        let a0 = [0.0, 0.0];
        let a1 = [0.5, 0.0];
        let d = 0.1 * 0.5;
        let f0 = event_logdensity(t, &s, &a0, &p, &ctx).unwrap() + cum_hazard_to(&s, &a0, &p, t, &sp).unwrap();
        let f1 = event_logdensity(t, &s, &a1, &p, &ctx).unwrap() + cum_hazard_to(&s, &a1, &p, t, &sp).unwrap();
        assert!((f1 - f0 - d).abs() < 1e-12);
    }

    #[test]
    fn missing_first_marker_is_error_for_hazard() {
        let sp = spec();
        let mut s = event_subject();
        s.visits[0].markers[1] = None;
        assert!(matches!(hazard_segments(&s, 2), Err(LikError::NoPriorMarker { .. })));
        let mut s = event_subject();
        s.visits[1].markers[1] = None;
        let segs = hazard_segments(&s, 2).unwrap();
        assert_eq!(segs[1].markers[1], segs[0].markers[1]);
        let _ = sp;
    }

    /// Moderate-accuracy direct evaluation via the standalone factors and
    /// a wide tensor GH rule, checking the prepared path's assembly.
    #[test]
    fn prepared_path_matches_factor_assembly() {
        let sp = spec();
        let p = params2(&sp);
        let s = event_subject();
        let mut ctx = LikContext::new(sp.clone());
        ctx.hermite = HermiteMode::Plain;
        let got = subject_loglik(&s, &p, &ctx).unwrap();
        let grid = HermiteGrid::<f64>::tensor(20, 2).unwrap();
        let l = p.chol_a.factor();
        let gl = gauss_legendre::<f64>(20, s.bracket_v, s.bracket_u).unwrap();
        let mut vals = Vec::new();
        for i in 0..grid.len() {
            let u = &grid.nodes[2 * i..2 * i + 2];
            let a = [
                std::f64::consts::SQRT_2 * l[0] * u[0],
                std::f64::consts::SQRT_2 * (l[2] * u[0] + l[3] * u[1]),
            ];
            let inner: Vec<f64> = gl
                .nodes
                .iter()
                .zip(&gl.weights)
                .map(|(&t, &w)| {
                    w.ln()
                        + phase2_logdensity(&s, &a, &p, t, ChangePointShape::Linear)
                        + event_logdensity(t, &s, &a, &p, &ctx).unwrap()
                })
                .collect();
            vals.push(grid.log_weights[i] + phase1_logdensity(&s, &a, &p) + crate::linalg::log_sum_exp(&inner));
        }
        let want = crate::linalg::log_sum_exp(&vals);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn censored_subject_assembly_and_centering() {
        let sp = spec();
        let p = params2(&sp);
        let mut s = event_subject();
        s.bracket_v = 6.2;
        s.bracket_u = f64::INFINITY;
        s.delta = false;
        let mut ctx = LikContext::new(sp.clone());
        let centered = subject_loglik(&s, &p, &ctx).unwrap();
        ctx.hermite = HermiteMode::Plain;
        ctx.gh_nodes = 60;
        let plain_fine = subject_loglik(&s, &p, &ctx).unwrap();
        assert!((centered - plain_fine).abs() < 1e-6, "{centered} {plain_fine}");
    }

    #[test]
    fn centered_rule_is_refinement_stable() {
        let sp = spec();
        let p = params2(&sp);
        let s = event_subject();
        let mut ctx = LikContext::new(sp);
        let base = subject_loglik(&s, &p, &ctx).unwrap();
        ctx.gl_nodes = 40;
        ctx.gh_nodes = 40;
        let fine = subject_loglik(&s, &p, &ctx).unwrap();
        assert!((base - fine).abs() < 1e-6, "{base} {fine}");
    }

    #[test]
    fn singular_sigma_e_gives_neg_inf() {
        let sp = spec();
        let mut p = params2(&sp);
        p.chol_e = LogCholesky::from_covariance(&[1.0, 1.0 - 1e-13, 1.0 - 1e-13, 1.0], 2).unwrap();
        let v = subject_loglik(&event_subject(), &p, &LikContext::new(sp)).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let sp = spec();
        let mut p = params2(&sp);
        p.gamma[0] = f64::NAN;
        assert!(matches!(
            subject_loglik(&event_subject(), &p, &LikContext::new(sp)),
            Err(LikError::NonFiniteParameters)
        ));
    }

    #[test]
    fn node_count_checked() {
        let mut ctx = LikContext::new(spec());
        ctx.gl_nodes = 1;
        assert!(ctx.check().is_err());
    }
}
