//! Data generation under the simulation design: jittered annual visits,
//! Gaussian random intercepts, proportional-hazards onset driven by the
//! noisy marker at the previous visit, and a post-onset slope change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::ChangePointShape;
use crate::linalg::cholesky;
use crate::model::{Dataset, LogCholesky, ModelError, Parameters, Subject, Visit};
use crate::spline::{project_monotone, SplineError, SplineSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n must be at least 1")]
    EmptySample,
    #[error("visit_count must be at least 2, got {0}")]
    VisitCount(usize),
    #[error("{0} is not symmetric positive definite")]
    NotSpd(&'static str),
    #[error("truth has inconsistent dimensions: {0}")]
    Shape(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Baseline hazard of the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineHazard {
    /// `Λ₀(t) = (scale·t)^shape`.
    Weibull { scale: f64, shape: f64 },
    /// Monotone spline `Λ₀(t) − Λ₀(0)`, extended flat beyond `τ`.
    Spline { spec: SplineSpec<f64>, xi: Vec<f64> },
}

impl Default for BaselineHazard {
    fn default() -> Self {
        BaselineHazard::Weibull { scale: 0.2, shape: 1.5 }
    }
}

impl BaselineHazard {
    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            BaselineHazard::Weibull { scale, shape } => (scale * t.max(0.0)).powf(*shape),
            BaselineHazard::Spline { spec, xi } => {
                let h = spec.with_coefficients(xi).expect("validated coefficients");
                let tt = t.clamp(0.0, spec.tau());
                h.cumulative(tt).unwrap() - h.cumulative(0.0).unwrap()
            }
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        match self {
            BaselineHazard::Weibull { scale, shape } => scale * shape * (scale * t.max(0.0)).powf(shape - 1.0),
            BaselineHazard::Spline { spec, xi } => {
                if t > spec.tau() {
                    return 0.0;
                }
                spec.with_coefficients(xi).unwrap().rate(t.max(0.0)).unwrap()
            }
        }
    }

    /// Smallest `t` with `Λ₀(t) ≥ target`, `inf` when never reached.
    pub fn inverse(&self, target: f64) -> f64 {
        match self {
            BaselineHazard::Weibull { scale, shape } => target.max(0.0).powf(1.0 / shape) / scale,
            BaselineHazard::Spline { spec, .. } => {
                let tau = spec.tau();
                if self.cumulative(tau) < target {
                    return f64::INFINITY;
                }
                let (mut lo, mut hi) = (0.0, tau);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cumulative(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-14 * tau {
                        break;
                    }
                }
                hi
            }
        }
    }
}

/// Generating parameters. Marker `k` has mean `β0_k + β1_k·t + β2_k·X + a_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    /// Per biomarker `[β0, β1, β2]`.
    pub beta: Vec<[f64; 3]>,
    pub gamma: Vec<f64>,
    pub theta_x: f64,
    pub theta_a: Vec<f64>,
    pub theta_m: Vec<f64>,
    /// Row-major `K × K`.
    pub sigma_a: Vec<f64>,
    pub sigma_e: Vec<f64>,
    #[serde(default)]
    pub baseline: BaselineHazard,
}

impl Default for TrueModel {
    fn default() -> Self {
        let c = std::f64::consts::SQRT_2 / 10.0;
        TrueModel {
            beta: vec![[5.0, -0.2, -0.3], [5.0, -0.2, -0.3]],
            gamma: vec![-0.4, -0.4],
            theta_x: 0.3,
            theta_a: vec![0.1, 0.1],
            theta_m: vec![-0.2, -0.2],
            sigma_a: vec![0.5, 0.1, 0.1, 0.5],
            sigma_e: vec![0.5, c, c, 1.0],
            baseline: BaselineHazard::default(),
        }
    }
}

impl TrueModel {
    pub fn panel_dim(&self) -> usize {
        self.beta.len()
    }

    /// Same model with all hazard regression coefficients set to zero.
    pub fn null_hazard(&self) -> Self {
        let k = self.panel_dim();
        TrueModel {
            theta_x: 0.0,
            theta_a: vec![0.0; k],
            theta_m: vec![0.0; k],
            ..self.clone()
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        let k = self.panel_dim();
        if k == 0 || k > 16 {
            return Err(SimError::Shape(format!("panel dimension {k}")));
        }
        for (name, len) in [("gamma", self.gamma.len()), ("theta_a", self.theta_a.len()), ("theta_m", self.theta_m.len())] {
            if len != k {
                return Err(SimError::Shape(format!("{name} has length {len}, expected {k}")));
            }
        }
        if self.sigma_a.len() != k * k || cholesky(&self.sigma_a, k).is_none() {
            return Err(SimError::NotSpd("sigma_a"));
        }
        if self.sigma_e.len() != k * k || cholesky(&self.sigma_e, k).is_none() {
            return Err(SimError::NotSpd("sigma_e"));
        }
        if let BaselineHazard::Spline { spec, xi } = &self.baseline {
            spec.with_coefficients(xi)?;
        }
        Ok(())
    }

    /// Packed-coordinate truth for a fit with spline `spec`: regression and
    /// covariance blocks exactly, ξ from a monotone least-squares projection
    /// of `Λ₀` on a 400-point grid over `[0, τ]`.
    pub fn parameters(&self, spec: &SplineSpec<f64>) -> Result<Parameters, SimError> {
        self.check()?;
        let k = self.panel_dim();
        let tau = spec.tau();
        let grid: Vec<f64> = (0..400).map(|i| (tau * i as f64 / 399.0).min(tau)).collect();
        let xi = project_monotone(spec, &grid, |t| self.baseline.cumulative(t), 1e-8)?;
        Ok(Parameters {
            xi,
            beta: self.beta.iter().map(|b| b.to_vec()).collect(),
            gamma: self.gamma.clone(),
            theta_x: vec![self.theta_x],
            theta_a: self.theta_a.clone(),
            theta_m: self.theta_m.clone(),
            chol_a: LogCholesky::from_covariance(&self.sigma_a, k)?,
            chol_e: LogCholesky::from_covariance(&self.sigma_e, k)?,
        })
    }

    /// The 13 regression coefficients in table order: per biomarker
    /// `β0, β1, β2, γ`, then `θ_x`, `θ_m`, `θ_a`.
    pub fn table_values(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (b, g) in self.beta.iter().zip(&self.gamma) {
            v.extend_from_slice(b);
            v.push(*g);
        }
        v.push(self.theta_x);
        v.extend_from_slice(&self.theta_m);
        v.extend_from_slice(&self.theta_a);
        v
    }
}

/// Whether the covariate spread parameter is a variance or a standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    #[default]
    Variance,
    StdDev,
}

fn default_visit_count() -> usize {
    11
}
fn default_jitter() -> f64 {
    0.2
}
fn default_spread() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    #[serde(default)]
    pub truth: TrueModel,
    /// Visits per subject including the baseline at `t = 0`.
    #[serde(default = "default_visit_count")]
    pub visit_count: usize,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_spread")]
    pub covariate_spread: f64,
    #[serde(default)]
    pub spread_kind: SpreadKind,
    #[serde(default)]
    pub changepoint_shape: ChangePointShape,
}

impl SimConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        SimConfig {
            n,
            truth: TrueModel::default(),
            visit_count: default_visit_count(),
            jitter: default_jitter(),
            seed,
            covariate_spread: default_spread(),
            spread_kind: SpreadKind::Variance,
            changepoint_shape: ChangePointShape::Linear,
        }
    }

    pub fn covariate_sd(&self) -> f64 {
        match self.spread_kind {
            SpreadKind::Variance => self.covariate_spread.sqrt(),
            SpreadKind::StdDev => self.covariate_spread,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::EmptySample);
        }
        if self.visit_count < 2 {
            return Err(SimError::VisitCount(self.visit_count));
        }
        self.truth.check()
    }
}

/// Hidden per-subject quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub covariate: f64,
    pub random_effects: Vec<f64>,
    /// `inf` when the onset would occur after the last visit.
    pub event_time: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub truth: Vec<SubjectTruth>,
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `index` under `master`: `splitmix64(master + index·φ)`
/// with `φ = 0x9E3779B97F4A7C15`. Tags separate unrelated streams drawn
/// from the same master (simulation, bootstrap).
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Generator of subject `index`: ChaCha8 seeded with `seed`, stream `index`.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Baseline `0` followed by `t_j ~ U(j − jitter, j + jitter)`.
pub fn gen_visit_times<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Vec<f64> {
    let mut t = Vec::with_capacity(config.visit_count);
    t.push(0.0);
    for j in 1..config.visit_count {
        let c = j as f64;
        t.push(if config.jitter > 0.0 {
            rng.random_range(c - config.jitter..=c + config.jitter)
        } else {
            c
        });
    }
    t
}

fn mvn_draw<R: Rng + ?Sized>(chol: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    (0..k)
        .map(|i| (0..=i).map(|j| chol[i * k + j] * z[j]).sum())
        .collect()
}

/// Piecewise-constant multiplier event sampler: segment `j` covers
/// `(t_j, t_{j+1}]` with multiplier `mult[j]`, the last segment is unbounded.
/// Returns the time at which the cumulative hazard reaches `target`.
pub fn invert_piecewise(times: &[f64], mult: &[f64], baseline: &BaselineHazard, target: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..times.len() {
        let lo = if j == 0 { 0.0 } else { times[j] };
        let hi = times.get(j + 1).copied().unwrap_or(f64::INFINITY);
        let l_lo = baseline.cumulative(lo);
        let piece = if hi.is_finite() {
            mult[j] * (baseline.cumulative(hi) - l_lo)
        } else {
            f64::INFINITY
        };
        if acc + piece >= target {
            return baseline.inverse(l_lo + (target - acc) / mult[j]).max(lo);
        }
        acc += piece;
    }
    f64::INFINITY
}

/// Draws one subject with the generator for `index`.
pub fn gen_subject(config: &SimConfig, index: usize, chol_a: &[f64], chol_e: &[f64]) -> (Subject, SubjectTruth) {
    let truth = &config.truth;
    let k = truth.panel_dim();
    let mut rng = subject_rng(config.seed, index as u64);
    let times = gen_visit_times(config, &mut rng);
    let x: f64 = config.covariate_sd() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let a = mvn_draw(chol_a, k, &mut rng);
    let clean: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| {
            let eps = mvn_draw(chol_e, k, &mut rng);
            (0..k)
                .map(|b| {
                    let bt = truth.beta[b];
                    bt[0] + bt[1] * t + bt[2] * x + a[b] + eps[b]
                })
                .collect()
        })
        .collect();
    let shared = truth.theta_x * x + a.iter().zip(&truth.theta_a).map(|(a, t)| a * t).sum::<f64>();
    let mult: Vec<f64> = clean
        .iter()
        .map(|m| (shared + m.iter().zip(&truth.theta_m).map(|(m, t)| m * t).sum::<f64>()).exp())
        .collect();
    let target: f64 = Exp1.sample(&mut rng);
    let mut event = invert_piecewise(&times, &mult, &truth.baseline, target);
    let last = *times.last().unwrap();
    if event > last {
        event = f64::INFINITY;
    }
    let visits: Vec<Visit> = times
        .iter()
        .zip(&clean)
        .map(|(&t, m)| {
            let g = if t >= event { config.changepoint_shape.eval(t - event) } else { 0.0 };
            Visit {
                time: t,
                markers: m.iter().zip(&truth.gamma).map(|(m, gk)| Some(m + gk * g)).collect(),
                covariates_x: vec![1.0, t, x],
                covariates_s: vec![x],
                covariates_z: vec![1.0],
            }
        })
        .collect();
    let (v, u, delta) = if event.is_finite() {
        let j = times.iter().position(|&t| t >= event).expect("event before last visit");
        (times[j - 1], times[j], true)
    } else {
        (last, f64::INFINITY, false)
    };
    let id = format!("{}", index + 1);
    (
        Subject {
            id: id.clone(),
            visits,
            bracket_v: v,
            bracket_u: u,
            delta,
        },
        SubjectTruth {
            id,
            covariate: x,
            random_effects: a,
            event_time: event,
        },
    )
}

/// `n` independent subjects; identical configs give bitwise-identical output.
pub fn gen_dataset(config: &SimConfig) -> Result<SimulatedData, SimError> {
    config.check()?;
    let k = config.truth.panel_dim();
    let chol_a = cholesky(&config.truth.sigma_a, k).ok_or(SimError::NotSpd("sigma_a"))?;
    let chol_e = cholesky(&config.truth.sigma_e, k).ok_or(SimError::NotSpd("sigma_e"))?;
    let (subjects, truth): (Vec<_>, Vec<_>) = (0..config.n)
        .into_par_iter()
        .map(|i| gen_subject(config, i, &chol_a, &chol_e))
        .collect::<Vec<_>>()
        .into_iter()
        .unzip();
    Ok(SimulatedData {
        dataset: Dataset {
            subjects,
            panel_dim: k,
            fixed_dim: 3,
            hazard_dim: 1,
            re_dim: 1,
        },
        truth,
    })
}
