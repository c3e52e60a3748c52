//! Data model and parameter vector of the joint model.
//!
//! A [`Subject`] carries its visit history and the censoring bracket `(V, U]`
//! of the event time. [`Parameters`] holds every model coefficient in the
//! unconstrained coordinates the optimizer works in: spline increments on the
//! log scale and log-Cholesky factors of both covariance matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("packed vector has length {got}, layout expects {expected}")]
    PackedLength { got: usize, expected: usize },
    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("covariance matrix must be {dim}x{dim}")]
    CovarianceShape { dim: usize },
    #[error("parameter block `{block}` has size {got}, expected {expected}")]
    BlockShape {
        block: &'static str,
        got: usize,
        expected: usize,
    },
}

/// One assessment time of a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time: f64,
    /// Biomarker panel; `None` marks a missing entry.
    pub markers: Vec<Option<f64>>,
    /// Fixed-effect design row (intercept, time and covariates as needed).
    pub covariates_x: Vec<f64>,
    /// Hazard covariate row.
    pub covariates_s: Vec<f64>,
    /// Random-effect design row.
    pub covariates_z: Vec<f64>,
}

impl Visit {
    pub fn observed_mask(&self) -> u64 {
        self.markers
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_some())
            .fold(0u64, |acc, (k, _)| acc | (1 << k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub visits: Vec<Visit>,
    /// Last assessment known to precede the event (`V`).
    pub bracket_v: f64,
    /// First assessment known to follow it (`U`); `+inf` when right-censored.
    pub bracket_u: f64,
    /// Event observed inside `(V, U]`.
    pub delta: bool,
}

impl Subject {
    /// Visits at or before `V`.
    pub fn phase1_visits(&self) -> impl Iterator<Item = &Visit> {
        let v = self.bracket_v;
        self.visits.iter().filter(move |vis| vis.time <= v)
    }

    /// Visits at or after `U`.
    pub fn phase2_visits(&self) -> impl Iterator<Item = &Visit> {
        let u = self.bracket_u;
        self.visits.iter().filter(move |vis| vis.time >= u)
    }

    pub fn last_time(&self) -> f64 {
        self.visits.last().map_or(0.0, |v| v.time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    /// Number of biomarkers `K`.
    pub panel_dim: usize,
    /// Fixed-effect design width `p`.
    pub fixed_dim: usize,
    /// Hazard covariate width `p_s`.
    pub hazard_dim: usize,
    /// Random-effect design width `q_z`.
    pub re_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.subjects.iter().filter(|s| s.delta).count()
    }

    /// Largest finite bracket endpoint or visit time.
    pub fn max_time(&self) -> f64 {
        self.subjects
            .iter()
            .flat_map(|s| {
                s.visits
                    .iter()
                    .map(|v| v.time)
                    .chain([s.bracket_v, s.bracket_u])
            })
            .filter(|t| t.is_finite())
            .fold(0.0, f64::max)
    }

    pub fn layout(&self, basis_count: usize) -> Layout {
        Layout {
            basis_count,
            panel_dim: self.panel_dim,
            fixed_dim: self.fixed_dim,
            hazard_dim: self.hazard_dim,
        }
    }

    /// Subset (with repetition) by subject index; ids get a draw suffix when
    /// an index repeats.
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        let mut seen = vec![0usize; self.subjects.len()];
        let subjects = indices
            .iter()
            .map(|&i| {
                let mut s = self.subjects[i].clone();
                if seen[i] > 0 {
                    s.id = format!("{}#{}", s.id, seen[i]);
                }
                seen[i] += 1;
                s
            })
            .collect();
        Dataset {
            subjects,
            ..self.clone_shape()
        }
    }

    fn clone_shape(&self) -> Dataset {
        Dataset {
            subjects: Vec::new(),
            panel_dim: self.panel_dim,
            fixed_dim: self.fixed_dim,
            hazard_dim: self.hazard_dim,
            re_dim: self.re_dim,
        }
    }
}

/// Lower-triangular Cholesky factor with log-parameterized diagonal, stored
/// row-major: `(0,0), (1,0), (1,1), (2,0), …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCholesky {
    pub dim: usize,
    pub entries: Vec<f64>,
}

impl LogCholesky {
    pub fn entry_count(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }

    pub fn zeros(dim: usize) -> Self {
        LogCholesky {
            dim,
            entries: vec![0.0; Self::entry_count(dim)],
        }
    }

    /// Factor of a row-major symmetric positive-definite `dim × dim` matrix.
    pub fn from_covariance(cov: &[f64], dim: usize) -> Result<Self, ModelError> {
        if cov.len() != dim * dim {
            return Err(ModelError::CovarianceShape { dim });
        }
        let l = linalg::cholesky(cov, dim).ok_or(ModelError::NotPositiveDefinite)?;
        let mut entries = Vec::with_capacity(Self::entry_count(dim));
        for i in 0..dim {
            for j in 0..=i {
                let v = l[i * dim + j];
                entries.push(if i == j { v.ln() } else { v });
            }
        }
        Ok(LogCholesky { dim, entries })
    }

    /// Row-major dense lower factor `L`.
    pub fn factor(&self) -> Vec<f64> {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        let mut idx = 0;
        for i in 0..n {
            for j in 0..=i {
                let v = self.entries[idx];
                l[i * n + j] = if i == j { v.exp() } else { v };
                idx += 1;
            }
        }
        l
    }

    /// `L Lᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        linalg::outer_lower(&self.factor(), self.dim)
    }
}

/// Dimensions that fix the packed parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Spline basis count `q_n`.
    pub basis_count: usize,
    pub panel_dim: usize,
    pub fixed_dim: usize,
    pub hazard_dim: usize,
}

/// Block boundaries inside the packed vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Offsets {
    pub xi: usize,
    pub beta: usize,
    pub gamma: usize,
    pub theta_x: usize,
    pub theta_a: usize,
    pub theta_m: usize,
    pub chol_a: usize,
    pub chol_e: usize,
    pub end: usize,
}

impl Layout {
    pub fn offsets(&self) -> Offsets {
        let k = self.panel_dim;
        let tri = LogCholesky::entry_count(k);
        let xi = 0;
        let beta = xi + self.basis_count;
        let gamma = beta + k * self.fixed_dim;
        let theta_x = gamma + k;
        let theta_a = theta_x + self.hazard_dim;
        let theta_m = theta_a + k;
        let chol_a = theta_m + k;
        let chol_e = chol_a + tri;
        Offsets {
            xi,
            beta,
            gamma,
            theta_x,
            theta_a,
            theta_m,
            chol_a,
            chol_e,
            end: chol_e + tri,
        }
    }

    pub fn packed_len(&self) -> usize {
        self.offsets().end
    }

    /// Human-readable name of every packed coordinate.
    pub fn names(&self) -> Vec<String> {
        let k = self.panel_dim;
        let mut out = Vec::with_capacity(self.packed_len());
        out.extend((0..self.basis_count).map(|j| format!("xi{}", j + 1)));
        for b in 0..k {
            out.extend((0..self.fixed_dim).map(|j| format!("beta{}_{}", b + 1, j)));
        }
        out.extend((0..k).map(|b| format!("gamma{}", b + 1)));
        out.extend((0..self.hazard_dim).map(|j| format!("theta_x{}", j + 1)));
        out.extend((0..k).map(|b| format!("theta_a{}", b + 1)));
        out.extend((0..k).map(|b| format!("theta_m{}", b + 1)));
        for label in ["chol_a", "chol_e"] {
            for i in 0..k {
                for j in 0..=i {
                    out.push(format!("{label}{}{}", i + 1, j + 1));
                }
            }
        }
        out
    }
}

/// Full sieve parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// Unconstrained spline coordinates; `α_j = Σ_{l≤j} exp(ξ_l)`.
    pub xi: Vec<f64>,
    /// `K × p` fixed effects, one row per biomarker.
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub theta_x: Vec<f64>,
    pub theta_a: Vec<f64>,
    pub theta_m: Vec<f64>,
    pub chol_a: LogCholesky,
    pub chol_e: LogCholesky,
}

impl Parameters {
    pub fn zeros(layout: &Layout) -> Self {
        let k = layout.panel_dim;
        Parameters {
            xi: vec![0.0; layout.basis_count],
            beta: vec![vec![0.0; layout.fixed_dim]; k],
            gamma: vec![0.0; k],
            theta_x: vec![0.0; layout.hazard_dim],
            theta_a: vec![0.0; k],
            theta_m: vec![0.0; k],
            chol_a: LogCholesky::zeros(k),
            chol_e: LogCholesky::zeros(k),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            basis_count: self.xi.len(),
            panel_dim: self.gamma.len(),
            fixed_dim: self.beta.first().map_or(0, |r| r.len()),
            hazard_dim: self.theta_x.len(),
        }
    }

    /// Flattens in the order ξ, β (row per biomarker), γ, θ_x, θ_a, θ_M,
    /// chol_a, chol_e.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().packed_len());
        out.extend_from_slice(&self.xi);
        for row in &self.beta {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.theta_x);
        out.extend_from_slice(&self.theta_a);
        out.extend_from_slice(&self.theta_m);
        out.extend_from_slice(&self.chol_a.entries);
        out.extend_from_slice(&self.chol_e.entries);
        out
    }

    pub fn unpack(layout: &Layout, packed: &[f64]) -> Result<Self, ModelError> {
        let o = layout.offsets();
        if packed.len() != o.end {
            return Err(ModelError::PackedLength {
                got: packed.len(),
                expected: o.end,
            });
        }
        let k = layout.panel_dim;
        let p = layout.fixed_dim;
        Ok(Parameters {
            xi: packed[o.xi..o.beta].to_vec(),
            beta: (0..k)
                .map(|b| packed[o.beta + b * p..o.beta + (b + 1) * p].to_vec())
                .collect(),
            gamma: packed[o.gamma..o.theta_x].to_vec(),
            theta_x: packed[o.theta_x..o.theta_a].to_vec(),
            theta_a: packed[o.theta_a..o.theta_m].to_vec(),
            theta_m: packed[o.theta_m..o.chol_a].to_vec(),
            chol_a: LogCholesky {
                dim: k,
                entries: packed[o.chol_a..o.chol_e].to_vec(),
            },
            chol_e: LogCholesky {
                dim: k,
                entries: packed[o.chol_e..o.end].to_vec(),
            },
        })
    }

    /// Checks every block against `layout`.
    pub fn check_shape(&self, layout: &Layout) -> Result<(), ModelError> {
        let k = layout.panel_dim;
        let tri = LogCholesky::entry_count(k);
        let checks: [(&'static str, usize, usize); 8] = [
            ("xi", self.xi.len(), layout.basis_count),
            ("beta", self.beta.len(), k),
            ("gamma", self.gamma.len(), k),
            ("theta_x", self.theta_x.len(), layout.hazard_dim),
            ("theta_a", self.theta_a.len(), k),
            ("theta_m", self.theta_m.len(), k),
            ("chol_a", self.chol_a.entries.len(), tri),
            ("chol_e", self.chol_e.entries.len(), tri),
        ];
        for (block, got, expected) in checks {
            if got != expected {
                return Err(ModelError::BlockShape {
                    block,
                    got,
                    expected,
                });
            }
        }
        for row in &self.beta {
            if row.len() != layout.fixed_dim {
                return Err(ModelError::BlockShape {
                    block: "beta",
                    got: row.len(),
                    expected: layout.fixed_dim,
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.pack().iter().all(|v| v.is_finite())
    }

    /// Monotone spline coefficients `α`.
    pub fn alpha(&self) -> Vec<f64> {
        monotone_coefficients(&self.xi)
    }

    pub fn sigma_a(&self) -> Vec<f64> {
        self.chol_a.covariance()
    }

    pub fn sigma_e(&self) -> Vec<f64> {
        self.chol_e.covariance()
    }
}

/// `α_j = Σ_{l≤j} exp(ξ_l)`.
pub fn monotone_coefficients(xi: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    xi.iter()
        .map(|&x| {
            acc += x.exp();
            acc
        })
        .collect()
}

/// Inverse of [`monotone_coefficients`] for strictly increasing positive `α`;
/// non-increasing steps are floored at `floor`.
pub fn xi_from_alpha(alpha: &[f64], floor: f64) -> Vec<f64> {
    let mut prev = 0.0;
    alpha
        .iter()
        .map(|&a| {
            let step = (a - prev).max(floor);
            prev = a.max(prev + floor);
            step.ln()
        })
        .collect()
}

/// A broken data-model invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject_id: Option<String>,
    pub rule: String,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.subject_id {
            Some(id) => write!(f, "subject {id}: {} ({})", self.rule, self.detail),
            None => write!(f, "dataset: {} ({})", self.rule, self.detail),
        }
    }
}

/// Lists every invariant violation; empty iff the dataset is well formed.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |id: Option<&str>, rule: &str, detail: String| {
        out.push(Violation {
            subject_id: id.map(str::to_owned),
            rule: rule.to_owned(),
            detail,
        })
    };
    if dataset.subjects.is_empty() {
        push(None, "non_empty", "dataset has no subjects".into());
    } else if dataset.event_count() == 0 {
        push(None, "has_events", "no subject has delta = 1".into());
    }
    for s in &dataset.subjects {
        let id = Some(s.id.as_str());
        if s.visits.len() < 2 {
            push(id, "min_visits", format!("{} visit(s), need at least 2", s.visits.len()));
        }
        if s.visits.iter().any(|v| !(v.time >= 0.0) || !v.time.is_finite()) {
            push(id, "time_nonnegative", "visit time negative or not finite".into());
        }
        if s.visits.windows(2).any(|w| !(w[0].time < w[1].time)) {
            push(id, "visit_order", "visit times not strictly increasing".into());
        }
        for (j, v) in s.visits.iter().enumerate() {
            if v.markers.len() != dataset.panel_dim {
                push(id, "panel_dim", format!("visit {j} has {} markers", v.markers.len()));
            }
            if v.covariates_x.len() != dataset.fixed_dim {
                push(id, "fixed_dim", format!("visit {j} has {} fixed covariates", v.covariates_x.len()));
            }
            if v.covariates_s.len() != dataset.hazard_dim {
                push(id, "hazard_dim", format!("visit {j} has {} hazard covariates", v.covariates_s.len()));
            }
            if v.covariates_z.len() != dataset.re_dim {
                push(id, "re_dim", format!("visit {j} has {} random-effect covariates", v.covariates_z.len()));
            }
            let non_finite = v.markers.iter().flatten().any(|m| !m.is_finite())
                || v.covariates_x.iter().chain(&v.covariates_s).chain(&v.covariates_z).any(|c| !c.is_finite());
            if non_finite {
                push(id, "finite_values", format!("visit {j} has a non-finite value"));
            }
        }
        if !(s.bracket_v < s.bracket_u) {
            push(id, "bracket_v < bracket_u", format!("V = {}, U = {}", s.bracket_v, s.bracket_u));
        }
        let is_visit = |t: f64| s.visits.iter().any(|v| v.time == t);
        if s.delta {
            if !is_visit(s.bracket_v) || !is_visit(s.bracket_u) {
                push(id, "bracket_visits", "V and U must both be visit times".into());
            } else if s.visits.iter().any(|v| v.time > s.bracket_v && v.time < s.bracket_u) {
                push(id, "adjacency", "a visit lies strictly inside (V, U)".into());
            }
        } else {
            if s.bracket_u != f64::INFINITY {
                push(id, "censored_bracket", "censored subject must have U = inf".into());
            }
            if s.bracket_v != s.last_time() {
                push(id, "censored_bracket", "censored subject must have V = last visit".into());
            }
        }
    }
    out
}
