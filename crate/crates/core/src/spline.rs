//! Cubic monotone B-spline sieve for the baseline cumulative hazard.
//!
//! `Λ₀(t) = Σ_j α_j B_j(t)` on a clamped knot vector over `[0, τ]`, with
//! `α_j = Σ_{l≤j} exp(ξ_l)`. The derivative is the degree-2 spline
//! `λ₀(t) = Σ_{j≥1} 3·exp(ξ_j)/(κ_{j+3} − κ_j)·N_{j,2}(t)`, which is
//! non-negative term by term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Dataset;
use crate::scalar::Real;

pub const DEGREE: usize = 3;

/// Relative margin added beyond the largest observed time when placing `τ`.
pub const TAU_MARGIN: f64 = 1.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("t = {t} lies outside the spline support [0, {tau}]")]
    OutOfRange { t: f64, tau: f64 },
    #[error("invalid knots: {0}")]
    BadKnots(String),
    #[error("coefficient vector has length {got}, basis has {expected} functions")]
    CoefficientLength { got: usize, expected: usize },
    #[error("no finite bracket endpoints to place knots on")]
    NoEndpoints,
}

#[derive(Serialize, Deserialize)]
struct RawSpec<T> {
    degree: usize,
    interior_knots: Vec<T>,
    tau: T,
}

/// Knot layout of a clamped cubic B-spline basis on `[0, τ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawSpec<T>",
    into = "RawSpec<T>",
    bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>")
)]
pub struct SplineSpec<T> {
    interior_knots: Vec<T>,
    tau: T,
    knots: Vec<T>,
}

impl<T: Real> TryFrom<RawSpec<T>> for SplineSpec<T> {
    type Error = SplineError;

    fn try_from(raw: RawSpec<T>) -> Result<Self, Self::Error> {
        if raw.degree != DEGREE {
            return Err(SplineError::BadKnots(format!("degree {} unsupported", raw.degree)));
        }
        SplineSpec::new(raw.interior_knots, raw.tau)
    }
}

impl<T: Real> From<SplineSpec<T>> for RawSpec<T> {
    fn from(s: SplineSpec<T>) -> Self {
        RawSpec {
            degree: DEGREE,
            interior_knots: s.interior_knots,
            tau: s.tau,
        }
    }
}

/// Nonzero cubic basis values at one point, plus the degree-2 values used by
/// the hazard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisRow<T> {
    /// Index of the first nonzero cubic basis function.
    pub first: usize,
    pub cubic: [T; 4],
    /// `N_{first+1,2}, N_{first+2,2}, N_{first+3,2}`.
    pub quadratic: [T; 3],
}

impl<T: Real> SplineSpec<T> {
    pub fn new(interior_knots: Vec<T>, tau: T) -> Result<Self, SplineError> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(SplineError::BadKnots(format!("tau = {tau} must be positive and finite")));
        }
        let mut prev = T::zero();
        for &k in &interior_knots {
            if !(k > prev) || !(k < tau) {
                return Err(SplineError::BadKnots(
                    "interior knots must be strictly increasing inside (0, tau)".into(),
                ));
            }
            prev = k;
        }
        let mut knots = vec![T::zero(); DEGREE + 1];
        knots.extend_from_slice(&interior_knots);
        knots.extend(std::iter::repeat_n(tau, DEGREE + 1));
        Ok(SplineSpec {
            interior_knots,
            tau,
            knots,
        })
    }

    pub fn interior_knots(&self) -> &[T] {
        &self.interior_knots
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// `q_n = interior + degree + 1`.
    pub fn basis_count(&self) -> usize {
        self.interior_knots.len() + DEGREE + 1
    }

    fn check(&self, t: T) -> Result<(), SplineError> {
        if t >= T::zero() && t <= self.tau {
            Ok(())
        } else {
            Err(SplineError::OutOfRange {
                t: t.to_f64().unwrap_or(f64::NAN),
                tau: self.tau.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    /// Knot span `s` with `κ_s ≤ t < κ_{s+1}`; `t = τ` maps to the last
    /// non-empty span.
    fn span(&self, t: T) -> usize {
        let last = self.basis_count() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // binary search over [DEGREE, last]
        let (mut lo, mut hi) = (DEGREE, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    pub fn basis_row(&self, t: T) -> Result<BasisRow<T>, SplineError> {
        self.check(t)?;
        let i = self.span(t);
        let k = &self.knots;
        let mut n = [T::zero(); DEGREE + 1];
        let mut left = [T::zero(); DEGREE + 1];
        let mut right = [T::zero(); DEGREE + 1];
        let mut quadratic = [T::zero(); 3];
        n[0] = T::one();
        for j in 1..=DEGREE {
            left[j] = t - k[i + 1 - j];
            right[j] = k[i + j] - t;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
            if j == 2 {
                quadratic.copy_from_slice(&n[..3]);
            }
        }
        Ok(BasisRow {
            first: i - DEGREE,
            cubic: n,
            quadratic,
        })
    }

    /// Binds coefficients `ξ` for repeated evaluation.
    pub fn with_coefficients(&self, xi: &[T]) -> Result<SplineHazard<'_, T>, SplineError> {
        let q = self.basis_count();
        if xi.len() != q {
            return Err(SplineError::CoefficientLength {
                got: xi.len(),
                expected: q,
            });
        }
        let mut alpha = Vec::with_capacity(q);
        let mut acc = T::zero();
        for &x in xi {
            acc += x.exp();
            alpha.push(acc);
        }
        // slopes of the degree-2 derivative spline, index 0 unused
        let three = T::lit(3.0);
        let mut slope = vec![T::zero(); q];
        for j in 1..q {
            slope[j] = three * xi[j].exp() / (self.knots[j + 3] - self.knots[j]);
        }
        Ok(SplineHazard {
            spec: self,
            alpha,
            slope,
        })
    }

    /// Greville abscissae `(κ_{j+1} + κ_{j+2} + κ_{j+3}) / 3`: the cubic basis
    /// reproduces `t` exactly with these coefficients.
    pub fn greville(&self) -> Vec<T> {
        let three = T::lit(3.0);
        (0..self.basis_count())
            .map(|j| (self.knots[j + 1] + self.knots[j + 2] + self.knots[j + 3]) / three)
            .collect()
    }
}

/// A spline basis with bound monotone coefficients.
#[derive(Debug, Clone)]
pub struct SplineHazard<'a, T> {
    spec: &'a SplineSpec<T>,
    alpha: Vec<T>,
    slope: Vec<T>,
}

impl<T: Real> SplineHazard<'_, T> {
    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    #[inline]
    pub fn cumulative_at_row(&self, row: &BasisRow<T>) -> T {
        let a = &self.alpha[row.first..row.first + 4];
        a[0] * row.cubic[0] + a[1] * row.cubic[1] + a[2] * row.cubic[2] + a[3] * row.cubic[3]
    }

    #[inline]
    pub fn rate_at_row(&self, row: &BasisRow<T>) -> T {
        let s = &self.slope[row.first + 1..row.first + 4];
        s[0] * row.quadratic[0] + s[1] * row.quadratic[1] + s[2] * row.quadratic[2]
    }

    pub fn cumulative(&self, t: T) -> Result<T, SplineError> {
        Ok(self.cumulative_at_row(&self.spec.basis_row(t)?))
    }

    pub fn rate(&self, t: T) -> Result<T, SplineError> {
        Ok(self.rate_at_row(&self.spec.basis_row(t)?))
    }
}

/// `Λ₀(t)` for coefficients `ξ`.
pub fn cumulative_hazard<T: Real>(spec: &SplineSpec<T>, xi: &[T], t: T) -> Result<T, SplineError> {
    spec.with_coefficients(xi)?.cumulative(t)
}

/// `λ₀(t) = dΛ₀/dt` for coefficients `ξ`.
pub fn hazard<T: Real>(spec: &SplineSpec<T>, xi: &[T], t: T) -> Result<T, SplineError> {
    spec.with_coefficients(xi)?.rate(t)
}

/// Type-7 empirical quantile of sorted data.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (T::from_usize_lossy(n - 1)) * p;
    let lo = h.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - T::from_usize_lossy(lo)) * (sorted[hi] - sorted[lo])
}

/// `count` knots at equally spaced quantile levels `k / (count + 1)` of
/// `values`, deduplicated and restricted to `(0, tau)`.
pub fn quantile_knots<T: Real>(values: &[T], count: usize, tau: T) -> Result<Vec<T>, SplineError> {
    if values.is_empty() {
        return Err(SplineError::NoEndpoints);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite endpoints"));
    let denom = T::from_usize_lossy(count + 1);
    let mut knots: Vec<T> = (1..=count)
        .map(|k| quantile_sorted(&sorted, T::from_usize_lossy(k) / denom))
        .filter(|&k| k > T::zero() && k < tau)
        .collect();
    knots.dedup();
    if knots.is_empty() {
        return Err(SplineError::BadKnots("no interior knot remains after deduplication".into()));
    }
    Ok(knots)
}

/// Distinct finite bracket endpoints `{V_i, U_i}`, sorted.
pub fn distinct_endpoints(dataset: &Dataset) -> Vec<f64> {
    let mut v: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| [s.bracket_v, s.bracket_u])
        .filter(|t| t.is_finite())
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v.dedup();
    v
}

/// Interior knot count `round(q^{1/3})`, at least one.
pub fn knot_count_rule(distinct: usize) -> usize {
    ((distinct as f64).cbrt().round() as usize).max(1)
}

/// `τ = 1.01 ×` the largest finite endpoint or visit time.
pub fn support_end(dataset: &Dataset) -> f64 {
    TAU_MARGIN * dataset.max_time()
}

/// Knots at quantiles of the distinct bracket endpoints with `count` interior
/// knots.
pub fn spec_with_knot_count(dataset: &Dataset, count: usize) -> Result<SplineSpec<f64>, SplineError> {
    let endpoints = distinct_endpoints(dataset);
    if endpoints.is_empty() {
        return Err(SplineError::NoEndpoints);
    }
    let tau = support_end(dataset);
    let knots = quantile_knots(&endpoints, count, tau)?;
    SplineSpec::new(knots, tau)
}

/// Data-driven spec: `round(q^{1/3})` interior knots, `q` the number of
/// distinct finite bracket endpoints.
pub fn default_spec(dataset: &Dataset) -> Result<SplineSpec<f64>, SplineError> {
    let q = distinct_endpoints(dataset).len();
    if q == 0 {
        return Err(SplineError::NoEndpoints);
    }
    spec_with_knot_count(dataset, knot_count_rule(q))
}

/// Dense `grid × q_n` design of cubic basis values.
pub fn design_matrix(spec: &SplineSpec<f64>, grid: &[f64]) -> Result<DMatrix<f64>, SplineError> {
    let q = spec.basis_count();
    let mut m = DMatrix::zeros(grid.len(), q);
    for (r, &t) in grid.iter().enumerate() {
        let row = spec.basis_row(t)?;
        for c in 0..4 {
            m[(r, row.first + c)] = row.cubic[c];
        }
    }
    Ok(m)
}

/// Unconstrained least-squares coefficients `α` of `f` on `grid`.
pub fn least_squares_alpha<F: Fn(f64) -> f64>(
    spec: &SplineSpec<f64>,
    grid: &[f64],
    f: F,
) -> Result<Vec<f64>, SplineError> {
    let b = design_matrix(spec, grid)?;
    let y = DVector::from_iterator(grid.len(), grid.iter().map(|&t| f(t)));
    let svd = b.svd(true, true);
    let sol = svd
        .solve(&y, 1e-12)
        .map_err(|e| SplineError::BadKnots(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

/// Monotone projection of `f` onto the basis: non-negative least squares on
/// the increments `exp(ξ_j)`, returning `ξ` with increments floored at
/// `floor`.
pub fn project_monotone<F: Fn(f64) -> f64>(
    spec: &SplineSpec<f64>,
    grid: &[f64],
    f: F,
    floor: f64,
) -> Result<Vec<f64>, SplineError> {
    let b = design_matrix(spec, grid)?;
    let q = spec.basis_count();
    // Λ(t) = Σ_l d_l Σ_{j≥l} B_j(t)
    let mut c = DMatrix::zeros(grid.len(), q);
    for r in 0..grid.len() {
        let mut acc = 0.0;
        for j in (0..q).rev() {
            acc += b[(r, j)];
            c[(r, j)] = acc;
        }
    }
    let y = DVector::from_iterator(grid.len(), grid.iter().map(|&t| f(t)));
    let d = nnls(&c, &y, 500);
    Ok(d.iter().map(|&v| v.max(floor).ln()).collect())
}

/// Lawson-Hanson non-negative least squares `min ‖Ax − b‖, x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    for _ in 0..max_iter {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap());
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&idx);
            let z_sub = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-14)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if z_sub.iter().all(|&v| v > 0.0) {
                for (p, &k) in idx.iter().enumerate() {
                    x[k] = z_sub[p];
                }
                break;
            }
            // step back toward feasibility
            let mut alpha = f64::INFINITY;
            for (p, &k) in idx.iter().enumerate() {
                if z_sub[p] <= 0.0 {
                    let r = x[k] / (x[k] - z_sub[p]);
                    alpha = alpha.min(r);
                }
            }
            for (p, &k) in idx.iter().enumerate() {
                x[k] += alpha * (z_sub[p] - x[k]);
                if x[k].abs() < 1e-15 {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}
