//! Gauss-Legendre rules on finite intervals and tensor-product Gauss-Hermite
//! rules for expectations under a multivariate normal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature needs at least one node")]
    NoNodes,
    #[error("interval [{a}, {b}] is empty or not finite")]
    BadInterval { a: f64, b: f64 },
    #[error("cholesky factor has a non-finite entry")]
    NonFiniteFactor,
    #[error("factor has {got} entries, expected {expected}")]
    FactorShape { got: usize, expected: usize },
}

/// One-dimensional rule: `∫ f ≈ Σ wᵢ f(xᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> QuadRule<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(T) -> T>(&self, mut f: F) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(x))
    }

    /// Maps a rule on `[0, 1]` onto `[a, b]`.
    pub fn mapped_from_unit(&self, a: T, b: T) -> QuadRule<T> {
        let len = b - a;
        QuadRule {
            nodes: self.nodes.iter().map(|&x| a + len * x).collect(),
            weights: self.weights.iter().map(|&w| w * len).collect(),
        }
    }
}

/// Legendre recurrence at `z`: returns `(P_n(z), P_n'(z))` for `|z| < 1`.
fn legendre_eval<T: Real>(z: T, n: usize) -> (T, T) {
    let mut p1 = T::one();
    let mut p2 = T::zero();
    for j in 1..=n {
        let jf = T::from_usize_lossy(j);
        let p3 = p2;
        p2 = p1;
        p1 = ((T::lit(2.0) * jf - T::one()) * z * p2 - (jf - T::one()) * p3) / jf;
    }
    let dp = T::from_usize_lossy(n) * (z * p1 - p2) / (z * z - T::one());
    (p1, dp)
}

/// Legendre nodes/weights on `[-1, 1]`, ascending.
fn legendre_reference<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    if n == 1 {
        return (vec![T::zero()], vec![T::lit(2.0)]);
    }
    let mut x = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let nf = T::from_usize_lossy(n);
    let pi = T::lit(std::f64::consts::PI);
    for i in 0..n.div_ceil(2) {
        let mut z = (pi * (T::from_usize_lossy(i) + T::lit(0.75)) / (nf + T::lit(0.5))).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_eval(z, n);
            let z1 = z;
            z = z1 - p / dp;
            if (z - z1).abs() <= T::epsilon() * T::lit(4.0) {
                break;
            }
        }
        let (_, dp) = legendre_eval(z, n);
        let wi = T::lit(2.0) / ((T::one() - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// `n`-point Gauss-Legendre rule on `[a, b]`, exact for polynomials of degree
/// at most `2n - 1`.
pub fn gauss_legendre<T: Real>(n: usize, a: T, b: T) -> Result<QuadRule<T>, QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::NoNodes);
    }
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return Err(QuadratureError::BadInterval {
            a: a.to_f64().unwrap_or(f64::NAN),
            b: b.to_f64().unwrap_or(f64::NAN),
        });
    }
    let (x, w) = legendre_reference::<T>(n);
    let half_len = (b - a) * T::lit(0.5);
    let mid = (a + b) * T::lit(0.5);
    Ok(QuadRule {
        nodes: x.iter().map(|&xi| mid + half_len * xi).collect(),
        weights: w.iter().map(|&wi| wi * half_len).collect(),
    })
}

/// Normalized Hermite recurrence at `z`: returns `(h_n(z), h_n'(z))`.
fn hermite_eval<T: Real>(z: T, n: usize) -> (T, T) {
    let mut p1 = T::lit(std::f64::consts::PI.powf(-0.25));
    let mut p2 = T::zero();
    for j in 0..n {
        let jf = T::from_usize_lossy(j);
        let p3 = p2;
        p2 = p1;
        p1 = z * (T::lit(2.0) / (jf + T::one())).sqrt() * p2 - (jf / (jf + T::one())).sqrt() * p3;
    }
    (p1, (T::lit(2.0) * T::from_usize_lossy(n)).sqrt() * p2)
}

/// Physicists' Gauss-Hermite rule for `∫ e^{-x²} f(x) dx`, ascending nodes.
pub fn gauss_hermite<T: Real>(n: usize) -> Result<QuadRule<T>, QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::NoNodes);
    }
    let nf = T::from_usize_lossy(n);
    let mut x = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let half = n.div_ceil(2);
    let mut z = T::zero();
    for i in 0..half {
        // asymptotic starting guesses for the largest roots
        z = match i {
            0 => {
                let s = T::lit(2.0) * nf + T::one();
                s.sqrt() - T::lit(1.85575) * s.powf(T::lit(-1.0 / 6.0))
            }
            1 => z - T::lit(1.14) * nf.powf(T::lit(0.426)) / z,
            2 => T::lit(1.86) * z - T::lit(0.86) * x[0],
            3 => T::lit(1.91) * z - T::lit(0.91) * x[1],
            _ => T::lit(2.0) * z - x[i - 2],
        };
        for _ in 0..200 {
            let (p, dp) = hermite_eval(z, n);
            let z1 = z;
            z = z1 - p / dp;
            if (z - z1).abs() <= T::epsilon() * T::lit(8.0) * (T::one() + z.abs()) {
                break;
            }
        }
        let (_, dp) = hermite_eval(z, n);
        x[i] = z;
        x[n - 1 - i] = -z;
        let wi = T::lit(2.0) / (dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[half - 1] = T::zero();
    }
    x.reverse();
    w.reverse();
    Ok(QuadRule { nodes: x, weights: w })
}

/// Tensor-product Gauss-Hermite grid in standardized coordinates.
///
/// `weights` are normalized to sum to one, so for `u` on this grid and
/// `a = μ + √2·R·u`, `Σ wᵢ g(aᵢ)` approximates `E[g(a)]` with `a ~ N(μ, RRᵀ)`.
#[derive(Debug, Clone)]
pub struct HermiteGrid<T> {
    pub dim: usize,
    pub per_axis: usize,
    /// Row-major `len × dim` unit nodes.
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
    pub log_weights: Vec<T>,
    /// `|uᵢ|²` for each node.
    pub sq_norms: Vec<T>,
}

impl<T: Real> HermiteGrid<T> {
    pub fn tensor(per_axis: usize, dim: usize) -> Result<Self, QuadratureError> {
        let base = gauss_hermite::<T>(per_axis)?;
        let norm = T::lit(std::f64::consts::PI.sqrt());
        let axis_w: Vec<T> = base.weights.iter().map(|&w| w / norm).collect();
        let total = per_axis.pow(dim as u32);
        let mut nodes = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let mut w = T::one();
            for &i in idx.iter() {
                nodes.push(base.nodes[i]);
                w *= axis_w[i];
            }
            weights.push(w);
            // odometer, last axis fastest
            for d in (0..dim).rev() {
                idx[d] += 1;
                if idx[d] < per_axis {
                    break;
                }
                idx[d] = 0;
            }
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let sq_norms = nodes
            .chunks(dim.max(1))
            .map(|u| u.iter().fold(T::zero(), |acc, &x| acc + x * x))
            .collect();
        Ok(HermiteGrid {
            dim,
            per_axis,
            nodes,
            weights,
            log_weights,
            sq_norms,
        })
    }

    /// Drops nodes whose weight is below `rel` times the largest weight.
    /// Remaining weights are left unnormalized.
    pub fn pruned(&self, rel: T) -> Self {
        let max = self.weights.iter().fold(T::zero(), |m, &w| m.max(w));
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] >= rel * max).collect();
        let d = self.dim;
        HermiteGrid {
            dim: d,
            per_axis: self.per_axis,
            nodes: keep.iter().flat_map(|&i| self.nodes[i * d..(i + 1) * d].iter().copied()).collect(),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            log_weights: keep.iter().map(|&i| self.log_weights[i]).collect(),
            sq_norms: keep.iter().map(|&i| self.sq_norms[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[T] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }
}

/// Quadrature rule over `R^K` for expectations under `N(0, Σ)`.
#[derive(Debug, Clone)]
pub struct MvQuadRule<T> {
    pub dim: usize,
    /// Row-major `len × dim` points.
    pub points: Vec<T>,
    /// Normalized weights (sum to one).
    pub weights: Vec<T>,
}

impl<T: Real> MvQuadRule<T> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn expectation<F: FnMut(&[T]) -> T>(&self, mut g: F) -> T {
        let mut acc = T::zero();
        for i in 0..self.len() {
            acc += self.weights[i] * g(self.point(i));
        }
        acc
    }
}

/// Tensor Gauss-Hermite rule with `n` nodes per axis for `a ~ N(0, L Lᵀ)`,
/// where `chol` is the row-major `K×K` lower factor `L`.
pub fn gauss_hermite_mv<T: Real>(
    n: usize,
    chol: &[T],
    dim: usize,
) -> Result<MvQuadRule<T>, QuadratureError> {
    if chol.len() != dim * dim {
        return Err(QuadratureError::FactorShape {
            got: chol.len(),
            expected: dim * dim,
        });
    }
    if chol.iter().any(|v| !v.is_finite()) {
        return Err(QuadratureError::NonFiniteFactor);
    }
    let grid = HermiteGrid::<T>::tensor(n, dim)?;
    let sqrt2 = T::lit(std::f64::consts::SQRT_2);
    let mut points = Vec::with_capacity(grid.nodes.len());
    for i in 0..grid.len() {
        let u = grid.node(i);
        for r in 0..dim {
            let mut s = T::zero();
            for c in 0..=r {
                s += chol[r * dim + c] * u[c];
            }
            points.push(sqrt2 * s);
        }
    }
    Ok(MvQuadRule {
        dim,
        points,
        weights: grid.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn legendre_weight_sum_and_square() {
        let r = gauss_legendre::<f64>(20, 0.0, 1.0).unwrap();
        let sum: f64 = r.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-14);
        let sq = r.integrate(|x| x * x);
        assert!((sq - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.weights.iter().all(|&w| w > 0.0));
        assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn legendre_refinement_on_smooth_integrand() {
        let f = |x: f64| (-x).exp() * x.powf(1.5);
        let a = gauss_legendre::<f64>(20, 0.3, 2.7).unwrap().integrate(f);
        let b = gauss_legendre::<f64>(40, 0.3, 2.7).unwrap().integrate(f);
        assert!(((a - b) / b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn legendre_rejects_empty_interval() {
        assert!(matches!(
            gauss_legendre::<f64>(5, 1.0, 1.0),
            Err(QuadratureError::BadInterval { .. })
        ));
        assert!(matches!(gauss_legendre::<f64>(0, 0.0, 1.0), Err(QuadratureError::NoNodes)));
    }

    #[test]
    fn legendre_affine_map_matches_unit_rule() {
        let unit = gauss_legendre::<f64>(13, 0.0, 1.0).unwrap();
        let direct = gauss_legendre::<f64>(13, -2.5, 4.0).unwrap();
        let mapped = unit.mapped_from_unit(-2.5, 4.0);
        for i in 0..13 {
            assert!((direct.nodes[i] - mapped.nodes[i]).abs() < 1e-13);
            assert!((direct.weights[i] - mapped.weights[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn hermite_moments() {
        let r = gauss_hermite::<f64>(20).unwrap();
        let pi_sqrt = std::f64::consts::PI.sqrt();
        assert!((r.integrate(|_| 1.0) - pi_sqrt).abs() < 1e-13);
        assert!((r.integrate(|x| x * x) - pi_sqrt / 2.0).abs() < 1e-13);
        assert!((r.integrate(|x| x.powi(4)) - 3.0 * pi_sqrt / 4.0).abs() < 1e-12);
        assert!(r.weights.iter().all(|&w| w > 0.0));
        assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn hermite_odd_count_has_zero_node() {
        let r = gauss_hermite::<f64>(7).unwrap();
        assert_eq!(r.nodes[3], 0.0);
        let pi_sqrt = std::f64::consts::PI.sqrt();
        assert!((r.integrate(|x| x.powi(12)) - pi_sqrt * 10395.0 / 64.0).abs() < 1e-9);
    }

    #[test]
    fn f32_rules_are_usable() {
        let r = gauss_legendre::<f32>(10, 0.0, 2.0).unwrap();
        assert!((r.integrate(|x| x * x * x) - 4.0).abs() < 1e-4);
        let h = gauss_hermite::<f32>(10).unwrap();
        assert!((h.integrate(|x| x * x) - std::f32::consts::PI.sqrt() / 2.0).abs() < 1e-4);
    }

    const SIGMA_A: [f64; 4] = [0.5, 0.1, 0.1, 0.5];

    fn sigma_a_factor() -> Vec<f64> {
        crate::linalg::cholesky(&SIGMA_A, 2).unwrap()
    }

    #[test]
    fn mv_normalization() {
        let rule = gauss_hermite_mv(20, &sigma_a_factor(), 2).unwrap();
        assert_eq!(rule.len(), 400);
        assert!((rule.expectation(|_| 1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mv_second_moment_recovers_covariance() {
        let rule = gauss_hermite_mv(20, &sigma_a_factor(), 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let m = rule.expectation(|a| a[i] * a[j]);
                assert!((m - SIGMA_A[i * 2 + j]).abs() <= 1e-12, "({i},{j}) {m}");
            }
        }
    }

    #[test]
    fn mv_lognormal_moment() {
        let rule = gauss_hermite_mv(20, &sigma_a_factor(), 2).unwrap();
        let theta = [0.1, 0.1];
        let got = rule.expectation(|a| (theta[0] * a[0] + theta[1] * a[1]).exp());
        let quad = crate::linalg::quad_form(&SIGMA_A, 2, &theta);
        let want = (quad / 2.0).exp();
        assert!((got - want).abs() <= 1e-8);
    }

    #[test]
    fn mv_rejects_non_finite_factor() {
        assert!(matches!(
            gauss_hermite_mv(5, &[f64::NAN, 0.0, 0.0, 1.0], 2),
            Err(QuadratureError::NonFiniteFactor)
        ));
    }

    proptest! {
        #[test]
        fn legendre_polynomial_exactness(n in 1usize..25, coeffs in proptest::collection::vec(-2.0f64..2.0, 1..50),
                                         a in -3.0f64..0.0, len in 0.1f64..4.0) {
            let b = a + len;
            let deg = (2 * n - 1).min(coeffs.len() - 1);
            let c = &coeffs[..=deg];
            let rule = gauss_legendre::<f64>(n, a, b).unwrap();
            let got = rule.integrate(|x| c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci));
            let anti = |x: f64| c.iter().enumerate().map(|(k, &ci)| ci * x.powi(k as i32 + 1) / (k as f64 + 1.0)).sum::<f64>();
            let want = anti(b) - anti(a);
            let scale = c.iter().map(|v| v.abs()).sum::<f64>() * (a.abs().max(b.abs()) + 1.0).powi(deg as i32 + 1);
            prop_assert!((got - want).abs() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn hermite_polynomial_exactness(n in 1usize..22, k in 0usize..40) {
            // ∫ e^{-x²} x^{2m} = Γ(m + 1/2)
            prop_assume!(k < 2 * n);
            let rule = gauss_hermite::<f64>(n).unwrap();
            let got = rule.integrate(|x| x.powi(k as i32));
            let want = if k % 2 == 1 {
                0.0
            } else {
                let m = k / 2;
                // Γ(m+1/2) = (2m-1)!! √π / 2^m
                let mut v = std::f64::consts::PI.sqrt();
                for j in 0..m { v *= (2 * j + 1) as f64 / 2.0; }
                v
            };
            let scale = rule.integrate(|x| x.abs().powi(k as i32));
            prop_assert!((got - want).abs() <= 1e-12 * scale.max(1.0), "n={n} k={k} {got} {want}");
        }
    }
}
