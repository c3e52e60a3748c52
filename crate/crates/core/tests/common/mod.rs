//! Property checks shared by the `properties` and `acceptance` targets.
//!
//! Each check draws its cases from a fixed seed and returns the first
//! counterexample as an error string.

#![allow(dead_code)]

use chronofit::likelihood::LikContext;
use chronofit::model::{Layout, LogCholesky, Parameters};
use chronofit::optimizer::{fisher_scoring, generalized_inverse, FitOptions, Objective, OptError};
use chronofit::quadrature::{gauss_hermite, gauss_hermite_mv, gauss_legendre};
use chronofit::simulator::{gen_dataset, SimConfig};
use chronofit::spline::{spec_with_knot_count, SplineSpec};
use chronofit::study::{fit_dataset, resample_indices};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5EED_0000 + tag)
}

/// `∫_a^b x^k dx`.
fn monomial_integral(k: i32, a: f64, b: f64) -> f64 {
    (b.powi(k + 1) - a.powi(k + 1)) / (k + 1) as f64
}

/// `∫ e^{-x²} x^k dx = Γ((k+1)/2)` for even `k`, zero for odd `k`.
fn hermite_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    // Γ(1/2)·(1/2)(3/2)…((k−1)/2)
    let mut g = std::f64::consts::PI.sqrt();
    let mut h = 0.5;
    for _ in 0..k / 2 {
        g *= h;
        h += 1.0;
    }
    g
}

/// Gauss-Legendre with `n` nodes integrates every polynomial of degree
/// `≤ 2n − 1` exactly; Gauss-Hermite the same for `e^{-x²}` moments; the
/// multivariate rule reproduces `Σ = L Lᵀ`.
pub fn quadrature_exactness() -> Check {
    let mut r = rng(1);
    for case in 0..200 {
        let n = r.random_range(1..=20usize);
        let a: f64 = r.random_range(-2.0..1.0);
        let b = a + r.random_range(0.1..3.0);
        let rule = gauss_legendre::<f64>(n, a, b).map_err(|e| e.to_string())?;
        let deg = 2 * n - 1;
        let coeffs: Vec<f64> = (0..=deg).map(|_| r.random_range(-1.0..1.0)).collect();
        let exact: f64 = coeffs.iter().enumerate().map(|(k, c)| c * monomial_integral(k as i32, a, b)).sum();
        let got = rule.integrate(|x| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c));
        let scale = coeffs.iter().enumerate().map(|(k, c)| c.abs() * monomial_integral(k as i32, 0.0, a.abs().max(b.abs())).abs()).sum::<f64>() + 1.0;
        ensure((got - exact).abs() <= 1e-11 * scale, || format!("legendre case {case}: n={n} on [{a}, {b}]: {got} vs {exact}"))?;
    }
    for n in 1..=24usize {
        let rule = gauss_hermite::<f64>(n).map_err(|e| e.to_string())?;
        for k in 0..2 * n {
            let exact = hermite_moment(k);
            let got = rule.integrate(|x| x.powi(k as i32));
            // odd moments cancel, so compare against the absolute moment
            let scale = rule.integrate(|x| x.abs().powi(k as i32)).max(1.0);
            ensure((got - exact).abs() <= 1e-12 * scale, || format!("hermite n={n} k={k}: {got} vs {exact}"))?;
        }
    }
    for case in 0..50 {
        let k = r.random_range(1..=3usize);
        let mut chol = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..i {
                chol[i * k + j] = r.random_range(-0.5..0.5);
            }
            chol[i * k + i] = r.random_range(0.2..1.5);
        }
        let rule = gauss_hermite_mv::<f64>(r.random_range(2..=8usize), &chol, k).map_err(|e| e.to_string())?;
        let mass = rule.expectation(|_| 1.0);
        ensure((mass - 1.0).abs() < 1e-12, || format!("mv case {case}: mass {mass}"))?;
        for i in 0..k {
            for j in 0..k {
                let exact: f64 = (0..k).map(|c| chol[i * k + c] * chol[j * k + c]).sum();
                let got = rule.expectation(|a| a[i] * a[j]);
                ensure((got - exact).abs() < 1e-11, || format!("mv case {case}: cov[{i}][{j}] {got} vs {exact}"))?;
            }
        }
    }
    Ok(())
}

fn random_spec(r: &mut ChaCha8Rng) -> SplineSpec<f64> {
    let tau = r.random_range(1.0..20.0);
    let m = r.random_range(0..=10usize);
    let mut knots: Vec<f64> = (0..m).map(|_| r.random_range(0.02..0.98) * tau).collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-3 * tau);
    SplineSpec::new(knots, tau).expect("sorted interior knots")
}

/// Cubic basis values are non-negative and sum to one on `[0, τ]`; the
/// monotone parametrization gives a non-decreasing `Λ₀` with a non-negative
/// rate that matches its numerical derivative.
pub fn spline_basis_and_monotonicity() -> Check {
    let mut r = rng(2);
    for case in 0..200 {
        let spec = random_spec(&mut r);
        let tau = spec.tau();
        let q = spec.basis_count();
        let xi: Vec<f64> = (0..q).map(|_| r.random_range(-8.0..2.0)).collect();
        let h = spec.with_coefficients(&xi).map_err(|e| e.to_string())?;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=400 {
            let t = (tau * i as f64 / 400.0).min(tau);
            let row = spec.basis_row(t).map_err(|e| e.to_string())?;
            let sum: f64 = row.cubic.iter().sum();
            let qsum: f64 = row.quadratic.iter().sum();
            ensure((sum - 1.0).abs() < 1e-12, || format!("case {case}: cubic basis sums to {sum} at t={t}"))?;
            ensure(qsum <= 1.0 + 1e-12, || format!("case {case}: quadratic values sum to {qsum} at t={t}"))?;
            ensure(row.cubic.iter().chain(&row.quadratic).all(|&v| v >= -1e-14), || format!("case {case}: negative basis value at t={t}"))?;
            ensure(row.first + 4 <= q, || format!("case {case}: row offset {} out of range", row.first))?;
            let c = h.cumulative_at_row(&row);
            let scale = c.abs().max(1.0);
            ensure(c >= prev - 1e-12 * scale, || format!("case {case}: cumulative decreases at t={t}: {c} < {prev}"))?;
            prev = c;
            let rate = h.rate_at_row(&row);
            ensure(rate >= 0.0, || format!("case {case}: negative rate {rate} at t={t}"))?;
        }
        for _ in 0..20 {
            let t = r.random_range(0.01..0.99) * tau;
            let d = 1e-6 * tau;
            let fd = (h.cumulative(t + d).unwrap() - h.cumulative(t - d).unwrap()) / (2.0 * d);
            let rate = h.rate(t).unwrap();
            ensure((fd - rate).abs() <= 1e-5 * rate.abs().max(1e-3), || format!("case {case}: rate {rate} vs derivative {fd} at t={t}"))?;
        }
    }
    Ok(())
}

/// `unpack ∘ pack` and `pack ∘ unpack` are identities for random layouts.
pub fn pack_unpack_bijection() -> Check {
    let mut r = rng(3);
    for case in 0..300 {
        let layout = Layout {
            basis_count: r.random_range(1..=14usize),
            panel_dim: r.random_range(1..=4usize),
            fixed_dim: r.random_range(1..=5usize),
            hazard_dim: r.random_range(0..=3usize),
        };
        let len = layout.packed_len();
        let names = layout.names();
        ensure(names.len() == len, || format!("case {case}: {} names for {len} coordinates", names.len()))?;
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        ensure(sorted.len() == len, || format!("case {case}: duplicate coordinate names"))?;
        let v: Vec<f64> = (0..len).map(|_| r.random_range(-5.0..5.0)).collect();
        let p = Parameters::unpack(&layout, &v).map_err(|e| e.to_string())?;
        ensure(p.check_shape(&layout).is_ok(), || format!("case {case}: unpacked shape mismatch"))?;
        ensure(p.pack() == v, || format!("case {case}: pack(unpack(v)) != v"))?;
        let again = Parameters::unpack(&layout, &p.pack()).map_err(|e| e.to_string())?;
        ensure(again == p, || format!("case {case}: unpack(pack(p)) != p"))?;
        ensure(Parameters::unpack(&layout, &v[..len - 1]).is_err(), || format!("case {case}: short vector accepted"))?;
        // covariance round trip through the log-Cholesky coordinates
        let k = layout.panel_dim;
        let mut chol = LogCholesky::zeros(k);
        for e in chol.entries.iter_mut() {
            *e = r.random_range(-1.0..1.0);
        }
        let back = LogCholesky::from_covariance(&chol.covariance(), k).map_err(|e| e.to_string())?;
        let drift = back.entries.iter().zip(&chol.entries).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(drift < 1e-8, || format!("case {case}: log-Cholesky round trip drift {drift:e}"))?;
    }
    Ok(())
}

/// The four Penrose conditions for the symmetric pseudo-inverse on random
/// rank-deficient positive semidefinite matrices.
pub fn penrose_conditions() -> Check {
    let mut r = rng(4);
    for case in 0..100 {
        let n = r.random_range(1..=12usize);
        let rank = r.random_range(0..=n);
        let b = DMatrix::from_fn(n, rank, |_, _| r.random_range(-2.0..2.0));
        let a = &b * b.transpose();
        let g = generalized_inverse(&a, 1e-10).map_err(|e| e.to_string())?;
        let scale = a.amax().max(1.0);
        let gscale = g.amax().max(1.0);
        let checks = [
            ("AGA = A", (&a * &g * &a - &a).amax() / scale),
            ("GAG = G", (&g * &a * &g - &g).amax() / gscale),
            ("AG symmetric", {
                let ag = &a * &g;
                (&ag - ag.transpose()).amax()
            }),
            ("GA symmetric", {
                let ga = &g * &a;
                (&ga - ga.transpose()).amax()
            }),
        ];
        for (what, err) in checks {
            ensure(err < 1e-7, || format!("case {case}: n={n} rank={rank}: {what} off by {err:e}"))?;
        }
    }
    let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
    ensure(generalized_inverse(&asym, 1e-10).is_err(), || "asymmetric input accepted".into())
}

/// Poisson regression with a log link, one unit per observation.
struct Poisson {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Objective for Poisson {
    fn dim(&self) -> usize {
        self.x[0].len()
    }

    fn n_units(&self) -> usize {
        self.y.len()
    }

    fn unit_logliks(&self, theta: &[f64]) -> Result<Vec<f64>, OptError> {
        Ok(self
            .x
            .iter()
            .zip(&self.y)
            .map(|(x, &y)| {
                let eta: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
                y * eta - eta.exp()
            })
            .collect())
    }
}

fn strictly_increasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] > w[0])
}

/// Every accepted scoring step raises the log-likelihood, both on a smooth
/// toy objective and on a small joint-model fit.
pub fn monotone_ascent() -> Check {
    let mut r = rng(5);
    for case in 0..30 {
        let p = r.random_range(1..=4usize);
        let n = r.random_range(30..=120usize);
        let beta: Vec<f64> = (0..p).map(|_| r.random_range(-0.5..0.5)).collect();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = vec![1.0];
            row.extend((1..p).map(|_| r.random_range(-1.0..1.0)));
            let mu: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().exp();
            // inverse-CDF Poisson draw
            let (mut k, mut pk, u) = (0.0, (-mu).exp(), r.random::<f64>());
            let mut cdf = pk;
            while u > cdf && k < 100.0 {
                k += 1.0;
                pk *= mu / k;
                cdf += pk;
            }
            x.push(row);
            y.push(k);
        }
        let obj = Poisson { x, y };
        let start: Vec<f64> = (0..p).map(|_| r.random_range(-1.5..1.5)).collect();
        let run = fisher_scoring(&obj, &start, &FitOptions::default()).map_err(|e| e.to_string())?;
        ensure(strictly_increasing(&run.loglik_trace), || format!("toy case {case}: trace {:?}", run.loglik_trace))?;
        ensure(run.converged, || format!("toy case {case}: stopped with {:?}", run.stop))?;
    }
    let data = gen_dataset(&SimConfig::new(40, 21)).map_err(|e| e.to_string())?.dataset;
    let spec = spec_with_knot_count(&data, 3).map_err(|e| e.to_string())?;
    let mut ctx = LikContext::new(spec);
    ctx.gl_nodes = 6;
    ctx.gh_nodes = 6;
    let opts = FitOptions {
        max_iter: 6,
        ..FitOptions::default()
    };
    let fit = fit_dataset(&data, &ctx, &opts).map_err(|e| e.to_string())?;
    ensure(fit.loglik_trace.len() >= 2, || "joint fit accepted no step".into())?;
    ensure(strictly_increasing(&fit.loglik_trace), || format!("joint trace {:?}", fit.loglik_trace))
}

/// Identical seeds give identical datasets and resamples regardless of the
/// thread count; different seeds differ.
pub fn seed_determinism() -> Check {
    let cfg = SimConfig::new(60, 7);
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(|| gen_dataset(&cfg).map(|d| d.dataset))
    };
    let a = in_pool(1).map_err(|e| e.to_string())?;
    let b = in_pool(3).map_err(|e| e.to_string())?;
    ensure(a == b, || "datasets differ across thread counts".into())?;
    let c = gen_dataset(&SimConfig::new(60, 8)).map_err(|e| e.to_string())?.dataset;
    ensure(a != c, || "different seeds produced the same dataset".into())?;
    // subject i does not depend on n
    let longer = gen_dataset(&SimConfig::new(90, 7)).map_err(|e| e.to_string())?.dataset;
    ensure(longer.subjects[..60] == a.subjects[..], || "subject draws depend on the sample size".into())?;
    for b in 0..20 {
        ensure(resample_indices(50, 3, b) == resample_indices(50, 3, b), || format!("resample {b} not reproducible"))?;
    }
    ensure(resample_indices(50, 3, 0) != resample_indices(50, 3, 1), || "resamples repeat across draws".into())?;
    ensure(resample_indices(50, 3, 0) != resample_indices(50, 4, 0), || "resamples ignore the seed".into())
}

pub type Suite = (&'static str, fn() -> Check);

pub const PROPERTY_SUITES: [Suite; 6] = [
    ("quadrature exactness", quadrature_exactness),
    ("spline basis and monotonicity", spline_basis_and_monotonicity),
    ("pack/unpack bijection", pack_unpack_bijection),
    ("generalized-inverse Penrose conditions", penrose_conditions),
    ("monotone-ascent trace", monotone_ascent),
    ("seed determinism", seed_determinism),
];
