//! Random-intercept linear mixed model fitted by REML, profiling the
//! variance ratio `ρ = σ_b² / σ²` with a golden-section search.

use log::warn;
use nalgebra::{DMatrix, DVector};

/// Observations of one subject for one biomarker.
#[derive(Debug, Clone, Default)]
pub struct Group {
    /// Row-major design rows.
    pub x: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub coef: Vec<f64>,
    /// Residual variance σ².
    pub sigma2: f64,
    /// Random-intercept variance σ_b² = ρ·σ².
    pub sigma2_b: f64,
    pub rho: f64,
    /// Empirical-Bayes intercept per group (0 for empty groups).
    pub blups: Vec<f64>,
    pub ridge: bool,
}

struct Stats {
    xtx: DMatrix<f64>,
    xtz: DVector<f64>,
    ztz: f64,
    xty: DVector<f64>,
    zty: f64,
    yty: f64,
}

const RIDGE: f64 = 1e-6;
const LOG_RHO_RANGE: (f64, f64) = (-12.0, 8.0);

fn stats(g: &Group, p: usize) -> Stats {
    let mut s = Stats {
        xtx: DMatrix::zeros(p, p),
        xtz: DVector::zeros(p),
        ztz: 0.0,
        xty: DVector::zeros(p),
        zty: 0.0,
        yty: 0.0,
    };
    for ((row, &z), &y) in g.x.iter().zip(&g.z).zip(&g.y) {
        for a in 0..p {
            for b in 0..p {
                s.xtx[(a, b)] += row[a] * row[b];
            }
            s.xtz[a] += row[a] * z;
            s.xty[a] += row[a] * y;
        }
        s.ztz += z * z;
        s.zty += z * y;
        s.yty += y * y;
    }
    s
}

struct Profile {
    coef: DVector<f64>,
    sigma2: f64,
    reml: f64,
}

fn profile(all: &[Stats], p: usize, n_obs: usize, rho: f64, ridge: bool) -> Option<Profile> {
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut yty = 0.0;
    let mut logdet_v = 0.0;
    for s in all {
        let c = rho / (1.0 + rho * s.ztz);
        a += &s.xtx - &s.xtz * s.xtz.transpose() * c;
        b += &s.xty - &s.xtz * (c * s.zty);
        yty += s.yty - c * s.zty * s.zty;
        logdet_v += (rho * s.ztz).ln_1p();
    }
    if ridge {
        for i in 0..p {
            a[(i, i)] += RIDGE;
        }
    }
    let chol = a.clone().cholesky()?;
    let coef = chol.solve(&b);
    let rss = (yty - coef.dot(&b)).max(1e-300);
    let dof = (n_obs.saturating_sub(p)).max(1) as f64;
    let sigma2 = rss / dof;
    let logdet_a: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Some(Profile {
        coef,
        sigma2,
        reml: -0.5 * (dof * sigma2.ln() + logdet_v + logdet_a),
    })
}

fn golden_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-7 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // the boundary can beat the interior when the likelihood is monotone
    [lo, mid, hi]
        .into_iter()
        .map(|x| (x, f(x)))
        .fold((mid, f64::NEG_INFINITY), |best, (x, v)| if v > best.1 { (x, v) } else { best })
        .0
}

/// REML fit of `y = Xβ + z·b + e`, `b ~ N(0, σ_b²)`, `e ~ N(0, σ²)`.
pub fn fit_random_intercept(groups: &[Group], p: usize) -> LmmFit {
    let all: Vec<Stats> = groups.iter().map(|g| stats(g, p)).collect();
    let n_obs: usize = groups.iter().map(|g| g.y.len()).sum();
    let mut pooled = DMatrix::zeros(p, p);
    for s in &all {
        pooled += &s.xtx;
    }
    let eig = pooled.clone().symmetric_eigen().eigenvalues;
    let (min, max) = (eig.min(), eig.max());
    let ridge = !(min > 1e-12 * max.max(1e-300));
    if ridge {
        warn!("collinear fixed-effect design (eigenvalue ratio {:e}); using ridge penalty {RIDGE:e}", min / max);
    }
    let eval = |lr: f64| profile(&all, p, n_obs, lr.exp(), ridge).map_or(f64::NEG_INFINITY, |pr| pr.reml);
    let log_rho = golden_max(eval, LOG_RHO_RANGE.0, LOG_RHO_RANGE.1);
    let rho = log_rho.exp();
    let pr = profile(&all, p, n_obs, rho, ridge)
        .or_else(|| profile(&all, p, n_obs, rho, true))
        .expect("ridge-penalized system is positive definite");
    let blups = groups
        .iter()
        .zip(&all)
        .map(|(g, s)| {
            if g.y.is_empty() {
                return 0.0;
            }
            let zr = s.zty - s.xtz.dot(&pr.coef);
            rho * zr / (1.0 + rho * s.ztz)
        })
        .collect();
    LmmFit {
        coef: pr.coef.iter().copied().collect(),
        sigma2: pr.sigma2,
        sigma2_b: rho * pr.sigma2,
        rho,
        blups,
        ridge,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn simulated(n: usize, sb: f64, se: f64, seed: u64) -> Vec<Group> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nb = Normal::new(0.0, sb).unwrap();
        let ne = Normal::new(0.0, se).unwrap();
        (0..n)
            .map(|_| {
                let b = nb.sample(&mut rng);
                let mut g = Group::default();
                for j in 0..8 {
                    let t = j as f64;
                    g.x.push(vec![1.0, t]);
                    g.z.push(1.0);
                    g.y.push(2.0 - 0.5 * t + b + ne.sample(&mut rng));
                }
                g
            })
            .collect()
    }

    #[test]
    fn noise_free_recovers_coefficients() {
        let groups: Vec<Group> = (0..10)
            .map(|i| {
                let mut g = Group::default();
                for j in 0..4 {
                    let t = j as f64 + 0.1 * i as f64;
                    g.x.push(vec![1.0, t, (i as f64).sin()]);
                    g.z.push(1.0);
                    g.y.push(1.5 + 0.25 * t - 0.75 * (i as f64).sin());
                }
                g
            })
            .collect();
        let fit = fit_random_intercept(&groups, 3);
        for (c, w) in fit.coef.iter().zip([1.5, 0.25, -0.75]) {
            assert!((c - w).abs() < 1e-8, "{:?}", fit.coef);
        }
    }

    #[test]
    fn variance_components_recovered() {
        let fit = fit_random_intercept(&simulated(500, 0.8, 0.5, 1), 2);
        assert!((fit.sigma2_b - 0.64).abs() < 0.12, "{}", fit.sigma2_b);
        assert!((fit.sigma2 - 0.25).abs() < 0.02, "{}", fit.sigma2);
        assert!((fit.coef[1] + 0.5).abs() < 0.01);
    }

    #[test]
    fn collinear_design_falls_back_to_ridge() {
        let mut groups = simulated(20, 0.5, 0.5, 2);
        for g in &mut groups {
            for r in &mut g.x {
                r.push(2.0 * r[1]);
            }
        }
        let fit = fit_random_intercept(&groups, 3);
        assert!(fit.ridge);
        assert!(fit.coef.iter().all(|c| c.is_finite()));
    }
}
