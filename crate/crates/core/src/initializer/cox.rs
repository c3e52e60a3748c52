//! Cox partial likelihood with Breslow ties and piecewise-constant
//! time-varying covariates, maximized by Newton's method.

use log::warn;
use nalgebra::{DMatrix, DVector};

/// One subject's follow-up: covariate row `rows[j]` applies on
/// `(starts[j], starts[j+1]]`, the first row also on `(0, starts[1]]`.
#[derive(Debug, Clone)]
pub struct CoxSubject {
    pub time: f64,
    pub event: bool,
    pub starts: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl CoxSubject {
    /// Left-continuous covariate value at `t`.
    pub fn at(&self, t: f64) -> &[f64] {
        let mut idx = 0;
        for (j, &s) in self.starts.iter().enumerate() {
            if j == 0 || s < t {
                idx = j;
            } else {
                break;
            }
        }
        &self.rows[idx]
    }
}

/// Risk sets evaluated once: for each distinct event time, the event count,
/// the summed covariates of the failures, and the at-risk covariate rows.
pub struct CoxData {
    dim: usize,
    strata: Vec<(f64, Vec<f64>, DMatrix<f64>)>,
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub coef: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl CoxData {
    pub fn new(subjects: &[CoxSubject], dim: usize) -> Self {
        let mut times: Vec<f64> = subjects.iter().filter(|s| s.event).map(|s| s.time).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let strata = times
            .iter()
            .map(|&t| {
                let mut failed = vec![0.0; dim];
                let mut d = 0.0;
                let at_risk: Vec<&CoxSubject> = subjects.iter().filter(|s| s.time >= t).collect();
                for s in subjects.iter().filter(|s| s.event && s.time == t) {
                    d += 1.0;
                    for (f, v) in failed.iter_mut().zip(s.at(t)) {
                        *f += v;
                    }
                }
                let rows = DMatrix::from_fn(at_risk.len(), dim, |i, j| at_risk[i].at(t)[j]);
                failed.push(d);
                (t, failed, rows)
            })
            .collect();
        CoxData { dim, strata }
    }

    pub fn event_count(&self) -> usize {
        self.strata.iter().map(|s| s.1[self.dim] as usize).sum()
    }

    /// Log partial likelihood, gradient and negative Hessian at `beta`.
    pub fn evaluate(&self, beta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.dim;
        let b = DVector::from_column_slice(beta);
        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for (_, failed, rows) in &self.strata {
            let d = failed[p];
            let eta = rows * &b;
            let max = eta.max();
            let w = eta.map(|e| (e - max).exp());
            let s0: f64 = w.sum();
            let s1 = rows.transpose() * &w;
            let mut s2 = DMatrix::zeros(p, p);
            for (i, wi) in w.iter().enumerate() {
                let r = rows.row(i);
                s2 += r.transpose() * r * *wi;
            }
            let fsum = DVector::from_column_slice(&failed[..p]);
            ll += fsum.dot(&b) - d * (max + s0.ln());
            let mean = &s1 / s0;
            grad += fsum - &mean * d;
            info += (s2 / s0 - &mean * mean.transpose()) * d;
        }
        (ll, grad, info)
    }

    /// Score statistic `UᵀI⁻¹U` at `beta = 0`.
    pub fn score_test_at_zero(&self) -> f64 {
        let (_, g, info) = self.evaluate(&vec![0.0; self.dim]);
        match info.clone().cholesky() {
            Some(ch) => g.dot(&ch.solve(&g)),
            None => f64::INFINITY,
        }
    }

    /// Newton-Raphson with step halving; falls back to zero coefficients
    /// (with a warning) after 100 steps without convergence.
    pub fn fit(&self) -> CoxFit {
        let p = self.dim;
        let mut beta = vec![0.0; p];
        let (mut ll, mut g, mut info) = self.evaluate(&beta);
        for iter in 1..=100 {
            let step = match info.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => {
                    let mut reg = info.clone();
                    for i in 0..p {
                        reg[(i, i)] += 1e-8 * info.diagonal().amax().max(1.0);
                    }
                    match reg.cholesky() {
                        Some(ch) => ch.solve(&g),
                        None => break,
                    }
                }
            };
            let mut eta = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + eta * s).collect();
                let (cl, cg, ci) = self.evaluate(&cand);
                if cl.is_finite() && cl >= ll - 1e-12 {
                    let gain = cl - ll;
                    beta = cand;
                    ll = cl;
                    g = cg;
                    info = ci;
                    moved = true;
                    if (eta * step.amax()) < 1e-9 || gain.abs() < 1e-10 {
                        return CoxFit {
                            coef: beta,
                            loglik: ll,
                            converged: true,
                            iterations: iter,
                        };
                    }
                    break;
                }
                eta *= 0.5;
            }
            if !moved {
                break;
            }
        }
        warn!("Cox fit did not converge; using zero coefficients");
        CoxFit {
            loglik: self.evaluate(&vec![0.0; p]).0,
            coef: vec![0.0; p],
            converged: false,
            iterations: 100,
        }
    }
}
