use chronofit::io::{load_dataset, save_dataset, LoadOptions, Schema};
use chronofit::likelihood::{total_loglik, LikContext};
use chronofit::model::Dataset;
use chronofit::optimizer::{fisher_scoring_fit, FitOptions, FitResult};
use chronofit::simulator::{gen_dataset, SimConfig, TrueModel};
use chronofit::spline::spec_with_knot_count;
use chronofit::study::{bootstrap_from_resamples, fit_dataset, run_mc_study, summary_targets, FitSettings, McConfig};

fn small_context(data: &Dataset, knots: usize) -> LikContext {
    let mut ctx = LikContext::new(spec_with_knot_count(data, knots).unwrap());
    ctx.gl_nodes = 8;
    ctx.gh_nodes = 8;
    ctx
}

fn small_fit(n: usize, seed: u64) -> (Dataset, LikContext, FitResult) {
    let data = gen_dataset(&SimConfig::new(n, seed)).unwrap().dataset;
    let ctx = small_context(&data, 3);
    let fit = fit_dataset(&data, &ctx, &FitOptions::default()).unwrap();
    assert!(fit.converged, "fit stopped with {:?}", fit.stop);
    (data, ctx, fit)
}

#[test]
fn save_and_load_preserve_the_likelihood() {
    let data = gen_dataset(&SimConfig::new(30, 41)).unwrap().dataset;
    let dir = tempfile::tempdir().unwrap();
    let (long, brackets) = (dir.path().join("longitudinal.csv"), dir.path().join("brackets.csv"));
    let schema = Schema::simulated(2);
    save_dataset(&data, &schema, &long, &brackets).unwrap();
    let back = load_dataset(&long, &brackets, &schema, &LoadOptions::default()).unwrap();
    assert_eq!(back, data);
    let ctx = small_context(&data, 3);
    let truth = TrueModel::default().parameters(&ctx.spec).unwrap();
    let a = total_loglik(&data, &truth, &ctx).unwrap();
    let b = total_loglik(&back, &truth, &ctx).unwrap();
    assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
}

#[test]
fn identical_resamples_give_zero_standard_errors() {
    let (data, ctx, fit) = small_fit(40, 42);
    let all: Vec<usize> = (0..data.len()).collect();
    let boot = bootstrap_from_resamples(&data, &fit, &[all.clone(), all], &ctx, &FitOptions::default()).unwrap();
    assert!(boot.dropped.is_empty());
    for c in &boot.coefficients {
        assert_eq!(c.se, 0.0, "{}", c.name);
        assert_eq!(c.lower, c.estimate);
        assert!(c.p_value == 0.0 || (c.estimate == 0.0 && c.p_value == 1.0));
    }
    let hr = boot.get("theta_x1").unwrap().hazard_ratio.unwrap();
    assert!((hr[0] - fit.params_hat.theta_x[0].exp()).abs() < 1e-12);
    assert!(boot.get("beta1_0").unwrap().hazard_ratio.is_none());
}

#[test]
fn refit_from_the_estimate_is_idempotent() {
    let (data, ctx, fit) = small_fit(40, 43);
    let again = fisher_scoring_fit(&data, &fit.params_hat, &ctx, &FitOptions::default()).unwrap();
    assert!(again.converged);
    assert!(again.iterations <= 3, "{} iterations", again.iterations);
    assert!(again.loglik() >= fit.loglik() - 1e-9);
    assert!((again.loglik() - fit.loglik()).abs() < 1e-3 * fit.loglik().abs());
}

#[test]
fn single_replicate_bias_is_estimate_minus_truth() {
    let mut cfg = McConfig::new(SimConfig::new(50, 0), 1, 0, 3, 44);
    cfg.fit = FitSettings {
        gl_nodes: 8,
        gh_nodes: 8,
        ..FitSettings::default()
    };
    let summary = run_mc_study(&cfg).unwrap();
    assert_eq!(summary.replicates.len(), 1);
    let rep = &summary.replicates[0];
    let targets = summary_targets(&cfg.sim, 1).unwrap();
    assert_eq!(summary.coefficients.len(), targets.len());
    for (u, (c, (name, truth))) in summary.coefficients.iter().zip(&targets).enumerate() {
        assert_eq!(&c.name, name);
        assert_eq!(c.bias, rep.estimates[u] - truth);
        assert_eq!(c.sd, 0.0);
        assert!(c.ase.is_none() && c.cp.is_none());
    }
    let h = &summary.hazard;
    assert_eq!(h.t.len(), 200);
    assert_eq!(h.mean, rep.hazard);
    assert!(h.mean.windows(2).all(|w| w[1] >= w[0] - 1e-12));
}

#[test]
fn moderate_sample_recovers_the_regression_coefficients() {
    let data = gen_dataset(&SimConfig::new(300, 45)).unwrap().dataset;
    let mut ctx = LikContext::new(spec_with_knot_count(&data, 6).unwrap());
    ctx.gl_nodes = 10;
    ctx.gh_nodes = 10;
    let fit = fit_dataset(&data, &ctx, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    let p = &fit.params_hat;
    // about four Monte Carlo SDs at this sample size
    for b in 0..2 {
        assert!((p.beta[b][0] - 5.0).abs() < 0.25, "beta{b}_0 = {}", p.beta[b][0]);
        assert!((p.beta[b][1] + 0.2).abs() < 0.03, "beta{b}_1 = {}", p.beta[b][1]);
        assert!((p.beta[b][2] + 0.3).abs() < 0.25, "beta{b}_2 = {}", p.beta[b][2]);
        assert!((p.gamma[b] + 0.4).abs() < 0.08, "gamma{b} = {}", p.gamma[b]);
    }
    assert!((p.theta_x[0] - 0.3).abs() < 0.45, "theta_x = {}", p.theta_x[0]);
    let truth = TrueModel::default().parameters(&ctx.spec).unwrap();
    let at_truth = total_loglik(&data, &truth, &ctx).unwrap();
    assert!(fit.loglik() > at_truth, "{} <= {at_truth}", fit.loglik());
}
