//! Numerical oracles against closed forms, and the verification suites.

use atent::oracle::{self, compare_moments, grid_gibbs_density, StationaryRun};
use atent::rng;
use atent::sampler::{self, GibbsSamplerConfig};
use atent::tensor::Tensor;
use atent::verify;

#[test]
fn grid_matches_closed_form_quadratic_moments() {
    for (a, gamma, x) in [(0.0f64, 4.0f64, 0.5f64), (0.5, 4.0, 1.0), (-1.0, 2.0, -0.3), (1.9, 4.0, 0.2)] {
        let (mean, var) = (gamma * x / (gamma - 2.0 * a), 1.0 / (gamma - 2.0 * a));
        let sd: f64 = var.sqrt();
        let g = grid_gibbs_density(|p| a * p[0] * p[0], &[x], gamma, &[(mean - 14.0 * sd, mean + 14.0 * sd)], 6000).unwrap();
        assert!((g.mean()[0] - mean).abs() < 1e-6 * sd.max(1.0), "a={a}: mean {} vs {mean}", g.mean()[0]);
        assert!((g.variance()[0] / var - 1.0).abs() < 1e-6, "a={a}: var {} vs {var}", g.variance()[0]);
    }
}

#[test]
fn linear_loss_shifts_the_mean_by_slope_over_gamma() {
    let (b, gamma) = (0.8, 5.0);
    let g = grid_gibbs_density(|p| b * p[0], &[0.0], gamma, &[(-6.0, 6.0)], 6000).unwrap();
    assert!((g.mean()[0] - b / gamma).abs() < 1e-9);
    assert!((g.variance()[0] - 1.0 / gamma).abs() < 1e-9);
}

#[test]
fn two_dimensional_grid_factorizes() {
    let g = grid_gibbs_density(|p| 0.5 * p[0] * p[0] + 0.3 * p[1], &[1.0, 0.0], 4.0, &[(-5.0, 7.0), (-6.0, 6.0)], 400).unwrap();
    let (m, v) = (g.mean(), g.variance());
    assert!((m[0] - 4.0 / 3.0).abs() < 1e-6 && (v[0] - 1.0 / 3.0).abs() < 1e-6);
    assert!((m[1] - 0.075).abs() < 1e-6 && (v[1] - 0.25).abs() < 1e-6);
}

#[test]
fn refining_the_grid_converges() {
    // a skewed, non-Gaussian target
    let loss = |p: &[f64]| -0.25 * p[0].powi(4) + 0.6 * p[0];
    let reference = grid_gibbs_density(loss, &[0.3], 2.0, &[(-4.0, 4.0)], 64_000).unwrap().mean()[0];
    let errs: Vec<f64> = [8, 16, 64]
        .iter()
        .map(|&n| (grid_gibbs_density(loss, &[0.3], 2.0, &[(-4.0, 4.0)], n).unwrap().mean()[0] - reference).abs())
        .collect();
    // midpoint sums of a smooth, decaying integrand converge very fast
    assert!(errs[1] < errs[0] / 10.0, "{errs:?}");
    assert!(errs[2] < 1e-10, "{errs:?}");
}

#[test]
fn autodiff_input_gradient_matches_finite_differences() {
    let params = atent::models::build_mlp(&[3, 5, 2], 2).unwrap();
    let x = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.4]).unwrap();
    let y = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let batch = atent::models::Batch::new(x.clone(), y.clone()).unwrap();
    let auto = atent::models::loss_and_grads(&params, &batch, atent::models::GradTarget::Inputs)
        .unwrap()
        .inputs
        .unwrap();
    let fd = oracle::finite_difference_grad(
        |t| atent::models::loss(&params, &atent::models::Batch::new(t.clone(), y.clone()).unwrap()).unwrap(),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(oracle::relative_error(&auto, &fd).unwrap() < 1e-7);
}

fn constant_loss_samples(gamma: f64, noise: f64, seed: u64) -> Vec<f64> {
    let cfg = GibbsSamplerConfig::l2(gamma, 0.01, 1, noise, 1.0);
    let run = StationaryRun {
        coords: 100,
        kept_per_coord: 300,
        thin: 50,
        burn_in: 0.2,
        seed,
    };
    oracle::stationary_samples(|_| 0.0, 0.0, &cfg, &run).unwrap()
}

#[test]
fn noise_scale_tempers_the_variance() {
    // stationary variance of the tempered chain is ε²/γ
    for (gamma, eps) in [(4.0, 1.0), (4.0, 0.5), (10.0, 2.0)] {
        let s = constant_loss_samples(gamma, eps, 3);
        let r = compare_moments(&s, 0.0, eps * eps / gamma, 0.1).unwrap();
        assert!(r.var_error < 0.1, "γ={gamma} ε={eps}: {r:?}");
    }
}

#[test]
fn small_noise_keeps_the_chain_tight() {
    let s = constant_loss_samples(4.0, 0.001, 5);
    let sd = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    assert!((sd / (0.001 / 2.0) - 1.0).abs() < 0.1, "spread {sd}");
}

#[test]
fn initial_perturbation_has_half_normal_magnitudes() {
    let cfg = GibbsSamplerConfig {
        init_radius: Some(0.2),
        ..GibbsSamplerConfig::l2(5.0, 0.1, 1, 0.0, 1.0)
    };
    let x = Tensor::zeros(&[1, 200_000]);
    let d = sampler::init_perturbation(&x, &cfg, &mut rng::derive(1, &[]));
    let mean_abs = d.data().iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
    let expect = 0.2 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean_abs / expect - 1.0).abs() < 0.01, "{mean_abs} vs {expect}");
}

#[test]
fn verification_suites_pass_on_several_seeds() {
    for seed in [0, 1] {
        for r in verify::run_suites("all", seed).unwrap() {
            for c in &r.checks {
                assert!(c.passed, "seed {seed} {}/{}: {}", r.suite, c.name, c.detail);
            }
        }
    }
}
