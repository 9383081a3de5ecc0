//! Verification suites behind `atent verify`: gradients against finite
//! differences, chain stationarity against grid densities, and the
//! smoothness/dissipativity bounds.

use serde::Serialize;

use crate::autodiff::{Reduction, Tape, Var};
use crate::error::Result;
use crate::models::{self, Batch, GradTarget, ModelParams};
use crate::oracle::{self, CertifiedLoss, StationaryRun};
use crate::rng;
use crate::sampler::GibbsSamplerConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const AFFINE_GRAD_TOL: f64 = 1e-6;

fn random_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(r, n)).expect("positive extents")
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Largest relative error over inputs between backward and central
/// differences of `Σ out ⊙ R`, with `R` a fixed random weighting.
pub fn op_gradient_error(inputs: &[Tensor], build: &Build, seed: u64) -> Result<f64> {
    let forward = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(random_tensor(&shape, &mut rng::derive(seed, &[99])));
        let prod = tape.mul(out, w)?;
        let root = tape.sum(prod)?;
        Ok((tape, vars, root))
    };
    let (mut tape, vars, root) = forward(inputs)?;
    let grads = tape.backward(root)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("trainable leaf").clone();
        let numeric = oracle::finite_difference_grad(
            |probe| {
                let mut vals = inputs.to_vec();
                vals[i] = probe.clone();
                let (tape, _, root) = forward(&vals).expect("same shapes as the base point");
                tape.value(root).item()
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(oracle::relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}

fn tiny_params(arch_cnn: bool, seed: u64) -> Result<ModelParams> {
    if arch_cnn {
        models::build_small_cnn([1, 8, 8], &[2, 3], &[4, 3], seed)
    } else {
        models::build_mlp(&[4, 6, 5, 3], seed)
    }
}

/// Relative error of model weight or input gradients against finite
/// differences of the mean loss.
pub fn model_gradient_error(params: &ModelParams, batch: &Batch, wrt: GradTarget) -> Result<f64> {
    let out = models::loss_and_grads(params, batch, wrt)?;
    match wrt {
        GradTarget::Inputs => {
            let n = batch.len() as f64;
            let numeric = oracle::finite_difference_grad(
                |x| models::loss(params, &batch.with_inputs(x.clone()).unwrap()).unwrap() * n,
                &batch.inputs,
                FD_STEP,
            )?;
            oracle::relative_error(out.inputs.as_ref().expect("requested"), &numeric)
        }
        _ => {
            let analytic = out.weights.expect("requested");
            let mut worst: f64 = 0.0;
            for (i, g) in analytic.iter().enumerate() {
                let numeric = oracle::finite_difference_grad(
                    |w| {
                        let mut ts = params.tensors().to_vec();
                        ts[i] = w.clone();
                        models::loss(&params.with_tensors(ts).unwrap(), batch).unwrap()
                    },
                    &params.tensors()[i],
                    FD_STEP,
                )?;
                worst = worst.max(oracle::relative_error(g, &numeric)?);
            }
            Ok(worst)
        }
    }
}

fn check(name: &str, err: Result<f64>, tol: f64) -> Check {
    match err {
        Ok(e) => Check {
            name: name.to_string(),
            passed: e <= tol,
            detail: format!("rel err {e:.3e} (tol {tol:.0e})"),
        },
        Err(e) => Check {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn gradient_suite(seed: u64) -> SuiteReport {
    let mut r = rng::derive(seed, &[rng::TAG_DATA, 7]);
    let mut t = |s: &[usize]| random_tensor(s, &mut r);
    // keep relu inputs away from the kink
    let relu_in = t(&[3, 5]).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
    let labels_ce = Tensor::new(vec![3, 4], vec![0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1.]).unwrap();
    let ops: Vec<(&str, Vec<Tensor>, Box<Build>, f64)> = vec![
        ("matmul", vec![t(&[3, 4]), t(&[4, 2])], Box::new(|tp, v| tp.matmul(v[0], v[1])), AFFINE_GRAD_TOL),
        ("add_bias", vec![t(&[3, 4]), t(&[4])], Box::new(|tp, v| tp.add_bias(v[0], v[1])), AFFINE_GRAD_TOL),
        (
            "add_channel_bias",
            vec![t(&[2, 3, 4, 4]), t(&[3])],
            Box::new(|tp, v| tp.add_channel_bias(v[0], v[1])),
            AFFINE_GRAD_TOL,
        ),
        ("add", vec![t(&[2, 3]), t(&[2, 3])], Box::new(|tp, v| tp.add(v[0], v[1])), AFFINE_GRAD_TOL),
        ("mul", vec![t(&[2, 3]), t(&[2, 3])], Box::new(|tp, v| tp.mul(v[0], v[1])), GRAD_TOL),
        ("scale", vec![t(&[2, 3])], Box::new(|tp, v| tp.scale(v[0], -1.7)), AFFINE_GRAD_TOL),
        ("sum", vec![t(&[2, 3])], Box::new(|tp, v| tp.sum(v[0])), AFFINE_GRAD_TOL),
        ("reshape", vec![t(&[2, 6])], Box::new(|tp, v| tp.reshape(v[0], &[3, 4])), AFFINE_GRAD_TOL),
        ("relu", vec![relu_in], Box::new(|tp, v| tp.relu(v[0])), GRAD_TOL),
        (
            "conv2d",
            vec![t(&[2, 2, 5, 5]), t(&[3, 2, 3, 3])],
            Box::new(|tp, v| tp.conv2d(v[0], v[1], 1, 1)),
            GRAD_TOL,
        ),
        (
            "conv2d_strided",
            vec![t(&[1, 2, 6, 6]), t(&[2, 2, 2, 2])],
            Box::new(|tp, v| tp.conv2d(v[0], v[1], 2, 0)),
            GRAD_TOL,
        ),
        ("max_pool2d", vec![t(&[2, 2, 4, 4])], Box::new(|tp, v| tp.max_pool2d(v[0], 2)), GRAD_TOL),
        (
            "softmax_cross_entropy",
            vec![t(&[3, 4])],
            Box::new(move |tp, v| tp.softmax_cross_entropy(v[0], &labels_ce, Reduction::Mean)),
            GRAD_TOL,
        ),
    ];
    let mut checks: Vec<Check> = ops
        .iter()
        .map(|(name, inputs, build, tol)| check(name, op_gradient_error(inputs, build.as_ref(), seed), *tol))
        .collect();

    let mlp = tiny_params(false, seed).expect("fixed descriptor");
    let cnn = tiny_params(true, seed).expect("fixed descriptor");
    let x_mlp = t(&[3, 4]).map(|v| 0.5 + 0.2 * v);
    let x_cnn = t(&[3, 1, 8, 8]).map(|v| 0.5 + 0.2 * v);
    let y3 = Tensor::new(vec![3, 3], vec![0., 1., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
    let mlp_batch = Batch::new(x_mlp, y3.clone()).expect("matching rows");
    let cnn_batch = Batch::new(x_cnn, y3).expect("matching rows");
    let model_checks = [
        ("mlp_loss_wrt_weights", model_gradient_error(&mlp, &mlp_batch, GradTarget::Weights)),
        ("mlp_loss_wrt_inputs", model_gradient_error(&mlp, &mlp_batch, GradTarget::Inputs)),
        ("cnn_loss_wrt_weights", model_gradient_error(&cnn, &cnn_batch, GradTarget::Weights)),
    ];
    checks.extend(model_checks.into_iter().map(|(n, e)| check(n, e, GRAD_TOL)));
    SuiteReport {
        suite: "gradients",
        checks,
    }
}

pub const STATIONARY_TOL: f64 = 0.10;

/// The chain settings used by the stationarity checks: `η′γ` small enough
/// that the discretization bias `1/(1 − η′κ/2)` stays near 1.
pub fn stationary_config(gamma: f64) -> GibbsSamplerConfig {
    GibbsSamplerConfig::l2(gamma, 0.01, 1, 1.0, 1.0)
}

pub fn stationary_run(seed: u64) -> StationaryRun {
    StationaryRun {
        coords: 100,
        kept_per_coord: 500,
        thin: 50,
        burn_in: 0.2,
        seed,
    }
}

fn moment_check(name: &str, report: Result<oracle::MomentReport>, expect_pass: bool) -> Check {
    match report {
        Ok(r) => Check {
            name: name.to_string(),
            passed: r.passed == expect_pass,
            detail: format!(
                "mean {:.4} vs {:.4} (err {:.3}), var {:.4} vs {:.4} (err {:.3}), {} samples{}",
                r.sample_mean,
                r.reference_mean,
                r.mean_error,
                r.sample_var,
                r.reference_var,
                r.var_error,
                r.kept,
                if expect_pass { "" } else { "; expected to fail" }
            ),
        },
        Err(e) => Check {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Stationary moments of `exp(a·x'² − (γ/2)(x' − x)²)` from the chain
/// (run with `chain_gamma`) against the grid oracle (built with `gamma`).
pub fn quadratic_stationarity(a: f64, gamma: f64, chain_gamma: f64, anchor: f64, seed: u64) -> Result<oracle::MomentReport> {
    let samples = oracle::stationary_samples(|v| 2.0 * a * v, anchor, &stationary_config(chain_gamma), &stationary_run(seed))?;
    let sd = (1.0 / (gamma - 2.0 * a)).sqrt();
    let centre = gamma * anchor / (gamma - 2.0 * a);
    let grid = oracle::grid_gibbs_density(
        |p| a * p[0] * p[0],
        &[anchor],
        gamma,
        &[(centre - 12.0 * sd, centre + 12.0 * sd)],
        4000,
    )?;
    oracle::chain_moment_check(&samples, &grid, STATIONARY_TOL)
}

pub fn sampler_suite(seed: u64) -> SuiteReport {
    let checks = vec![
        moment_check("constant_loss_gamma4", quadratic_stationarity(0.0, 4.0, 4.0, 0.5, seed), true),
        moment_check("quadratic_loss_a0.5_gamma4", quadratic_stationarity(0.5, 4.0, 4.0, 1.0, seed), true),
        moment_check("negative_control_chain_gamma2", quadratic_stationarity(0.5, 4.0, 2.0, 1.0, seed), false),
    ];
    SuiteReport { suite: "sampler", checks }
}

pub const LEMMA_POINTS: usize = 10_000;

pub fn lemma1_suite(seed: u64) -> SuiteReport {
    let quad = |p: &[f64]| vec![2.0 * p[0]];
    let concave = |p: &[f64]| vec![-2.0 * p[0]];
    let certified = CertifiedLoss { grad: &quad, beta: 2.0, lipschitz: 10.0, bounds: vec![(-5.0, 5.0)] };
    // understated constants must be caught
    let wrong_beta = CertifiedLoss { grad: &concave, beta: 0.0, lipschitz: 10.0, bounds: vec![(-5.0, 5.0)] };
    let wrong_lip = CertifiedLoss { grad: &quad, beta: 2.0, lipschitz: 0.0, bounds: vec![(-5.0, 5.0)] };
    let mut checks = Vec::new();
    let mut push = |name: &str, report: Result<oracle::LemmaCheckReport>, want: fn(&oracle::LemmaCheckReport) -> bool| {
        checks.push(match report {
            Ok(r) => Check {
                name: name.to_string(),
                passed: want(&r),
                detail: format!(
                    "ratio {:.4} <= {:.4}: {}, margin {:.4} >= 0: {} (m={}, b={:.4}, {} points)",
                    r.smoothness_ratio, r.smoothness_bound, r.smooth_ok, r.dissipativity_margin, r.dissipative_ok, r.m, r.b, r.points
                ),
            },
            Err(e) => Check {
                name: name.to_string(),
                passed: false,
                detail: format!("error: {e}"),
            },
        });
    };
    push("quadratic_a1_gamma3", oracle::lemma1_check(&certified, &[2.0], 3.0, LEMMA_POINTS, seed), |r| r.passed());
    push(
        "negative_control_understated_beta",
        oracle::lemma1_check(&wrong_beta, &[2.0], 3.0, LEMMA_POINTS, seed),
        |r| !r.smooth_ok,
    );
    push(
        "negative_control_understated_lipschitz",
        oracle::lemma1_check(&wrong_lip, &[2.0], 3.0, LEMMA_POINTS, seed),
        |r| !r.dissipative_ok,
    );
    SuiteReport { suite: "lemma1", checks }
}

/// Chain histograms against grid densities for the two stationarity
/// targets, as `(file name, svg)` pairs.
pub fn sampler_plots(seed: u64) -> Result<Vec<(&'static str, String)>> {
    let mut out = Vec::new();
    for (file, a, anchor) in [("sampler_constant.svg", 0.0, 0.5), ("sampler_quadratic.svg", 0.5, 1.0)] {
        let gamma = 4.0;
        let samples = oracle::stationary_samples(|v| 2.0 * a * v, anchor, &stationary_config(gamma), &stationary_run(seed))?;
        let sd = (1.0 / (gamma - 2.0 * a)).sqrt();
        let centre = gamma * anchor / (gamma - 2.0 * a);
        let grid = oracle::grid_gibbs_density(|p| a * p[0] * p[0], &[anchor], gamma, &[(centre - 4.0 * sd, centre + 4.0 * sd)], 400)?;
        out.push((file, crate::report::sampler_histogram_svg(&samples, &grid, 60)?));
    }
    Ok(out)
}

/// Runs the named suite (`gradients`, `sampler`, `lemma1` or `all`).
pub fn run_suites(name: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(match name {
        "gradients" => vec![gradient_suite(seed)],
        "sampler" => vec![sampler_suite(seed)],
        "lemma1" => vec![lemma1_suite(seed)],
        "all" => vec![gradient_suite(seed), sampler_suite(seed), lemma1_suite(seed)],
        other => {
            return Err(crate::error::AtentError::Config(format!(
                "unknown suite {other:?}; expected gradients, sampler, lemma1 or all"
            )))
        }
    })
}
