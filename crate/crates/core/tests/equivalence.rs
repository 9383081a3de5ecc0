//! Degenerate settings of the entropic trainers collapse onto simpler
//! algorithms.

use atent::data::{self, Dataset};
use atent::defenses::{self, DefenseKind, PgdTrainConfig, StopMetric, TrainerConfig};
use atent::models::{self, build_mlp, Batch, GradTarget};
use atent::rng;
use atent::sampler::{self, ChainState, GibbsSamplerConfig, NormKind};
use atent::tensor::Tensor;

fn blobs() -> (Dataset, Dataset) {
    let ds = data::synth_two_gaussians(200, 3.0, 5).unwrap();
    data::train_val_split(&ds).unwrap()
}

fn natural_stop(mut cfg: TrainerConfig) -> TrainerConfig {
    cfg.early_stop.metric = StopMetric::Natural;
    cfg
}

#[test]
fn noiseless_unit_ema_step_is_one_regularized_ascent_step() {
    let (tr, _) = blobs();
    let params = build_mlp(&[2, 8, 2], 3).unwrap();
    let batch = data::batch_iter(&tr, 16, 0, 0).unwrap().remove(0);
    let cfg = GibbsSamplerConfig {
        init_radius: Some(0.0),
        ..GibbsSamplerConfig::l2(4.0, 0.05, 1, 0.0, 1.0)
    };
    let (grads, _) = defenses::atent_gradient(&params, &batch, &cfg, rng::derive(9, &[])).unwrap();

    // by hand: x' = x + η′(∇ₓL(x) + γ(x − x)), then ∇_w L(w; x')
    let gx = models::loss_and_grads(&params, &batch, GradTarget::Inputs).unwrap().inputs.unwrap();
    let mut xp = batch.inputs.clone();
    for ((v, &g), &x) in xp.data_mut().iter_mut().zip(gx.data()).zip(batch.inputs.data()) {
        *v += cfg.step * (g + cfg.gamma * (x - *v));
    }
    let expect = models::loss_and_grads(&params, &batch.with_inputs(xp).unwrap(), GradTarget::Weights)
        .unwrap()
        .weights
        .unwrap();
    for (a, b) in grads.iter().zip(&expect) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn noiseless_step_from_displaced_point_matches_formula() {
    let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
    let xp = x.map(|v| v + 0.05);
    let g = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
    let cfg = GibbsSamplerConfig::l2(7.0, 0.1, 3, 0.0, 1.0);
    let out = sampler::langevin_step(ChainState::new(xp.clone(), x.clone(), rng::derive(0, &[])).unwrap(), &g, &cfg).unwrap();
    let mut expect = xp.clone();
    for ((v, &gv), &a) in expect.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
        *v += cfg.step * (gv + cfg.gamma * (a - *v));
    }
    assert!(out.x_prime.bit_eq(&expect));
}

#[test]
fn zero_radius_adversarial_training_is_plain_sgd() {
    let (tr, val) = blobs();
    let init = build_mlp(&[2, 8, 2], 1).unwrap();
    let sgd = natural_stop(TrainerConfig::new(DefenseKind::Sgd, 0.1, 3, 16, 4));
    let pgd = natural_stop(TrainerConfig {
        pgd: Some(PgdTrainConfig {
            norm: NormKind::Linf,
            radius: 0.0,
            steps: 5,
            step_size: None,
            random_start: false,
            warmup_epochs: 0,
        }),
        ..TrainerConfig::new(DefenseKind::PgdAt, 0.1, 3, 16, 4)
    });
    let a = defenses::train(&sgd, init.clone(), &tr, &val).unwrap();
    let b = defenses::train(&pgd, init, &tr, &val).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert!(a.best_params.bit_eq(&b.best_params));
}

/// One epoch of ATENT with an enormous distance penalty against one epoch
/// of SGD from the same start.
fn stiff_atent_drift(gamma: f64) -> f64 {
    let (tr, val) = blobs();
    let init = build_mlp(&[2, 8, 2], 2).unwrap();
    let sgd = natural_stop(TrainerConfig::new(DefenseKind::Sgd, 0.1, 1, 16, 6));
    let sampler = GibbsSamplerConfig {
        init_radius: Some(1e-6),
        ..GibbsSamplerConfig::l2(gamma, 1.0 / gamma, 1, 0.001, 1.0)
    };
    let atent = natural_stop(TrainerConfig {
        sampler: Some(sampler),
        ..TrainerConfig::new(DefenseKind::AtentL2, 0.1, 1, 16, 6)
    });
    let a = defenses::train(&sgd, init.clone(), &tr, &val).unwrap();
    let b = defenses::train(&atent, init, &tr, &val).unwrap();
    a.params.distance(&b.params).unwrap()
}

#[test]
fn stiff_penalty_tracks_sgd() {
    let d = stiff_atent_drift(1e6);
    assert!(d <= 1e-3, "weight distance {d}");
    // a loose penalty genuinely moves away
    assert!(stiff_atent_drift(10.0) > d);
}

#[test]
fn outer_gradient_matches_finite_differences_of_the_sample_loss() {
    // the chain samples are constants for the outer step, so with K = 1 the
    // weight gradient differentiates L(w; x') at the fixed sample x'
    let (tr, _) = blobs();
    let params = build_mlp(&[2, 4, 2], 8).unwrap();
    let batch = data::batch_iter(&tr, 8, 1, 0).unwrap().remove(0);
    let cfg = GibbsSamplerConfig::l2(20.0, 0.01, 1, 0.01, 1.0);
    let chain = sampler::run_chain(&params, &batch, &cfg, rng::derive(4, &[])).unwrap();
    let (grads, _) = defenses::atent_gradient(&params, &batch, &cfg, rng::derive(4, &[])).unwrap();
    let sample = Batch::new(chain.final_x, batch.labels.clone()).unwrap();
    let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let x = Tensor::new(vec![flat.len()], flat).unwrap();
    let fd = atent::oracle::finite_difference_grad(
        |w| {
            let mut at = 0;
            let ts = params
                .tensors()
                .iter()
                .map(|t| {
                    let n = t.len();
                    at += n;
                    Tensor::new(t.shape().to_vec(), w.data()[at - n..at].to_vec()).unwrap()
                })
                .collect();
            models::loss(&params.with_tensors(ts).unwrap(), &sample).unwrap()
        },
        &x,
        1e-5,
    )
    .unwrap();
    let ours: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let ours = Tensor::new(vec![ours.len()], ours).unwrap();
    let err = atent::oracle::relative_error(&ours, &fd).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn regularized_objective_climbs_without_noise() {
    // noiseless ascent on L(x') − (γ/2)‖x' − x‖² with a small step never
    // decreases the objective, batch after batch
    let (tr, _) = blobs();
    let params = build_mlp(&[2, 8, 2], 11).unwrap();
    let gamma = 5.0;
    let cfg = GibbsSamplerConfig {
        init_radius: Some(0.0),
        ..GibbsSamplerConfig::l2(gamma, 0.01, 20, 0.0, 0.5)
    };
    let mut checked = 0;
    for epoch in 0..13 {
        for batch in data::batch_iter(&tr, 16, 2, epoch).unwrap() {
            let objective = |x: &Tensor| {
                let l = models::loss(&params, &batch.with_inputs(x.clone()).unwrap()).unwrap();
                let d2: f64 = x.data().iter().zip(batch.inputs.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                // the chain climbs each sample's own loss, i.e. n times the mean
                l * batch.len() as f64 - 0.5 * gamma * d2
            };
            let chain = sampler::run_chain(&params, &batch, &cfg, rng::derive(0, &[])).unwrap();
            let mut prev = objective(&batch.inputs);
            for s in &chain.samples {
                let now = objective(s);
                assert!(now >= prev - 1e-12, "objective fell from {prev} to {now}");
                prev = now;
            }
            checked += 1;
            if checked == 100 {
                return;
            }
        }
    }
    panic!("only {checked} batches available");
}

#[test]
fn entropy_sgd_outer_step_points_along_the_gradient() {
    // one noiseless inner step with unit EMA: γ(w − μ) = γη′∇L(w)
    let (tr, _) = blobs();
    let params = build_mlp(&[2, 6, 2], 12).unwrap();
    let batch = data::batch_iter(&tr, 32, 0, 0).unwrap().remove(0);
    let cfg = GibbsSamplerConfig::l2(3.0, 0.01, 1, 0.0, 1.0);
    let (step, _) = defenses::entropy_sgd_step(&params, &batch, &cfg, rng::derive(0, &[])).unwrap();
    let g = models::loss_and_grads(&params, &batch, GradTarget::Weights).unwrap().weights.unwrap();
    for (s, g) in step.iter().zip(&g) {
        for (a, b) in s.data().iter().zip(g.data()) {
            assert!((a - cfg.gamma * cfg.step * b).abs() < 1e-12);
        }
    }
}

#[test]
fn entropy_sgd_with_zero_lr_is_a_fixed_point() {
    let (tr, val) = blobs();
    let init = build_mlp(&[2, 6, 2], 13).unwrap();
    let cfg = natural_stop(TrainerConfig {
        sampler: Some(GibbsSamplerConfig::l2(1.0, 0.1, 3, 1e-3, 0.75)),
        ..TrainerConfig::new(DefenseKind::EntropySgd, 0.0, 2, 16, 0)
    });
    let out = defenses::train(&cfg, init.clone(), &tr, &val).unwrap();
    assert!(out.params.bit_eq(&init));
}

