//! Trainers on the synthetic 2D task.

use atent::attacks::{robust_accuracy, AttackConfig};
use atent::data::{self, Dataset};
use atent::defenses::{self, DefenseKind, PgdTrainConfig, StopMetric, TrainerConfig};
use atent::models::{accuracy, build_mlp};
use atent::sampler::{GibbsSamplerConfig, NormKind};

fn task(separation: f64, seed: u64) -> (Dataset, Dataset, Dataset) {
    let ds = data::synth_two_gaussians(400, separation, seed).unwrap();
    let (tr, val) = data::train_val_split(&ds).unwrap();
    (tr, val, data::synth_two_gaussians(400, separation, seed ^ 0x7E57).unwrap())
}

fn cfg(defense: DefenseKind, seed: u64) -> TrainerConfig {
    let mut c = TrainerConfig::new(defense, 0.1, 30, 20, seed);
    c.early_stop.metric = StopMetric::Natural;
    c
}

#[test]
fn sgd_separates_distant_blobs() {
    let (tr, val, test) = task(8.0, 0);
    let out = defenses::train_sgd(&cfg(DefenseKind::Sgd, 0), build_mlp(&[2, 16, 16, 2], 0).unwrap(), &tr, &val).unwrap();
    let acc = accuracy(&out.best_params, &test.inputs, &test.labels).unwrap();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn adversarial_training_beats_sgd_under_attack() {
    let eps = 0.2;
    let attack = AttackConfig::pgd(NormKind::Linf, eps, 20, 2.5 * eps / 20.0);
    for seed in 0..2 {
        let (tr, val, test) = task(8.0, seed);
        let init = build_mlp(&[2, 16, 16, 2], seed).unwrap();
        let pgd = TrainerConfig {
            pgd: Some(PgdTrainConfig {
                norm: NormKind::Linf,
                radius: eps,
                steps: 10,
                step_size: None,
                random_start: false,
                warmup_epochs: 0,
            }),
            ..cfg(DefenseKind::PgdAt, seed)
        };
        let a = defenses::train_sgd(&cfg(DefenseKind::Sgd, seed), init.clone(), &tr, &val).unwrap();
        let b = defenses::train_pgd_at(&pgd, init, &tr, &val).unwrap();
        let ra = robust_accuracy(&a.params, &test, &attack).unwrap();
        let rb = robust_accuracy(&b.params, &test, &attack).unwrap();
        assert!(rb >= ra + 0.2, "seed {seed}: sgd {ra}, pgd_at {rb}");
    }
}

#[test]
fn every_trainer_is_deterministic_and_reports_the_same_schema() {
    let (tr, val, _) = task(4.0, 3);
    let sampler_l2 = GibbsSamplerConfig::l2(50.0, 0.005, 3, 0.01, 0.9);
    let sampler_linf = GibbsSamplerConfig::linf(20.0, 0.01, 3, 0.01, 0.9);
    let configs = [
        cfg(DefenseKind::Sgd, 1),
        TrainerConfig {
            sampler: Some(GibbsSamplerConfig::l2(1.0, 0.05, 3, 1e-3, 0.75)),
            ..cfg(DefenseKind::EntropySgd, 1)
        },
        TrainerConfig {
            pgd: Some(PgdTrainConfig {
                norm: NormKind::L2,
                radius: 0.05,
                steps: 3,
                step_size: None,
                random_start: true,
                warmup_epochs: 2,
            }),
            ..cfg(DefenseKind::PgdAt, 1)
        },
        TrainerConfig {
            sampler: Some(sampler_l2),
            ..cfg(DefenseKind::AtentL2, 1)
        },
        TrainerConfig {
            sampler: Some(sampler_linf),
            ..cfg(DefenseKind::AtentLinf, 1)
        },
    ];
    for c in configs {
        let c = TrainerConfig { epochs: 3, ..c };
        let init = build_mlp(&[2, 8, 2], 4).unwrap();
        let a = defenses::train(&c, init.clone(), &tr, &val).unwrap();
        let b = defenses::train(&c, init, &tr, &val).unwrap();
        assert!(a.params.bit_eq(&b.params), "{:?}", c.defense);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|m| m.train_loss.is_finite()));
    }
}

#[test]
fn robust_early_stopping_keeps_the_best_epoch() {
    let (tr, val, _) = task(8.0, 5);
    let mut c = cfg(DefenseKind::Sgd, 5);
    c.early_stop.metric = StopMetric::Robust;
    c.early_stop.eval_attack = Some(AttackConfig::pgd(NormKind::Linf, 0.2, 5, 0.1));
    let out = defenses::train(&c, build_mlp(&[2, 8, 2], 5).unwrap(), &tr, &val).unwrap();
    let best = out.best_epoch.unwrap();
    let robust: Vec<f64> = out.history.iter().map(|m| m.rob_acc.unwrap()).collect();
    let top = robust.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(robust[best], top);
    assert!(robust[..best].iter().all(|&r| r < top));
}
