//! Evaluation-time adversaries and robust accuracy.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AtentError, Result};
use crate::models::{self, Batch, GradTarget, ModelParams};
use crate::rng::{self, Rng};
use crate::sampler::{self, GibbsSamplerConfig, NormKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    AtentAttack,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::AtentAttack => "atent_attack",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub norm: NormKind,
    /// Ball radius ε.
    pub radius: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Per-step size; `None` means `2.5·radius/steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
    /// Valid input range; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip: Option<[f64; 2]>,
    /// Chain settings for [`AttackKind::AtentAttack`].
    #[serde(default)]
    pub sampler: Option<GibbsSamplerConfig>,
}

fn default_steps() -> usize {
    20
}

fn default_restarts() -> usize {
    1
}

fn default_clip() -> Option<[f64; 2]> {
    Some([0.0, 1.0])
}

impl AttackConfig {
    pub fn pgd(norm: NormKind, radius: f64, steps: usize, step_size: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            norm,
            radius,
            steps,
            step_size: Some(step_size),
            restarts: 1,
            random_start: false,
            seed: 0,
            clip: default_clip(),
            sampler: None,
        }
    }

    pub fn fgsm(radius: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            steps: 1,
            step_size: Some(radius),
            ..AttackConfig::pgd(NormKind::Linf, radius, 1, radius)
        }
    }

    pub fn atent(sampler: GibbsSamplerConfig, radius: f64) -> Self {
        AttackConfig {
            kind: AttackKind::AtentAttack,
            norm: sampler.norm,
            steps: sampler.steps,
            sampler: Some(sampler),
            ..AttackConfig::pgd(NormKind::Linf, radius, 1, radius)
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.radius / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(AtentError::Config(format!("attack: {what}")));
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return bad(format!("radius must be nonnegative, got {}", self.radius));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        match self.kind {
            AttackKind::Fgsm if self.norm != NormKind::Linf => {
                return bad("fgsm is defined for the linf norm only".into())
            }
            AttackKind::Pgd => {
                if self.steps == 0 {
                    return bad("pgd needs at least one step".into());
                }
                let a = self.step_size();
                if !(a > 0.0 || self.radius == 0.0) || !a.is_finite() {
                    return bad(format!("step_size must be positive, got {a}"));
                }
            }
            AttackKind::AtentAttack => match &self.sampler {
                Some(s) => s.validate()?,
                None => return bad("atent_attack needs a sampler block".into()),
            },
            _ => {}
        }
        if let Some([lo, hi]) = self.clip {
            if !(lo < hi) {
                return bad(format!("clip range [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `x_adv` onto the `norm`-ball of `radius` around `x`, then into
/// the clip range. Clipping never leaves the ball when `x` is in range.
pub fn project(x_adv: &mut Tensor, x: &Tensor, norm: NormKind, radius: f64, clip: Option<[f64; 2]>) {
    match norm {
        NormKind::Linf => {
            for (a, &c) in x_adv.data_mut().iter_mut().zip(x.data()) {
                *a = a.clamp(c - radius, c + radius);
            }
        }
        NormKind::L2 => {
            for i in 0..x.rows() {
                let xr = x.row(i);
                let ar = x_adv.row_mut(i);
                let dist = ar.iter().zip(xr).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                if dist > radius {
                    let k = radius / dist;
                    for (a, &c) in ar.iter_mut().zip(xr) {
                        *a = c + (*a - c) * k;
                    }
                }
            }
        }
    }
    if let Some([lo, hi]) = clip {
        for a in x_adv.data_mut() {
            *a = a.clamp(lo, hi);
        }
    }
}

fn input_grad(params: &ModelParams, batch: &Batch, x: &Tensor) -> Result<Tensor> {
    let b = Batch {
        inputs: x.clone(),
        labels: batch.labels.clone(),
    };
    Ok(models::loss_and_grads(params, &b, GradTarget::Inputs)?
        .inputs
        .expect("input gradient requested"))
}

/// `x + ε·sign(∇ₓL)`, clipped.
pub fn fgsm(params: &ModelParams, batch: &Batch, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let g = input_grad(params, batch, &batch.inputs)?;
    let mut out = batch.inputs.clone();
    for (o, &gv) in out.data_mut().iter_mut().zip(g.data()) {
        *o += cfg.radius * sign(gv);
    }
    project(&mut out, &batch.inputs, NormKind::Linf, cfg.radius, cfg.clip);
    Ok(out)
}

fn random_start(x: &Tensor, norm: NormKind, radius: f64, rng: &mut Rng) -> Tensor {
    use rand::Rng as _;
    let mut out = x.clone();
    match norm {
        NormKind::Linf => {
            for v in out.data_mut() {
                *v += radius * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        NormKind::L2 => {
            let d = x.row_len();
            for i in 0..x.rows() {
                let dir = rng::normals(rng, d);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                for (v, u) in out.row_mut(i).iter_mut().zip(&dir) {
                    *v += r * u / norm;
                }
            }
        }
    }
    out
}

/// One PGD run from `start`; iterates are projected after every step.
pub fn pgd_from(params: &ModelParams, batch: &Batch, cfg: &AttackConfig, start: Tensor) -> Result<Tensor> {
    let x = &batch.inputs;
    let alpha = cfg.step_size();
    let mut adv = start;
    project(&mut adv, x, cfg.norm, cfg.radius, cfg.clip);
    for _ in 0..cfg.steps {
        let g = input_grad(params, batch, &adv)?;
        match cfg.norm {
            NormKind::Linf => {
                for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
                    *a += alpha * sign(gv);
                }
            }
            NormKind::L2 => {
                for i in 0..g.rows() {
                    let gr = g.row(i);
                    let n = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for (a, &gv) in adv.row_mut(i).iter_mut().zip(gr) {
                            *a += alpha * gv / n;
                        }
                    }
                }
            }
        }
        project(&mut adv, x, cfg.norm, cfg.radius, cfg.clip);
    }
    Ok(adv)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Worst-restart adversarial inputs.
    pub inputs: Tensor,
    /// Per-sample loss at the returned inputs.
    pub losses: Vec<f64>,
    /// Per-restart, per-sample losses.
    pub restart_losses: Vec<Vec<f64>>,
}

/// PGD with restarts; `stream` separates RNG streams of different batches.
pub fn pgd_attack_detailed(params: &ModelParams, batch: &Batch, cfg: &AttackConfig, stream: u64) -> Result<AttackOutcome> {
    cfg.validate()?;
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let start = if cfg.random_start {
            let mut rng = rng::derive(cfg.seed, &[rng::TAG_ATTACK, stream, r as u64]);
            random_start(&batch.inputs, cfg.norm, cfg.radius, &mut rng)
        } else {
            batch.inputs.clone()
        };
        let adv = pgd_from(params, batch, cfg, start)?;
        let losses = models::per_sample_losses(params, &batch.with_inputs(adv.clone())?)?;
        best = Some(match best {
            None => (adv, losses.clone()),
            Some((mut b_adv, mut b_loss)) => {
                for i in 0..losses.len() {
                    if losses[i] > b_loss[i] {
                        b_loss[i] = losses[i];
                        b_adv.row_mut(i).copy_from_slice(adv.row(i));
                    }
                }
                (b_adv, b_loss)
            }
        });
        restart_losses.push(losses);
    }
    let (inputs, losses) = best.expect("at least one restart");
    Ok(AttackOutcome {
        inputs,
        losses,
        restart_losses,
    })
}

pub fn pgd_attack(params: &ModelParams, batch: &Batch, cfg: &AttackConfig) -> Result<Tensor> {
    Ok(pgd_attack_detailed(params, batch, cfg, 0)?.inputs)
}

/// Runs the Langevin chain as an attack and projects its final point into
/// the ball of `radius`.
pub fn atent_attack(
    params: &ModelParams,
    batch: &Batch,
    sampler_cfg: &GibbsSamplerConfig,
    radius: f64,
    clip: Option<[f64; 2]>,
    rng: Rng,
) -> Result<Tensor> {
    let out = sampler::run_chain(params, batch, sampler_cfg, rng)?;
    let mut adv = out.final_x;
    project(&mut adv, &batch.inputs, sampler_cfg.norm, radius, clip);
    Ok(adv)
}

/// Dispatches on `cfg.kind`.
pub fn attack_batch(params: &ModelParams, batch: &Batch, cfg: &AttackConfig, stream: u64) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(params, batch, cfg),
        AttackKind::Pgd => Ok(pgd_attack_detailed(params, batch, cfg, stream)?.inputs),
        AttackKind::AtentAttack => {
            let s = cfg.sampler.as_ref().expect("validated");
            let rng = rng::derive(cfg.seed, &[rng::TAG_ATTACK, stream, u64::MAX]);
            atent_attack(params, batch, s, cfg.radius, cfg.clip, rng)
        }
    }
}

const ATTACK_CHUNK: usize = 250;

/// Fraction of `ds` still classified correctly after the attack.
pub fn robust_accuracy(params: &ModelParams, ds: &Dataset, cfg: &AttackConfig) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for (c, chunk) in idx.chunks(ATTACK_CHUNK).enumerate() {
        let batch = Batch {
            inputs: ds.inputs.select_rows(chunk),
            labels: ds.labels.select_rows(chunk),
        };
        let adv = attack_batch(params, &batch, cfg, c as u64)?;
        let preds = models::predict(params, &adv)?;
        correct += preds
            .iter()
            .zip(batch.class_indices())
            .filter(|(p, t)| **p == *t)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}
