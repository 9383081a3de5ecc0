//! Trainers: plain SGD, Entropy-SGD, PGD adversarial training and ATENT
//! (ℓ2 and ℓ∞), with early stopping on validation accuracy.
//!
//! All trainers share [`TrainerConfig`], consume the same data and emit the
//! same [`EpochMetrics`] records.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::{self, Dataset};
use crate::error::{AtentError, Result};
use crate::models::{self, Batch, GradTarget, ModelParams};
use crate::rng;
use crate::sampler::{self, GibbsSamplerConfig, ModelObjective, NormKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Sgd,
    EntropySgd,
    PgdAt,
    AtentL2,
    AtentLinf,
}

impl DefenseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseKind::Sgd => "sgd",
            DefenseKind::EntropySgd => "entropy_sgd",
            DefenseKind::PgdAt => "pgd_at",
            DefenseKind::AtentL2 => "atent_l2",
            DefenseKind::AtentLinf => "atent_linf",
        }
    }

    pub fn needs_sampler(self) -> bool {
        matches!(self, DefenseKind::EntropySgd | DefenseKind::AtentL2 | DefenseKind::AtentLinf)
    }
}

/// Inner attack of PGD adversarial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdTrainConfig {
    pub norm: NormKind,
    pub radius: f64,
    pub steps: usize,
    /// `None` means `2.5·radius/steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    /// Ramp the radius linearly over this many epochs (0 disables).
    #[serde(default)]
    pub warmup_epochs: usize,
}

impl PgdTrainConfig {
    fn radius_at(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            self.radius
        } else {
            self.radius * ((epoch + 1) as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    fn attack(&self, epoch: usize, seed: u64) -> AttackConfig {
        let radius = self.radius_at(epoch);
        let step = self
            .step_size
            .map(|s| s * radius / self.radius.max(f64::MIN_POSITIVE))
            .unwrap_or(2.5 * radius / self.steps as f64);
        AttackConfig {
            random_start: self.random_start,
            seed,
            ..AttackConfig::pgd(self.norm, radius, self.steps, step)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    Robust,
    Natural,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    #[serde(default)]
    pub metric: StopMetric,
    /// Stop after this many epochs without improvement; `None` never stops
    /// early but still keeps the best snapshot.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Validation attack; defaults to a 10-step PGD at the training radius
    /// when the defense has one.
    #[serde(default)]
    pub eval_attack: Option<AttackConfig>,
    /// Evaluate on at most this many validation samples.
    #[serde(default)]
    pub eval_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub defense: DefenseKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means a single ×0.1 decay at 75% of the epochs.
    #[serde(default)]
    pub lr_schedule: Option<Vec<LrDecay>>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub sampler: Option<GibbsSamplerConfig>,
    #[serde(default)]
    pub pgd: Option<PgdTrainConfig>,
    #[serde(default)]
    pub early_stop: EarlyStopConfig,
    #[serde(default)]
    pub seed: u64,
    /// Fill `wall_ms` in metrics. Off by default so metric files are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainerConfig {
    pub fn new(defense: DefenseKind, lr: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainerConfig {
            defense,
            lr,
            epochs,
            batch_size,
            lr_schedule: None,
            weight_decay: 0.0,
            sampler: None,
            pgd: None,
            early_stop: EarlyStopConfig::default(),
            seed,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(AtentError::Config(what));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be nonnegative, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative".into());
        }
        match (&self.sampler, self.defense.needs_sampler()) {
            (None, true) => return bad(format!("{} needs a sampler block", self.defense.as_str())),
            (Some(_), false) => return bad(format!("{} takes no sampler block", self.defense.as_str())),
            (Some(s), true) => {
                s.validate()?;
                let want = match self.defense {
                    DefenseKind::AtentL2 => Some(NormKind::L2),
                    DefenseKind::AtentLinf => Some(NormKind::Linf),
                    _ => None,
                };
                if want.is_some_and(|n| n != s.norm) {
                    return bad(format!("sampler norm {:?} does not match {}", s.norm, self.defense.as_str()));
                }
            }
            (None, false) => {}
        }
        match (&self.pgd, self.defense == DefenseKind::PgdAt) {
            (None, true) => return bad("pgd_at needs a pgd block".into()),
            (Some(_), false) => return bad(format!("{} takes no pgd block", self.defense.as_str())),
            (Some(p), true) => {
                if !(p.radius >= 0.0 && p.radius.is_finite()) || p.steps == 0 {
                    return bad("pgd needs radius >= 0 and steps >= 1".into());
                }
            }
            (None, false) => {}
        }
        if let Some(schedule) = &self.lr_schedule {
            if schedule.iter().any(|d| !(d.factor > 0.0 && d.factor.is_finite())) {
                return bad("lr decay factors must be positive".into());
            }
        }
        if let Some(a) = &self.early_stop.eval_attack {
            a.validate()?;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let default;
        let schedule = match &self.lr_schedule {
            Some(s) => s.as_slice(),
            None => {
                default = [LrDecay {
                    epoch: (3 * self.epochs).div_ceil(4),
                    factor: 0.1,
                }];
                &default
            }
        };
        schedule
            .iter()
            .filter(|d| d.epoch <= epoch)
            .fold(self.lr, |lr, d| lr * d.factor)
    }

    pub fn eval_attack(&self) -> Option<AttackConfig> {
        if let Some(a) = &self.early_stop.eval_attack {
            return Some(a.clone());
        }
        self.pgd.as_ref().map(|p| AttackConfig {
            seed: self.seed,
            ..AttackConfig::pgd(p.norm, p.radius, 10, 2.5 * p.radius / 10.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub nat_acc: f64,
    pub rob_acc: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: ModelParams,
    /// Next epoch to run.
    pub epoch: usize,
    /// Best tracked validation metric so far.
    pub best_metric: Option<f64>,
    /// Natural accuracy at the best epoch; breaks ties in the metric.
    pub best_tiebreak: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: ModelParams,
    pub stale_epochs: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainerState {
    pub fn new(params: ModelParams) -> Self {
        TrainerState {
            best_params: params.clone(),
            params,
            epoch: 0,
            best_metric: None,
            best_tiebreak: None,
            best_epoch: None,
            stale_epochs: 0,
            history: Vec::new(),
        }
    }
}

/// Snapshots the params when `value` beats the best so far. Returns whether
/// it did.
pub fn early_stop_update(state: &mut TrainerState, epoch: usize, value: f64) -> bool {
    early_stop_update_with(state, epoch, value, f64::NEG_INFINITY)
}

/// As [`early_stop_update`], but an equal `value` with a larger `tiebreak`
/// also counts as an improvement.
pub fn early_stop_update_with(state: &mut TrainerState, epoch: usize, value: f64, tiebreak: f64) -> bool {
    let better = match (state.best_metric, state.best_tiebreak) {
        (None, _) => true,
        (Some(b), t) => value > b || (value == b && t.is_some_and(|t| tiebreak > t)),
    };
    if better {
        state.best_metric = Some(value);
        state.best_tiebreak = Some(tiebreak).filter(|t| t.is_finite());
        state.best_epoch = Some(epoch);
        state.best_params = state.params.clone();
        state.stale_epochs = 0;
        true
    } else {
        state.stale_epochs += 1;
        false
    }
}

/// Weight gradient and reported loss for one batch.
fn batch_step(cfg: &TrainerConfig, params: &ModelParams, batch: &Batch, epoch: usize, index: usize) -> Result<(Vec<Tensor>, f64)> {
    let stream = ((epoch as u64) << 32) | index as u64;
    match cfg.defense {
        DefenseKind::Sgd => clean_step(params, batch),
        DefenseKind::PgdAt => {
            let pgd = cfg.pgd.as_ref().expect("validated");
            let attack = pgd.attack(epoch, cfg.seed);
            let adv = attacks::pgd_attack_detailed(params, batch, &attack, stream)?.inputs;
            clean_step(params, &batch.with_inputs(adv)?)
        }
        DefenseKind::AtentL2 | DefenseKind::AtentLinf => {
            let s = cfg.sampler.as_ref().expect("validated");
            atent_gradient(params, batch, s, rng::derive(cfg.seed, &[rng::TAG_TRAIN, stream]))
        }
        DefenseKind::EntropySgd => {
            let s = cfg.sampler.as_ref().expect("validated");
            entropy_sgd_step(params, batch, s, rng::derive(cfg.seed, &[rng::TAG_TRAIN, stream]))
        }
    }
}

fn clean_step(params: &ModelParams, batch: &Batch) -> Result<(Vec<Tensor>, f64)> {
    let out = models::loss_and_grads(params, batch, GradTarget::Weights)?;
    Ok((out.weights.expect("weights requested"), out.loss))
}

/// `Σ_k c_k ∇_w L(w; X'^k)` over one chain, with `c_k` the EMA weights of
/// the kept samples; samples are treated as constants. Returns the chain's
/// loss EMA alongside.
pub fn atent_gradient(params: &ModelParams, batch: &Batch, cfg: &GibbsSamplerConfig, rng: rng::Rng) -> Result<(Vec<Tensor>, f64)> {
    let coeffs = (0..cfg.steps).map(|j| cfg.ema_weight(j)).collect();
    let mut objective = ModelObjective::new(params, &batch.labels).with_weight_grad(coeffs);
    let out = sampler::run_chain_on(&mut objective, &batch.inputs, cfg, rng)?;
    let grads = objective.into_weight_grad().expect("accumulation enabled");
    Ok((grads, out.ema_loss))
}

/// Weight-space chain around `w`; returns the outer "gradient" `γ(w − μ)`
/// so the caller's `w ← w − η·g` realizes `w − ηγ(w − μ)`.
pub fn entropy_sgd_step(params: &ModelParams, batch: &Batch, cfg: &GibbsSamplerConfig, mut rng: rng::Rng) -> Result<(Vec<Tensor>, f64)> {
    let anchor = params.tensors();
    let mut w_prime = params.clone();
    let mut mu: Vec<Tensor> = anchor.to_vec();
    let c = (2.0 * cfg.step).sqrt() * cfg.noise_scale;
    let mut loss_ema = 0.0;
    for _ in 0..cfg.steps {
        let out = models::loss_and_grads(&w_prime, batch, GradTarget::Weights)?;
        let grads = out.weights.expect("weights requested");
        loss_ema = (1.0 - cfg.ema) * loss_ema + cfg.ema * out.loss;
        for ((wp, g), w) in w_prime.tensors_mut().iter_mut().zip(&grads).zip(anchor) {
            for ((v, &gv), &a) in wp.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                *v -= cfg.step * (gv + cfg.gamma * (*v - a));
                if c != 0.0 {
                    *v += c * rng::normal(&mut rng);
                }
            }
        }
        for (m, wp) in mu.iter_mut().zip(w_prime.tensors()) {
            for (mv, &v) in m.data_mut().iter_mut().zip(wp.data()) {
                *mv = (1.0 - cfg.ema) * *mv + cfg.ema * v;
            }
        }
    }
    let grads = anchor
        .iter()
        .zip(&mu)
        .map(|(w, m)| w.zip_map(m, |a, b| cfg.gamma * (a - b)))
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, loss_ema))
}

fn apply_update(params: &mut ModelParams, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    if weight_decay != 0.0 {
        for w in params.tensors_mut() {
            let decay = w.scale(weight_decay);
            w.axpy(-lr, &decay)?;
        }
    }
    params.axpy(-lr, grads)
}

fn divergence(epoch: usize, e: AtentError) -> AtentError {
    match e {
        AtentError::NonFinite(_) => AtentError::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Evaluates validation accuracy (natural and, when configured, robust).
pub fn evaluate_validation(cfg: &TrainerConfig, params: &ModelParams, val: &Dataset) -> Result<(f64, Option<f64>)> {
    let val = match cfg.early_stop.eval_samples {
        Some(n) => val.head(n),
        None => val.clone(),
    };
    let nat = models::accuracy(params, &val.inputs, &val.labels)?;
    let rob = match cfg.eval_attack() {
        Some(a) if cfg.early_stop.metric == StopMetric::Robust => Some(attacks::robust_accuracy(params, &val, &a)?),
        _ => None,
    };
    Ok((nat, rob))
}

/// Runs epochs `state.epoch..cfg.epochs`. `on_epoch` sees the state after
/// every epoch and may return `false` to stop (the state stays resumable).
pub fn train_from(
    cfg: &TrainerConfig,
    mut state: TrainerState,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&TrainerState) -> Result<bool>,
) -> Result<TrainerState> {
    cfg.validate()?;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let batches = data::batch_iter(train, cfg.batch_size, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        for (i, batch) in batches.iter().enumerate() {
            let (grads, loss) = batch_step(cfg, &state.params, batch, epoch, i).map_err(|e| divergence(epoch, e))?;
            if !loss.is_finite() {
                return Err(AtentError::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            apply_update(&mut state.params, &grads, lr, cfg.weight_decay)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = models::loss(&state.params, &val.as_batch()).map_err(|e| divergence(epoch, e))?;
        if !val_loss.is_finite() || !state.params.tensors().iter().all(Tensor::all_finite) {
            return Err(AtentError::Divergence { epoch, loss: val_loss });
        }
        let (nat_acc, rob_acc) = evaluate_validation(cfg, &state.params, val)?;
        let tracked = match cfg.early_stop.metric {
            StopMetric::Robust => rob_acc.unwrap_or(nat_acc),
            StopMetric::Natural => nat_acc,
        };
        early_stop_update_with(&mut state, epoch, tracked, nat_acc);
        state.history.push(EpochMetrics {
            epoch,
            train_loss,
            nat_acc,
            rob_acc,
            lr,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        state.epoch += 1;
        let patience_out = cfg.early_stop.patience.is_some_and(|p| state.stale_epochs > p);
        if !on_epoch(&state)? {
            break;
        }
        if patience_out {
            break;
        }
    }
    Ok(state)
}

pub fn train(cfg: &TrainerConfig, init: ModelParams, train: &Dataset, val: &Dataset) -> Result<TrainerState> {
    train_from(cfg, TrainerState::new(init), train, val, |_| Ok(true))
}

fn train_kind(kind: DefenseKind, cfg: &TrainerConfig, init: ModelParams, tr: &Dataset, val: &Dataset) -> Result<TrainerState> {
    if cfg.defense != kind {
        return Err(AtentError::Config(format!(
            "config is for {}, not {}",
            cfg.defense.as_str(),
            kind.as_str()
        )));
    }
    train(cfg, init, tr, val)
}

pub fn train_sgd(cfg: &TrainerConfig, init: ModelParams, tr: &Dataset, val: &Dataset) -> Result<TrainerState> {
    train_kind(DefenseKind::Sgd, cfg, init, tr, val)
}

pub fn train_entropy_sgd(cfg: &TrainerConfig, init: ModelParams, tr: &Dataset, val: &Dataset) -> Result<TrainerState> {
    train_kind(DefenseKind::EntropySgd, cfg, init, tr, val)
}

pub fn train_pgd_at(cfg: &TrainerConfig, init: ModelParams, tr: &Dataset, val: &Dataset) -> Result<TrainerState> {
    train_kind(DefenseKind::PgdAt, cfg, init, tr, val)
}

/// ℓ2 or ℓ∞ ATENT, per `cfg.defense`.
pub fn train_atent(cfg: &TrainerConfig, init: ModelParams, tr: &Dataset, val: &Dataset) -> Result<TrainerState> {
    match cfg.defense {
        DefenseKind::AtentL2 | DefenseKind::AtentLinf => train(cfg, init, tr, val),
        other => Err(AtentError::Config(format!("config is for {}, not atent", other.as_str()))),
    }
}
