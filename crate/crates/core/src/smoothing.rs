//! Randomized smoothing: majority vote of the base classifier over Gaussian
//! input noise, with an optional abstain band.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AtentError, Result};
use crate::models::{self, ModelParams};
use crate::rng;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Noise standard deviation σ.
    pub sigma: f64,
    pub n_samples: usize,
    /// Abstain unless the top class wins more than `0.5 + abstain_margin`
    /// of the votes.
    #[serde(default)]
    pub abstain_margin: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(AtentError::Config("smoothing: sigma must be nonnegative".into()));
        }
        if self.n_samples == 0 {
            return Err(AtentError::Config("smoothing: n_samples must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.abstain_margin) {
            return Err(AtentError::Config("smoothing: abstain_margin must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothPrediction {
    Class(usize),
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmoothResult {
    pub prediction: SmoothPrediction,
    /// Votes per class; sums to `n_samples`.
    pub votes: Vec<usize>,
}

const NOISE_CHUNK: usize = 512;

/// Smoothed prediction for the single sample `x` (shape `[1, ...]` or the
/// per-sample shape). `stream` selects an independent noise stream.
pub fn smooth_predict(params: &ModelParams, x: &Tensor, cfg: &SmoothingConfig, stream: u64) -> Result<SmoothResult> {
    cfg.validate()?;
    let per_sample = x.len();
    let mut shape = vec![0];
    shape.extend_from_slice(if x.rank() > 1 && x.shape()[0] == 1 { &x.shape()[1..] } else { x.shape() });
    let mut votes = vec![0usize; params.arch().classes()];
    let mut r = rng::derive(cfg.seed, &[rng::TAG_SMOOTH, stream]);
    let mut left = cfg.n_samples;
    while left > 0 {
        let n = left.min(NOISE_CHUNK);
        let mut data = Vec::with_capacity(n * per_sample);
        for _ in 0..n {
            if cfg.sigma == 0.0 {
                data.extend_from_slice(x.data());
            } else {
                data.extend(x.data().iter().map(|&v| v + cfg.sigma * rng::normal(&mut r)));
            }
        }
        shape[0] = n;
        let noisy = Tensor::new(shape.clone(), data)?;
        for c in models::predict(params, &noisy)? {
            votes[c] += 1;
        }
        left -= n;
    }
    let counts: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
    let top = argmax(&counts);
    let share = votes[top] as f64 / cfg.n_samples as f64;
    let prediction = if share < 0.5 + cfg.abstain_margin {
        SmoothPrediction::Abstain
    } else {
        SmoothPrediction::Class(top)
    };
    Ok(SmoothResult { prediction, votes })
}

/// Fraction of correct smoothed predictions over `ds`. Abstentions count as
/// errors when `count_abstain_as_error`, otherwise they leave the
/// denominator (an all-abstain run scores 0).
pub fn smooth_accuracy(params: &ModelParams, ds: &Dataset, cfg: &SmoothingConfig, count_abstain_as_error: bool) -> Result<f64> {
    let truth = ds.class_indices();
    let (mut correct, mut decided) = (0usize, 0usize);
    for (i, &t) in truth.iter().enumerate() {
        let x = ds.inputs.select_rows(&[i]);
        match smooth_predict(params, &x, cfg, i as u64)?.prediction {
            SmoothPrediction::Class(c) => {
                decided += 1;
                if c == t {
                    correct += 1;
                }
            }
            SmoothPrediction::Abstain => {}
        }
    }
    let denom = if count_abstain_as_error { ds.len() } else { decided };
    Ok(if denom == 0 { 0.0 } else { correct as f64 / denom as f64 })
}
