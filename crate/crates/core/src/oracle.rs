//! Independent numerical oracles: finite differences, grid-integrated Gibbs
//! densities, chain moment checks and the smoothness/dissipativity bounds
//! that make the Langevin chain well behaved.

use serde::Serialize;

use crate::error::{AtentError, Result};
use crate::rng;
use crate::sampler::{self, ChainState, GibbsSamplerConfig};
use crate::tensor::Tensor;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(AtentError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(AtentError::NonFinite("finite_difference_grad"));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator so two
/// (near-)zero vectors compare as equal.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?.norm_l2();
    let scale = a.norm_l2().max(b.norm_l2()).max(1e-8);
    Ok(diff / scale)
}

/// Probabilities of a Gibbs density on a cell-centred 1D or 2D grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridDensity {
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    /// Cell centres, row-major over dimensions.
    pub points: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub probs: Vec<f64>,
}

impl GridDensity {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|d| self.points.iter().zip(&self.probs).map(|(p, w)| w * p[d]).sum())
            .collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.dim())
            .map(|d| {
                self.points
                    .iter()
                    .zip(&self.probs)
                    .map(|(p, w)| w * (p[d] - mean[d]).powi(2))
                    .sum()
            })
            .collect()
    }

    /// Probability mass per cell divided by cell volume.
    pub fn density(&self) -> Vec<f64> {
        let vol: f64 = self
            .bounds
            .iter()
            .map(|(lo, hi)| (hi - lo) / self.resolution as f64)
            .product();
        self.probs.iter().map(|p| p / vol).collect()
    }
}

/// Grid integration of `exp(L(x') − (γ/2)‖x' − x‖²)`, normalized by the
/// discrete sum after a max-shift of the log-density.
pub fn grid_gibbs_density(
    loss: impl Fn(&[f64]) -> f64,
    anchor: &[f64],
    gamma: f64,
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<GridDensity> {
    let dim = bounds.len();
    if !(1..=2).contains(&dim) || anchor.len() != dim {
        return Err(AtentError::Config(format!(
            "grid density supports 1D or 2D domains, got {dim} bounds and a {}-d anchor",
            anchor.len()
        )));
    }
    if resolution < 2 || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(AtentError::Config("grid needs resolution >= 2 and nonempty bounds".into()));
    }
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        let w = (hi - lo) / resolution as f64;
        (0..resolution).map(|i| lo + (i as f64 + 0.5) * w).collect()
    };
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&b| axis(b)).collect();
    let points: Vec<Vec<f64>> = if dim == 1 {
        axes[0].iter().map(|&a| vec![a]).collect()
    } else {
        axes[0]
            .iter()
            .flat_map(|&a| axes[1].iter().map(move |&b| vec![a, b]))
            .collect()
    };
    let log_density: Vec<f64> = points
        .iter()
        .map(|p| {
            let d2: f64 = p.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
            loss(p) - 0.5 * gamma * d2
        })
        .collect();
    let shift = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(AtentError::NonFinite("grid_gibbs_density"));
    }
    let weights: Vec<f64> = log_density.iter().map(|l| (l - shift).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(GridDensity {
        bounds: bounds.to_vec(),
        resolution,
        points,
        log_density,
        probs: weights.iter().map(|w| w / z).collect(),
    })
}

/// A loss that acts identically and independently on every coordinate, so
/// one chain over many coordinates pools samples of the same 1D law.
pub struct SeparableLoss<F, G> {
    pub value: F,
    pub derivative: G,
}

impl<F: Fn(f64) -> f64, G: Fn(f64) -> f64> sampler::InputObjective for SeparableLoss<F, G> {
    fn evaluate(&mut self, x: &Tensor, _: Option<usize>, need_grad: bool) -> Result<(f64, Option<Tensor>)> {
        let loss = x.data().iter().map(|&v| (self.value)(v)).sum::<f64>() / x.rows() as f64;
        Ok((loss, need_grad.then(|| x.map(|v| (self.derivative)(v)))))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryRun {
    /// Parallel independent coordinates.
    pub coords: usize,
    pub kept_per_coord: usize,
    /// Keep one step in `thin`.
    pub thin: usize,
    /// Fraction of the chain discarded as burn-in.
    pub burn_in: f64,
    pub seed: u64,
}

impl StationaryRun {
    pub fn kept(&self) -> usize {
        self.coords * self.kept_per_coord
    }

    pub fn total_steps(&self) -> usize {
        let kept_steps = self.kept_per_coord * self.thin;
        (kept_steps as f64 / (1.0 - self.burn_in)).ceil() as usize
    }
}

/// Runs the ℓ2 Langevin step on `coords` independent copies of a 1D target
/// with gradient `derivative` and returns the post-burn-in, thinned samples.
pub fn stationary_samples(
    derivative: impl Fn(f64) -> f64,
    anchor: f64,
    cfg: &GibbsSamplerConfig,
    run: &StationaryRun,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&run.burn_in) || run.thin == 0 || run.coords == 0 {
        return Err(AtentError::Config("stationary run needs burn_in in [0,1), thin >= 1".into()));
    }
    let x = Tensor::full(&[1, run.coords], anchor);
    let mut r = rng::derive(run.seed, &[rng::TAG_TRAIN]);
    let start = sampler::init_perturbation(&x, cfg, &mut r);
    let mut state = ChainState::new(start, x, r)?;
    let total = run.total_steps();
    let burn = total - run.kept_per_coord * run.thin;
    let mut kept = Vec::with_capacity(run.kept());
    for t in 0..total {
        let g = state.x_prime.map(&derivative);
        state = sampler::langevin_step_l2(state, &g, cfg)?;
        if t >= burn && (t - burn + 1) % run.thin == 0 {
            kept.extend_from_slice(state.x_prime.data());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub kept: usize,
    pub sample_mean: f64,
    pub sample_var: f64,
    pub reference_mean: f64,
    pub reference_var: f64,
    pub mean_error: f64,
    pub var_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares 1D sample moments with reference moments. The variance error is
/// relative; the mean error is relative to `|mean|`, or to the reference
/// standard deviation when the mean is (near) zero.
pub fn compare_moments(samples: &[f64], reference_mean: f64, reference_var: f64, tolerance: f64) -> Result<MomentReport> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(AtentError::NonFinite("chain samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_scale = if reference_mean.abs() > 1e-9 {
        reference_mean.abs()
    } else {
        reference_var.sqrt()
    };
    let mean_error = (mean - reference_mean).abs() / mean_scale;
    let var_error = (var - reference_var).abs() / reference_var;
    Ok(MomentReport {
        kept: samples.len(),
        sample_mean: mean,
        sample_var: var,
        reference_mean,
        reference_var,
        mean_error,
        var_error,
        tolerance,
        passed: mean_error <= tolerance && var_error <= tolerance,
    })
}

/// Post-burn-in chain moments against a 1D grid density.
pub fn chain_moment_check(samples: &[f64], grid: &GridDensity, tolerance: f64) -> Result<MomentReport> {
    if grid.dim() != 1 {
        return Err(AtentError::Config("chain moment check compares against a 1D grid".into()));
    }
    compare_moments(samples, grid.mean()[0], grid.variance()[0], tolerance)
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaCheckReport {
    pub points: usize,
    /// Largest sampled `‖∇F(x₂) − ∇F(x₁)‖ / ‖x₂ − x₁‖`.
    pub smoothness_ratio: f64,
    /// `β + γ`.
    pub smoothness_bound: f64,
    /// Smallest sampled `⟨∇F(x'), x'⟩ − (m‖x'‖² − b)`.
    pub dissipativity_margin: f64,
    pub m: f64,
    pub b: f64,
    pub smooth_ok: bool,
    pub dissipative_ok: bool,
}

impl LemmaCheckReport {
    pub fn passed(&self) -> bool {
        self.smooth_ok && self.dissipative_ok
    }
}

/// Loss with analytically known constants on a box domain.
pub struct CertifiedLoss<'a> {
    pub grad: &'a dyn Fn(&[f64]) -> Vec<f64>,
    /// Smoothness constant β of the loss.
    pub beta: f64,
    /// Bound on `‖∇L‖` over the domain.
    pub lipschitz: f64,
    pub bounds: Vec<(f64, f64)>,
}

/// Samples points in the domain and checks that the effective potential
/// `F(x') = −L(x') + (γ/2)‖x' − x‖²` is `(β+γ)`-smooth and
/// `(γ/4, L²/γ + (γ/2)‖x‖²)`-dissipative.
pub fn lemma1_check(loss: &CertifiedLoss<'_>, anchor: &[f64], gamma: f64, n_points: usize, seed: u64) -> Result<LemmaCheckReport> {
    use rand::Rng as _;
    let dim = loss.bounds.len();
    if anchor.len() != dim || n_points == 0 || !(gamma > 0.0) {
        return Err(AtentError::Config("lemma check needs a matching anchor, points and gamma > 0".into()));
    }
    let grad_f = |p: &[f64]| -> Vec<f64> {
        (loss.grad)(p)
            .iter()
            .zip(p.iter().zip(anchor))
            .map(|(g, (xp, x))| -g + gamma * (xp - x))
            .collect()
    };
    let mut r = rng::derive(seed, &[rng::TAG_DATA, 1]);
    let draw = |r: &mut rng::Rng| -> Vec<f64> {
        loss.bounds
            .iter()
            .map(|(lo, hi)| lo + (hi - lo) * r.random::<f64>())
            .collect()
    };
    let norm2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let m = gamma / 4.0;
    let b = loss.lipschitz.powi(2) / gamma + 0.5 * gamma * norm2(anchor);
    let mut ratio: f64 = 0.0;
    let mut margin = f64::INFINITY;
    for _ in 0..n_points {
        let p1 = draw(&mut r);
        let p2 = draw(&mut r);
        let (g1, g2) = (grad_f(&p1), grad_f(&p2));
        let dg: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        let dxn = norm2(&dx).sqrt();
        if dxn > 1e-12 {
            ratio = ratio.max(norm2(&dg).sqrt() / dxn);
        }
        let inner: f64 = g1.iter().zip(&p1).map(|(g, x)| g * x).sum();
        margin = margin.min(inner - (m * norm2(&p1) - b));
    }
    let bound = loss.beta + gamma;
    Ok(LemmaCheckReport {
        points: n_points,
        smoothness_ratio: ratio,
        smoothness_bound: bound,
        dissipativity_margin: margin,
        m,
        b,
        smooth_ok: ratio <= bound + 1e-8,
        dissipative_ok: margin >= 0.0,
    })
}
