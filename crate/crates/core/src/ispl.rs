//! Introspective self-paced learning: train Q prior models on random
//! subsets, average their per-sample losses, and discard samples whose
//! vote loss exceeds a decaying threshold before the real inner loop runs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, LossKind, NetworkSpec, OptimizerState, ParamVector};
use crate::seeds;
use crate::trajectory::{self, Batching, MaskSchedule, TrajectoryRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsplConfig {
    /// Number of prior models voting on sample losses (Q >= 1).
    pub prior_count: usize,
    /// Initial selection threshold, in loss units.
    pub gamma0: f64,
    /// Threshold decay per period.
    pub mu: f64,
    /// Outer iterations between decays.
    pub period: usize,
    /// Fraction of the training samples each prior trains on.
    pub prior_fraction: f64,
    /// Inner steps for each prior model.
    pub prior_steps: usize,
    /// Decay gamma after every inner step instead of by outer-iteration
    /// period.
    pub per_step_decay: bool,
}

impl IsplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prior_count == 0 {
            return Err(Error::Config("ispl prior_count must be >= 1".into()));
        }
        if self.gamma0 <= 0.0 {
            return Err(Error::Config("ispl gamma0 must be positive".into()));
        }
        if self.mu < 0.0 {
            return Err(Error::Config("ispl mu must be non-negative".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("ispl period must be >= 1".into()));
        }
        if !(self.prior_fraction > 0.0 && self.prior_fraction <= 1.0) {
            return Err(Error::Config("ispl prior_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Which samples of one task survive the vote.
#[derive(Debug, Clone)]
pub struct SelectionMask {
    pub v: Vec<bool>,
    pub gamma_used: f64,
    pub mean_losses: Vec<f64>,
}

impl SelectionMask {
    pub fn selected_count(&self) -> usize {
        self.v.iter().filter(|&&x| x).count()
    }
}

/// Train `prior_count` models from `phi_star`, each on its own uniform
/// without-replacement subset of `ceil(prior_fraction * h)` samples.
/// Subset indices are sorted so a full-fraction subset reproduces the
/// plain batch exactly. Priors train with the same batching policy as
/// the main inner loop.
pub fn build_priors(
    phi_star: &ParamVector,
    spec: &NetworkSpec,
    train: &Batch,
    cfg: &IsplConfig,
    opt: &OptimizerState,
    kind: LossKind,
    batching: Batching,
    seed: u64,
) -> Result<Vec<ParamVector>> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let h = train.len();
    let subset_size = ((cfg.prior_fraction * h as f64).ceil() as usize).clamp(1, h);
    let mut priors = Vec::with_capacity(cfg.prior_count);
    for j in 0..cfg.prior_count {
        let mut rng = seeds::rng_from(&[seed, seeds::tag::PRIOR, j as u64]);
        let mut indices: Vec<usize> = (0..h).collect();
        indices.shuffle(&mut rng);
        indices.truncate(subset_size);
        indices.sort_unstable();
        let subset = train.subset(&indices);
        let mut batch_rng = seeds::rng_from(&[seed, seeds::tag::BATCH, j as u64]);
        let mut params = phi_star.clone();
        let mut state = opt.fresh();
        for _ in 0..cfg.prior_steps {
            let weights = match batching {
                Batching::Full => vec![1.0 / subset.len() as f64; subset.len()],
                Batching::MiniBatch { size, .. } => {
                    let count = size.min(subset.len());
                    let mut pool: Vec<usize> = (0..subset.len()).collect();
                    for i in 0..count {
                        let k = batch_rng.gen_range(i..pool.len());
                        pool.swap(i, k);
                    }
                    let mut w = vec![0.0; subset.len()];
                    for &i in &pool[..count] {
                        w[i] = 1.0 / count as f64;
                    }
                    w
                }
            };
            let (_, g) = nn::loss_and_grad_weighted(&params, spec, &subset, kind, &weights)?;
            nn::step_in_place(&mut params, &g, &mut state)?;
        }
        priors.push(params);
    }
    Ok(priors)
}

/// Mean over priors of each sample's loss.
pub fn vote_losses(priors: &[ParamVector], spec: &NetworkSpec, train: &Batch, kind: LossKind) -> Result<Vec<f64>> {
    if priors.is_empty() {
        return Err(Error::Config("vote_losses needs at least one prior".into()));
    }
    let mut mean = vec![0.0; train.len()];
    for prior in priors {
        let losses = nn::per_sample_losses(prior, spec, train, kind)?;
        for (m, l) in mean.iter_mut().zip(&losses) {
            *m += l;
        }
    }
    let q = priors.len() as f64;
    for m in &mut mean {
        *m /= q;
    }
    Ok(mean)
}

/// Keep samples with vote loss strictly below `gamma`. If nothing
/// survives, fall back to the single lowest-loss sample (ties to the
/// lowest index) so the task never trains on an empty batch.
pub fn select(mean_losses: &[f64], gamma: f64) -> SelectionMask {
    let mut v: Vec<bool> = mean_losses.iter().map(|&l| l < gamma).collect();
    if v.iter().all(|&x| !x) && !v.is_empty() {
        let mut best = 0;
        for (i, &l) in mean_losses.iter().enumerate() {
            if l < mean_losses[best] {
                best = i;
            }
        }
        v[best] = true;
    }
    SelectionMask { v, gamma_used: gamma, mean_losses: mean_losses.to_vec() }
}

/// Threshold schedule: max(0, gamma0 - mu * floor(iteration / period)).
pub fn gamma_at(iteration: usize, cfg: &IsplConfig) -> f64 {
    (cfg.gamma0 - cfg.mu * (iteration / cfg.period) as f64).max(0.0)
}

/// Full ISPL step for one task: build priors, vote, select at the
/// scheduled threshold, then run the masked inner loop.
#[allow(clippy::too_many_arguments)]
pub fn ispl_inner_loop(
    phi: &ParamVector,
    spec: &NetworkSpec,
    train: &Batch,
    steps: usize,
    opt: &OptimizerState,
    kind: LossKind,
    cfg: &IsplConfig,
    iteration: usize,
    batching: Batching,
    seed: u64,
) -> Result<TrajectoryRecord> {
    let priors = build_priors(phi, spec, train, cfg, opt, kind, batching, seed)?;
    let losses = vote_losses(&priors, spec, train, kind)?;
    let gamma = gamma_at(iteration, cfg);
    if cfg.per_step_decay {
        let masks: Vec<Vec<bool>> = (0..steps)
            .map(|j| {
                let g = (gamma - cfg.mu * j as f64).max(0.0);
                select(&losses, g).v
            })
            .collect();
        trajectory::run_inner_loop_scheduled(phi, spec, train, steps, opt, kind, MaskSchedule::PerStep(&masks), batching)
    } else {
        let mask = select(&losses, gamma);
        trajectory::run_inner_loop_scheduled(phi, spec, train, steps, opt, kind, MaskSchedule::Fixed(&mask.v), batching)
    }
}
