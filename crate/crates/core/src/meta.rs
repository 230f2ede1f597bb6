//! Outer-loop training: Reptile, Eigen-Reptile, and the two averaged
//! baseline directions, plus evaluation with confidence intervals.
//!
//! Eigen-Reptile replaces Reptile's endpoint offset with the principal
//! direction of the inner-loop snapshot trajectory: per task the unit
//! eigenvector e is sign-aligned with the mean motion, scaled by its
//! eigen-share zeta, and the projected path length nu sets the stepsize.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ispl::{self, IsplConfig};
use crate::linalg::{self, TrajectoryMatrix};
use crate::nn::{self, Batch, LossKind, NetworkSpec, OptimizerState, ParamVector};
use crate::seeds;
use crate::tasks::{EvalTarget, EvalTask, MetricKind, TaskSource};
use crate::trajectory::{self, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Reptile,
    EigenReptile,
    AvgGradientDir,
    AvgWeightsDir,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] =
        [Algorithm::EigenReptile, Algorithm::Reptile, Algorithm::AvgGradientDir, Algorithm::AvgWeightsDir];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Reptile => "reptile",
            Algorithm::EigenReptile => "eigen-reptile",
            Algorithm::AvgGradientDir => "avg-gradient-dir",
            Algorithm::AvgWeightsDir => "avg-weights-dir",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSchedule {
    #[default]
    Constant,
    /// beta * (1 - iteration/T)
    LinearDecay,
}

/// When the eigenvector sign flip happens relative to the nu projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignOrder {
    /// Flip first, then project: nu is always the path length along the
    /// motion-aligned direction.
    #[default]
    FlipBeforeProjection,
    /// Accumulate nu against the raw eigenvector and flip afterwards
    /// (the literal listing order; kept for ablation).
    PaperLiteral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub outer_iterations: usize,
    #[serde(default)]
    pub beta_schedule: BetaSchedule,
    #[serde(default)]
    pub sign_order: SignOrder,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.meta_batch < 1 {
            return Err(Error::Config("meta_batch must be >= 1".into()));
        }
        if self.inner_steps < 2 {
            return Err(Error::Config("inner_steps must be >= 2".into()));
        }
        if self.outer_iterations < 1 {
            return Err(Error::Config("outer_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// One task's contribution to the meta-update.
#[derive(Debug, Clone)]
pub struct TaskDirection {
    /// Unit direction aligned with the task's mean motion; zero when
    /// degenerate.
    pub e_signed: ParamVector,
    pub zeta: f64,
    pub nu: f64,
    pub degenerate: bool,
}

impl TaskDirection {
    fn degenerate(d: usize) -> Self {
        TaskDirection { e_signed: ParamVector::zeros(d), zeta: 0.0, nu: 0.0, degenerate: true }
    }
}

/// phi + beta * (phi_tilde - phi)
pub fn reptile_update(phi: &ParamVector, phi_tilde: &ParamVector, beta: f64) -> ParamVector {
    let mut out = phi.clone();
    let mut diff = phi_tilde.clone();
    diff.add_scaled(phi, -1.0);
    out.add_scaled(&diff, beta);
    out
}

/// Mean motion V = (1/floor(n/2)) * sum_{i=1..floor(n/2)} (w_{n-i+1} - w_i),
/// computed on the raw snapshots (centering cancels in the differences).
pub fn mean_motion(w: &TrajectoryMatrix) -> ParamVector {
    let n = w.n();
    let half = n / 2;
    let mut v = ParamVector::zeros(w.d());
    for i in 1..=half {
        let far = w.col(n - i);
        let near = w.col(i - 1);
        let vs = v.as_mut_slice();
        for (k, (f, a)) in far.iter().zip(near).enumerate() {
            vs[k] += f - a;
        }
    }
    v.scale(1.0 / half as f64);
    v
}

/// Sum of consecutive snapshot differences projected on `e`.
fn projected_path_length(w: &TrajectoryMatrix, e: &ParamVector) -> f64 {
    let mut nu = 0.0;
    for j in 0..w.n() - 1 {
        let a = w.col(j);
        let b = w.col(j + 1);
        let mut dot = 0.0;
        for ((bv, av), ev) in b.iter().zip(a).zip(e.as_slice()) {
            dot += (bv - av) * ev;
        }
        nu += dot;
    }
    nu
}

/// Fix the eigenvector sign against the mean motion and project the path
/// onto it, in the configured order.
fn orient_and_project(
    e_raw: &ParamVector,
    v_bar: &ParamVector,
    snapshots: &TrajectoryMatrix,
    order: SignOrder,
) -> (ParamVector, f64) {
    let flip = e_raw.dot(v_bar) < 0.0;
    match order {
        SignOrder::FlipBeforeProjection => {
            let mut e = e_raw.clone();
            if flip {
                e.scale(-1.0);
            }
            let nu = projected_path_length(snapshots, &e);
            (e, nu)
        }
        SignOrder::PaperLiteral => {
            let nu = projected_path_length(snapshots, e_raw);
            let mut e = e_raw.clone();
            if flip {
                e.scale(-1.0);
            }
            (e, nu)
        }
    }
}

/// Principal direction of one task's trajectory, sign-corrected, with its
/// eigen-share and projected stepsize. Degenerate trajectories come back
/// flagged instead of failing.
pub fn task_direction(rec: &TrajectoryRecord, order: SignOrder) -> TaskDirection {
    let (centered, _) = linalg::mean_center(&rec.snapshots);
    let dir = match linalg::principal_direction(&centered) {
        Ok(d) => d,
        Err(Error::DegenerateTrajectory) => return TaskDirection::degenerate(rec.snapshots.d()),
        Err(e) => {
            log::warn!("principal direction failed ({e}); dropping task from the batch");
            return TaskDirection::degenerate(rec.snapshots.d());
        }
    };
    let v_bar = mean_motion(&rec.snapshots);
    let (e_signed, nu) = orient_and_project(&dir.e, &v_bar, &rec.snapshots, order);
    TaskDirection { e_signed, zeta: dir.zeta, nu, degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    AvgGradientDir,
    AvgWeightsDir,
}

/// Fig.-4-style comparison directions: the normalized mean consecutive
/// difference, or the normalized offset from the start to the snapshot
/// centroid. Both use zeta = 1.
pub fn baseline_direction(rec: &TrajectoryRecord, kind: BaselineKind) -> TaskDirection {
    let w = &rec.snapshots;
    let n = w.n();
    let raw = match kind {
        BaselineKind::AvgGradientDir => {
            let mut dir = w.column_vec(n - 1);
            dir.add_scaled(&w.column_vec(0), -1.0);
            dir.scale(1.0 / (n - 1) as f64);
            dir
        }
        BaselineKind::AvgWeightsDir => {
            let mut centroid = ParamVector::zeros(w.d());
            for j in 0..n {
                centroid.add_scaled(&w.column_vec(j), 1.0);
            }
            centroid.scale(1.0 / n as f64);
            centroid.add_scaled(&rec.start, -1.0);
            centroid
        }
    };
    match raw.normalized() {
        Some(e) => {
            let nu = projected_path_length(w, &e);
            TaskDirection { e_signed: e, zeta: 1.0, nu, degenerate: false }
        }
        None => TaskDirection::degenerate(w.d()),
    }
}

/// Batch meta-update: phi + beta * (sum nu_i / B) * mean(zeta_i * e_i).
///
/// Degenerate tasks are dropped from the sums while B stays the task
/// count, shrinking the step conservatively. All directions degenerate
/// leaves phi untouched.
pub fn eigen_reptile_meta_update(phi: &ParamVector, dirs: &[TaskDirection], beta: f64) -> ParamVector {
    let b = dirs.len();
    let mut e_tilde = ParamVector::zeros(phi.len());
    let mut nu_total = 0.0;
    let mut live = 0usize;
    for dir in dirs {
        if dir.degenerate {
            continue;
        }
        e_tilde.add_scaled(&dir.e_signed, dir.zeta);
        nu_total += dir.nu;
        live += 1;
    }
    if live == 0 {
        log::warn!("all {b} task directions degenerate; meta-parameters unchanged");
        return phi.clone();
    }
    e_tilde.scale(1.0 / b as f64);
    let mut out = phi.clone();
    out.add_scaled(&e_tilde, beta * nu_total / b as f64);
    out
}

/// Fraction of query predictions matching their labels.
pub fn accuracy(params: &ParamVector, spec: &NetworkSpec, batch: &Batch) -> Result<f64> {
    let labels = match &batch.targets {
        nn::Targets::Labels(l) => l,
        nn::Targets::Values(_) => return Err(Error::InvalidSpec("accuracy needs labeled targets".into())),
    };
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let probs = nn::forward(params, spec, &batch.inputs)?;
    let mut correct = 0usize;
    for (s, &label) in labels.iter().enumerate() {
        let row = probs.row(s);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        correct += usize::from(best == label);
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Adapt on the task's batch for `adapt_steps`, then measure the target
/// metric (grid loss or query accuracy).
pub fn evaluate_task(
    params: &ParamVector,
    spec: &NetworkSpec,
    opt: &OptimizerState,
    loss_kind: LossKind,
    task: &EvalTask,
    adapt_steps: usize,
) -> Result<f64> {
    let mut p = params.clone();
    let mut state = opt.fresh();
    for _ in 0..adapt_steps {
        let g = nn::grad(&p, spec, &task.adapt, loss_kind)?;
        nn::step_in_place(&mut p, &g, &mut state)?;
    }
    match &task.target {
        EvalTarget::Grid(curve) => crate::tasks::eval_grid_loss(&p, spec, curve),
        EvalTarget::Queries(queries) => accuracy(&p, spec, queries),
    }
}

/// Mean metric and its 95% confidence interval (1.96 * std / sqrt(count))
/// over `count` fresh tasks of the given evaluation stream.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_suite(
    params: &ParamVector,
    spec: &NetworkSpec,
    opt: &OptimizerState,
    loss_kind: LossKind,
    source: &TaskSource,
    stream: u64,
    count: usize,
    adapt_steps: usize,
) -> Result<(f64, f64)> {
    if count == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    let mut values = Vec::with_capacity(count);
    for index in 0..count {
        let task = source.eval_task(stream, index)?;
        values.push(evaluate_task(params, spec, opt, loss_kind, &task, adapt_steps)?);
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let ci = if count > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64;
        1.96 * var.sqrt() / (count as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, ci))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    /// Evaluate every `interval` outer iterations (and always at the end).
    pub interval: usize,
    pub task_count: usize,
    pub adapt_steps: usize,
}

#[derive(Debug, Clone)]
pub struct OuterLoopSetup<'a> {
    pub meta: &'a MetaConfig,
    pub net: &'a NetworkSpec,
    pub opt: &'a OptimizerState,
    pub source: &'a TaskSource,
    pub ispl: Option<&'a IsplConfig>,
    pub eval: EvalSettings,
    /// Inner-loop mini-batch size; None trains full batch.
    pub inner_batch: Option<usize>,
    pub seed: u64,
    pub threads: usize,
}

/// Per-iteration row of the metrics series. `None` renders as the CSV
/// sentinel `NA`.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub meta_train_loss: f64,
    pub eval_metric: Option<f64>,
    pub eval_ci95: Option<f64>,
    pub gamma: Option<f64>,
    pub selected_fraction: Option<f64>,
    pub zeta_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingArtifacts {
    pub metrics: Vec<IterationMetrics>,
    pub final_params: ParamVector,
    pub best_params: ParamVector,
    pub best_iteration: usize,
    pub best_metric: f64,
    pub final_metric: f64,
    pub final_ci95: f64,
    pub metric_kind: MetricKind,
    pub wall_seconds: f64,
}

struct TaskOutcome {
    first_loss: f64,
    endpoint: ParamVector,
    direction: Option<TaskDirection>,
    selected: usize,
    total: usize,
}

fn run_one_task(
    phi: &ParamVector,
    setup: &OuterLoopSetup<'_>,
    iteration: usize,
    task_index: usize,
    batch: &Batch,
) -> Result<TaskOutcome> {
    let meta = setup.meta;
    let loss_kind = setup.source.loss_kind();
    let batching = match setup.inner_batch {
        None => trajectory::Batching::Full,
        Some(size) => trajectory::Batching::MiniBatch {
            size,
            seed: seeds::mix(&[setup.seed, seeds::tag::BATCH, iteration as u64, task_index as u64]),
        },
    };
    let rec: TrajectoryRecord = match setup.ispl {
        Some(cfg) => {
            let task_seed = seeds::mix(&[setup.seed, seeds::tag::PRIOR, iteration as u64, task_index as u64]);
            ispl::ispl_inner_loop(
                phi,
                setup.net,
                batch,
                meta.inner_steps,
                setup.opt,
                loss_kind,
                cfg,
                iteration,
                batching,
                task_seed,
            )?
        }
        None => trajectory::run_inner_loop_scheduled(
            phi,
            setup.net,
            batch,
            meta.inner_steps,
            setup.opt,
            loss_kind,
            trajectory::MaskSchedule::All,
            batching,
        )?,
    };
    let direction = match meta.algorithm {
        Algorithm::Reptile => None,
        Algorithm::EigenReptile => Some(task_direction(&rec, meta.sign_order)),
        Algorithm::AvgGradientDir => Some(baseline_direction(&rec, BaselineKind::AvgGradientDir)),
        Algorithm::AvgWeightsDir => Some(baseline_direction(&rec, BaselineKind::AvgWeightsDir)),
    };
    Ok(TaskOutcome {
        first_loss: rec.step_losses[0],
        endpoint: rec.endpoint(),
        direction,
        selected: rec.selected_count,
        total: batch.len(),
    })
}

/// Run the task batch, possibly across threads; outcomes come back in
/// task-index order so reductions are bitwise reproducible.
fn run_task_batch(
    phi: &ParamVector,
    setup: &OuterLoopSetup<'_>,
    iteration: usize,
    batches: &[Batch],
) -> Result<Vec<TaskOutcome>> {
    let threads = setup.threads.max(1).min(batches.len());
    if threads <= 1 {
        return batches
            .iter()
            .enumerate()
            .map(|(idx, b)| run_one_task(phi, setup, iteration, idx, b))
            .collect();
    }
    let mut slots: Vec<Option<Result<TaskOutcome>>> = Vec::new();
    slots.resize_with(batches.len(), || None);
    let slot_refs: Vec<_> = slots.iter_mut().collect();
    std::thread::scope(|scope| {
        let mut remaining = slot_refs;
        let mut worker_slices = Vec::new();
        let chunk = batches.len().div_ceil(threads);
        let mut start = 0;
        while !remaining.is_empty() {
            let take = chunk.min(remaining.len());
            let rest = remaining.split_off(take);
            worker_slices.push((start, remaining));
            remaining = rest;
            start += take;
        }
        for (offset, slice) in worker_slices {
            scope.spawn(move || {
                for (i, slot) in slice.into_iter().enumerate() {
                    let idx = offset + i;
                    *slot = Some(run_one_task(phi, setup, iteration, idx, &batches[idx]));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

/// T iterations of: sample B tasks, run inner loops (through ISPL when
/// enabled), reduce directions per the configured algorithm, update the
/// meta-parameters. Deterministic given the seed.
pub fn outer_loop(setup: &OuterLoopSetup<'_>) -> Result<TrainingArtifacts> {
    setup.meta.validate()?;
    if let Some(cfg) = setup.ispl {
        cfg.validate()?;
    }
    let started = Instant::now();
    let meta = setup.meta;
    let metric_kind = setup.source.metric_kind();
    let loss_kind = setup.source.loss_kind();
    let t_total = meta.outer_iterations;

    let mut phi = nn::init_params(setup.net, setup.seed);
    let mut metrics = Vec::with_capacity(t_total);
    let mut best_metric = metric_kind.worst();
    let mut best_iteration = 0usize;
    let mut best_params = phi.clone();
    let mut last_eval: Option<(f64, f64)> = None;

    for iteration in 0..t_total {
        let beta = match meta.beta_schedule {
            BetaSchedule::Constant => meta.beta,
            BetaSchedule::LinearDecay => meta.beta * (1.0 - iteration as f64 / t_total as f64),
        };
        let batches: Vec<Batch> = (0..meta.meta_batch)
            .map(|idx| setup.source.train_batch(iteration, idx))
            .collect::<Result<_>>()?;
        let outcomes = run_task_batch(&phi, setup, iteration, &batches)?;

        let meta_train_loss =
            outcomes.iter().map(|o| o.first_loss).sum::<f64>() / outcomes.len() as f64;
        if !meta_train_loss.is_finite() {
            return Err(Error::NonFinite("meta-training loss"));
        }

        phi = match meta.algorithm {
            Algorithm::Reptile => {
                let mut mean_endpoint = ParamVector::zeros(phi.len());
                for o in &outcomes {
                    mean_endpoint.add_scaled(&o.endpoint, 1.0 / outcomes.len() as f64);
                }
                reptile_update(&phi, &mean_endpoint, beta)
            }
            _ => {
                let dirs: Vec<TaskDirection> =
                    outcomes.iter().map(|o| o.direction.clone().expect("direction computed")).collect();
                eigen_reptile_meta_update(&phi, &dirs, beta)
            }
        };
        if !phi.is_finite() {
            return Err(Error::NonFinite("meta-parameters"));
        }

        let zeta_mean = match meta.algorithm {
            Algorithm::Reptile => None,
            _ => {
                let live: Vec<f64> = outcomes
                    .iter()
                    .filter_map(|o| o.direction.as_ref())
                    .filter(|d| !d.degenerate)
                    .map(|d| d.zeta)
                    .collect();
                if live.is_empty() {
                    None
                } else {
                    Some(live.iter().sum::<f64>() / live.len() as f64)
                }
            }
        };
        let (gamma, selected_fraction) = match setup.ispl {
            Some(cfg) => {
                let frac = outcomes.iter().map(|o| o.selected as f64 / o.total as f64).sum::<f64>()
                    / outcomes.len() as f64;
                (Some(ispl::gamma_at(iteration, cfg)), Some(frac))
            }
            None => (None, None),
        };

        let due = setup.eval.interval > 0 && (iteration + 1) % setup.eval.interval == 0;
        let mut eval_metric = None;
        let mut eval_ci95 = None;
        if due || iteration + 1 == t_total {
            let (mean, ci) = evaluate_suite(
                &phi,
                setup.net,
                setup.opt,
                loss_kind,
                setup.source,
                0,
                setup.eval.task_count,
                setup.eval.adapt_steps,
            )?;
            eval_metric = Some(mean);
            eval_ci95 = Some(ci);
            last_eval = Some((mean, ci));
            if metric_kind.is_improvement(mean, best_metric) {
                best_metric = mean;
                best_iteration = iteration;
                best_params = phi.clone();
            }
        }

        metrics.push(IterationMetrics {
            iteration,
            meta_train_loss,
            eval_metric,
            eval_ci95,
            gamma,
            selected_fraction,
            zeta_mean,
        });
    }

    let (final_metric, final_ci95) = last_eval.expect("final iteration always evaluates");
    Ok(TrainingArtifacts {
        metrics,
        final_params: phi,
        best_params,
        best_iteration,
        best_metric,
        final_metric,
        final_ci95,
        metric_kind,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
