//! Inner-loop execution: run n optimizer steps on one task and record the
//! full parameter trajectory.

use crate::error::{Error, Result};
use crate::linalg::TrajectoryMatrix;
use crate::matrix::Matrix;
use crate::nn::{self, Batch, LayerParams, LossKind, NetworkSpec, OptimizerState, ParamVector};

/// Everything the meta layer needs from one task's inner loop.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// Meta-parameters at task entry.
    pub start: ParamVector,
    /// Column `j` = parameters after exactly `j+1` optimizer steps.
    pub snapshots: TrajectoryMatrix,
    /// Training loss at the parameters each step's gradient was taken from.
    pub step_losses: Vec<f64>,
    /// Samples that carried weight in the final step (ISPL reporting).
    pub selected_count: usize,
}

impl TrajectoryRecord {
    /// Task-specific parameters after the full inner loop.
    pub fn endpoint(&self) -> ParamVector {
        self.snapshots.column_vec(self.snapshots.n() - 1)
    }
}

/// Which samples participate at each inner step.
#[derive(Debug, Clone, Copy)]
pub enum MaskSchedule<'a> {
    /// All samples, every step.
    All,
    /// One selection mask reused for every step.
    Fixed(&'a [bool]),
    /// One mask per step (length must equal the step count).
    PerStep(&'a [Vec<bool>]),
}

impl<'a> MaskSchedule<'a> {
    fn mask_for(&self, step: usize) -> Option<&'a [bool]> {
        match self {
            MaskSchedule::All => None,
            MaskSchedule::Fixed(m) => Some(m),
            MaskSchedule::PerStep(ms) => Some(&ms[step]),
        }
    }
}

/// How each inner step consumes the (selected) training samples.
#[derive(Debug, Clone, Copy)]
pub enum Batching {
    /// Every step uses all selected samples.
    Full,
    /// Each step draws `size` selected samples uniformly without
    /// replacement (independently across steps), seeded for determinism.
    MiniBatch { size: usize, seed: u64 },
}

/// Step weights: mean over the participating samples, zero elsewhere.
/// Returns the selected-sample count (before mini-batch subsampling).
fn step_weights<R: rand::Rng>(
    mask: Option<&[bool]>,
    samples: usize,
    batch_size: Option<usize>,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    let selected: Vec<usize> = match mask {
        None => (0..samples).collect(),
        Some(m) => {
            if m.len() != samples {
                return Err(Error::DimensionMismatch { what: "selection mask", expected: samples, got: m.len() });
            }
            (0..samples).filter(|&i| m[i]).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let kept = selected.len();
    let drawn: Vec<usize> = match batch_size {
        Some(size) if size < kept => {
            let mut pool = selected;
            // partial Fisher-Yates: the first `size` entries are a uniform
            // without-replacement draw
            for i in 0..size {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(size);
            pool
        }
        _ => selected,
    };
    let w = 1.0 / drawn.len() as f64;
    let mut weights = vec![0.0; samples];
    for i in drawn {
        weights[i] = w;
    }
    Ok((weights, kept))
}

/// Run `steps` optimizer steps from `init` and record every post-step
/// parameter vector. `init` is not mutated; the optimizer state is used
/// as a template and starts fresh.
pub fn run_inner_loop(
    init: &ParamVector,
    spec: &NetworkSpec,
    train: &Batch,
    steps: usize,
    opt: &OptimizerState,
    kind: LossKind,
    mask: Option<&[bool]>,
) -> Result<TrajectoryRecord> {
    let schedule = match mask {
        None => MaskSchedule::All,
        Some(m) => MaskSchedule::Fixed(m),
    };
    run_inner_loop_scheduled(init, spec, train, steps, opt, kind, schedule, Batching::Full)
}

#[allow(clippy::too_many_arguments)]
pub fn run_inner_loop_scheduled(
    init: &ParamVector,
    spec: &NetworkSpec,
    train: &Batch,
    steps: usize,
    opt: &OptimizerState,
    kind: LossKind,
    schedule: MaskSchedule<'_>,
    batching: Batching,
) -> Result<TrajectoryRecord> {
    if steps < 2 {
        return Err(Error::InvalidSpec(format!("inner loop needs at least 2 steps, got {steps}")));
    }
    if let MaskSchedule::PerStep(ms) = schedule {
        if ms.len() != steps {
            return Err(Error::DimensionMismatch { what: "mask schedule", expected: steps, got: ms.len() });
        }
    }
    let (batch_size, mut rng) = match batching {
        Batching::Full => (None, crate::seeds::rng_from(&[0])),
        Batching::MiniBatch { size, seed } => {
            if size == 0 {
                return Err(Error::InvalidSpec("mini-batch size must be >= 1".into()));
            }
            (Some(size), crate::seeds::rng_from(&[seed, crate::seeds::tag::BATCH]))
        }
    };
    let mut params = init.clone();
    let mut state = opt.fresh();
    let mut columns = Vec::with_capacity(steps);
    let mut step_losses = Vec::with_capacity(steps);
    let mut selected_count = train.len();
    for j in 0..steps {
        let (weights, kept) = step_weights(schedule.mask_for(j), train.len(), batch_size, &mut rng)?;
        selected_count = kept;
        let (loss, grad) = nn::loss_and_grad_weighted(&params, spec, train, kind, &weights)?;
        step_losses.push(loss);
        nn::step_in_place(&mut params, &grad, &mut state)?;
        columns.push(params.clone());
    }
    Ok(TrajectoryRecord {
        start: init.clone(),
        snapshots: TrajectoryMatrix::from_columns(&columns)?,
        step_losses,
        selected_count,
    })
}

/// Concatenate structured layer parameters into one flat vector
/// (row-major weights, then biases, per layer).
pub fn flatten(layers: &[LayerParams]) -> ParamVector {
    let mut values = Vec::new();
    for layer in layers {
        values.extend_from_slice(layer.weights.data());
        values.extend_from_slice(&layer.biases);
    }
    ParamVector::new(values)
}

/// Exact inverse of [`flatten`] for the given architecture.
pub fn unflatten(params: &ParamVector, spec: &NetworkSpec) -> Result<Vec<LayerParams>> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch { what: "flat params", expected: spec.param_count(), got: params.len() });
    }
    let p = params.as_slice();
    spec.layouts()
        .iter()
        .map(|layout| {
            let w = p[layout.w_offset..layout.w_offset + layout.in_dim * layout.out_dim].to_vec();
            let weights = Matrix::from_vec(layout.out_dim, layout.in_dim, w)?;
            let biases = p[layout.b_offset..layout.b_offset + layout.out_dim].to_vec();
            Ok(LayerParams { weights, biases })
        })
        .collect()
}
