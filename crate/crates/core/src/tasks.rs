//! Episode generation: sine-wave regression, synthetic N-way K-shot
//! classification, label-noise injection, and episode files loaded from
//! disk.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Batch, NetworkSpec, ParamVector, Targets};
use crate::seeds::{self, standard_normal};

/// One sine regression task: y = A * sin(x + b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl RegressionTask {
    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

/// Amplitude uniform in [0.1, 5.0], phase uniform in [0, 2*pi].
pub fn gen_sine_task<R: Rng>(rng: &mut R) -> RegressionTask {
    RegressionTask { amplitude: rng.gen_range(0.1..=5.0), phase: rng.gen_range(0.0..=2.0 * PI) }
}

/// K points with x uniform in [-5, 5].
pub fn sample_points<R: Rng>(task: &RegressionTask, k: usize, rng: &mut R) -> Batch {
    let mut inputs = Matrix::zeros(k, 1);
    let mut targets = Matrix::zeros(k, 1);
    for i in 0..k {
        let x = rng.gen_range(-5.0..=5.0);
        inputs[(i, 0)] = x;
        targets[(i, 0)] = task.value(x);
    }
    Batch { inputs, targets: Targets::Values(targets) }
}

pub const GRID_POINTS: usize = 50;

/// Mean squared error against the task curve on 50 equally spaced points
/// spanning [-5, 5] inclusive.
pub fn eval_grid_loss(params: &ParamVector, spec: &NetworkSpec, task: &RegressionTask) -> Result<f64> {
    let mut inputs = Matrix::zeros(GRID_POINTS, 1);
    for i in 0..GRID_POINTS {
        inputs[(i, 0)] = -5.0 + 10.0 * i as f64 / (GRID_POINTS - 1) as f64;
    }
    let preds = nn::forward(params, spec, &inputs)?;
    let mut total = 0.0;
    for i in 0..GRID_POINTS {
        let err = preds[(i, 0)] - task.value(inputs[(i, 0)]);
        total += err * err;
    }
    Ok(total / GRID_POINTS as f64)
}

/// One label that noise injection changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseFlip {
    pub index: usize,
    pub original: usize,
    pub flipped: usize,
}

/// One N-way K-shot episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub train: Batch,
    pub test: Batch,
    pub n_way: usize,
    pub k_train: usize,
    pub k_test: usize,
    pub noise_record: Vec<NoiseFlip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub p: f64,
    /// Seeds the fixed class pairing used by asymmetric noise.
    pub pairing_seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { kind: NoiseKind::None, p: 0.0, pairing_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("noise probability must be in [0,1], got {}", self.p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_train: usize,
    pub k_test: usize,
    pub input_dim: usize,
}

/// Gaussian-cluster episode plus the true class means (for oracle checks).
///
/// Class means are drawn uniformly on the radius-3 sphere; samples add
/// unit-variance isotropic noise. Train and test draws are disjoint.
pub fn gen_classification_episode_with_means<R: Rng>(cfg: &EpisodeConfig, rng: &mut R) -> (Episode, Matrix) {
    let mut means = Matrix::zeros(cfg.n_way, cfg.input_dim);
    for c in 0..cfg.n_way {
        let row = means.row_mut(c);
        let mut norm = 0.0;
        for v in row.iter_mut() {
            *v = standard_normal(rng);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v *= 3.0 / norm;
        }
    }
    let draw_split = |rng: &mut R, per_class: usize| -> Batch {
        let mut inputs = Matrix::zeros(cfg.n_way * per_class, cfg.input_dim);
        let mut labels = Vec::with_capacity(cfg.n_way * per_class);
        for c in 0..cfg.n_way {
            for k in 0..per_class {
                let row = inputs.row_mut(c * per_class + k);
                for (v, m) in row.iter_mut().zip(means.row(c)) {
                    *v = m + standard_normal(rng);
                }
                labels.push(c);
            }
        }
        Batch { inputs, targets: Targets::Labels(labels) }
    };
    let train = draw_split(rng, cfg.k_train);
    let test = draw_split(rng, cfg.k_test);
    (
        Episode {
            train,
            test,
            n_way: cfg.n_way,
            k_train: cfg.k_train,
            k_test: cfg.k_test,
            noise_record: Vec::new(),
        },
        means,
    )
}

pub fn gen_classification_episode<R: Rng>(cfg: &EpisodeConfig, rng: &mut R) -> Episode {
    gen_classification_episode_with_means(cfg, rng).0
}

/// The fixed asymmetric pairing: a seeded permutation sigma turned into the
/// derangement sigma[i] -> sigma[(i+1) mod N].
pub fn asymmetric_pairing(n_way: usize, pairing_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_way).collect();
    let mut rng = seeds::rng_from(&[pairing_seed, seeds::tag::NOISE]);
    order.shuffle(&mut rng);
    let mut pairing = vec![0; n_way];
    for i in 0..n_way {
        pairing[order[i]] = order[(i + 1) % n_way];
    }
    pairing
}

/// Corrupt training labels only; test labels and all features are left
/// untouched, and the returned record lists exactly the labels that
/// changed.
pub fn inject_label_noise<R: Rng>(episode: &Episode, spec: &NoiseSpec, rng: &mut R) -> Episode {
    let mut out = episode.clone();
    if spec.kind == NoiseKind::None || spec.p == 0.0 {
        return out;
    }
    let n = episode.n_way;
    let labels = match &mut out.train.targets {
        Targets::Labels(l) => l,
        Targets::Values(_) => return out, // regression episodes carry no labels to flip
    };
    let pairing = match spec.kind {
        NoiseKind::Asymmetric => asymmetric_pairing(n, spec.pairing_seed),
        _ => Vec::new(),
    };
    let mut record = Vec::new();
    for (i, label) in labels.iter_mut().enumerate() {
        if rng.gen::<f64>() >= spec.p {
            continue;
        }
        let new = match spec.kind {
            NoiseKind::Symmetric => {
                // uniform over the other n-1 classes
                let draw = rng.gen_range(0..n - 1);
                if draw >= *label {
                    draw + 1
                } else {
                    draw
                }
            }
            NoiseKind::Asymmetric => pairing[*label],
            NoiseKind::None => unreachable!(),
        };
        if new != *label {
            record.push(NoiseFlip { index: i, original: *label, flipped: new });
            *label = new;
        }
    }
    out.noise_record = record;
    out
}

/// Train-shot rule: ceil(inner_steps * batch_size / n_way) + 1.
pub fn compute_train_shot(inner_steps: usize, batch_size: usize, n_way: usize) -> usize {
    debug_assert!(inner_steps > 0 && batch_size > 0 && n_way > 0);
    (inner_steps * batch_size).div_ceil(n_way) + 1
}

/// Episode file: header `label,f1,...,fD`, one sample per row.
pub fn load_episode_file(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::ParseEpisode {
        path: display.clone(),
        line: 1,
        message: "file is empty".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::ParseEpisode {
            path: display,
            line: 1,
            message: format!("expected header 'label,f1,...,fD', got '{header}'"),
        });
    }
    let dim = cols.len() - 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::ParseEpisode {
                path: display,
                line: line_no,
                message: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::ParseEpisode {
            path: display.clone(),
            line: line_no,
            message: format!("label '{}' is not a non-negative integer", fields[0]),
        })?;
        let mut row = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::ParseEpisode {
                path: display.clone(),
                line: line_no,
                message: format!("feature '{f}' is not a decimal float"),
            })?;
            row.push(v);
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::ParseEpisode { path: display, line: 1, message: "no data rows".into() });
    }
    Ok((Matrix::from_rows(&rows)?, labels))
}

/// All episode files of a directory, loaded eagerly in filename order.
#[derive(Debug, Clone)]
pub struct EpisodeDir {
    files: Vec<(PathBuf, Matrix, Vec<usize>)>,
    input_dim: usize,
}

impl EpisodeDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("episode directory {} has no files", dir.display())));
        }
        let mut files = Vec::with_capacity(paths.len());
        let mut input_dim = 0;
        for p in paths {
            let (inputs, labels) = load_episode_file(&p)?;
            if input_dim == 0 {
                input_dim = inputs.cols();
            } else if inputs.cols() != input_dim {
                return Err(Error::Config(format!(
                    "{}: feature dim {} differs from {}",
                    p.display(),
                    inputs.cols(),
                    input_dim
                )));
            }
            files.push((p, inputs, labels));
        }
        Ok(EpisodeDir { files, input_dim })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Build an N-way episode from file `index mod len`: per class, the
    /// first `k_train` rows are the train split, the next `k_test` the
    /// test split.
    pub fn episode(&self, index: usize, n_way: usize, k_train: usize, k_test: usize) -> Result<Episode> {
        self.build_episode::<rand_chacha::ChaCha8Rng>(index, n_way, k_train, k_test, None)
    }

    /// Like [`EpisodeDir::episode`] but shuffles each class's rows first,
    /// so repeated visits to one file see different splits.
    pub fn episode_shuffled<R: Rng>(
        &self,
        index: usize,
        n_way: usize,
        k_train: usize,
        k_test: usize,
        rng: &mut R,
    ) -> Result<Episode> {
        self.build_episode(index, n_way, k_train, k_test, Some(rng))
    }

    fn build_episode<R: Rng>(
        &self,
        index: usize,
        n_way: usize,
        k_train: usize,
        k_test: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Episode> {
        let (path, inputs, labels) = &self.files[index % self.files.len()];
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_way];
        for (row, &label) in labels.iter().enumerate() {
            if label >= n_way {
                return Err(Error::Config(format!(
                    "{}: label {} out of range for {}-way episodes",
                    path.display(),
                    label,
                    n_way
                )));
            }
            by_class[label].push(row);
        }
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (c, rows) in by_class.iter().enumerate() {
            if rows.len() < k_train + k_test {
                return Err(Error::Config(format!(
                    "{}: class {} has {} samples, need {}",
                    path.display(),
                    c,
                    rows.len(),
                    k_train + k_test
                )));
            }
            let mut rows = rows.clone();
            if let Some(r) = rng.as_deref_mut() {
                rows.shuffle(r);
            }
            train_idx.extend_from_slice(&rows[..k_train]);
            test_idx.extend_from_slice(&rows[k_train..k_train + k_test]);
        }
        let gather = |idx: &[usize]| -> Batch {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&r| inputs.row(r).to_vec()).collect();
            let labels: Vec<usize> = idx.iter().map(|&r| labels[r]).collect();
            Batch { inputs: Matrix::from_rows(&rows).expect("equal widths"), targets: Targets::Labels(labels) }
        };
        Ok(Episode {
            train: gather(&train_idx),
            test: gather(&test_idx),
            n_way,
            k_train,
            k_test,
            noise_record: Vec::new(),
        })
    }
}

/// What an evaluation episode measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Mean squared error on the sine grid; lower is better.
    GridLoss,
    /// Query-set accuracy; higher is better.
    Accuracy,
}

impl MetricKind {
    pub fn is_improvement(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            MetricKind::GridLoss => candidate < incumbent,
            MetricKind::Accuracy => candidate > incumbent,
        }
    }

    pub fn worst(self) -> f64 {
        match self {
            MetricKind::GridLoss => f64::INFINITY,
            MetricKind::Accuracy => f64::NEG_INFINITY,
        }
    }
}

/// One meta-test instance: a batch to adapt on plus what to measure after.
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub adapt: Batch,
    pub target: EvalTarget,
}

#[derive(Debug, Clone)]
pub enum EvalTarget {
    Grid(RegressionTask),
    Queries(Batch),
}

#[derive(Debug, Clone)]
enum SourceKind {
    Sine {
        k: usize,
    },
    Synthetic {
        n_way: usize,
        train_shot: usize,
        eval_shot: usize,
        eval_query: usize,
        input_dim: usize,
        noise: NoiseSpec,
    },
    Directory {
        dir: EpisodeDir,
        n_way: usize,
        train_shot: usize,
        eval_shot: usize,
        eval_query: usize,
        noise: NoiseSpec,
    },
}

/// Deterministic episode stream for one run.
///
/// Training batches depend only on `(run_seed, iteration, task_index)` and
/// evaluation tasks only on `(run_seed, stream, index)`, so runs that share
/// a seed see identical task sequences regardless of the algorithm driving
/// them. Label noise touches meta-training episodes only.
#[derive(Debug, Clone)]
pub struct TaskSource {
    kind: SourceKind,
    run_seed: u64,
}

impl TaskSource {
    pub fn sine(run_seed: u64, k: usize) -> Self {
        TaskSource { kind: SourceKind::Sine { k }, run_seed }
    }

    pub fn synthetic(
        run_seed: u64,
        n_way: usize,
        train_shot: usize,
        eval_shot: usize,
        eval_query: usize,
        input_dim: usize,
        noise: NoiseSpec,
    ) -> Self {
        TaskSource {
            kind: SourceKind::Synthetic { n_way, train_shot, eval_shot, eval_query, input_dim, noise },
            run_seed,
        }
    }

    pub fn directory(
        run_seed: u64,
        dir: EpisodeDir,
        n_way: usize,
        train_shot: usize,
        eval_shot: usize,
        eval_query: usize,
        noise: NoiseSpec,
    ) -> Self {
        TaskSource {
            kind: SourceKind::Directory { dir, n_way, train_shot, eval_shot, eval_query, noise },
            run_seed,
        }
    }

    pub fn loss_kind(&self) -> nn::LossKind {
        match self.kind {
            SourceKind::Sine { .. } => nn::LossKind::Mse,
            _ => nn::LossKind::CrossEntropy,
        }
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self.kind {
            SourceKind::Sine { .. } => MetricKind::GridLoss,
            _ => MetricKind::Accuracy,
        }
    }

    /// Training batch for one task slot of one outer iteration.
    pub fn train_batch(&self, iteration: usize, task_index: usize) -> Result<Batch> {
        let mut rng = seeds::rng_from(&[self.run_seed, seeds::tag::TASK, iteration as u64, task_index as u64]);
        match &self.kind {
            SourceKind::Sine { k } => {
                let task = gen_sine_task(&mut rng);
                Ok(sample_points(&task, *k, &mut rng))
            }
            SourceKind::Synthetic { n_way, train_shot, input_dim, noise, .. } => {
                let cfg = EpisodeConfig { n_way: *n_way, k_train: *train_shot, k_test: 1, input_dim: *input_dim };
                let ep = gen_classification_episode(&cfg, &mut rng);
                let ep = inject_label_noise(&ep, noise, &mut rng);
                Ok(ep.train)
            }
            SourceKind::Directory { dir, n_way, train_shot, noise, .. } => {
                let file = rng.gen_range(0..dir.len());
                let ep = dir.episode_shuffled(file, *n_way, *train_shot, 0, &mut rng)?;
                let ep = inject_label_noise(&ep, noise, &mut rng);
                Ok(ep.train)
            }
        }
    }

    /// Clean meta-test instance `index` of evaluation stream `stream`.
    pub fn eval_task(&self, stream: u64, index: usize) -> Result<EvalTask> {
        let mut rng = seeds::rng_from(&[self.run_seed, seeds::tag::EVAL, stream, index as u64]);
        match &self.kind {
            SourceKind::Sine { k } => {
                let task = gen_sine_task(&mut rng);
                let adapt = sample_points(&task, *k, &mut rng);
                Ok(EvalTask { adapt, target: EvalTarget::Grid(task) })
            }
            SourceKind::Synthetic { n_way, eval_shot, eval_query, input_dim, .. } => {
                let cfg =
                    EpisodeConfig { n_way: *n_way, k_train: *eval_shot, k_test: *eval_query, input_dim: *input_dim };
                let ep = gen_classification_episode(&cfg, &mut rng);
                Ok(EvalTask { adapt: ep.train, target: EvalTarget::Queries(ep.test) })
            }
            SourceKind::Directory { dir, n_way, eval_shot, eval_query, .. } => {
                let file = rng.gen_range(0..dir.len());
                let ep = dir.episode_shuffled(file, *n_way, *eval_shot, *eval_query, &mut rng)?;
                Ok(EvalTask { adapt: ep.train, target: EvalTarget::Queries(ep.test) })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkSpec, OutputHead};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn sine_identity() {
        let task = RegressionTask { amplitude: 1.0, phase: 0.0 };
        assert!((task.value(FRAC_PI_2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sine_task_ranges() {
        let mut rng = seeds::rng_from(&[1, seeds::tag::TASK]);
        for _ in 0..100_000 {
            let t = gen_sine_task(&mut rng);
            assert!((0.1..=5.0).contains(&t.amplitude));
            assert!((0.0..=2.0 * PI).contains(&t.phase));
        }
    }

    #[test]
    fn sample_points_follow_the_curve() {
        let mut rng = seeds::rng_from(&[2, seeds::tag::TASK]);
        let task = gen_sine_task(&mut rng);
        let batch = sample_points(&task, 10, &mut rng);
        assert_eq!(batch.len(), 10);
        if let Targets::Values(t) = &batch.targets {
            for i in 0..10 {
                let x = batch.inputs[(i, 0)];
                assert!((-5.0..=5.0).contains(&x));
                assert_eq!(t[(i, 0)], task.value(x));
            }
        } else {
            panic!("regression targets expected");
        }
    }

    #[test]
    fn grid_loss_oracle_values() {
        let spec = NetworkSpec::uniform(&[1, 1], Activation::Tanh, OutputHead::RegressionLinear).unwrap();
        let zero = ParamVector::zeros(2);

        // exactly-matching predictions: amplitude 0 curve vs the zero net
        let flat = RegressionTask { amplitude: 0.0, phase: 0.0 };
        assert_eq!(eval_grid_loss(&zero, &spec, &flat).unwrap(), 0.0);

        // zero net vs sin(x): mean of sin^2 over the inclusive 50-point grid
        let task = RegressionTask { amplitude: 1.0, phase: 0.0 };
        let got = eval_grid_loss(&zero, &spec, &task).unwrap();
        let mut direct = 0.0;
        for i in 0..50 {
            let x = -5.0 + 10.0 * i as f64 / 49.0;
            direct += x.sin() * x.sin();
        }
        direct /= 50.0;
        assert!((got - direct).abs() < 1e-15);
        assert!((got - 0.5346766356644648).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn episodes_are_balanced_and_deterministic() {
        let cfg = EpisodeConfig { n_way: 5, k_train: 3, k_test: 2, input_dim: 8 };
        let mut rng = seeds::rng_from(&[3, seeds::tag::TASK]);
        let ep = gen_classification_episode(&cfg, &mut rng);
        assert_eq!(ep.train.len(), 15);
        assert_eq!(ep.test.len(), 10);
        if let Targets::Labels(l) = &ep.train.targets {
            for c in 0..5 {
                assert_eq!(l.iter().filter(|&&x| x == c).count(), 3);
            }
        }
        let mut rng2 = seeds::rng_from(&[3, seeds::tag::TASK]);
        let ep2 = gen_classification_episode(&cfg, &mut rng2);
        assert_eq!(ep.train.inputs, ep2.train.inputs);
    }

    #[test]
    fn nearest_true_mean_beats_chance() {
        let cfg = EpisodeConfig { n_way: 5, k_train: 1, k_test: 3, input_dim: 16 };
        let mut correct = 0usize;
        let mut total = 0usize;
        for seed in 0..1000u64 {
            let mut rng = seeds::rng_from(&[seed, seeds::tag::EVAL, 0xBA1E5]);
            let (ep, means) = gen_classification_episode_with_means(&cfg, &mut rng);
            if let Targets::Labels(labels) = &ep.test.targets {
                for (i, &label) in labels.iter().enumerate() {
                    let x = ep.test.inputs.row(i);
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for c in 0..cfg.n_way {
                        let d: f64 = x.iter().zip(means.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d < best_d {
                            best_d = d;
                            best = c;
                        }
                    }
                    correct += usize::from(best == label);
                    total += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        // chance is 0.2; radius-3 clusters with unit noise are far better
        assert!(acc > 0.5, "oracle accuracy {acc}");
        assert!(acc < 1.0, "clusters should still overlap a little");
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = EpisodeConfig { n_way: 4, k_train: 2, k_test: 2, input_dim: 4 };
        let mut rng = seeds::rng_from(&[4, seeds::tag::TASK]);
        let ep = gen_classification_episode(&cfg, &mut rng);
        let spec = NoiseSpec { kind: NoiseKind::Symmetric, p: 0.0, pairing_seed: 0 };
        let noisy = inject_label_noise(&ep, &spec, &mut rng);
        if let (Targets::Labels(a), Targets::Labels(b)) = (&ep.train.targets, &noisy.train.targets) {
            assert_eq!(a, b);
        }
        assert!(noisy.noise_record.is_empty());
    }

    #[test]
    fn symmetric_noise_rates() {
        // p = 0.2, N = 5: keep probability 0.8, each alternative 0.05
        let n = 5usize;
        let p = 0.2;
        let trials = 100_000usize;
        let cfg = EpisodeConfig { n_way: n, k_train: trials / n, k_test: 1, input_dim: 2 };
        let mut rng = seeds::rng_from(&[5, seeds::tag::NOISE]);
        let ep = gen_classification_episode(&cfg, &mut rng);
        let spec = NoiseSpec { kind: NoiseKind::Symmetric, p, pairing_seed: 0 };
        let noisy = inject_label_noise(&ep, &spec, &mut rng);
        let (orig, new) = match (&ep.train.targets, &noisy.train.targets) {
            (Targets::Labels(a), Targets::Labels(b)) => (a, b),
            _ => unreachable!(),
        };
        let mut kept = 0usize;
        let mut to_class = vec![0usize; n];
        for (a, b) in orig.iter().zip(new) {
            if a == b {
                kept += 1;
            } else {
                to_class[*b] += 1;
            }
        }
        let keep_rate = kept as f64 / trials as f64;
        assert!((keep_rate - 0.8).abs() < 0.006, "keep rate {keep_rate}");
        // every alternative class receives about p/(N-1) = 0.05 of all labels
        for (c, &count) in to_class.iter().enumerate() {
            let rate = count as f64 / trials as f64;
            // classes receive flips only from the other four
            assert!((rate - 0.04).abs() < 0.006, "class {c} rate {rate}");
        }
    }

    #[test]
    fn symmetric_half_flip_rate_within_interval() {
        let n = 5usize;
        let trials = 100_000usize;
        let cfg = EpisodeConfig { n_way: n, k_train: trials / n, k_test: 1, input_dim: 2 };
        let mut rng = seeds::rng_from(&[6, seeds::tag::NOISE]);
        let ep = gen_classification_episode(&cfg, &mut rng);
        let spec = NoiseSpec { kind: NoiseKind::Symmetric, p: 0.5, pairing_seed: 0 };
        let noisy = inject_label_noise(&ep, &spec, &mut rng);
        let flip_rate = noisy.noise_record.len() as f64 / trials as f64;
        assert!((0.494..=0.506).contains(&flip_rate), "flip rate {flip_rate}");
    }

    #[test]
    fn asymmetric_pairing_is_a_fixed_derangement() {
        for seed in 0..50u64 {
            let pairing = asymmetric_pairing(5, seed);
            assert_eq!(pairing, asymmetric_pairing(5, seed));
            let mut seen = vec![false; 5];
            for (c, &t) in pairing.iter().enumerate() {
                assert_ne!(c, t, "pairing must have no fixed points");
                assert!(!seen[t]);
                seen[t] = true;
            }
        }
    }

    #[test]
    fn asymmetric_flips_follow_the_pairing() {
        let cfg = EpisodeConfig { n_way: 5, k_train: 200, k_test: 1, input_dim: 2 };
        let spec = NoiseSpec { kind: NoiseKind::Asymmetric, p: 0.4, pairing_seed: 99 };
        let pairing = asymmetric_pairing(5, 99);
        for episode_seed in 0..5u64 {
            let mut rng = seeds::rng_from(&[episode_seed, seeds::tag::NOISE, 7]);
            let ep = gen_classification_episode(&cfg, &mut rng);
            let noisy = inject_label_noise(&ep, &spec, &mut rng);
            assert!(!noisy.noise_record.is_empty());
            for flip in &noisy.noise_record {
                assert_eq!(flip.flipped, pairing[flip.original]);
            }
        }
    }

    #[test]
    fn noise_record_is_an_exact_diff() {
        let cfg = EpisodeConfig { n_way: 6, k_train: 40, k_test: 3, input_dim: 3 };
        let mut rng = seeds::rng_from(&[8, seeds::tag::NOISE]);
        let ep = gen_classification_episode(&cfg, &mut rng);
        let spec = NoiseSpec { kind: NoiseKind::Symmetric, p: 0.3, pairing_seed: 1 };
        let noisy = inject_label_noise(&ep, &spec, &mut rng);
        // features and test split untouched
        assert_eq!(ep.train.inputs, noisy.train.inputs);
        assert_eq!(ep.test.inputs, noisy.test.inputs);
        if let (Targets::Labels(a), Targets::Labels(b)) = (&ep.test.targets, &noisy.test.targets) {
            assert_eq!(a, b);
        }
        // replaying the record on the original labels reproduces the noisy ones
        if let (Targets::Labels(orig), Targets::Labels(new)) = (&ep.train.targets, &noisy.train.targets) {
            let mut replay = orig.clone();
            for flip in &noisy.noise_record {
                assert_eq!(replay[flip.index], flip.original);
                replay[flip.index] = flip.flipped;
            }
            assert_eq!(&replay, new);
            // and every unrecorded index is unchanged
            let changed: std::collections::HashSet<usize> = noisy.noise_record.iter().map(|f| f.index).collect();
            for i in 0..orig.len() {
                if !changed.contains(&i) {
                    assert_eq!(orig[i], new[i]);
                }
            }
        }
    }

    #[test]
    fn train_shot_rule() {
        assert_eq!(compute_train_shot(7, 10, 5), 15);
        assert_eq!(compute_train_shot(1, 1, 1), 2);
        let mut rng = seeds::rng_from(&[9, seeds::tag::TASK]);
        for _ in 0..200 {
            let i = rng.gen_range(1..20);
            let b = rng.gen_range(1..20);
            let n = rng.gen_range(1..20);
            assert!(compute_train_shot(i, b, n) >= 2);
        }
    }

    #[test]
    fn task_streams_are_shared_across_consumers() {
        let noise = NoiseSpec { kind: NoiseKind::Symmetric, p: 0.5, pairing_seed: 1 };
        let a = TaskSource::synthetic(42, 5, 11, 1, 15, 16, noise);
        let b = TaskSource::synthetic(42, 5, 11, 1, 15, 16, noise);
        for iter in [0usize, 3, 17] {
            for idx in 0..3 {
                let ba = a.train_batch(iter, idx).unwrap();
                let bb = b.train_batch(iter, idx).unwrap();
                assert_eq!(ba.inputs, bb.inputs);
                if let (Targets::Labels(la), Targets::Labels(lb)) = (&ba.targets, &bb.targets) {
                    assert_eq!(la, lb);
                }
            }
        }
        // evaluation episodes never carry injected noise: regenerating the
        // same stream with noise disabled gives identical labels
        let clean = TaskSource::synthetic(42, 5, 11, 1, 15, 16, NoiseSpec::none());
        let ea = a.eval_task(0, 5).unwrap();
        let ec = clean.eval_task(0, 5).unwrap();
        if let (Targets::Labels(la), Targets::Labels(lc)) = (&ea.adapt.targets, &ec.adapt.targets) {
            assert_eq!(la, lc);
        }
    }

    #[test]
    fn episode_file_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join(format!("er-episodes-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let good = dir.join("ep0.csv");
        fs::write(&good, "label,f1,f2\n0,1.0,2.0\n0,1.5,2.5\n1,-1.0,0.25\n1,-2.0,0.5\n").unwrap();
        let (inputs, labels) = load_episode_file(&good).unwrap();
        assert_eq!(inputs.rows(), 4);
        assert_eq!(labels, vec![0, 0, 1, 1]);

        let bad = dir.join("ep1.csv");
        fs::write(&bad, "label,f1,f2\n0,1.0,2.0\n1,oops,0.5\n").unwrap();
        match load_episode_file(&bad) {
            Err(Error::ParseEpisode { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let loaded = EpisodeDir::load(&dir);
        assert!(loaded.is_err(), "directory with a malformed file must be rejected");
        fs::remove_file(&bad).unwrap();
        let loaded = EpisodeDir::load(&dir).unwrap();
        let ep = loaded.episode(0, 2, 1, 1).unwrap();
        assert_eq!(ep.train.len(), 2);
        assert_eq!(ep.test.len(), 2);
        fs::remove_dir_all(&dir).unwrap();
    }
}
