//! Command implementations behind the binary: train, eval, verify,
//! compare-directions. Each returns a process exit code; 0 success,
//! 1 verification failure, 2 usage/config error, 3 runtime numeric
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ResolvedRun, RunConfig, TaskFamily};
use crate::error::{Error, Result};
use crate::linalg::{self, TrajectoryMatrix};
use crate::meta::{self, Algorithm, IterationMetrics, OuterLoopSetup, TrainingArtifacts};
use crate::nn::ParamVector;
use crate::seeds;
use crate::tasks::MetricKind;
use crate::verify;

/// 17 significant digits, so equal runs produce byte-equal files.
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => fmt17(v),
        None => "NA".to_string(),
    }
}

pub const METRICS_HEADER: &str = "iteration,meta_train_loss,eval_metric,eval_ci95,gamma,selected_fraction,zeta_mean";

pub fn write_metrics_csv(path: &Path, metrics: &[IterationMetrics]) -> Result<()> {
    let mut out = String::with_capacity(metrics.len() * 64);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.iteration,
            fmt17(m.meta_train_loss),
            fmt_opt(m.eval_metric),
            fmt_opt(m.eval_ci95),
            fmt_opt(m.gamma),
            fmt_opt(m.selected_fraction),
            fmt_opt(m.zeta_mean),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub layer_sizes: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub best_iteration: usize,
    pub best_metric: f64,
    pub final_metric: f64,
    pub config_echo: RunConfig,
    pub wall_seconds: f64,
}

fn write_params(path: &Path, layer_sizes: &[usize], params: &ParamVector) -> Result<()> {
    let file = ParamsFile { layer_sizes: layer_sizes.to_vec(), values: params.as_slice().to_vec() };
    fs::write(path, serde_json::to_string(&file).expect("params serialize"))?;
    Ok(())
}

pub struct TrainOutputs {
    pub artifacts: TrainingArtifacts,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Run training per the resolved config and write metrics.csv,
/// final_summary.json and the parameter files into the output directory.
pub fn train_run(resolved: &ResolvedRun, threads: usize) -> Result<TrainOutputs> {
    let setup = OuterLoopSetup {
        meta: &resolved.meta,
        net: &resolved.net,
        opt: &resolved.opt,
        source: &resolved.source,
        ispl: resolved.ispl.as_ref(),
        eval: resolved.eval,
        inner_batch: resolved.inner_batch,
        seed: resolved.seed,
        threads,
    };
    let artifacts = meta::outer_loop(&setup)?;
    fs::create_dir_all(&resolved.output_dir)?;
    let metrics_path = resolved.output_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &artifacts.metrics)?;
    write_params(&resolved.output_dir.join("final_params.json"), resolved.net.layer_sizes(), &artifacts.final_params)?;
    write_params(&resolved.output_dir.join("best_params.json"), resolved.net.layer_sizes(), &artifacts.best_params)?;
    let summary = SummaryFile {
        best_iteration: artifacts.best_iteration,
        best_metric: artifacts.best_metric,
        final_metric: artifacts.final_metric,
        config_echo: resolved.config.clone(),
        wall_seconds: artifacts.wall_seconds,
    };
    let summary_path = resolved.output_dir.join("final_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("summary serialize"))?;
    Ok(TrainOutputs { artifacts, metrics_path, summary_path })
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) | Error::ParseEpisode { .. } => 2,
        _ => 3,
    }
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>, threads: usize, output: Option<PathBuf>) -> i32 {
    let resolved = match RunConfig::from_file(config_path).and_then(|c| c.resolve(seed, output)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match train_run(&resolved, threads) {
        Ok(outputs) => {
            let a = &outputs.artifacts;
            println!(
                "trained {} for {} iterations: final {} = {:.6}, best {:.6} at iteration {} ({:.1}s)",
                resolved.meta.algorithm.name(),
                resolved.meta.outer_iterations,
                match a.metric_kind {
                    MetricKind::GridLoss => "grid loss",
                    MetricKind::Accuracy => "accuracy",
                },
                a.final_metric,
                a.best_metric,
                a.best_iteration,
                a.wall_seconds,
            );
            println!("wrote {}", outputs.metrics_path.display());
            println!("wrote {}", outputs.summary_path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub struct EvalOptions {
    pub tasks: usize,
    pub adapt_steps: Option<usize>,
    /// Selects the meta-test stream; defaults to 1 (training validation
    /// uses stream 0).
    pub stream_seed: Option<u64>,
    pub use_best: bool,
}

fn eval_inner(summary_path: &Path, opts: &EvalOptions) -> Result<(f64, f64, usize, MetricKind)> {
    if opts.tasks == 0 {
        return Err(Error::Config("eval needs at least one task".into()));
    }
    let text = fs::read_to_string(summary_path)
        .map_err(|e| Error::Config(format!("cannot read summary {}: {e}", summary_path.display())))?;
    let summary: SummaryFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid summary: {e}")))?;
    let resolved = summary.config_echo.resolve(None, None)?;
    let dir = summary_path.parent().unwrap_or_else(|| Path::new("."));
    let params_name = if opts.use_best { "best_params.json" } else { "final_params.json" };
    let params_path = dir.join(params_name);
    let text = fs::read_to_string(&params_path)
        .map_err(|e| Error::Config(format!("cannot read parameters {}: {e}", params_path.display())))?;
    let file: ParamsFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid parameters file: {e}")))?;
    if file.layer_sizes != resolved.net.layer_sizes() {
        return Err(Error::Config("parameter file does not match the configured architecture".into()));
    }
    if file.values.len() != resolved.net.param_count() {
        return Err(Error::Config("parameter count mismatch".into()));
    }
    let params = ParamVector::new(file.values);
    let adapt = opts.adapt_steps.unwrap_or(resolved.config.eval_adapt_steps);
    let stream = opts.stream_seed.unwrap_or(1);
    let (mean, ci) = meta::evaluate_suite(
        &params,
        &resolved.net,
        &resolved.opt,
        resolved.source.loss_kind(),
        &resolved.source,
        stream,
        opts.tasks,
        adapt,
    )?;
    Ok((mean, ci, adapt, resolved.source.metric_kind()))
}

pub fn cmd_eval(summary_path: &Path, opts: &EvalOptions) -> i32 {
    match eval_inner(summary_path, opts) {
        Ok((mean, ci, adapt, kind)) => {
            let name = match kind {
                MetricKind::GridLoss => "grid-loss",
                MetricKind::Accuracy => "accuracy",
            };
            println!(
                "eval_metric={} ci95={} tasks={} adapt_steps={} metric={}",
                fmt17(mean),
                fmt17(ci),
                opts.tasks,
                adapt,
                name
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// verification suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Theorem1,
    Theorem2,
    Snr,
    GramEquivalence,
    All,
}

#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
}

fn check(name: &'static str, passed: bool, details: String) -> SuiteCheck {
    SuiteCheck { name, passed, details }
}

/// Theorem 1 exact check: eigenvectors survive an isotropic shift and
/// eigenvalues move by exactly sigma^2; plus the finite-sample companion
/// comparing direction stability under snapshot noise.
pub fn suite_theorem1(seed: u64) -> Vec<SuiteCheck> {
    let mut rng = seeds::rng_from(&[seed, 0x7111]);
    let mut max_angle = 0.0_f64;
    let mut max_shift = 0.0_f64;
    let mut failures = 0usize;
    for i in 0..100u64 {
        let size = 3 + (i as usize % 8); // 3..=10
        let c = verify::random_distinct_psd(size, seeds::mix(&[seed, i]));
        let sigma2 = rng.gen_range(0.1..1.0);
        match verify::check_isotropic_shift(&c, sigma2) {
            Ok(report) => {
                max_angle = max_angle.max(report.max_eigvec_angle);
                max_shift = max_shift.max(report.max_eigenvalue_shift_error);
            }
            Err(_) => failures += 1,
        }
    }
    let exact_ok = failures == 0 && max_angle < 1e-8 && max_shift < 1e-10;
    let exact = check(
        "theorem1 isotropic shift (100 PSD matrices)",
        exact_ok,
        format!("max angle {max_angle:.3e} (< 1e-8), max shift error {max_shift:.3e} (< 1e-10)"),
    );

    let report = verify::empirical_theorem1(200, 50, 8, 0.1, seeds::mix(&[seed, 0xE1]));
    let empirical = check(
        "theorem1 empirical noise robustness (200 trials)",
        report.mean_angle_eigen < report.mean_angle_reptile,
        format!(
            "mean angle eigen {:.4} < reptile {:.4}",
            report.mean_angle_eigen, report.mean_angle_reptile
        ),
    );
    vec![exact, empirical]
}

/// Theorem 2 inequality on 10^4 random valid triples.
pub fn suite_theorem2(seed: u64) -> Vec<SuiteCheck> {
    let mut rng = seeds::rng_from(&[seed, 0x7222]);
    let mut max_identity_error = 0.0_f64;
    let mut min_diff = f64::INFINITY;
    let mut count = 0usize;
    let mut attempts = 0usize;
    while count < 10_000 && attempts < 100_000 {
        attempts += 1;
        let mut vals = [rng.gen_range(0.01..10.0), rng.gen_range(0.01..10.0), rng.gen_range(0.01..10.0)];
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let [lambda, lambda_o, xi] = vals;
        if lambda - lambda_o < 1e-6 || lambda_o - xi < 1e-6 {
            continue;
        }
        let c = verify::check_discard_ratio(lambda, lambda_o, xi);
        debug_assert!(c.valid);
        max_identity_error = max_identity_error.max(c.identity_error);
        min_diff = min_diff.min(c.diff);
        count += 1;
    }
    let ok = count == 10_000 && max_identity_error <= 1e-12 && min_diff > 0.0;
    vec![check(
        "theorem2 discard ratio (10^4 triples)",
        ok,
        format!("max identity error {max_identity_error:.3e} (<= 1e-12), min diff {min_diff:.3e} (> 0)"),
    )]
}

/// SNR truncation demos: rank-1 trajectories keep everything; an
/// orthogonal planted noise column does not move the top direction.
pub fn suite_snr(seed: u64) -> Vec<SuiteCheck> {
    let mut rng = seeds::rng_from(&[seed, 0x7333]);
    let mut rank1_ok = true;
    let mut rank1_detail = String::new();
    for i in 0..10u64 {
        let d = rng.gen_range(5..30);
        let n = rng.gen_range(3..8);
        let dir: Vec<f64> = (0..d).map(|_| seeds::standard_normal(&mut rng)).collect();
        let cols: Vec<ParamVector> = (0..n)
            .map(|j| {
                let coeff = j as f64 + rng.gen_range(0.1..0.9);
                ParamVector::new(dir.iter().map(|v| v * coeff).collect())
            })
            .collect();
        let w = TrajectoryMatrix::from_columns(&cols).unwrap();
        match verify::snr_truncation_demo(&w, &[]) {
            Ok(r) if (r.retained_share - 1.0).abs() < 1e-9 && r.tail_share < 1e-9 => {}
            Ok(r) => {
                rank1_ok = false;
                rank1_detail = format!("case {i}: retained {} tail {}", r.retained_share, r.tail_share);
            }
            Err(e) => {
                rank1_ok = false;
                rank1_detail = format!("case {i}: {e}");
            }
        }
    }
    let rank1 = check(
        "snr rank-1 trajectories keep the full share",
        rank1_ok,
        if rank1_ok { "retained share 1, tail 0 on 10 cases".into() } else { rank1_detail },
    );

    let mut planted_ok = true;
    let mut max_planted_angle = 0.0_f64;
    for i in 0..20u64 {
        let d = rng.gen_range(8..24);
        // orthonormal u, v
        let mut u: Vec<f64> = (0..d).map(|_| seeds::standard_normal(&mut rng)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let mut v: Vec<f64> = (0..d).map(|_| seeds::standard_normal(&mut rng)).collect();
        let proj: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);

        let n_clean = 5;
        let coeffs: Vec<f64> = (0..n_clean).map(|j| j as f64 + rng.gen_range(0.0..0.5)).collect();
        let mean_coeff: f64 = coeffs.iter().sum::<f64>() / n_clean as f64;
        let mut cols: Vec<ParamVector> =
            coeffs.iter().map(|&c| ParamVector::new(u.iter().map(|x| c * x).collect())).collect();
        // noise column: signal component at the clean mean, plus a small
        // orthogonal part, so it adds variance only off the signal axis
        cols.push(ParamVector::new(
            u.iter().zip(&v).map(|(uu, vv)| mean_coeff * uu + 0.5 * vv).collect(),
        ));
        let w = TrajectoryMatrix::from_columns(&cols).unwrap();
        match verify::snr_truncation_demo(&w, &[n_clean]) {
            Ok(r) => {
                let angle = r.angle_to_clean.unwrap_or(f64::INFINITY);
                max_planted_angle = max_planted_angle.max(angle);
                if angle >= 1e-6 {
                    planted_ok = false;
                }
                if r.spectrum.windows(2).any(|w| w[0] < w[1]) {
                    planted_ok = false;
                }
            }
            Err(_) => planted_ok = false,
        }
        let _ = i;
    }
    let planted = check(
        "snr planted orthogonal noise column",
        planted_ok,
        format!("max angle to clean direction {max_planted_angle:.3e} (< 1e-6) on 20 cases"),
    );
    vec![rank1, planted]
}

/// The Gram-path principal direction matches the direct d x d scatter
/// eigendecomposition on 100 random trajectories.
pub fn suite_gram_equivalence(seed: u64) -> Vec<SuiteCheck> {
    let mut rng = seeds::rng_from(&[seed, 0x7444]);
    let mut max_angle = 0.0_f64;
    let mut failures = 0usize;
    for i in 0..100u64 {
        let d = rng.gen_range(8..=64);
        let n = rng.gen_range(3..=10);
        let mut col_rng = seeds::rng_from(&[seed, 0x7445, i]);
        let cols: Vec<ParamVector> = (0..n)
            .map(|_| ParamVector::new((0..d).map(|_| col_rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let w = TrajectoryMatrix::from_columns(&cols).unwrap();
        let (centered, _) = linalg::mean_center(&w);
        let gram_dir = match linalg::principal_direction(&centered) {
            Ok(d) => d,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let direct = match linalg::sym_eigen(&centered.scatter()) {
            Ok(e) => ParamVector::new(e.eigenvectors.col(0)),
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        max_angle = max_angle.max(linalg::principal_angle(&gram_dir.e, &direct));
    }
    let ok = failures == 0 && max_angle < 1e-6;
    vec![check(
        "gram-trick equivalence (100 trajectories, d in [8,64], n in [3,10])",
        ok,
        format!("max angle {max_angle:.3e} (< 1e-6)"),
    )]
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<SuiteCheck> {
    match suite {
        Suite::Theorem1 => suite_theorem1(seed),
        Suite::Theorem2 => suite_theorem2(seed),
        Suite::Snr => suite_snr(seed),
        Suite::GramEquivalence => suite_gram_equivalence(seed),
        Suite::All => {
            let mut all = suite_theorem1(seed);
            all.extend(suite_theorem2(seed));
            all.extend(suite_snr(seed));
            all.extend(suite_gram_equivalence(seed));
            all
        }
    }
}

pub fn cmd_verify(suite: Suite, seed: u64) -> i32 {
    let checks = run_suite(suite, seed);
    let mut all_passed = true;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        all_passed &= c.passed;
        let _ = writeln!(out, "{status}  {:<55} {}", c.name, c.details);
    }
    let _ = writeln!(out, "{}: {} checks", if all_passed { "ok" } else { "FAILED" }, checks.len());
    if all_passed {
        0
    } else {
        1
    }
}

// ---------------------------------------------------------------------------
// compare-directions
// ---------------------------------------------------------------------------

pub struct CompareOutcome {
    /// Post-adaptation evaluation loss for each algorithm at every
    /// evaluation point, in [`Algorithm::ALL`] order. All four runs share
    /// the task stream and the evaluation tasks, so rows are paired.
    pub eval_series: Vec<(usize, [f64; 4])>,
    pub runs: Vec<(Algorithm, TrainingArtifacts)>,
}

/// Train all four update directions under one seed and config; the shared
/// task stream makes the series directly comparable.
pub fn compare_directions(resolved: &ResolvedRun, threads: usize) -> Result<CompareOutcome> {
    if resolved.config.task != TaskFamily::Sine {
        return Err(Error::Config("compare-directions requires the sine task family".into()));
    }
    let mut runs = Vec::with_capacity(Algorithm::ALL.len());
    for alg in Algorithm::ALL {
        let mut meta_cfg = resolved.meta.clone();
        meta_cfg.algorithm = alg;
        let setup = OuterLoopSetup {
            meta: &meta_cfg,
            net: &resolved.net,
            opt: &resolved.opt,
            source: &resolved.source,
            ispl: resolved.ispl.as_ref(),
            eval: resolved.eval,
            inner_batch: resolved.inner_batch,
            seed: resolved.seed,
            threads,
        };
        let artifacts = meta::outer_loop(&setup)?;
        runs.push((alg, artifacts));
    }
    let iters = resolved.meta.outer_iterations;
    let mut eval_series = Vec::new();
    for i in 0..iters {
        if runs.iter().all(|(_, a)| a.metrics[i].eval_metric.is_some()) {
            let mut row = [0.0; 4];
            for (k, (_, artifacts)) in runs.iter().enumerate() {
                row[k] = artifacts.metrics[i].eval_metric.unwrap();
            }
            eval_series.push((i, row));
        }
    }
    Ok(CompareOutcome { eval_series, runs })
}

pub const COMPARE_HEADER: &str = "iteration,eigen_reptile,reptile,avg_gradient_dir,avg_weights_dir";

pub fn write_compare_csv(path: &Path, outcome: &CompareOutcome) -> Result<()> {
    let mut out = String::new();
    out.push_str(COMPARE_HEADER);
    out.push('\n');
    for (iteration, row) in &outcome.eval_series {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            iteration,
            fmt17(row[0]),
            fmt17(row[1]),
            fmt17(row[2]),
            fmt17(row[3])
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_compare_directions(config_path: &Path, seed: Option<u64>, threads: usize, output: Option<PathBuf>) -> i32 {
    let resolved = match RunConfig::from_file(config_path).and_then(|c| c.resolve(seed, output)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if resolved.config.task != TaskFamily::Sine {
        eprintln!("error: compare-directions requires the sine task family");
        return 2;
    }
    match compare_directions(&resolved, threads) {
        Ok(outcome) => {
            if let Err(e) = fs::create_dir_all(&resolved.output_dir) {
                eprintln!("error: {e}");
                return 3;
            }
            let path = resolved.output_dir.join("compare_directions.csv");
            if let Err(e) = write_compare_csv(&path, &outcome) {
                eprintln!("error: {e}");
                return 3;
            }
            for (alg, artifacts) in &outcome.runs {
                println!(
                    "{:<18} final grid loss {:.6} (best {:.6} at {})",
                    alg.name(),
                    artifacts.final_metric,
                    artifacts.best_metric,
                    artifacts.best_iteration
                );
            }
            println!("wrote {}", path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
