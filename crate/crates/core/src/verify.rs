//! Numerical verification of the paper-level claims: the isotropic-shift
//! eigenvector invariance, the discard-ratio inequality, the SNR view of
//! spectrum truncation, and the finite-sample noise-robustness companion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, TrajectoryMatrix};
use crate::matrix::Matrix;
use crate::nn::ParamVector;
use crate::seeds::{self, standard_normal};

#[derive(Debug, Clone, Copy)]
pub struct IsotropicShiftReport {
    /// Largest principal angle between matched eigenvectors of C and
    /// C + sigma2*I.
    pub max_eigvec_angle: f64,
    /// Largest |shifted eigenvalue - (original + sigma2)|.
    pub max_eigenvalue_shift_error: f64,
}

/// Eigendecompose C and C + sigma2*I and compare. Matrices with an
/// eigenvalue gap below 1e-6 are rejected as near-degenerate: the
/// eigenvector pairing is not well defined there.
pub fn check_isotropic_shift(c: &Matrix, sigma2: f64) -> Result<IsotropicShiftReport> {
    if sigma2 <= 0.0 {
        return Err(Error::Config("sigma2 must be positive".into()));
    }
    let base = linalg::sym_eigen(c)?;
    for pair in base.eigenvalues.windows(2) {
        if (pair[0] - pair[1]).abs() <= 1e-6 {
            return Err(Error::InvalidSpec(format!(
                "near-degenerate spectrum: eigenvalue gap {:.3e}",
                (pair[0] - pair[1]).abs()
            )));
        }
    }
    let mut shifted = c.clone();
    for i in 0..c.rows() {
        shifted[(i, i)] += sigma2;
    }
    let moved = linalg::sym_eigen(&shifted)?;
    let mut max_angle = 0.0_f64;
    let mut max_shift_err = 0.0_f64;
    for k in 0..base.eigenvalues.len() {
        let a = ParamVector::new(base.eigenvectors.col(k));
        let b = ParamVector::new(moved.eigenvectors.col(k));
        max_angle = max_angle.max(linalg::principal_angle(&a, &b));
        max_shift_err = max_shift_err.max((moved.eigenvalues[k] - base.eigenvalues[k] - sigma2).abs());
    }
    Ok(IsotropicShiftReport { max_eigvec_angle: max_angle, max_eigenvalue_shift_error: max_shift_err })
}

/// The discard-ratio algebra for one (lambda, lambda_o, xi) triple.
#[derive(Debug, Clone, Copy)]
pub struct DiscardCheck {
    pub lambda: f64,
    pub lambda_o: f64,
    pub xi: f64,
    /// lambda_o / lambda
    pub before_ratio: f64,
    /// (lambda_o - xi) / (lambda - xi)
    pub after_ratio: f64,
    /// xi * (lambda - lambda_o) / (lambda * (lambda - xi))
    pub diff: f64,
    /// |before - after - diff|
    pub identity_error: f64,
    /// Strict regime lambda > lambda_o > xi > 0 holds.
    pub valid: bool,
}

/// Evaluate the before/after discard ratios and the closed-form
/// difference. Outside the strict regime the numbers are still reported
/// with `valid` cleared.
pub fn check_discard_ratio(lambda: f64, lambda_o: f64, xi: f64) -> DiscardCheck {
    let before = lambda_o / lambda;
    let after = (lambda_o - xi) / (lambda - xi);
    let diff = xi * (lambda - lambda_o) / (lambda * (lambda - xi));
    DiscardCheck {
        lambda,
        lambda_o,
        xi,
        before_ratio: before,
        after_ratio: after,
        diff,
        identity_error: ((before - after) - diff).abs(),
        valid: lambda > lambda_o && lambda_o > xi && xi > 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct SnrReport {
    /// Share of the top eigenvalue in the centered Gram spectrum.
    pub zeta: f64,
    /// Share kept by truncating to the top eigen-direction (equals zeta).
    pub retained_share: f64,
    /// Cumulative share of the discarded tail.
    pub tail_share: f64,
    /// Full clamped spectrum, non-increasing.
    pub spectrum: Vec<f64>,
    /// Top direction of the full trajectory.
    pub top_direction: ParamVector,
    /// Angle between the full top direction and the one computed without
    /// the planted noise columns (when at least two columns remain).
    pub angle_to_clean: Option<f64>,
}

/// Spectrum-truncation view: how much of the trajectory variance the top
/// direction keeps, and how far planted noise columns pull it off the
/// clean direction.
pub fn snr_truncation_demo(w: &TrajectoryMatrix, planted_noise_columns: &[usize]) -> Result<SnrReport> {
    let (centered, _) = linalg::mean_center(w);
    let dir = linalg::principal_direction(&centered)?;
    let total: f64 = dir.spectrum.iter().sum();
    let zeta = dir.zeta;
    let tail_share = ((total - dir.lambda1) / total).max(0.0);

    let mut angle_to_clean = None;
    if !planted_noise_columns.is_empty() {
        let clean_cols: Vec<ParamVector> = (0..w.n())
            .filter(|j| !planted_noise_columns.contains(j))
            .map(|j| w.column_vec(j))
            .collect();
        if clean_cols.len() >= 2 {
            let clean = TrajectoryMatrix::from_columns(&clean_cols)?;
            let (clean_centered, _) = linalg::mean_center(&clean);
            if let Ok(clean_dir) = linalg::principal_direction(&clean_centered) {
                angle_to_clean = Some(linalg::principal_angle(&dir.e, &clean_dir.e));
            }
        }
    }
    Ok(SnrReport {
        zeta,
        retained_share: zeta,
        tail_share,
        spectrum: dir.spectrum,
        top_direction: dir.e,
        angle_to_clean,
    })
}

/// Drift-plus-wiggle trajectory: a dominant random direction walked in
/// n steps with small isotropic perturbations. The shape gradient descent
/// produces, with a well-separated top eigenvalue.
pub fn random_smooth_trajectory(d: usize, n: usize, seed: u64) -> TrajectoryMatrix {
    let mut rng = seeds::rng_from(&[seed, 0x7264_7A11]);
    let mut drift: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
    let norm = drift.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut drift {
        *v /= norm;
    }
    let mut current: Vec<f64> = (0..d).map(|_| 0.5 * standard_normal(&mut rng)).collect();
    let mut cols = Vec::with_capacity(n);
    for _ in 0..n {
        let step = rng.gen_range(0.8..1.2);
        for (c, dr) in current.iter_mut().zip(&drift) {
            *c += step * dr + 0.15 * standard_normal(&mut rng);
        }
        cols.push(ParamVector::new(current.clone()));
    }
    TrajectoryMatrix::from_columns(&cols).expect("n >= 2")
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseAngleReport {
    pub trials: usize,
    /// Mean angle between the clean and perturbed principal directions.
    pub mean_angle_eigen: f64,
    /// Mean angle between the clean and perturbed last-minus-first
    /// (Reptile) directions.
    pub mean_angle_reptile: f64,
}

/// Perturb every snapshot of `trials` random smooth trajectories with
/// i.i.d. Gaussian noise of standard deviation `sigma` times the
/// trajectory's own centered-snapshot standard deviation, and measure how
/// far the two update directions move.
pub fn empirical_theorem1(trials: usize, d: usize, n: usize, sigma: f64, seed: u64) -> NoiseAngleReport {
    let mut sum_eigen = 0.0;
    let mut sum_reptile = 0.0;
    let mut done = 0usize;
    for trial in 0..trials {
        let w = random_smooth_trajectory(d, n, seeds::mix(&[seed, trial as u64]));
        let (centered, _) = linalg::mean_center(&w);
        let Ok(clean_dir) = linalg::principal_direction(&centered) else {
            continue;
        };
        let mut reptile_clean = w.column_vec(n - 1);
        reptile_clean.add_scaled(&w.column_vec(0), -1.0);

        // snapshot scale for the relative noise level
        let mut sq = 0.0;
        for j in 0..n {
            sq += centered.col(j).iter().map(|v| v * v).sum::<f64>();
        }
        let snapshot_std = (sq / (d * n) as f64).sqrt();
        let noise_sd = sigma * snapshot_std;

        let mut rng = seeds::rng_from(&[seed, trial as u64, 0x4015E]);
        let noisy_cols: Vec<ParamVector> = (0..n)
            .map(|j| {
                ParamVector::new(w.col(j).iter().map(|v| v + noise_sd * standard_normal(&mut rng)).collect())
            })
            .collect();
        let noisy = TrajectoryMatrix::from_columns(&noisy_cols).expect("n >= 2");
        let (noisy_centered, _) = linalg::mean_center(&noisy);
        let Ok(noisy_dir) = linalg::principal_direction(&noisy_centered) else {
            continue;
        };
        let mut reptile_noisy = noisy.column_vec(n - 1);
        reptile_noisy.add_scaled(&noisy.column_vec(0), -1.0);

        sum_eigen += linalg::principal_angle(&clean_dir.e, &noisy_dir.e);
        sum_reptile += linalg::principal_angle(&reptile_clean, &reptile_noisy);
        done += 1;
    }
    NoiseAngleReport {
        trials: done,
        mean_angle_eigen: sum_eigen / done.max(1) as f64,
        mean_angle_reptile: sum_reptile / done.max(1) as f64,
    }
}

/// Random PSD matrix with eigenvalue gaps of at least ~0.6, for the
/// isotropic-shift checks.
pub fn random_distinct_psd(size: usize, seed: u64) -> Matrix {
    let mut rng = seeds::rng_from(&[seed, 0x5D5D]);
    // orthogonal basis from a random symmetric eigenproblem
    let mut sym = Matrix::zeros(size, size);
    for i in 0..size {
        for j in i..size {
            let v = rng.gen_range(-1.0..1.0);
            sym[(i, j)] = v;
            sym[(j, i)] = v;
        }
    }
    let q = linalg::sym_eigen(&sym).expect("symmetric by construction").eigenvectors;
    let lambdas: Vec<f64> = (0..size).map(|k| 0.5 + k as f64 + rng.gen_range(0.0..0.4)).collect();
    let mut c = Matrix::zeros(size, size);
    for i in 0..size {
        for j in i..size {
            let mut acc = 0.0;
            for k in 0..size {
                acc += q[(i, k)] * lambdas[k] * q[(j, k)];
            }
            c[(i, j)] = acc;
            c[(j, i)] = acc;
        }
    }
    c
}
