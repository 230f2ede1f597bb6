//! Small symmetric eigendecomposition and recovery of the principal
//! direction of a parameter trajectory from its n x n Gram matrix.
//!
//! The trajectory matrix W is d x n with one column per inner-loop step.
//! Instead of eigendecomposing the d x d scatter matrix W*W^T, we
//! decompose W^T*W and map each eigenvector back through W; both share
//! the same nonzero eigenvalues.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ParamVector;

/// Snapshot matrix: column `j` holds the flattened parameters after inner
/// step `j+1`. Stored column-contiguous so Gram formation streams through
/// memory.
#[derive(Debug, Clone)]
pub struct TrajectoryMatrix {
    data: Vec<f64>,
    d: usize,
    n: usize,
}

impl TrajectoryMatrix {
    pub fn from_columns(columns: &[ParamVector]) -> Result<Self> {
        if columns.len() < 2 {
            return Err(Error::InvalidSpec("a trajectory needs at least 2 snapshots".into()));
        }
        let d = columns[0].len();
        let mut data = Vec::with_capacity(d * columns.len());
        for col in columns {
            if col.len() != d {
                return Err(Error::DimensionMismatch { what: "trajectory column", expected: d, got: col.len() });
            }
            data.extend_from_slice(col.as_slice());
        }
        Ok(TrajectoryMatrix { data, d, n: columns.len() })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn column_vec(&self, j: usize) -> ParamVector {
        ParamVector::new(self.col(j).to_vec())
    }

    /// W^T * W, the n x n Gram matrix of the columns.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i..self.n {
                let dot: f64 = self.col(i).iter().zip(self.col(j)).map(|(a, b)| a * b).sum();
                g[(i, j)] = dot;
                g[(j, i)] = dot;
            }
        }
        g
    }

    /// W * coeffs: linear combination of the snapshot columns.
    pub fn combine(&self, coeffs: &[f64]) -> ParamVector {
        debug_assert_eq!(coeffs.len(), self.n);
        let mut out = vec![0.0; self.d];
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.col(j)) {
                *o += c * w;
            }
        }
        ParamVector::new(out)
    }

    /// d x d scatter matrix W*W^T. Only sensible for small d; the library
    /// itself always goes through the Gram matrix, this exists for
    /// cross-checking the two routes.
    pub fn scatter(&self) -> Matrix {
        let mut s = Matrix::zeros(self.d, self.d);
        for j in 0..self.n {
            let col = self.col(j);
            for r in 0..self.d {
                let v = col[r];
                if v == 0.0 {
                    continue;
                }
                let row = s.row_mut(r);
                for (out, w) in row.iter_mut().zip(col) {
                    *out += v * w;
                }
            }
        }
        s
    }
}

/// Eigenvalues sorted non-increasing with matching orthonormal
/// eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (n <= 64).
///
/// Sweeps until the off-diagonal Frobenius norm drops below 1e-12
/// (relative to the matrix scale for norms above one) or 100 sweeps pass.
pub fn sym_eigen(m: &Matrix) -> Result<EigenDecomposition> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::DimensionMismatch { what: "square matrix", expected: n, got: m.cols() });
    }
    if n > 64 {
        return Err(Error::InvalidSpec(format!("sym_eigen is limited to n <= 64, got {n}")));
    }
    let mut max_asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_asymmetry: max_asym });
    }

    let mut a = m.clone();
    // fold in symmetry so both triangles agree exactly
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);

    let scale: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = 1e-12 * scale.max(1.0);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < target {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for j in 0..n {
                    if j != p && j != q {
                        let ajp = a[(j, p)];
                        let ajq = a[(j, q)];
                        a[(j, p)] = c * ajp - s * ajq;
                        a[(p, j)] = a[(j, p)];
                        a[(j, q)] = s * ajp + c * ajq;
                        a[(q, j)] = a[(j, q)];
                    }
                }
                for j in 0..n {
                    let vjp = v[(j, p)];
                    let vjq = v[(j, q)];
                    v[(j, p)] = c * vjp - s * vjq;
                    v[(j, q)] = s * vjp + c * vjq;
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&a) >= target {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS, off_norm: off_diagonal_norm(&a) });
    }

    // deterministic non-increasing sort; stable so exact ties keep their
    // rotation order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[(r, new_col)] = v[(r, old_col)];
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// Principal direction of one task's (centered) trajectory.
#[derive(Debug, Clone)]
pub struct MainDirection {
    /// Unit direction in parameter space; sign is unspecified at this
    /// layer and fixed against the mean motion by the meta module.
    pub e: ParamVector,
    /// Largest eigenvalue of the Gram matrix.
    pub lambda1: f64,
    /// Share of the largest eigenvalue in the (clamped) spectrum sum.
    pub zeta: f64,
    /// Full Gram spectrum, clamped at zero, sorted non-increasing.
    pub spectrum: Vec<f64>,
}

/// Subtract the column mean from every snapshot; returns the centered
/// matrix and the mean.
pub fn mean_center(w: &TrajectoryMatrix) -> (TrajectoryMatrix, ParamVector) {
    let d = w.d();
    let n = w.n();
    let mut mean = vec![0.0; d];
    for j in 0..n {
        for (m, v) in mean.iter_mut().zip(w.col(j)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut data = Vec::with_capacity(d * n);
    for j in 0..n {
        data.extend(w.col(j).iter().zip(&mean).map(|(v, m)| v - m));
    }
    (TrajectoryMatrix { data, d, n }, ParamVector::new(mean))
}

/// Eigenvalues below this are treated as no usable variance.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Gram-trick principal direction of an already-centered trajectory.
pub fn principal_direction(w_centered: &TrajectoryMatrix) -> Result<MainDirection> {
    let gram = w_centered.gram();
    let eig = sym_eigen(&gram)?;
    let spectrum: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < -1e-9 {
                log::warn!("gram eigenvalue {l:.3e} below the PSD clamp tolerance");
            }
            l.max(0.0)
        })
        .collect();
    let lambda1 = spectrum[0];
    if lambda1 < DEGENERACY_EPS {
        return Err(Error::DegenerateTrajectory);
    }
    if spectrum.len() > 1 {
        let gap = (spectrum[0] - spectrum[1]).abs();
        if gap < 1e-9 * spectrum[0] {
            log::warn!(
                "top Gram eigenvalues nearly tied ({:.6e} vs {:.6e}); direction chosen by sort order",
                spectrum[0],
                spectrum[1]
            );
        }
    }
    let coeffs = eig.eigenvectors.col(0);
    let e = w_centered
        .combine(&coeffs)
        .normalized()
        .ok_or(Error::DegenerateTrajectory)?;
    let total: f64 = spectrum.iter().sum();
    let zeta = (lambda1 / total).clamp(0.0, 1.0);
    Ok(MainDirection { e, lambda1, zeta, spectrum })
}

/// Sign-invariant angle between two directions, in [0, pi/2].
///
/// Uses 2*atan2(|a-b|, |a+b|) on unit vectors, which keeps full precision
/// for tiny angles where acos of the dot product bottoms out near 2e-8.
pub fn principal_angle(a: &ParamVector, b: &ParamVector) -> f64 {
    let (Some(ua), Some(ub)) = (a.normalized(), b.normalized()) else {
        return std::f64::consts::FRAC_PI_2;
    };
    let sign = if ua.dot(&ub) < 0.0 { -1.0 } else { 1.0 };
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in ua.as_slice().iter().zip(ub.as_slice()) {
        let y = sign * y;
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec())
    }

    fn random_trajectory(d: usize, n: usize, seed: u64) -> TrajectoryMatrix {
        let mut rng = crate::seeds::rng_from(&[seed, 0x7A11]);
        let cols: Vec<ParamVector> = (0..n)
            .map(|_| ParamVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        TrajectoryMatrix::from_columns(&cols).unwrap()
    }

    /// Orthonormal matrix from the eigenvectors of a random symmetric matrix.
    fn random_orthogonal(d: usize, seed: u64) -> Matrix {
        let mut rng = crate::seeds::rng_from(&[seed, 0x0410]);
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = rng.gen_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        sym_eigen(&m).unwrap().eigenvectors
    }

    #[test]
    fn mean_center_examples() {
        let w = TrajectoryMatrix::from_columns(&[pv(&[0.0, 0.0]), pv(&[2.0, 0.0])]).unwrap();
        let (c, mean) = mean_center(&w);
        assert_eq!(c.col(0), &[-1.0, 0.0]);
        assert_eq!(c.col(1), &[1.0, 0.0]);
        assert_eq!(mean.as_slice(), &[1.0, 0.0]);

        // centering a centered matrix changes nothing
        let (cc, mean2) = mean_center(&c);
        assert_eq!(cc.col(0), c.col(0));
        assert_eq!(cc.col(1), c.col(1));
        assert_eq!(mean2.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_center_columns_sum_to_zero() {
        let w = random_trajectory(17, 6, 3);
        let (c, _) = mean_center(&w);
        for r in 0..c.d() {
            let sum: f64 = (0..c.n()).map(|j| c.col(j)[r]).sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn sym_eigen_diagonal() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let eig = sym_eigen(&m).unwrap();
        assert_eq!(eig.eigenvalues, vec![2.0, 1.0]);
        assert!((eig.eigenvectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(eig.eigenvectors[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn sym_eigen_rank_one() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let eig = sym_eigen(&m).unwrap();
        assert!((eig.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!(eig.eigenvalues[1].abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        let top = eig.eigenvectors.col(0);
        assert!((top[0].abs() - inv_sqrt2).abs() < 1e-12);
        assert!((top[1] - top[0]).abs() < 1e-12); // same sign components
    }

    #[test]
    fn sym_eigen_reconstructs_and_is_orthonormal() {
        let mut rng = crate::seeds::rng_from(&[5, 0xE16]);
        for trial in 0..10 {
            let n = 8;
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = rng.gen_range(-2.0..2.0);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            let eig = sym_eigen(&m).unwrap();
            // reconstruction P L P^T
            let mut pl = eig.eigenvectors.clone();
            for r in 0..n {
                for c in 0..n {
                    pl[(r, c)] *= eig.eigenvalues[c];
                }
            }
            let rec = pl.matmul(&eig.eigenvectors.transpose()).unwrap();
            assert!(rec.max_abs_diff(&m) < 1e-10, "trial {trial}");
            // orthonormal columns
            let gram = eig.eigenvectors.transpose().matmul(&eig.eigenvectors).unwrap();
            assert!(gram.max_abs_diff(&Matrix::identity(n)) < 1e-10, "trial {trial}");
            // sorted non-increasing
            for k in 1..n {
                assert!(eig.eigenvalues[k - 1] >= eig.eigenvalues[k]);
            }
        }
    }

    #[test]
    fn sym_eigen_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigen(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn principal_direction_collinear() {
        let w = TrajectoryMatrix::from_columns(&[pv(&[-1.0, 0.0]), pv(&[1.0, 0.0])]).unwrap();
        let dir = principal_direction(&w).unwrap();
        assert!((dir.e.as_slice()[0].abs() - 1.0).abs() < 1e-12);
        assert!(dir.e.as_slice()[1].abs() < 1e-12);
        assert!((dir.zeta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn principal_direction_matches_direct_scatter() {
        for seed in 0..5u64 {
            let w = random_trajectory(20, 6, 100 + seed);
            let (c, _) = mean_center(&w);
            let dir = principal_direction(&c).unwrap();
            let scatter_eig = sym_eigen(&c.scatter()).unwrap();
            let direct = ParamVector::new(scatter_eig.eigenvectors.col(0));
            let angle = principal_angle(&dir.e, &direct);
            assert!(angle < 1e-8, "seed {seed}: angle {angle:.3e}");
            assert!((dir.lambda1 - scatter_eig.eigenvalues[0]).abs() < 1e-8 * dir.lambda1.max(1.0));
        }
    }

    #[test]
    fn zeta_is_a_share() {
        for seed in 0..20u64 {
            let w = random_trajectory(12, 5, 200 + seed);
            let (c, _) = mean_center(&w);
            let dir = principal_direction(&c).unwrap();
            assert!((0.0..=1.0).contains(&dir.zeta));
            for k in 1..dir.spectrum.len() {
                assert!(dir.spectrum[k - 1] >= dir.spectrum[k]);
                assert!(dir.spectrum[k] >= 0.0);
            }
        }
    }

    #[test]
    fn degenerate_trajectory_detected() {
        let w = TrajectoryMatrix::from_columns(&[pv(&[0.0, 0.0]), pv(&[0.0, 0.0]), pv(&[0.0, 0.0])]).unwrap();
        assert!(matches!(principal_direction(&w), Err(Error::DegenerateTrajectory)));
    }

    #[test]
    fn isotropic_shift_preserves_eigenvectors() {
        // C and C + s*I share eigenvectors; eigenvalues shift by exactly s.
        let mut rng = crate::seeds::rng_from(&[9, 0x51F7]);
        for trial in 0..5 {
            let n = 5;
            let q = random_orthogonal(n, 300 + trial);
            let mut lambdas: Vec<f64> = (0..n).map(|k| 0.5 + k as f64 + rng.gen_range(0.0..0.3)).collect();
            lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut c = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += q[(i, k)] * lambdas[k] * q[(j, k)];
                    }
                    c[(i, j)] = acc;
                }
            }
            let sigma2 = 0.37;
            let mut shifted = c.clone();
            for i in 0..n {
                shifted[(i, i)] += sigma2;
            }
            let e1 = sym_eigen(&c).unwrap();
            let e2 = sym_eigen(&shifted).unwrap();
            for k in 0..n {
                let a = ParamVector::new(e1.eigenvectors.col(k));
                let b = ParamVector::new(e2.eigenvectors.col(k));
                assert!(principal_angle(&a, &b) < 1e-8, "trial {trial} vec {k}");
                assert!((e2.eigenvalues[k] - e1.eigenvalues[k] - sigma2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rotation_equivariance() {
        for seed in 0..5u64 {
            let d = 10;
            let w = random_trajectory(d, 6, 400 + seed);
            let (c, _) = mean_center(&w);
            let dir = principal_direction(&c).unwrap();

            let q = random_orthogonal(d, 500 + seed);
            let rotated_cols: Vec<ParamVector> = (0..c.n())
                .map(|j| {
                    let col = c.col(j);
                    ParamVector::new((0..d).map(|r| (0..d).map(|k| q[(r, k)] * col[k]).sum()).collect())
                })
                .collect();
            let rotated = TrajectoryMatrix::from_columns(&rotated_cols).unwrap();
            let dir_q = principal_direction(&rotated).unwrap();

            let qe =
                ParamVector::new((0..d).map(|r| (0..d).map(|k| q[(r, k)] * dir.e.as_slice()[k]).sum()).collect());
            assert!(principal_angle(&dir_q.e, &qe) < 1e-6, "seed {seed}");
            assert!((dir_q.zeta - dir.zeta).abs() < 1e-9);
            assert!((dir_q.lambda1 - dir.lambda1).abs() < 1e-9 * dir.lambda1.max(1.0));
        }
    }

    #[test]
    fn gram_trick_matches_scatter_across_shapes() {
        let mut rng = crate::seeds::rng_from(&[13, 0x6140]);
        for trial in 0..20u64 {
            let d = rng.gen_range(8..=64);
            let n = rng.gen_range(3..=10);
            let w = random_trajectory(d, n, 600 + trial);
            let (c, _) = mean_center(&w);
            let dir = principal_direction(&c).unwrap();
            let direct = sym_eigen(&c.scatter()).unwrap();
            let angle = principal_angle(&dir.e, &ParamVector::new(direct.eigenvectors.col(0)));
            assert!(angle < 1e-6, "trial {trial} d={d} n={n}: {angle:.3e}");
        }
    }
}
