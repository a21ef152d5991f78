//! Scalar and dense-matrix kernels shared by the numerical modules.
//!
//! Matrices are `nalgebra` dense matrices. `vec` always follows the column
//! stacking convention (entry `c * dim + r` holds `m[(r, c)]`), independently
//! of how the matrix is stored.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{OsbmError, Result};

/// Square real matrix (W-tilde, second-moment matrices).
pub type SquareMatrix = DMatrix<f64>;

/// Symmetric positive semi-definite matrix (posterior covariance).
pub type PsdMatrix = DMatrix<f64>;

/// Below this point `lambda_jj` switches to its Taylor series.
pub const LAMBDA_SERIES_CUTOFF: f64 = 1e-4;

const JITTER_RETRIES: usize = 3;

/// Logistic sigmoid `1 / (1 + exp(-x))`, evaluated on the branch that cannot overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(x))` without forming the sigmoid.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Curvature of the Jaakkola-Jordan bound, `(logistic(xi) - 1/2) / (2 xi)`.
///
/// Uses the identity `logistic(xi) - 1/2 = tanh(xi/2) / 2`, and the series
/// `1/8 - xi^2/96` below [`LAMBDA_SERIES_CUTOFF`].
pub fn lambda_jj(xi: f64) -> f64 {
    debug_assert!(xi > 0.0, "lambda_jj needs a positive argument, got {xi}");
    if xi < LAMBDA_SERIES_CUTOFF {
        0.125 - xi * xi / 96.0
    } else {
        (0.5 * xi).tanh() / (4.0 * xi)
    }
}

/// Column-stacking vectorisation.
pub fn vec(m: &SquareMatrix) -> DVector<f64> {
    let (rows, cols) = m.shape();
    DVector::from_fn(rows * cols, |k, _| m[(k % rows, k / rows)])
}

/// Inverse of [`vec`] for a square matrix of side `dim`.
pub fn unvec(v: &DVector<f64>, dim: usize) -> SquareMatrix {
    assert_eq!(v.len(), dim * dim, "vector length must be dim^2");
    DMatrix::from_fn(dim, dim, |r, c| v[c * dim + r])
}

/// Kronecker product.
pub fn kron(a: &SquareMatrix, b: &SquareMatrix) -> SquareMatrix {
    a.kronecker(b)
}

pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma needs a positive argument, got {x}");
    statrs::function::gamma::digamma(x)
}

pub fn log_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "log_gamma needs a positive argument, got {x}");
    statrs::function::gamma::ln_gamma(x)
}

/// Cholesky factor of a symmetric positive definite matrix, with the jitter
/// that was needed to obtain it.
pub struct PsdFactor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl PsdFactor {
    /// Factorises `m` (symmetrised first). On failure adds
    /// `1e-10 * mean(diag)` to the diagonal and retries, escalating tenfold,
    /// up to three times.
    pub fn new(m: &PsdMatrix) -> Result<Self> {
        let dim = m.nrows();
        if dim == 0 || m.ncols() != dim {
            return Err(OsbmError::InvalidInput(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = (m + m.transpose()) * 0.5;
        if sym.iter().any(|v| !v.is_finite()) {
            return Err(OsbmError::SingularMatrix { dim, jitter: 0.0 });
        }
        if let Some(chol) = Cholesky::new(sym.clone()) {
            return Ok(PsdFactor { chol, jitter: 0.0 });
        }
        let mean_diag = sym.diagonal().mean().abs();
        let mut jitter = 1e-10 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
        for _ in 0..JITTER_RETRIES {
            let mut shifted = sym.clone();
            for k in 0..dim {
                shifted[(k, k)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(PsdFactor { chol, jitter });
            }
            jitter *= 10.0;
        }
        Err(OsbmError::SingularMatrix { dim, jitter: jitter / 10.0 })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> PsdMatrix {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|k| l[(k, k)].ln()).sum::<f64>()
    }
}

/// Solves `m x = rhs` and returns `(x, log|m|)`.
pub fn psd_solve_and_logdet(m: &PsdMatrix, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let factor = PsdFactor::new(m)?;
    Ok((factor.solve(rhs), factor.log_det()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, dim: usize) -> SquareMatrix {
        DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-2.0..2.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> PsdMatrix {
        let a = random_matrix(rng, dim);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5
    }

    /// Plain Gaussian elimination with partial pivoting, used as an oracle.
    fn gauss_solve(m: &SquareMatrix, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
        let n = m.nrows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row: Vec<f64> = (0..n).map(|c| m[(r, c)]).collect();
                row.push(rhs[r]);
                row
            })
            .collect();
        let mut det = 1.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                .unwrap();
            if piv != col {
                a.swap(piv, col);
                det = -det;
            }
            det *= a[col][col];
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
            x[r] = (a[r][n] - s) / a[r][r];
        }
        (DVector::from_vec(x), det.ln())
    }

    #[test]
    fn logistic_reference_points() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(2.5) - 0.9).abs() < 0.03);
        assert!((logistic(-4.5) - 0.01).abs() < 0.002);
        assert_eq!(logistic(700.0), 1.0);
        assert!(logistic(-700.0) > 0.0);
        assert!(logistic(-700.0).is_finite());
    }

    #[test]
    fn log_logistic_matches_log_of_logistic() {
        for &x in &[-30.0, -3.0, -0.2, 0.0, 0.7, 5.0, 30.0] {
            assert_relative_eq!(log_logistic(x), logistic(x).ln(), max_relative = 1e-12);
        }
        assert_relative_eq!(log_logistic(-800.0), -800.0, max_relative = 1e-12);
    }

    #[test]
    fn lambda_reference_points() {
        assert_relative_eq!(lambda_jj(1e-12), 0.125, max_relative = 1e-12);
        let direct = (1.0 / (1.0 + (-1.0f64).exp()) - 0.5) / 2.0;
        assert_relative_eq!(lambda_jj(1.0), direct, max_relative = 1e-12);
        assert!((lambda_jj(1.0) - 0.11552).abs() < 1e-5);
        let direct_small = (1.0 / (1.0 + (-0.001f64).exp()) - 0.5) / 0.002;
        let series = 0.125 - 1e-6 / 96.0 + 1e-12 / 960.0;
        assert!((lambda_jj(0.001) - series).abs() < 1e-15);
        assert!((lambda_jj(0.001) - direct_small).abs() < 1e-8);
    }

    #[test]
    fn lambda_series_and_direct_agree_at_cutoff() {
        let below = 0.125 - LAMBDA_SERIES_CUTOFF.powi(2) / 96.0;
        let above = (0.5 * LAMBDA_SERIES_CUTOFF).tanh() / (4.0 * LAMBDA_SERIES_CUTOFF);
        assert!((below - above).abs() < 1e-15);
    }

    #[test]
    fn lambda_strictly_decreasing() {
        let grid: Vec<f64> = (0..2000).map(|k| 1e-6 * 1.01f64.powi(k)).collect();
        for w in grid.windows(2) {
            assert!(lambda_jj(w[1]) < lambda_jj(w[0]), "not decreasing at {}", w[1]);
        }
    }

    #[test]
    fn vec_follows_column_stacking() {
        let a = DMatrix::from_row_slice(2, 2, &[11.0, 12.0, 21.0, 22.0]);
        assert_eq!(vec(&a).as_slice(), &[11.0, 21.0, 12.0, 22.0]);
        assert_eq!(vec(&DMatrix::identity(2, 2)).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 3);
        assert_eq!(unvec(&vec(&m), 3), m);
    }

    #[test]
    fn kron_matches_elementwise_definition() {
        assert_eq!(kron(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)), DMatrix::identity(4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(kron(&random_matrix(&mut rng, 4), &random_matrix(&mut rng, 4)).nrows(), 16);
        let a = random_matrix(&mut rng, 2);
        let b = random_matrix(&mut rng, 2);
        let k = kron(&a, &b);
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..2 {
                    for s in 0..2 {
                        assert_eq!(k[(i * 2 + r, j * 2 + s)], a[(i, j)] * b[(r, s)]);
                    }
                }
            }
        }
    }

    #[test]
    fn kron_vec_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 1..5 {
            let a = random_matrix(&mut rng, dim);
            let b = random_matrix(&mut rng, dim);
            let m = random_matrix(&mut rng, dim);
            let lhs = kron(&a, &b) * vec(&m);
            let rhs = vec(&(&b * &m * a.transpose()));
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let (a, b, c, d) = (
                random_matrix(&mut rng, 2),
                random_matrix(&mut rng, 3),
                random_matrix(&mut rng, 2),
                random_matrix(&mut rng, 3),
            );
            let lhs = kron(&a, &b) * kron(&c, &d);
            let rhs = kron(&(&a * &c), &(&b * &d));
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn special_functions_against_reference_values() {
        // (x, digamma(x), log_gamma(x)) at 30 digits.
        let table = [
            (0.001, -1000.5755719318103005, 6.9071788853838536825),
            (0.5, -1.9635100260214234794, 0.57236494292470008707),
            (1.0, -0.57721566490153286061, 0.0),
            (2.5, 0.70315664064524318723, 0.28468287047291915963),
            (10.0, 2.2517525890667211076, 12.801827480081469611),
            (123.456, 4.8118293238289853873, 469.60554712992946873),
            (1e6, 13.815510057964190771, 12815504.56914761166),
        ];
        for &(x, dg, lg) in &table {
            assert_relative_eq!(digamma(x), dg, max_relative = 1e-10);
            if lg == 0.0 {
                assert!(log_gamma(x).abs() < 1e-12);
            } else {
                assert_relative_eq!(log_gamma(x), lg, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.5, 2.0, 10.0] {
            assert_relative_eq!(digamma(x + 1.0) - digamma(x), 1.0 / x, max_relative = 1e-10);
        }
    }

    #[test]
    fn psd_solve_small_cases() {
        let (x, ld) = psd_solve_and_logdet(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        assert_eq!(ld, 0.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        let (x, ld) = psd_solve_and_logdet(&m, &DVector::from_vec(vec![2.0, 8.0])).unwrap();
        assert_relative_eq!(x[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(x[1], 1.0, max_relative = 1e-14);
        assert_relative_eq!(ld, 16f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn psd_solve_against_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = random_spd(&mut rng, 5);
            let rhs = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
            let (x, ld) = psd_solve_and_logdet(&m, &rhs).unwrap();
            let (xo, ldo) = gauss_solve(&m, &rhs);
            assert!((&x - &xo).amax() < 1e-9);
            assert!((ld - ldo).abs() < 1e-9);
        }
    }

    #[test]
    fn psd_jitter_rescues_semidefinite() {
        // Rank one matrix: singular, but jitter makes it factorisable.
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let f = PsdFactor::new(&m).unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn psd_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(PsdFactor::new(&m), Err(OsbmError::SingularMatrix { .. })));
    }

    proptest! {
        #[test]
        fn logistic_symmetry(x in -700.0f64..700.0) {
            prop_assert!((logistic(x) + logistic(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn psd_residual_small(seed in 0u64..1000, dim in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_spd(&mut rng, dim);
            let rhs = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
            let (x, _) = psd_solve_and_logdet(&m, &rhs).unwrap();
            let resid = (&m * x - &rhs).amax();
            prop_assert!(resid < 1e-8 * rhs.amax().max(1e-300));
        }
    }
}
