//! Individual VBEM updates.
//!
//! Notation: `k = q + 1` is the side of W-tilde, `d = k * k` the length of
//! vec(W-tilde). Every sum over vertex pairs runs over ordered pairs `i != j`.

use nalgebra::{DMatrix, DVector};

use super::VariationalState;
use crate::error::Result;
use crate::mathkit::{digamma, lambda_jj, logistic, unvec, PsdFactor, PsdMatrix, SquareMatrix};
use crate::model::{AdjacencyMatrix, Hyperpriors};

/// Lower clip for membership probabilities.
pub const TAU_MIN: f64 = 1e-10;

/// Floor applied to the local variational parameters.
pub const XI_FLOOR: f64 = 1e-8;

/// `(tau_1, ..., tau_q, 1)`.
pub fn tau_tilde(tau_row: &[f64]) -> DVector<f64> {
    let q = tau_row.len();
    DVector::from_fn(q + 1, |r, _| if r == q { 1.0 } else { tau_row[r] })
}

/// Second moment `E[Z~ Z~^T]` of an augmented membership vector whose
/// coordinates are independent Bernoulli(tau). The diagonal carries `tau`,
/// not `tau^2`.
pub fn e_tilde(tau_row: &[f64]) -> SquareMatrix {
    let q = tau_row.len();
    let t = tau_tilde(tau_row);
    let mut e = &t * t.transpose();
    for c in 0..q {
        e[(c, c)] = tau_row[c];
    }
    e
}

pub fn tau_row(tau: &DMatrix<f64>, i: usize) -> Vec<f64> {
    tau.row(i).iter().copied().collect()
}

pub fn e_tildes(tau: &DMatrix<f64>) -> Vec<SquareMatrix> {
    (0..tau.nrows()).map(|i| e_tilde(&tau_row(tau, i))).collect()
}

pub fn tau_tildes(tau: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..tau.nrows()).map(|i| tau_tilde(&tau_row(tau, i))).collect()
}

fn add_scaled(dst: &mut DMatrix<f64>, w: f64, src: &DMatrix<f64>) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += w * s;
    }
}

/// `lambda_jj` applied to every off-diagonal entry; the diagonal is zero.
pub fn lambda_matrix(xi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xi.nrows();
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { lambda_jj(xi[(i, j)]) })
}

/// Full second moment `E[vec(W) vec(W)^T] = Sigma_N + m m^T`.
pub fn second_moment(sigma_n: &PsdMatrix, w_n_vec: &DVector<f64>) -> DMatrix<f64> {
    sigma_n + w_n_vec * w_n_vec.transpose()
}

/// `E[W S W^T]` for a fixed symmetric `k x k` matrix `S`, where `moment` is
/// the second moment of vec(W).
pub fn outer_moment(moment: &DMatrix<f64>, s: &SquareMatrix) -> SquareMatrix {
    let k = s.nrows();
    let d = k * k;
    let data = moment.as_slice();
    let weights = s.as_slice();
    let mut out = DMatrix::zeros(k, k);
    let acc = out.as_mut_slice();
    for u in 0..k {
        let out_col = &mut acc[u * k..(u + 1) * k];
        for t in 0..k {
            let col = &data[(t * k + u) * d..(t * k + u + 1) * d];
            for (sidx, &weight) in weights[t * k..(t + 1) * k].iter().enumerate() {
                if weight == 0.0 {
                    continue;
                }
                for (o, b) in out_col[u..].iter_mut().zip(&col[sidx * k + u..(sidx + 1) * k]) {
                    *o += weight * b;
                }
            }
        }
    }
    mirror_lower(acc, k);
    out
}

/// Copies the lower triangle of a column-major `k x k` buffer to the upper.
fn mirror_lower(acc: &mut [f64], k: usize) {
    for u in 0..k {
        for r in u + 1..k {
            acc[r * k + u] = acc[u * k + r];
        }
    }
}

/// `E[W^T S W]` for a fixed symmetric `k x k` matrix `S`.
pub fn inner_moment(moment: &DMatrix<f64>, s: &SquareMatrix) -> SquareMatrix {
    let k = s.nrows();
    let d = k * k;
    let data = moment.as_slice();
    let weights = s.as_slice();
    let mut out = DMatrix::zeros(k, k);
    let acc = out.as_mut_slice();
    for l in 0..k {
        for t in 0..k {
            let col = &data[(l * k + t) * d..(l * k + t + 1) * d];
            let w_col = &weights[t * k..(t + 1) * k];
            for c in l..k {
                let dot: f64 = col[c * k..(c + 1) * k].iter().zip(w_col).map(|(a, b)| a * b).sum();
                acc[l * k + c] += dot;
            }
        }
    }
    mirror_lower(acc, k);
    out
}

/// Posterior of the class probabilities: `(eta_N, zeta_N)`.
pub fn m_step_alpha(tau: &DMatrix<f64>, priors: &Hyperpriors) -> (Vec<f64>, Vec<f64>) {
    let n = tau.nrows() as f64;
    (0..tau.ncols())
        .map(|c| {
            let s: f64 = tau.column(c).sum();
            (priors.eta0[c] + s, priors.zeta0[c] + n - s)
        })
        .unzip()
}

/// Gaussian posterior of vec(W-tilde): returns `(mean, covariance)`.
///
/// Precision `(a_N/b_N) I + 2 sum lambda(xi_ij) (E_j ⊗ E_i)`, mean
/// `Sigma_N (sum (X_ij - 1/2) tau~_j ⊗ tau~_i + (a_N/b_N) W_0)`.
pub fn m_step_w(
    x: &AdjacencyMatrix,
    tau: &DMatrix<f64>,
    e_tildes: &[SquareMatrix],
    xi: &DMatrix<f64>,
    a_n: f64,
    b_n: f64,
    priors: &Hyperpriors,
) -> Result<(DVector<f64>, PsdMatrix)> {
    let precision = precision_matrix(x, tau, e_tildes, xi, a_n, b_n);
    let rhs = precision_rhs(x, tau, a_n / b_n, priors);
    let factor = PsdFactor::new(&precision)?;
    Ok((factor.solve(&rhs), factor.inverse()))
}

/// Posterior precision of vec(W-tilde).
pub fn precision_matrix(
    x: &AdjacencyMatrix,
    tau: &DMatrix<f64>,
    e_tildes: &[SquareMatrix],
    xi: &DMatrix<f64>,
    a_n: f64,
    b_n: f64,
) -> DMatrix<f64> {
    let n = x.n();
    let k = tau.ncols() + 1;
    let d = k * k;
    let lam = lambda_matrix(xi);
    let mut precision = DMatrix::identity(d, d) * (a_n / b_n);
    let mut t = DMatrix::zeros(k, k);
    for j in 0..n {
        t.fill(0.0);
        for i in 0..n {
            if i != j {
                add_scaled(&mut t, lam[(i, j)], &e_tildes[i]);
            }
        }
        let ej = e_tildes[j].as_slice();
        let tv = t.as_slice();
        let data = precision.as_mut_slice();
        // (E_j ⊗ T)[s k + r, t' k + u] = E_j[s, t'] T[r, u]; column-major walk.
        for tp in 0..k {
            for uc in 0..k {
                let col = &mut data[(tp * k + uc) * d..(tp * k + uc + 1) * d];
                let t_col = &tv[uc * k..(uc + 1) * k];
                for s in 0..k {
                    let e = 2.0 * ej[tp * k + s];
                    if e == 0.0 {
                        continue;
                    }
                    for (p, tr) in col[s * k..(s + 1) * k].iter_mut().zip(t_col) {
                        *p += e * tr;
                    }
                }
            }
        }
    }
    precision
}

fn precision_rhs(x: &AdjacencyMatrix, tau: &DMatrix<f64>, beta_mean: f64, priors: &Hyperpriors) -> DVector<f64> {
    let n = x.n();
    let k = tau.ncols() + 1;
    let tt = tau_tildes(tau);
    let mut rhs = DVector::from_column_slice(&priors.w0_vec) * beta_mean;
    for j in 0..n {
        let mut y = DVector::zeros(k);
        for i in 0..n {
            if i != j {
                y.axpy(x.value(i, j) - 0.5, &tt[i], 1.0);
            }
        }
        for s in 0..k {
            for r in 0..k {
                rhs[s * k + r] += tt[j][s] * y[r];
            }
        }
    }
    rhs
}

/// Gamma posterior of the prior precision: `(a_N, b_N)`.
pub fn m_step_beta(w_n_vec: &DVector<f64>, sigma_n: &PsdMatrix, q: usize, priors: &Hyperpriors) -> (f64, f64) {
    let d = ((q + 1) * (q + 1)) as f64;
    let centred = w_n_vec - DVector::from_column_slice(&priors.w0_vec);
    let a_n = priors.a0 + d / 2.0;
    let b_n = priors.b0 + 0.5 * sigma_n.trace() + 0.5 * centred.norm_squared();
    (a_n, b_n)
}

/// Second-moment blocks `(Sigma_ql, Sigma'_ql)` with 0-based `q, l < k`:
/// `Sigma_ql = E[W_{.q} W_{.l}^T]` (columns) and
/// `Sigma'_ql = E[W_{q.}^T W_{l.}]` (rows).
pub fn sigma_blocks(sigma_n: &PsdMatrix, w_n_vec: &DVector<f64>, q: usize, l: usize) -> (SquareMatrix, SquareMatrix) {
    let d = w_n_vec.len();
    let k = (d as f64).sqrt().round() as usize;
    assert!(q < k && l < k, "block index out of range");
    let m = second_moment(sigma_n, w_n_vec);
    let cols = DMatrix::from_fn(k, k, |r, s| m[(q * k + r, l * k + s)]);
    let rows = DMatrix::from_fn(k, k, |r, s| m[(r * k + q, s * k + l)]);
    (cols, rows)
}

/// Optimal local parameters `xi_ij = sqrt(Tr((Sigma_N + m m^T)(E_j ⊗ E_i)))`,
/// floored at [`XI_FLOOR`]. The diagonal is left at zero.
pub fn xi_step(state: &VariationalState, e_tildes: &[SquareMatrix]) -> DMatrix<f64> {
    let n = e_tildes.len();
    let moment = second_moment(&state.sigma_n, &state.w_n_vec);
    let a: Vec<SquareMatrix> = e_tildes.iter().map(|e| outer_moment(&moment, e)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            e_tildes[i].dot(&a[j]).max(0.0).sqrt().max(XI_FLOOR)
        }
    })
}

/// `E[a_ij^2]` for all ordered pairs (diagonal zero).
pub fn expected_squared_logits(moment: &DMatrix<f64>, e_tildes: &[SquareMatrix]) -> DMatrix<f64> {
    let n = e_tildes.len();
    let a: Vec<SquareMatrix> = e_tildes.iter().map(|e| outer_moment(moment, e)).collect();
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { e_tildes[i].dot(&a[j]) })
}

/// Diagnostics of an E-step run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepReport {
    pub sweeps: usize,
    pub max_delta: f64,
    pub converged: bool,
}

/// Coordinate ascent on the membership probabilities.
///
/// Vertices are swept in index order and classes in order, each `tau_iq`
/// being replaced in place by its exact coordinate optimum. Sweeps repeat
/// until the largest change falls below `tol` or `max_sweeps` is reached.
pub fn e_step_tau(x: &AdjacencyMatrix, state: &mut VariationalState, tol: f64, max_sweeps: usize) -> EStepReport {
    let n = x.n();
    let q = state.q();
    let k = q + 1;
    let moment = second_moment(&state.sigma_n, &state.w_n_vec);
    let w_mean = unvec(&state.w_n_vec, k);
    let w_mean_t = w_mean.transpose();
    let lam = lambda_matrix(&state.xi);
    let log_odds_prior: Vec<f64> = (0..q).map(|c| digamma(state.eta_n[c]) - digamma(state.zeta_n[c])).collect();

    // Row-major augmented memberships; the second moment of row j is
    // t_j t_j^T with t_j on the diagonal, so it is accumulated directly.
    let mut t = vec![1.0; n * k];
    for i in 0..n {
        for c in 0..q {
            t[i * k + c] = state.tau[(i, c)];
        }
    }
    let lam_in = lam.as_slice();
    let lam_t = lam.transpose();
    let lam_out = lam_t.as_slice();

    let mut report = EStepReport { sweeps: 0, max_delta: f64::INFINITY, converged: false };
    let mut so = vec![0.0; k * k];
    let mut si = vec![0.0; k * k];
    let mut y_out = DVector::zeros(k);
    let mut y_in = DVector::zeros(k);
    for _ in 0..max_sweeps {
        let mut max_delta: f64 = 0.0;
        for i in 0..n {
            so.fill(0.0);
            si.fill(0.0);
            y_out.fill(0.0);
            y_in.fill(0.0);
            let lo_row = &lam_out[i * n..(i + 1) * n];
            let li_row = &lam_in[i * n..(i + 1) * n];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (lo, li) = (lo_row[j], li_row[j]);
                let (xo, xin) = (x.value(i, j) - 0.5, x.value(j, i) - 0.5);
                let row = &t[j * k..(j + 1) * k];
                for a in 0..k {
                    let ra = row[a];
                    y_out[a] += xo * ra;
                    y_in[a] += xin * ra;
                    let (po, pi) = (lo * ra, li * ra);
                    so[a * k + a] += po;
                    si[a * k + a] += pi;
                    for b in a + 1..k {
                        so[a * k + b] += po * row[b];
                        si[a * k + b] += pi * row[b];
                    }
                }
            }
            for a in 0..k {
                for b in a + 1..k {
                    so[b * k + a] = so[a * k + b];
                    si[b * k + a] = si[a * k + b];
                }
            }
            let s_out = DMatrix::from_column_slice(k, k, &so);
            let s_in = DMatrix::from_column_slice(k, k, &si);
            let lin = &w_mean * &y_out + &w_mean_t * &y_in;
            let quad = outer_moment(&moment, &s_out) + inner_moment(&moment, &s_in);
            for c in 0..q {
                let mut penalty = quad[(c, c)];
                for l in 0..k {
                    if l != c {
                        penalty += 2.0 * t[i * k + l] * quad[(c, l)];
                    }
                }
                let logit = log_odds_prior[c] + lin[c] - penalty;
                let new = logistic(logit).clamp(TAU_MIN, 1.0 - TAU_MIN);
                max_delta = max_delta.max((new - state.tau[(i, c)]).abs());
                state.tau[(i, c)] = new;
                t[i * k + c] = new;
            }
        }
        report.sweeps += 1;
        report.max_delta = max_delta;
        if max_delta < tol {
            report.converged = true;
            break;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkit::{kron, vec};
    use crate::model::{assemble_wtilde, edge_logit, OsbmParameters};
    use crate::vbem::bound::lower_bound;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose()) * scale + DMatrix::identity(d, d) * 0.05
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, q: usize) -> VariationalState {
        let k = q + 1;
        let mut s = VariationalState::initial(n, DMatrix::from_fn(n, q, |_, _| rng.random_range(0.05..0.95)), &Hyperpriors::default_for(q), 0.001);
        s.w_n_vec = DVector::from_fn(k * k, |_, _| rng.random_range(-2.0..2.0));
        s.sigma_n = random_spd(rng, k * k, 0.1);
        s.eta_n = (0..q).map(|_| rng.random_range(0.5..20.0)).collect();
        s.zeta_n = (0..q).map(|_| rng.random_range(0.5..20.0)).collect();
        s.a_n = rng.random_range(1.0..10.0);
        s.b_n = rng.random_range(1.0..10.0);
        s.xi = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(0.1..4.0) });
        s
    }

    #[test]
    fn e_tilde_shapes() {
        let e = e_tilde(&[0.0, 0.0, 0.0]);
        let mut expected = DMatrix::zeros(4, 4);
        expected[(3, 3)] = 1.0;
        assert_eq!(e, expected);
        assert_eq!(e_tilde(&[1.0]), DMatrix::from_element(2, 2, 1.0));
        let e = e_tilde(&[0.5, 0.5]);
        assert_eq!(e, DMatrix::from_row_slice(3, 3, &[0.5, 0.25, 0.5, 0.25, 0.5, 0.5, 0.5, 0.5, 1.0]));
    }

    #[test]
    fn alpha_step_formulas() {
        let pri = Hyperpriors::default_for(2);
        let (eta, zeta) = m_step_alpha(&DMatrix::zeros(10, 2), &pri);
        assert_eq!(eta, vec![0.5, 0.5]);
        assert_eq!(zeta, vec![10.5, 10.5]);
        let (eta, zeta) = m_step_alpha(&DMatrix::from_element(10, 2, 1.0), &pri);
        assert_eq!(eta, vec![10.5, 10.5]);
        assert_eq!(zeta, vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tau = DMatrix::from_fn(13, 2, |_, _| rng.random::<f64>());
        let (eta, zeta) = m_step_alpha(&tau, &pri);
        for c in 0..2 {
            assert_relative_eq!(eta[c] + zeta[c], 1.0 + 13.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn beta_step_formulas() {
        let pri = Hyperpriors::default_for(3);
        let (a, _) = m_step_beta(&DVector::zeros(16), &DMatrix::identity(16, 16), 3, &pri);
        assert_eq!(a, 9.0);
        let pri1 = Hyperpriors::default_for(1);
        let (a, b) = m_step_beta(&DVector::zeros(4), &DMatrix::identity(4, 4), 1, &pri1);
        assert_eq!((a, b), (3.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let (_, b) = m_step_beta(&m, &random_spd(&mut rng, 4, 1.0), 1, &pri1);
        assert!(b > pri1.b0);
    }

    /// Dense assembly straight from the Kronecker definition.
    fn brute_force_w_step(x: &AdjacencyMatrix, tau: &DMatrix<f64>, xi: &DMatrix<f64>, a_n: f64, b_n: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.n();
        let k = tau.ncols() + 1;
        let mut prec = DMatrix::identity(k * k, k * k) * (a_n / b_n);
        let mut rhs = DVector::zeros(k * k);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let ei = e_tilde(&tau_row(tau, i));
                let ej = e_tilde(&tau_row(tau, j));
                prec += kron(&ej, &ei) * (2.0 * lambda_jj(xi[(i, j)]));
                let ti = DMatrix::from_column_slice(k, 1, tau_tilde(&tau_row(tau, i)).as_slice());
                let tj = DMatrix::from_column_slice(k, 1, tau_tilde(&tau_row(tau, j)).as_slice());
                rhs += DVector::from_column_slice(kron(&tj, &ti).as_slice()) * (x.value(i, j) - 0.5);
            }
        }
        let cov = prec.clone().try_inverse().unwrap();
        (&cov * rhs, cov)
    }

    #[test]
    fn w_step_two_vertices() {
        let x = AdjacencyMatrix::from_edges(2, &[(0, 1), (1, 0)]).unwrap();
        let tau = DMatrix::zeros(2, 1);
        let xi = DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 1.3, 0.0]);
        let pri = Hyperpriors::default_for(1);
        let es = e_tildes(&tau);
        let (m, s) = m_step_w(&x, &tau, &es, &xi, 2.0, 3.0, &pri).unwrap();
        // Only the corner coordinate of vec(W) is informed.
        let corner_prec = 2.0 / 3.0 + 2.0 * (lambda_jj(0.7) + lambda_jj(1.3));
        assert_relative_eq!(s[(3, 3)], 1.0 / corner_prec, max_relative = 1e-12);
        assert_relative_eq!(m[3], 1.0 / corner_prec, max_relative = 1e-12);
        for r in 0..3 {
            assert_relative_eq!(s[(r, r)], 1.5, max_relative = 1e-12);
            assert!(m[r].abs() < 1e-14);
        }
        let (mb, sb) = brute_force_w_step(&x, &tau, &xi, 2.0, 3.0);
        assert!((m - mb).amax() < 1e-12);
        assert!((s - sb).amax() < 1e-12);
    }

    #[test]
    fn w_step_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(n, q) in &[(5usize, 1usize), (6, 2), (4, 3)] {
            let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| i != j).collect();
            let mut x = AdjacencyMatrix::new(n);
            for (i, j) in edges {
                x.set(i, j, rng.random::<f64>() < 0.4);
            }
            let tau = DMatrix::from_fn(n, q, |_, _| rng.random::<f64>());
            let xi = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.1..3.0));
            let es = e_tildes(&tau);
            let (m, s) = m_step_w(&x, &tau, &es, &xi, 1.7, 2.2, &Hyperpriors::default_for(q)).unwrap();
            let (mb, sb) = brute_force_w_step(&x, &tau, &xi, 1.7, 2.2);
            assert!((&m - mb).amax() < 1e-10);
            assert!((&s - &sb).amax() < 1e-10);
            assert!((&s - s.transpose()).amax() < 1e-12);
            assert!(s.clone().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn strong_prior_shrinks_mean_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let mut x = AdjacencyMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                x.set(i, j, rng.random::<f64>() < 0.5);
            }
        }
        let tau = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let xi = DMatrix::from_element(n, n, 1.0);
        let (m, _) = m_step_w(&x, &tau, &e_tildes(&tau), &xi, 1e9, 1.0, &Hyperpriors::default_for(2)).unwrap();
        assert!(m.amax() < 1e-6);
    }

    #[test]
    fn sigma_blocks_point_mass_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 3;
        let m = DVector::from_fn(k * k, |_, _| rng.random_range(-1.0..1.0));
        let w = unvec(&m, k);
        let zero = DMatrix::zeros(k * k, k * k);
        for q in 0..k {
            for l in 0..k {
                let (cols, rows) = sigma_blocks(&zero, &m, q, l);
                let expected_cols = w.column(q) * w.column(l).transpose();
                let expected_rows = w.row(q).transpose() * w.row(l);
                assert!((cols - expected_cols).amax() < 1e-14);
                assert!((rows - expected_rows).amax() < 1e-14);
            }
        }
        let ident = DMatrix::identity(k * k, k * k);
        let zm = DVector::zeros(k * k);
        for q in 0..k {
            for l in 0..k {
                let (cols, _) = sigma_blocks(&ident, &zm, q, l);
                let expected = if q == l { DMatrix::identity(k, k) } else { DMatrix::zeros(k, k) };
                assert_eq!(cols, expected);
            }
        }
    }

    #[test]
    fn sigma_blocks_against_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = 2;
        let d = k * k;
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let cov = random_spd(&mut rng, d, 0.3);
        let chol = cov.clone().cholesky().unwrap().l();
        let normal = rand_distr::StandardNormal;
        let draws = 100_000;
        let mut acc_cols = vec![DMatrix::<f64>::zeros(k, k); k * k];
        let mut acc_rows = vec![DMatrix::<f64>::zeros(k, k); k * k];
        for _ in 0..draws {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(normal));
            let w = unvec(&(&mean + &chol * z), k);
            for q in 0..k {
                for l in 0..k {
                    acc_cols[q * k + l] += w.column(q) * w.column(l).transpose();
                    acc_rows[q * k + l] += w.row(q).transpose() * w.row(l);
                }
            }
        }
        for q in 0..k {
            for l in 0..k {
                let (cols, rows) = sigma_blocks(&cov, &mean, q, l);
                let mc_cols = &acc_cols[q * k + l] / draws as f64;
                let mc_rows = &acc_rows[q * k + l] / draws as f64;
                let scale = cols.amax().max(rows.amax());
                assert!((&cols - mc_cols).amax() < 0.01 * scale.max(1.0), "cols {q}{l}");
                assert!((&rows - mc_rows).amax() < 0.01 * scale.max(1.0), "rows {q}{l}");
            }
        }
    }

    #[test]
    fn moments_match_kronecker_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = 3;
        let moment = random_spd(&mut rng, k * k, 1.0);
        for _ in 0..5 {
            let ti: Vec<f64> = (0..2).map(|_| rng.random::<f64>()).collect();
            let tj: Vec<f64> = (0..2).map(|_| rng.random::<f64>()).collect();
            let (ei, ej) = (e_tilde(&ti), e_tilde(&tj));
            let direct = (&moment * kron(&ej, &ei)).trace();
            let fast = ei.dot(&outer_moment(&moment, &ej));
            assert_relative_eq!(direct, fast, max_relative = 1e-12);
            // E[a_ij^2] seen from the receiver side.
            let via_inner = ej.dot(&inner_moment(&moment, &ei));
            assert_relative_eq!(direct, via_inner, max_relative = 1e-12);
        }
    }

    #[test]
    fn xi_point_mass_is_abs_logit() {
        let p = OsbmParameters::structured(vec![0.5, 0.5], 3.0, 1.0, -2.0);
        let wt = assemble_wtilde(&p);
        let z = [[1u8, 0], [0, 1], [1, 1], [0, 0]];
        let tau = DMatrix::from_fn(4, 2, |i, c| z[i][c] as f64);
        let mut s = VariationalState::initial(4, tau.clone(), &Hyperpriors::default_for(2), 0.001);
        s.tau = tau.clone();
        s.w_n_vec = vec(&wt);
        s.sigma_n = DMatrix::zeros(9, 9);
        let xi = xi_step(&s, &e_tildes(&tau));
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let a = edge_logit(&z[i], &z[j], &wt);
                    assert_relative_eq!(xi[(i, j)], a.abs().max(XI_FLOOR), max_relative = 1e-12);
                }
            }
        }
        s.w_n_vec = DVector::zeros(9);
        let xi = xi_step(&s, &e_tildes(&tau));
        assert!(xi.iter().enumerate().all(|(idx, &v)| idx % 5 == 0 || v == XI_FLOOR));
    }

    #[test]
    fn xi_step_locally_maximises_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let mut x = AdjacencyMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                x.set(i, j, rng.random::<f64>() < 0.5);
            }
        }
        let pri = Hyperpriors::default_for(2);
        let mut s = random_state(&mut rng, n, 2);
        s.xi = xi_step(&s, &e_tildes(&s.tau));
        let base = lower_bound(&x, &s, &pri).unwrap();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for f in [0.9, 1.1] {
                    let mut t = s.clone();
                    t.xi[(i, j)] *= f;
                    assert!(lower_bound(&x, &t, &pri).unwrap() <= base + 1e-12);
                }
            }
        }
    }

    #[test]
    fn e_step_symmetric_prior_gives_half() {
        let n = 6;
        let x = AdjacencyMatrix::from_edges(n, &[(0, 1), (2, 3), (4, 5), (5, 0)]).unwrap();
        let mut s = VariationalState::initial(n, DMatrix::from_element(n, 2, 0.9), &Hyperpriors::default_for(2), 0.001);
        s.eta_n = vec![3.0, 3.0];
        s.zeta_n = vec![3.0, 3.0];
        s.w_n_vec = DVector::zeros(9);
        s.sigma_n = DMatrix::zeros(9, 9);
        let rep = e_step_tau(&x, &mut s, 1e-4, 50);
        assert!(rep.converged);
        assert!(s.tau.iter().all(|&t| (t - 0.5).abs() < 1e-12));
    }

    #[test]
    fn e_step_fixed_point_matches_grid_search() {
        // N = 2, Q = 1: maximise the bound directly over (tau_11, tau_21).
        let x = AdjacencyMatrix::from_edges(2, &[(0, 1)]).unwrap();
        let pri = Hyperpriors::default_for(1);
        let mut s = VariationalState::initial(2, DMatrix::from_element(2, 1, 0.5), &pri, 0.001);
        s.w_n_vec = DVector::from_vec(vec![1.2, -0.4, 0.8, -0.6]);
        s.sigma_n = DMatrix::from_fn(4, 4, |r, c| if r == c { 0.3 } else { 0.05 });
        s.eta_n = vec![1.3];
        s.zeta_n = vec![1.1];
        s.xi = DMatrix::from_row_slice(2, 2, &[0.0, 1.1, 0.6, 0.0]);
        let rep = e_step_tau(&x, &mut s, 1e-12, 500);
        assert!(rep.converged);
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let mut probe = s.clone();
        for a in 1..1000 {
            for b in 1..1000 {
                let (ta, tb) = (a as f64 * 1e-3, b as f64 * 1e-3);
                probe.tau[(0, 0)] = ta;
                probe.tau[(1, 0)] = tb;
                let v = lower_bound(&x, &probe, &pri).unwrap();
                if v > best.0 {
                    best = (v, ta, tb);
                }
            }
        }
        assert!((s.tau[(0, 0)] - best.1).abs() <= 1.5e-3, "{} vs {}", s.tau[(0, 0)], best.1);
        assert!((s.tau[(1, 0)] - best.2).abs() <= 1.5e-3, "{} vs {}", s.tau[(1, 0)], best.2);
        assert!(lower_bound(&x, &s, &pri).unwrap() >= best.0 - 1e-12);
    }

    #[test]
    fn e_step_coordinate_update_increases_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 7;
        let mut x = AdjacencyMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                x.set(i, j, rng.random::<f64>() < 0.4);
            }
        }
        let pri = Hyperpriors::default_for(3);
        for _ in 0..5 {
            let mut s = random_state(&mut rng, n, 3);
            let before = lower_bound(&x, &s, &pri).unwrap();
            e_step_tau(&x, &mut s, 1e-4, 1);
            let after = lower_bound(&x, &s, &pri).unwrap();
            assert!(after >= before - 1e-9 * before.abs(), "{before} -> {after}");
        }
    }

    #[test]
    fn e_step_equivariant_under_class_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 6;
        let q = 3;
        let k = q + 1;
        let mut x = AdjacencyMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                x.set(i, j, rng.random::<f64>() < 0.5);
            }
        }
        let s = random_state(&mut rng, n, q);
        let perm = [2usize, 0, 1];
        // Permutation on the augmented index: class c of the permuted state is class perm[c].
        let aug = |c: usize| if c == q { q } else { perm[c] };
        let mut p = s.clone();
        p.tau = DMatrix::from_fn(n, q, |i, c| s.tau[(i, perm[c])]);
        p.eta_n = (0..q).map(|c| s.eta_n[perm[c]]).collect();
        p.zeta_n = (0..q).map(|c| s.zeta_n[perm[c]]).collect();
        let vidx = |r: usize, c: usize| c * k + r;
        p.w_n_vec = DVector::from_fn(k * k, |idx, _| s.w_n_vec[vidx(aug(idx % k), aug(idx / k))]);
        p.sigma_n = DMatrix::from_fn(k * k, k * k, |a, b| s.sigma_n[(vidx(aug(a % k), aug(a / k)), vidx(aug(b % k), aug(b / k)))]);
        // A fixed point of the original problem, relabelled, is a fixed point
        // of the relabelled problem.
        let mut s_star = s.clone();
        assert!(e_step_tau(&x, &mut s_star, 1e-14, 5000).converged);
        p.tau = DMatrix::from_fn(n, q, |i, c| s_star.tau[(i, perm[c])]);
        let before = p.tau.clone();
        e_step_tau(&x, &mut p, 1e-4, 1);
        assert!((&p.tau - before).amax() < 1e-10);
    }
}
