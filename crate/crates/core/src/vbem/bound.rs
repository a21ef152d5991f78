//! The variational lower bound and the IL_osbm criterion.

use std::f64::consts::PI;

use nalgebra::DVector;

use super::steps::{e_tildes, expected_squared_logits, second_moment, tau_tildes};
use super::VariationalState;
use crate::error::Result;
use crate::mathkit::{digamma, lambda_jj, log_gamma, log_logistic, unvec, PsdFactor};
use crate::model::{AdjacencyMatrix, Hyperpriors};

/// Bernoulli entropy summed over all membership probabilities.
pub fn membership_entropy(state: &VariationalState) -> f64 {
    state
        .tau
        .iter()
        .map(|&t| {
            let mut h = 0.0;
            if t > 0.0 {
                h -= t * t.ln();
            }
            if t < 1.0 {
                h -= (1.0 - t) * (1.0 - t).ln();
            }
            h
        })
        .sum()
}

/// Evaluates every expectation in the bound directly, for any state:
/// `E[log h] + E[log p(Z|alpha)] + E[log p(alpha)] + E[log p(W|beta)] + E[log p(beta)]`
/// plus the entropies of `q(Z)`, `q(alpha)`, `q(W)` and `q(beta)`.
///
/// No stationarity of the M-step quantities is assumed.
pub fn lower_bound(x: &AdjacencyMatrix, state: &VariationalState, priors: &Hyperpriors) -> Result<f64> {
    let n = x.n();
    let q = state.q();
    let k = q + 1;
    let d = (k * k) as f64;

    // E[log h(Z, W, xi)]
    let moment = second_moment(&state.sigma_n, &state.w_n_vec);
    let es = e_tildes(&state.tau);
    let tt = tau_tildes(&state.tau);
    let sq = expected_squared_logits(&moment, &es);
    let w_mean = unvec(&state.w_n_vec, k);
    let mut local = 0.0;
    for i in 0..n {
        let wi = w_mean.tr_mul(&tt[i]);
        for j in 0..n {
            if i == j {
                continue;
            }
            let xi = state.xi[(i, j)];
            let mean_logit = wi.dot(&tt[j]);
            local += (x.value(i, j) - 0.5) * mean_logit - 0.5 * xi + log_logistic(xi) - lambda_jj(xi) * (sq[(i, j)] - xi * xi);
        }
    }

    // Membership and class-probability terms.
    let mut alpha_terms = 0.0;
    for c in 0..q {
        let (eta, zeta) = (state.eta_n[c], state.zeta_n[c]);
        let (eta0, zeta0) = (priors.eta0[c], priors.zeta0[c]);
        let e_log_a = digamma(eta) - digamma(eta + zeta);
        let e_log_1ma = digamma(zeta) - digamma(eta + zeta);
        let tau_sum: f64 = state.tau.column(c).sum();
        // E[log p(Z | alpha)]
        alpha_terms += tau_sum * e_log_a + (n as f64 - tau_sum) * e_log_1ma;
        // E[log p(alpha)]
        alpha_terms += log_gamma(eta0 + zeta0) - log_gamma(eta0) - log_gamma(zeta0) + (eta0 - 1.0) * e_log_a + (zeta0 - 1.0) * e_log_1ma;
        // entropy of q(alpha)
        alpha_terms += log_gamma(eta) + log_gamma(zeta) - log_gamma(eta + zeta) - (eta - 1.0) * digamma(eta) - (zeta - 1.0) * digamma(zeta)
            + (eta + zeta - 2.0) * digamma(eta + zeta);
    }

    // Precision terms.
    let (a_n, b_n) = (state.a_n, state.b_n);
    let e_beta = a_n / b_n;
    let e_log_beta = digamma(a_n) - b_n.ln();
    let centred = &state.w_n_vec - DVector::from_column_slice(&priors.w0_vec);
    let e_sq_dev = state.sigma_n.trace() + centred.norm_squared();
    let log_p_w = -0.5 * d * (2.0 * PI).ln() + 0.5 * d * e_log_beta - 0.5 * e_beta * e_sq_dev;
    let log_p_beta = priors.a0 * priors.b0.ln() - log_gamma(priors.a0) + (priors.a0 - 1.0) * e_log_beta - priors.b0 * e_beta;
    let entropy_beta = a_n - b_n.ln() + log_gamma(a_n) + (1.0 - a_n) * digamma(a_n);

    let sigma_factor = PsdFactor::new(&state.sigma_n)?;
    let entropy_w = 0.5 * d * (1.0 + (2.0 * PI).ln()) + 0.5 * sigma_factor.log_det();

    Ok(local + alpha_terms + log_p_w + log_p_beta + membership_entropy(state) + entropy_w + entropy_beta)
}

/// Closed-form IL_osbm.
///
/// Equals [`lower_bound`] when the state is M-step fresh: `eta_N`/`zeta_N`
/// computed from the current `tau`, `a_N = a_0 + (q+1)^2/2`, and the Gaussian
/// factor computed from the current `tau`, `xi` and `a_N/b_N`. The quadratic
/// form `m^T Sigma_N^{-1} m` is taken against the posterior precision. A
/// non-zero prior mean adds `-(a_N / 2 b_N) |W_0|^2`.
pub fn il_osbm(state: &VariationalState, priors: &Hyperpriors) -> Result<f64> {
    let q = state.q();

    let local: f64 = (0..state.n())
        .flat_map(|i| (0..state.n()).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| {
            let xi = state.xi[(i, j)];
            log_logistic(xi) - 0.5 * xi + lambda_jj(xi) * xi * xi
        })
        .sum();

    let beta_fns: f64 = (0..q)
        .map(|c| {
            let (eta0, zeta0) = (priors.eta0[c], priors.zeta0[c]);
            let (eta, zeta) = (state.eta_n[c], state.zeta_n[c]);
            log_gamma(eta0 + zeta0) + log_gamma(eta) + log_gamma(zeta) - log_gamma(eta0) - log_gamma(zeta0) - log_gamma(eta + zeta)
        })
        .sum();

    let (a_n, b_n) = (state.a_n, state.b_n);
    let gamma_terms = log_gamma(a_n) - log_gamma(priors.a0) + priors.a0 * priors.b0.ln() + a_n * (1.0 - priors.b0 / b_n - b_n.ln());

    let factor = PsdFactor::new(&state.sigma_n)?;
    let precision_mean = factor.solve(&state.w_n_vec);
    let w0 = DVector::from_column_slice(&priors.w0_vec);
    let gaussian_terms = 0.5 * state.w_n_vec.dot(&precision_mean) + 0.5 * factor.log_det() - 0.5 * (a_n / b_n) * w0.norm_squared();

    Ok(local + beta_fns + gamma_terms + gaussian_terms + membership_entropy(state))
}
