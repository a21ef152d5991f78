//! Variational Bayes EM for the OSBM.
//!
//! The approximate posterior factorises as `q(Z) q(alpha) q(W~) q(beta)` with
//! Bernoulli memberships, Beta class probabilities, a Gaussian on vec(W~) and
//! a Gamma on the prior precision. The logistic likelihood is replaced by the
//! Jaakkola-Jordan quadratic bound with one local parameter per ordered pair.
//!
//! One outer iteration of [`fit`] runs, in order: second moments of the
//! memberships, the class-probability update, the Gaussian update, the
//! precision update, the local-parameter update and the inner E-step loop.

pub mod bound;
pub mod steps;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{OsbmError, Result};
use crate::mathkit::PsdMatrix;
use crate::model::{AdjacencyMatrix, Hyperpriors};

pub use bound::{il_osbm, lower_bound, membership_entropy};
pub use steps::{
    e_step_tau, e_tilde, e_tildes, m_step_alpha, m_step_beta, m_step_w, sigma_blocks, tau_tilde, xi_step, EStepReport, TAU_MIN,
    XI_FLOOR,
};

/// Full posterior approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// `n x q` membership probabilities.
    pub tau: DMatrix<f64>,
    pub eta_n: Vec<f64>,
    pub zeta_n: Vec<f64>,
    /// Posterior mean of vec(W~), length `(q+1)^2`.
    pub w_n_vec: DVector<f64>,
    /// Posterior covariance of vec(W~).
    pub sigma_n: PsdMatrix,
    pub a_n: f64,
    pub b_n: f64,
    /// `n x n` local parameters; the diagonal is unused.
    pub xi: DMatrix<f64>,
}

impl VariationalState {
    /// Starting point: clipped `init_tau`, constant `xi`, and every other
    /// factor at its prior.
    pub fn initial(n: usize, init_tau: DMatrix<f64>, priors: &Hyperpriors, xi_init: f64) -> Self {
        let q = init_tau.ncols();
        let d = (q + 1) * (q + 1);
        let tau = init_tau.map(|t| t.clamp(TAU_MIN, 1.0 - TAU_MIN));
        VariationalState {
            tau,
            eta_n: priors.eta0.clone(),
            zeta_n: priors.zeta0.clone(),
            w_n_vec: DVector::from_column_slice(&priors.w0_vec),
            sigma_n: DMatrix::identity(d, d) * (priors.b0 / priors.a0),
            a_n: priors.a0,
            b_n: priors.b0,
            xi: DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { xi_init }),
        }
    }

    pub fn n(&self) -> usize {
        self.tau.nrows()
    }

    pub fn q(&self) -> usize {
        self.tau.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.tau.iter().all(|v| v.is_finite())
            && self.eta_n.iter().chain(&self.zeta_n).all(|v| v.is_finite())
            && self.w_n_vec.iter().all(|v| v.is_finite())
            && self.sigma_n.iter().all(|v| v.is_finite())
            && self.a_n.is_finite()
            && self.b_n.is_finite()
            && self.xi.iter().all(|v| v.is_finite())
    }
}

/// Loop controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_outer: usize,
    /// Relative change of the bound that stops the outer loop.
    pub outer_tol: f64,
    pub max_sweeps: usize,
    /// Largest membership change that stops the E-step.
    pub tau_tol: f64,
    pub xi_init: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_outer: 500, outer_tol: 1e-6, max_sweeps: 50, tau_tol: 1e-4, xi_init: 0.001 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: VariationalState,
    pub il_osbm: f64,
    /// Lower bound at the end of every outer iteration.
    pub bound_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Outer iterations whose E-step hit the sweep cap.
    pub estep_capped: usize,
}

impl FitResult {
    pub fn final_bound(&self) -> f64 {
        self.bound_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Brings the M-step quantities in line with the current `tau`, `xi` and
/// `b_N`: `a_N` is set to its stationary value, then the class-probability
/// and Gaussian factors are recomputed. On the resulting state
/// [`il_osbm`] and [`lower_bound`] coincide.
pub fn m_step_fresh(x: &AdjacencyMatrix, state: &mut VariationalState, priors: &Hyperpriors) -> Result<()> {
    let q = state.q();
    state.a_n = priors.a0 + ((q + 1) * (q + 1)) as f64 / 2.0;
    let (eta, zeta) = m_step_alpha(&state.tau, priors);
    state.eta_n = eta;
    state.zeta_n = zeta;
    let es = e_tildes(&state.tau);
    let (m, s) = m_step_w(x, &state.tau, &es, &state.xi, state.a_n, state.b_n, priors)?;
    state.w_n_vec = m;
    state.sigma_n = s;
    Ok(())
}

fn ensure_finite(state: &VariationalState, stage: &'static str, iteration: usize) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(OsbmError::NonFinite { stage, iteration })
    }
}

/// Runs VBEM from `init_tau` until the relative change of the bound drops
/// below `opts.outer_tol` or `opts.max_outer` iterations have run.
///
/// IL_osbm is taken in the last iteration right after the Gaussian update,
/// where the state is M-step fresh (from the second iteration on, `a_N` is
/// already stationary).
pub fn fit(x: &AdjacencyMatrix, q: usize, init_tau: &DMatrix<f64>, priors: &Hyperpriors, opts: &FitOptions) -> Result<FitResult> {
    let n = x.n();
    if q == 0 {
        return Err(OsbmError::InvalidInput("q must be at least 1".into()));
    }
    if n < 2 {
        return Err(OsbmError::InvalidInput("a graph with at least two vertices is required".into()));
    }
    if init_tau.shape() != (n, q) {
        return Err(OsbmError::InvalidInput(format!("initial tau is {:?}, expected ({n}, {q})", init_tau.shape())));
    }
    if opts.max_outer == 0 || opts.max_sweeps == 0 || opts.xi_init <= 0.0 {
        return Err(OsbmError::InvalidInput("invalid fit options".into()));
    }
    priors.validate(q)?;

    let mut state = VariationalState::initial(n, init_tau.clone(), priors, opts.xi_init);
    let mut trace = Vec::new();
    let mut il = f64::NAN;
    let mut converged = false;
    let mut estep_capped = 0;
    let mut iterations = 0;

    for it in 1..=opts.max_outer {
        iterations = it;
        let es = e_tildes(&state.tau);

        let (eta, zeta) = m_step_alpha(&state.tau, priors);
        state.eta_n = eta;
        state.zeta_n = zeta;

        let (m, s) = m_step_w(x, &state.tau, &es, &state.xi, state.a_n, state.b_n, priors)?;
        state.w_n_vec = m;
        state.sigma_n = s;
        ensure_finite(&state, "gaussian update", it)?;
        il = il_osbm(&state, priors)?;

        let (a_n, b_n) = m_step_beta(&state.w_n_vec, &state.sigma_n, q, priors);
        state.a_n = a_n;
        state.b_n = b_n;

        state.xi = xi_step(&state, &es);
        ensure_finite(&state, "local parameter update", it)?;

        let report = e_step_tau(x, &mut state, opts.tau_tol, opts.max_sweeps);
        if !report.converged {
            estep_capped += 1;
        }
        ensure_finite(&state, "membership update", it)?;

        let bound = lower_bound(x, &state, priors)?;
        if !bound.is_finite() || !il.is_finite() {
            return Err(OsbmError::NonFinite { stage: "lower bound", iteration: it });
        }
        let previous = trace.last().copied();
        trace.push(bound);
        if let Some(prev) = previous {
            if ((bound - prev) / bound).abs() < opts.outer_tol {
                converged = true;
                break;
            }
        }
    }

    Ok(FitResult { state, il_osbm: il, bound_trace: trace, converged, iterations, estep_capped })
}
