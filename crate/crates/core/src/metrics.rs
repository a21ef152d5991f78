//! Evaluation: clustering distance, thresholded memberships, posterior
//! credibility intervals and the two simulation experiments (interval
//! coverage and confusion of the selected number of classes).

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erf_inv;

use crate::error::{OsbmError, Result};
use crate::model::{assemble_wtilde, balanced_alpha, geometric_alpha, sample_network, MembershipMatrix, OsbmParameters};
use crate::selection::{derive_seed, select_q, PriorConstants};
use crate::vbem::{FitOptions, VariationalState};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const BETA_QUANTILE_TOL: f64 = 1e-10;

/// `sqrt( mean_{i != j} |(Z Z^T)_ij - (Z^ Z^^T)_ij| )`. The number of
/// columns of the two matrices may differ.
pub fn cluster_distance(z: &MembershipMatrix, z_hat: &MembershipMatrix) -> f64 {
    let n = z.n();
    assert_eq!(n, z_hat.n(), "membership matrices must cover the same vertices");
    if n < 2 {
        return 0.0;
    }
    let shared = |m: &MembershipMatrix, i: usize, j: usize| -> i64 { m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a & b) as i64).sum() };
    let mut total = 0i64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (shared(z, i, j) - shared(z_hat, i, j)).abs();
            }
        }
    }
    (total as f64 / (n * (n - 1)) as f64).sqrt()
}

/// `Z_iq = 1` iff `tau_iq > t`. All-zero rows are outliers.
pub fn threshold_memberships(tau: &DMatrix<f64>, t: f64) -> MembershipMatrix {
    let mut z = MembershipMatrix::new(tau.nrows(), tau.ncols());
    for i in 0..tau.nrows() {
        for c in 0..tau.ncols() {
            z.set(i, c, tau[(i, c)] > t);
        }
    }
    z
}

/// Counts reported by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipSummary {
    pub vertices: usize,
    pub class_sizes: Vec<usize>,
    /// Vertices in two or more classes.
    pub overlaps: usize,
    /// Vertices in no class.
    pub outliers: usize,
}

pub fn membership_summary(z: &MembershipMatrix) -> MembershipSummary {
    let class_sizes = (0..z.q()).map(|c| (0..z.n()).filter(|&i| z.get(i, c)).count()).collect();
    MembershipSummary {
        vertices: z.n(),
        class_sizes,
        overlaps: (0..z.n()).filter(|&i| z.degree(i) >= 2).count(),
        outliers: (0..z.n()).filter(|&i| z.degree(i) == 0).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityInterval {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl CredibilityInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Name of entry `(r, c)` of the `(q+1) x (q+1)` block matrix, 1-based:
/// `W[r,c]`, `U[r]`, `V[c]` or `W*`.
pub fn wtilde_label(q: usize, r: usize, c: usize) -> String {
    match (r < q, c < q) {
        (true, true) => format!("W[{},{}]", r + 1, c + 1),
        (true, false) => format!("U[{}]", r + 1),
        (false, true) => format!("V[{}]", c + 1),
        (false, false) => "W*".to_string(),
    }
}

pub fn alpha_label(c: usize) -> String {
    format!("alpha[{}]", c + 1)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0)
}

/// Quantile of Beta(a, b) by bisection on the regularised incomplete beta
/// function.
pub fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > BETA_QUANTILE_TOL {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Equal-tailed intervals at `level` for every entry of W-tilde (Gaussian
/// marginals, column-major order) followed by every class probability
/// (Beta marginals).
pub fn credibility_intervals(state: &VariationalState, level: f64) -> Result<Vec<CredibilityInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(OsbmError::InvalidInput(format!("credibility level {level} outside (0, 1)")));
    }
    let q = state.q();
    let k = q + 1;
    let tail = 0.5 * (1.0 - level);
    let z = normal_quantile(1.0 - tail);
    let mut out = Vec::with_capacity(k * k + q);
    for c in 0..k {
        for r in 0..k {
            let idx = c * k + r;
            let mean = state.w_n_vec[idx];
            let sd = state.sigma_n[(idx, idx)].max(0.0).sqrt();
            out.push(CredibilityInterval { label: wtilde_label(q, r, c), lower: mean - z * sd, upper: mean + z * sd, level });
        }
    }
    for c in 0..q {
        let (a, b) = (state.eta_n[c], state.zeta_n[c]);
        out.push(CredibilityInterval { label: alpha_label(c), lower: beta_quantile(a, b, tail), upper: beta_quantile(a, b, 1.0 - tail), level });
    }
    Ok(out)
}

/// Relabels the classes of a posterior: new class `c` is old class
/// `perm[c]`. The augmented last index of W-tilde stays in place.
pub fn permute_state(state: &VariationalState, perm: &[usize]) -> VariationalState {
    let q = state.q();
    assert_eq!(perm.len(), q);
    let k = q + 1;
    let full = |r: usize| if r == q { q } else { perm[r] };
    let vec_index = |r: usize, c: usize| full(c) * k + full(r);
    let order: Vec<usize> = (0..k * k).map(|idx| vec_index(idx % k, idx / k)).collect();
    VariationalState {
        tau: DMatrix::from_fn(state.n(), q, |i, c| state.tau[(i, perm[c])]),
        eta_n: perm.iter().map(|&p| state.eta_n[p]).collect(),
        zeta_n: perm.iter().map(|&p| state.zeta_n[p]).collect(),
        w_n_vec: DVector::from_fn(k * k, |a, _| state.w_n_vec[order[a]]),
        sigma_n: DMatrix::from_fn(k * k, k * k, |a, b| state.sigma_n[(order[a], order[b])]),
        a_n: state.a_n,
        b_n: state.b_n,
        xi: state.xi.clone(),
    }
}

/// Class relabeling of a fit that best matches the truth: `perm[c]` is the
/// fitted class put in position `c`. Chooses the permutation with the fewest
/// disagreements between `z_true` and the thresholded memberships, then the
/// smallest total absolute difference to the soft memberships.
pub fn align_to_truth(z_true: &MembershipMatrix, tau: &DMatrix<f64>, threshold: f64) -> Vec<usize> {
    let q = tau.ncols();
    assert_eq!(z_true.q(), q, "alignment needs equal class counts");
    let z_hat = threshold_memberships(tau, threshold);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for perm in (0..q).permutations(q) {
        let mut hamming = 0;
        let mut soft = 0.0;
        for i in 0..z_true.n() {
            for c in 0..q {
                let truth = z_true.get(i, c);
                hamming += (truth != z_hat.get(i, perm[c])) as usize;
                soft += (truth as u8 as f64 - tau[(i, perm[c])]).abs();
            }
        }
        let better = match &best {
            None => true,
            Some((h, s, _)) => hamming < *h || (hamming == *h && soft < *s),
        };
        if better {
            best = Some((hamming, soft, perm));
        }
    }
    best.map(|b| b.2).unwrap_or_default()
}

/// How class proportions are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Balance {
    Balanced,
    /// `alpha_q ∝ a^q`.
    Geometric { a: f64 },
}

impl Balance {
    pub fn alpha(&self, q: usize) -> Vec<f64> {
        match *self {
            Balance::Balanced => balanced_alpha(q),
            Balance::Geometric { a } => geometric_alpha(q, a),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Balance::Balanced => "balanced".into(),
            Balance::Geometric { a } => format!("geometric-{a}"),
        }
    }
}

/// Setup of the coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub n: usize,
    pub q: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub w_star: f64,
    pub balance: Balance,
    pub level: f64,
    pub restarts: usize,
    pub threshold: f64,
    /// Parameters whose coverage is reported, by label.
    pub tracked: Vec<String>,
    pub priors: PriorConstants,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            n: 100,
            q: 3,
            lambda: 1.5,
            epsilon: 1.0,
            w_star: -2.0,
            balance: Balance::Balanced,
            level: 0.99,
            // Weak signal: many starts land in poorer optima, so use more
            // than the selection default.
            restarts: 100,
            threshold: DEFAULT_THRESHOLD,
            tracked: vec!["W[1,1]".into(), "W[1,2]".into(), "U[1]".into(), "W*".into(), "alpha[1]".into()],
            priors: PriorConstants::default(),
        }
    }
}

impl CoverageConfig {
    pub fn parameters(&self) -> OsbmParameters {
        OsbmParameters::structured(self.balance.alpha(self.q), self.lambda, self.epsilon, self.w_star)
    }
}

/// True value of every labelled parameter.
pub fn true_values(p: &OsbmParameters) -> Vec<(String, f64)> {
    let q = p.q();
    let wt = assemble_wtilde(p);
    let mut out = Vec::new();
    for c in 0..=q {
        for r in 0..=q {
            out.push((wtilde_label(q, r, c), wt[(r, c)]));
        }
    }
    out.extend(p.alpha.iter().enumerate().map(|(c, &a)| (alpha_label(c), a)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCoverage {
    pub label: String,
    pub truth: f64,
    pub hits: usize,
    pub trials: usize,
}

impl ParameterCoverage {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            f64::NAN
        } else {
            self.hits as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub networks: usize,
    pub parameters: Vec<ParameterCoverage>,
    /// `(network index, message)` for every network whose fit failed.
    pub failures: Vec<(usize, String)>,
}

/// Samples `n_networks` networks, fits each with the true number of classes,
/// aligns labels to the truth and records which intervals cover the true
/// parameters.
pub fn coverage_experiment(config: &CoverageConfig, n_networks: usize, seed: u64, opts: &FitOptions) -> Result<CoverageReport> {
    let params = config.parameters();
    params.validate()?;
    let truth = true_values(&params);
    let tracked: Vec<(String, f64)> = config
        .tracked
        .iter()
        .map(|l| {
            truth
                .iter()
                .find(|(t, _)| t == l)
                .cloned()
                .ok_or_else(|| OsbmError::InvalidInput(format!("unknown parameter label {l}")))
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<Result<Vec<bool>>> = (0..n_networks)
        .into_par_iter()
        .map(|m| {
            let (x, z) = sample_network(&params, config.n, derive_seed(seed, &[0, m as u64]))?;
            let rep = select_q(&x, &[config.q], config.restarts, &config.priors, derive_seed(seed, &[1, m as u64]), opts)?;
            let state = &rep.best().state;
            let perm = align_to_truth(&z, &state.tau, config.threshold);
            let aligned = permute_state(state, &perm);
            let intervals = credibility_intervals(&aligned, config.level)?;
            Ok(tracked
                .iter()
                .map(|(label, value)| intervals.iter().find(|ci| &ci.label == label).is_some_and(|ci| ci.contains(*value)))
                .collect())
        })
        .collect();

    let mut parameters: Vec<ParameterCoverage> =
        tracked.iter().map(|(label, truth)| ParameterCoverage { label: label.clone(), truth: *truth, hits: 0, trials: 0 }).collect();
    let mut failures = Vec::new();
    for (m, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(hits) => {
                for (p, hit) in parameters.iter_mut().zip(hits) {
                    p.trials += 1;
                    p.hits += hit as usize;
                }
            }
            Err(e) => failures.push((m, e.to_string())),
        }
    }
    Ok(CoverageReport { networks: n_networks, parameters, failures })
}

/// Grid of the model-selection experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionGrid {
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub balances: Vec<Balance>,
    pub q_true: Vec<usize>,
    pub epsilon: f64,
    pub w_star: f64,
    pub q_range: Vec<usize>,
    pub restarts: usize,
    pub threshold: f64,
    pub priors: PriorConstants,
}

impl Default for ConfusionGrid {
    fn default() -> Self {
        ConfusionGrid {
            n: 100,
            lambdas: vec![6.0, 4.0, 3.5],
            balances: vec![Balance::Balanced, Balance::Geometric { a: 0.7 }],
            q_true: (2..=7).collect(),
            epsilon: 1.0,
            w_star: -5.5,
            q_range: (2..=8).collect(),
            restarts: 10,
            threshold: DEFAULT_THRESHOLD,
            priors: PriorConstants::default(),
        }
    }
}

/// Result for one simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetworkOutcome {
    Selected {
        q_selected: usize,
        /// Distance between the true memberships and the thresholded
        /// memberships of the selected model.
        distance: f64,
    },
    Failed(String),
}

/// Confusion matrix for one `(lambda, balance)` setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub lambda: f64,
    pub balance: Balance,
    pub q_true: Vec<usize>,
    pub q_selected: Vec<usize>,
    /// `counts[row][col]`: networks with `q_true[row]` for which
    /// `q_selected[col]` was chosen.
    pub counts: Vec<Vec<usize>>,
    /// Per row, networks for which selection failed.
    pub failures: Vec<usize>,
    /// Per row, every network outcome in generation order.
    pub outcomes: Vec<Vec<NetworkOutcome>>,
}

impl ConfusionMatrix {
    pub fn correct(&self, q_true: usize) -> usize {
        let row = self.q_true.iter().position(|&q| q == q_true);
        let col = self.q_selected.iter().position(|&q| q == q_true);
        match (row, col) {
            (Some(r), Some(c)) => self.counts[r][c],
            _ => 0,
        }
    }

    pub fn distances(&self, q_true: usize) -> Vec<f64> {
        let Some(r) = self.q_true.iter().position(|&q| q == q_true) else {
            return Vec::new();
        };
        self.outcomes[r]
            .iter()
            .filter_map(|o| match o {
                NetworkOutcome::Selected { distance, .. } => Some(*distance),
                NetworkOutcome::Failed(_) => None,
            })
            .collect()
    }
}

fn simulate_network(grid: &ConfusionGrid, lambda: f64, balance: Balance, q_true: usize, seed: u64, opts: &FitOptions) -> Result<(usize, f64)> {
    let params = OsbmParameters::structured(balance.alpha(q_true), lambda, grid.epsilon, grid.w_star);
    let (x, z) = sample_network(&params, grid.n, seed)?;
    let rep = select_q(&x, &grid.q_range, grid.restarts, &grid.priors, derive_seed(seed, &[1]), opts)?;
    let z_hat = threshold_memberships(&rep.best().state.tau, grid.threshold);
    Ok((rep.q_star, cluster_distance(&z, &z_hat)))
}

/// Runs the model-selection experiment over every `(lambda, balance,
/// q_true)` cell with `n_per_cell` networks each.
pub fn confusion_experiment(grid: &ConfusionGrid, n_per_cell: usize, seed: u64, opts: &FitOptions) -> Result<Vec<ConfusionMatrix>> {
    if grid.q_range.is_empty() || grid.restarts == 0 {
        return Err(OsbmError::InvalidInput("the selection range and restarts must be non-empty".into()));
    }
    let mut tasks = Vec::new();
    for (li, &lambda) in grid.lambdas.iter().enumerate() {
        for (bi, &balance) in grid.balances.iter().enumerate() {
            for &q_true in &grid.q_true {
                for m in 0..n_per_cell {
                    tasks.push((li, bi, lambda, balance, q_true, m));
                }
            }
        }
    }
    let results: Vec<NetworkOutcome> = tasks
        .par_iter()
        .map(|&(li, bi, lambda, balance, q_true, m)| {
            let s = derive_seed(seed, &[li as u64, bi as u64, q_true as u64, m as u64]);
            match simulate_network(grid, lambda, balance, q_true, s, opts) {
                Ok((q_selected, distance)) => NetworkOutcome::Selected { q_selected, distance },
                Err(e) => NetworkOutcome::Failed(e.to_string()),
            }
        })
        .collect();

    let mut results = results.into_iter();
    let mut out = Vec::new();
    for &lambda in &grid.lambdas {
        for &balance in &grid.balances {
            let rows = grid.q_true.len();
            let mut cm = ConfusionMatrix {
                lambda,
                balance,
                q_true: grid.q_true.clone(),
                q_selected: grid.q_range.clone(),
                counts: vec![vec![0; grid.q_range.len()]; rows],
                failures: vec![0; rows],
                outcomes: vec![Vec::with_capacity(n_per_cell); rows],
            };
            for row in 0..rows {
                for _ in 0..n_per_cell {
                    let outcome = results.next().expect("one outcome per task");
                    match &outcome {
                        NetworkOutcome::Selected { q_selected, .. } => {
                            let col = grid.q_range.iter().position(|q| q == q_selected).expect("selected q is in range");
                            cm.counts[row][col] += 1;
                        }
                        NetworkOutcome::Failed(_) => cm.failures[row] += 1,
                    }
                    cm.outcomes[row].push(outcome);
                }
            }
            out.push(cm);
        }
    }
    Ok(out)
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}
