//! Choosing the number of classes: k-means starting points, restarts per
//! candidate `q`, and the argmax of IL_osbm.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OsbmError, Result};
use crate::model::{AdjacencyMatrix, Hyperpriors};
use crate::vbem::{fit, FitOptions, FitResult};

pub const KMEANS_MAX_ROUNDS: usize = 100;
pub const INIT_HIGH: f64 = 0.9;
pub const INIT_LOW: f64 = 0.1;

/// Prior constants shared by every class, instantiated per `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConstants {
    pub eta0: f64,
    pub zeta0: f64,
    pub a0: f64,
    pub b0: f64,
}

impl Default for PriorConstants {
    fn default() -> Self {
        PriorConstants { eta0: 0.5, zeta0: 0.5, a0: 1.0, b0: 1.0 }
    }
}

impl PriorConstants {
    pub fn for_q(&self, q: usize) -> Hyperpriors {
        Hyperpriors::with_constants(q, self.eta0, self.zeta0, self.a0, self.b0)
    }
}

fn features(x: &AdjacencyMatrix) -> Vec<Vec<f64>> {
    let n = x.n();
    (0..n)
        .map(|i| (0..n).map(|j| x.value(i, j)).chain((0..n).map(|j| x.value(j, i))).collect())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeding(points: &[Vec<f64>], q: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < q {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }
    centers
}

/// Every empty cluster takes the point farthest from its own centre among
/// clusters that can spare one.
fn refill_empty(points: &[Vec<f64>], centers: &mut [Vec<f64>], labels: &mut [usize]) {
    let q = centers.len();
    let mut counts = vec![0usize; q];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..q {
        if counts[c] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centers[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((i, _)) = donor {
            counts[labels[i]] -= 1;
            counts[c] = 1;
            labels[i] = c;
            centers[c] = points[i].clone();
        }
    }
}

/// Hard k-means labels on the row-and-column profiles of `x`.
pub fn kmeans_labels(x: &AdjacencyMatrix, q: usize, seed: u64) -> Result<Vec<usize>> {
    let n = x.n();
    if q == 0 || q > n {
        return Err(OsbmError::InvalidInput(format!("cannot form {q} clusters from {n} vertices")));
    }
    let points = features(x);
    let dim = 2 * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeding(&points, q, &mut rng);
    let assign = |centers: &mut Vec<Vec<f64>>| {
        let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, centers).0).collect();
        refill_empty(&points, centers, &mut labels);
        labels
    };
    let mut labels = assign(&mut centers);
    for _ in 0..KMEANS_MAX_ROUNDS {
        let mut sums = vec![vec![0.0; dim]; q];
        let mut counts = vec![0usize; q];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..q {
            centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        let next = assign(&mut centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(labels)
}

/// k-means starting point: the assigned class gets 0.9, every other 0.1.
pub fn kmeans_init(x: &AdjacencyMatrix, q: usize, seed: u64) -> Result<DMatrix<f64>> {
    let labels = kmeans_labels(x, q, seed)?;
    Ok(DMatrix::from_fn(x.n(), q, |i, c| if labels[i] == c { INIT_HIGH } else { INIT_LOW }))
}

/// Starting points tried by [`select_q`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// [`kmeans_init`].
    KMeans,
    /// [`kmeans_null_init`].
    #[default]
    KMeansWithNull,
}

impl InitStrategy {
    pub fn init(&self, x: &AdjacencyMatrix, q: usize, seed: u64) -> Result<DMatrix<f64>> {
        match self {
            InitStrategy::KMeans => kmeans_init(x, q, seed),
            InitStrategy::KMeansWithNull => kmeans_null_init(x, q, seed),
        }
    }
}

/// k-means with `q + 1` clusters; the cluster with the lowest mean degree
/// plays the null component and gets 0.1 in every class, the others map to
/// classes in order with the 0.9/0.1 levels.
///
/// Unlike [`kmeans_init`], rows do not all share the same sum, so the
/// augmented memberships are not confined to a hyperplane at the start.
pub fn kmeans_null_init(x: &AdjacencyMatrix, q: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = x.n();
    if q == 0 || q + 1 > n {
        return Err(OsbmError::InvalidInput(format!("cannot form {} clusters from {n} vertices", q + 1)));
    }
    let labels = kmeans_labels(x, q + 1, seed)?;
    let mut degree = vec![0.0; q + 1];
    let mut size = vec![0.0_f64; q + 1];
    for (i, &l) in labels.iter().enumerate() {
        degree[l] += (0..n).map(|j| x.value(i, j) + x.value(j, i)).sum::<f64>();
        size[l] += 1.0;
    }
    let null = (0..=q)
        .min_by(|&a, &b| (degree[a] / size[a].max(1.0)).total_cmp(&(degree[b] / size[b].max(1.0))))
        .expect("at least one cluster");
    Ok(DMatrix::from_fn(n, q, |i, c| {
        let l = labels[i];
        let class = if l == null { None } else if l > null { Some(l - 1) } else { Some(l) };
        if class == Some(c) {
            INIT_HIGH
        } else {
            INIT_LOW
        }
    }))
}

/// Deterministic child seed of `base` for the path `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15) ^ p.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Seed of restart `r` for candidate `q`. Independent of the number of
/// restarts, so adding restarts only appends fits.
pub fn restart_seed(seed: u64, q: usize, r: usize) -> u64 {
    derive_seed(seed, &[q as u64, r as u64])
}

/// Outcome of one restart.
#[derive(Debug, Clone, PartialEq)]
pub enum RestartOutcome {
    Fitted { il_osbm: f64, converged: bool },
    Failed(String),
}

impl RestartOutcome {
    pub fn il(&self) -> Option<f64> {
        match self {
            RestartOutcome::Fitted { il_osbm, .. } => Some(*il_osbm),
            RestartOutcome::Failed(_) => None,
        }
    }
}

/// Everything tried for one candidate number of classes.
#[derive(Debug, Clone)]
pub struct SelectionCell {
    pub q: usize,
    /// Highest-IL restart; `None` when every restart failed.
    pub best: Option<FitResult>,
    pub best_restart: Option<usize>,
    pub restarts: Vec<RestartOutcome>,
    pub wall_time: Duration,
}

impl SelectionCell {
    pub fn best_il(&self) -> Option<f64> {
        self.best.as_ref().map(|f| f.il_osbm)
    }
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub cells: Vec<SelectionCell>,
    pub q_star: usize,
    pub seed: u64,
    pub wall_time: Duration,
}

impl SelectionReport {
    pub fn cell(&self, q: usize) -> Option<&SelectionCell> {
        self.cells.iter().find(|c| c.q == q)
    }

    pub fn best(&self) -> &FitResult {
        self.cell(self.q_star).and_then(|c| c.best.as_ref()).expect("q_star always has a fit")
    }
}

/// Candidate with the highest IL; ties go to the smaller `q`.
pub fn argmax_q(cells: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(q, il) in cells {
        best = match best {
            Some((bq, bil)) if bil > il || (bil == il && bq < q) => Some((bq, bil)),
            _ => Some((q, il)),
        };
    }
    best.map(|b| b.0)
}

fn run_restart(x: &AdjacencyMatrix, q: usize, seed: u64, priors: &Hyperpriors, opts: &FitOptions, strategy: InitStrategy) -> Result<FitResult> {
    let init = strategy.init(x, q, seed)?;
    fit(x, q, &init, priors, opts)
}

/// Fits every `q` in `q_range` from `restarts` k-means starting points and
/// picks the `q` whose best restart has the highest IL_osbm.
///
/// Fits run on the global rayon pool; the report does not depend on the
/// number of threads.
pub fn select_q(
    x: &AdjacencyMatrix,
    q_range: &[usize],
    restarts: usize,
    priors: &PriorConstants,
    seed: u64,
    opts: &FitOptions,
) -> Result<SelectionReport> {
    select_q_with(x, q_range, restarts, priors, seed, opts, InitStrategy::default())
}

/// [`select_q`] with an explicit choice of starting points.
pub fn select_q_with(
    x: &AdjacencyMatrix,
    q_range: &[usize],
    restarts: usize,
    priors: &PriorConstants,
    seed: u64,
    opts: &FitOptions,
    strategy: InitStrategy,
) -> Result<SelectionReport> {
    if q_range.is_empty() {
        return Err(OsbmError::InvalidInput("empty range of class counts".into()));
    }
    if restarts == 0 {
        return Err(OsbmError::InvalidInput("at least one restart is required".into()));
    }
    let start = Instant::now();
    let tasks: Vec<(usize, usize)> = q_range.iter().flat_map(|&q| (0..restarts).map(move |r| (q, r))).collect();
    let results: Vec<(Result<FitResult>, Duration)> = tasks
        .par_iter()
        .map(|&(q, r)| {
            let t = Instant::now();
            let res = run_restart(x, q, restart_seed(seed, q, r), &priors.for_q(q), opts, strategy);
            (res, t.elapsed())
        })
        .collect();

    let mut cells = Vec::with_capacity(q_range.len());
    let mut results = results.into_iter();
    for &q in q_range {
        let mut cell = SelectionCell { q, best: None, best_restart: None, restarts: Vec::with_capacity(restarts), wall_time: Duration::ZERO };
        for r in 0..restarts {
            let (res, took) = results.next().expect("one result per task");
            cell.wall_time += took;
            match res {
                Ok(f) if f.il_osbm.is_finite() => {
                    cell.restarts.push(RestartOutcome::Fitted { il_osbm: f.il_osbm, converged: f.converged });
                    if cell.best_il().is_none_or(|b| f.il_osbm > b) {
                        cell.best = Some(f);
                        cell.best_restart = Some(r);
                    }
                }
                Ok(_) => cell.restarts.push(RestartOutcome::Failed("non-finite criterion".into())),
                Err(e) => cell.restarts.push(RestartOutcome::Failed(e.to_string())),
            }
        }
        cells.push(cell);
    }

    let scored: Vec<(usize, f64)> = cells.iter().filter_map(|c| c.best_il().map(|il| (c.q, il))).collect();
    let q_star = argmax_q(&scored).ok_or_else(|| OsbmError::SelectionFailed(format!("every restart failed for q in {q_range:?}")))?;
    Ok(SelectionReport { cells, q_star, seed, wall_time: start.elapsed() })
}
