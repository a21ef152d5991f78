//! OSBM domain types, the generative sampler and exact likelihood evaluators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OsbmError, Result};
use crate::mathkit::{log_logistic, logistic, SquareMatrix};

/// Directed binary graph on `n` vertices. The diagonal is stored as zero and
/// never read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    data: Vec<u8>,
}

impl AdjacencyMatrix {
    pub fn new(n: usize) -> Self {
        AdjacencyMatrix { n, data: vec![0; n * n] }
    }

    /// Builds a graph from `(src, dst)` pairs. Self loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut x = AdjacencyMatrix::new(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(OsbmError::InvalidInput(format!("edge ({i}, {j}) outside 0..{n}")));
            }
            if i == j {
                return Err(OsbmError::SelfLoop { line: 0, vertex: i });
            }
            x.set(i, j, true);
        }
        Ok(x)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        i != j && self.data[i * self.n + j] != 0
    }

    /// Edge indicator as a float, zero on the diagonal.
    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.get(i, j) {
            1.0
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, present: bool) {
        if i != j {
            self.data[i * self.n + j] = present as u8;
        }
    }

    /// Off-diagonal edges in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (0..self.n).filter(move |&j| self.get(i, j)).map(move |j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }
}

/// Binary `n x q` class membership matrix. All-zero rows are the null component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipMatrix {
    n: usize,
    q: usize,
    data: Vec<u8>,
}

impl MembershipMatrix {
    pub fn new(n: usize, q: usize) -> Self {
        MembershipMatrix { n, q, data: vec![0; n * q] }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let q = rows.first().map_or(0, |r| r.len());
        let mut z = MembershipMatrix::new(rows.len(), q);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != q {
                return Err(OsbmError::InvalidInput(format!("membership row {i} has {} entries, expected {q}", row.len())));
            }
            for (c, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(OsbmError::InvalidInput(format!("membership entry ({i}, {c}) is {v}")));
                }
                z.set(i, c, v == 1);
            }
        }
        Ok(z)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> bool {
        self.data[i * self.q + c] != 0
    }

    pub fn set(&mut self, i: usize, c: usize, member: bool) {
        self.data[i * self.q + c] = member as u8;
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    /// Number of classes vertex `i` belongs to.
    pub fn degree(&self, i: usize) -> usize {
        self.row(i).iter().map(|&v| v as usize).sum()
    }

    /// Copy with columns reordered: column `c` of the result is column `perm[c]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.q);
        let mut out = MembershipMatrix::new(self.n, self.q);
        for i in 0..self.n {
            for (c, &src) in perm.iter().enumerate() {
                out.set(i, c, self.get(i, src));
            }
        }
        out
    }
}

/// Ground-truth generative parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OsbmParameters {
    pub alpha: Vec<f64>,
    /// Class interaction matrix, `q x q`.
    pub w: SquareMatrix,
    /// Sender effects.
    pub u: Vec<f64>,
    /// Receiver effects.
    pub v: Vec<f64>,
    /// Sparsity: `logistic(w_star)` is the edge probability between two outliers.
    pub w_star: f64,
}

impl OsbmParameters {
    /// Community-structured parameters: `lambda` on the diagonal of `W`,
    /// `-epsilon` off the diagonal and `U = V = epsilon`.
    pub fn structured(alpha: Vec<f64>, lambda: f64, epsilon: f64, w_star: f64) -> Self {
        let q = alpha.len();
        let w = DMatrix::from_fn(q, q, |r, c| if r == c { lambda } else { -epsilon });
        OsbmParameters { alpha, w, u: vec![epsilon; q], v: vec![epsilon; q], w_star }
    }

    pub fn q(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if q == 0 {
            return Err(OsbmError::InvalidInput("at least one class is required".into()));
        }
        if self.w.shape() != (q, q) || self.u.len() != q || self.v.len() != q {
            return Err(OsbmError::InvalidInput("inconsistent parameter dimensions".into()));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(OsbmError::InvalidInput("class probabilities must lie in [0, 1]".into()));
        }
        let finite = self.w.iter().chain(&self.u).chain(&self.v).all(|x| x.is_finite()) && self.w_star.is_finite();
        if !finite {
            return Err(OsbmError::InvalidInput("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Prior constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    pub eta0: Vec<f64>,
    pub zeta0: Vec<f64>,
    pub a0: f64,
    pub b0: f64,
    /// Prior mean of vec(W-tilde), length `(q+1)^2`.
    pub w0_vec: Vec<f64>,
}

impl Hyperpriors {
    /// Jeffreys Beta(1/2, 1/2) on each class probability, Gamma(1, 1) on the
    /// precision and a zero prior mean.
    pub fn default_for(q: usize) -> Self {
        Self::with_constants(q, 0.5, 0.5, 1.0, 1.0)
    }

    pub fn with_constants(q: usize, eta0: f64, zeta0: f64, a0: f64, b0: f64) -> Self {
        Hyperpriors {
            eta0: vec![eta0; q],
            zeta0: vec![zeta0; q],
            a0,
            b0,
            w0_vec: vec![0.0; (q + 1) * (q + 1)],
        }
    }

    pub fn q(&self) -> usize {
        self.eta0.len()
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.eta0.len() != q || self.zeta0.len() != q || self.w0_vec.len() != (q + 1) * (q + 1) {
            return Err(OsbmError::InvalidInput(format!("hyperpriors do not match q = {q}")));
        }
        let positive = self.eta0.iter().chain(&self.zeta0).chain([&self.a0, &self.b0]).all(|&x| x > 0.0 && x.is_finite());
        if !positive {
            return Err(OsbmError::InvalidInput("prior constants must be positive".into()));
        }
        if self.w0_vec.iter().any(|x| !x.is_finite()) {
            return Err(OsbmError::InvalidInput("prior mean must be finite".into()));
        }
        Ok(())
    }
}

/// Packs `W`, `U`, `V` and `W*` into the `(q+1) x (q+1)` block matrix
/// `[[W, U], [V^T, W*]]`.
pub fn assemble_wtilde(p: &OsbmParameters) -> SquareMatrix {
    let q = p.q();
    DMatrix::from_fn(q + 1, q + 1, |r, c| match (r < q, c < q) {
        (true, true) => p.w[(r, c)],
        (true, false) => p.u[r],
        (false, true) => p.v[c],
        (false, false) => p.w_star,
    })
}

/// `(z_i, 1)^T W-tilde (z_j, 1)`.
pub fn edge_logit(z_i: &[u8], z_j: &[u8], wt: &SquareMatrix) -> f64 {
    let q = z_i.len();
    debug_assert_eq!(z_j.len(), q);
    debug_assert_eq!(wt.nrows(), q + 1);
    let aug = |z: &[u8], k: usize| if k == q { 1.0 } else { z[k] as f64 };
    let mut acc = 0.0;
    for r in 0..=q {
        let zr = aug(z_i, r);
        if zr == 0.0 {
            continue;
        }
        for c in 0..=q {
            acc += zr * wt[(r, c)] * aug(z_j, c);
        }
    }
    acc
}

/// Class proportions of geometric size, `alpha_q ∝ a^q`, normalised to one.
pub fn geometric_alpha(q_true: usize, a: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=q_true).map(|k| a.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

pub fn balanced_alpha(q_true: usize) -> Vec<f64> {
    vec![1.0 / q_true as f64; q_true]
}

/// Draws memberships then edges from a generator seeded with `seed`.
pub fn sample_network(p: &OsbmParameters, n: usize, seed: u64) -> Result<(AdjacencyMatrix, MembershipMatrix)> {
    sample_network_with(p, n, ChaCha8Rng::seed_from_u64(seed))
}

/// Sampler on an explicit generator. Memberships are drawn first (vertex
/// major, then class), then edges in row-major order.
pub fn sample_network_with<R: Rng>(p: &OsbmParameters, n: usize, mut rng: R) -> Result<(AdjacencyMatrix, MembershipMatrix)> {
    p.validate()?;
    if n < 2 {
        return Err(OsbmError::InvalidInput("a network needs at least two vertices".into()));
    }
    let q = p.q();
    let mut z = MembershipMatrix::new(n, q);
    for i in 0..n {
        for c in 0..q {
            let u: f64 = rng.random();
            z.set(i, c, u < p.alpha[c]);
        }
    }
    let wt = assemble_wtilde(p);
    let mut x = AdjacencyMatrix::new(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let prob = logistic(edge_logit(z.row(i), z.row(j), &wt));
            let u: f64 = rng.random();
            x.set(i, j, u < prob);
        }
    }
    Ok((x, z))
}

/// `log p(X | Z, W-tilde) = sum_{i != j} X_ij a_ij + log g(-a_ij)`.
pub fn complete_log_likelihood(x: &AdjacencyMatrix, z: &MembershipMatrix, wt: &SquareMatrix) -> f64 {
    let n = x.n();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = edge_logit(z.row(i), z.row(j), wt);
            acc += x.value(i, j) * a + log_logistic(-a);
        }
    }
    acc
}
