//! Agent graphs and Metropolis mixing matrices.

use std::collections::BTreeSet;

use nalgebra::SymmetricEigen;
use rand::Rng;

use crate::error::{Error, MixingViolation, Result};
use crate::linalg::{self, Mat};
use crate::seed::stream_rng;

/// Maximum redraws when an Erdős–Rényi sample comes out disconnected.
pub const ER_MAX_ATTEMPTS: usize = 100;

const MIXING_TOL: f64 = 1e-12;

/// Undirected simple graph on vertices 0..n.
///
/// Construction rejects self-loops and out-of-range vertices; duplicate edges
/// collapse. Connectivity is a property checked by consumers
/// ([`metropolis_weights`]) and guaranteed by the generators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    pub fn new<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!("edge ({i},{j}) out of range for n={n}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Graph { n, edges: set })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges as (i, j) with i < j, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Mat {
        let mut a = Mat::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    pub fn to_text(&self) -> String {
        linalg::matrix_to_text(&self.adjacency())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let a = linalg::matrix_from_text(text)?;
        if a.nrows() != a.ncols() {
            return Err(Error::Format {
                field: "adjacency",
                detail: format!("{}x{} is not square", a.nrows(), a.ncols()),
            });
        }
        let mut edges = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Format {
                        field: "adjacency",
                        detail: format!("entry ({i},{j}) = {v} is not 0 or 1"),
                    });
                }
                if v != a[(j, i)] {
                    return Err(Error::Format {
                        field: "adjacency",
                        detail: format!("entry ({i},{j}) is not symmetric"),
                    });
                }
                if i < j && v == 1.0 {
                    edges.push((i, j));
                }
            }
        }
        Graph::new(a.nrows(), edges)
    }
}

pub fn gen_ring(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::InvalidSize(format!("ring needs n >= 3, got {n}")));
    }
    Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
}

/// G(n, p) conditioned on connectivity.
///
/// Attempt `a` draws every pair (i < j, lexicographic) from stream `a` of
/// `seed`; the first connected draw is returned.
pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("Erdos-Renyi graph needs n >= 2, got {n}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("edge probability must lie in (0, 1], got {p}")));
    }
    for attempt in 0..ER_MAX_ATTEMPTS {
        let mut rng = stream_rng(seed, attempt as u64);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::new(n, edges)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::GenerationFailure {
        n,
        p,
        attempts: ER_MAX_ATTEMPTS,
    })
}

/// A validated symmetric doubly stochastic matrix with its spectral data.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: Mat,
    sigma2: f64,
}

impl MixingMatrix {
    pub fn matrix(&self) -> &Mat {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    /// Second largest singular value.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Spectral gap 1 − σ₂.
    pub fn rho(&self) -> f64 {
        1.0 - self.sigma2
    }

    /// Nonzero off-diagonal (j, W_ij) pairs of row i plus the diagonal, in
    /// increasing j.
    pub fn row_support(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n()).filter_map(move |j| {
            let v = self.w[(i, j)];
            (v != 0.0).then_some((j, v))
        })
    }

    /// Σ_j W_ij·blocks[j], accumulated in increasing j.
    pub fn mix_row(&self, i: usize, blocks: &[Mat]) -> Mat {
        let mut acc = Mat::zeros(blocks[0].nrows(), blocks[0].ncols());
        for (j, wij) in self.row_support(i) {
            acc += &blocks[j] * wij;
        }
        acc
    }

    /// W applied block-wise: row i of the result is Σ_j W_ij·blocks[j].
    pub fn mix(&self, blocks: &[Mat]) -> Vec<Mat> {
        (0..self.n()).map(|i| self.mix_row(i, blocks)).collect()
    }

    pub fn to_text(&self) -> String {
        linalg::matrix_to_text(&self.w)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        validate_mixing(&linalg::matrix_from_text(text)?)
    }
}

/// W_ij = 1/(1 + max(deg_i, deg_j)) on edges, W_ii = 1 − Σ_{j≠i} W_ij.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    if g.n() < 2 {
        return Err(Error::InvalidGraph(format!("mixing needs n >= 2, got {}", g.n())));
    }
    if !g.is_connected() {
        return Err(Error::InvalidGraph("graph is disconnected (sigma2 would be 1)".into()));
    }
    let deg = g.degrees();
    let n = g.n();
    let mut w = Mat::zeros(n, n);
    for (i, j) in g.edges() {
        let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    validate_mixing(&w)
}

/// Eigenvalues of a symmetric matrix in decreasing order.
pub fn sorted_eigenvalues(w: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(w.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    ev
}

/// Checks symmetry, nonnegativity, diagonal in (0,1), unit row sums and the
/// spectrum, then records σ₂.
pub fn validate_mixing(w: &Mat) -> Result<MixingMatrix> {
    let fail = |violation, detail: String| Err(Error::InvalidMixing { violation, detail });
    let n = w.nrows();
    if n != w.ncols() || n == 0 {
        return fail(MixingViolation::NotSquare, format!("{}x{}", w.nrows(), w.ncols()));
    }
    if !linalg::all_finite(w) {
        return fail(MixingViolation::NegativeEntry, "non-finite entry".into());
    }
    let asym = linalg::max_abs(&(w - w.transpose()));
    if asym > MIXING_TOL {
        return fail(MixingViolation::Asymmetry, format!("max |W - Wᵀ| = {asym:e}"));
    }
    if let Some(((i, j), v)) = w.iter().enumerate().map(|(k, v)| ((k % n, k / n), *v)).find(|(_, v)| *v < 0.0) {
        return fail(MixingViolation::NegativeEntry, format!("W[{i},{j}] = {v}"));
    }
    for i in 0..n {
        let d = w[(i, i)];
        // a single agent (n = 1) trivially averages with itself
        if n > 1 && !(d > 0.0 && d < 1.0) {
            return fail(MixingViolation::DiagonalOutOfRange, format!("W[{i},{i}] = {d}"));
        }
        let s: f64 = w.row(i).iter().sum();
        if (s - 1.0).abs() > MIXING_TOL {
            return fail(MixingViolation::RowSum, format!("row {i} sums to {s}"));
        }
    }
    let ev = sorted_eigenvalues(w);
    if ev[0] > 1.0 + MIXING_TOL {
        return fail(MixingViolation::EigenvalueOutOfRange, format!("eigenvalue {} > 1", ev[0]));
    }
    let lowest = ev[n - 1];
    if lowest <= -1.0 + MIXING_TOL {
        return fail(MixingViolation::EigenvalueOutOfRange, format!("eigenvalue {lowest} <= -1"));
    }
    let sigma2 = ev[1..].iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if sigma2 >= 1.0 - MIXING_TOL {
        return fail(MixingViolation::SpectralGap, format!("sigma2 = {sigma2}"));
    }
    Ok(MixingMatrix { w: w.clone(), sigma2 })
}
