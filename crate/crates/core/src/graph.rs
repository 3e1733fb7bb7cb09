//! Communication graphs and their Laplacians.
//!
//! A [`LaplacianGraph`] stores only sorted neighbor lists; the Laplacian row of
//! node `i` is `deg(i)` on the diagonal and `-1` for every neighbor. The
//! Kronecker-lifted product `(L ⊗ I_p) x` is applied block-wise through
//! [`LaplacianGraph::apply_row`], which is the single summation routine shared by
//! the distributed simulator and the whole-network reference path.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of Erdős–Rényi samples drawn before giving up on connectivity.
pub const ER_MAX_ATTEMPTS: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyKind {
    /// Node 0 is the hub.
    Star,
    Cycle,
    ErdosRenyi {
        edge_probability: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Topology {
    pub kind: TopologyKind,
    pub node_count: usize,
}

impl Topology {
    pub fn new(kind: TopologyKind, node_count: usize) -> Result<Self> {
        let topology = Topology { kind, node_count };
        topology.validate()?;
        Ok(topology)
    }

    pub fn star(node_count: usize) -> Self {
        Topology {
            kind: TopologyKind::Star,
            node_count,
        }
    }

    pub fn cycle(node_count: usize) -> Self {
        Topology {
            kind: TopologyKind::Cycle,
            node_count,
        }
    }

    pub fn erdos_renyi(node_count: usize, edge_probability: f64, seed: u64) -> Self {
        Topology {
            kind: TopologyKind::ErdosRenyi { edge_probability, seed },
            node_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count < 2 {
            return Err(Error::InvalidTopology(format!(
                "node count must be at least 2, got {}",
                self.node_count
            )));
        }
        if let TopologyKind::ErdosRenyi { edge_probability, .. } = self.kind {
            if !(edge_probability > 0.0 && edge_probability <= 1.0) {
                return Err(Error::InvalidTopology(format!(
                    "edge probability must lie in (0, 1], got {edge_probability}"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            TopologyKind::Star => "star",
            TopologyKind::Cycle => "cycle",
            TopologyKind::ErdosRenyi { .. } => "erdos_renyi",
        }
    }
}

/// Undirected, unweighted, connected graph with cached Laplacian spectral bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianGraph {
    neighbors: Vec<Vec<usize>>,
    lambda_max: f64,
    lambda_min_pos: f64,
    resamples: u32,
}

pub fn build_graph(topology: &Topology) -> Result<LaplacianGraph> {
    topology.validate()?;
    let n = topology.node_count;
    let (neighbors, resamples) = match topology.kind {
        TopologyKind::Star => {
            let mut lists = vec![Vec::new(); n];
            for leaf in 1..n {
                lists[0].push(leaf);
                lists[leaf].push(0);
            }
            (lists, 0)
        }
        TopologyKind::Cycle => {
            let mut lists = vec![Vec::new(); n];
            if n == 2 {
                lists[0].push(1);
                lists[1].push(0);
            } else {
                for (i, list) in lists.iter_mut().enumerate() {
                    list.push((i + n - 1) % n);
                    list.push((i + 1) % n);
                }
            }
            (lists, 0)
        }
        TopologyKind::ErdosRenyi { edge_probability, seed } => sample_connected_er(n, edge_probability, seed)?,
    };
    let mut graph = LaplacianGraph::from_neighbor_lists(neighbors)?;
    graph.resamples = resamples;
    Ok(graph)
}

fn sample_connected_er(n: usize, prob: f64, seed: u64) -> Result<(Vec<Vec<usize>>, u32)> {
    for attempt in 0..ER_MAX_ATTEMPTS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut lists = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < prob {
                    lists[i].push(j);
                    lists[j].push(i);
                }
            }
        }
        if is_connected(&lists) {
            return Ok((lists, attempt));
        }
    }
    Err(Error::ConnectivityFailure {
        attempts: ER_MAX_ATTEMPTS,
        nodes: n,
        edge_probability: prob,
    })
}

fn is_connected(lists: &[Vec<usize>]) -> bool {
    if lists.is_empty() {
        return false;
    }
    let mut seen = vec![false; lists.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &j in &lists[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == lists.len()
}

impl LaplacianGraph {
    /// Builds a graph from adjacency lists. Lists are sorted and deduplicated;
    /// the result must be symmetric, loop-free and connected.
    pub fn from_neighbor_lists(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "node count must be at least 2, got {n}"
            )));
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::InvalidTopology(format!(
                    "node {i} has an out-of-range neighbor or a self loop"
                )));
            }
        }
        let mut graph = LaplacianGraph {
            neighbors,
            lambda_max: 0.0,
            lambda_min_pos: 0.0,
            resamples: 0,
        };
        graph.check_symmetry()?;
        if !is_connected(&graph.neighbors) {
            return Err(Error::InvalidTopology("graph is not connected".into()));
        }
        let (lambda_max, lambda_min_pos) = graph.compute_spectral_bounds()?;
        graph.lambda_max = lambda_max;
        graph.lambda_min_pos = lambda_min_pos;
        Ok(graph)
    }

    /// Wraps neighbor lists without any validation. Used to inject faults into
    /// the invariant suite; everything else should go through
    /// [`LaplacianGraph::from_neighbor_lists`].
    #[doc(hidden)]
    pub fn from_raw_parts_unchecked(neighbors: Vec<Vec<usize>>) -> Self {
        LaplacianGraph {
            neighbors,
            lambda_max: f64::NAN,
            lambda_min_pos: f64::NAN,
            resamples: 0,
        }
    }

    /// The degenerate single-agent network (L = 0). Smoke tests only.
    pub fn singleton() -> Self {
        LaplacianGraph {
            neighbors: vec![Vec::new()],
            lambda_max: 0.0,
            lambda_min_pos: 0.0,
            resamples: 0,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.neighbors.len() == 1
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Iterates over undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn lambda_min_pos(&self) -> f64 {
        self.lambda_min_pos
    }

    /// Number of rejected Erdős–Rényi samples before a connected one was found.
    pub fn resamples(&self) -> u32 {
        self.resamples
    }

    pub fn spectral_bounds(&self) -> (f64, f64) {
        (self.lambda_max, self.lambda_min_pos)
    }

    fn compute_spectral_bounds(&self) -> Result<(f64, f64)> {
        let eig = self.laplacian_eigenvalues()?;
        let lambda_max = *eig.last().expect("non-empty spectrum");
        let tol = 1e-9 * lambda_max.max(1.0);
        if eig[0].abs() > tol {
            return Err(Error::Eigensolver(format!(
                "smallest Laplacian eigenvalue {} is not zero",
                eig[0]
            )));
        }
        let lambda_min_pos = eig[1];
        if lambda_min_pos <= tol {
            return Err(Error::InvalidTopology("graph is not connected".into()));
        }
        Ok((lambda_max, lambda_min_pos))
    }

    /// Sorted eigenvalues of the dense Laplacian.
    pub fn laplacian_eigenvalues(&self) -> Result<Vec<f64>> {
        let dense = self.dense_laplacian();
        let eig = SymmetricEigen::try_new(dense, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigensolver("symmetric QR did not converge".into()))?;
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        Ok(values)
    }

    pub fn dense_laplacian(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut l = DMatrix::zeros(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            l[(i, i)] = list.len() as f64;
            for &j in list {
                l[(i, j)] = -1.0;
            }
        }
        l
    }

    /// Dense Laplacian as CSV text (one row per line).
    pub fn laplacian_csv(&self) -> String {
        let dense = self.dense_laplacian();
        let mut out = String::new();
        for i in 0..dense.nrows() {
            let row: Vec<String> = (0..dense.ncols()).map(|j| dense[(i, j)].to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Writes block `i` of `(L ⊗ I_p) x` into `out`, reading neighbor blocks through
    /// `block`. Summation runs over neighbors in sorted order: `deg·x_i − x_j1 − x_j2 − …`.
    #[inline]
    pub fn apply_row<'a, F>(&self, i: usize, own: &[f64], mut block: F, out: &mut [f64])
    where
        F: FnMut(usize) -> &'a [f64],
    {
        let deg = self.degree(i) as f64;
        for (o, &x) in out.iter_mut().zip(own) {
            *o = deg * x;
        }
        for &j in &self.neighbors[i] {
            let xj = block(j);
            for (o, &x) in out.iter_mut().zip(xj) {
                *o -= x;
            }
        }
    }

    /// `(L ⊗ I_p) x` for a stacked vector of `n` blocks of length `block_dim`.
    pub fn laplacian_apply(&self, x: &[f64], block_dim: usize) -> Result<Vec<f64>> {
        let n = self.node_count();
        if x.len() != n * block_dim {
            return Err(Error::DimensionMismatch {
                expected: n * block_dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; x.len()];
        let p = block_dim;
        for (i, dst) in out.chunks_mut(p.max(1)).enumerate().take(n) {
            self.apply_row(i, &x[i * p..(i + 1) * p], |j| &x[j * p..(j + 1) * p], dst);
        }
        Ok(out)
    }

    /// `xᵀ (L ⊗ I_p) x`, summed edge by edge so the result is never negative.
    pub fn quadratic_form(&self, x: &[f64], block_dim: usize) -> Result<f64> {
        let n = self.node_count();
        if x.len() != n * block_dim {
            return Err(Error::DimensionMismatch {
                expected: n * block_dim,
                got: x.len(),
            });
        }
        let p = block_dim;
        let mut total = 0.0;
        for (i, j) in self.edges() {
            let xi = &x[i * p..(i + 1) * p];
            let xj = &x[j * p..(j + 1) * p];
            total += xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total)
    }

    fn check_symmetry(&self) -> Result<()> {
        let n = self.neighbors.len();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if j >= n || self.neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvariantViolation(format!(
                        "Laplacian symmetry: node {j} does not list {i} as a neighbor"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Re-checks every structural and spectral invariant of the Laplacian.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.neighbors.len();
        for (i, list) in self.neighbors.iter().enumerate() {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvariantViolation(format!(
                    "Laplacian row {i}: neighbor list not strictly sorted"
                )));
            }
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::InvariantViolation(format!(
                    "Laplacian row {i}: invalid neighbor index"
                )));
            }
        }
        self.check_symmetry()?;
        // Row sums vanish: deg(i) − |N(i)| = 0 by construction; check on the dense form.
        let dense = self.dense_laplacian();
        for i in 0..n {
            let row_sum: f64 = dense.row(i).iter().sum();
            if row_sum != 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "Laplacian row {i} sums to {row_sum}"
                )));
            }
        }
        if !is_connected(&self.neighbors) {
            return Err(Error::InvariantViolation("graph is not connected".into()));
        }
        let (lmax, lmin) = self.compute_spectral_bounds()?;
        if !(lmin > 0.0) {
            return Err(Error::InvariantViolation("rank(L) < n - 1".into()));
        }
        if lmax > 2.0 * self.max_degree() as f64 * (1.0 + 1e-12) {
            return Err(Error::InvariantViolation(format!(
                "lambda_max {lmax} exceeds 2 * max degree"
            )));
        }
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-8 * b.abs().max(1.0);
        if !rel(self.lambda_max, lmax) || !rel(self.lambda_min_pos, lmin) {
            return Err(Error::InvariantViolation(
                "cached spectral bounds disagree with the Laplacian".into(),
            ));
        }
        Ok(())
    }
}
