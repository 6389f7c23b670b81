//! Communication graph and its incidence / Laplacian / edge-Laplacian
//! structure.
//!
//! Edges are undirected but carry a fixed orientation: tail = lower node
//! index, head = higher node index, and the edge index order is
//! lexicographic on (tail, head). This makes the incidence matrix, and
//! everything derived from it, deterministic across runs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    NodeOutOfRange(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
}

/// Undirected connected communication graph with oriented, indexed edges.
///
/// Node indices are 0-based. Edge `l` has endpoints `(tail, head)` with
/// `tail < head`; the incidence matrix entry is `-1` at the tail row and
/// `+1` at the head row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    edges_in: Vec<Vec<usize>>,
    edges_out: Vec<Vec<usize>>,
}

impl CommGraph {
    /// Build a graph from an explicit edge list. Edges are normalized to
    /// the canonical orientation and sorted; duplicates and self-loops are
    /// rejected, and the graph must be connected.
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut canon: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if a >= node_count || b >= node_count {
                return Err(GraphError::NodeOutOfRange(a, b, node_count));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        for w in canon.windows(2) {
            if w[0] == w[1] {
                return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
            }
        }
        let mut g = CommGraph {
            node_count,
            edges: canon,
            adjacency: Vec::new(),
            edges_in: Vec::new(),
            edges_out: Vec::new(),
        };
        g.rebuild_index();
        if !g.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(g)
    }

    /// Ring on `n` nodes (requires `n >= 3`).
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::new(n, &edges)
    }

    /// Path 0-1-...-(n-1).
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        Self::new(n, &edges)
    }

    /// Star with center 0.
    pub fn star(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (0, i)).collect();
        Self::new(n, &edges)
    }

    /// Erdos-Renyi style graph with edge probability `p`, resampled until
    /// connected. A random spanning tree is added first so small `p` still
    /// terminates.
    pub fn random_connected(n: usize, p: f64, seed: u64) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        // random spanning tree: attach each node to a random earlier one
        for i in 1..n {
            let j = (rng.random::<f64>() * i as f64) as usize;
            edges.push((j.min(i - 1), i));
        }
        for a in 0..n {
            for b in (a + 1)..n {
                if !edges.contains(&(a, b)) && rng.random::<f64>() < p {
                    edges.push((a, b));
                }
            }
        }
        Self::new(n, &edges)
    }

    fn rebuild_index(&mut self) {
        self.adjacency = vec![Vec::new(); self.node_count];
        self.edges_in = vec![Vec::new(); self.node_count];
        self.edges_out = vec![Vec::new(); self.node_count];
        for (l, &(t, h)) in self.edges.iter().enumerate() {
            self.adjacency[t].push(h);
            self.adjacency[h].push(t);
            self.edges_out[t].push(l);
            self.edges_in[h].push(l);
        }
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.node_count];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.node_count
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// (tail, head) of edge `l`.
    pub fn endpoints(&self, l: usize) -> (usize, usize) {
        self.edges[l]
    }

    /// Node neighbours of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Edges with head `i`.
    pub fn edges_in(&self, i: usize) -> &[usize] {
        &self.edges_in[i]
    }

    /// Edges with tail `i` (maintained by player `i`).
    pub fn edges_out(&self, i: usize) -> &[usize] {
        &self.edges_out[i]
    }

    /// All edges adjacent to node `i`.
    pub fn edges_adjacent(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.edges_out[i]
            .iter()
            .chain(self.edges_in[i].iter())
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    /// Edge neighbourhood of `l`: all edges adjacent to either endpoint of
    /// `l` (including `l` itself). These are exactly the nonzero entries of
    /// row `l` of the edge Laplacian.
    pub fn edge_neighborhood(&self, l: usize) -> Vec<usize> {
        let (t, h) = self.edges[l];
        let mut v = self.edges_adjacent(t);
        v.extend(self.edges_adjacent(h));
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Incidence matrix V (N x M): -1 at tail row, +1 at head row.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.node_count, self.edges.len());
        for (l, &(t, h)) in self.edges.iter().enumerate() {
            v[(t, l)] = -1.0;
            v[(h, l)] = 1.0;
        }
        v
    }

    /// Signed incidence entry V[i, l].
    pub fn incidence_entry(&self, i: usize, l: usize) -> f64 {
        let (t, h) = self.edges[l];
        if i == h {
            1.0
        } else if i == t {
            -1.0
        } else {
            0.0
        }
    }

    /// Node Laplacian L = V V^T.
    pub fn node_laplacian(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.node_count, self.node_count);
        for &(t, h) in &self.edges {
            l[(t, t)] += 1.0;
            l[(h, h)] += 1.0;
            l[(t, h)] -= 1.0;
            l[(h, t)] -= 1.0;
        }
        l
    }

    /// Edge Laplacian L^e = V^T V.
    pub fn edge_laplacian(&self) -> DMatrix<f64> {
        let m = self.edges.len();
        let mut le = DMatrix::zeros(m, m);
        for l in 0..m {
            for p in 0..m {
                let mut s = 0.0;
                for i in [self.edges[l].0, self.edges[l].1] {
                    s += self.incidence_entry(i, l) * self.incidence_entry(i, p);
                }
                le[(l, p)] = s;
            }
        }
        le
    }

    /// Maximum node degree d*.
    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }
}

impl CommGraph {
    pub fn edge_list(&self) -> &[(usize, usize)] {
        &self.edges
    }
}
