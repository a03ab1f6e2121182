//! Envelope (skyline) Cholesky for sparse symmetric positive definite systems,
//! with reverse Cuthill-McKee ordering to keep the profile small.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Symmetric matrix in envelope storage under a fill-reducing permutation.
/// Row `i` (permuted) stores columns `first[i]..=i`.
#[derive(Debug, Clone)]
pub struct EnvelopeMatrix {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inv[old] = new`
    inv: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
}

/// Lower Cholesky factor in the same envelope layout.
#[derive(Debug, Clone)]
pub struct EnvelopeFactor {
    m: EnvelopeMatrix,
}

/// Reverse Cuthill-McKee ordering of an undirected graph given as adjacency lists.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node remains");
        let root = pseudo_peripheral(adj, &degree, seed);
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], root: usize) -> Vec<usize> {
    let mut level = vec![usize::MAX; adj.len()];
    level[root] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    level
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut root = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(adj, root);
        let depth = level.iter().filter(|&&l| l != usize::MAX).max().copied().unwrap_or(0);
        if depth <= ecc {
            break;
        }
        ecc = depth;
        root = (0..adj.len())
            .filter(|&i| level[i] == depth)
            .min_by_key(|&i| (degree[i], i))
            .expect("deepest level is non-empty");
    }
    root
}

impl EnvelopeMatrix {
    /// Builds the matrix from `(row, col, value)` entries of the lower or
    /// upper triangle (each off-diagonal pair once; duplicates are summed).
    pub fn new(n: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(i, j, _) in entries {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let perm = reverse_cuthill_mckee(&adj);
        Self::with_ordering(n, entries, perm)
    }

    pub fn with_ordering(n: usize, entries: &[(usize, usize, f64)], perm: Vec<usize>) -> Self {
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j, _) in entries {
            let (a, b) = (inv[i], inv[j]);
            let (r, c) = if a >= b { (a, b) } else { (b, a) };
            first[r] = first[r].min(c);
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            start.push(total);
            total += i - first[i] + 1;
        }
        start.push(total);
        let mut m = Self {
            n,
            perm,
            inv,
            first,
            start,
            values: vec![0.0; total],
        };
        for &(i, j, v) in entries {
            let k = m.slot(m.inv[i], m.inv[j]);
            m.values[k] += v;
        }
        m
    }

    fn slot(&self, a: usize, b: usize) -> usize {
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        self.start[r] + (c - self.first[r])
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries (the profile).
    pub fn profile(&self) -> usize {
        self.values.len()
    }

    /// Adds `v` to diagonal entry `i` (original numbering).
    pub fn add_diagonal(&mut self, i: usize, v: f64) {
        let d = self.inv[i];
        let k = self.slot(d, d);
        self.values[k] += v;
    }

    /// In-place row-oriented Cholesky. A pivot that is not clearly positive
    /// relative to its original diagonal is reported as a singular system.
    pub fn factor(mut self) -> Result<EnvelopeFactor> {
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let lo = fi.max(fj);
                let mut s = self.values[si + (j - fi)];
                for k in lo..j {
                    s -= self.values[si + (k - fi)] * self.values[sj + (k - fj)];
                }
                let djj = self.values[sj + (j - fj)];
                self.values[si + (j - fi)] = s / djj;
            }
            let diag_pos = si + (i - fi);
            let original = self.values[diag_pos];
            let mut d = original;
            for k in fi..i {
                let l = self.values[si + (k - fi)];
                d -= l * l;
            }
            if !(d > 1e-10 * original.abs()) || !d.is_finite() {
                return Err(Error::Solver(format!(
                    "matrix is singular or indefinite (pivot {d:.3e} at row {})",
                    self.perm[i]
                )));
            }
            self.values[diag_pos] = d.sqrt();
        }
        Ok(EnvelopeFactor { m: self })
    }

    /// `y = A x` in original numbering.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let oi = self.perm[i];
            for j in self.first[i]..=i {
                let v = self.values[self.start[i] + (j - self.first[i])];
                let oj = self.perm[j];
                y[oi] += v * x[oj];
                if i != j {
                    y[oj] += v * x[oi];
                }
            }
        }
        y
    }
}

impl EnvelopeFactor {
    /// Solves `A x = b` with `b` in original numbering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let mut y: Vec<f64> = m.perm.iter().map(|&o| b[o]).collect();
        for i in 0..m.n {
            let fi = m.first[i];
            let si = m.start[i];
            let mut s = y[i];
            for k in fi..i {
                s -= m.values[si + (k - fi)] * y[k];
            }
            y[i] = s / m.values[si + (i - fi)];
        }
        for i in (0..m.n).rev() {
            let fi = m.first[i];
            let si = m.start[i];
            y[i] /= m.values[si + (i - fi)];
            let xi = y[i];
            for k in fi..i {
                y[k] -= m.values[si + (k - fi)] * xi;
            }
        }
        let mut x = vec![0.0; m.n];
        for (new, &old) in m.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
