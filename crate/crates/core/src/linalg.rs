//! Profile (skyline) storage and LDL^T factorisation for the symmetric
//! tangent systems, plus a deterministic reverse Cuthill-McKee ordering.
//!
//! The factorisation keeps negative pivots: softening tangents are
//! indefinite near limit points and that is fine for a direct solve.  Only a
//! vanishing pivot is an error.

use std::collections::VecDeque;

use crate::error::SimError;

/// Relative pivot threshold: a pivot smaller than this times the largest
/// initial diagonal magnitude makes the factorisation fail.
const PIVOT_TOL: f64 = 1e-14;

/// Symmetric matrix stored column-wise from the first coupled row down to
/// the diagonal (upper triangle profile).
#[derive(Debug, Clone)]
pub struct SkylineMatrix {
    n: usize,
    /// Smallest row index coupled to each column.
    first: Vec<usize>,
    /// Start of each column's slice in `vals`; column j spans rows
    /// `first[j]..=j`, so the slice has length `j - first[j] + 1`.
    col_ptr: Vec<usize>,
    vals: Vec<f64>,
    factored: bool,
}

impl SkylineMatrix {
    /// Build the profile from dof cliques (one clique per element): every
    /// pair of dofs inside a clique may couple.
    pub fn from_cliques<I, C>(n: usize, cliques: I) -> Self
    where
        I: IntoIterator<Item = C>,
        C: AsRef<[usize]>,
    {
        let mut first: Vec<usize> = (0..n).collect();
        for clique in cliques {
            let dofs = clique.as_ref();
            if let Some(&lo) = dofs.iter().min() {
                for &j in dofs {
                    debug_assert!(j < n);
                    if lo < first[j] {
                        first[j] = lo;
                    }
                }
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0usize);
        for j in 0..n {
            col_ptr.push(col_ptr[j] + (j - first[j] + 1));
        }
        let nnz = *col_ptr.last().unwrap();
        SkylineMatrix {
            n,
            first,
            col_ptr,
            vals: vec![0.0; nnz],
            factored: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries, including the diagonal.
    pub fn profile_len(&self) -> usize {
        self.vals.len()
    }

    pub fn reset(&mut self) {
        self.vals.fill(0.0);
        self.factored = false;
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && i >= self.first[j]);
        self.col_ptr[j] + (i - self.first[j])
    }

    /// Accumulate a symmetric entry; (i, j) and (j, i) are the same slot.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(!self.factored, "matrix already factored");
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        assert!(
            i >= self.first[j],
            "entry ({i}, {j}) outside the assembled profile"
        );
        let at = self.idx(i, j);
        self.vals[at] += v;
    }

    /// Value at (i, j), zero outside the profile.  Only valid before
    /// factorisation.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if i < self.first[j] {
            0.0
        } else {
            self.vals[self.idx(i, j)]
        }
    }

    /// Overwrite row and column `k` with zeros and put `diag` on the
    /// diagonal: used to pin Dirichlet dofs while keeping symmetry.
    pub fn pin_dof(&mut self, k: usize, diag: f64) {
        debug_assert!(!self.factored);
        // Column k.
        let (lo, hi) = (self.col_ptr[k], self.col_ptr[k + 1]);
        self.vals[lo..hi].fill(0.0);
        let at = self.idx(k, k);
        self.vals[at] = diag;
        // Row k appears in later columns whose profile reaches up to k.
        for j in (k + 1)..self.n {
            if self.first[j] <= k {
                let at = self.idx(k, j);
                self.vals[at] = 0.0;
            }
        }
    }

    /// In-place LDL^T factorisation (active column algorithm).
    pub fn factor(&mut self) -> Result<(), SimError> {
        assert!(!self.factored, "matrix already factored");
        let n = self.n;
        let scale = (0..n)
            .map(|j| self.vals[self.idx(j, j)].abs())
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);

        for j in 0..n {
            let fj = self.first[j];
            let (done, col_j) = self.vals.split_at_mut(self.col_ptr[j]);
            let col_j = &mut col_j[..(j - fj + 1)];

            // c_ij = a_ij - sum_k l_ik c_kj over the overlap of profiles.
            for i in (fj + 1)..j {
                let fi = self.first[i];
                let k0 = fi.max(fj);
                let li = &done[self.col_ptr[i]..self.col_ptr[i + 1] - 1];
                let mut sum = 0.0;
                for k in k0..i {
                    let l_ik = li[k - fi];
                    let c_kj = col_j[k - fj];
                    sum += l_ik * c_kj;
                }
                col_j[i - fj] -= sum;
            }

            // d_j = a_jj - sum_k c_kj^2 / d_k, then scale the column to l.
            let mut djj = col_j[j - fj];
            for i in fj..j {
                let d_i = done[self.col_ptr[i + 1] - 1];
                let c_ij = col_j[i - fj];
                let l_ji = c_ij / d_i;
                djj -= l_ji * c_ij;
                col_j[i - fj] = l_ji;
            }
            if djj.abs() < PIVOT_TOL * scale {
                return Err(SimError::Solver(format!(
                    "vanishing pivot at equation {j} (|d| = {:.3e}, scale = {:.3e})",
                    djj.abs(),
                    scale
                )));
            }
            col_j[j - fj] = djj;
        }
        self.factored = true;
        Ok(())
    }

    /// Solve with the factored matrix; `b` is replaced by the solution.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert!(self.factored, "factor() must succeed before solving");
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // Forward: y_j = b_j - sum_i l_ji y_i.
        for j in 0..n {
            let fj = self.first[j];
            let col = &self.vals[self.col_ptr[j]..self.col_ptr[j + 1] - 1];
            let mut sum = 0.0;
            for (k, &l_ji) in col.iter().enumerate() {
                sum += l_ji * b[fj + k];
            }
            b[j] -= sum;
        }
        // Diagonal.
        for (j, bj) in b.iter_mut().enumerate() {
            *bj /= self.vals[self.col_ptr[j + 1] - 1];
        }
        // Backward: x_i -= l_ji x_j, sweeping columns from the right.
        for j in (0..n).rev() {
            let fj = self.first[j];
            let col = &self.vals[self.col_ptr[j]..self.col_ptr[j + 1] - 1];
            let xj = b[j];
            for (k, &l_ji) in col.iter().enumerate() {
                b[fj + k] -= l_ji * xj;
            }
        }
    }

    pub fn is_factored(&self) -> bool {
        self.factored
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph given by adjacency
/// lists.  Returns `order` with `order[new] = old`.  Fully deterministic:
/// each component starts from its minimum-(degree, id) vertex and neighbours
/// are visited sorted by (degree, id).
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    // Clean the lists: drop self-loops and duplicates so degrees are honest.
    let adj: Vec<Vec<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(v, list)| {
            let mut l: Vec<usize> = list.iter().copied().filter(|&u| u != v).collect();
            l.sort_unstable();
            l.dedup();
            l
        })
        .collect();
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    loop {
        let start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (deg[v], v));
        let Some(start) = start else { break };
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_unstable_by_key(|&u| (deg[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Inverse permutation: `perm[new] = old` becomes `inv[old] = new`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}
