//! Exact minimum-cost rectangular assignment (Hungarian / shortest augmenting path).
//!
//! Entries above the gate are forbidden. The solver replaces them with a sentinel that
//! exceeds any admissible total, so the optimum first maximises the number of admissible
//! matches and then minimises their cost; sentinel matches are dropped from the result.
//! Among equal-cost optima the lexicographically smallest match set by `(row, col)` is
//! returned.

use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix has {got} entries, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, got: usize },
    #[error("cost at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cost at ({row}, {col}) is negative")]
    Negative { row: usize, col: usize },
    #[error("gate must be a non-negative number")]
    Gate,
}

/// Dense row-major cost matrix with an admissibility ceiling.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    costs: Vec<T>,
    gate: T,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(rows: usize, cols: usize, costs: Vec<T>, gate: T) -> Result<Self, AssignmentError> {
        if costs.len() != rows * cols {
            return Err(AssignmentError::Shape { rows, cols, got: costs.len() });
        }
        if gate.is_nan() || gate < T::zero() {
            return Err(AssignmentError::Gate);
        }
        for (k, &c) in costs.iter().enumerate() {
            let (row, col) = (k / cols.max(1), k % cols.max(1));
            if !c.is_finite() {
                return Err(AssignmentError::NonFinite { row, col });
            }
            if c < T::zero() {
                return Err(AssignmentError::Negative { row, col });
            }
        }
        Ok(Self { rows, cols, costs, gate })
    }

    /// Builds the matrix by evaluating `f(row, col)` for every cell.
    pub fn from_fn(rows: usize, cols: usize, gate: T, mut f: impl FnMut(usize, usize) -> T) -> Result<Self, AssignmentError> {
        let mut costs = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                costs.push(f(r, c));
            }
        }
        Self::new(rows, cols, costs, gate)
    }

    pub fn ungated(rows: usize, cols: usize, costs: Vec<T>) -> Result<Self, AssignmentError> {
        Self::new(rows, cols, costs, T::infinity())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn gate(&self) -> T {
        self.gate
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.costs[row * self.cols + col]
    }

    #[inline]
    pub fn admissible(&self, row: usize, col: usize) -> bool {
        self.get(row, col) <= self.gate
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment<T> {
    /// Matched `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: T,
}

pub fn solve<T: Scalar>(m: &CostMatrix<T>) -> Assignment<T> {
    let (rows, cols) = (m.rows, m.cols);
    if rows == 0 || cols == 0 {
        return Assignment {
            matches: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            total_cost: T::zero(),
        };
    }

    let n = rows.max(cols);
    let mut max_admissible = T::zero();
    for r in 0..rows {
        for c in 0..cols {
            if m.admissible(r, c) {
                max_admissible = max_admissible.max(m.get(r, c));
            }
        }
    }
    let sentinel = (max_admissible + T::one()) * T::from_usize_lossy(rows.min(cols) + 1);
    let mut square = vec![T::zero(); n * n];
    for r in 0..rows {
        for c in 0..cols {
            square[r * n + c] = if m.admissible(r, c) { m.get(r, c) } else { sentinel };
        }
    }

    let (mut row_to_col, u, v) = hungarian(&square, n);
    let scale = sentinel.max(T::one());
    let tol = T::epsilon() * scale * T::from_usize_lossy(4 * n);
    lexicographic_refine(&square, n, &u, &v, tol, &mut row_to_col);

    let mut matches = Vec::new();
    let mut col_used = vec![false; cols];
    let mut total = T::zero();
    for r in 0..rows {
        let c = row_to_col[r];
        if c < cols && m.admissible(r, c) {
            matches.push((r, c));
            col_used[c] = true;
            total = total + m.get(r, c);
        }
    }
    let matched_rows: Vec<bool> = {
        let mut v = vec![false; rows];
        for &(r, _) in &matches {
            v[r] = true;
        }
        v
    };
    Assignment {
        unmatched_rows: (0..rows).filter(|&r| !matched_rows[r]).collect(),
        unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        matches,
        total_cost: total,
    }
}

/// Shortest augmenting path Hungarian on an `n x n` matrix.
///
/// Returns the row -> column assignment together with the row and column potentials,
/// which satisfy `cost[i][j] - u[i] - v[j] >= 0` with equality on matched cells.
fn hungarian<T: Scalar>(cost: &[T], n: usize) -> (Vec<usize>, Vec<T>, Vec<T>) {
    // 1-based with a virtual column 0, following the classical formulation.
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Moves an optimal assignment to the lexicographically smallest optimal one.
///
/// Every optimal assignment lives on the zero-reduced-cost (equality) graph of optimal
/// potentials. Rows are fixed in order; each tries its smaller columns and accepts the
/// first one reachable through an alternating cycle over unfixed rows.
fn lexicographic_refine<T: Scalar>(cost: &[T], n: usize, u: &[T], v: &[T], tol: T, row_to_col: &mut [usize]) {
    let tight = |r: usize, c: usize| cost[r * n + c] - u[r] - v[c] <= tol;
    let mut col_to_row = vec![0usize; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut fixed = vec![false; n];
    let mut parent_row = vec![usize::MAX; n];
    let mut visited = vec![false; n];

    for i in 0..n {
        let current = row_to_col[i];
        for j in 0..current {
            if !tight(i, j) {
                continue;
            }
            let k = col_to_row[j];
            if fixed[k] {
                continue;
            }
            // Search from row k (which must give up column j) for a path ending at `current`.
            visited.iter_mut().for_each(|x| *x = false);
            visited[i] = true;
            visited[k] = true;
            parent_row[k] = usize::MAX;
            let mut stack = vec![k];
            let mut found: Option<usize> = None;
            'search: while let Some(x) = stack.pop() {
                for y in 0..n {
                    if y == j || y == row_to_col[x] || !tight(x, y) {
                        continue;
                    }
                    if y == current {
                        found = Some(x);
                        break 'search;
                    }
                    let owner = col_to_row[y];
                    if fixed[owner] || visited[owner] {
                        continue;
                    }
                    visited[owner] = true;
                    parent_row[owner] = x;
                    stack.push(owner);
                }
            }
            if let Some(last) = found {
                // Walk back from `last`: each row on the path takes the column released by its successor.
                let mut row = last;
                let mut take = current;
                loop {
                    let released = row_to_col[row];
                    row_to_col[row] = take;
                    col_to_row[take] = row;
                    if row == k {
                        break;
                    }
                    take = released;
                    row = parent_row[row];
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        fixed[i] = true;
    }
}
