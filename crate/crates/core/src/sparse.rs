//! Coordinate-format sparse operators, an up-looking sparse Cholesky with
//! reverse Cuthill-McKee preordering, and a Jacobi-preconditioned conjugate
//! gradient fallback.

use crate::error::FemError;
use nalgebra::DMatrix;
use std::io::Write;

/// Assembled bilinear form in coordinate format. Duplicate entries add.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub symmetric: bool,
}

impl SparseOperator {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseOperator {
            nrows,
            ncols,
            entries: Vec::new(),
            symmetric: false,
        }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    pub fn to_csr(&self) -> Csr {
        Csr::from_coo(self.nrows, self.ncols, &self.entries)
    }

    /// Max-norm of the assembled matrix.
    pub fn max_abs(&self) -> f64 {
        self.to_csr().values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Verify the symmetry flag: ||A - A^T||_max below tol * max|A|.
    pub fn symmetry_defect(&self) -> f64 {
        let csr = self.to_csr();
        let mut worst = 0.0f64;
        for i in 0..self.nrows {
            for idx in csr.row_range(i) {
                let j = csr.col_idx[idx];
                let v = csr.values[idx];
                let vt = csr.get(j, i);
                worst = worst.max((v - vt).abs());
            }
        }
        worst
    }

    /// Write coordinate-format text, one `i j value` line per entry of the
    /// deduplicated matrix.
    pub fn export_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let csr = self.to_csr();
        for i in 0..self.nrows {
            for idx in csr.row_range(i) {
                writeln!(w, "{} {} {:.17e}", i, csr.col_idx[idx], csr.values[idx])?;
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> SparseOperator {
        SparseOperator {
            nrows: self.ncols,
            ncols: self.nrows,
            entries: self.entries.iter().map(|&(i, j, v)| (j, i, v)).collect(),
            symmetric: self.symmetric,
        }
    }
}

/// Compressed sparse row matrix with summed duplicates.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_coo(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(i, j, v) in entries {
            per_row[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_unstable_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Csr {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for idx in self.row_range(i) {
            if self.col_idx[idx] == j {
                return self.values[idx];
            }
        }
        0.0
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for idx in self.row_range(i) {
                acc += self.values[idx] * x[self.col_idx[idx]];
            }
            y[i] = acc;
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric pattern.
pub fn rcm_order(a: &Csr) -> Vec<usize> {
    let n = a.nrows;
    let degree = |i: usize| a.row_range(i).len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        // lowest-degree unvisited start node
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree(i));
        let Some(start) = start else { break };
        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = a.row_range(u)
                .map(|idx| a.col_idx[idx])
                .filter(|&v| v != u && !visited[v])
                .collect();
            nbrs.sort_unstable_by_key(|&v| degree(v));
            for v in nbrs {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    order.reverse();
    order
}

/// Sparse Cholesky factor of an SPD matrix (up-looking LL^T on the
/// RCM-permuted matrix).
pub struct SparseCholesky {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    // lower-triangular factor stored by columns
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(a: &SparseOperator) -> Result<Self, FemError> {
        let n = a.nrows;
        if n != a.ncols {
            return Err(FemError::SolverFailure("matrix not square".into()));
        }
        let csr = a.to_csr();
        let perm = rcm_order(&csr);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        // permuted lower-triangular rows (i >= j), row-wise
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for old_i in 0..n {
            for idx in csr.row_range(old_i) {
                let old_j = csr.col_idx[idx];
                let (i, j) = (iperm[old_i], iperm[old_j]);
                if i >= j {
                    rows[i].push((j, csr.values[idx]));
                }
            }
        }
        for r in &mut rows {
            r.sort_unstable_by_key(|e| e.0);
        }
        // up-looking factorization: compute row i of L from rows < i.
        // L stored column-wise for the triangular solves.
        let mut lcols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut diag = vec![0.0f64; n];
        // row pattern work arrays
        let mut x = vec![0.0f64; n];
        let mut pattern: Vec<usize> = Vec::new();
        let mut marked = vec![usize::MAX; n];
        for i in 0..n {
            // scatter row i of A (lower part)
            pattern.clear();
            for &(j, v) in &rows[i] {
                if marked[j] != i {
                    marked[j] = i;
                    pattern.push(j);
                    x[j] = v;
                } else {
                    x[j] += v;
                }
            }
            // sparse triangular solve: process columns in ascending order
            let mut head = 0;
            pattern.sort_unstable();
            while head < pattern.len() {
                let j = pattern[head];
                head += 1;
                if j == i {
                    continue;
                }
                let xj = x[j] / diag[j];
                x[j] = xj;
                for &(r, v) in &lcols[j] {
                    if r <= j || r >= i {
                        continue;
                    }
                    if marked[r] != i {
                        marked[r] = i;
                        x[r] = 0.0;
                        // insert keeping the scan ordered
                        let pos = pattern[head..]
                            .iter()
                            .position(|&p| p > r)
                            .map(|p| p + head)
                            .unwrap_or(pattern.len());
                        pattern.insert(pos, r);
                    }
                    x[r] -= v * xj;
                }
            }
            // diagonal
            let mut dii = if marked[i] == i { x[i] } else { 0.0 };
            for &j in pattern.iter() {
                if j < i {
                    dii -= x[j] * x[j];
                }
            }
            if !(dii > 0.0) {
                return Err(FemError::SolverFailure(format!(
                    "matrix not positive definite at pivot {i} ({dii:.3e})"
                )));
            }
            dii = dii.sqrt();
            diag[i] = dii;
            for &j in pattern.iter() {
                if j < i {
                    let v = x[j];
                    if v != 0.0 {
                        lcols[j].push((i, v));
                    }
                }
            }
            lcols[i].push((i, dii));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in &lcols {
            for &(r, v) in col {
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseCholesky {
            n,
            perm,
            iperm,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            y[i] = b[self.perm[i]];
        }
        // forward solve L z = y (column-oriented)
        for j in 0..n {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            // diagonal entry is the first of the column by construction?
            // columns carry (i, v) with i >= j appended in ascending i except
            // the diagonal is appended last; locate it explicitly.
            let mut djj = 0.0;
            for idx in start..end {
                if self.row_idx[idx] == j {
                    djj = self.values[idx];
                    break;
                }
            }
            let zj = y[j] / djj;
            y[j] = zj;
            for idx in start..end {
                let i = self.row_idx[idx];
                if i != j {
                    y[i] -= self.values[idx] * zj;
                }
            }
        }
        // backward solve L^T x = z (column j of L is row j of L^T)
        for j in (0..n).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let mut acc = y[j];
            let mut djj = 0.0;
            for idx in start..end {
                let i = self.row_idx[idx];
                if i == j {
                    djj = self.values[idx];
                } else {
                    acc -= self.values[idx] * y[i];
                }
            }
            y[j] = acc / djj;
        }
        let mut x = vec![0.0f64; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[allow(dead_code)]
    fn iperm(&self) -> &[usize] {
        &self.iperm
    }
}

/// Jacobi-preconditioned conjugate gradients.
pub fn solve_cg(
    a: &Csr,
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize), FemError> {
    let n = a.nrows;
    let mut diag = vec![0.0f64; n];
    for i in 0..n {
        let d = a.get(i, i);
        diag[i] = if d.abs() > 0.0 { 1.0 / d } else { 1.0 };
    }
    let mut x = vec![0.0f64; n];
    let mut r = b.to_vec();
    let bnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(v, d)| v * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0f64; n];
    for it in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(FemError::SolverFailure(
                "CG: system not positive definite".into(),
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= rel_tol * bnorm {
            return Ok((x, it + 1));
        }
        for i in 0..n {
            z[i] = r[i] * diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(FemError::SolverFailure(format!(
        "CG did not converge in {max_iter} iterations"
    )))
}

/// Solver choice for SPD systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdSolver {
    Cholesky,
    Cg,
}

/// Solve an SPD system with the requested method; Cholesky falls back to CG
/// if the factorization fails.
pub fn solve_spd(
    a: &SparseOperator,
    b: &[f64],
    method: SpdSolver,
) -> Result<Vec<f64>, FemError> {
    match method {
        SpdSolver::Cholesky => match SparseCholesky::factor(a) {
            Ok(f) => Ok(f.solve(b)),
            Err(_) => solve_cg(&a.to_csr(), b, 1e-12, 100_000).map(|(x, _)| x),
        },
        SpdSolver::Cg => solve_cg(&a.to_csr(), b, 1e-12, 100_000).map(|(x, _)| x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn laplace_1d(n: usize) -> SparseOperator {
        let mut a = SparseOperator::new(n, n);
        for i in 0..n {
            a.push(i, i, 2.0);
            if i > 0 {
                a.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.push(i, i + 1, -1.0);
            }
        }
        a.symmetric = true;
        a
    }

    #[test]
    fn cholesky_matches_dense_solve() {
        let mut rng = StdRng::seed_from_u64(11);
        let n = 60;
        let a = laplace_1d(n);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = SparseCholesky::factor(&a).unwrap().solve(&b);
        let dense = a.to_dense();
        let xd = dense
            .lu()
            .solve(&nalgebra::DVector::from_vec(b.clone()))
            .unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_random_spd() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = 40;
        // SPD: A = B^T B + n I on a random sparse-ish B
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.random_range(0.0..1.0) < 0.2 {
                    dense[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let spd = dense.transpose() * &dense + DMatrix::identity(n, n) * n as f64;
        let mut a = SparseOperator::new(n, n);
        for i in 0..n {
            for j in 0..n {
                if spd[(i, j)] != 0.0 {
                    a.push(i, j, spd[(i, j)]);
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = SparseCholesky::factor(&a).unwrap().solve(&b);
        let xd = spd.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_agrees_with_cholesky() {
        let n = 50;
        let a = laplace_1d(n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let x1 = SparseCholesky::factor(&a).unwrap().solve(&b);
        let (x2, iters) = solve_cg(&a.to_csr(), &b, 1e-13, 10_000).unwrap();
        assert!(iters > 0);
        for i in 0..n {
            assert!((x1[i] - x2[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn indefinite_reported() {
        let mut a = SparseOperator::new(2, 2);
        a.push(0, 0, 1.0);
        a.push(1, 1, -1.0);
        assert!(SparseCholesky::factor(&a).is_err());
    }

    #[test]
    fn coo_export_lines() {
        let a = laplace_1d(3);
        let mut buf = Vec::new();
        a.export_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().starts_with("0 0 "));
    }
}
