//! Sparse matrix storage and linear solvers.
//!
//! The direct path wraps the supernodal sparse LU of `faer`. The iterative
//! path is restarted GMRES with an ILU(0) right preconditioner.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Clone, Debug, Default)]
pub struct TripletBuilder {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.entries.push((i, j, v));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn build(self) -> CsrMatrix {
        CsrMatrix::from_triplets(self.nrows, self.ncols, self.entries)
    }
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds the matrix by a counting sort on rows followed by a stable sort
    /// of each row, so the summation order of duplicates is the input order.
    pub fn from_triplets(nrows: usize, ncols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, _, _) in &entries {
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; entries.len()];
        let mut vals = vec![0.0; entries.len()];
        for (i, j, v) in entries {
            let k = next[i];
            cols[k] = j;
            vals[k] = v;
            next[i] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(cols.len());
        let mut values = Vec::with_capacity(cols.len());
        indptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for i in 0..nrows {
            let (a, b) = (counts[i], counts[i + 1]);
            order.clear();
            order.extend(a..b);
            order.sort_by_key(|&k| cols[k]);
            let mut last = usize::MAX;
            for &k in &order {
                if cols[k] == last {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    indices.push(cols[k]);
                    values.push(vals[k]);
                    last = cols[k];
                }
            }
            indptr.push(indices.len());
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut entries = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_triplets(nrows, ncols, entries)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn transpose_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (j, v) in self.row(i) {
                    y[j] += v * xi;
                }
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut entries = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                entries.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, entries)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push(Triplet::new(i, j, v));
            }
        }
        SparseColMat::<usize, f64>::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| Error::LinearSolver(format!("invalid sparse structure: {e:?}")))
    }

    /// Rows that have no stored nonzero value.
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.nrows)
            .filter(|&i| self.row(i).all(|(_, v)| v == 0.0))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolverKind {
    SparseDirect,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSolverConfig {
    pub kind: LinearSolverKind,
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub restart: usize,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        Self {
            kind: LinearSolverKind::SparseDirect,
            rel_tol: 1e-6,
            max_iterations: 2000,
            restart: 100,
        }
    }
}

/// A factorized square matrix that can be applied to many right-hand sides,
/// including transposed solves for adjoint problems.
pub enum Factorization {
    Direct {
        n: usize,
        lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    },
    Iterative {
        a: CsrMatrix,
        ilu: Ilu0,
        transposed: Option<(CsrMatrix, Ilu0)>,
        config: LinearSolverConfig,
    },
}

impl Factorization {
    pub fn new(a: &CsrMatrix, config: &LinearSolverConfig) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::LinearSolver(format!(
                "matrix is not square ({}x{})",
                a.nrows, a.ncols
            )));
        }
        if let Some(&row) = a.empty_rows().first() {
            return Err(Error::LinearSolver(format!(
                "structurally singular matrix: row {row} is empty"
            )));
        }
        match config.kind {
            LinearSolverKind::SparseDirect => {
                let lu = a
                    .to_faer()?
                    .sp_lu()
                    .map_err(|e| Error::LinearSolver(format!("sparse LU failed: {e:?}")))?;
                Ok(Self::Direct { n: a.nrows, lu })
            }
            LinearSolverKind::Iterative => Ok(Self::Iterative {
                ilu: Ilu0::new(a)?,
                a: a.clone(),
                transposed: None,
                config: config.clone(),
            }),
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Direct { n, lu } => {
                check_len(*n, b)?;
                let rhs = Col::<f64>::from_fn(*n, |i| b[i]);
                let x = lu.solve(&rhs);
                finite_or_error((0..*n).map(|i| x[i]).collect())
            }
            Self::Iterative { a, ilu, config, .. } => gmres(a, ilu, b, config),
        }
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&mut self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Direct { n, lu } => {
                check_len(*n, b)?;
                let rhs = Col::<f64>::from_fn(*n, |i| b[i]);
                let x = lu.solve_transpose(&rhs);
                finite_or_error((0..*n).map(|i| x[i]).collect())
            }
            Self::Iterative { a, transposed, config, .. } => {
                if transposed.is_none() {
                    let at = a.transpose();
                    let ilu = Ilu0::new(&at)?;
                    *transposed = Some((at, ilu));
                }
                let (at, ilu) = transposed.as_ref().unwrap();
                gmres(at, ilu, b, config)
            }
        }
    }
}

fn check_len(n: usize, b: &[f64]) -> Result<()> {
    if b.len() != n {
        return Err(Error::LinearSolver(format!(
            "right-hand side has length {} but the system has {n} rows",
            b.len()
        )));
    }
    Ok(())
}

fn finite_or_error(x: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::LinearSolver(format!(
            "numerically singular matrix: non-finite solution at row {i}"
        )));
    }
    Ok(x)
}

/// Solves `A x = b` once.
pub fn linear_solve(a: &CsrMatrix, b: &[f64], config: &LinearSolverConfig) -> Result<Vec<f64>> {
    Factorization::new(a, config)?.solve(b)
}

/// Incomplete LU factorization with the sparsity pattern of `A`.
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let mut lu = a.clone();
        let n = a.nrows;
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for k in lu.indptr[i]..lu.indptr[i + 1] {
                if lu.indices[k] == i {
                    diag[i] = k;
                }
            }
            if diag[i] == usize::MAX {
                return Err(Error::LinearSolver(format!(
                    "ILU(0) needs a stored diagonal; row {i} has none"
                )));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (a0, a1) = (lu.indptr[i], lu.indptr[i + 1]);
            for k in a0..a1 {
                pos[lu.indices[k]] = k;
            }
            for k in a0..a1 {
                let j = lu.indices[k];
                if j >= i {
                    break;
                }
                let pivot = lu.values[diag[j]];
                if pivot == 0.0 {
                    return Err(Error::LinearSolver(format!("zero pivot in ILU(0) at row {j}")));
                }
                let l = lu.values[k] / pivot;
                lu.values[k] = l;
                for kk in diag[j] + 1..lu.indptr[j + 1] {
                    let p = pos[lu.indices[kk]];
                    if p != usize::MAX {
                        lu.values[p] -= l * lu.values[kk];
                    }
                }
            }
            for k in a0..a1 {
                pos[lu.indices[k]] = usize::MAX;
            }
            if lu.values[diag[i]] == 0.0 {
                return Err(Error::LinearSolver(format!("zero pivot in ILU(0) at row {i}")));
            }
        }
        Ok(Self { lu, diag })
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let m = &self.lu;
        let mut y = r.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in m.indptr[i]..self.diag[i] {
                s -= m.values[k] * y[m.indices[k]];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in self.diag[i] + 1..m.indptr[i + 1] {
                s -= m.values[k] * y[m.indices[k]];
            }
            y[i] = s / m.values[self.diag[i]];
        }
        y
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Right-preconditioned restarted GMRES.
pub fn gmres(a: &CsrMatrix, m: &Ilu0, b: &[f64], config: &LinearSolverConfig) -> Result<Vec<f64>> {
    let n = a.nrows;
    check_len(n, b)?;
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let restart = config.restart.max(1);
    let mut total = 0;
    loop {
        let ax = a.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        if beta <= config.rel_tol * bnorm {
            return Ok(x);
        }
        if total >= config.max_iterations {
            return Err(Error::LinearSolver(format!(
                "GMRES did not converge in {total} iterations (relative residual {:.3e})",
                beta / bnorm
            )));
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..restart {
            total += 1;
            let z = m.apply(&v[k]);
            let mut w = a.matvec(&z);
            for (i, vi) in v.iter().enumerate() {
                let hik: f64 = w.iter().zip(vi).map(|(a, b)| a * b).sum();
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(vi) {
                    *wj -= hik * vj;
                }
            }
            let wn = norm(&w);
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            cs[k] = if d == 0.0 { 1.0 } else { h[k][k] / d };
            sn[k] = if d == 0.0 { 0.0 } else { h[k + 1][k] / d };
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if wn > 0.0 {
                v.push(w.iter().map(|wi| wi / wn).collect());
            }
            if g[k + 1].abs() <= config.rel_tol * bnorm || wn == 0.0 || total >= config.max_iterations {
                break;
            }
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut update = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for (u, vj) in update.iter_mut().zip(&v[j]) {
                *u += yj * vj;
            }
        }
        let dz = m.apply(&update);
        for (xi, di) in x.iter_mut().zip(&dz) {
            *xi += di;
        }
    }
}

/// 2-norm condition number from the singular values of the dense matrix.
pub fn condition_number(a: &CsrMatrix) -> f64 {
    let s = a.to_dense().singular_values();
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Runs sparse LU sequentially; used for bit-reproducible runs.
pub fn set_sequential_factorization(seq: bool) {
    if seq {
        faer::set_global_parallelism(faer::Par::Seq);
    } else {
        faer::set_global_parallelism(faer::Par::rayon(0));
    }
}
