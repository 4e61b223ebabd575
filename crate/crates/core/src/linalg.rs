//! Symmetric sparse matrices in compressed-column form and a reusable
//! sparse Cholesky factorization backed by `faer`.

use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Mat, Side};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Square sparse matrix in compressed-column storage with sorted,
/// duplicate-free row indices.
#[derive(Clone, Debug)]
pub struct CscMatrix {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(_, c, _) in triplets {
            counts[c + 1] += 1;
        }
        for c in 0..n {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..n {
            scratch.clear();
            for p in counts[c]..counts[c + 1] {
                scratch.push((rows[p], vals[p]));
            }
            // stable sort keeps the summation order of duplicates fixed
            scratch.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < scratch.len() {
                let r = scratch[k].0;
                let mut s = 0.0;
                while k < scratch.len() && scratch[k].0 == r {
                    s += scratch[k].1;
                    k += 1;
                }
                row_idx.push(r);
                values.push(s);
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn diagonal(n: usize, d: &[f64]) -> Self {
        let t: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(n, &t)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Entry lookup by binary search in the column.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
        match rows.binary_search(&r) {
            Ok(k) => self.values[self.col_ptr[c] + k],
            Err(_) => 0.0,
        }
    }

    /// Positions of the diagonal entries in the value array. Panics if a
    /// diagonal entry is structurally missing.
    pub fn diagonal_positions(&self) -> Vec<usize> {
        (0..self.n)
            .map(|c| {
                let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
                self.col_ptr[c] + rows.binary_search(&c).expect("structural diagonal")
            })
            .collect()
    }

    /// y = A x. For symmetric A this is also Aᵀ x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.n {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * xc;
            }
        }
    }

    /// xᵀ A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let ax = self.matvec(x);
        dot(x, &ax)
    }

    /// Sum of all entries.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Linear combination `a*self + b*other` on the union pattern.
    pub fn axpby(&self, a: f64, other: &CscMatrix, b: f64) -> CscMatrix {
        assert_eq!(self.n, other.n);
        let mut t = Vec::with_capacity(self.nnz() + other.nnz());
        for (m, s) in [(self, a), (other, b)] {
            for c in 0..m.n {
                for p in m.col_ptr[c]..m.col_ptr[c + 1] {
                    t.push((m.row_idx[p], c, s * m.values[p]));
                }
            }
        }
        CscMatrix::from_triplets(self.n, &t)
    }

    /// Principal submatrix on the given (sorted) index set.
    pub fn submatrix(&self, keep: &[usize]) -> CscMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k;
        }
        let mut t = Vec::new();
        for &c in keep {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = map[self.row_idx[p]];
                if r != usize::MAX {
                    t.push((r, map[c], self.values[p]));
                }
            }
        }
        CscMatrix::from_triplets(keep.len(), &t)
    }

    fn faer_symbolic(&self) -> SymbolicSparseColMat<usize> {
        SymbolicSparseColMat::new_checked(
            self.n,
            self.n,
            self.col_ptr.clone(),
            None,
            self.row_idx.clone(),
        )
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse Cholesky of a symmetric positive definite matrix whose sparsity
/// pattern stays fixed. The symbolic analysis is done once; numeric
/// refactorizations reuse it.
pub struct SpdSolver {
    n: usize,
    symbolic_csc: SymbolicSparseColMat<usize>,
    symbolic: SymbolicLlt<usize>,
    numeric: Option<Llt<usize, f64>>,
}

impl SpdSolver {
    pub fn analyze(pattern: &CscMatrix) -> Result<Self, LinalgError> {
        faer::set_global_parallelism(faer::Par::Seq);
        let symbolic_csc = pattern.faer_symbolic();
        let symbolic = SymbolicLlt::try_new(symbolic_csc.as_ref(), Side::Lower)
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            n: pattern.dim(),
            symbolic_csc,
            symbolic,
            numeric: None,
        })
    }

    /// Numeric factorization of a matrix with the analyzed pattern.
    pub fn factor(&mut self, a: &CscMatrix) -> Result<(), LinalgError> {
        if a.dim() != self.n {
            return Err(LinalgError::Dimension {
                expected: self.n,
                got: a.dim(),
            });
        }
        let mat = SparseColMatRef::new(self.symbolic_csc.as_ref(), a.values());
        let llt = Llt::try_new_with_symbolic(self.symbolic.clone(), mat, Side::Lower)
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
        self.numeric = Some(llt);
        Ok(())
    }

    pub fn is_factored(&self) -> bool {
        self.numeric.is_some()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        use faer::prelude::Solve;
        let llt = self
            .numeric
            .as_ref()
            .ok_or_else(|| LinalgError::Factorization("solve before factor".into()))?;
        if b.len() != self.n {
            return Err(LinalgError::Dimension {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        llt.solve_in_place(rhs.as_mut());
        Ok((0..self.n).map(|i| rhs[(i, 0)]).collect())
    }
}

/// One-shot SPD solve.
pub fn solve_spd(a: &CscMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let mut s = SpdSolver::analyze(a)?;
    s.factor(a)?;
    s.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let a = CscMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0), (1, 0, 0.5)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), 0.5);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn solves_tridiagonal_system() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let a = CscMatrix::from_triplets(n, &t);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.matvec(&x);
        let y = solve_spd(&a, &b).unwrap();
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn refactor_reuses_pattern() {
        let a = CscMatrix::from_triplets(2, &[(0, 0, 2.0), (1, 1, 2.0), (0, 1, 1.0), (1, 0, 1.0)]);
        let mut s = SpdSolver::analyze(&a).unwrap();
        s.factor(&a).unwrap();
        let mut b = a.clone();
        for p in b.diagonal_positions() {
            b.values_mut()[p] += 1.0;
        }
        s.factor(&b).unwrap();
        let x = s.solve(&[4.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = CscMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0), (0, 1, 2.0), (1, 0, 2.0)]);
        assert!(solve_spd(&a, &[1.0, 1.0]).is_err());
    }
}
