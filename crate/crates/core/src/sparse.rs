//! Symmetric sparse matrices, incomplete Cholesky and preconditioned CG.
//!
//! Only what the Newton solver needs: a fixed sparsity pattern assembled once
//! per solve, refilled every iteration, and solved inexactly.

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Pattern from `(row, col)` pairs; duplicates are merged and both triangles are stored.
    pub fn from_pattern(n: usize, mut entries: Vec<(usize, usize)>) -> Self {
        entries.extend((0..n).map(|i| (i, i)));
        let mirrored: Vec<(usize, usize)> = entries.iter().map(|&(i, j)| (j, i)).collect();
        entries.extend(mirrored);
        entries.sort_unstable();
        entries.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _) in &entries {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = entries.iter().map(|&(_, j)| j).collect::<Vec<_>>();
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Storage slot of entry `(i, j)`; panics if it is not in the pattern.
    pub fn slot(&self, i: usize, j: usize) -> usize {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        self.row_ptr[i] + row.binary_search(&j).expect("entry outside the sparsity pattern")
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn col(&self, slot: usize) -> usize {
        self.col_idx[slot]
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.values[self.slot(i, i)]).collect()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }
}

/// Zero-fill incomplete Cholesky factor `L` (lower triangle, row storage).
#[derive(Debug, Clone)]
pub struct Ic0 {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Ic0 {
    /// Factors `A + shift · diag(A)`, increasing the shift on breakdown.
    pub fn new(a: &CsrMatrix) -> Self {
        let mut shift = 0.0;
        loop {
            if let Some(f) = Self::try_factor(a, shift) {
                return f;
            }
            shift = if shift == 0.0 { 1e-3 } else { shift * 10.0 };
        }
    }

    fn try_factor(a: &CsrMatrix, shift: f64) -> Option<Self> {
        let n = a.dim();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j < i {
                    col_idx.push(j);
                    values.push(v);
                } else if j == i {
                    col_idx.push(j);
                    values.push(v * (1.0 + shift));
                }
            }
            row_ptr.push(col_idx.len());
        }
        for i in 0..n {
            let (start, end) = (row_ptr[i], row_ptr[i + 1]);
            for s in start..end {
                let k = col_idx[s];
                // Sparse dot product of rows i and k over columns < k.
                let (mut p, mut q) = (start, row_ptr[k]);
                let mut dot = 0.0;
                while p < s && q < row_ptr[k + 1] && col_idx[q] < k {
                    match col_idx[p].cmp(&col_idx[q]) {
                        std::cmp::Ordering::Less => p += 1,
                        std::cmp::Ordering::Greater => q += 1,
                        std::cmp::Ordering::Equal => {
                            dot += values[p] * values[q];
                            p += 1;
                            q += 1;
                        }
                    }
                }
                if k < i {
                    let diag_k = values[row_ptr[k + 1] - 1];
                    values[s] = (values[s] - dot) / diag_k;
                } else {
                    let d = values[s] - dot;
                    if !(d > 0.0 && d.is_finite()) {
                        return None;
                    }
                    values[s] = d.sqrt();
                }
            }
        }
        Some(Self { row_ptr, col_idx, values })
    }

    /// Solves `L Lᵀ z = r`.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        for i in 0..n {
            let (start, end) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = r[i];
            for s in start..end - 1 {
                acc -= self.values[s] * z[self.col_idx[s]];
            }
            z[i] = acc / self.values[end - 1];
        }
        for i in (0..n).rev() {
            let (start, end) = (self.row_ptr[i], self.row_ptr[i + 1]);
            z[i] /= self.values[end - 1];
            let zi = z[i];
            for s in start..end - 1 {
                z[self.col_idx[s]] -= self.values[s] * zi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients from the initial guess in `x`.
/// Stops when `‖b - A x‖₂ ≤ tol` or on loss of positive curvature.
pub fn pcg(a: &CsrMatrix, b: &[f64], x: &mut [f64], precond: &Ic0, tol: f64, max_iter: usize) -> CgReport {
    let n = b.len();
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz: f64 = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r);
    let mut it = 0;
    while res > tol && it < max_iter {
        a.mul_vec(&p, &mut ap);
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            break;
        }
        let alpha = rz / curv;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm(&r);
        it += 1;
        if res <= tol {
            break;
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgReport {
        iterations: it,
        residual: res,
        converged: res <= tol,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
