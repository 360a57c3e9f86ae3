//! Compressed sparse row storage and the direct-solve contract.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, LuRef, NumericLu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::prelude::Solve;
use faer::{get_global_parallelism, Conj, Mat};

use crate::error::{Error, Result};

/// Square or rectangular CSR matrix with sorted, duplicate-free rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    /// The summation order is the triplet order, so identical input gives
    /// bitwise identical output.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> CsrMatrix {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            debug_assert!(c < ncols);
            let k = next[r];
            cols[k] = c;
            vals[k] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len() / 2);
        let mut data = Vec::with_capacity(triplets.len() / 2);
        indptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..nrows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            // stable: keeps insertion order among equal columns
            order.sort_by_key(|&k| cols[k]);
            let mut last = usize::MAX;
            for &k in &order {
                if cols[k] == last {
                    *data.last_mut().unwrap() += vals[k];
                } else {
                    indices.push(cols[k]);
                    data.push(vals[k]);
                    last = cols[k];
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix { nrows, ncols, indptr, indices, data }
    }

    pub fn identity(n: usize) -> CsrMatrix {
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[lo..hi].iter().copied().zip(self.data[lo..hi].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        match self.indices[lo..hi].binary_search(&c) {
            Ok(k) => self.data[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        let mut t = self.triplets();
        t.extend(other.triplets().into_iter().map(|(r, c, v)| (r, c, -v)));
        CsrMatrix::from_triplets(self.nrows, self.ncols, &t)
            .data
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative residual threshold of [`linear_solve`].
pub const LINEAR_SOLVE_TOL: f64 = 1e-10;

/// Sparse LU factors with a COLAMD column ordering.
struct SparseLu {
    symbolic: SymbolicLu<usize>,
    numeric: NumericLu<usize, f64>,
}

impl SparseLu {
    fn new(a: &CsrMatrix) -> Result<SparseLu> {
        let n = a.nrows;
        let trip: Vec<Triplet<usize, usize, f64>> =
            a.triplets().into_iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::InvalidArgument(format!("sparse matrix creation failed: {e:?}")))?;
        let symbolic =
            factorize_symbolic_lu(mat.symbolic(), Default::default()).map_err(|e| Error::Singular(format!("{e:?}")))?;
        let mut numeric = NumericLu::new();
        let par = get_global_parallelism();
        let mut buf = MemBuffer::try_new(symbolic.factorize_numeric_lu_scratch::<f64>(par, Default::default()))
            .map_err(|e| Error::Singular(format!("{e:?}")))?;
        symbolic
            .factorize_numeric_lu(&mut numeric, mat.as_ref(), par, MemStack::new(&mut buf), Default::default())
            .map_err(|e| Error::Singular(format!("{e:?}")))?;
        Ok(SparseLu { symbolic, numeric })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut rhs = Mat::from_fn(n, 1, |i, _| b[i]);
        let par = get_global_parallelism();
        let mut buf = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, par));
        LuRef::new_unchecked(&self.symbolic, &self.numeric).solve_in_place_with_conj(
            Conj::No,
            rhs.as_mut(),
            par,
            MemStack::new(&mut buf),
        );
        (0..n).map(|i| rhs[(i, 0)]).collect()
    }
}

/// Direct sparse LU solve with partial pivoting. Works for indefinite
/// saddle-point systems.
pub fn linear_solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.nrows != a.ncols || b.len() != a.nrows {
        return Err(Error::DimensionMismatch { expected: a.nrows, got: b.len() });
    }
    let lu = SparseLu::new(a)?;
    refined_solve(a, b, |r| lu.solve(r))
}

/// Solves a system whose last row and column are a dense border, such as
/// a mean-value constraint with its multiplier.
///
/// Factoring the border directly destroys the sparsity of the LU factors.
/// Instead the inner block with one row pinned, `P`, is factored and the
/// border plus the pinned row are restored as a rank-3 Woodbury update.
pub fn bordered_solve(m: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if m.nrows != m.ncols || b.len() != m.nrows || m.nrows < 2 {
        return Err(Error::DimensionMismatch { expected: m.nrows, got: b.len() });
    }
    let n = m.nrows - 1;
    let border_row: Vec<(usize, f64)> = m.row(n).filter(|&(c, _)| c < n).collect();
    let (pin, _) = border_row
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (c, v)| match best {
            Some((_, bv)) if bv >= v.abs() => best,
            _ => Some((c, v.abs())),
        })
        .filter(|&(_, v)| v > 0.0)
        .ok_or_else(|| Error::Singular("empty border row".into()))?;

    let mut inner = Vec::with_capacity(m.nnz());
    let mut border_col = Vec::new();
    let mut pinned_row = Vec::new();
    for (r, c, v) in m.triplets() {
        if r == n {
            continue;
        }
        if c == n {
            border_col.push((r, v));
        } else if r == pin {
            pinned_row.push((c, v));
        } else {
            inner.push((r, c, v));
        }
    }
    inner.push((pin, pin, 1.0));
    let corner = m.get(n, n);
    let lu = SparseLu::new(&CsrMatrix::from_triplets(n, n, &inner))?;

    // M = diag(P, 1) + sum_j u_j v_j'
    //   u = e_pin,        v = row pin of M minus e_pin
    //   u = border col,   v = e_n
    //   u = e_n,          v = border row with corner - 1
    let base = |f: &[f64]| -> Vec<f64> {
        let mut y = lu.solve(&f[..n]);
        y.push(f[n]);
        y
    };
    let apply_v = |z: &[f64]| -> [f64; 3] {
        let row_diff = pinned_row.iter().map(|&(c, v)| v * z[c]).sum::<f64>() - z[pin];
        let border = border_row.iter().map(|&(c, v)| v * z[c]).sum::<f64>() + (corner - 1.0) * z[n];
        [row_diff, z[n], border]
    };
    let mut u = vec![vec![0.0; n + 1]; 3];
    u[0][pin] = 1.0;
    for &(r, v) in &border_col {
        u[1][r] += v;
    }
    u[2][n] = 1.0;
    let z: Vec<Vec<f64>> = u.iter().map(|uj| base(uj)).collect();
    let cap = Mat::from_fn(3, 3, |i, j| apply_v(&z[j])[i] + if i == j { 1.0 } else { 0.0 });
    let cap_lu = cap.partial_piv_lu();
    let solve = |f: &[f64]| -> Vec<f64> {
        let mut y = base(f);
        let t = apply_v(&y);
        let s = cap_lu.solve(Mat::from_fn(3, 1, |i, _| t[i]));
        for (j, zj) in z.iter().enumerate() {
            let sj = s[(j, 0)];
            for (yi, zi) in y.iter_mut().zip(zj) {
                *yi -= sj * zi;
            }
        }
        y
    };
    refined_solve(m, b, solve)
}

/// Applies `solve` with up to three refinement sweeps against `a` and
/// enforces the relative residual contract.
fn refined_solve(a: &CsrMatrix, b: &[f64], solve: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    let mut x = solve(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite entries in LU solution".into()));
    }
    let bnorm = norm2(b);
    let rel = |x: &[f64]| {
        let r: Vec<f64> = a.mul_vec(x).iter().zip(b).map(|(p, q)| q - p).collect();
        let rn = norm2(&r);
        (r, if bnorm > 0.0 { rn / bnorm } else { rn })
    };
    let (mut r, mut res) = rel(&x);
    // A couple of refinement sweeps recover digits lost to pivot growth.
    for _ in 0..3 {
        if res <= LINEAR_SOLVE_TOL * 1e-2 {
            break;
        }
        let corr = solve(&r);
        for (xi, ci) in x.iter_mut().zip(&corr) {
            *xi += ci;
        }
        (r, res) = rel(&x);
    }
    if !res.is_finite() {
        return Err(Error::Singular("non-finite residual".into()));
    }
    if res > LINEAR_SOLVE_TOL {
        return Err(Error::LinearSolveInaccurate { residual: res, tol: LINEAR_SOLVE_TOL });
    }
    Ok(x)
}
