//! Compressed-sparse-row matrices and linear solvers.
//!
//! Assembly accumulates `(row, col, value)` triplets; [`SparseMatrix::from_triplets`]
//! sorts, merges duplicates, and drops entries that cancel to exactly zero.
//! [`solve_sparse`] picks a direct factorization (sparse Cholesky for
//! symmetric matrices with an LU fallback), verifies the residual against an
//! explicit contract, and applies one step of iterative refinement if needed.
//! A Jacobi-preconditioned conjugate-gradient solver is available for
//! symmetric positive definite systems.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use thiserror::Error;

/// Errors from matrix construction and linear solves.
#[derive(Debug, Error)]
pub enum SparseError {
    #[error("triplet ({row}, {col}) outside a {nrows} x {ncols} matrix")]
    TripletOutOfRange { row: usize, col: usize, nrows: usize, ncols: usize },
    #[error("dimension mismatch: matrix is {nrows} x {ncols}, vector has length {len}")]
    DimensionMismatch { nrows: usize, ncols: usize, len: usize },
    #[error("matrix is singular or numerically rank-deficient")]
    Singular,
    #[error("solution residual {residual:.3e} exceeds the contract {tol:.3e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
    #[error("conjugate gradient did not converge in {0} iterations")]
    CgStalled(usize),
    #[error("iterative refinement stalled at residual {residual:.3e} (contract {tol:.3e})")]
    RefinementStalled { residual: f64, tol: f64 },
}

/// Square or rectangular sparse matrix in compressed-sparse-row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from unordered triplets. Duplicate positions are
    /// summed; positions whose merged value is exactly zero are dropped.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<SparseMatrix, SparseError> {
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(SparseError::TripletOutOfRange { row: r, col: c, nrows, ncols });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        // Stable sort: duplicates of a position merge in insertion order, so
        // mirrored element contributions sum identically and exactly
        // symmetric assemblies stay bitwise symmetric.
        sorted.sort_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut iter = sorted.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix { nrows, ncols, row_ptr, col_idx, values })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// All stored entries as `(row, col, value)`, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.ncols {
            return Err(SparseError::DimensionMismatch {
                nrows: self.nrows,
                ncols: self.ncols,
                len: x.len(),
            });
        }
        let mut y = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            y[r] = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
        Ok(y)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let trips: Vec<(usize, usize, f64)> = self.entries().map(|(r, c, v)| (c, r, v)).collect();
        SparseMatrix::from_triplets(self.ncols, self.nrows, &trips)
            .expect("transposing valid entries cannot fail")
    }

    /// Whether the matrix equals its transpose exactly (bitwise values).
    /// Symmetric assemblies in this crate mirror element matrices exactly,
    /// so no tolerance is needed.
    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols && *self == self.transpose()
    }

    /// Dense copy, for small oracles and debugging only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, c, v) in self.entries() {
            dense[r][c] = v;
        }
        dense
    }

    fn to_faer(&self) -> SparseColMat<usize, f64> {
        let trips: Vec<Triplet<usize, usize, f64>> = self
            .entries()
            .map(|(r, c, v)| Triplet::new(r, c, v))
            .collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &trips)
            .expect("CSR entries are in range")
    }
}

enum FactorKind {
    Cholesky(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

/// A direct factorization of a square [`SparseMatrix`], reusable for several
/// right-hand sides and for transposed solves.
pub struct Factorization {
    kind: FactorKind,
    n: usize,
}

impl Factorization {
    /// Factorizes `a`: sparse Cholesky when `a` is symmetric (falling back
    /// to LU if it is not positive definite), sparse LU otherwise.
    pub fn new(a: &SparseMatrix) -> Result<Factorization, SparseError> {
        assert_eq!(a.nrows, a.ncols, "factorization requires a square matrix");
        let fa = a.to_faer();
        // The backend panics on exactly singular pivots instead of returning
        // an error; report those as `Singular` like any other failure.
        let lu = |fa: &SparseColMat<usize, f64>| {
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| fa.sp_lu()))
                .map_err(|_| SparseError::Singular)?
                .map_err(|_| SparseError::Singular)
        };
        let kind = if a.is_symmetric() {
            match fa.sp_cholesky(faer::Side::Lower) {
                Ok(llt) => FactorKind::Cholesky(llt),
                Err(_) => FactorKind::Lu(lu(&fa)?),
            }
        } else {
            FactorKind::Lu(lu(&fa)?)
        };
        Ok(Factorization { kind, n: a.nrows })
    }

    fn solve_mat(&self, b: &[f64], transposed: bool) -> Vec<f64> {
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = match (&self.kind, transposed) {
            (FactorKind::Cholesky(llt), _) => llt.solve(&rhs),
            (FactorKind::Lu(lu), false) => lu.solve(&rhs),
            (FactorKind::Lu(lu), true) => lu.solve_transpose(&rhs),
        };
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n {
            return Err(SparseError::DimensionMismatch { nrows: self.n, ncols: self.n, len: b.len() });
        }
        Ok(self.solve_mat(b, false))
    }

    /// Solves `Aᵀ x = b` reusing the factorization of `A`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n {
            return Err(SparseError::DimensionMismatch { nrows: self.n, ncols: self.n, len: b.len() });
        }
        Ok(self.solve_mat(b, true))
    }
}

/// Gaussian elimination with partial pivoting for the tiny dense systems in
/// the bordered solver; `None` when a pivot vanishes or overflows.
fn solve_dense_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k] == 0.0 || !a[piv][k].is_finite() {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

enum BorderedKind {
    /// Plain factorization: empty border, or the fallback when the interior
    /// matrix (border rows/columns replaced by identity) is singular.
    Direct(Factorization),
    Bordered {
        /// Factorization of `D`, the matrix with each border row and column
        /// replaced by an identity row/column.
        interior: Factorization,
        /// Border dof indices, sorted and deduplicated.
        dofs: Vec<usize>,
        /// Row differences `A[i,·] − eᵢᵀ` per border dof (sparse; the
        /// diagonal appears as an extra `−1` entry that sums in place).
        rows: Vec<Vec<(usize, f64)>>,
        /// Column entries `A[·,j]` per border dof, restricted to non-border
        /// rows.
        cols: Vec<Vec<(usize, f64)>>,
        /// `W = D⁻¹U` where `U = [eᵢ | cols]`, one dense column per update.
        w: Vec<Vec<f64>>,
        /// `Z = D⁻ᵀV` where `V = [rows | eⱼ]`.
        z: Vec<Vec<f64>>,
        /// Capacitance matrix `M = I + VᵀW`.
        cap: Vec<Vec<f64>>,
    },
}

/// A direct factorization for matrices with a few dense rows/columns
/// ("arrowhead" structure, e.g. a global constraint row tied to a Lagrange
/// multiplier).
///
/// A dense row defeats the fill-reducing ordering of a sparse factorization;
/// on the Taylor–Hood systems of [`crate::fem::assemble_navier_stokes`] the
/// factorization time drops roughly ninefold when the pressure-mean
/// constraint is bordered out. The listed dofs' rows and columns are
/// replaced by identity before factorizing and restored exactly through a
/// rank-`2k` Sherman–Morrison–Woodbury correction, so solutions match a
/// direct factorization of the full matrix to roundoff.
pub struct BorderedFactorization {
    n: usize,
    kind: BorderedKind,
}

impl BorderedFactorization {
    /// Factorizes `a` with the given border dofs. Falls back to a plain
    /// factorization of `a` when the border is empty or the interior matrix
    /// is singular (e.g. the border carried the only coupling that made the
    /// system invertible in a numerically unusable way).
    pub fn new(a: &SparseMatrix, border: &[usize]) -> Result<BorderedFactorization, SparseError> {
        assert_eq!(a.nrows, a.ncols, "factorization requires a square matrix");
        let n = a.nrows;
        let mut dofs: Vec<usize> = border.to_vec();
        dofs.sort_unstable();
        dofs.dedup();
        assert!(dofs.iter().all(|&d| d < n), "border dof outside the matrix");
        if dofs.is_empty() {
            return Ok(BorderedFactorization { n, kind: BorderedKind::Direct(Factorization::new(a)?) });
        }

        let k = dofs.len();
        let mut in_border = vec![false; n];
        for &d in &dofs {
            in_border[d] = true;
        }
        let slot = |d: usize| dofs.binary_search(&d).expect("marked border dof");
        // Split A into the interior matrix D and the rank-2k border update
        // A = D + Σᵢ eᵢ·rowsᵢᵀ + Σⱼ colsⱼ·eⱼᵀ (i, j over border dofs).
        let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(a.nnz() + k);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        for (i, row) in rows.iter_mut().enumerate() {
            row.push((dofs[i], -1.0));
        }
        for (r, c, v) in a.entries() {
            if in_border[r] {
                rows[slot(r)].push((c, v));
            } else if in_border[c] {
                cols[slot(c)].push((r, v));
            } else {
                trips.push((r, c, v));
            }
        }
        for &d in &dofs {
            trips.push((d, d, 1.0));
        }
        let interior_matrix = SparseMatrix::from_triplets(n, n, &trips)?;
        let fallback = |n| -> Result<BorderedFactorization, SparseError> {
            Ok(BorderedFactorization { n, kind: BorderedKind::Direct(Factorization::new(a)?) })
        };
        let Ok(interior) = Factorization::new(&interior_matrix) else {
            return fallback(n);
        };

        let mut w = Vec::with_capacity(2 * k);
        let mut z = Vec::with_capacity(2 * k);
        for u in 0..2 * k {
            let mut ub = vec![0.0; n];
            if u < k {
                ub[dofs[u]] = 1.0;
            } else {
                for &(r, v) in &cols[u - k] {
                    ub[r] += v;
                }
            }
            w.push(interior.solve(&ub)?);
            let mut vb = vec![0.0; n];
            if u < k {
                for &(c, v) in &rows[u] {
                    vb[c] += v;
                }
            } else {
                vb[dofs[u - k]] = 1.0;
            }
            z.push(interior.solve_transpose(&vb)?);
        }
        let mut cap = vec![vec![0.0; 2 * k]; 2 * k];
        for i in 0..2 * k {
            cap[i][i] = 1.0;
            for (j, wj) in w.iter().enumerate() {
                cap[i][j] += if i < k {
                    rows[i].iter().map(|&(c, v)| v * wj[c]).sum::<f64>()
                } else {
                    wj[dofs[i - k]]
                };
            }
        }
        // A singular capacitance matrix (or non-finite solves against D)
        // means the split is numerically unusable; fall back.
        let finite = w.iter().chain(&z).flatten().all(|v| v.is_finite());
        if !finite || solve_dense_small(cap.clone(), vec![0.0; 2 * k]).is_none() {
            return fallback(n);
        }
        Ok(BorderedFactorization {
            n,
            kind: BorderedKind::Bordered { interior, dofs, rows, cols, w, z, cap },
        })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        self.solve_raw(b, false)
    }

    /// Solves `Aᵀ x = b` reusing the factorization of `A`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        self.solve_raw(b, true)
    }

    fn solve_raw(&self, b: &[f64], transposed: bool) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n {
            return Err(SparseError::DimensionMismatch { nrows: self.n, ncols: self.n, len: b.len() });
        }
        match &self.kind {
            BorderedKind::Direct(f) => {
                if transposed {
                    f.solve_transpose(b)
                } else {
                    f.solve(b)
                }
            }
            BorderedKind::Bordered { interior, dofs, rows, cols, w, z, cap } => {
                // Sherman–Morrison–Woodbury: with A = D + UVᵀ,
                // A⁻¹b = y − W·M⁻¹(Vᵀy) where y = D⁻¹b, and the transposed
                // solve swaps the roles of U and V (Mᵀ as capacitance).
                let k = dofs.len();
                let y = if transposed { interior.solve_transpose(b)? } else { interior.solve(b)? };
                let t: Vec<f64> = (0..2 * k)
                    .map(|i| match (transposed, i < k) {
                        (false, true) => rows[i].iter().map(|&(c, v)| v * y[c]).sum(),
                        (false, false) => y[dofs[i - k]],
                        (true, true) => y[dofs[i]],
                        (true, false) => cols[i - k].iter().map(|&(r, v)| v * y[r]).sum(),
                    })
                    .collect();
                let small = if transposed {
                    (0..2 * k).map(|i| (0..2 * k).map(|j| cap[j][i]).collect()).collect()
                } else {
                    cap.clone()
                };
                let coeff = solve_dense_small(small, t).ok_or(SparseError::Singular)?;
                let mut x = y;
                let corrections = if transposed { z } else { w };
                for (col, &c) in corrections.iter().zip(&coeff) {
                    if c != 0.0 {
                        for (xi, vi) in x.iter_mut().zip(col) {
                            *xi -= c * vi;
                        }
                    }
                }
                Ok(x)
            }
        }
    }

    /// Solves against `a` — which may differ from the factored matrix, e.g.
    /// a Jacobian reassembled at a nearby state — by defect correction,
    /// meeting the [`solve_sparse`] residual contract
    /// `‖Ax − b‖₂ ≤ 1e-10 (1 + ‖b‖₂)`. Errors with
    /// [`SparseError::RefinementStalled`] when the factorization is too
    /// stale for the correction to converge; callers then refactorize.
    pub fn solve_refined(
        &self,
        a: &SparseMatrix,
        b: &[f64],
        transposed: bool,
    ) -> Result<Vec<f64>, SparseError> {
        if a.nrows != self.n || a.ncols != self.n {
            return Err(SparseError::DimensionMismatch { nrows: a.nrows, ncols: a.ncols, len: self.n });
        }
        let tol = 1e-10 * (1.0 + norm2(b));
        let mut x = self.solve_raw(b, transposed)?;
        let mut res = residual_vec(a, &x, b, transposed);
        let mut res_norm = norm2(&res);
        for _ in 0..50 {
            if res_norm <= tol {
                return Ok(x);
            }
            let dx = self.solve_raw(&res, transposed)?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            res = residual_vec(a, &x, b, transposed);
            let next = norm2(&res);
            // Demand geometric progress; a stale factorization that cannot
            // halve the defect each sweep will not reach the contract.
            if next > 0.5 * res_norm && next > tol {
                return Err(SparseError::RefinementStalled { residual: next, tol });
            }
            res_norm = next;
        }
        if res_norm <= tol {
            Ok(x)
        } else {
            Err(SparseError::RefinementStalled { residual: res_norm, tol })
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `b − Ax` (or `b − Aᵀx` without materializing the transpose).
fn residual_vec(a: &SparseMatrix, x: &[f64], b: &[f64], transposed: bool) -> Vec<f64> {
    let ax = if transposed {
        let mut y = vec![0.0; a.ncols];
        for (r, c, v) in a.entries() {
            y[c] += v * x[r];
        }
        y
    } else {
        a.matvec(x).expect("dimensions checked by caller")
    };
    b.iter().zip(ax).map(|(p, q)| p - q).collect()
}

fn residual_norm(a: &SparseMatrix, x: &[f64], b: &[f64], transposed: bool) -> f64 {
    norm2(&residual_vec(a, x, b, transposed))
}

fn solve_checked(a: &SparseMatrix, b: &[f64], transposed: bool) -> Result<Vec<f64>, SparseError> {
    if b.len() != a.nrows {
        return Err(SparseError::DimensionMismatch { nrows: a.nrows, ncols: a.ncols, len: b.len() });
    }
    let fact = Factorization::new(a)?;
    let mut x = fact.solve_mat(b, transposed);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(SparseError::Singular);
    }
    let tol = 1e-10 * (1.0 + norm2(b));
    let mut res = residual_norm(a, &x, b, transposed);
    if res > tol {
        // One step of iterative refinement.
        let r = residual_vec(a, &x, b, transposed);
        let dx = fact.solve_mat(&r, transposed);
        for (xi, di) in x.iter_mut().zip(dx) {
            *xi += di;
        }
        res = residual_norm(a, &x, b, transposed);
        if res > tol {
            return Err(SparseError::ResidualTooLarge { residual: res, tol });
        }
    }
    Ok(x)
}

/// Solves `A x = b` by direct factorization and verifies
/// `‖Ax − b‖₂ ≤ 1e-10 (1 + ‖b‖₂)`, applying one iterative-refinement step
/// if the first solution misses the contract.
pub fn solve_sparse(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SparseError> {
    solve_checked(a, b, false)
}

/// Solves `Aᵀ x = b` with the same residual contract as [`solve_sparse`].
pub fn solve_sparse_transpose(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SparseError> {
    solve_checked(a, b, true)
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive definite
/// systems. Converges when `‖Ax − b‖₂ ≤ tol (1 + ‖b‖₂)`.
pub fn solve_cg(
    a: &SparseMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, SparseError> {
    if b.len() != a.nrows {
        return Err(SparseError::DimensionMismatch { nrows: a.nrows, ncols: a.ncols, len: b.len() });
    }
    let n = b.len();
    let mut diag = vec![0.0; n];
    for r in 0..n {
        for (c, v) in a.row(r) {
            if c == r {
                diag[r] = v;
            }
        }
    }
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(SparseError::Singular);
    }
    let threshold = tol * (1.0 + norm2(b));
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        if norm2(&r) <= threshold {
            return Ok(x);
        }
        let ap = a.matvec(&p)?;
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(SparseError::Singular);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if norm2(&r) <= threshold {
        Ok(x)
    } else {
        Err(SparseError::CgStalled(max_iter))
    }
}
