//! Dense linear algebra used throughout the crate.
//!
//! Everything here operates on small-to-medium dense matrices (a few hundred
//! rows at most), so the routines favour robustness over raw speed:
//! LU with partial pivoting for square solves, and a one-sided Jacobi SVD for
//! anything that needs a numerical rank (minimum-norm least squares, null
//! spaces, equality-constrained quadratic programs).

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(n_rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::zeros(n_rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n_rows {
                return Err(Error::DimensionMismatch(format!(
                    "column {j} has length {}, expected {n_rows}",
                    col.len()
                )));
            }
            for (i, v) in col.iter().enumerate() {
                m.data[i * m.cols + j] = *v;
            }
        }
        Ok(m)
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                axpy(*xi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, a) in self.row(i).iter().enumerate() {
                if *a != 0.0 {
                    axpy(*a, other.row(k), out_row);
                }
            }
        }
        out
    }

    /// Multiplies row `i` by `scale[i]`.
    pub fn scale_rows(&self, scale: &[f64]) -> Self {
        assert_eq!(scale.len(), self.rows);
        let mut out = self.clone();
        for (i, s) in scale.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += a * x
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactorization {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch(format!(
                "LU needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let tol = n.max(1) as f64 * f64::EPSILON * a.max_abs();

        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= tol {
                return Err(Error::SingularMatrix(format!(
                    "pivot {pivot:.3e} at column {k} is below tolerance {tol:.3e}"
                )));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let diag = lu[k * n + k];
            for i in k + 1..n {
                let factor = lu[i * n + k] / diag;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu[i * n..i * n + i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu[i * n + i + 1..(i + 1) * n], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ x = b` with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, x = Pᵀ z.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lu[k * n + i] * y[k];
            }
            y[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.lu[k * n + i] * y[k];
            }
            y[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }
}

/// Solves the square system `A x = b` by LU with partial pivoting.
pub fn solve_linear(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows {
        return Err(Error::DimensionMismatch(format!(
            "rhs has length {}, matrix has {} rows",
            b.len(),
            a.rows
        )));
    }
    Ok(LuFactorization::new(a)?.solve(b))
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`.
///
/// `u` is `rows × cols`, `v` is `cols × cols` and always a full orthogonal
/// basis of the input column space, so right singular vectors with zero
/// singular value span the null space of `A`. Singular values are sorted
/// in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl Svd {
    /// One-sided (Hestenes) Jacobi SVD.
    ///
    /// Wide inputs are decomposed through their transpose, and the right
    /// basis is completed with Householder reflectors.
    pub fn new(a: &DenseMatrix) -> Self {
        if a.rows < a.cols {
            return Self::wide(a);
        }
        Self::jacobi(a)
    }

    fn wide(a: &DenseMatrix) -> Self {
        let (m, n) = (a.rows, a.cols);
        let t = Self::jacobi(&a.transpose());
        let r = t.rank();
        let mut u = DenseMatrix::zeros(m, n);
        let mut v = DenseMatrix::zeros(n, n);
        let mut sigma = vec![0.0; n];
        for k in 0..m {
            sigma[k] = t.sigma[k];
            for i in 0..m {
                u.set(i, k, t.v.get(i, k));
            }
        }
        let range: Vec<Vec<f64>> = (0..r).map(|k| t.u.column(k)).collect();
        for (k, col) in range.iter().chain(orthonormal_complement(&range, n).iter()).enumerate() {
            for i in 0..n {
                v.set(i, k, col[i]);
            }
        }
        Self { u, sigma, v }
    }

    fn jacobi(a: &DenseMatrix) -> Self {
        let (m, n) = (a.rows, a.cols);
        // Column-major working copies: w holds the columns of A·V.
        let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect();

        const MAX_SWEEPS: usize = 60;
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = dot(&w[p], &w[p]);
                    let beta = dot(&w[q], &w[q]);
                    let gamma = dot(&w[p], &w[q]);
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate(&mut w, p, q, c, s);
                    rotate(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                break;
            }
        }

        let mut order: Vec<(usize, f64)> = w.iter().map(|col| norm2(col)).enumerate().collect();
        order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

        let mut u = DenseMatrix::zeros(m, n);
        let mut vm = DenseMatrix::zeros(n, n);
        let mut sigma = Vec::with_capacity(n);
        for (k, &(j, s)) in order.iter().enumerate() {
            sigma.push(s);
            if s > 0.0 {
                for i in 0..m {
                    u.set(i, k, w[j][i] / s);
                }
            }
            for i in 0..n {
                vm.set(i, k, v[j][i]);
            }
        }
        Self { u, sigma, v: vm }
    }

    /// Singular values above `max(rows, cols) · ε · σ_max` count toward the rank.
    pub fn tolerance(&self) -> f64 {
        let dim = self.u.rows.max(self.v.rows) as f64;
        dim * f64::EPSILON * self.sigma.first().copied().unwrap_or(0.0)
    }

    pub fn rank(&self) -> usize {
        let tol = self.tolerance();
        self.sigma.iter().filter(|&&s| s > tol).count()
    }

    /// Minimum-norm least-squares solution `A⁺ b`.
    pub fn pseudo_solve(&self, b: &[f64]) -> Vec<f64> {
        self.pseudo_solve_above(b, self.tolerance())
    }

    /// Pseudo-inverse solve keeping only singular values above `cutoff`.
    pub fn pseudo_solve_above(&self, b: &[f64], cutoff: f64) -> Vec<f64> {
        assert_eq!(b.len(), self.u.rows);
        let n = self.v.rows;
        let mut x = vec![0.0; n];
        for k in (0..self.sigma.len()).take_while(|&k| self.sigma[k] > cutoff) {
            let coeff = (0..self.u.rows).map(|i| self.u.get(i, k) * b[i]).sum::<f64>() / self.sigma[k];
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += coeff * self.v.get(i, k);
            }
        }
        x
    }

    /// Orthonormal basis of the null space as a `cols × nullity` matrix.
    pub fn null_space(&self) -> DenseMatrix {
        let n = self.v.rows;
        let r = self.rank();
        let mut out = DenseMatrix::zeros(n, n - r);
        for k in r..n {
            for i in 0..n {
                out.set(i, k - r, self.v.get(i, k));
            }
        }
        out
    }
}

/// Orthonormal basis of the complement of the span of orthonormal `basis` in `R^n`.
fn orthonormal_complement(basis: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    // Householder QR of [basis]; the trailing columns of Q span the complement.
    let mut work: Vec<Vec<f64>> = basis.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for k in 0..work.len() {
        let x = &work[k][k..];
        let alpha = -x[0].signum() * norm2(x);
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = norm2(&v);
        if vn > 0.0 {
            v.iter_mut().for_each(|e| *e /= vn);
        }
        for col in work.iter_mut().skip(k) {
            let proj = 2.0 * dot(&v, &col[k..]);
            axpy(-proj, &v, &mut col[k..]);
        }
        reflectors.push(v);
    }
    (basis.len()..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (k, v) in reflectors.iter().enumerate().rev() {
                let proj = 2.0 * dot(v, &e[k..]);
                axpy(-proj, v, &mut e[k..]);
            }
            e
        })
        .collect()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Minimum 2-norm minimizer of `‖A x − b‖₂`.
pub fn least_squares_min_norm(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), a.rows, "least squares dimension mismatch");
    if a.rows == 0 || a.cols == 0 {
        return vec![0.0; a.cols];
    }
    Svd::new(a).pseudo_solve(b)
}

/// Solution of an equality-constrained quadratic program.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub primal: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// `‖G·primal − h‖₂`; nonzero exactly when `h` lies outside `range(G)`.
    pub constraint_residual: f64,
    /// Numerical rank of the constraint matrix.
    pub constraint_rank: usize,
}

/// Minimizes `½ αᵀHα − gᵀα` subject to `Gα = h`.
///
/// When `h ∉ range(G)` the constraints are replaced by `Gα = P h`, with `P`
/// the orthogonal projector onto `range(G)`, and the gap is reported in
/// [`KktSolution::constraint_residual`]. Among all optima the minimum-norm
/// one is returned.
pub fn solve_equality_qp(h_mat: &DenseMatrix, g: &[f64], c: &DenseMatrix, h: &[f64]) -> Result<KktSolution> {
    let d = h_mat.cols;
    check_qp_dims(h_mat.rows, d, g.len(), c, h)?;
    let (particular, null) = constraint_split(c, h);
    let reduced_h = null.transpose().matmul(&h_mat.matmul(&null));
    let grad_at_p = sub(&h_mat.matvec(&particular), g);
    let rhs: Vec<f64> = null.tr_matvec(&grad_at_p).iter().map(|v| -v).collect();
    let z = least_squares_min_norm(&reduced_h, &rhs);
    let primal = add(&particular, &null.matvec(&z));
    let gradient = sub(&h_mat.matvec(&primal), g);
    Ok(finish_kkt(c, h, primal, &gradient))
}

/// Relative singular-value cutoff of the reduced least-squares problem. The
/// null-space basis carries rounding from the constraint SVD, which lifts
/// exactly-zero directions of `B Z` to about 1e-13 relative.
const REDUCED_RANK_RTOL: f64 = 1e-10;

/// Minimizes `½‖Bα − t‖²` subject to `Gα = h`.
///
/// Same program as [`solve_equality_qp`] with `H = BᵀB`, `g = Bᵀt`, but the
/// reduced problem is solved as a least-squares problem in `B`, so the rank
/// decision happens on singular values of `B` instead of their squares.
pub fn solve_equality_lsq(b: &DenseMatrix, t: &[f64], c: &DenseMatrix, h: &[f64]) -> Result<KktSolution> {
    let d = b.cols;
    check_qp_dims(d, d, d, c, h)?;
    if t.len() != b.rows {
        return Err(Error::DimensionMismatch("target length does not match B".into()));
    }
    let (particular, null) = constraint_split(c, h);
    let (r, qt) = compress_rows(b, t);
    let residual_at_p = sub(&qt, &r.matvec(&particular));
    let reduced = Svd::new(&r.matmul(&null));
    let cutoff = reduced.tolerance().max(REDUCED_RANK_RTOL * reduced.sigma.first().copied().unwrap_or(0.0));
    let z = reduced.pseudo_solve_above(&residual_at_p, cutoff);
    let primal = add(&particular, &null.matvec(&z));
    let gradient = r.tr_matvec(&sub(&r.matvec(&primal), &qt));
    Ok(finish_kkt(c, h, primal, &gradient))
}

/// `(R, (Qᵀt)[..cols])` from a Householder QR `B = QR` of a tall `B`, so that
/// `‖Bx − t‖² = ‖Rx − Qᵀt‖² + const`; other shapes are returned unchanged.
fn compress_rows(b: &DenseMatrix, t: &[f64]) -> (DenseMatrix, Vec<f64>) {
    let (m, n) = (b.rows, b.cols);
    if m <= n {
        return (b.clone(), t.to_vec());
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| b.column(j)).collect();
    let mut rhs = t.to_vec();
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = norm2(x);
        if norm == 0.0 {
            continue;
        }
        let alpha = -x[0].signum() * norm;
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = norm2(&v);
        if vn == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vn);
        for col in cols.iter_mut().skip(k) {
            let proj = 2.0 * dot(&v, &col[k..]);
            axpy(-proj, &v, &mut col[k..]);
        }
        let proj = 2.0 * dot(&v, &rhs[k..]);
        axpy(-proj, &v, &mut rhs[k..]);
    }
    let mut r = DenseMatrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r.set(i, j, col[i]);
        }
    }
    rhs.truncate(n);
    (r, rhs)
}

fn check_qp_dims(h_rows: usize, d: usize, g_len: usize, c: &DenseMatrix, h: &[f64]) -> Result<()> {
    if h_rows != d || g_len != d || (c.rows > 0 && c.cols != d) || c.rows != h.len() {
        return Err(Error::DimensionMismatch(format!(
            "QP with d={d}: H rows {h_rows}, g {g_len}, G {}x{}, h {}",
            c.rows,
            c.cols,
            h.len()
        )));
    }
    Ok(())
}

/// Minimum-norm particular solution of `Gα = Ph` and an orthonormal null-space basis.
fn constraint_split(c: &DenseMatrix, h: &[f64]) -> (Vec<f64>, DenseMatrix) {
    let d = c.cols;
    if c.rows == 0 {
        return (vec![0.0; d], DenseMatrix::identity(d));
    }
    let svd = Svd::new(c);
    (svd.pseudo_solve(h), svd.null_space())
}

fn finish_kkt(c: &DenseMatrix, h: &[f64], primal: Vec<f64>, gradient: &[f64]) -> KktSolution {
    if c.rows == 0 {
        return KktSolution {
            primal,
            multipliers: Vec::new(),
            constraint_residual: 0.0,
            constraint_rank: 0,
        };
    }
    // Stationarity: Hα − g + Gᵀλ = 0.
    let neg_grad: Vec<f64> = gradient.iter().map(|v| -v).collect();
    let ct = c.transpose();
    let svd = Svd::new(&ct);
    let multipliers = svd.pseudo_solve(&neg_grad);
    let constraint_residual = norm2(&sub(&c.matvec(&primal), h));
    KktSolution {
        primal,
        multipliers,
        constraint_residual,
        constraint_rank: svd.rank(),
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
