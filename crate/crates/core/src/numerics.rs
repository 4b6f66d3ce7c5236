//! Dense real linear algebra used by the memory layer.
//!
//! Everything here is a pure function over immutable inputs. Matrices are
//! row-major `f64`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("non-finite entry")]
    NonFinite,
    #[error("eigensolver did not converge after {0} iterations")]
    NoConvergence(usize),
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "\n]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if v.len() != self.cols {
            return Err(NumericsError::Shape(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest `|a_ij - a_ji|`; `None` when not square.
    pub fn max_asymmetry(&self) -> Option<f64> {
        if self.rows != self.cols {
            return None;
        }
        let n = self.rows;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }
}

/// Subtracts each column's mean from that column.
pub fn center_columns(m: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if m.rows == 0 || m.cols == 0 {
        return Err(NumericsError::Empty);
    }
    let mut means = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (acc, v) in means.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    let n = m.rows as f64;
    means.iter_mut().for_each(|s| *s /= n);

    let mut out = m.clone();
    for r in 0..m.rows {
        let row = &mut out.data[r * m.cols..(r + 1) * m.cols];
        for (v, mean) in row.iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    Ok(out)
}

/// `Pᵀ P`. The upper triangle is accumulated row by row and mirrored, so the
/// result is exactly symmetric.
pub fn gram(p: &DenseMatrix) -> DenseMatrix {
    let d = p.cols;
    let mut s = DenseMatrix::zeros(d, d);
    for r in 0..p.rows {
        let row = p.row(r);
        for i in 0..d {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let dst = &mut s.data[i * d + i..(i + 1) * d];
            for (o, &b) in dst.iter_mut().zip(&row[i..]) {
                *o += a * b;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            s.data[i * d + j] = s.data[j * d + i];
        }
    }
    s
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Unit eigenvectors stored as columns; column `q` pairs with `values[q]`.
    pub vectors: DenseMatrix,
}

impl SymmetricEigen {
    pub fn vector(&self, q: usize) -> Vec<f64> {
        self.vectors.column(q)
    }
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;
const JACOBI_RELATIVE_TOLERANCE: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

fn check_symmetric(s: &DenseMatrix) -> Result<usize, NumericsError> {
    if s.rows != s.cols {
        return Err(NumericsError::NotSquare {
            rows: s.rows,
            cols: s.cols,
        });
    }
    if s.rows == 0 {
        return Err(NumericsError::Empty);
    }
    let asym = s.max_asymmetry().unwrap_or(0.0);
    if asym >= SYMMETRY_TOLERANCE {
        return Err(NumericsError::NotSymmetric(asym));
    }
    Ok(s.rows)
}

/// Sorts eigenpairs by descending eigenvalue and flips each eigenvector so
/// its largest-magnitude entry is positive. `vt` holds one eigenvector per
/// row, `values[i]` pairs with row `i`.
fn finalize(values: &[f64], vt: &[f64], n: usize) -> SymmetricEigen {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let v = &vt[i * n..(i + 1) * n];
        let lead = v.iter().fold(0.0_f64, |m, &x| if x.abs() > m.abs() { x } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for (r, x) in v.iter().enumerate() {
            vectors.data[r * n + col] = sign * x;
        }
    }
    SymmetricEigen {
        values: sorted,
        vectors,
    }
}

/// Symmetric eigendecomposition by Householder reduction to tridiagonal
/// form followed by the implicit QL algorithm with Wilkinson shifts.
///
/// Eigenvalues come back in descending order; each eigenvector is
/// sign-normalized so that its largest-magnitude entry is positive.
pub fn sym_eig(s: &DenseMatrix) -> Result<SymmetricEigen, NumericsError> {
    let n = check_symmetric(s)?;
    let mut v = s.data.clone();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (v[i * n + j] + v[j * n + i]);
            v[i * n + j] = m;
            v[j * n + i] = m;
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    householder_tridiagonalize(&mut v, &mut d, &mut e, n);
    // QL rotates pairs of eigenvector columns; work on rows instead
    let mut vt = DenseMatrix { rows: n, cols: n, data: v }.transpose().data;
    tridiagonal_ql(&mut d, &mut e, &mut vt, n)?;
    Ok(finalize(&d, &vt, n))
}

/// Householder reduction of the symmetric matrix in `v` (row-major, n×n).
/// On return `d` holds the diagonal, `e[1..]` the sub-diagonal and `v` the
/// accumulated orthogonal transformation.
fn householder_tridiagonalize(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    let at = |r: usize, c: usize| r * n + c;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            // e = A d over the lower triangle, walked row by row
            for j in 0..i {
                v[at(j, i)] = d[j];
            }
            for k in 0..i {
                let dk = d[k];
                let row = &v[at(k, 0)..at(k, k)];
                let mut acc = v[at(k, k)] * dk;
                for (j, &a) in row.iter().enumerate() {
                    e[j] += a * dk;
                    acc += a * d[j];
                }
                e[k] += acc;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for k in 0..i {
                let (ek, dk) = (e[k], d[k]);
                for (j, x) in v[at(k, 0)..=at(k, k)].iter_mut().enumerate() {
                    *x -= d[j] * ek + e[j] * dk;
                }
            }
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            // row-wise passes; the column-wise form is much slower on large n
            let mut g = vec![0.0; i + 1];
            for k in 0..=i {
                let w = v[at(k, i + 1)];
                for (gj, &x) in g.iter_mut().zip(&v[at(k, 0)..at(k, i + 1)]) {
                    *gj += w * x;
                }
            }
            for k in 0..=i {
                let dk = d[k];
                for (x, gj) in v[at(k, 0)..at(k, i + 1)].iter_mut().zip(&g) {
                    *x -= gj * dk;
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal `(d, e)`; rotations are applied to the
/// rows of `vt`, which hold the eigenvectors on return.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], vt: &mut [f64], n: usize) -> Result<(), NumericsError> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let max_iterations = 30 * n.max(1);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iterations = 0;
            loop {
                iterations += 1;
                if iterations > max_iterations {
                    return Err(NumericsError::NoConvergence(iterations));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    rotate_rows(vt, n, i, i + 1, c, s);
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps over every off-diagonal pair until the off-diagonal Frobenius norm
/// drops below `1e-10 * ‖S‖_F` (at most 100 sweeps). Output conventions match
/// [`sym_eig`]. Much slower than [`sym_eig`] on large matrices but shares no
/// code with it, which makes it a useful cross-check.
pub fn jacobi_eig(s: &DenseMatrix) -> Result<SymmetricEigen, NumericsError> {
    let n = check_symmetric(s)?;
    let mut a = s.data.clone();
    // symmetrize exactly so row and column updates stay consistent
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    // rows of `vt` are the eigenvectors
    let mut vt = DenseMatrix::identity(n).data;
    let target = JACOBI_RELATIVE_TOLERANCE * s.frobenius_norm();

    let mut converged = false;
    for sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a, n) <= target {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let h = aqq - app;
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                rotate(&mut a, n, p, q, c, sn);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                rotate_rows(&mut vt, n, p, q, c, sn);
            }
        }
    }
    if !converged && off_diagonal_norm(&a, n) > target {
        return Err(NumericsError::NoConvergence(JACOBI_MAX_SWEEPS));
    }
    let values: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    Ok(finalize(&values, &vt, n))
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    sum.sqrt()
}

/// Applies the plane rotation to rows and columns `p`, `q` of a symmetric
/// matrix, leaving the 2x2 block for the caller.
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[p * n + k];
        let akq = a[q * n + k];
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        a[p * n + k] = np;
        a[q * n + k] = nq;
        a[k * n + p] = np;
        a[k * n + q] = nq;
    }
}

fn rotate_rows(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = m.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (vp, vq) = (*x, *y);
        *x = c * vp - s * vq;
        *y = s * vp + c * vq;
    }
}

/// Pearson correlation with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    /// Either input had zero variance; `value` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation coefficient, clamped to `[-1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::Shape(format!(
            "pearson over vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(NumericsError::Empty);
    }
    if is_constant(a) || is_constant(b) {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok(Correlation {
        value: r.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub(crate) fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::new(rows, cols, data).unwrap()
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    #[test]
    fn center_small_examples() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let c = center_columns(&m).unwrap();
        assert_eq!(c.data(), &[-1.0, -1.0, 1.0, 1.0]);

        let single = DenseMatrix::from_rows(&[[5.0, 7.0]]).unwrap();
        assert_eq!(center_columns(&single).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn center_rejects_empty() {
        let empty = DenseMatrix::zeros(0, 3);
        assert_eq!(center_columns(&empty), Err(NumericsError::Empty));
    }

    #[test]
    fn centered_columns_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 10, 4);
        let c = center_columns(&m).unwrap();
        for col in 0..4 {
            let sum: f64 = c.column(col).iter().sum();
            assert!(sum.abs() < 1e-10, "column {col} sums to {sum}");
        }
    }

    #[test]
    fn gram_small_examples() {
        let id = DenseMatrix::identity(2);
        assert_eq!(gram(&id).data(), id.data());
        let ones = DenseMatrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(gram(&ones).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_matrix(&mut rng, 8, 3);
        let s = gram(&p);
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for r in 0..8 {
                    acc += p.get(r, i) * p.get(r, j);
                }
                assert_abs_diff_eq!(s.get(i, j), acc, epsilon = 1e-12);
            }
        }
        assert_eq!(s.max_asymmetry(), Some(0.0));
    }

    #[test]
    fn eig_identity() {
        let e = sym_eig(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eig_two_by_two_closed_form() {
        // roots of λ² - 4λ + 3
        let s = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&s).unwrap();
        assert_abs_diff_eq!(e.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], 1.0, epsilon = 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = e.vector(0);
        let v1 = e.vector(1);
        assert_abs_diff_eq!(v0[0].abs(), h, epsilon = 1e-12);
        assert_abs_diff_eq!(v0[0], v0[1], epsilon = 1e-12);
        assert_abs_diff_eq!(v1[0].abs(), h, epsilon = 1e-12);
        assert_abs_diff_eq!(v1[0], -v1[1], epsilon = 1e-12);
    }

    #[test]
    fn eig_rejects_bad_input() {
        let s = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&s), Err(NumericsError::NotSymmetric(_))));
        let r = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&r), Err(NumericsError::NotSquare { .. })));
    }

    #[test]
    fn eig_residuals_on_random_20() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let s = random_symmetric(&mut rng, 20);
        let e = sym_eig(&s).unwrap();
        for q in 0..20 {
            let v = e.vector(q);
            let sv = s.mul_vec(&v).unwrap();
            let res = sv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - e.values[q] * b).abs())
                .fold(0.0, f64::max);
            assert!(res <= 1e-8 * e.values[q].abs().max(1.0), "pair {q}: {res}");
        }
        let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((vtv.get(i, j) - expected).abs() <= 1e-8);
            }
        }
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eig_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_symmetric(&mut rng, 6);
        let e = sym_eig(&s).unwrap();
        for q in 0..6 {
            let v = e.vector(q);
            let lead = v.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn eig_of_gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = center_columns(&random_matrix(&mut rng, 5, 12)).unwrap();
        let e = sym_eig(&gram(&p)).unwrap();
        assert!(e.values.iter().all(|&l| l >= -1e-8));
    }

    #[test]
    fn ql_and_jacobi_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [1, 2, 3, 7, 25, 40] {
            let s = random_symmetric(&mut rng, n);
            let a = sym_eig(&s).unwrap();
            let b = jacobi_eig(&s).unwrap();
            for q in 0..n {
                assert_abs_diff_eq!(a.values[q], b.values[q], epsilon = 1e-9);
            }
            // distinct eigenvalues almost surely, so vectors agree after sign normalization
            for q in 0..n {
                for (x, y) in a.vector(q).iter().zip(b.vector(q)) {
                    assert_abs_diff_eq!(x, &y, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn eig_low_rank_gram() {
        // rank 3 in 30 dimensions: many repeated zero eigenvalues
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = center_columns(&random_matrix(&mut rng, 4, 30)).unwrap();
        let s = gram(&p);
        for e in [sym_eig(&s).unwrap(), jacobi_eig(&s).unwrap()] {
            assert!(e.values[2] > 1e-6);
            assert!(e.values[3..].iter().all(|l| l.abs() < 1e-9));
            let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
            for i in 0..30 {
                for j in 0..30 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv.get(i, j) - expected).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn eig_zero_matrix() {
        let e = sym_eig(&DenseMatrix::zeros(4, 4)).unwrap();
        assert_eq!(e.values, vec![0.0; 4]);
    }

    #[test]
    fn pearson_self_and_negation() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(pearson(&a, &a).unwrap().value, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&a, &neg).unwrap().value, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn pearson_zero_variance_is_flagged() {
        let c = pearson(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(
            c,
            Correlation {
                value: 0.0,
                degenerate: true
            }
        );
        assert!(pearson(&[1.0], &[2.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[2.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 16),
            b in prop::collection::vec(-10.0f64..10.0, 16),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let ab = pearson(&a, &b).unwrap();
            let ba = pearson(&b, &a).unwrap();
            prop_assert!((ab.value - ba.value).abs() < 1e-12);
            prop_assert!(ab.value >= -1.0 && ab.value <= 1.0);
            let t: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
            let tb = pearson(&t, &b).unwrap();
            prop_assert!((tb.value - ab.value).abs() < 1e-10);
        }

        #[test]
        fn eig_trace_matches(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_symmetric(&mut rng, n);
            let e = sym_eig(&s).unwrap();
            let sum: f64 = e.values.iter().sum();
            let tr = s.trace();
            prop_assert!((sum - tr).abs() <= 1e-6 * tr.abs().max(1.0));
        }
    }
}
