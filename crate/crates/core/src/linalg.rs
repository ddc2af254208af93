//! Small dense SVD and the spectral tools built on it: nuclear norm, best
//! rank-r truncation, balanced factor splitting and singular spectra.
//!
//! Matrices here are at most a few hundred per side. Problems whose smaller
//! dimension is at most [`JACOBI_MAX_COLS`] use one-sided Jacobi; larger ones
//! go through Householder bidiagonalization and implicit-shift QR.

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor4;

pub const JACOBI_MAX_COLS: usize = 32;
pub const MAX_SWEEPS: usize = 60;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix {rows}x{cols} needs {} elements, got {}",
            rows * cols,
            data.len()
        );
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            "matmul: inner dims differ ({} vs {})",
            self.cols,
            other.rows
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `a = u · diag(sigma) · vt` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub sigma: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.sigma.len())
    }

    /// `Σ_{j<r} σ_j u_j v_jᵀ`.
    pub fn reconstruct_rank(&self, r: usize) -> Matrix {
        let (n, m) = (self.u.rows(), self.vt.cols());
        let mut out = Matrix::zeros(n, m);
        for j in 0..r.min(self.sigma.len()) {
            let s = self.sigma[j];
            if s == 0.0 {
                continue;
            }
            for i in 0..n {
                let a = self.u[(i, j)] * s;
                for c in 0..m {
                    out.data[i * m + c] += a * self.vt[(j, c)];
                }
            }
        }
        out
    }
}

/// Singular value decomposition of a finite matrix.
///
/// Singular values are sorted nonincreasing. Each left singular vector is
/// signed so that its first entry of largest magnitude is nonnegative, which
/// makes the output deterministic for a given input.
pub fn svd(a: &Matrix) -> Result<Svd> {
    ensure!(
        a.rows >= 1 && a.cols >= 1,
        "svd needs a non-empty matrix, got {}x{}",
        a.rows,
        a.cols
    );
    ensure!(
        a.data.iter().all(|v| v.is_finite()),
        "svd input contains non-finite entries"
    );
    if a.cols > a.rows {
        // a = u s vt  <=>  aᵀ = vtᵀ s uᵀ
        let t = svd_tall(&a.transpose())?;
        let mut out = Svd {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        return Ok(out);
    }
    let mut out = svd_tall(a)?;
    fix_signs(&mut out);
    Ok(out)
}

/// SVD of a matrix with `rows >= cols`, sorted, no sign fixing.
fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (n, k) = (a.rows, a.cols);
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| a[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| (i == j) as u8 as f64).collect())
        .collect();
    let mut sigma = vec![0.0; k];

    if k <= JACOBI_MAX_COLS {
        one_sided_jacobi(&mut w, &mut v)?;
        for j in 0..k {
            sigma[j] = norm(&w[j]);
        }
        let smax = sigma.iter().copied().fold(0.0, f64::max);
        let tiny = smax * f64::EPSILON;
        for j in 0..k {
            if sigma[j] > tiny && sigma[j] > 0.0 {
                let s = sigma[j];
                w[j].iter_mut().for_each(|x| *x /= s);
            } else {
                w[j].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    } else {
        golub_kahan(&mut w, &mut sigma, &mut v)?;
    }

    // sort descending; stable so ties keep column order
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let sigma_sorted: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let mut ucols: Vec<Vec<f64>> = order.iter().map(|&j| w[j].clone()).collect();
    let vcols: Vec<&Vec<f64>> = order.iter().map(|&j| &v[j]).collect();

    complete_basis(&mut ucols, n);

    let u = Matrix::from_fn(n, k, |i, j| ucols[j][i]);
    let vt = Matrix::from_fn(k, k, |j, i| vcols[j][i]);
    Ok(Svd {
        u,
        sigma: sigma_sorted,
        vt,
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Hestenes one-sided Jacobi: rotates column pairs of `w` until they are
/// mutually orthogonal, accumulating the rotations in `v`.
fn one_sided_jacobi(w: &mut [Vec<f64>], v: &mut [Vec<f64>]) -> Result<()> {
    let k = w.len();
    let n = w.first().map_or(0, Vec::len);
    let tol = (n.max(1) as f64) * f64::EPSILON;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::contract(format!(
        "one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
    )))
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

#[inline]
fn with_sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Golub–Kahan–Reinsch SVD on column-major `a` (`cols[j][i]`, m rows, n cols,
/// m >= n). On return `a` holds U's columns, `w` the singular values and
/// `v` V's columns.
#[allow(clippy::needless_range_loop)]
fn golub_kahan(a: &mut [Vec<f64>], w: &mut [f64], v: &mut [Vec<f64>]) -> Result<()> {
    let n = a.len();
    let m = a[0].len();
    // index helpers: A(i, j) = a[j][i], V(i, j) = v[j][i]
    let mut rv1 = vec![0.0; n];
    let (mut g, mut scale, mut anorm) = (0.0f64, 0.0f64, 0.0f64);
    let mut l = 0;
    // reflections of columns or rows this small only amplify rounding noise
    let negligible = a.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs())) * f64::EPSILON * f64::EPSILON;

    // Householder reduction to bidiagonal form
    for i in 0..n {
        l = i + 1;
        rv1[i] = scale * g;
        g = 0.0;
        scale = 0.0;
        let mut s = 0.0;
        if i < m {
            for k in i..m {
                scale += a[i][k].abs();
            }
            if scale > negligible {
                for k in i..m {
                    a[i][k] /= scale;
                    s += a[i][k] * a[i][k];
                }
                let f = a[i][i];
                g = -with_sign(s.sqrt(), f);
                let h = f * g - s;
                a[i][i] = f - g;
                for j in l..n {
                    let mut s = 0.0;
                    for k in i..m {
                        s += a[i][k] * a[j][k];
                    }
                    let f = s / h;
                    for k in i..m {
                        let aik = a[i][k];
                        a[j][k] += f * aik;
                    }
                }
                for k in i..m {
                    a[i][k] *= scale;
                }
            }
        }
        w[i] = scale * g;
        g = 0.0;
        s = 0.0;
        scale = 0.0;
        if i < m && i + 1 != n {
            for k in l..n {
                scale += a[k][i].abs();
            }
            if scale > negligible {
                for k in l..n {
                    a[k][i] /= scale;
                    s += a[k][i] * a[k][i];
                }
                let f = a[l][i];
                g = -with_sign(s.sqrt(), f);
                let h = f * g - s;
                a[l][i] = f - g;
                for k in l..n {
                    rv1[k] = a[k][i] / h;
                }
                for j in l..m {
                    let mut s = 0.0;
                    for k in l..n {
                        s += a[k][j] * a[k][i];
                    }
                    for k in l..n {
                        a[k][j] += s * rv1[k];
                    }
                }
                for k in l..n {
                    a[k][i] *= scale;
                }
            }
        }
        anorm = anorm.max(w[i].abs() + rv1[i].abs());
    }

    // accumulate right-hand transformations
    for i in (0..n).rev() {
        if i + 1 < n {
            if g != 0.0 {
                for j in l..n {
                    v[i][j] = (a[j][i] / a[l][i]) / g;
                }
                for j in l..n {
                    let mut s = 0.0;
                    for k in l..n {
                        s += a[k][i] * v[j][k];
                    }
                    for k in l..n {
                        let vki = v[i][k];
                        v[j][k] += s * vki;
                    }
                }
            }
            for j in l..n {
                v[j][i] = 0.0;
                v[i][j] = 0.0;
            }
        }
        v[i][i] = 1.0;
        g = rv1[i];
        l = i;
    }

    // accumulate left-hand transformations
    for i in (0..n.min(m)).rev() {
        let l = i + 1;
        let mut g = w[i];
        for j in l..n {
            a[j][i] = 0.0;
        }
        if g != 0.0 {
            g = 1.0 / g;
            for j in l..n {
                let mut s = 0.0;
                for k in l..m {
                    s += a[i][k] * a[j][k];
                }
                let f = (s / a[i][i]) * g;
                for k in i..m {
                    let aki = a[i][k];
                    a[j][k] += f * aki;
                }
            }
            for j in i..m {
                a[i][j] *= g;
            }
        } else {
            for j in i..m {
                a[i][j] = 0.0;
            }
        }
        a[i][i] += 1.0;
    }

    let eps = f64::EPSILON * anorm;
    // diagonalize the bidiagonal form
    for k in (0..n).rev() {
        let mut its = 0;
        loop {
            let mut flag = true;
            let mut l = k;
            loop {
                if l == 0 || rv1[l].abs() <= eps {
                    flag = false;
                    break;
                }
                if w[l - 1].abs() <= eps {
                    break;
                }
                l -= 1;
            }
            if flag {
                // cancel rv1[l]
                let nm = l - 1;
                let mut c = 0.0;
                let mut s = 1.0;
                for i in l..=k {
                    let f = s * rv1[i];
                    rv1[i] *= c;
                    if f.abs() <= eps {
                        break;
                    }
                    let g = w[i];
                    let h = f.hypot(g);
                    w[i] = h;
                    let hinv = 1.0 / h;
                    c = g * hinv;
                    s = -f * hinv;
                    for j in 0..m {
                        let y = a[nm][j];
                        let z = a[i][j];
                        a[nm][j] = y * c + z * s;
                        a[i][j] = z * c - y * s;
                    }
                }
            }
            let z = w[k];
            if l == k {
                if z < 0.0 {
                    w[k] = -z;
                    v[k].iter_mut().for_each(|x| *x = -*x);
                }
                break;
            }
            its += 1;
            if its > MAX_SWEEPS {
                return Err(Error::contract(format!(
                    "bidiagonal QR did not converge in {MAX_SWEEPS} iterations"
                )));
            }
            // shift from the bottom 2x2 minor
            let mut x = w[l];
            let nm = k - 1;
            let mut y = w[nm];
            let mut g = rv1[nm];
            let mut h = rv1[k];
            let mut f = ((y - z) * (y + z) + (g - h) * (g + h)) / (2.0 * h * y);
            g = f.hypot(1.0);
            f = ((x - z) * (x + z) + h * ((y / (f + with_sign(g, f))) - h)) / x;
            let mut c = 1.0;
            let mut s = 1.0;
            for j in l..=nm {
                let i = j + 1;
                g = rv1[i];
                y = w[i];
                h = s * g;
                g *= c;
                let mut z = f.hypot(h);
                rv1[j] = z;
                if z != 0.0 {
                    c = f / z;
                    s = h / z;
                } else {
                    c = 1.0;
                    s = 0.0;
                }
                f = x * c + g * s;
                g = g * c - x * s;
                h = y * s;
                y *= c;
                for jj in 0..n {
                    let xv = v[j][jj];
                    let zv = v[i][jj];
                    v[j][jj] = xv * c + zv * s;
                    v[i][jj] = zv * c - xv * s;
                }
                z = f.hypot(h);
                w[j] = z;
                if z != 0.0 {
                    let zinv = 1.0 / z;
                    c = f * zinv;
                    s = h * zinv;
                }
                f = c * g + s * y;
                x = c * y - s * g;
                for jj in 0..m {
                    let ya = a[j][jj];
                    let za = a[i][jj];
                    a[j][jj] = ya * c + za * s;
                    a[i][jj] = za * c - ya * s;
                }
            }
            rv1[l] = 0.0;
            rv1[k] = f;
            w[k] = x;
        }
    }
    Ok(())
}

/// Replaces zero columns with unit vectors orthogonal to all other columns
/// (Gram–Schmidt against the standard basis, applied twice).
fn complete_basis(cols: &mut [Vec<f64>], n: usize) {
    let k = cols.len();
    for j in 0..k {
        if norm(&cols[j]) > 0.5 {
            continue;
        }
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            for _ in 0..2 {
                for (other_idx, other) in cols.iter().enumerate() {
                    if other_idx == j || norm(other) < 0.5 {
                        continue;
                    }
                    let d = dot(&cand, other);
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= d * o);
                }
            }
            let cn = norm(&cand);
            if cn > best_norm {
                best_norm = cn;
                best = Some(cand);
            }
            if cn > 0.7 {
                break;
            }
        }
        let mut cand = best.expect("k <= n leaves room for a completion vector");
        cand.iter_mut().for_each(|c| *c /= best_norm);
        cols[j] = cand;
    }
}

fn fix_signs(s: &mut Svd) {
    let (n, k) = (s.u.rows(), s.u.cols());
    for j in 0..k {
        let mut pivot = 0.0f64;
        for i in 0..n {
            if s.u[(i, j)].abs() > pivot.abs() {
                pivot = s.u[(i, j)];
            }
        }
        if pivot < 0.0 {
            for i in 0..n {
                s.u[(i, j)] = -s.u[(i, j)];
            }
            for c in 0..s.vt.cols() {
                s.vt[(j, c)] = -s.vt[(j, c)];
            }
        }
    }
}

fn channel_matrix(data: &[f64], n: usize, m: usize) -> Matrix {
    Matrix {
        rows: n,
        cols: m,
        data: data.to_vec(),
    }
}

fn channel_svd(data: &[f64], n: usize, m: usize) -> Svd {
    // per-channel inputs come from finite tensors produced in-crate; callers
    // that accept external data validate finiteness before reaching here
    svd(&channel_matrix(data, n, m)).unwrap_or_else(|_| Svd {
        u: Matrix::zeros(n, n.min(m)),
        sigma: vec![f64::NAN; n.min(m)],
        vt: Matrix::zeros(n.min(m), m),
    })
}

/// Channel-averaged nuclear norm of one `C × N × M` image given as a slice.
pub fn nuclear_norm_slice(image: &[f64], c: usize, n: usize, m: usize) -> f64 {
    let plane = n * m;
    let total: f64 = (0..c)
        .map(|ch| {
            channel_svd(&image[ch * plane..(ch + 1) * plane], n, m)
                .sigma
                .iter()
                .sum::<f64>()
        })
        .sum();
    total / c as f64
}

/// `(1/C) Σ_c Σ_j σ_j(x[c])` for every image of the batch.
pub fn nuclear_norm(x: &Tensor4) -> Vec<f64> {
    let [b, c, n, m] = x.dims();
    (0..b).map(|bi| nuclear_norm_slice(x.image(bi), c, n, m)).collect()
}

fn check_rank(x: &Tensor4, r: usize, op: &str) -> Result<()> {
    let max = x.rows().min(x.cols());
    ensure!((1..=max).contains(&r), "{op}: rank {r} outside 1..={max}");
    Ok(())
}

/// Best rank-`r` approximation of every channel of every image.
pub fn truncate_rank(x: &Tensor4, r: usize) -> Result<Tensor4> {
    check_rank(x, r, "truncate_rank")?;
    ensure!(x.is_finite(), "truncate_rank input contains non-finite entries");
    let [b, c, n, m] = x.dims();
    let mut out = Tensor4::zeros(x.dims());
    for bi in 0..b {
        for ch in 0..c {
            let s = svd(&channel_matrix(x.channel(bi, ch), n, m))?;
            out.channel_mut(bi, ch).copy_from_slice(s.reconstruct_rank(r).data());
        }
    }
    Ok(out)
}

/// Splits every channel's rank-`r` truncation into balanced factors
/// `u = U_r·diag(√σ)` and `v = diag(√σ)·V_rᵀ`.
pub fn factor_split(x: &Tensor4, r: usize) -> Result<(Tensor4, Tensor4)> {
    check_rank(x, r, "factor_split")?;
    ensure!(x.is_finite(), "factor_split input contains non-finite entries");
    let [b, c, n, m] = x.dims();
    let mut u = Tensor4::zeros([b, c, n, r]);
    let mut v = Tensor4::zeros([b, c, r, m]);
    for bi in 0..b {
        for ch in 0..c {
            let s = svd(&channel_matrix(x.channel(bi, ch), n, m))?;
            let roots: Vec<f64> = s.sigma[..r].iter().map(|v| v.sqrt()).collect();
            let ud = u.channel_mut(bi, ch);
            for i in 0..n {
                for k in 0..r {
                    ud[i * r + k] = s.u[(i, k)] * roots[k];
                }
            }
            let vd = v.channel_mut(bi, ch);
            for k in 0..r {
                for j in 0..m {
                    vd[k * m + j] = roots[k] * s.vt[(k, j)];
                }
            }
        }
    }
    Ok((u, v))
}

/// Singular values of every channel: one `C × min(N, M)` matrix per image.
pub fn singular_spectrum(x: &Tensor4) -> Vec<Matrix> {
    let [b, c, n, m] = x.dims();
    let k = n.min(m);
    (0..b)
        .map(|bi| {
            let mut out = Matrix::zeros(c, k);
            for ch in 0..c {
                let s = channel_svd(x.channel(bi, ch), n, m);
                for j in 0..k {
                    out[(ch, j)] = s.sigma[j];
                }
            }
            out
        })
        .collect()
}
