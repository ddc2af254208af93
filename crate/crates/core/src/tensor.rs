//! Dense batched rank-4 tensors and the handful of operations the attacks
//! are built from: channel-wise matmul, per-image normalization, box clamping
//! and their exact derivatives.
//!
//! Layout is row-major `B × C × N × M`. Every per-image reduction runs over
//! the whole `C × N × M` block of one image; there are no cross-image
//! reductions anywhere in this module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg;

/// Norms at or below this are treated as zero by [`normalize_per_image`].
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Dense `B × C × N × M` tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

/// A batch of images with pixel values in `[0, 1]`.
pub type ImageBatch = Tensor4;

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        ensure!(
            dims.iter().all(|&d| d >= 1),
            "all tensor dims must be >= 1, got {dims:?}"
        );
        let expected: usize = dims.iter().product();
        ensure!(
            data.len() == expected,
            "tensor of dims {dims:?} needs {expected} elements, got {}",
            data.len()
        );
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Tensor4::zeros(dims);
        let [bb, cc, nn, mm] = dims;
        let mut k = 0;
        for b in 0..bb {
            for c in 0..cc {
                for i in 0..nn {
                    for j in 0..mm {
                        t.data[k] = f([b, c, i, j]);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn rows(&self) -> usize {
        self.dims[2]
    }

    pub fn cols(&self) -> usize {
        self.dims[3]
    }

    /// Elements per image (`C·N·M`).
    pub fn image_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, [b, c, i, j]: [usize; 4]) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + i) * self.dims[3] + j
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn image_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// The `N × M` slice of channel `c` in image `b`, row-major.
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let n = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * n;
        &mut self.data[start..start + n]
    }

    /// Copy of images `start..end` as a new batch.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor4 {
        let n = self.image_len();
        let mut dims = self.dims;
        dims[0] = end - start;
        Tensor4 {
            dims,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Gathers the listed images into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let mut dims = self.dims;
        dims[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor4 { dims, data }
    }

    /// Concatenates batches along the batch axis.
    pub fn concat(parts: &[Tensor4]) -> Result<Tensor4> {
        ensure!(!parts.is_empty(), "cannot concatenate zero tensors");
        let mut dims = parts[0].dims;
        for p in parts {
            ensure!(
                p.dims[1..] == dims[1..],
                "concat: image dims {:?} differ from {:?}",
                &p.dims[1..],
                &dims[1..]
            );
        }
        dims[0] = parts.iter().map(|p| p.dims[0]).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor4 { dims, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        ensure!(
            self.dims == other.dims,
            "shape mismatch: {:?} vs {:?}",
            self.dims,
            other.dims
        );
        Ok(Tensor4 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|v| v * s)
    }

    /// Multiplies every element of image `b` by `scales[b]`.
    pub fn scale_images(&self, scales: &[f64]) -> Tensor4 {
        let mut out = self.clone();
        for (b, &s) in scales.iter().enumerate() {
            out.image_mut(b).iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Perturbation norm used for budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Frobenius,
    Linf,
    Nuclear,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Frobenius => "frobenius",
            NormKind::Linf => "linf",
            NormKind::Nuclear => "nuclear",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NormKind::Frobenius => 0,
            NormKind::Linf => 1,
            NormKind::Nuclear => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NormKind::Frobenius),
            1 => Some(NormKind::Linf),
            2 => Some(NormKind::Nuclear),
            _ => None,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" | "l2" | "fro" => Ok(NormKind::Frobenius),
            "linf" | "inf" => Ok(NormKind::Linf),
            "nuclear" | "nuc" => Ok(NormKind::Nuclear),
            other => Err(Error::contract(format!("unknown norm kind {other:?}"))),
        }
    }
}

fn check_same_bc(a: &Tensor4, b: &Tensor4, what: &str) -> Result<()> {
    ensure!(
        a.dims[0] == b.dims[0],
        "{what}: batch axis mismatch ({} vs {})",
        a.dims[0],
        b.dims[0]
    );
    ensure!(
        a.dims[1] == b.dims[1],
        "{what}: channel axis mismatch ({} vs {})",
        a.dims[1],
        b.dims[1]
    );
    Ok(())
}

/// Channel-wise product: `out[b,c] = a[b,c] · b[b,c]` for `a: B×C×N×r`,
/// `b: B×C×r×M`.
pub fn channel_matmul(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_bc(a, b, "channel_matmul")?;
    let [bb, cc, n, r] = a.dims;
    ensure!(
        b.dims[2] == r,
        "channel_matmul: rank axis mismatch ({} vs {})",
        r,
        b.dims[2]
    );
    let m = b.dims[3];
    let mut out = Tensor4::zeros([bb, cc, n, m]);
    for bi in 0..bb {
        for c in 0..cc {
            let lhs = a.channel(bi, c);
            let rhs = b.channel(bi, c);
            let dst = out.channel_mut(bi, c);
            for i in 0..n {
                let row = &mut dst[i * m..(i + 1) * m];
                for k in 0..r {
                    let aik = lhs[i * r + k];
                    let rrow = &rhs[k * m..(k + 1) * m];
                    for (o, &v) in row.iter_mut().zip(rrow) {
                        *o += aik * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `out[b,c] = a[b,c] · b[b,c]ᵀ` for `a: B×C×N×M`, `b: B×C×r×M`; result `B×C×N×r`.
pub fn channel_matmul_nt(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_bc(a, b, "channel_matmul_nt")?;
    let [bb, cc, n, m] = a.dims;
    ensure!(
        b.dims[3] == m,
        "channel_matmul_nt: column axis mismatch ({} vs {})",
        m,
        b.dims[3]
    );
    let r = b.dims[2];
    let mut out = Tensor4::zeros([bb, cc, n, r]);
    for bi in 0..bb {
        for c in 0..cc {
            let lhs = a.channel(bi, c);
            let rhs = b.channel(bi, c);
            let dst = out.channel_mut(bi, c);
            for i in 0..n {
                let arow = &lhs[i * m..(i + 1) * m];
                for k in 0..r {
                    let brow = &rhs[k * m..(k + 1) * m];
                    dst[i * r + k] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
    }
    Ok(out)
}

/// `out[b,c] = a[b,c]ᵀ · b[b,c]` for `a: B×C×N×r`, `b: B×C×N×M`; result `B×C×r×M`.
pub fn channel_matmul_tn(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_bc(a, b, "channel_matmul_tn")?;
    let [bb, cc, n, r] = a.dims;
    ensure!(
        b.dims[2] == n,
        "channel_matmul_tn: row axis mismatch ({} vs {})",
        n,
        b.dims[2]
    );
    let m = b.dims[3];
    let mut out = Tensor4::zeros([bb, cc, r, m]);
    for bi in 0..bb {
        for c in 0..cc {
            let lhs = a.channel(bi, c);
            let rhs = b.channel(bi, c);
            let dst = out.channel_mut(bi, c);
            for i in 0..n {
                let brow = &rhs[i * m..(i + 1) * m];
                for k in 0..r {
                    let aik = lhs[i * r + k];
                    let drow = &mut dst[k * m..(k + 1) * m];
                    for (o, &v) in drow.iter_mut().zip(brow) {
                        *o += aik * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn frobenius(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Divides every image by its Frobenius norm.
///
/// Images whose norm is at most [`DEGENERATE_EPS`] are returned unchanged and
/// flagged in the second return value.
pub fn normalize_per_image(z: &Tensor4) -> (Tensor4, Vec<bool>) {
    let mut out = z.clone();
    let mut flags = Vec::with_capacity(z.batch());
    for b in 0..z.batch() {
        let img = out.image_mut(b);
        let n = frobenius(img);
        if n > DEGENERATE_EPS {
            img.iter_mut().for_each(|v| *v /= n);
            flags.push(false);
        } else {
            flags.push(true);
        }
    }
    (out, flags)
}

/// Elementwise `min(max(x, lo), hi)`.
pub fn clamp_box(x: &Tensor4, lo: f64, hi: f64) -> Result<Tensor4> {
    ensure!(lo < hi, "clamp_box requires lo < hi, got lo={lo}, hi={hi}");
    Ok(x.map(|v| v.max(lo).min(hi)))
}

/// Subgradient of [`clamp_box`]: 1 strictly inside `(lo, hi)`, 0 otherwise.
pub fn clamp_mask(x: &Tensor4, lo: f64, hi: f64) -> Tensor4 {
    x.map(|v| if v > lo && v < hi { 1.0 } else { 0.0 })
}

/// Per-image norm of `x`.
pub fn image_norm(x: &Tensor4, kind: NormKind) -> Vec<f64> {
    (0..x.batch())
        .map(|b| match kind {
            NormKind::Frobenius => frobenius(x.image(b)),
            NormKind::Linf => x.image(b).iter().fold(0.0, |m, v| f64::max(m, v.abs())),
            NormKind::Nuclear => linalg::nuclear_norm_slice(x.image(b), x.channels(), x.rows(), x.cols()),
        })
        .collect()
}

/// Vector-Jacobian product of [`normalize_per_image`].
///
/// For a non-degenerate image with `n = ‖z‖` and `ẑ = z/n` this is
/// `(g − ⟨g, ẑ⟩ ẑ) / n`; degenerate images pass `g` through unchanged.
pub fn grad_normalize(z: &Tensor4, g_out: &Tensor4) -> Result<Tensor4> {
    ensure!(
        z.dims == g_out.dims,
        "grad_normalize: shape mismatch {:?} vs {:?}",
        z.dims,
        g_out.dims
    );
    let mut out = g_out.clone();
    for b in 0..z.batch() {
        let zi = z.image(b);
        let n = frobenius(zi);
        if n <= DEGENERATE_EPS {
            continue;
        }
        let gi = out.image_mut(b);
        let dot: f64 = gi.iter().zip(zi).map(|(g, z)| g * z).sum::<f64>() / n;
        for (g, &zv) in gi.iter_mut().zip(zi) {
            *g = (*g - dot * zv / n) / n;
        }
    }
    Ok(out)
}
