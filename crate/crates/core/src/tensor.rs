//! Dense row-major `f32` matrices and the handful of kernels the editing
//! pipeline is built from.
//!
//! Storage is `f32`; reductions (softmax denominators, dot products, norms)
//! accumulate in `f64` and round once on the way out. Every function here is
//! pure and deterministic: identical inputs give bit-identical outputs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
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

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f32]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius norm of `self - other`, accumulated in `f64`.
    pub fn distance(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "Matrix::distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows()
            .map(|r| r.iter().map(|&v| f64::from(v)).sum())
            .collect()
    }

    pub fn scale(&self, k: f32) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Entrywise `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Mean of the rows, as a single row.
    pub fn mean_row(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.cols];
        for r in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += f64::from(v);
            }
        }
        let n = self.rows.max(1) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

/// Threshold below which attention values are zeroed out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskThreshold(f32);

impl MaskThreshold {
    pub const DEFAULT: f32 = 0.03;

    pub fn new(alpha_m: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha_m) {
            return Err(Error::Config(format!("alpha_m must lie in [0, 1), got {alpha_m}")));
        }
        Ok(Self(alpha_m))
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl Default for MaskThreshold {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::dim("softmax_rows", "empty matrix"));
    }
    let mut out = m.clone();
    for r in 0..m.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for v in row.iter_mut() {
        let e = (f64::from(*v) - f64::from(max)).exp();
        *v = e as f32;
        sum += e;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (f64::from(*v) * inv) as f32;
    }
}

/// Scales each row to unit Euclidean norm. All-zero rows pass through.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        normalize_l2_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn normalize_l2_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

/// Scales each row to sum to one. All-zero rows pass through.
pub fn normalize_rows_sum(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v = (f64::from(*v) / sum) as f32;
            }
        }
    }
    out
}

/// `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{} × {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    let mut acc = vec![0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = f64::from(a_ip);
            for (x, &b_pj) in acc.iter_mut().zip(b.row(p)) {
                *x += a_ip * f64::from(b_pj);
            }
        }
        for (o, &x) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = x as f32;
        }
    }
    Ok(out)
}

/// `a × bᵀ`, i.e. all pairwise row dot products.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim(
            "matmul_transposed",
            format!("{}x{} × ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j)) as f32;
        }
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Zeroes every entry strictly below the threshold.
pub fn mask_below(m: &Matrix, t: MaskThreshold) -> Matrix {
    let alpha = t.value();
    m.map(|v| if v < alpha { 0.0 } else { v })
}

/// Interpolation weight for [`lerp`].
#[derive(Debug, Clone, Copy)]
pub enum Weight<'a> {
    Scalar(f32),
    PerEntry(&'a Matrix),
}

/// Entrywise `w·b + (1−w)·a`.
pub fn lerp(a: &Matrix, b: &Matrix, w: Weight<'_>) -> Result<Matrix> {
    a.check_same_shape(b, "lerp")?;
    let check = |w: f32| {
        if (0.0..=1.0).contains(&w) {
            Ok(())
        } else {
            Err(Error::Contract(format!("interpolation weight {w} outside [0, 1]")))
        }
    };
    let data = match w {
        Weight::Scalar(w) => {
            check(w)?;
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| w * y + (1.0 - w) * x)
                .collect()
        }
        Weight::PerEntry(wm) => {
            a.check_same_shape(wm, "lerp")?;
            wm.data.iter().try_for_each(|&w| check(w))?;
            a.data
                .iter()
                .zip(&b.data)
                .zip(&wm.data)
                .map(|((&x, &y), &w)| w * y + (1.0 - w) * x)
                .collect()
        }
    };
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Bilinear resampling between square-or-rectangular pixel grids, using
/// half-pixel centers with edge clamping. Every output pixel's weights sum
/// to one, so constant inputs stay constant.
#[derive(Debug, Clone)]
pub struct Resampler {
    src: (usize, usize),
    dst: (usize, usize),
    taps: Vec<[(usize, f32); 4]>,
}

impl Resampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let (sh, sw) = src;
        let (dh, dw) = dst;
        let axis = |d: usize, s_len: usize, d_len: usize| -> (usize, usize, f32) {
            let pos = ((d as f64 + 0.5) * s_len as f64 / d_len as f64 - 0.5).clamp(0.0, (s_len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(s_len - 1);
            (lo, hi, (pos - lo as f64) as f32)
        };
        let mut taps = Vec::with_capacity(dh * dw);
        for y in 0..dh {
            let (y0, y1, fy) = axis(y, sh, dh);
            for x in 0..dw {
                let (x0, x1, fx) = axis(x, sw, dw);
                taps.push([
                    (y0 * sw + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * sw + x1, (1.0 - fy) * fx),
                    (y1 * sw + x0, fy * (1.0 - fx)),
                    (y1 * sw + x1, fy * fx),
                ]);
            }
        }
        Self { src, dst, taps }
    }

    pub fn src_len(&self) -> usize {
        self.src.0 * self.src.1
    }

    pub fn dst_len(&self) -> usize {
        self.dst.0 * self.dst.1
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn resample(&self, values: &[f32]) -> Vec<f32> {
        debug_assert_eq!(values.len(), self.src_len());
        if self.is_identity() {
            return values.to_vec();
        }
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| f64::from(values[i]) * f64::from(w)).sum::<f64>() as f32)
            .collect()
    }

    /// Resamples the pixel axis of a `rows × src_pixels` matrix.
    pub fn resample_rows(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols != self.src_len() {
            return Err(Error::dim(
                "Resampler::resample_rows",
                format!("{} columns, grid has {}", m.cols, self.src_len()),
            ));
        }
        let mut data = Vec::with_capacity(m.rows * self.dst_len());
        for r in m.iter_rows() {
            data.extend(self.resample(r));
        }
        Matrix::from_vec(m.rows, self.dst_len(), data)
    }

    /// The dense `dst_pixels × src_pixels` weight matrix.
    pub fn weights(&self) -> Matrix {
        let mut w = Matrix::zeros(self.dst_len(), self.src_len());
        for (o, t) in self.taps.iter().enumerate() {
            for &(i, v) in t {
                let cur = w.get(o, i);
                w.set(o, i, cur + v);
            }
        }
        w
    }
}
