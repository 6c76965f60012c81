//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! crate is built from.
//!
//! Convolution follows the cross-correlation convention (the kernel is not
//! flipped), which is what the backward passes in [`crate::nn`] assume.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TOKD";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Standard normal samples (Box-Muller, so the stream only depends on `rng`).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| standard_normal(rng)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    /// Leading (batch) dimension and the product of the rest.
    pub fn rows_cols(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    /// Rows `indices` of the leading axis, stacked in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let (rows, cols) = self.rows_cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Dimension(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let (_, cols) = self.rows_cols();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Concatenate two `N×C×...` tensors along axis 1.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.rank() < 2 || a.rank() != b.rank() || a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(Error::Dimension(format!(
                "cannot concatenate {:?} and {:?} on channels",
                a.shape, b.shape
            )));
        }
        let n = a.shape[0];
        let (sa, sb) = (a.len() / n, b.len() / n);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&b.data[i * sb..(i + 1) * sb]);
        }
        let mut shape = a.shape.clone();
        shape[1] += b.shape[1];
        Tensor::new(shape, data)
    }

    /// Split an `N×C×...` tensor on axis 1 after `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self)> {
        if self.rank() < 2 || first == 0 || first >= self.shape[1] {
            return Err(Error::Dimension(format!(
                "cannot split {:?} after channel {first}",
                self.shape
            )));
        }
        let n = self.shape[0];
        let per = self.len() / n;
        let inner = per / self.shape[1];
        let cut = first * inner;
        let mut a = Vec::with_capacity(n * cut);
        let mut b = Vec::with_capacity(n * (per - cut));
        for i in 0..n {
            let row = &self.data[i * per..(i + 1) * per];
            a.extend_from_slice(&row[..cut]);
            b.extend_from_slice(&row[cut..]);
        }
        let mut sa = self.shape.clone();
        sa[1] = first;
        let mut sb = self.shape.clone();
        sb[1] -= first;
        Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 8 * self.rank() + 8 * self.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Euclidean norm over all elements.
pub fn l2_norm(x: &Tensor) -> f64 {
    x.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `a[m×k] · b[k×n]`. Each output element accumulates over `k` in order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `out[m×n] += a[m×k] · b[k×n]`, row-major, i-k-j loop order.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution, validated once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Parameter(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(Self { c_in, h, w, c_out, kh, kw, stride, padding, oh, ow })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one `C×H×W` image into columns `[off, off + H'·W')` of a
    /// `(C·kH·kW) × ld` matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64], ld: usize, off: usize) {
        let (p, s) = (self.padding as isize, self.stride as isize);
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[r * ld + off..r * ld + off + self.col_cols()];
                    for oi in 0..self.oh {
                        let y = oi as isize * s + ki as isize - p;
                        let drow = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let x = oj as isize * s + kj as isize - p;
                            *d = if x < 0 || x >= self.w as isize { 0.0 } else { src[x as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Fold columns `[off, off + H'·W')` of a column matrix back onto an
    /// image, accumulating overlaps.
    fn col2im(&self, cols: &[f64], ld: usize, off: usize, img: &mut [f64]) {
        let (p, s) = (self.padding as isize, self.stride as isize);
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[r * ld + off..r * ld + off + self.col_cols()];
                    for oi in 0..self.oh {
                        let y = oi as isize * s + ki as isize - p;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for oj in 0..self.ow {
                            let x = oj as isize * s + kj as isize - p;
                            if x >= 0 && x < self.w as isize {
                                drow[x as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    if input.rank() != 4 || kernel.rank() != 4 || input.shape[1] != kernel.shape[1] {
        return Err(Error::Dimension(format!(
            "conv2d: input {:?} vs kernel {:?}",
            input.shape, kernel.shape
        )));
    }
    let s = &input.shape;
    let k = &kernel.shape;
    ConvGeom::new(s[1], s[2], s[3], k[0], k[2], k[3], stride, padding)
}

/// 2-D cross-correlation of `N×C_in×H×W` with `C_out×C_in×kH×kW`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let n = input.shape[0];
    let (rows, np) = (g.col_rows(), g.col_cols());
    let ld = n * np;
    let in_per = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; rows * ld];
    for b in 0..n {
        g.im2col(&input.data[b * in_per..(b + 1) * in_per], &mut cols, ld, b * np);
    }
    let mut wide = vec![0.0; g.c_out * ld];
    gemm_acc(&kernel.data, &cols, &mut wide, g.c_out, rows, ld);
    let mut out = vec![0.0; n * g.c_out * np];
    for b in 0..n {
        for co in 0..g.c_out {
            let dst = (b * g.c_out + co) * np;
            out[dst..dst + np].copy_from_slice(&wide[co * ld + b * np..co * ld + (b + 1) * np]);
        }
    }
    Ok(Tensor { shape: vec![n, g.c_out, g.oh, g.ow], data: out })
}

/// Gradients of `conv2d` with respect to its input and its kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let n = input.shape[0];
    if grad_out.shape() != [n, g.c_out, g.oh, g.ow] {
        return Err(Error::Dimension(format!(
            "conv2d backward: upstream {:?}, expected {:?}",
            grad_out.shape,
            [n, g.c_out, g.oh, g.ow]
        )));
    }
    let (rows, np) = (g.col_rows(), g.col_cols());
    let ld = n * np;
    let in_per = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; rows * ld];
    for b in 0..n {
        g.im2col(&input.data[b * in_per..(b + 1) * in_per], &mut cols, ld, b * np);
    }
    // upstream gradient as c_out × (N·H'·W')
    let mut go = vec![0.0; g.c_out * ld];
    for b in 0..n {
        for co in 0..g.c_out {
            let src = (b * g.c_out + co) * np;
            go[co * ld + b * np..co * ld + (b + 1) * np].copy_from_slice(&grad_out.data[src..src + np]);
        }
    }
    // dK[co, r] = sum_p go[co, p] * cols[r, p]
    let mut dk = vec![0.0; g.c_out * rows];
    for co in 0..g.c_out {
        let gro = &go[co * ld..(co + 1) * ld];
        for (r, d) in dk[co * rows..(co + 1) * rows].iter_mut().enumerate() {
            *d = gro.iter().zip(&cols[r * ld..(r + 1) * ld]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let kt = kernel.transpose_2d_view(g.c_out, rows);
    let mut dcols = vec![0.0; rows * ld];
    gemm_acc(&kt, &go, &mut dcols, rows, g.c_out, ld);
    let mut dx = vec![0.0; input.len()];
    for b in 0..n {
        g.col2im(&dcols, ld, b * np, &mut dx[b * in_per..(b + 1) * in_per]);
    }
    Ok((
        Tensor { shape: input.shape.clone(), data: dx },
        Tensor { shape: kernel.shape.clone(), data: dk },
    ))
}

impl Tensor {
    fn transpose_2d_view(&self, m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }
}
