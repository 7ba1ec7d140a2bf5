//! Dense row-major `f64` tensors and the numeric primitives the model is built from.
//!
//! Most kernels operate on rank-2 tensors laid out as `[rows × cols]`, where rows are
//! sequence positions and columns are channels. Convolution weights are rank 3
//! (`[kernel × in × out]`).

mod io;

use std::cell::Cell;
use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::NamedTensors;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Number of multiply-accumulate operations performed by kernels on this thread
/// since the last [`reset_mac_count`].
pub fn mac_count() -> u64 {
    MACS.with(|c| c.get())
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

pub(crate) fn count_macs(n: usize) {
    MACS.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

/// Zero padding policy for [`Tensor::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output length equals input length; extra padding goes on the right for even kernels.
    #[default]
    Same,
    /// No padding; output length is `L - K + 1`.
    Valid,
}

impl Padding {
    fn split(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
            Padding::Valid => (0, 0),
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= PREVIEW {
            s.field("data", &self.data);
        } else {
            s.field("data[..8]", &&self.data[..PREVIEW]);
        }
        if self.requires_grad {
            s.field("requires_grad", &true);
        }
        s.finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Builds a tensor from parts that are already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// A `[1 × n]` row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self::from_parts(vec![1, values.len()], values)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// Copy with the gradient flag cleared.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a length-`cols` vector to every row.
    pub fn broadcast_add(&self, bias: &Tensor) -> Result<Self> {
        let (_, c) = self.expect_matrix("broadcast_add")?;
        if bias.numel() != c {
            return Err(Error::dim("broadcast_add", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        out.requires_grad = false;
        for row in out.data.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums as a `[1 × cols]` row vector.
    pub fn sum_rows(&self) -> Result<Self> {
        let (_, c) = self.expect_matrix("sum_rows")?;
        let mut acc = vec![0.0; c];
        for row in self.data.chunks_exact(c.max(1)) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(Self::row_vector(acc))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Matrix product `[m × k] · [k × n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data, &other.data, m, k, n, &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `elu(x) + 1`, strictly positive for every finite input.
    pub fn elu_plus_one(&self) -> Self {
        self.map(elu_plus_one)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        let c = self.cols().max(1);
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Self::from_parts(self.shape.clone(), out)
    }

    /// Layer norm over the last axis with affine parameters of length `cols`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Self> {
        let (_, c) = self.expect_matrix("layer_norm")?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim("layer_norm", &self.shape, &gamma.shape));
        }
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks_exact(c) {
            let (mean, inv_std) = row_moments(row, eps);
            for ((&x, g), b) in row.iter().zip(&gamma.data).zip(&beta.data) {
                out.push((x - mean) * inv_std * g + b);
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Gated linear unit over the channel axis: `a * sigmoid(b)` for `[a; b]`.
    pub fn glu(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("glu")?;
        if c % 2 != 0 {
            return Err(Error::dim("glu", &self.shape, &[r, c + 1]));
        }
        let h = c / 2;
        let mut out = Vec::with_capacity(r * h);
        for row in self.data.chunks_exact(c) {
            let (a, b) = row.split_at(h);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        Ok(Self::from_parts(vec![r, h], out))
    }

    /// Inverted dropout with a seeded mask. `rate == 0` returns an exact copy.
    pub fn dropout(&self, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.detached());
        }
        self.mul(&dropout_mask(&self.shape, rate, seed))
    }

    /// 1-D convolution along rows. `x: [L × Cin]`, `weight: [K × Cin × Cout]`, `bias: [Cout]`.
    pub fn conv1d(&self, weight: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Self> {
        let (l, cin) = self.expect_matrix("conv1d")?;
        let [k, win, cout] = weight.shape[..] else {
            return Err(Error::dim("conv1d", &self.shape, &weight.shape));
        };
        if win != cin || k == 0 {
            return Err(Error::dim("conv1d", &self.shape, &weight.shape));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::dim("conv1d", &weight.shape, &b.shape));
            }
        }
        let (left, right) = padding.split(k);
        if l + left + right < k {
            return Err(Error::dim("conv1d", &self.shape, &weight.shape));
        }
        let cols = im2col(self, k, left, right);
        let w2 = Self::from_parts(vec![k * cin, cout], weight.data.clone());
        let out = cols.matmul(&w2)?;
        match bias {
            Some(b) => out.broadcast_add(b),
            None => Ok(out),
        }
    }

    /// Depthwise convolution with "same" padding. `weight: [K × C]`, `bias: [C]`.
    pub fn depthwise_conv1d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let (l, c) = self.expect_matrix("depthwise_conv1d")?;
        let [k, wc] = weight.shape[..] else {
            return Err(Error::dim("depthwise_conv1d", &self.shape, &weight.shape));
        };
        if wc != c || k == 0 {
            return Err(Error::dim("depthwise_conv1d", &self.shape, &weight.shape));
        }
        let (left, _) = Padding::Same.split(k);
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            let orow = &mut out[t * c..(t + 1) * c];
            for kk in 0..k {
                let Some(src) = (t + kk).checked_sub(left).filter(|&s| s < l) else {
                    continue;
                };
                let xrow = &self.data[src * c..(src + 1) * c];
                let wrow = &weight.data[kk * c..(kk + 1) * c];
                for ((o, &x), &w) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += x * w;
                }
            }
        }
        count_macs(l * c * k);
        let out = Self::from_parts(vec![l, c], out);
        match bias {
            Some(b) => out.broadcast_add(b),
            None => Ok(out),
        }
    }

    /// Concatenation of rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Input("concat of zero tensors".into()));
        };
        let (_, c0) = first.expect_matrix("concat")?;
        match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let (r, c) = p.expect_matrix("concat")?;
                    if c != c0 {
                        return Err(Error::dim("concat", &first.shape, &p.shape));
                    }
                    rows += r;
                    data.extend_from_slice(&p.data);
                }
                Ok(Self::from_parts(vec![rows, c0], data))
            }
            1 => {
                let r0 = first.rows();
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = p.expect_matrix("concat")?;
                    if r != r0 {
                        return Err(Error::dim("concat", &first.shape, &p.shape));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for (p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                    }
                }
                Ok(Self::from_parts(vec![r0, total], data))
            }
            _ => Err(Error::Input(format!("concat axis {axis} unsupported"))),
        }
    }

    /// Slice of a rank-2 tensor along `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Self> {
        let (r, c) = self.expect_matrix("slice")?;
        let limit = if axis == 0 { r } else { c };
        if range.start > range.end || range.end > limit || axis > 1 {
            return Err(Error::dim("slice", &self.shape, &[range.start, range.end]));
        }
        let n = range.end - range.start;
        if axis == 0 {
            let data = self.data[range.start * c..range.end * c].to_vec();
            Ok(Self::from_parts(vec![n, c], data))
        } else {
            let mut data = Vec::with_capacity(r * n);
            for row in self.data.chunks_exact(c.max(1)) {
                data.extend_from_slice(&row[range.clone()]);
            }
            Ok(Self::from_parts(vec![r, n], data))
        }
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        self.slice(0, range)
    }

    /// Repeats row `i` `counts[i]` times.
    pub fn repeat_rows(&self, counts: &[usize]) -> Result<Self> {
        let (r, c) = self.expect_matrix("repeat_rows")?;
        if counts.len() != r {
            return Err(Error::dim("repeat_rows", &self.shape, &[counts.len()]));
        }
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * c);
        for (i, &n) in counts.iter().enumerate() {
            let row = &self.data[i * c..(i + 1) * c];
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        Ok(Self::from_parts(vec![total, c], data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Normwise relative difference `max|a - b| / max|b|` (reference is `other`).
    pub fn max_rel_diff(&self, other: &Tensor) -> Result<f64> {
        let diff = self.max_abs_diff(other)?;
        let scale = other.max_abs();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

pub(crate) fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Unfolds `[L × C]` into `[Lout × K·C]`, block `kk` of output row `t` holding input row
/// `t + kk - left` (zero outside the input).
const GEMM_KB: usize = 128;
const GEMM_NB: usize = 256;

/// `out += a · b` for row-major `a: [m × k]`, `b: [k × n]`, `out: [m × n]`.
///
/// Blocked over `k` and `n` so a `b` tile stays in cache while four rows of `a` use it.
/// The summation order is fixed for given shapes, so results are reproducible.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    for k0 in (0..k).step_by(GEMM_KB) {
        let k1 = (k0 + GEMM_KB).min(k);
        for n0 in (0..n).step_by(GEMM_NB) {
            let n1 = (n0 + GEMM_NB).min(n);
            let mut rows = out.chunks_exact_mut(n).enumerate();
            loop {
                let Some((i, c0)) = rows.next() else { break };
                match (rows.next(), rows.next(), rows.next()) {
                    (Some((_, c1)), Some((_, c2)), Some((_, c3))) => {
                        let (c0, c1, c2, c3) = (&mut c0[n0..n1], &mut c1[n0..n1], &mut c2[n0..n1], &mut c3[n0..n1]);
                        for kk in k0..k1 {
                            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
                            let brow = &b[kk * n + n0..kk * n + n1];
                            for j in 0..brow.len() {
                                let bv = brow[j];
                                c0[j] += a0 * bv;
                                c1[j] += a1 * bv;
                                c2[j] += a2 * bv;
                                c3[j] += a3 * bv;
                            }
                        }
                    }
                    (r1, r2, r3) => {
                        for (r, c) in [Some((i, c0)), r1, r2, r3].into_iter().flatten() {
                            let c = &mut c[n0..n1];
                            for kk in k0..k1 {
                                let av = a[r * k + kk];
                                let brow = &b[kk * n + n0..kk * n + n1];
                                for (cv, &bv) in c.iter_mut().zip(brow) {
                                    *cv += av * bv;
                                }
                            }
                        }
                        break;
                    }
                }
            }
        }
    }
    count_macs(m * k * n);
}

pub(crate) fn im2col(x: &Tensor, k: usize, left: usize, right: usize) -> Tensor {
    let (l, c) = (x.rows(), x.cols());
    let lout = l + left + right + 1 - k;
    let mut data = vec![0.0; lout * k * c];
    for t in 0..lout {
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(left).filter(|&s| s < l) else {
                continue;
            };
            let dst = (t * k + kk) * c;
            data[dst..dst + c].copy_from_slice(&x.data[src * c..(src + 1) * c]);
        }
    }
    Tensor::from_parts(vec![lout, k * c], data)
}

/// Inverse of [`im2col`]: accumulates `[Lout × K·C]` column gradients back onto `[L × C]`.
pub(crate) fn col2im(cols: &Tensor, l: usize, c: usize, k: usize, left: usize) -> Tensor {
    let lout = cols.rows();
    let mut data = vec![0.0; l * c];
    for t in 0..lout {
        for kk in 0..k {
            let Some(dst) = (t + kk).checked_sub(left).filter(|&s| s < l) else {
                continue;
            };
            let src = (t * k + kk) * c;
            for (d, s) in data[dst * c..(dst + 1) * c].iter_mut().zip(&cols.data[src..src + c]) {
                *d += s;
            }
        }
    }
    Tensor::from_parts(vec![l, c], data)
}

pub(crate) fn padding_split(padding: Padding, kernel: usize) -> (usize, usize) {
    padding.split(kernel)
}
