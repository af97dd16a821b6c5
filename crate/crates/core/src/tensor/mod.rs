//! Dense tensors and the primitive math the layers are built from.
//!
//! Activations are laid out `N×H×W×C`, convolution kernels `Kh×Kw×Cin×Cout`,
//! both row-major. There is no implicit broadcasting: tensor-tensor operations
//! require equal shapes, and the only other operand allowed is a scalar.

pub(crate) mod gemm;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use gemm::{gemm, Lhs};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating-point element type a [`Tensor`] can hold.
pub trait Element:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    /// Conversion from `f64`, rounding to nearest for `f32`.
    fn cast_from(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_count(v: usize) -> Self {
        Self::cast_from(v as f64)
    }

    /// `self + a·b`, the accumulation step of every matrix product.
    fn madd(self, a: Self, b: Self) -> Self {
        self + a * b
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn cast_from(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    /// Fused when the target has FMA: one rounding instead of two. Still a
    /// fixed order, so single precision stays deterministic on a given build.
    #[cfg(target_feature = "fma")]
    #[inline(always)]
    fn madd(self, a: Self, b: Self) -> Self {
        a.mul_add(b, self)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn cast_from(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let shown = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &shown)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank above {MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("holds {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for untrusted shapes.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = check_shape(shape).expect("valid tensor shape");
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = check_shape(shape).expect("valid tensor shape");
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(N, H, W, C)` of a rank-4 activation.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 4 (N×H×W×C)".into(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            }),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Sum of squares, accumulated in `f64`.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn elementwise(&self, op: BinaryOp, rhs: Operand<'_, T>) -> Result<Tensor<T>> {
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Max => x.max(y),
        };
        let data: Vec<T> = match rhs {
            Operand::Tensor(other) => {
                if self.shape != other.shape {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise",
                        left: self.shape.clone(),
                        right: other.shape.clone(),
                    });
                }
                self.data.iter().zip(&other.data).map(|(&x, &y)| f(x, y)).collect()
            }
            Operand::Scalar(s) => self.data.iter().map(|&x| f(x, s)).collect(),
        };
        Tensor { shape: self.shape.clone(), data }.ensure_finite("elementwise")
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Mul, Operand::Tensor(other))
    }

    pub fn max_scalar(&self, s: T) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Max, Operand::Scalar(s))
    }

    pub fn scale(&self, s: T) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Mul, Operand::Scalar(s))
    }

    /// Rank-2 matrix product with a fixed reduction order.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, n, k, Lhs::normal(&self.data, k), &other.data, &mut out, false);
        Tensor { shape: vec![m, n], data: out }.ensure_finite("matmul")
    }

    pub fn transpose2(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduced = [false; MAX_RANK];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> =
            (0..rank).filter(|&d| !reduced[d]).map(|d| self.shape[d]).collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| self.shape[d]).product();

        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_len];
        let mut index = [0usize; MAX_RANK];
        for &v in &self.data {
            let mut o = 0;
            for d in 0..rank {
                if !reduced[d] {
                    o = o * self.shape[d] + index[d];
                }
            }
            out[o] = match op {
                ReduceOp::Max => out[o].max(v),
                _ => out[o] + v,
            };
            // Advance the row-major multi-index.
            for d in (0..rank).rev() {
                index[d] += 1;
                if index[d] < self.shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let denom = T::from_count(count);
            for v in &mut out {
                *v = *v / denom;
            }
        }
        Tensor { shape: out_shape, data: out }.ensure_finite("reduce")
    }

    /// Pads the spatial axes of an `N×H×W×C` tensor with a constant.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize, value: T) -> Result<Tensor<T>> {
        let (n, h, w, c) = self.dims4()?;
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut out = vec![value; n * ho * wo * c];
        for b in 0..n {
            for y in 0..h {
                let src = ((b * h + y) * w) * c;
                let dst = ((b * ho + y + top) * wo + left) * c;
                out[dst..dst + w * c].copy_from_slice(&self.data[src..src + w * c]);
            }
        }
        Ok(Tensor { shape: vec![n, ho, wo, c], data: out })
    }

    /// Inverse of [`Tensor::pad2d`]: drops the given border widths.
    pub fn crop2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
        let (n, h, w, c) = self.dims4()?;
        if top + bottom >= h || left + right >= w {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("crop ({top},{bottom},{left},{right}) leaves nothing"),
            });
        }
        let (ho, wo) = (h - top - bottom, w - left - right);
        let mut out = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for y in 0..ho {
                let src = ((b * h + y + top) * w + left) * c;
                out.extend_from_slice(&self.data[src..src + wo * c]);
            }
        }
        Ok(Tensor { shape: vec![n, ho, wo, c], data: out })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "cannot stack zero tensors".into(),
        })?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&shape, data)
    }
}
