//! Dense row-major tensors.
//!
//! Tensors are immutable values: every operation returns a new tensor and
//! checks that the result is finite, so a NaN or infinity surfaces as
//! [`Error::NonFinite`] at the operation that produced it.

pub(crate) mod conv;

use alloc::{vec, vec::Vec};

use crate::{Error, Real, Result};

pub use conv::{conv2d, conv2d_transpose, ConvGeometry, Padding};
pub(crate) use conv::{conv2d_input_grad, conv2d_kernel_grad};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of a binary elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting element-count mismatches and non-finite
    /// data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = validate_shape(&shape)?;
        if expected != data.len() {
            return Err(Error::ElementCount {
                expected,
                actual: data.len(),
            });
        }
        Self { shape, data }.finite("new")
    }

    /// # Panics
    /// If `shape` is empty or contains a zero dimension.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    /// # Panics
    /// If `shape` is empty or contains a zero dimension.
    pub fn full(shape: &[usize], value: T) -> Self {
        let n = validate_shape(shape).expect("tensor shape must be non-empty and non-zero");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = validate_shape(shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new([1], vec![value])
    }

    /// Trusted constructor for internal kernels; callers guarantee the
    /// shape/length invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Real>(&self) -> Result<Tensor<U>> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
        .finite("cast")
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.batch() {
            return Err(Error::InvalidArgument(alloc::format!(
                "batch slice {start}..{end} out of range for {} rows",
                self.batch()
            )));
        }
        let row = self.len() / self.batch();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * row..end * row].to_vec(),
        ))
    }

    /// Gathers rows along the leading dimension.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty gather".into()));
        }
        let rows = self.batch();
        let row = self.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidArgument(alloc::format!(
                    "row {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k, n) = match (self.shape(), rhs.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Dimension {
                    op: "matmul",
                    left: self.shape.clone(),
                    right: rhs.shape.clone(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &rhs.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o = *o + a * bv;
                }
            }
        }
        Self::from_parts(vec![m, n], out).finite("matmul")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = *self.shape() else {
            return Err(Error::Dimension {
                op: "transpose",
                left: self.shape.clone(),
                right: Vec::new(),
            });
        };
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        let f: fn(T) -> T = match op {
            UnaryOp::Exp => |x| x.exp(),
            UnaryOp::Relu => |x| if x > T::zero() { x } else { T::zero() },
            UnaryOp::Sigmoid => sigmoid,
        };
        let name = match op {
            UnaryOp::Exp => "exp",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
        };
        self.map(f).finite(name)
    }

    /// Elementwise binary op. `rhs` may have the same shape, be a scalar, or
    /// match `self` without its leading batch dimension (broadcast per row).
    pub fn binary(&self, op: BinaryOp, rhs: Operand<'_, T>) -> Result<Self> {
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
        };
        let data: Vec<T> = match rhs {
            Operand::Scalar(s) => self.data.iter().map(|&a| f(a, s)).collect(),
            Operand::Tensor(t) if t.shape == self.shape => {
                self.data.iter().zip(&t.data).map(|(&a, &b)| f(a, b)).collect()
            }
            Operand::Tensor(t) if t.len() == 1 => {
                let s = t.data[0];
                self.data.iter().map(|&a| f(a, s)).collect()
            }
            Operand::Tensor(t) if t.shape.as_slice() == &self.shape[1..] => {
                let row = t.len();
                self.data
                    .chunks_exact(row)
                    .flat_map(|chunk| chunk.iter().zip(&t.data).map(|(&a, &b)| f(a, b)))
                    .collect()
            }
            Operand::Tensor(t) => {
                return Err(Error::Dimension {
                    op: "elementwise",
                    left: self.shape.clone(),
                    right: t.shape.clone(),
                })
            }
        };
        Self::from_parts(self.shape.clone(), data).finite("elementwise")
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, Operand::Tensor(rhs))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, Operand::Tensor(rhs))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, Operand::Tensor(rhs))
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.binary(BinaryOp::Mul, Operand::Scalar(s))
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(UnaryOp::Exp)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(UnaryOp::Sigmoid)
    }

    /// Applies `f` elementwise without a finiteness check.
    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.len() as f64)
    }

    /// Sum of elementwise products; both tensors must share a shape.
    pub fn dot(&self, rhs: &Self) -> Result<T> {
        if self.shape != rhs.shape {
            return Err(Error::Dimension {
                op: "dot",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Reduces over `axes` (all axes when `None`). Reduced axes are dropped;
    /// reducing every axis yields shape `[1]`.
    pub fn reduce(&self, op: Reduce, axes: Option<&[usize]>) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        match axes {
            None => reduced.iter_mut().for_each(|r| *r = true),
            Some(axes) => {
                for &a in axes {
                    if a >= rank || reduced[a] {
                        return Err(Error::InvalidArgument(alloc::format!(
                            "bad reduction axis {a} for rank {rank}"
                        )));
                    }
                    reduced[a] = true;
                }
            }
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_len];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let mut flat = 0;
            for axis in 0..rank {
                if !reduced[axis] {
                    flat = flat * self.shape[axis] + index[axis];
                }
            }
            out[flat] = out[flat] + v;
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < self.shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        if op == Reduce::Mean {
            let count = T::lit((self.len() / out_len.max(1)) as f64);
            out.iter_mut().for_each(|v| *v = *v / count);
        }
        let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        Self::from_parts(shape, out).finite("reduce")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = validate_shape(shape)?;
        if n != self.len() {
            return Err(Error::ElementCount {
                expected: n,
                actual: self.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Collapses every dimension after the first: `[B, ...] -> [B, N]`.
    pub fn flatten(&self) -> Result<Self> {
        let b = self.batch();
        self.reshape(&[b, self.len() / b])
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
