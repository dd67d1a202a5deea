//! Rank-4 `(batch, channel, height, width)` tensors and the reverse-mode
//! autodiff graph built on top of them.
//!
//! Values are immutable once constructed; gradients live in a separate
//! [`graph::Gradients`] buffer produced by [`graph::Graph::backward`]. A graph
//! is homogeneous in its element type: run the same model code with `f32` for
//! training and `f64` when comparing against finite differences.

mod conv;
mod graph;

pub use conv::ConvSpec;
pub use graph::{Gradients, Graph, OpName, UpsampleMode, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element of a computation graph. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + Send + Sync + Default + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Append the exact little-endian byte representation.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from little-endian bytes; `bytes.len()` must equal the dtype size.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense NCHW shape.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Shape of a scalar (loss) tensor.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Flat row-major offset of `(n, c, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Immutable dense rank-4 tensor. Cloning is cheap (`Arc` on the data).
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                op: "tensor",
                shape: shape.to_string(),
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); shape.numel()]),
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    /// Scalar 1x1x1x1 tensor.
    pub fn scalar(value: T) -> Self {
        Tensor::filled(Shape::scalar(), value)
    }

    /// Build from a function of the flat index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..shape.numel()).map(|i| f(i)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Element accessor, mostly for tests and small hosts.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert every element (used to run the same graph in both precisions).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Copy with one flat element replaced; used by finite-difference probes.
    pub fn with_value_at(&self, flat: usize, value: T) -> Self {
        let mut data = self.data.as_ref().clone();
        data[flat] = value;
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }

    /// True when both tensors have the same shape and bit-identical elements.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}, {} elements)", self.shape, self.shape.numel())
    }
}
