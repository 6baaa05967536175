//! Dense tensor storage.
//!
//! Every value in the engine (images, feature maps, weights, gradients) is a
//! [`Tensor`]: a contiguous, row-major array of one scalar type plus a shape
//! of rank 1..=4. Feature maps use the NCHW layout (batch, channels, height,
//! width). Data is held behind an `Arc`, so cloning a tensor is cheap and
//! in-place mutation copies on write.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element width of a build configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemWidth {
    F32,
    F64,
}

impl ElemWidth {
    pub fn bytes(self) -> usize {
        match self {
            ElemWidth::F32 => 4,
            ElemWidth::F64 => 8,
        }
    }
}

/// Scalar element type of a tensor. The engine is instantiated for `f32` and
/// `f64`; gradient checking requires the `f64` instantiation.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const WIDTH: ElemWidth;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from exactly `WIDTH.bytes()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: ElemWidth = ElemWidth::F32;

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

impl Scalar for f64 {
    const WIDTH: ElemWidth = ElemWidth::F64;

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

/// Semantic layout tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// No axis semantics (weights, vectors, logits).
    #[default]
    Flat,
    /// (batch, channels, height, width) feature map.
    Nchw,
}

/// Dense N-dimensional array, rank 1..=4, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    layout: Layout,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::invalid(
                "tensor",
                format!("rank must be 1..=4, got {}", shape.len()),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", "data length", numel, data.len()));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            layout: Layout::Flat,
        })
    }

    /// Rank-4 (batch, channels, height, width) feature map.
    pub fn nchw(b: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        let mut t = Tensor::new(vec![b, c, h, w], data)?;
        t.layout = Layout::Nchw;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
            layout: if shape.len() == 4 { Layout::Nchw } else { Layout::Flat },
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data_mut().fill(v);
        t
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| f(i)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            layout: if shape.len() == 4 { Layout::Nchw } else { Layout::Flat },
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

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::shape("reshape", "element count", self.len(), numel));
        }
        Ok(Tensor {
            layout: if shape.len() == 4 { Layout::Nchw } else { Layout::Flat },
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// (B, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::shape("dims4", "rank", 4usize, self.rank()));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            layout: self.layout,
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> T {
        let acc: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        T::from_f64(acc)
    }

    /// l2 norm over all elements, accumulated in f64.
    pub fn norm_l2(&self) -> T {
        let acc: f64 = self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        T::from_f64(acc.sqrt())
    }

    /// Convert elements to another scalar width through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
            layout: self.layout,
        }
    }
}

/// Padding mode of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    /// Zero padding chosen so stride-1 output matches the input spatial size
    /// (`ceil(in/stride)` in general). Odd totals put the extra cell on the
    /// bottom/right.
    Same,
    /// No padding; output is `floor((in - k)/stride) + 1`.
    Valid,
}

/// Static description of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel extent; odd or even.
    pub kernel: usize,
    pub stride: usize,
    pub padding: PadMode,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: PadMode::Same,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.in_channels < 1 || self.out_channels < 1 || self.stride < 1 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel, channels and stride must be >= 1 (k={}, in={}, out={}, stride={})",
                    self.kernel, self.in_channels, self.out_channels, self.stride
                ),
            ));
        }
        Ok(())
    }

    /// Output spatial extent and leading pad for one axis of length `n`.
    pub fn out_extent(&self, n: usize) -> (usize, usize) {
        match self.padding {
            PadMode::Valid => {
                let out = if n >= self.kernel {
                    (n - self.kernel) / self.stride + 1
                } else {
                    0
                };
                (out, 0)
            }
            PadMode::Same => {
                let out = n.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.kernel).saturating_sub(n);
                (out, total / 2)
            }
        }
    }

    /// Scalar parameter count: weights plus biases.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}
