use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type for tensors. Training runs in `f32`; `f64` exists for
/// finite-difference gradient checking.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

/// Dense row-major array of rank 1 to 4 (last axis fastest). Images and
/// feature maps use height x width x channels order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::InvalidTensor(format!(
                "rank {} outside 1..={MAX_RANK}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidTensor(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} wants {len} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); len]).expect("zeros: invalid shape")
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![value; len]).expect("filled: invalid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(&mut f).collect();
        Tensor::new(shape, data).expect("from_fn: invalid shape")
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                left: format!("{:?}", self.shape),
                right: format!("{shape:?}"),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type, casting through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Zero-padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Pad with zeros so the output spans ceil(extent / stride).
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Geometry of a 2-D convolution: kernel extents, channel counts, stride,
/// and padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidTensor(format!(
                "kernel extents {}x{} must be >= 1",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidTensor("stride must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidTensor("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output height/width for an input of the given extents.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match self.padding {
            Padding::Same => Ok((h.div_ceil(self.stride), w.div_ceil(self.stride))),
            Padding::Valid => {
                if self.kernel_h > h || self.kernel_w > w {
                    return Err(Error::KernelTooLarge {
                        kernel: self.kernel_h,
                        kernel_w: self.kernel_w,
                        input_h: h,
                        input_w: w,
                    });
                }
                Ok(((h - self.kernel_h) / self.stride + 1, (w - self.kernel_w) / self.stride + 1))
            }
        }
    }

    /// Top/left zero-padding amounts for an input of the given extents.
    pub fn pad_top_left(&self, h: usize, w: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let (out_h, out_w) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
                let pad_h = ((out_h - 1) * self.stride + self.kernel_h).saturating_sub(h);
                let pad_w = ((out_w - 1) * self.stride + self.kernel_w).saturating_sub(w);
                (pad_h / 2, pad_w / 2)
            }
        }
    }

    /// Expected kernel tensor shape: kernel_h x kernel_w x in x out.
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels, self.out_channels]
    }
}
