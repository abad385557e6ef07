//! Dense N-dimensional tensors with a tape-based reverse-mode autodiff graph.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Graph`] through [`Var`] handles. Every operation the segmentation network
//! needs (3D convolution, instance normalization, trilinear upsampling,
//! activations, concatenation and the segmentation losses) is implemented here
//! with an explicit backward rule.

mod conv;
mod gemm;
mod graph;
mod kernels;
mod loss;
mod norm;
mod ops;
mod upsample;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use conv::{conv3d_forward, conv3d_output_extent, Conv3dParams};
pub use graph::{Graph, Var};

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found rank {found}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("shape {shape:?} holds {expected} elements but data has {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has already been consumed by a backward pass")]
    GraphConsumed,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element types supported by the engine.
///
/// `f64` is used for verification and gradient checks, `f32` for training.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided row/column-major views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// SIMD kernels for stride-1 3x3x3 convolution, when the CPU supports them.
    fn direct_conv() -> Option<kernels::DirectConv<Self>> {
        None
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn direct_conv() -> Option<kernels::DirectConv<f32>> {
        kernels::f32_direct_conv()
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Independent normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Extents of a rank-5 `[N, C, D, H, W]` tensor.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, c, d, h, w] => Ok([n, c, d, h, w]),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: 5,
                found: self.shape.len(),
            }),
        }
    }

    /// Copy of sample `n` of channel `c` of a rank-5 tensor.
    pub fn channel_slice(&self, n: usize, c: usize) -> Result<Vec<T>> {
        let [nn, cc, d, h, w] = self.dims5("channel_slice")?;
        if n >= nn || c >= cc {
            return Err(TensorError::InvalidArgument {
                op: "channel_slice",
                reason: format!("index ({n}, {c}) outside ({nn}, {cc})"),
            });
        }
        let vol = d * h * w;
        let start = (n * cc + c) * vol;
        Ok(self.data[start..start + vol].to_vec())
    }

    /// Samples `range` of the leading axis.
    pub fn batch_slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let lead = *self.shape.first().ok_or(TensorError::RankMismatch {
            op: "batch_slice",
            expected: 1,
            found: 0,
        })?;
        if range.start > range.end || range.end > lead {
            return Err(TensorError::InvalidArgument {
                op: "batch_slice",
                reason: format!("range {range:?} outside batch of {lead}"),
            });
        }
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Ok(Self {
            shape,
            data: self.data[range.start * per..range.end * per].to_vec(),
        })
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "stack_batch",
            reason: "no tensors given".into(),
        })?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut lead = 0;
        for p in parts {
            if p.shape.len() != first.shape.len() {
                return Err(TensorError::RankMismatch {
                    op: "stack_batch",
                    expected: first.shape.len(),
                    found: p.shape.len(),
                });
            }
            for (axis, (&a, &b)) in tail.iter().zip(&p.shape[1..]).enumerate() {
                if a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack_batch",
                        axis: axis + 1,
                        expected: a,
                        found: b,
                    });
                }
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: a.len(),
            found: b.len(),
        });
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(TensorError::ShapeMismatch {
                op,
                axis,
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::DataLength {
                expected: 6,
                found: 5,
                ..
            }
        ));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5f64);
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn stack_and_slice_batch() {
        let a = Tensor::<f32>::full([1, 2, 3], 1.0);
        let b = Tensor::<f32>::full([2, 2, 3], 2.0);
        let s = Tensor::stack_batch(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[3, 2, 3]);
        assert_eq!(s.batch_slice(0..1).unwrap(), a);
        let bad = Tensor::<f32>::zeros([1, 3, 3]);
        assert!(matches!(
            Tensor::stack_batch(&[s, bad]),
            Err(TensorError::ShapeMismatch { axis: 1, .. })
        ));
    }
}
