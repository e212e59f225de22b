//! Dense tensors and the reverse-mode differentiation tape.
//!
//! Images use the `N × C × H × W` row-major layout throughout. The engine is
//! generic over [`Real`] so the same graph code runs in 32-bit for training and
//! in 64-bit for gradient checking.

mod conv;
mod graph;
pub mod io;
mod kernels;

pub use conv::{conv2d_direct, conv2d_output_extent};
pub use graph::{Axis, BnState, Graph, RunningMoments, Var, BN_EPS, BN_MOMENTUM};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← alpha·A·B + beta·C` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array of rank 1 to 4.
///
/// A `Tensor` is a plain value. Gradient bookkeeping (`requires_grad` and the
/// accumulated gradient) lives on the [`Graph`] node that wraps it.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::dim(format!(
            "tensor rank must be 1..=4, got {} ({dims:?})",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::dim(format!("tensor extents must be positive, got {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} hold {n} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        Ok(Self {
            dims,
            data: (0..n).map(f).collect(),
        })
    }

    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what} holds {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Element at `(n, c, h, w)` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Dims left-padded with ones to rank 4.
    pub fn dims4(&self) -> [usize; 4] {
        pad4(&self.dims)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn pad4(dims: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - dims.len();
    out[off..].copy_from_slice(dims);
    out
}

/// Integer label grid of shape `[H, W]` or `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<u8>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() < 2 || dims.len() > 3 {
            return Err(Error::dim(format!("mask rank must be 2 or 3, got {dims:?}")));
        }
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "mask dims {dims:?} hold {n} labels but payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        Self::new(dims, vec![0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width)` of each slice.
    pub fn spatial(&self) -> (usize, usize) {
        let r = self.dims.len();
        (self.dims[r - 2], self.dims[r - 1])
    }

    pub fn batch(&self) -> usize {
        if self.dims.len() == 3 {
            self.dims[0]
        } else {
            1
        }
    }

    /// Rejects labels outside `0..classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            None => Ok(()),
            Some(position) => Err(Error::Label {
                value: self.data[position],
                position,
            }),
        }
    }

    /// Stacks equally-sized `[H, W]` masks into `[N, H, W]`.
    pub fn stack(masks: &[&Mask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty mask list"))?;
        let (h, w) = first.spatial();
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.spatial() != (h, w) || m.dims.len() != 2 {
                return Err(Error::dim(format!(
                    "mask {:?} does not match [{h}, {w}]",
                    m.dims
                )));
            }
            data.extend_from_slice(&m.data);
        }
        Self::new(vec![masks.len(), h, w], data)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; classes];
        for &v in &self.data {
            if (v as usize) < classes {
                counts[v as usize] += 1;
            }
        }
        counts
    }
}
