//! Dense row-major arrays with a channels-then-spatial layout.
//!
//! Spatial operators accept one to three spatial axes. Internally every
//! spatial extent list is left-padded with unit axes to a `[d, h, w]` triple
//! so that 1D, 2D and 3D data share one set of kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type tag, shared with the on-disk container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar usable by the engine: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
    /// `op(a)` is `m x k`, `op(b)` is `k x n` and `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Stored buffer is row-major with `rows x cols` when not transposed.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: bounds asserted above; strides describe the
                // row-major buffers exactly.
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
                        n as isize,
                        1,
                    );
                }
            }

            fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
                data.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
                const W: usize = std::mem::size_of::<$t>();
                bytes
                    .chunks_exact(W)
                    .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense array. `product(shape) == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Array<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Array<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (channel) extent.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Extents after the channel axis.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        check_same_shape(self.shape(), other.shape(), "elementwise")?;
        Ok(Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies channels `[start, end)`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.channels() {
            return Err(Error::shape(format!(
                "channel range {start}..{end} outside 0..{}",
                self.channels()
            )));
        }
        let plane: usize = self.spatial().iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Array {
            shape,
            data: self.data[start * plane..end * plane].to_vec(),
        })
    }

    /// Stacks along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.spatial() != other.spatial() {
            return Err(Error::shape(format!(
                "concat needs equal spatial extents, got {:?} and {:?}",
                self.spatial(),
                other.spatial()
            )));
        }
        let mut shape = self.shape.clone();
        shape[0] += other.channels();
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Array { shape, data })
    }
}

pub(crate) fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Spatial extents padded to three axes, plus the number of real axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Grid3 {
    pub dims: [usize; 3],
    pub ndim: usize,
}

impl Grid3 {
    pub fn new(spatial: &[usize]) -> Result<Self> {
        if spatial.is_empty() || spatial.len() > 3 {
            return Err(Error::shape(format!(
                "expected 1 to 3 spatial axes, got {spatial:?}"
            )));
        }
        let mut dims = [1; 3];
        let off = 3 - spatial.len();
        dims[off..].copy_from_slice(spatial);
        Ok(Grid3 {
            dims,
            ndim: spatial.len(),
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Index of the first real axis inside the padded triple.
    pub fn first_axis(&self) -> usize {
        3 - self.ndim
    }

    /// Expands a per-real-axis value to the padded triple, filling unit axes with `fill`.
    pub fn pad<V: Copy>(&self, value: V, fill: V) -> [V; 3] {
        let mut out = [fill; 3];
        for v in out.iter_mut().skip(self.first_axis()) {
            *v = value;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Array::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Array::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = Array::<f64>::from_fn(&[2, 3, 3], |i| i as f64);
        let b = Array::<f64>::from_fn(&[3, 3, 3], |i| -(i as f64));
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[5, 3, 3]);
        assert_eq!(c.slice_channels(0, 2).unwrap(), a);
        assert_eq!(c.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn grid_pads_leading_axes() {
        let g = Grid3::new(&[4, 5]).unwrap();
        assert_eq!(g.dims, [1, 4, 5]);
        assert_eq!(g.pad(2usize, 1), [1, 2, 2]);
        assert!(Grid3::new(&[1, 2, 3, 4]).is_err());
    }
}
