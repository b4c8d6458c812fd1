//! Separable linear resampling: half-pixel linear upsampling and block averaging.
//!
//! Both operators are expressed as per-axis tap tables, so the backward pass is
//! the transpose of the same tables.

use crate::error::{Error, Result};
use crate::tensor::{Array, Grid3, Real};

/// For each output index along one axis, the contributing input indices and weights.
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub n_in: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    fn identity(n: usize) -> Self {
        Taps {
            n_in: n,
            entries: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Half-pixel aligned linear interpolation: output `x` reads input
    /// `(x + 0.5) / factor - 0.5`, clamped to the valid index range.
    pub fn upsample(n: usize, factor: usize) -> Self {
        let entries = (0..n * factor)
            .map(|x| {
                let src = ((x as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                let t = src - i0 as f64;
                if i1 == i0 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect();
        Taps { n_in: n, entries }
    }

    pub fn block_mean(n: usize, factor: usize) -> Self {
        let w = 1.0 / factor as f64;
        let entries = (0..n / factor)
            .map(|o| (0..factor).map(|j| (o * factor + j, w)).collect())
            .collect();
        Taps { n_in: n, entries }
    }

    fn n_out(&self) -> usize {
        self.entries.len()
    }
}

/// One tap table per padded axis.
#[derive(Debug, Clone)]
pub(crate) struct Resampler {
    pub axes: [Taps; 3],
    pub grid_in: Grid3,
}

pub(crate) fn check_power_of_two(factor: usize) -> Result<()> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!(
            "resampling factor must be a power of two >= 2, got {factor}"
        )));
    }
    Ok(())
}

impl Resampler {
    pub fn upsample(spatial: &[usize], factor: usize) -> Result<Self> {
        check_power_of_two(factor)?;
        let grid = Grid3::new(spatial)?;
        let first = grid.first_axis();
        let axes = std::array::from_fn(|a| {
            if a < first {
                Taps::identity(1)
            } else {
                Taps::upsample(grid.dims[a], factor)
            }
        });
        Ok(Resampler { axes, grid_in: grid })
    }

    pub fn downsample(spatial: &[usize], factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be positive"));
        }
        let grid = Grid3::new(spatial)?;
        if spatial.iter().any(|&e| e % factor != 0) {
            return Err(Error::shape(format!(
                "extents {spatial:?} are not divisible by downsample factor {factor}"
            )));
        }
        let first = grid.first_axis();
        let axes = std::array::from_fn(|a| {
            if a < first {
                Taps::identity(1)
            } else {
                Taps::block_mean(grid.dims[a], factor)
            }
        });
        Ok(Resampler { axes, grid_in: grid })
    }

    pub fn out_spatial(&self) -> Vec<usize> {
        let first = self.grid_in.first_axis();
        self.axes[first..].iter().map(Taps::n_out).collect()
    }

    pub fn forward<T: Real>(&self, x: &Array<T>) -> Array<T> {
        let c = x.channels();
        let mut dims = self.grid_in.dims;
        let mut data = x.data().to_vec();
        for (axis, taps) in self.axes.iter().enumerate() {
            if taps.n_out() == taps.n_in && taps.entries.iter().all(|e| e.len() == 1) {
                continue;
            }
            data = apply_axis(&data, c, &mut dims, axis, taps);
        }
        let mut shape = vec![c];
        shape.extend(self.out_spatial());
        Array::from_vec(&shape, data).expect("resample output shape")
    }

    /// Adjoint of `forward`: maps an output-shaped gradient to the input shape.
    pub fn backward<T: Real>(&self, dy: &Array<T>) -> Vec<T> {
        let c = dy.channels();
        let mut dims = [0; 3];
        for a in 0..3 {
            dims[a] = self.axes[a].n_out();
        }
        let mut data = dy.data().to_vec();
        for axis in (0..3).rev() {
            let taps = &self.axes[axis];
            if taps.n_out() == taps.n_in && taps.entries.iter().all(|e| e.len() == 1) {
                continue;
            }
            data = apply_axis_transpose(&data, c, &mut dims, axis, taps);
        }
        data
    }
}

fn split(dims: &[usize; 3], c: usize, axis: usize) -> (usize, usize) {
    let outer = c * dims[..axis].iter().product::<usize>();
    let inner = dims[axis + 1..].iter().product::<usize>();
    (outer, inner)
}

fn apply_axis<T: Real>(x: &[T], c: usize, dims: &mut [usize; 3], axis: usize, taps: &Taps) -> Vec<T> {
    let (outer, inner) = split(dims, c, axis);
    let (n_in, n_out) = (taps.n_in, taps.n_out());
    let mut y = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        for (i, entry) in taps.entries.iter().enumerate() {
            let dst = &mut y[(o * n_out + i) * inner..(o * n_out + i + 1) * inner];
            for &(j, w) in entry {
                let w = T::from_f64_lossy(w);
                let src = &x[(o * n_in + j) * inner..(o * n_in + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    dims[axis] = n_out;
    y
}

fn apply_axis_transpose<T: Real>(
    dy: &[T],
    c: usize,
    dims: &mut [usize; 3],
    axis: usize,
    taps: &Taps,
) -> Vec<T> {
    let (outer, inner) = split(dims, c, axis);
    let (n_in, n_out) = (taps.n_in, taps.n_out());
    let mut dx = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        for (i, entry) in taps.entries.iter().enumerate() {
            let src = &dy[(o * n_out + i) * inner..(o * n_out + i + 1) * inner];
            for &(j, w) in entry {
                let w = T::from_f64_lossy(w);
                let dst = &mut dx[(o * n_in + j) * inner..(o * n_in + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    dims[axis] = n_in;
    dx
}
