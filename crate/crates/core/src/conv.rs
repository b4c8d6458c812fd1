//! Convolution kernels (im2col + GEMM) for 1D/2D/3D inputs.

use crate::error::{Error, Result};
use crate::tensor::{Array, Grid3, Real};

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: Grid3,
    pub out: [usize; 3],
    pub k: [usize; 3],
    pub pad: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() < 2 {
            return Err(Error::shape(format!(
                "conv input needs channel and spatial axes, got {input:?}"
            )));
        }
        let grid = Grid3::new(&input[1..])?;
        if kernel.len() != input.len() + 1 {
            return Err(Error::shape(format!(
                "conv kernel {kernel:?} must be (out, in, k...) for input {input:?}"
            )));
        }
        let (cout, cin) = (kernel[0], kernel[1]);
        if cin != input[0] {
            return Err(Error::shape(format!(
                "conv kernel expects {cin} input channels, input has {}",
                input[0]
            )));
        }
        if bias != [cout] {
            return Err(Error::shape(format!(
                "conv bias must be [{cout}], got {bias:?}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let mut k = [1; 3];
        k[grid.first_axis()..].copy_from_slice(&kernel[2..]);
        let pad = grid.pad(padding, 0);
        let strides = grid.pad(stride, 1);
        let mut out = [1; 3];
        for a in 0..3 {
            let span = grid.dims[a] + 2 * pad[a];
            if span < k[a] {
                return Err(Error::shape(format!(
                    "conv kernel extent {} exceeds padded input extent {span} on axis {a}",
                    k[a]
                )));
            }
            out[a] = (span - k[a]) / strides[a] + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            input: grid,
            out,
            k,
            pad,
            stride: strides,
        })
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }

    pub fn out_voxels(&self) -> usize {
        self.out.iter().product()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.cout];
        s.extend_from_slice(&self.out[self.input.first_axis()..]);
        s
    }

    /// Output positions `o` along `axis` whose source `o*stride + tap - pad` is in range.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p, n) = (self.stride[axis], self.pad[axis], self.input.dims[axis]);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let hi = if n + p > tap {
            ((n - 1 + p - tap) / s + 1).min(self.out[axis])
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Visits every in-bounds run of the column buffer along the last output axis as
/// `f(col_offset, input_offset, run_length, input_stride)`.
fn for_each_run(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = g.input.dims;
    let [_, oh, ow] = g.out;
    let p = g.out_voxels();
    for ci in 0..g.cin {
        for a in 0..g.k[0] {
            let (d_lo, d_hi) = g.valid_range(0, a);
            for b in 0..g.k[1] {
                let (h_lo, h_hi) = g.valid_range(1, b);
                for c in 0..g.k[2] {
                    let (w_lo, w_hi) = g.valid_range(2, c);
                    let row = ((ci * g.k[0] + a) * g.k[1] + b) * g.k[2] + c;
                    if w_lo >= w_hi {
                        continue;
                    }
                    for z in d_lo..d_hi {
                        let iz = z * g.stride[0] + a - g.pad[0];
                        for y in h_lo..h_hi {
                            let iy = y * g.stride[1] + b - g.pad[1];
                            let ix = w_lo * g.stride[2] + c - g.pad[2];
                            let col = row * p + (z * oh + y) * ow + w_lo;
                            let src = ((ci * d + iz) * h + iy) * w + ix;
                            f(col, src, w_hi - w_lo, g.stride[2]);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.out_voxels()];
    im2col_into(g, x, &mut cols);
    cols
}

fn im2col_into<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    for_each_run(g, |col, src, len, stride| {
        let dst = &mut cols[col..col + len];
        if stride == 1 {
            dst.copy_from_slice(&x[src..src + len]);
        } else {
            for (i, v) in dst.iter_mut().enumerate() {
                *v = x[src + i * stride];
            }
        }
    });
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    for_each_run(g, |col, src, len, stride| {
        let s = &cols[col..col + len];
        for (i, &v) in s.iter().enumerate() {
            dx[src + i * stride] += v;
        }
    });
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    x: &Array<T>,
    kernel: &Array<T>,
    bias: &Array<T>,
) -> Array<T> {
    let p = g.out_voxels();
    let cols = im2col(g, x.data());
    let mut out = vec![T::zero(); g.cout * p];
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(bias.data()[co]);
    }
    T::gemm(g.cout, g.rows(), p, kernel.data(), false, &cols, false, T::one(), &mut out);
    Array::from_vec(&g.out_shape(), out).expect("conv output shape")
}

/// Gradients for (input, kernel, bias); each is computed only when requested.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &Array<T>,
    kernel: &Array<T>,
    dy: &Array<T>,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_voxels();
    let r = g.rows();
    let dx = need[0].then(|| {
        let mut dcols = vec![T::zero(); r * p];
        T::gemm(r, g.cout, p, kernel.data(), true, dy.data(), false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); x.len()];
        col2im(g, &dcols, &mut dx);
        dx
    });
    let dk = need[1].then(|| {
        let cols = im2col(g, x.data());
        let mut dk = vec![T::zero(); g.cout * r];
        T::gemm(g.cout, p, r, dy.data(), false, &cols, true, T::zero(), &mut dk);
        dk
    });
    let db = need[2].then(|| dy.data().chunks(p).map(|c| c.iter().copied().sum()).collect());
    (dx, dk, db)
}
