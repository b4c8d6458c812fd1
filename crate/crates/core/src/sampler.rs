//! Backward (pull) warping of images, feature grids and label maps by dense
//! displacement fields.
//!
//! `output(p) = input(p + u(p))`, with displacements in voxels of the field's
//! own grid, multilinear interpolation and edge-clamped sampling.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Array, Grid3, Real};

/// Dense displacement vectors at one pyramid level (1 = finest).
///
/// `vectors` has shape `(D, spatial...)` where `D` is the number of spatial
/// axes; component `i` displaces along spatial axis `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    level: usize,
    vectors: Array<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(level: usize, vectors: Array<T>) -> Result<Self> {
        check_field_shape(vectors.shape())?;
        if level == 0 {
            return Err(Error::invalid("pyramid levels start at 1"));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { level, vectors })
    }

    pub fn zeros(level: usize, spatial: &[usize]) -> Self {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        DisplacementField {
            level,
            vectors: Array::zeros(&shape),
        }
    }

    /// Field whose every voxel holds `v`.
    pub fn constant(level: usize, spatial: &[usize], v: &[T]) -> Result<Self> {
        if v.len() != spatial.len() {
            return Err(Error::shape(format!(
                "constant vector has {} components for {} axes",
                v.len(),
                spatial.len()
            )));
        }
        let n: usize = spatial.iter().product();
        let data = v.iter().flat_map(|&c| std::iter::repeat(c).take(n)).collect();
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        Self::new(level, Array::from_vec(&shape, data)?)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn vectors(&self) -> &Array<T> {
        &self.vectors
    }

    pub fn into_vectors(self) -> Array<T> {
        self.vectors
    }

    pub fn spatial(&self) -> &[usize] {
        self.vectors.spatial()
    }

    pub fn ndim(&self) -> usize {
        self.vectors.channels()
    }

    /// Mean Euclidean displacement length over voxels.
    pub fn mean_norm(&self) -> f64 {
        let d = self.ndim();
        let n = self.vectors.len() / d;
        let v = self.vectors.data();
        (0..n)
            .map(|p| {
                (0..d)
                    .map(|c| v[c * n + p].as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n as f64
    }
}

pub(crate) fn check_field_shape(shape: &[usize]) -> Result<()> {
    if shape.len() < 2 || shape[0] != shape.len() - 1 {
        return Err(Error::shape(format!(
            "displacement field must be (D, spatial...) with D spatial axes, got {shape:?}"
        )));
    }
    Ok(())
}

fn check_warp_shapes(input_spatial: &[usize], field: &[usize]) -> Result<Grid3> {
    check_field_shape(field)?;
    if input_spatial != &field[1..] {
        return Err(Error::shape(format!(
            "field extents {:?} differ from input extents {input_spatial:?}",
            &field[1..]
        )));
    }
    Grid3::new(input_spatial)
}

/// Interpolation stencil of one output voxel: up to 8 corners.
struct Stencil<T> {
    corners: usize,
    idx: [usize; 8],
    w: [T; 8],
    /// `dw[a][c]`: derivative of corner weight `c` w.r.t. the displacement component `a`.
    dw: [[T; 8]; 3],
}

fn stencil<T: Real>(grid: &Grid3, strides: &[usize; 3], pos: [usize; 3], field: &[T], voxel: usize, n: usize) -> Stencil<T> {
    let first = grid.first_axis();
    let d = grid.ndim;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [T::zero(); 3];
    let mut live = [false; 3];
    for (comp, axis) in (first..3).enumerate() {
        let extent = grid.dims[axis];
        let max = T::from_usize(extent - 1).unwrap();
        let x = T::from_usize(pos[axis]).unwrap() + field[comp * n + voxel];
        let (xc, inside) = if x < T::zero() {
            (T::zero(), false)
        } else if x > max {
            (max, false)
        } else {
            (x, true)
        };
        if extent == 1 {
            lo[comp] = 0;
            hi[comp] = 0;
            t[comp] = T::zero();
            live[comp] = false;
            continue;
        }
        let mut i0 = xc.floor().to_usize().unwrap();
        if i0 >= extent - 1 {
            i0 = extent - 2;
        }
        lo[comp] = i0;
        hi[comp] = i0 + 1;
        t[comp] = xc - T::from_usize(i0).unwrap();
        live[comp] = inside;
    }
    let corners = 1usize << d;
    let mut s = Stencil {
        corners,
        idx: [0; 8],
        w: [T::zero(); 8],
        dw: [[T::zero(); 8]; 3],
    };
    for c in 0..corners {
        let mut off = 0;
        let mut w = T::one();
        for comp in 0..d {
            let axis = first + comp;
            let bit = (c >> (d - 1 - comp)) & 1 == 1;
            let (i, wa) = if bit { (hi[comp], t[comp]) } else { (lo[comp], T::one() - t[comp]) };
            off += i * strides[axis];
            w *= wa;
        }
        s.idx[c] = off;
        s.w[c] = w;
        for a in 0..d {
            if !live[a] {
                continue;
            }
            let mut g = T::one();
            for comp in 0..d {
                let bit = (c >> (d - 1 - comp)) & 1 == 1;
                g *= if comp == a {
                    if bit { T::one() } else { -T::one() }
                } else if bit {
                    t[comp]
                } else {
                    T::one() - t[comp]
                };
            }
            s.dw[a][c] = g;
        }
    }
    s
}

fn for_each_voxel(grid: &Grid3, mut f: impl FnMut(usize, [usize; 3])) {
    let [d, h, w] = grid.dims;
    let mut v = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                f(v, [z, y, x]);
                v += 1;
            }
        }
    }
}

fn strides(grid: &Grid3) -> [usize; 3] {
    let [_, h, w] = grid.dims;
    [h * w, w, 1]
}

pub(crate) fn warp_forward<T: Real>(input: &Array<T>, field: &Array<T>) -> Result<Array<T>> {
    let grid = check_warp_shapes(input.spatial(), field.shape())?;
    let n = grid.voxels();
    let st = strides(&grid);
    let c = input.channels();
    let x = input.data();
    let u = field.data();
    let mut out = vec![T::zero(); c * n];
    for_each_voxel(&grid, |v, pos| {
        let s = stencil(&grid, &st, pos, u, v, n);
        for ch in 0..c {
            let base = &x[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..s.corners {
                acc += s.w[k] * base[s.idx[k]];
            }
            out[ch * n + v] = acc;
        }
    });
    Array::from_vec(input.shape(), out)
}

/// Gradients w.r.t. (input, field).
pub(crate) fn warp_backward<T: Real>(
    input: &Array<T>,
    field: &Array<T>,
    dy: &Array<T>,
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let grid = Grid3::new(input.spatial()).expect("validated in forward");
    let n = grid.voxels();
    let st = strides(&grid);
    let c = input.channels();
    let d = grid.ndim;
    let x = input.data();
    let u = field.data();
    let g = dy.data();
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut du = need[1].then(|| vec![T::zero(); u.len()]);
    for_each_voxel(&grid, |v, pos| {
        let s = stencil(&grid, &st, pos, u, v, n);
        for ch in 0..c {
            let gv = g[ch * n + v];
            if gv == T::zero() {
                continue;
            }
            if let Some(dx) = dx.as_mut() {
                let base = &mut dx[ch * n..(ch + 1) * n];
                for k in 0..s.corners {
                    base[s.idx[k]] += s.w[k] * gv;
                }
            }
            if let Some(du) = du.as_mut() {
                let base = &x[ch * n..(ch + 1) * n];
                for a in 0..d {
                    let mut acc = T::zero();
                    for k in 0..s.corners {
                        acc += s.dw[a][k] * base[s.idx[k]];
                    }
                    du[a * n + v] += acc * gv;
                }
            }
        }
    });
    (dx, du)
}

/// Value-level warp (no gradient tracking).
pub fn warp<T: Real>(input: &Array<T>, field: &DisplacementField<T>) -> Result<Array<T>> {
    warp_forward(input, field.vectors())
}

/// Integer label map over a spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl Labels {
    pub fn new(shape: &[usize], data: Vec<u32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "label grid {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Labels {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Nearest-neighbour pull of a label map. Exact `.5` ties round toward the
/// negative direction so results are reproducible bit for bit.
pub fn warp_labels<T: Real>(labels: &Labels, field: &DisplacementField<T>) -> Result<Labels> {
    let grid = check_warp_shapes(labels.shape(), field.vectors().shape())?;
    let n = grid.voxels();
    let st = strides(&grid);
    let first = grid.first_axis();
    let u = field.vectors().data();
    let mut out = vec![0u32; n];
    for_each_voxel(&grid, |v, pos| {
        let mut off = 0;
        for (comp, axis) in (first..3).enumerate() {
            let max = (grid.dims[axis] - 1) as f64;
            let x = (pos[axis] as f64 + u[comp * n + v].as_f64()).clamp(0.0, max);
            let i = (x - 0.5).ceil().max(0.0) as usize;
            off += i * st[axis];
        }
        out[v] = labels.data[off];
    });
    Labels::new(labels.shape(), out)
}

/// Checks that a field matches an input's spatial extents.
pub fn check_compatible<T: Real>(input: &Array<T>, field: &DisplacementField<T>) -> Result<()> {
    check_same_shape(input.spatial(), field.spatial(), "warp")
}
