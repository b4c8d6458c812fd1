//! Residual-field arithmetic across pyramid levels and field diagnostics.
//!
//! A displacement estimated at level `j` is expressed in voxels of that
//! level. Carrying it to a finer level `k` resamples the grid by
//! `f = 2^(j-k)` and multiplies every vector by the same `f`, so a coarse
//! displacement of 2 voxels becomes 4 voxels one level up.
//!
//! The total field at level `k` is
//!
//! ```text
//! phi_k = sum_{j >= k} 2^(j-k) * up_{2^(j-k)}(residual_j)
//! ```
//!
//! which at `k = 1`, `K = 5` gives weights 16, 8, 4, 2, 1 for `j = 5..1`.
//! During the coarse-to-fine pass the level-`k` residual does not exist yet
//! and the warping field is the same sum over `j > k`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::sampler::DisplacementField;
use crate::tensor::{check_same_shape, Array, Real};

/// Spatial extent of `level` given the finest extent.
pub fn level_extent(finest: &[usize], level: usize) -> Result<Vec<usize>> {
    if level == 0 {
        return Err(Error::invalid("pyramid levels start at 1"));
    }
    let f = 1usize << (level - 1);
    if finest.iter().any(|&e| e % f != 0) {
        return Err(Error::shape(format!(
            "extents {finest:?} are not divisible by 2^{}; pad or crop the input",
            level - 1
        )));
    }
    Ok(finest.iter().map(|&e| e / f).collect())
}

/// Graph form of [`upsample_scale`]: resample by `2^(from - to)` and scale vectors by the same factor.
pub fn upsample_scale_var<T: Real>(g: &mut Graph<T>, field: Var, from_level: usize, to_level: usize) -> Result<Var> {
    if to_level >= from_level || to_level == 0 {
        return Err(Error::invalid(format!(
            "target level {to_level} must be finer than source level {from_level}"
        )));
    }
    let f = 1usize << (from_level - to_level);
    let up = g.upsample_linear(field, f)?;
    g.scale(up, T::from_usize(f).unwrap())
}

/// Moves a field to a finer level, rescaling both its grid and its magnitudes.
pub fn upsample_scale<T: Real>(field: &DisplacementField<T>, target_level: usize) -> Result<DisplacementField<T>> {
    let mut g = Graph::new();
    let v = g.constant(field.vectors().clone())?;
    let out = upsample_scale_var(&mut g, v, field.level(), target_level)?;
    DisplacementField::new(target_level, g.value(out).clone())
}

/// Graph form of [`accumulate`] over `(level, field)` pairs.
///
/// Every level in `k+1..=coarsest` must be present; level `k` is optional.
/// Returns a zero constant when nothing contributes.
pub fn accumulate_vars<T: Real>(
    g: &mut Graph<T>,
    residuals: &[(usize, Var)],
    k: usize,
    coarsest: usize,
    extent_k: &[usize],
) -> Result<Var> {
    for j in k + 1..=coarsest {
        if !residuals.iter().any(|&(l, _)| l == j) {
            return Err(Error::invalid(format!(
                "residual for level {j} is required to accumulate at level {k}"
            )));
        }
    }
    let mut total: Option<Var> = None;
    let mut ordered: Vec<_> = residuals.iter().filter(|&&(l, _)| l >= k).copied().collect();
    ordered.sort_by(|a, b| b.0.cmp(&a.0));
    for (level, v) in ordered {
        let term = if level == k {
            v
        } else {
            upsample_scale_var(g, v, level, k)?
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let mut shape = vec![extent_k.len()];
            shape.extend_from_slice(extent_k);
            g.constant(Array::zeros(&shape))
        }
    }
}

/// Per-level residual fields, fine to coarse; empty slots are not yet estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFieldSet<T> {
    finest: Vec<usize>,
    levels: Vec<Option<DisplacementField<T>>>,
}

impl<T: Real> ResidualFieldSet<T> {
    pub fn new(finest: &[usize], num_levels: usize) -> Result<Self> {
        if num_levels == 0 {
            return Err(Error::invalid("a residual set needs at least one level"));
        }
        level_extent(finest, num_levels)?;
        Ok(ResidualFieldSet {
            finest: finest.to_vec(),
            levels: vec![None; num_levels],
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &[usize] {
        &self.finest
    }

    pub fn set(&mut self, field: DisplacementField<T>) -> Result<()> {
        let level = field.level();
        if level == 0 || level > self.levels.len() {
            return Err(Error::invalid(format!(
                "level {level} outside 1..={}",
                self.levels.len()
            )));
        }
        let want = level_extent(&self.finest, level)?;
        check_same_shape(field.spatial(), &want, "residual level extent")?;
        self.levels[level - 1] = Some(field);
        Ok(())
    }

    pub fn get(&self, level: usize) -> Option<&DisplacementField<T>> {
        self.levels.get(level.wrapping_sub(1)).and_then(Option::as_ref)
    }

    /// Populated levels, fine to coarse.
    pub fn iter(&self) -> impl Iterator<Item = &DisplacementField<T>> {
        self.levels.iter().flatten()
    }
}

/// Total field at level `k` from every available residual at levels `>= k`.
pub fn accumulate<T: Real>(residuals: &ResidualFieldSet<T>, k: usize) -> Result<DisplacementField<T>> {
    if k == 0 || k > residuals.num_levels() {
        return Err(Error::invalid(format!(
            "target level {k} outside 1..={}",
            residuals.num_levels()
        )));
    }
    let mut g = Graph::new();
    let mut vars = Vec::new();
    for f in residuals.iter() {
        vars.push((f.level(), g.constant(f.vectors().clone())?));
    }
    let extent = level_extent(residuals.finest(), k)?;
    let out = accumulate_vars(&mut g, &vars, k, residuals.num_levels(), &extent)?;
    DisplacementField::new(k, g.value(out).clone())
}

/// Partial derivative of one component plane along one axis: central
/// differences in the interior, one-sided at the borders.
fn derivative(plane: &[f64], spatial: &[usize], axis: usize) -> Vec<f64> {
    let n = plane.len();
    let extent = spatial[axis];
    let stride: usize = spatial[axis + 1..].iter().product();
    (0..n)
        .map(|p| {
            if extent < 2 {
                return 0.0;
            }
            let i = (p / stride) % extent;
            if i == 0 {
                plane[p + stride] - plane[p]
            } else if i == extent - 1 {
                plane[p] - plane[p - stride]
            } else {
                0.5 * (plane[p + stride] - plane[p - stride])
            }
        })
        .collect()
}

fn det(m: &[[f64; 3]; 3], d: usize) -> f64 {
    match d {
        1 => m[0][0],
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        _ => {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
    }
}

/// `det(I + grad u)` at every voxel, as a `(1, spatial...)` array.
pub fn jacobian_determinant_map<T: Real>(field: &DisplacementField<T>) -> Array<f64> {
    let d = field.ndim();
    let spatial = field.spatial().to_vec();
    let n: usize = spatial.iter().product();
    let data: Vec<f64> = field.vectors().data().iter().map(|v| v.as_f64()).collect();
    // grads[i][j] = d u_i / d x_j
    let grads: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|i| (0..d).map(|j| derivative(&data[i * n..(i + 1) * n], &spatial, j)).collect())
        .collect();
    let mut shape = vec![1];
    shape.extend_from_slice(&spatial);
    Array::from_fn(&shape, |p| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                m[i][j] = grads[i][j][p] + if i == j { 1.0 } else { 0.0 };
            }
        }
        det(&m, d)
    })
}

/// Fraction of voxels whose Jacobian determinant is `<= 0`.
pub fn nonpositive_jacobian_fraction<T: Real>(field: &DisplacementField<T>) -> f64 {
    let j = jacobian_determinant_map(field);
    j.data().iter().filter(|&&v| v <= 0.0).count() as f64 / j.len() as f64
}

/// Mean over voxels and components of the squared difference.
pub fn field_mse<T: Real>(a: &DisplacementField<T>, b: &DisplacementField<T>) -> Result<f64> {
    check_same_shape(a.vectors().shape(), b.vectors().shape(), "field_mse")?;
    let s: f64 = a
        .vectors()
        .data()
        .iter()
        .zip(b.vectors().data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.vectors().len() as f64)
}
