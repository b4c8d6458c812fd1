//! Unsupervised registration loss: image MSE plus a weighted squared-gradient
//! penalty on the final displacement field.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Array, Grid3, Real};

/// Normalization of the smoothness penalty inside the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothReduction {
    /// Plain sum over voxels.
    Sum,
    /// Sum divided by the voxel count.
    #[default]
    Mean,
}

impl SmoothReduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(SmoothReduction::Sum),
            "mean" => Some(SmoothReduction::Mean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SmoothReduction::Sum => "sum",
            SmoothReduction::Mean => "mean",
        }
    }
}

/// `(stride, extent)` of each real spatial axis for a `(C, spatial...)` array.
fn axis_strides(spatial: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(spatial.len());
    let mut stride = 1;
    for &e in spatial.iter().rev() {
        out.push((stride, e));
        stride *= e;
    }
    out.reverse();
    out
}

/// Calls `f(p, q)` for every pair of forward neighbours `q = p + e_axis` inside one channel plane.
fn for_each_forward_pair(spatial: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = spatial.iter().product();
    for (stride, extent) in axis_strides(spatial) {
        for p in 0..n {
            if (p / stride) % extent + 1 < extent {
                f(p, p + stride);
            }
        }
    }
}

pub(crate) fn smoothness_forward<T: Real>(x: &Array<T>) -> Result<T> {
    Grid3::new(x.spatial())?;
    let n: usize = x.spatial().iter().product();
    let mut total = T::zero();
    for plane in x.data().chunks(n) {
        for_each_forward_pair(x.spatial(), |p, q| {
            let d = plane[q] - plane[p];
            total += d * d;
        });
    }
    Ok(total)
}

pub(crate) fn smoothness_backward<T: Real>(x: &Array<T>, g: T) -> Vec<T> {
    let n: usize = x.spatial().iter().product();
    let two_g = g + g;
    let mut dx = vec![T::zero(); x.len()];
    for (plane, dplane) in x.data().chunks(n).zip(dx.chunks_mut(n)) {
        for_each_forward_pair(x.spatial(), |p, q| {
            let d = (plane[q] - plane[p]) * two_g;
            dplane[q] += d;
            dplane[p] -= d;
        });
    }
    dx
}

/// Squared-gradient penalty of a `(D, spatial...)` field: sum over voxels,
/// axes and components of squared forward differences. The last index along
/// each axis has no forward neighbour and contributes nothing.
pub fn smoothness<T: Real>(g: &mut Graph<T>, field: Var) -> Result<Var> {
    g.smoothness(field)
}

/// `mse(fixed, warped) + lambda * smoothness(field)` with the plain-sum penalty.
pub fn loss<T: Real>(g: &mut Graph<T>, fixed: Var, warped: Var, field: Var, lambda: T) -> Result<LossTerms> {
    loss_with(g, fixed, warped, field, lambda, SmoothReduction::Sum)
}

/// Handles of the loss graph and its two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub similarity: Var,
    pub smooth: Var,
}

pub fn loss_with<T: Real>(
    g: &mut Graph<T>,
    fixed: Var,
    warped: Var,
    field: Var,
    lambda: T,
    reduction: SmoothReduction,
) -> Result<LossTerms> {
    let similarity = g.mse(fixed, warped)?;
    let raw = g.smoothness(field)?;
    let smooth = match reduction {
        SmoothReduction::Sum => raw,
        SmoothReduction::Mean => {
            let voxels: usize = g.value(field).spatial().iter().product();
            g.scale(raw, T::one() / T::from_usize(voxels).unwrap())?
        }
    };
    let weighted = g.scale(smooth, lambda)?;
    let total = g.add(similarity, weighted)?;
    Ok(LossTerms {
        total,
        similarity,
        smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field() -> Array<f64> {
        // u(y, x) = x along the second component, v = 0.
        let mut a = Array::zeros(&[2, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                a.data_mut()[16 + y * 4 + x] = x as f64;
            }
        }
        a
    }

    #[test]
    fn constant_field_is_smooth() {
        let a = Array::<f64>::full(&[2, 5, 6], 3.5);
        assert_eq!(smoothness_forward(&a).unwrap(), 0.0);
    }

    #[test]
    fn ramp_counts_forward_differences() {
        assert_eq!(smoothness_forward(&ramp_field()).unwrap(), 12.0);
    }

    #[test]
    fn loss_terms() {
        let mut g = Graph::<f64>::new();
        let img = Array::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        let f = g.constant(img.clone()).unwrap();
        let w = g.constant(img).unwrap();
        let phi = g.constant(ramp_field()).unwrap();
        let t = loss(&mut g, f, w, phi, 0.05).unwrap();
        assert!((g.value(t.total).data()[0] - 0.6).abs() < 1e-12);
        let t0 = loss(&mut g, f, w, phi, 0.0).unwrap();
        assert_eq!(g.value(t0.total).data()[0], 0.0);
        let tm = loss_with(&mut g, f, w, phi, 0.05, SmoothReduction::Mean).unwrap();
        assert!((g.value(tm.total).data()[0] - 0.6 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_give_zero_loss() {
        let mut g = Graph::<f64>::new();
        let img = Array::from_fn(&[1, 4, 4], |i| (i % 3) as f64);
        let f = g.constant(img.clone()).unwrap();
        let w = g.constant(img).unwrap();
        let phi = g.constant(Array::zeros(&[2, 4, 4])).unwrap();
        let t = loss(&mut g, f, w, phi, 0.1).unwrap();
        assert_eq!(g.value(t.total).data()[0], 0.0);
    }
}
