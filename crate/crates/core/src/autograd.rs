//! Reverse-mode differentiation over an append-only computation graph.
//!
//! Nodes are recorded in creation order, which is already a topological order,
//! so the backward pass is a single reverse sweep that visits each node once.

use crate::conv::{conv_backward, conv_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::loss::{smoothness_backward, smoothness_forward};
use crate::resample::Resampler;
use crate::sampler::{check_field_shape, warp_backward, warp_forward};
use crate::tensor::{check_same_shape, Array, Real};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, k: Var, b: Var, geom: ConvGeom },
    LeakyRelu { x: Var, slope: T },
    Resample { x: Var, resampler: Resampler },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize },
    Mse { a: Var, b: Var },
    Warp { x: Var, field: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Smoothness { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv { x, k, b, .. } => vec![x, k, b],
            Op::LeakyRelu { x, .. }
            | Op::Resample { x, .. }
            | Op::Slice { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Smoothness { x } => vec![x],
            Op::Concat { a, b } | Op::Mse { a, b } | Op::Add { a, b } => vec![a, b],
            Op::Warp { x, field } => vec![x, field],
        }
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Array<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "parameter")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// N-d convolution; `x` is `(Cin, spatial...)`, `k` is `(Cout, Cin, k...)`, `b` is `(Cout)`.
    pub fn conv(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(k).shape(),
            self.value(b).shape(),
            stride,
            padding,
        )?;
        let y = conv_forward(&geom, self.value(x), self.value(k), self.value(b));
        self.push(y, Op::Conv { x, k, b, geom }, "conv")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::invalid(format!("leaky-relu slope must lie in (0,1), got {slope}")));
        }
        let y = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        self.push(y, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    /// Half-pixel aligned multilinear upsampling of every spatial axis by `factor`.
    pub fn upsample_linear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let resampler = Resampler::upsample(self.value(x).spatial(), factor)?;
        let y = resampler.forward(self.value(x));
        self.push(y, Op::Resample { x, resampler }, "upsample_linear")
    }

    /// Mean over non-overlapping `factor`-sized blocks.
    pub fn downsample_avg(&mut self, x: Var, factor: usize) -> Result<Var> {
        let resampler = Resampler::downsample(self.value(x).spatial(), factor)?;
        let y = resampler.forward(self.value(x));
        self.push(y, Op::Resample { x, resampler }, "downsample_avg")
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).concat_channels(self.value(b))?;
        self.push(y, Op::Concat { a, b }, "concat")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, end)?;
        self.push(y, Op::Slice { x, start }, "slice_channels")
    }

    /// Mean squared difference, as a one-element array.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va.shape(), vb.shape(), "mse")?;
        let n = T::from_usize(va.len()).unwrap();
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        self.push(Array::scalar(s / n), Op::Mse { a, b }, "mse")
    }

    /// Pull-warp `x` (`(C, spatial...)`) by a `(D, spatial...)` displacement field.
    pub fn warp(&mut self, x: Var, field: Var) -> Result<Var> {
        check_field_shape(self.value(field).shape())?;
        let y = warp_forward(self.value(x), self.value(field))?;
        self.push(y, Op::Warp { x, field }, "warp")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push(y, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).scale(c);
        self.push(y, Op::Scale { x, c }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Array::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, "sum")
    }

    /// Sum of squared forward differences along every spatial axis.
    pub fn smoothness(&mut self, x: Var) -> Result<Var> {
        let y = Array::scalar(smoothness_forward(self.value(x))?);
        self.push(y, Op::Smoothness { x }, "smoothness")
    }

    /// Backpropagates from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Vec<T>| -> Result<()> {
            let shape = self.value(v).shape();
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(Array::from_vec(shape, d)?),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, geom } => {
                let need = [self.wants(*x), self.wants(*k), self.wants(*b)];
                let (dx, dk, db) = conv_backward(geom, self.value(*x), self.value(*k), g, need);
                if let Some(d) = dx {
                    acc(*x, d)?;
                }
                if let Some(d) = dk {
                    acc(*k, d)?;
                }
                if let Some(d) = db {
                    acc(*b, d)?;
                }
            }
            Op::LeakyRelu { x, slope } => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v >= T::zero() { gv } else { gv * *slope })
                    .collect();
                acc(*x, d)?;
            }
            Op::Resample { x, resampler } => acc(*x, resampler.backward(g))?,
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                if self.wants(*a) {
                    acc(*a, g.data()[..na].to_vec())?;
                }
                if self.wants(*b) {
                    acc(*b, g.data()[na..].to_vec())?;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let plane: usize = xv.spatial().iter().product();
                let mut d = vec![T::zero(); xv.len()];
                d[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                acc(*x, d)?;
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(va.len()).unwrap();
                let diff: Vec<T> = va.data().iter().zip(vb.data()).map(|(&p, &q)| (p - q) * s).collect();
                if self.wants(*b) {
                    acc(*b, diff.iter().map(|&v| -v).collect())?;
                }
                if self.wants(*a) {
                    acc(*a, diff)?;
                }
            }
            Op::Warp { x, field } => {
                let need = [self.wants(*x), self.wants(*field)];
                let (dx, du) = warp_backward(self.value(*x), self.value(*field), g, need);
                if let Some(d) = dx {
                    acc(*x, d)?;
                }
                if let Some(d) = du {
                    acc(*field, d)?;
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.data().to_vec())?;
                }
                if self.wants(*b) {
                    acc(*b, g.data().to_vec())?;
                }
            }
            Op::Scale { x, c } => acc(*x, g.data().iter().map(|&v| v * *c).collect())?,
            Op::Sum { x } => acc(*x, vec![g.data()[0]; self.value(*x).len()])?,
            Op::Smoothness { x } => acc(*x, smoothness_backward(self.value(*x), g.data()[0]))?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn box_sum_of_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::full(&[1, 4, 4], 1.0)).unwrap();
        let k = g.param(Array::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let b = g.param(Array::zeros(&[1])).unwrap();
        let y = g.conv(x, k, b, 1, 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[3], 4.0);
        assert_eq!(v[5], 9.0);
        assert_eq!(v[10], 9.0);
        assert_eq!(v[6], 9.0);
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut g = Graph::<f64>::new();
        let xv = Array::from_fn(&[1, 5, 4], |i| i as f64 * 0.5 - 3.0);
        let mut kv = Array::zeros(&[1, 1, 3, 3]);
        kv.data_mut()[4] = 1.0;
        let x = g.constant(xv.clone()).unwrap();
        let k = g.constant(kv).unwrap();
        let b = g.constant(Array::zeros(&[1])).unwrap();
        let y = g.conv(x, k, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[3], &[0.0, -2.0, 3.0])).unwrap();
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, -0.4, 3.0]);
        assert!(g.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn mse_by_hand() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr(&[2], &[0.0, 0.0])).unwrap();
        let b = g.constant(arr(&[2], &[1.0, 3.0])).unwrap();
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        let m = g.mse(a, a).unwrap();
        assert_eq!(g.value(m).data(), &[0.0]);
        let c = g.constant(arr(&[3], &[1.0, 3.0, 4.0])).unwrap();
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn concat_shapes_and_gradient_routing() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Array::full(&[2, 8, 8], 1.0)).unwrap();
        let b = g.param(Array::full(&[3, 8, 8], 2.0)).unwrap();
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[5, 8, 8]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));
        let left = g.slice_channels(c, 0, 2).unwrap();
        assert_eq!(g.value(left), g.value(a));
        let d = g.param(Array::zeros(&[1, 4, 8])).unwrap();
        assert!(g.concat(a, d).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx of sum(x + x) = 2
        let mut g = Graph::<f64>::new();
        let x = g.param(arr(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[2], &[1.0, 2.0])).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let s = g.sum(y).unwrap();
        assert!(!g.requires_grad(s));
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(arr(&[2], &[1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err());
    }
}
