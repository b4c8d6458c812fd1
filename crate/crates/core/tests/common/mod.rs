#![allow(dead_code)]

use prdfe::loss::{loss_with, SmoothReduction};
use prdfe::models::forward_vars;
use prdfe::params::BoundParams;
use prdfe::{Array, Graph, ModelConfig, ModelParams, Real, Var, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Array<f64> {
    Array::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central finite differences of a scalar function of one array.
pub fn fd_grad(x: &Array<f64>, h: f64, mut f: impl FnMut(&Array<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `mse(op(x), target)` gradient w.r.t. `x`: analytic vs central differences.
pub fn unary_error(x: &Array<f64>, target_shape: &[usize], op: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let target = random(target_shape, -1.0, 1.0, &mut rng(99));
    let eval = |x: &Array<f64>, want_grad: bool| {
        let mut g = Graph::new();
        let xv = g.param(x.clone()).unwrap();
        let t = g.constant(target.clone()).unwrap();
        let y = op(&mut g, xv);
        let l = g.mse(y, t).unwrap();
        let value = g.value(l).data()[0];
        let grad = want_grad.then(|| g.backward(l).unwrap().get(xv).unwrap().data().to_vec());
        (value, grad)
    };
    let analytic = eval(x, true).1.unwrap();
    let numeric = fd_grad(x, FD_STEP, |p| eval(p, false).0);
    rel_err(&analytic, &numeric)
}

/// Gradient of a scalar-valued op w.r.t. its single input.
pub fn scalar_error(x: &Array<f64>, op: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let eval = |x: &Array<f64>, want_grad: bool| {
        let mut g = Graph::new();
        let xv = g.param(x.clone()).unwrap();
        let l = op(&mut g, xv);
        let value = g.value(l).data()[0];
        (value, want_grad.then(|| g.backward(l).unwrap().get(xv).unwrap().data().to_vec()))
    };
    rel_err(&eval(x, true).1.unwrap(), &fd_grad(x, FD_STEP, |p| eval(p, false).0))
}

pub const FD_STEP: f64 = 1e-6;

/// Field values whose fractional parts stay in `[0.2, 0.8]`, so a finite
/// difference never crosses a cell boundary of the interpolation.
pub fn interior_field(shape: &[usize], r: &mut impl Rng) -> Array<f64> {
    Array::from_fn(shape, |_| r.gen_range(-3..3) as f64 + r.gen_range(0.2..0.8))
}

/// Relative gradient errors of every differentiable primitive, by name.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    for (spatial, stride) in [(vec![8], 1), (vec![6, 8], 1), (vec![8, 8], 2), (vec![4, 4, 6], 1), (vec![4, 4, 4], 2)] {
        let nd = spatial.len();
        let mut xs = vec![2];
        xs.extend(&spatial);
        let mut ks = vec![3, 2];
        ks.extend(std::iter::repeat(3).take(nd));
        let x = random(&xs, -1.0, 1.0, &mut r);
        let k = random(&ks, -0.5, 0.5, &mut r);
        let b = random(&[3], -0.5, 0.5, &mut r);
        let mut ys = vec![3];
        ys.extend(spatial.iter().map(|&e| (e - 1) / stride + 1));
        let tag = format!("{spatial:?}/{stride}");
        out.push((format!("conv dx {tag}"), unary_error(&x, &ys, |g, v| {
            let (kv, bv) = (g.constant(k.clone()).unwrap(), g.constant(b.clone()).unwrap());
            g.conv(v, kv, bv, stride, 1).unwrap()
        })));
        out.push((format!("conv dk {tag}"), unary_error(&k, &ys, |g, v| {
            let (xv, bv) = (g.constant(x.clone()).unwrap(), g.constant(b.clone()).unwrap());
            g.conv(xv, v, bv, stride, 1).unwrap()
        })));
        out.push((format!("conv db {tag}"), unary_error(&b, &ys, |g, v| {
            let (xv, kv) = (g.constant(x.clone()).unwrap(), g.constant(k.clone()).unwrap());
            g.conv(xv, kv, v, stride, 1).unwrap()
        })));
    }

    // keep inputs away from the kink at 0
    let x = Array::from_fn(&[2, 5, 6], |_| {
        let v: f64 = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    out.push(("leaky_relu".into(), unary_error(&x, &[2, 5, 6], |g, v| g.leaky_relu(v, 0.2).unwrap())));

    let x = random(&[2, 4, 3], -1.0, 1.0, &mut r);
    out.push(("upsample x2 2d".into(), unary_error(&x, &[2, 8, 6], |g, v| g.upsample_linear(v, 2).unwrap())));
    let x = random(&[1, 2, 2, 2], -1.0, 1.0, &mut r);
    out.push(("upsample x4 3d".into(), unary_error(&x, &[1, 8, 8, 8], |g, v| g.upsample_linear(v, 4).unwrap())));
    let x = random(&[2, 8, 8], -1.0, 1.0, &mut r);
    out.push(("downsample x4 2d".into(), unary_error(&x, &[2, 2, 2], |g, v| g.downsample_avg(v, 4).unwrap())));

    for spatial in [vec![8], vec![6, 7], vec![4, 5, 6]] {
        let mut xs = vec![2];
        xs.extend(&spatial);
        let mut fs = vec![spatial.len()];
        fs.extend(&spatial);
        let x = random(&xs, -1.0, 1.0, &mut r);
        let u = interior_field(&fs, &mut r);
        out.push((format!("warp dx {spatial:?}"), unary_error(&x, &xs, |g, v| {
            let uv = g.constant(u.clone()).unwrap();
            g.warp(v, uv).unwrap()
        })));
        out.push((format!("warp du {spatial:?}"), unary_error(&u, &xs, |g, v| {
            let xv = g.constant(x.clone()).unwrap();
            g.warp(xv, v).unwrap()
        })));
    }

    let a = random(&[1, 5, 6], -1.0, 1.0, &mut r);
    let b = random(&[1, 5, 6], -1.0, 1.0, &mut r);
    out.push(("mse".into(), scalar_error(&a, |g, v| {
        let bv = g.constant(b.clone()).unwrap();
        g.mse(v, bv).unwrap()
    })));
    for shape in [vec![1, 7], vec![2, 5, 6], vec![3, 3, 4, 5]] {
        let u = random(&shape, -2.0, 2.0, &mut r);
        out.push((format!("smoothness {shape:?}"), scalar_error(&u, |g, v| g.smoothness(v).unwrap())));
    }

    let x = random(&[4, 3, 3], -1.0, 1.0, &mut r);
    out.push(("slice/concat/scale/add".into(), unary_error(&x, &[3, 3, 3], |g, v| {
        let a = g.slice_channels(v, 0, 1).unwrap();
        let b = g.slice_channels(v, 2, 4).unwrap();
        let c = g.concat(a, b).unwrap();
        let s = g.scale(c, 1.7).unwrap();
        g.add(s, c).unwrap()
    })));
    out
}

fn tiny_model(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    cfg.encoder.channels = vec![3, 4, 4];
    cfg.decoder = vec![3, 3, 3];
    cfg
}

/// Zero heads would block every gradient upstream of them; give them small random weights.
fn randomized_heads(cfg: &ModelConfig, seed: u64) -> ModelParams<f32> {
    let mut p = cfg.init_params::<f32>(seed).unwrap();
    let mut r = rng(seed + 1);
    for (name, a) in p.iter_mut() {
        if name.contains("head") {
            a.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
        }
    }
    p
}

fn model_loss<T: Real>(cfg: &ModelConfig, p: &ModelParams<T>, m: &Array<T>, f: &Array<T>) -> (Graph<T>, BoundParams, Var) {
    let mut g = Graph::new();
    let bound = p.bind(&mut g).unwrap();
    let mv = g.constant(m.clone()).unwrap();
    let fv = g.constant(f.clone()).unwrap();
    let out = forward_vars(&mut g, &bound, cfg, mv, fv).unwrap();
    let lambda = T::from_f64_lossy(0.05);
    let terms = loss_with(&mut g, fv, out.warped, out.final_field, lambda, SmoothReduction::Sum).unwrap();
    (g, bound, terms.total)
}

/// 32-bit analytic parameter gradients of a small model on a 32x32 pair
/// against 64-bit central differences; returns the norm-wise relative error.
pub fn model_error(variant: Variant) -> f64 {
    let blob = |cy: f64, cx: f64| {
        Array::<f64>::from_fn(&[1, 32, 32], |i| {
            let (y, x) = ((i / 32) as f64, (i % 32) as f64);
            (-((y - cy).powi(2) + (x - cx).powi(2)) / 40.0).exp() + 0.2 * (0.3 * x).sin() * (0.2 * y).cos()
        })
    };
    let (m64, f64_) = (blob(14.0, 15.0), blob(17.0, 13.0));
    let (m32, f32_) = (m64.cast::<f32>(), f64_.cast::<f32>());
    let cfg = tiny_model(variant);
    let p32 = randomized_heads(&cfg, 7);
    let (g, bound, loss) = model_loss(&cfg, &p32, &m32, &f32_);
    let mut grads = g.backward(loss).unwrap();
    let analytic = bound.gradients(&g, &mut grads);
    let p64: ModelParams<f64> = p32.cast();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (name, value) in p64.iter() {
        a.extend(analytic[name].data().iter().map(|&v| v as f64));
        n.extend(fd_grad(value, 1e-5, |probe| {
            let mut q = p64.clone();
            *q.get_mut(name).unwrap() = probe.clone();
            let (g, _, l) = model_loss(&cfg, &q, &m64, &f64_);
            g.value(l).data()[0]
        }));
    }
    rel_err(&a, &n)
}
