//! Shared-weight pyramidal feature descriptor.
//!
//! One parameter set maps an image to `K` feature grids. Level 1 is built by
//! stride-1 convolutions at input resolution; every further level starts
//! with a stride-2 convolution of the previous level, halving each extent.
//! Every convolution is followed by a leaky ReLU.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::level_extent;
use crate::params::{init_kernel, BoundParams, ModelParams};
use crate::tensor::{Array, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Feature channels per level, fine to coarse; its length is `K`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Spatial dimensionality (1, 2 or 3).
    pub ndim: usize,
    /// Stride-1 convolutions after each level's entry convolution.
    pub depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 24, 32, 32, 32],
            kernel: 3,
            ndim: 2,
            depth: 1,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "encoder needs at least 2 levels, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(1..=3).contains(&self.ndim) {
            return Err(Error::Config(format!("ndim must be 1, 2 or 3, got {}", self.ndim)));
        }
        Ok(())
    }

    /// Checks that an image with these spatial extents can be encoded.
    pub fn check_extent(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.ndim {
            return Err(Error::shape(format!(
                "expected {} spatial axes, got {spatial:?}",
                self.ndim
            )));
        }
        level_extent(spatial, self.levels()).map(|_| ())
    }

    pub(crate) fn kernel_shape(&self, cout: usize, cin: usize) -> Vec<usize> {
        let mut s = vec![cout, cin];
        s.extend(std::iter::repeat(self.kernel).take(self.ndim));
        s
    }
}

/// Feature grids `FE_1 .. FE_K`, fine to coarse.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Array<T>>,
}

pub(crate) fn conv_name(prefix: &str, level: usize, idx: usize) -> String {
    format!("{prefix}.l{level}.c{idx}")
}

/// Adds a convolution's kernel and zero bias to `params`.
pub(crate) fn add_conv<T: Real>(
    params: &mut ModelParams<T>,
    name: &str,
    shape: Vec<usize>,
    zero: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let cout = shape[0];
    let kernel = if zero {
        Array::zeros(&shape)
    } else {
        init_kernel(&shape, LEAKY_SLOPE, rng)
    };
    params.insert(format!("{name}.w"), kernel)?;
    params.insert(format!("{name}.b"), Array::zeros(&[cout]))
}

/// `conv -> leaky ReLU`, "same" padding.
pub(crate) fn conv_act<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    kernel: usize,
) -> Result<Var> {
    let y = conv(g, p, name, x, stride, kernel)?;
    g.leaky_relu(y, T::from_f64_lossy(LEAKY_SLOPE))
}

pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    kernel: usize,
) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.conv(x, w, b, stride, kernel / 2)
}

/// Registers the encoder parameters under `prefix` for an input with `in_channels` channels.
pub fn init_encoder<T: Real>(
    params: &mut ModelParams<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    in_channels: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut cin = in_channels;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let level = i + 1;
        add_conv(params, &conv_name(prefix, level, 0), cfg.kernel_shape(c, cin), false, rng)?;
        for d in 0..cfg.depth {
            add_conv(params, &conv_name(prefix, level, d + 1), cfg.kernel_shape(c, c), false, rng)?;
        }
        cin = c;
    }
    Ok(())
}

/// Graph form of [`encode`]: returns `FE_1 .. FE_K`.
pub fn encode_vars<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    prefix: &str,
    image: Var,
) -> Result<Vec<Var>> {
    cfg.check_extent(g.value(image).spatial())?;
    let mut levels = Vec::with_capacity(cfg.levels());
    let mut x = image;
    for level in 1..=cfg.levels() {
        let stride = if level == 1 { 1 } else { 2 };
        x = conv_act(g, p, &conv_name(prefix, level, 0), x, stride, cfg.kernel)?;
        for d in 0..cfg.depth {
            x = conv_act(g, p, &conv_name(prefix, level, d + 1), x, 1, cfg.kernel)?;
        }
        levels.push(x);
    }
    Ok(levels)
}

/// Encodes a `(C, spatial...)` image into its feature pyramid.
pub fn encode<T: Real>(image: &Array<T>, params: &ModelParams<T>, cfg: &EncoderConfig, prefix: &str) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let x = g.constant(image.clone())?;
    let vars = encode_vars(&mut g, &bound, cfg, prefix, x)?;
    Ok(FeaturePyramid {
        levels: vars.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(channels: Vec<usize>) -> (EncoderConfig, ModelParams<f32>) {
        let cfg = EncoderConfig {
            channels,
            ..EncoderConfig::default()
        };
        let mut p = ModelParams::new();
        init_encoder(&mut p, &cfg, "enc", 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (cfg, p)
    }

    #[test]
    fn level_extents_halve() {
        let (cfg, p) = setup(vec![2, 3, 3, 3, 3]);
        let img = Array::from_fn(&[1, 128, 128], |i| (i % 17) as f32 / 17.0);
        let pyr = encode(&img, &p, &cfg, "enc").unwrap();
        let extents: Vec<usize> = pyr.levels.iter().map(|l| l.shape()[1]).collect();
        assert_eq!(extents, vec![128, 64, 32, 16, 8]);
        assert_eq!(pyr.levels[0].channels(), 2);
    }

    #[test]
    fn deterministic() {
        let (cfg, p) = setup(vec![4, 4, 4]);
        let img = Array::from_fn(&[1, 16, 16], |i| (i as f32 * 0.1).cos());
        let a = encode(&img, &p, &cfg, "enc").unwrap();
        let b = encode(&img, &p, &cfg, "enc").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_extent_suggests_padding() {
        let (cfg, p) = setup(vec![2, 2, 2]);
        let img = Array::<f32>::zeros(&[1, 18, 16]);
        let err = encode(&img, &p, &cfg, "enc").unwrap_err().to_string();
        assert!(err.contains("pad or crop"), "{err}");
    }

    #[test]
    fn rejects_single_level() {
        let cfg = EncoderConfig {
            channels: vec![4],
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
