//! Registration networks: the pyramidal residual model and its ablations.
//!
//! | variant    | pyramid              | per-level input                          | field combination        |
//! |------------|----------------------|------------------------------------------|--------------------------|
//! | `prdfe`    | shared learned       | fixed features, warped moving features   | scaled residual sum      |
//! | `iprdfe`   | average-pooled image | fixed image, warped moving image         | scaled residual sum      |
//! | `pdfe`     | shared learned       | fixed, unwarped moving, coarser estimate | finest prediction only   |
//! | `baseline` | U-Net on both images | n/a                                      | single finest prediction |
//!
//! Every field head is a zero-initialized convolution, so a fresh model
//! predicts the zero field and leaves the moving image untouched.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{add_conv, conv, conv_act, conv_name, encode_vars, init_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::field::{accumulate_vars, level_extent, upsample_scale_var, ResidualFieldSet};
use crate::params::{BoundParams, ModelParams};
use crate::sampler::DisplacementField;
use crate::tensor::{check_same_shape, Array, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Prdfe,
    Iprdfe,
    Pdfe,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Pdfe, Variant::Iprdfe, Variant::Prdfe];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Prdfe => "prdfe",
            Variant::Iprdfe => "iprdfe",
            Variant::Pdfe => "pdfe",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; valid variants: prdfe, pdfe, iprdfe, baseline")))
    }
}

impl serde::Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    /// Width of the per-level estimators (or U-Net decoder stages), fine to coarse.
    pub decoder: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Prdfe,
            encoder: EncoderConfig::default(),
            decoder: vec![16, 24, 32, 32, 32],
        }
    }
}

const ENC: &str = "enc";
const EST: &str = "est";
const UNET_ENC: &str = "unet.enc";
const UNET_DEC: &str = "unet.dec";

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.encoder.levels()
    }

    pub fn ndim(&self) -> usize {
        self.encoder.ndim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.len() != self.levels() {
            return Err(Error::Config(format!(
                "decoder widths ({}) must match encoder levels ({})",
                self.decoder.len(),
                self.levels()
            )));
        }
        if self.decoder.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }

    fn estimator_inputs(&self, level: usize) -> usize {
        let c = self.encoder.channels[level - 1];
        match self.variant {
            Variant::Prdfe => 2 * c,
            Variant::Iprdfe => 2,
            Variant::Pdfe if level < self.levels() => 2 * c + self.ndim(),
            Variant::Pdfe => 2 * c,
            Variant::Baseline => unreachable!("baseline has no per-level estimators"),
        }
    }

    /// Fresh parameters; field heads are zero so the initial prediction is the identity map.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let e = &self.encoder;
        let d = self.ndim();
        match self.variant {
            Variant::Baseline => {
                init_encoder(&mut p, e, UNET_ENC, 2, &mut rng)?;
                let k = self.levels();
                for level in (1..=k).rev() {
                    let w = self.decoder[level - 1];
                    let cin = if level == k {
                        e.channels[k - 1]
                    } else {
                        self.decoder[level] + e.channels[level - 1]
                    };
                    add_conv(&mut p, &conv_name(UNET_DEC, level, 0), e.kernel_shape(w, cin), false, &mut rng)?;
                    add_conv(&mut p, &conv_name(UNET_DEC, level, 1), e.kernel_shape(w, w), false, &mut rng)?;
                }
                add_conv(&mut p, "unet.head", e.kernel_shape(d, self.decoder[0]), true, &mut rng)?;
            }
            variant => {
                if variant != Variant::Iprdfe {
                    init_encoder(&mut p, e, ENC, 1, &mut rng)?;
                }
                for level in 1..=self.levels() {
                    let w = self.decoder[level - 1];
                    let cin = self.estimator_inputs(level);
                    add_conv(&mut p, &conv_name(EST, level, 0), e.kernel_shape(w, cin), false, &mut rng)?;
                    add_conv(&mut p, &conv_name(EST, level, 1), e.kernel_shape(w, w), false, &mut rng)?;
                    add_conv(&mut p, &format!("{EST}.l{level}.head"), e.kernel_shape(d, w), true, &mut rng)?;
                }
            }
        }
        Ok(p)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `(level, residual)` pairs in estimation order (coarse to fine).
    pub residuals: Vec<(usize, Var)>,
    /// Per-level field used at that level: the warping field for residual
    /// variants, the level prediction for `pdfe`.
    pub level_fields: Vec<(usize, Var)>,
    /// Estimator input at each level.
    pub level_inputs: Vec<(usize, Var)>,
    pub final_field: Var,
    pub warped: Var,
}

fn estimator<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, level: usize, input: Var) -> Result<Var> {
    let k = cfg.encoder.kernel;
    let h = conv_act(g, p, &conv_name(EST, level, 0), input, 1, k)?;
    let h = conv_act(g, p, &conv_name(EST, level, 1), h, 1, k)?;
    conv(g, p, &format!("{EST}.l{level}.head"), h, 1, k)
}

fn image_pyramid<T: Real>(g: &mut Graph<T>, image: Var, levels: usize) -> Result<Vec<Var>> {
    let mut out = vec![image];
    for level in 2..=levels {
        out.push(g.downsample_avg(image, 1 << (level - 1))?);
    }
    Ok(out)
}

fn check_pair<T: Real>(g: &Graph<T>, cfg: &ModelConfig, moving: Var, fixed: Var) -> Result<()> {
    let (m, f) = (g.value(moving), g.value(fixed));
    check_same_shape(m.shape(), f.shape(), "moving/fixed images")?;
    if m.channels() != 1 {
        return Err(Error::shape(format!("images must have one channel, got {:?}", m.shape())));
    }
    cfg.encoder.check_extent(m.spatial())
}

/// Builds the forward pass of `cfg.variant` on `(1, spatial...)` images.
pub fn forward_vars<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    moving: Var,
    fixed: Var,
) -> Result<ForwardVars> {
    check_pair(g, cfg, moving, fixed)?;
    match cfg.variant {
        Variant::Prdfe => {
            let fm = encode_vars(g, p, &cfg.encoder, ENC, moving)?;
            let ff = encode_vars(g, p, &cfg.encoder, ENC, fixed)?;
            residual_pass(g, p, cfg, &fm, &ff, moving)
        }
        Variant::Iprdfe => {
            let fm = image_pyramid(g, moving, cfg.levels())?;
            let ff = image_pyramid(g, fixed, cfg.levels())?;
            residual_pass(g, p, cfg, &fm, &ff, moving)
        }
        Variant::Pdfe => total_field_pass(g, p, cfg, moving, fixed),
        Variant::Baseline => unet_pass(g, p, cfg, moving, fixed),
    }
}

/// Coarse-to-fine: warp level-k moving features by the scaled sum of all
/// coarser residuals, then estimate the level-k residual.
fn residual_pass<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    moving_pyr: &[Var],
    fixed_pyr: &[Var],
    moving: Var,
) -> Result<ForwardVars> {
    let levels = cfg.levels();
    let finest = g.value(moving).spatial().to_vec();
    let mut residuals = Vec::with_capacity(levels);
    let mut level_fields = Vec::with_capacity(levels);
    let mut level_inputs = Vec::with_capacity(levels);
    for k in (1..=levels).rev() {
        let extent = level_extent(&finest, k)?;
        let warp_field = accumulate_vars(g, &residuals, k, levels, &extent)?;
        let warped = g.warp(moving_pyr[k - 1], warp_field)?;
        let input = g.concat(fixed_pyr[k - 1], warped)?;
        let residual = estimator(g, p, cfg, k, input)?;
        level_fields.push((k, warp_field));
        level_inputs.push((k, input));
        residuals.push((k, residual));
    }
    let final_field = accumulate_vars(g, &residuals, 1, levels, &finest)?;
    let warped = g.warp(moving, final_field)?;
    Ok(ForwardVars {
        residuals,
        level_fields,
        level_inputs,
        final_field,
        warped,
    })
}

/// Each level predicts a total field from unwarped features plus the
/// rescaled coarser prediction; nothing is warped or summed.
fn total_field_pass<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, moving: Var, fixed: Var) -> Result<ForwardVars> {
    let levels = cfg.levels();
    let fm = encode_vars(g, p, &cfg.encoder, ENC, moving)?;
    let ff = encode_vars(g, p, &cfg.encoder, ENC, fixed)?;
    let mut level_fields = Vec::with_capacity(levels);
    let mut level_inputs = Vec::with_capacity(levels);
    let mut coarser: Option<Var> = None;
    for k in (1..=levels).rev() {
        let mut input = g.concat(ff[k - 1], fm[k - 1])?;
        if let Some(c) = coarser {
            let up = upsample_scale_var(g, c, k + 1, k)?;
            input = g.concat(input, up)?;
        }
        let pred = estimator(g, p, cfg, k, input)?;
        level_fields.push((k, pred));
        level_inputs.push((k, input));
        coarser = Some(pred);
    }
    let final_field = coarser.expect("at least two levels");
    let warped = g.warp(moving, final_field)?;
    Ok(ForwardVars {
        residuals: vec![(1, final_field)],
        level_fields,
        level_inputs,
        final_field,
        warped,
    })
}

/// Encoder-decoder over the stacked pair predicting one finest-level field.
fn unet_pass<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, moving: Var, fixed: Var) -> Result<ForwardVars> {
    let levels = cfg.levels();
    let k = cfg.encoder.kernel;
    let pair = g.concat(moving, fixed)?;
    let skips = encode_vars(g, p, &cfg.encoder, UNET_ENC, pair)?;
    let mut x = skips[levels - 1];
    for level in (1..=levels).rev() {
        if level < levels {
            let up = g.upsample_linear(x, 2)?;
            x = g.concat(up, skips[level - 1])?;
        }
        x = conv_act(g, p, &conv_name(UNET_DEC, level, 0), x, 1, k)?;
        x = conv_act(g, p, &conv_name(UNET_DEC, level, 1), x, 1, k)?;
    }
    let final_field = conv(g, p, "unet.head", x, 1, k)?;
    let warped = g.warp(moving, final_field)?;
    Ok(ForwardVars {
        residuals: vec![(1, final_field)],
        level_fields: vec![(1, final_field)],
        level_inputs: vec![(1, pair)],
        final_field,
        warped,
    })
}

/// Value-level result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult<T> {
    pub residuals: ResidualFieldSet<T>,
    /// Fine to coarse; see [`ForwardVars::level_fields`].
    pub level_fields: Vec<DisplacementField<T>>,
    pub final_field: DisplacementField<T>,
    pub warped: Array<T>,
}

impl<T: Real> ForwardResult<T> {
    fn collect(g: &Graph<T>, vars: &ForwardVars) -> Result<Self> {
        let finest = g.value(vars.warped).spatial().to_vec();
        let coarsest = vars.residuals.iter().map(|&(l, _)| l).max().unwrap_or(1);
        let mut residuals = ResidualFieldSet::new(&finest, coarsest)?;
        for &(level, v) in &vars.residuals {
            residuals.set(DisplacementField::new(level, g.value(v).clone())?)?;
        }
        let mut level_fields = vars
            .level_fields
            .iter()
            .map(|&(level, v)| DisplacementField::new(level, g.value(v).clone()))
            .collect::<Result<Vec<_>>>()?;
        level_fields.sort_by_key(DisplacementField::level);
        Ok(ForwardResult {
            residuals,
            level_fields,
            final_field: DisplacementField::new(1, g.value(vars.final_field).clone())?,
            warped: g.value(vars.warped).clone(),
        })
    }
}

/// Runs `cfg.variant` on a moving/fixed pair of `(1, spatial...)` images.
pub fn forward<T: Real>(moving: &Array<T>, fixed: &Array<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardResult<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let m = g.constant(moving.clone())?;
    let f = g.constant(fixed.clone())?;
    let vars = forward_vars(&mut g, &bound, cfg, m, f)?;
    ForwardResult::collect(&g, &vars)
}

fn forward_as<T: Real>(
    variant: Variant,
    moving: &Array<T>,
    fixed: &Array<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ForwardResult<T>> {
    if cfg.variant != variant {
        return Err(Error::Config(format!(
            "config describes variant {}, called as {variant}",
            cfg.variant
        )));
    }
    forward(moving, fixed, params, cfg)
}

pub fn prdfe_forward<T: Real>(moving: &Array<T>, fixed: &Array<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardResult<T>> {
    forward_as(Variant::Prdfe, moving, fixed, params, cfg)
}

pub fn iprdfe_forward<T: Real>(moving: &Array<T>, fixed: &Array<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardResult<T>> {
    forward_as(Variant::Iprdfe, moving, fixed, params, cfg)
}

pub fn pdfe_forward<T: Real>(moving: &Array<T>, fixed: &Array<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardResult<T>> {
    forward_as(Variant::Pdfe, moving, fixed, params, cfg)
}

pub fn baseline_unet_forward<T: Real>(moving: &Array<T>, fixed: &Array<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardResult<T>> {
    forward_as(Variant::Baseline, moving, fixed, params, cfg)
}
