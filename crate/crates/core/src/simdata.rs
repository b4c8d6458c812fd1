//! Simulated registration benchmark: textured geometric figures deformed by
//! known affine + smooth nonlinear displacement fields.
//!
//! Each sample holds a moving image, the fixed image `warp(moving, truth)`,
//! the ground-truth field and both foreground masks. Samples are a pure
//! function of `(dataset seed, index)`.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::nonpositive_jacobian_fraction;
use crate::io::{read_array, write_bytes, encode_array};
use crate::resample::Resampler;
use crate::sampler::{warp, warp_labels, DisplacementField, Labels};
use crate::tensor::Array;

pub const IMAGE_SIZE: usize = 128;
pub const NUM_SHAPES: u32 = 10;
pub const SHAPE_NAMES: [&str; 10] = [
    "circle", "ellipse", "square", "rectangle", "triangle", "pentagon", "hexagon", "star", "annulus", "cross",
];

/// Deformation magnitude band by mean displacement length (voxels):
/// small `< 4`, median `4..10`, large `> 10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnitude {
    Small,
    Median,
    Large,
}

impl Magnitude {
    pub const ALL: [Magnitude; 3] = [Magnitude::Small, Magnitude::Median, Magnitude::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            Magnitude::Small => "small",
            Magnitude::Median => "median",
            Magnitude::Large => "large",
        }
    }

    /// Target range for the mean displacement length.
    pub fn band(self) -> (f64, f64) {
        match self {
            Magnitude::Small => (1.5, 4.0),
            Magnitude::Median => (4.0, 10.0),
            Magnitude::Large => (10.0, 14.0),
        }
    }

    pub fn classify(mean_norm: f64) -> Self {
        if mean_norm < 4.0 {
            Magnitude::Small
        } else if mean_norm <= 10.0 {
            Magnitude::Median
        } else {
            Magnitude::Large
        }
    }
}

impl fmt::Display for Magnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Magnitude {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Magnitude::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown magnitude class {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub moving: Array<f32>,
    pub fixed: Array<f32>,
    pub truth: DisplacementField<f32>,
    pub moving_mask: Labels,
    pub fixed_mask: Labels,
    pub shape_class: u32,
    pub magnitude: Magnitude,
    pub seed: u64,
}

/// Derives an independent stream seed from a base seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth random scalar grid in `[-1, 1]`: coarse uniform noise, upsampled.
fn smooth_noise(rng: &mut impl Rng, coarse: usize, size: usize) -> Vec<f64> {
    let factor = size / coarse;
    let grid = Array::<f64>::from_fn(&[1, coarse, coarse], |_| rng.gen_range(-1.0..1.0));
    let up = Resampler::upsample(&[coarse, coarse], factor)
        .expect("power-of-two factor")
        .forward(&grid);
    let m = up.max_abs().max(1e-12);
    up.data().iter().map(|v| v / m).collect()
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Point-in-polygon by crossing number.
fn in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular_polygon(n: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn star(radius: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { radius } else { 0.45 * radius };
            let a = PI * i as f64 / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Indicator of one figure in its own (centered, unrotated) frame.
enum Figure {
    Ellipse { a: f64, b: f64 },
    Box { hx: f64, hy: f64 },
    Polygon(Vec<(f64, f64)>),
    Annulus { outer: f64, inner: f64 },
    Cross { half: f64, arm: f64 },
}

impl Figure {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Figure::Ellipse { a, b } => (x / a).powi(2) + (y / b).powi(2) <= 1.0,
            Figure::Box { hx, hy } => x.abs() <= *hx && y.abs() <= *hy,
            Figure::Polygon(p) => in_polygon(x, y, p),
            Figure::Annulus { outer, inner } => {
                let r2 = x * x + y * y;
                r2 <= outer * outer && r2 >= inner * inner
            }
            Figure::Cross { half, arm } => {
                (x.abs() <= *half && y.abs() <= arm / 2.0) || (y.abs() <= *half && x.abs() <= arm / 2.0)
            }
        }
    }

    fn random(class: u32, rng: &mut impl Rng) -> Self {
        match class {
            0 => {
                let r = rng.gen_range(20.0..34.0);
                Figure::Ellipse { a: r, b: r }
            }
            1 => Figure::Ellipse {
                a: rng.gen_range(26.0..42.0),
                b: rng.gen_range(15.0..25.0),
            },
            2 => {
                let h = rng.gen_range(18.0..32.0);
                Figure::Box { hx: h, hy: h }
            }
            3 => Figure::Box {
                hx: rng.gen_range(24.0..40.0),
                hy: rng.gen_range(12.0..22.0),
            },
            4 => Figure::Polygon(regular_polygon(3, rng.gen_range(30.0..46.0))),
            5 => Figure::Polygon(regular_polygon(5, rng.gen_range(24.0..40.0))),
            6 => Figure::Polygon(regular_polygon(6, rng.gen_range(24.0..38.0))),
            7 => Figure::Polygon(star(rng.gen_range(32.0..48.0))),
            8 => {
                let outer = rng.gen_range(26.0..40.0);
                Figure::Annulus {
                    outer,
                    inner: outer * rng.gen_range(0.4..0.6),
                }
            }
            _ => {
                let half = rng.gen_range(28.0..44.0);
                Figure::Cross {
                    half,
                    arm: half * rng.gen_range(0.6..0.8),
                }
            }
        }
    }
}

/// Foreground texture in `[-1, 1]`.
fn texture(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => {
            let period = rng.gen_range(10.0..20.0);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (s, c) = theta.sin_cos();
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    (2.0 * PI * (c * x + s * y) / period + phase).sin()
                })
                .collect()
        }
        1 => {
            let period = rng.gen_range(14.0..26.0);
            let theta = rng.gen_range(0.0..PI / 2.0);
            (0..n * n)
                .map(|i| {
                    let (x, y) = rotate((i % n) as f64, (i / n) as f64, theta);
                    let v = (2.0 * PI * x / period).sin() * (2.0 * PI * y / period).sin();
                    (3.0 * v).tanh() / 3f64.tanh()
                })
                .collect()
        }
        _ => smooth_noise(rng, 16, n),
    }
}

/// One textured figure of class `class_id` (0..9) with its foreground mask.
pub fn generate_shape(class_id: u32, seed: u64) -> Result<(Array<f32>, Labels)> {
    if class_id >= NUM_SHAPES {
        return Err(Error::invalid(format!(
            "shape class must be in 0..{NUM_SHAPES}, got {class_id}"
        )));
    }
    let n = IMAGE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5_4A9E));
    let figure = Figure::random(class_id, &mut rng);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let center = (
        n as f64 / 2.0 + rng.gen_range(-8.0..8.0),
        n as f64 / 2.0 + rng.gen_range(-8.0..8.0),
    );
    let tex = texture(&mut rng, n);
    let base = rng.gen_range(0.55..0.7);
    let contrast = rng.gen_range(0.2..0.3);
    let floor = smooth_noise(&mut rng, 16, n);
    const SS: usize = 4;
    let mut img = vec![0f32; n * n];
    let mut mask = vec![0u32; n * n];
    for (i, (px, m)) in img.iter_mut().zip(mask.iter_mut()).enumerate() {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let mut hits = 0;
        for sy in 0..SS {
            for sx in 0..SS {
                let dx = x + (sx as f64 + 0.5) / SS as f64 - 0.5 - center.0;
                let dy = y + (sy as f64 + 0.5) / SS as f64 - 0.5 - center.1;
                let (u, v) = rotate(dx, dy, -angle);
                hits += figure.contains(u, v) as usize;
            }
        }
        let coverage = hits as f64 / (SS * SS) as f64;
        let bg = 0.1 * (floor[i] + 1.0);
        let fg = base + contrast * tex[i];
        *px = (bg + coverage * (fg - bg)).clamp(0.0, 1.0) as f32;
        *m = (coverage >= 0.5) as u32;
    }
    Ok((
        Array::from_vec(&[1, n, n], img)?,
        Labels::new(&[n, n], mask)?,
    ))
}

fn mean_norm(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>() / u.len() as f64
}

/// One candidate field: affine part plus smooth nonlinear part, with the
/// translation length solved so the mean displacement hits `target`.
fn candidate_field(magnitude: Magnitude, rng: &mut impl Rng, target: f64) -> (Vec<f64>, Vec<f64>) {
    let n = IMAGE_SIZE;
    let (rot, scale, shear, amp) = match magnitude {
        Magnitude::Small => (3f64, 0.03, 0.02, 1.5),
        Magnitude::Median => (6.0, 0.05, 0.04, 3.0),
        Magnitude::Large => (9.0, 0.07, 0.05, 4.0),
    };
    let theta = rng.gen_range(-rot..rot).to_radians();
    let s = 1.0 + rng.gen_range(-scale..scale);
    let sh = rng.gen_range(-shear..shear);
    let (sin, cos) = theta.sin_cos();
    // linear map A = R * S * H acting on (y, x) offsets from the centre
    let a = [[s * cos, s * (cos * sh - sin)], [s * sin, s * (sin * sh + cos)]];
    let ny = smooth_noise(rng, 4, n);
    let nx = smooth_noise(rng, 4, n);
    let (ay, ax) = (rng.gen_range(0.5..1.0) * amp, rng.gen_range(0.5..1.0) * amp);
    let c = (n as f64 - 1.0) / 2.0;
    let mut by = vec![0.0; n * n];
    let mut bx = vec![0.0; n * n];
    for i in 0..n * n {
        let (py, px) = ((i / n) as f64 - c, (i % n) as f64 - c);
        by[i] = a[0][0] * py + a[0][1] * px - py + ay * ny[i];
        bx[i] = a[1][0] * py + a[1][1] * px - px + ax * nx[i];
    }
    let base = mean_norm(&by, &bx);
    if base >= target {
        let k = target / base;
        by.iter_mut().chain(bx.iter_mut()).for_each(|v| *v *= k);
        return (by, bx);
    }
    let dir = rng.gen_range(0.0..2.0 * PI);
    let (dy, dx) = (dir.sin(), dir.cos());
    let shifted = |t: f64| {
        let y: Vec<f64> = by.iter().map(|v| v + t * dy).collect();
        let x: Vec<f64> = bx.iter().map(|v| v + t * dx).collect();
        (y, x)
    };
    let (mut lo, mut hi) = (0.0, target + base);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (y, x) = shifted(mid);
        if mean_norm(&y, &x) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    shifted(0.5 * (lo + hi))
}

/// Fold-free ground-truth field whose mean displacement length lies in the class band.
pub fn generate_field(magnitude: Magnitude, seed: u64) -> Result<DisplacementField<f32>> {
    let n = IMAGE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF1E1D));
    let (lo, hi) = magnitude.band();
    for _ in 0..64 {
        let target = rng.gen_range(lo + 0.05..hi - 0.05);
        let (y, x) = candidate_field(magnitude, &mut rng, target);
        let data: Vec<f32> = y.iter().chain(&x).map(|&v| v as f32).collect();
        let field = DisplacementField::new(1, Array::from_vec(&[2, n, n], data)?)?;
        if nonpositive_jacobian_fraction(&field) == 0.0 && Magnitude::classify(field.mean_norm()) == magnitude {
            return Ok(field);
        }
    }
    Err(Error::invalid(format!(
        "could not draw a fold-free {magnitude} field for seed {seed}"
    )))
}

/// Sample `index` of the dataset with base seed `seed`.
///
/// Shape classes cycle through all ten figures and magnitude classes through
/// the three bands, so any 30 consecutive samples cover every combination.
pub fn generate_sample(seed: u64, index: u64) -> Result<SimSample> {
    let sample_seed = mix_seed(seed, index);
    let shape_class = (index % NUM_SHAPES as u64) as u32;
    let magnitude = Magnitude::ALL[(index % 3) as usize];
    let (moving, moving_mask) = generate_shape(shape_class, sample_seed)?;
    let truth = generate_field(magnitude, sample_seed)?;
    let fixed = warp(&moving, &truth)?;
    let fixed_mask = warp_labels(&moving_mask, &truth)?;
    Ok(SimSample {
        moving,
        fixed,
        truth,
        moving_mask,
        fixed_mask,
        shape_class,
        magnitude,
        seed: sample_seed,
    })
}

/// Channels of a stored sample: moving, fixed, truth (2), moving mask, fixed mask.
pub const SAMPLE_CHANNELS: usize = 6;

impl SimSample {
    /// Packs the sample into one `(6, 128, 128)` array.
    pub fn to_array(&self) -> Result<Array<f32>> {
        let mask = |l: &Labels| -> Result<Array<f32>> {
            Array::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], l.data().iter().map(|&v| v as f32).collect())
        };
        self.moving
            .concat_channels(&self.fixed)?
            .concat_channels(self.truth.vectors())?
            .concat_channels(&mask(&self.moving_mask)?)?
            .concat_channels(&mask(&self.fixed_mask)?)
    }

    pub fn from_array(a: &Array<f32>, shape_class: u32, magnitude: Magnitude, seed: u64) -> Result<Self> {
        if a.shape() != [SAMPLE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Format(format!("sample array has shape {:?}", a.shape())));
        }
        let mask = |c: usize| -> Result<Labels> {
            let ch = a.slice_channels(c, c + 1)?;
            Labels::new(&[IMAGE_SIZE, IMAGE_SIZE], ch.data().iter().map(|&v| v as u32).collect())
        };
        Ok(SimSample {
            moving: a.slice_channels(0, 1)?,
            fixed: a.slice_channels(1, 2)?,
            truth: DisplacementField::new(1, a.slice_channels(2, 4)?)?,
            moving_mask: mask(4)?,
            fixed_mask: mask(5)?,
            shape_class,
            magnitude,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line; `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub split: Split,
    pub class: u32,
    pub magnitude: String,
    pub seed: u64,
}

impl ManifestRow {
    pub fn pair_id(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes `n_train + n_test` samples and `manifest.csv` into `out_dir`.
/// Test samples continue the index sequence after the training samples.
pub fn generate_dataset(n_train: usize, n_test: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let out_dir = out_dir.as_ref();
    let mut rows = Vec::with_capacity(n_train + n_test);
    for index in 0..n_train + n_test {
        let (split, name) = if index < n_train {
            (Split::Train, format!("train_{index:05}.prdf"))
        } else {
            (Split::Test, format!("test_{:05}.prdf", index - n_train))
        };
        let s = generate_sample(seed, index as u64)?;
        write_bytes(&out_dir.join(&name), &encode_array(&s.to_array()?))?;
        rows.push(ManifestRow {
            path: name,
            split,
            class: s.shape_class,
            magnitude: s.magnitude.to_string(),
            seed: s.seed,
        });
    }
    write_manifest(out_dir.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["path", "split", "class", "magnitude", "seed"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let bytes = crate::io::read_bytes(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Resolves a manifest row's file relative to the manifest.
pub fn sample_path(manifest: &Path, row: &ManifestRow) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(&row.path)
}

pub fn load_sample(manifest: &Path, row: &ManifestRow) -> Result<SimSample> {
    let a = read_array(sample_path(manifest, row))?.into_typed::<f32>()?;
    SimSample::from_array(&a, row.class, row.magnitude.parse()?, row.seed)
}

/// Loads every sample of `split` from a manifest.
pub fn load_split(manifest: impl AsRef<Path>, split: Split) -> Result<Vec<SimSample>> {
    let manifest = manifest.as_ref();
    read_manifest(manifest)?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_sample(manifest, r))
        .collect()
}
