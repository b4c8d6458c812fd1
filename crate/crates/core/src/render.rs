//! PNG previews of images and 2D displacement fields.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::sampler::DisplacementField;
use crate::tensor::{Array, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Regular grid lines carried to `p + u(p)`.
    Grid,
    /// Heat map of `|u|`.
    Magnitude,
    /// Subsampled arrows from `p` to `p + u(p)`.
    Quiver,
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(RenderMode::Grid),
            "magnitude" => Ok(RenderMode::Magnitude),
            "quiver" => Ok(RenderMode::Quiver),
            _ => Err(Error::Config(format!("unknown render mode {s:?}; valid modes: grid, magnitude, quiver"))),
        }
    }
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RenderMode::Grid => "grid",
            RenderMode::Magnitude => "magnitude",
            RenderMode::Quiver => "quiver",
        })
    }
}

/// Output pixels per field voxel.
const ZOOM: usize = 4;
const SPACING: usize = 8;

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Grayscale PNG of channel 0 of a 2D `(C, H, W)` image, clamped to `[0, 1]`.
pub fn write_image_png<T: Real>(img: &Array<T>, path: impl AsRef<Path>) -> Result<()> {
    let [h, w] = match img.spatial() {
        &[h, w] => [h, w],
        s => return Err(Error::shape(format!("PNG export needs a 2D image, got {s:?}"))),
    };
    let buf: Vec<u8> = img.data()[..h * w]
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches extents");
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    gray.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            img: RgbImage::from_pixel((w * ZOOM) as u32, (h * ZOOM) as u32, Rgb([255, 255, 255])),
        }
    }

    /// Line between two voxel-space points `(y, x)`.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let z = ZOOM as f64;
        let (ay, ax) = ((a.0 + 0.5) * z, (a.1 + 0.5) * z);
        let (by, bx) = ((b.0 + 0.5) * z, (b.1 + 0.5) * z);
        let n = ((by - ay).abs().max((bx - ax).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (y, x) = (ay + t * (by - ay), ax + t * (bx - ax));
            if y >= 0.0 && x >= 0.0 && (y as u32) < self.img.height() && (x as u32) < self.img.width() {
                self.img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn components<T: Real>(field: &DisplacementField<T>) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let [h, w] = match field.spatial() {
        &[h, w] => [h, w],
        s => return Err(Error::shape(format!("rendering needs a 2D field, got {s:?}"))),
    };
    let d = field.vectors().data();
    let uy = d[..h * w].iter().map(|v| v.as_f64()).collect();
    let ux = d[h * w..].iter().map(|v| v.as_f64()).collect();
    Ok((h, w, uy, ux))
}

/// Maps `t` in `[0, 1]` to a dark-blue → teal → yellow ramp.
fn heat(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 3] = [[30.0, 20.0, 90.0], [30.0, 150.0, 140.0], [250.0, 230.0, 40.0]];
    let t = t.clamp(0.0, 1.0) * 2.0;
    let i = (t as usize).min(1);
    let f = t - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

pub fn render_field<T: Real>(field: &DisplacementField<T>, path: impl AsRef<Path>, mode: RenderMode) -> Result<()> {
    let (h, w, uy, ux) = components(field)?;
    let at = |y: usize, x: usize| (y as f64 + uy[y * w + x], x as f64 + ux[y * w + x]);
    let img = match mode {
        RenderMode::Grid => {
            let mut c = Canvas::new(h, w);
            let ink = Rgb([20, 20, 20]);
            for y in (0..h).step_by(SPACING).chain([h - 1]) {
                for x in 1..w {
                    c.line(at(y, x - 1), at(y, x), ink);
                }
            }
            for x in (0..w).step_by(SPACING).chain([w - 1]) {
                for y in 1..h {
                    c.line(at(y - 1, x), at(y, x), ink);
                }
            }
            c.img
        }
        RenderMode::Magnitude => {
            let mag: Vec<f64> = uy.iter().zip(&ux).map(|(a, b)| a.hypot(*b)).collect();
            let top = mag.iter().cloned().fold(0.0, f64::max).max(1e-12);
            RgbImage::from_fn((w * ZOOM) as u32, (h * ZOOM) as u32, |x, y| {
                heat(mag[(y as usize / ZOOM) * w + x as usize / ZOOM] / top)
            })
        }
        RenderMode::Quiver => {
            let mut c = Canvas::new(h, w);
            let ink = Rgb([180, 30, 30]);
            for y in (SPACING / 2..h).step_by(SPACING) {
                for x in (SPACING / 2..w).step_by(SPACING) {
                    let p = (y as f64, x as f64);
                    let q = at(y, x);
                    c.line(p, q, ink);
                    let (dy, dx) = (q.0 - p.0, q.1 - p.1);
                    let len = dy.hypot(dx);
                    if len > 1e-6 {
                        let s = 0.3 * len.min(3.0) / len;
                        for sign in [1.0, -1.0] {
                            let (hy, hx) = (-dy * s + sign * dx * s * 0.6, -dx * s - sign * dy * s * 0.6);
                            c.line(q, (q.0 + hy, q.1 + hx), ink);
                        }
                    }
                    c.img.put_pixel((x * ZOOM + ZOOM / 2) as u32, (y * ZOOM + ZOOM / 2) as u32, Rgb([0, 0, 0]));
                }
            }
            c.img
        }
    };
    save(&img, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dark_rows(img: &RgbImage) -> Vec<u32> {
        (0..img.height())
            .filter(|&y| (0..img.width()).filter(|&x| img.get_pixel(x, y)[0] < 128).count() > 40)
            .collect()
    }

    #[test]
    fn zero_field_grid_is_regular_and_translation_shifts_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        render_field(&DisplacementField::<f32>::zeros(1, &[16, 16]), &p, RenderMode::Grid).unwrap();
        let rows = dark_rows(&image::open(&p).unwrap().to_rgb8());
        assert_eq!(rows, vec![2, 34, 62]);
        let shifted = DisplacementField::<f32>::constant(1, &[16, 16], &[2.0, 0.0]).unwrap();
        render_field(&shifted, &p, RenderMode::Grid).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        // rows move down by 2 voxels; the last one leaves the canvas
        let moved: Vec<u32> = (0..img.height())
            .filter(|&y| (0..16 * ZOOM as u32).filter(|&x| img.get_pixel(x, y)[0] < 128).count() > 40)
            .collect();
        assert!(moved.contains(&10) && moved.contains(&42), "{moved:?}");
    }

    #[test]
    fn modes_parse() {
        assert_eq!("quiver".parse::<RenderMode>().unwrap(), RenderMode::Quiver);
        assert!("arrows".parse::<RenderMode>().is_err());
    }
}
