//! Registration metrics and per-dataset reports.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{field_mse, nonpositive_jacobian_fraction};
use crate::io::{write_bytes, Checkpoint};
use crate::models::forward;
use crate::sampler::{warp, warp_labels, DisplacementField, Labels};
use crate::simdata::{load_sample, read_manifest, Magnitude, SimSample};
use crate::tensor::Array;

/// `2|A ∩ B| / (|A| + |B|)` for one label; 1 when the label is absent from both.
pub fn dice(a: &Labels, b: &Labels, label: u32) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "label maps differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += (x == label) as usize;
        nb += (y == label) as usize;
        both += (x == label && y == label) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn image_mse(a: &Array<f32>, b: &Array<f32>) -> Result<f64> {
    crate::tensor::check_same_shape(a.shape(), b.shape(), "images")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub pair_id: String,
    pub variant: String,
    pub lambda: f64,
    pub image_mse: f64,
    pub field_mse: Option<f64>,
    /// Foreground dice of the warped moving mask against the fixed mask.
    pub dice: f64,
    pub nonpos_jac_frac: f64,
    pub magnitude: Option<String>,
    pub runtime_ms: f64,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "pair_id",
    "variant",
    "lambda",
    "image_mse",
    "field_mse",
    "dice",
    "nonpos_jac_frac",
    "magnitude",
    "runtime_ms",
];

/// Metrics of a given final field on a sample (runtime left at 0).
pub fn metrics_for_field(sample: &SimSample, field: &DisplacementField<f32>, warped: Option<&Array<f32>>) -> Result<MetricsRecord> {
    let owned;
    let warped = match warped {
        Some(w) => w,
        None => {
            owned = warp(&sample.moving, field)?;
            &owned
        }
    };
    let warped_mask = warp_labels(&sample.moving_mask, field)?;
    Ok(MetricsRecord {
        pair_id: String::new(),
        variant: String::new(),
        lambda: 0.0,
        image_mse: image_mse(warped, &sample.fixed)?,
        field_mse: Some(field_mse(field, &sample.truth)?),
        dice: dice(&warped_mask, &sample.fixed_mask, 1)?,
        nonpos_jac_frac: nonpositive_jacobian_fraction(field),
        magnitude: Some(sample.magnitude.to_string()),
        runtime_ms: 0.0,
    })
}

/// Runs the checkpoint's model on `sample` and scores the result.
pub fn evaluate_pair(sample: &SimSample, ck: &Checkpoint<f32>, pair_id: &str) -> Result<MetricsRecord> {
    let start = Instant::now();
    let out = forward(&sample.moving, &sample.fixed, &ck.params, &ck.config.model)?;
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut rec = metrics_for_field(sample, &out.final_field, Some(&out.warped))?;
    rec.pair_id = pair_id.to_string();
    rec.variant = ck.config.model.variant.to_string();
    rec.lambda = ck.config.lambda;
    rec.runtime_ms = runtime_ms;
    Ok(rec)
}

/// A manifest entry that could not be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub pair_id: String,
    pub magnitude: String,
    pub error: String,
}

/// Outcomes in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub entries: Vec<std::result::Result<MetricsRecord, Failure>>,
}

impl Evaluation {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.entries.iter().filter_map(|e| e.as_ref().ok().cloned()).collect()
    }

    pub fn failures(&self) -> Vec<&Failure> {
        self.entries.iter().filter_map(|e| e.as_ref().err()).collect()
    }
}

/// Evaluates every test-split pair of a manifest (all pairs if `all_splits`).
/// Unreadable samples are collected as failures and the run continues.
pub fn evaluate_dataset(manifest: impl AsRef<Path>, ck: &Checkpoint<f32>, all_splits: bool) -> Result<Evaluation> {
    let manifest = manifest.as_ref();
    let rows = read_manifest(manifest)?;
    let mut ev = Evaluation::default();
    for row in rows.iter().filter(|r| all_splits || r.split == crate::simdata::Split::Test) {
        let id = row.pair_id();
        match load_sample(manifest, row).and_then(|s| evaluate_pair(&s, ck, &id)) {
            Ok(r) => ev.entries.push(Ok(r)),
            Err(e @ (Error::Io { .. } | Error::Format(_))) => ev.entries.push(Err(Failure {
                pair_id: id,
                magnitude: row.magnitude.clone(),
                error: e.to_string(),
            })),
            Err(e) => return Err(e),
        }
    }
    Ok(ev)
}

/// Metrics CSV; failed pairs appear with empty metric cells.
pub fn write_metrics_csv(path: impl AsRef<Path>, ev: &Evaluation, variant: &str, lambda: f64) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS).map_err(fmt)?;
    let lambda = lambda.to_string();
    for e in &ev.entries {
        match e {
            Ok(r) => w.serialize(r).map_err(fmt)?,
            Err(f) => w
                .write_record([f.pair_id.as_str(), variant, &lambda, "", "", "", "", &f.magnitude, ""])
                .map_err(fmt)?,
        }
    }
    write_bytes(path.as_ref(), &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    /// `all` or a magnitude class.
    pub group: String,
    pub n: usize,
    pub image_mse_mean: f64,
    pub image_mse_std: f64,
    pub field_mse_mean: f64,
    pub field_mse_std: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub nonpos_jac_frac_mean: f64,
    pub nonpos_jac_frac_std: f64,
    pub runtime_ms_mean: f64,
    pub runtime_ms_std: f64,
}

fn summarize_group(group: &str, rows: &[&MetricsRecord]) -> SummaryRow {
    let col = |f: &dyn Fn(&MetricsRecord) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    let (im, is) = col(&|r| r.image_mse);
    let (fm, fs) = col(&|r| r.field_mse.unwrap_or(f64::NAN));
    let (dm, ds) = col(&|r| r.dice);
    let (jm, js) = col(&|r| r.nonpos_jac_frac);
    let (rm, rs) = col(&|r| r.runtime_ms);
    SummaryRow {
        group: group.to_string(),
        n: rows.len(),
        image_mse_mean: im,
        image_mse_std: is,
        field_mse_mean: fm,
        field_mse_std: fs,
        dice_mean: dm,
        dice_std: ds,
        nonpos_jac_frac_mean: jm,
        nonpos_jac_frac_std: js,
        runtime_ms_mean: rm,
        runtime_ms_std: rs,
    }
}

/// One row over all records, then one per magnitude class present.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    if records.is_empty() {
        return Vec::new();
    }
    let mut out = vec![summarize_group("all", &records.iter().collect::<Vec<_>>())];
    for m in Magnitude::ALL {
        let rows: Vec<&MetricsRecord> = records
            .iter()
            .filter(|r| r.magnitude.as_deref() == Some(m.as_str()))
            .collect();
        if !rows.is_empty() {
            out.push(summarize_group(m.as_str(), &rows));
        }
    }
    out
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "group",
    "n",
    "image_mse_mean",
    "image_mse_std",
    "field_mse_mean",
    "field_mse_std",
    "dice_mean",
    "dice_std",
    "nonpos_jac_frac_mean",
    "nonpos_jac_frac_std",
    "runtime_ms_mean",
    "runtime_ms_std",
];

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS).map_err(fmt)?;
    for r in rows {
        w.serialize(r).map_err(fmt)?;
    }
    write_bytes(path.as_ref(), &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::generate_sample;

    fn labels(bits: &[u32]) -> Labels {
        Labels::new(&[bits.len()], bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = labels(&[1, 1, 1, 1, 0, 0]);
        let b = labels(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &labels(&[0, 0, 0, 0, 1, 1]), 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 7).unwrap(), 1.0);
        assert!(dice(&a, &labels(&[1]), 1).is_err());
    }

    #[test]
    fn oracle_field_recovers_the_pair() {
        let s = generate_sample(3, 1).unwrap();
        let r = metrics_for_field(&s, &s.truth, None).unwrap();
        assert_eq!(r.field_mse, Some(0.0));
        assert!(r.image_mse < 1e-4);
        assert!(r.dice > 0.99);
    }

    #[test]
    fn summary_of_nothing_is_empty() {
        assert!(summarize(&[]).is_empty());
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
