//! Flat `key = value` run configuration.
//!
//! One key per line; blank lines and `#` comments are ignored; keys not
//! listed here are rejected. Missing keys keep their defaults. The
//! serialized form lists every key in a fixed order, so
//! `parse(to_text(c)) == c` and `to_text(parse(t)) == t` for serialized text.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::SmoothReduction;
use crate::train::TrainConfig;

pub type RunConfig = TrainConfig;

pub const KEYS: [&str; 16] = [
    "variant",
    "lambda",
    "lr",
    "batch",
    "steps",
    "seed",
    "levels",
    "channels",
    "decoder",
    "kernel",
    "ndim",
    "depth",
    "smooth_reduction",
    "dataset",
    "checkpoint_every",
    "out_dir",
];

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn to_text(c: &TrainConfig) -> String {
    let m = &c.model;
    let values: [String; 16] = [
        m.variant.to_string(),
        c.lambda.to_string(),
        c.lr.to_string(),
        c.batch.to_string(),
        c.steps.to_string(),
        c.seed.to_string(),
        m.levels().to_string(),
        list(&m.encoder.channels),
        list(&m.decoder),
        m.encoder.kernel.to_string(),
        m.encoder.ndim.to_string(),
        m.encoder.depth.to_string(),
        c.smooth_reduction.as_str().to_string(),
        c.dataset.clone(),
        c.checkpoint_every.to_string(),
        c.out_dir.clone(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    let mut levels = None;
    let mut seen = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        let (key, v) = (key.trim(), value.trim());
        if seen.contains(&key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
        seen.push(key);
        match key {
            "variant" => c.model.variant = v.parse()?,
            "lambda" => c.lambda = num(key, v)?,
            "lr" => c.lr = num(key, v)?,
            "batch" => c.batch = num(key, v)?,
            "steps" => c.steps = num(key, v)?,
            "seed" => c.seed = num(key, v)?,
            "levels" => levels = Some(num::<usize>(key, v)?),
            "channels" => c.model.encoder.channels = parse_list(key, v)?,
            "decoder" => c.model.decoder = parse_list(key, v)?,
            "kernel" => c.model.encoder.kernel = num(key, v)?,
            "ndim" => c.model.encoder.ndim = num(key, v)?,
            "depth" => c.model.encoder.depth = num(key, v)?,
            "smooth_reduction" => {
                c.smooth_reduction = SmoothReduction::parse(v)
                    .ok_or_else(|| Error::Config(format!("smooth_reduction must be sum or mean, got {v:?}")))?
            }
            "dataset" => c.dataset = v.to_string(),
            "checkpoint_every" => c.checkpoint_every = num(key, v)?,
            "out_dir" => c.out_dir = v.to_string(),
            _ => {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key:?}; valid keys: {}",
                    lineno + 1,
                    KEYS.join(", ")
                )))
            }
        }
    }
    if let Some(k) = levels {
        if k != c.model.levels() {
            return Err(Error::Config(format!(
                "levels = {k} but channels lists {} widths",
                c.model.levels()
            )));
        }
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    #[test]
    fn round_trip() {
        let mut c = TrainConfig::default();
        c.model.variant = Variant::Iprdfe;
        c.lambda = 0.001;
        c.lr = 3e-4;
        c.model.encoder.channels = vec![8, 16, 16];
        c.model.decoder = vec![8, 8, 8];
        let text = to_text(&c);
        let back = parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(parse("colour = red").unwrap_err().to_string().contains("unknown key"));
        assert!(parse("lr = 1\nlr = 2").is_err());
        assert!(parse("lambda 3").is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let c = parse("# comment\n\nvariant = baseline\n").unwrap();
        assert_eq!(c.model.variant, Variant::Baseline);
        assert_eq!(c.lr, 1e-4);
    }

    #[test]
    fn levels_must_match_channels() {
        assert!(parse("levels = 3").is_err());
        assert!(parse("levels = 5").is_ok());
    }

    #[test]
    fn unknown_variant_lists_valid_ones() {
        let e = parse("variant = flownet").unwrap_err().to_string();
        assert!(e.contains("prdfe, pdfe, iprdfe, baseline"), "{e}");
    }
}
