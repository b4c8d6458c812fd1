//! Unsupervised training: minibatch ADAM on
//! `mse(fixed, warp(moving, phi)) + lambda * smoothness(phi)`.
//!
//! Similarity is measured only on the full-resolution warped image; coarser
//! levels are trained through the residual chain alone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config;
use crate::error::{Error, Result};
use crate::eval::{evaluate_pair, mean_std, MetricsRecord};
use crate::io::{load_checkpoint, save_checkpoint, write_bytes, Checkpoint};
use crate::loss::{loss_with, SmoothReduction};
use crate::models::{forward_vars, ModelConfig, Variant};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ModelParams;
use crate::simdata::{load_split, mix_seed, SimSample, Split};
use crate::tensor::Array;

/// Default regularization grid of the sweep.
pub const LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.05, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub smooth_reduction: SmoothReduction,
    /// Manifest of the training data.
    pub dataset: String,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda: 0.05,
            lr: 1e-4,
            batch: 4,
            steps: 2000,
            seed: 0,
            smooth_reduction: SmoothReduction::Mean,
            dataset: "data/manifest.csv".into(),
            checkpoint_every: 0,
            out_dir: "runs/default".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// A `(moving, fixed)` training pair of `(1, spatial...)` images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub moving: Array<f32>,
    pub fixed: Array<f32>,
}

/// One row of the training curve. `smooth_term` is the unweighted
/// (reduced) penalty, so `loss = mse_term + lambda * smooth_term`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub mse_term: f64,
    pub smooth_term: f64,
    pub wall_ms: f64,
}

/// Seed-determined visiting order: a fresh shuffle of all pairs per epoch.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchOrder {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.n {
                    self.order = (0..self.n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
                    self.order.shuffle(&mut rng);
                    self.epoch += 1;
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Parameters, optimizer state and data order of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    order: BatchOrder,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n_pairs: usize) -> Result<Self> {
        cfg.validate()?;
        if n_pairs == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        let params = cfg.model.init_params(cfg.seed)?;
        let order = BatchOrder::new(n_pairs, mix_seed(cfg.seed, 0xDA7A));
        Ok(Trainer {
            cfg,
            params,
            adam: AdamState::new(),
            order,
            started: Instant::now(),
        })
    }

    /// Steps taken so far.
    pub fn step(&self) -> usize {
        self.adam.step as usize
    }

    /// Loss of the batch `idx` and parameter gradients, without updating.
    pub fn batch_loss(
        &self,
        pairs: &[TrainPair],
        idx: &[usize],
    ) -> Result<(CurveRow, std::collections::BTreeMap<String, Array<f32>>)> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind(&mut g)?;
        let inv = 1.0 / idx.len() as f32;
        let (mut total, mut mse, mut smooth) = (None, 0.0f64, 0.0f64);
        for &i in idx {
            let pair = &pairs[i];
            let m = g.constant(pair.moving.clone())?;
            let f = g.constant(pair.fixed.clone())?;
            let out = forward_vars(&mut g, &bound, &self.cfg.model, m, f)?;
            let terms = loss_with(&mut g, f, out.warped, out.final_field, self.cfg.lambda as f32, self.cfg.smooth_reduction)?;
            mse += g.value(terms.similarity).data()[0] as f64;
            smooth += g.value(terms.smooth).data()[0] as f64;
            let part = g.scale(terms.total, inv)?;
            total = Some(match total {
                None => part,
                Some(t) => g.add(t, part)?,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
        let mut grads = g.backward(total)?;
        let grads = bound.gradients(&g, &mut grads);
        let row = CurveRow {
            step: self.step(),
            loss: g.value(total).data()[0] as f64,
            mse_term: mse / idx.len() as f64,
            smooth_term: smooth / idx.len() as f64,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        Ok((row, grads))
    }

    /// One optimizer step on the next batch. Non-finite values abort with the
    /// step number and the batch's pair indices.
    pub fn train_step(&mut self, pairs: &[TrainPair]) -> Result<CurveRow> {
        let idx = self.order.next_batch(self.cfg.batch);
        let step = self.step() + 1;
        let diag = |e: Error| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {step}, batch {idx:?}: {msg}")),
            other => other,
        };
        let (mut row, grads) = self.batch_loss(pairs, &idx).map_err(diag)?;
        if !row.loss.is_finite() {
            return Err(diag(Error::NonFinite(format!("loss {}", row.loss))));
        }
        adam_step(&mut self.params, &grads, &mut self.adam, &self.cfg.adam()).map_err(diag)?;
        row.step = step;
        Ok(row)
    }
}

/// Runs `cfg.steps` steps; `on_step` sees every curve row and the parameters after it.
pub fn train(
    cfg: &TrainConfig,
    pairs: &[TrainPair],
    mut on_step: impl FnMut(&CurveRow, &ModelParams<f32>) -> Result<()>,
) -> Result<(ModelParams<f32>, Vec<CurveRow>)> {
    let mut t = Trainer::new(cfg.clone(), pairs.len())?;
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let row = t.train_step(pairs)?;
        on_step(&row, &t.params)?;
        curve.push(row);
    }
    Ok((t.params, curve))
}

impl TrainPair {
    pub fn from_sample(s: &SimSample) -> Self {
        TrainPair {
            moving: s.moving.clone(),
            fixed: s.fixed.clone(),
        }
    }
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[CurveRow]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["step", "loss", "mse_term", "smooth_term", "wall_ms"]).map_err(fmt)?;
    for r in curve {
        w.serialize(r).map_err(fmt)?;
    }
    write_bytes(path.as_ref(), &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ModelParams<f32>,
    pub curve: Vec<CurveRow>,
    pub checkpoint: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains on `pairs` and writes into `cfg.out_dir`: `config.txt`,
/// `curve.csv`, `step_NNNNNN.ckpt` every `checkpoint_every` steps and `final.ckpt`.
pub fn run_on(cfg: &TrainConfig, pairs: &[TrainPair]) -> Result<RunOutput> {
    let out = Path::new(&cfg.out_dir);
    write_bytes(&out.join("config.txt"), config::to_text(cfg).as_bytes())?;
    let (params, curve) = train(cfg, pairs, |row, params| {
        if cfg.checkpoint_every > 0 && row.step % cfg.checkpoint_every == 0 && row.step < cfg.steps {
            let ck = Checkpoint {
                config: cfg.clone(),
                step: row.step as u64,
                params: params.clone(),
            };
            save_checkpoint(out.join(format!("step_{:06}.ckpt", row.step)), &ck)?;
        }
        Ok(())
    })?;
    write_curve_csv(out.join("curve.csv"), &curve)?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    let ck = Checkpoint {
        config: cfg.clone(),
        step: cfg.steps as u64,
        params,
    };
    save_checkpoint(&checkpoint, &ck)?;
    Ok(RunOutput {
        params: ck.params,
        curve,
        checkpoint,
    })
}

/// [`run_on`] with the training split of `cfg.dataset`.
pub fn run(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let samples = load_split(&cfg.dataset, Split::Train)?;
    let pairs: Vec<TrainPair> = samples.iter().map(TrainPair::from_sample).collect();
    run_on(cfg, &pairs)
}

/// One sweep point; without a checkpoint the point is trained.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct GridPoint {
    pub variant: Variant,
    pub lambda: f64,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub checkpoint: Option<PathBuf>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<PathBuf>, D::Error> {
    let s: Option<String> = serde::Deserialize::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()).map(PathBuf::from))
}

/// Reads a grid CSV with columns `variant, lambda[, checkpoint]`.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Vec<GridPoint>> {
    let path = path.as_ref();
    let bytes = crate::io::read_bytes(path)?;
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Full grid: every variant at every lambda of [`LAMBDA_GRID`].
pub fn default_grid() -> Vec<GridPoint> {
    Variant::ALL
        .into_iter()
        .flat_map(|variant| {
            LAMBDA_GRID.into_iter().map(move |lambda| GridPoint {
                variant,
                lambda,
                checkpoint: None,
            })
        })
        .collect()
}

/// One sweep result: test-split means, or empty metrics and a failure status.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub lambda: f64,
    pub image_mse: Option<f64>,
    pub field_mse: Option<f64>,
    pub dice: Option<f64>,
    pub nonpos_jac_frac: Option<f64>,
    pub status: String,
    pub checkpoint: String,
}

pub const SWEEP_COLUMNS: [&str; 8] = [
    "variant",
    "lambda",
    "image_mse",
    "field_mse",
    "dice",
    "nonpos_jac_frac",
    "status",
    "checkpoint",
];

/// Directory a sweep point trains into.
pub fn point_dir(root: &Path, variant: Variant, lambda: f64) -> PathBuf {
    root.join(format!("{variant}_lambda_{lambda}"))
}

fn evaluate_point(ck: &Checkpoint<f32>, test: &[SimSample]) -> Result<Vec<MetricsRecord>> {
    test.iter()
        .enumerate()
        .map(|(i, s)| evaluate_pair(s, ck, &format!("test_{i:05}")))
        .collect()
}

/// Trains (where needed) and evaluates every grid point on `test`.
/// `base` supplies everything but variant and lambda; trained points go to
/// `point_dir(base.out_dir, ..)`. A failing point is recorded and the sweep continues.
pub fn sweep(
    grid: &[GridPoint],
    base: &TrainConfig,
    train_pairs: &[TrainPair],
    test: &[SimSample],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for point in grid {
        let mut row = SweepRow {
            variant: point.variant,
            lambda: point.lambda,
            image_mse: None,
            field_mse: None,
            dice: None,
            nonpos_jac_frac: None,
            status: "ok".into(),
            checkpoint: String::new(),
        };
        let ck = match &point.checkpoint {
            Some(path) => {
                row.checkpoint = path.display().to_string();
                load_checkpoint::<f32>(path)
            }
            None => {
                let mut cfg = base.clone();
                cfg.model.variant = point.variant;
                cfg.lambda = point.lambda;
                cfg.out_dir = point_dir(Path::new(&base.out_dir), point.variant, point.lambda)
                    .display()
                    .to_string();
                run_on(&cfg, train_pairs).map(|out| {
                    row.checkpoint = out.checkpoint.display().to_string();
                    Checkpoint {
                        config: cfg,
                        step: out.curve.len() as u64,
                        params: out.params,
                    }
                })
            }
        };
        let metrics = ck.and_then(|ck| {
            if ck.config.model.variant != point.variant {
                return Err(Error::Config(format!(
                    "checkpoint holds variant {}, grid asks for {}",
                    ck.config.model.variant, point.variant
                )));
            }
            evaluate_point(&ck, test)
        });
        match metrics {
            Ok(recs) => {
                let mean = |f: fn(&MetricsRecord) -> f64| Some(mean_std(&recs.iter().map(f).collect::<Vec<_>>()).0);
                row.image_mse = mean(|r| r.image_mse);
                row.field_mse = mean(|r| r.field_mse.unwrap_or(f64::NAN));
                row.dice = mean(|r| r.dice);
                row.nonpos_jac_frac = mean(|r| r.nonpos_jac_frac);
            }
            Err(e) => row.status = format!("failed: {e}"),
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS).map_err(fmt)?;
    for r in rows {
        w.serialize(r).map_err(fmt)?;
    }
    write_bytes(path.as_ref(), &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_covers_each_epoch() {
        let mut o = BatchOrder::new(5, 1);
        let mut first: Vec<usize> = o.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let again: Vec<usize> = BatchOrder::new(5, 1).next_batch(12);
        let mut o2 = BatchOrder::new(5, 1);
        assert_eq!(again, o2.next_batch(12));
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch = 0;
        assert!(c.validate().is_err());
    }
}
