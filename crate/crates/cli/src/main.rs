use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prdfe::eval::{evaluate_dataset, summarize, write_metrics_csv, write_summary_csv};
use prdfe::field::jacobian_determinant_map;
use prdfe::io::{load_checkpoint, read_array, write_array, Checkpoint};
use prdfe::models::forward;
use prdfe::render::{render_field, RenderMode};
use prdfe::simdata::{generate_dataset, load_split, Split};
use prdfe::train::{read_grid, run, sweep, write_sweep_csv, TrainPair};
use prdfe::{config, Array, Error, Result, Variant};

/// Unsupervised deformable registration with pyramidal residual deformation fields.
#[derive(Parser)]
#[command(name = "prdfe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated benchmark and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// One of prdfe, pdfe, iprdfe, baseline.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Register a moving image to a fixed image with a trained checkpoint.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Array container or PNG.
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "grid")]
        render: String,
    },
    /// Evaluate a checkpoint on the test split of a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Summary CSV (default: `<out>` with `_summary` appended to the stem).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Evaluate training pairs too.
        #[arg(long)]
        all_splits: bool,
    },
    /// Train/evaluate a grid of (variant, lambda) points.
    Sweep {
        /// CSV with columns variant, lambda[, checkpoint].
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base run config for points that need training.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest whose test split is evaluated (default: the config's dataset).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> Result<prdfe::train::TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    config::parse(&text)
}

/// `(1, H, W)` image from an array container (`(H, W)` or `(1, H, W)`) or a grayscale PNG.
fn read_image(path: &Path) -> Result<Array<f32>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_luma32f();
        let (w, h) = img.dimensions();
        return Array::from_vec(&[1, h as usize, w as usize], img.into_raw());
    }
    let a = match read_array(path)? {
        prdfe::io::AnyArray::F32(a) => a,
        prdfe::io::AnyArray::F64(a) => a.cast(),
    };
    match a.shape().len() {
        2 => {
            let s = [1, a.shape()[0], a.shape()[1]];
            a.reshape(&s)
        }
        3 if a.shape()[0] == 1 => Ok(a),
        _ => Err(Error::Shape(format!(
            "{}: expected a (H, W) or (1, H, W) image, got {:?}",
            path.display(),
            a.shape()
        ))),
    }
}

fn cmd_train(config: &Path, variant: Option<String>, lambda: Option<f64>) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(v) = variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    cfg.validate()?;
    let out = run(&cfg)?;
    let last = out.curve.last().map_or("n/a".to_string(), |r| r.loss.to_string());
    println!(
        "trained {} (lambda {}) for {} steps; final loss {last}; checkpoint {}",
        cfg.model.variant,
        cfg.lambda,
        out.curve.len(),
        out.checkpoint.display()
    );
    Ok(())
}

fn cmd_register(checkpoint: &Path, moving: &Path, fixed: &Path, out: &Path, render: &str) -> Result<()> {
    let mode: RenderMode = render.parse()?;
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let (m, f) = (read_image(moving)?, read_image(fixed)?);
    let r = forward(&m, &f, &ck.params, &ck.config.model)?;
    write_array(out.join("warped.prdf"), &r.warped)?;
    write_array(out.join("field.prdf"), r.final_field.vectors())?;
    write_array(out.join("jacobian.prdf"), &jacobian_determinant_map(&r.final_field))?;
    render_field(&r.final_field, out.join(format!("field_{mode}.png")), mode)?;
    println!(
        "registered with {}: mean |phi| = {:.4} voxels; outputs in {}",
        ck.config.model.variant,
        r.final_field.mean_norm(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, manifest: &Path, out: &Path, summary: Option<PathBuf>, all: bool) -> Result<()> {
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let ev = evaluate_dataset(manifest, &ck, all)?;
    write_metrics_csv(out, &ev, ck.config.model.variant.as_str(), ck.config.lambda)?;
    let summary = summary.unwrap_or_else(|| {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}_summary.csv"))
    });
    let records = ev.records();
    write_summary_csv(&summary, &summarize(&records))?;
    let failures = ev.failures();
    for f in &failures {
        eprintln!("failed {}: {}", f.pair_id, f.error);
    }
    println!(
        "evaluated {} pairs ({} failed); metrics {}, summary {}",
        records.len(),
        failures.len(),
        out.display(),
        summary.display()
    );
    Ok(())
}

fn cmd_sweep(grid: &Path, out: &Path, config: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<()> {
    let base = match config {
        Some(p) => read_config(&p)?,
        None => Default::default(),
    };
    let points = read_grid(grid)?;
    let rows = if points.is_empty() {
        Vec::new()
    } else {
        let manifest = manifest.unwrap_or_else(|| PathBuf::from(&base.dataset));
        let test = load_split(&manifest, Split::Test)?;
        let train_pairs: Vec<TrainPair> = if points.iter().any(|p| p.checkpoint.is_none()) {
            load_split(&base.dataset, Split::Train)?
                .iter()
                .map(TrainPair::from_sample)
                .collect()
        } else {
            Vec::new()
        };
        sweep(&points, &base, &train_pairs, &test, |r| {
            println!(
                "{} lambda {}: field_mse {:?} image_mse {:?} [{}]",
                r.variant, r.lambda, r.field_mse, r.image_mse, r.status
            )
        })?
    };
    write_sweep_csv(out, &rows)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, train, test, seed } => {
            let rows = generate_dataset(train, test, seed, &out)?;
            println!("wrote {} samples to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Train { config, variant, lambda } => cmd_train(&config, variant, lambda),
        Command::Register {
            checkpoint,
            moving,
            fixed,
            out,
            render,
        } => cmd_register(&checkpoint, &moving, &fixed, &out, &render),
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            summary,
            all_splits,
        } => cmd_evaluate(&checkpoint, &manifest, &out, summary, all_splits),
        Command::Sweep {
            grid,
            out,
            config,
            manifest,
        } => cmd_sweep(&grid, &out, config, manifest),
    }
}

/// 0 success, 2 usage/config/IO error, 3 numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
