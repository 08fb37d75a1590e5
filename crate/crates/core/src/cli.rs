//! Command-line entry point: generate, train, eval, bench and predict.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::backbone::ScanMode;
use crate::config::RunConfig;
use crate::data::dataset::read_image;
use crate::data::{build_dataset, Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::eval::{benchmark, evaluate, write_json, write_metrics, write_overlay, MetricsReport};
use crate::model::{KeypointDetector, Model};
use crate::params::save_checkpoint;
use crate::train::{train, Event};

#[derive(Debug, Parser)]
#[command(name = "acupoint", version, about = "Synthetic acupoint keypoint detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint to load; defaults to `<out_dir>/checkpoints/best.ckpt`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out_dir`. For `generate`, the dataset
    /// directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Minimum detection confidence for `predict`.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a dataset and print its manifest hash.
    Generate,
    /// Train on the dataset and write checkpoints.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Time single-image inference in both scan modes.
    Bench,
    /// Write detections for the test split, or for one image file.
    Predict {
        /// Image tensor file, as stored in a dataset.
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

/// Process exit status of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Missing { .. } => 3,
        Error::Corrupt { .. } => 4,
        _ => 1,
    }
}

fn emit(v: Value) {
    println!("{v}");
}

/// Parse `args` (program name first), run the command and return the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            emit(json!({"event": "error", "code": code, "message": e.to_string()}));
            code
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threshold {
        cfg.eval.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let (Some(out), false) = (&cli.out, matches!(cli.command, Command::Generate)) {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, cli.out.clone().unwrap_or_else(|| cfg.data_dir())),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg, &checkpoint_path(cli, &cfg)),
        Command::Bench => cmd_bench(&cfg, &checkpoint_path(cli, &cfg)),
        Command::Predict { image } => cmd_predict(&cfg, &checkpoint_path(cli, &cfg), image.as_deref()),
    }
}

fn checkpoint_path(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("checkpoints").join("best.ckpt"))
}

pub fn cmd_generate(cfg: &RunConfig, dir: PathBuf) -> Result<()> {
    let (m, hash) = build_dataset(&cfg.data, cfg.seed, &dir)?;
    emit(json!({
        "event": "generated",
        "dir": dir,
        "samples": m.samples.len(),
        "train": m.splits.train.len(),
        "val": m.splits.val.len(),
        "test": m.splits.test.len(),
        "manifest_sha256": hash,
    }));
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::open(&cfg.data_dir())?;
    if ds.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes(),
            cfg.model.num_classes
        )));
    }
    if ds.manifest.image_size != cfg.data.skeleton.image_size {
        return Err(Error::Config("dataset image size differs from the config".into()));
    }
    Ok(ds)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let train_set = ds.load_split(Split::Train)?;
    let val_set = ds.load_split(Split::Val)?;
    let (model, ps) = Model::new(&cfg.model, cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    emit(json!({"event": "train_start", "train": train_set.len(), "val": val_set.len(), "params": ps.numel()}));
    let outcome = train(&model, ps, &train_set, &val_set, &cfg.loss, &cfg.train, cfg.seed, |ev| {
        let line = match ev {
            Event::Step(s) => json!({"event": "step", "step": s.step, "loss": s.loss, "mse": s.mse, "rle": s.rle,
                "class": s.class, "iou": s.iou, "lr": s.lr, "grad_norm": s.grad_norm}),
            Event::Validation(v) => json!({"event": "validation", "step": v.step, "metrics": v.metrics}),
        };
        emit(line.clone());
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let dir = cfg.out_dir.join("checkpoints");
    let final_path = dir.join("final.ckpt");
    let best_path = dir.join("best.ckpt");
    save_checkpoint(&final_path, &outcome.last, &cfg.model)?;
    save_checkpoint(&best_path, &outcome.best, &cfg.model)?;
    emit(json!({
        "event": "checkpoints",
        "final": final_path,
        "best": best_path,
        "best_step": outcome.best_step,
        "final_loss": outcome.steps.last().map(|s| s.loss),
    }));
    Ok(())
}

fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<KeypointDetector> {
    let mut det = KeypointDetector::load(checkpoint)?;
    if det.parts()?.0.cfg.num_classes != cfg.model.num_classes {
        return Err(Error::Config("checkpoint class count differs from the config".into()));
    }
    det.unique = cfg.eval.unique;
    det.threshold = cfg.eval.threshold;
    det.mode = ScanMode::Recurrent;
    Ok(det)
}

fn write_overlays(dir: &Path, examples: &[Example], dets: &[Vec<crate::head::Detection>], n: usize) -> Result<()> {
    for (ex, d) in examples.iter().zip(dets).take(n) {
        write_overlay(&dir.join(format!("{:06}.png", ex.id)), &ex.image, &ex.keypoints, d)?;
    }
    Ok(())
}

/// Evaluate a loaded detector on the test split and write the reports.
pub fn eval_detector(cfg: &RunConfig, det: &KeypointDetector) -> Result<MetricsReport> {
    let ds = open_dataset(cfg)?;
    let test = ds.load_split(Split::Test)?;
    let (report, dets) = evaluate(det, &test, &cfg.eval.alphas)?;
    let dir = cfg.out_dir.join("eval");
    write_metrics(&dir, &report)?;
    write_overlays(&dir.join("overlays"), &test, &dets, cfg.eval.overlays)?;
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let det = load_detector(cfg, checkpoint)?;
    let report = eval_detector(cfg, &det)?;
    emit(json!({"event": "eval", "report": report, "dir": cfg.out_dir.join("eval")}));
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let mut det = load_detector(cfg, checkpoint)?;
    let ds = open_dataset(cfg)?;
    let images: Vec<_> = ds
        .split(Split::Test)
        .iter()
        .take(8)
        .map(|&id| ds.image(id))
        .collect::<Result<_>>()?;
    let recurrent = benchmark(&det, &images, cfg.eval.warmup, cfg.eval.iters)?;
    det.mode = ScanMode::Parallel;
    let parallel = benchmark(&det, &images, cfg.eval.warmup, cfg.eval.iters)?;
    let report = json!({
        "recurrent": recurrent,
        "parallel": parallel,
        "parallel_over_recurrent": parallel.t_avg_ms / recurrent.t_avg_ms,
    });
    write_json(&cfg.out_dir.join("bench").join("bench.json"), &report)?;
    emit(json!({"event": "bench", "report": report}));
    Ok(())
}

fn prediction_line(image_id: Value, dets: &[crate::head::Detection]) -> Value {
    json!({
        "image_id": image_id,
        "detections": dets.iter().map(|d| json!({"class": d.class_id, "x": d.x, "y": d.y, "score": d.confidence})).collect::<Vec<_>>(),
    })
}

pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, image: Option<&Path>) -> Result<()> {
    let det = load_detector(cfg, checkpoint)?;
    let dir = cfg.out_dir.join("predict");
    create_dir(&dir)?;
    let path = dir.join("predictions.jsonl");
    let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    let mut write = |line: Value| -> Result<()> {
        println!("{line}");
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))
    };
    match image {
        Some(p) => {
            let img = read_image(p)?;
            let d = det.predict(&img, cfg.eval.threshold)?;
            write(prediction_line(json!(p), &d))?;
        }
        None => {
            let ds = open_dataset(cfg)?;
            let test = ds.load_split(Split::Test)?;
            let mut all = Vec::with_capacity(test.len());
            for ex in &test {
                let d = det.predict(&ex.image, cfg.eval.threshold)?;
                write(prediction_line(json!(ex.id), &d))?;
                all.push(d);
            }
            write_overlays(&dir.join("overlays"), &test, &all, cfg.eval.overlays)?;
        }
    }
    out.flush().map_err(|e| Error::io(&path, e))
}
