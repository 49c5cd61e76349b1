use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aaw_core::bench::{self, DEFAULT_RUNS, DEFAULT_WARMUP};
use aaw_core::metrics::{subgroup_report, FrameEval, DEFAULT_AP_IOU};
use aaw_core::synth::{self, FrameSample};
use aaw_core::train::{self, TrainConfig};
use aaw_core::zoo::{self, decode, SegModel, Variant};
use aaw_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aaw", version, about = "Synthetic TCCD vessel segmentation: data, training, evaluation, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Random seed; falls back to $AAW_SEED, then 0.
    #[arg(long, env = "AAW_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = synth::DEFAULT_FRAME_SIZE)]
        size: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a variant and write a checkpoint plus `<out>.trace`.
    Train {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0.03)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Train on the 70% split and report validation mask-Dice.
        #[arg(long)]
        split: bool,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or a directory of stored predictions) against a dataset.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        ckpt: Option<PathBuf>,
        /// Dataset-format directory of predicted instances with scores.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        #[arg(long, default_value_t = DEFAULT_AP_IOU)]
        ap_iou: f64,
    },
    /// Parameters, GFLOPs and latency of one variant or `all`.
    Bench {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = synth::DEFAULT_FRAME_SIZE)]
        size: usize,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        report: PathBuf,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n";
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(frames: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let samples = synth::generate(frames, size, seed)?;
    synth::write_dataset(&samples, out)?;
    let n: usize = samples.iter().map(|s| s.instances.len()).sum();
    println!("wrote {frames} frames, {n} instances to {}", out.display());
    Ok(())
}

fn select(data: &[FrameSample], idx: &[usize]) -> Vec<FrameSample> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    variant: &str,
    data: &Path,
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    split: bool,
    eval_every: usize,
    out: &Path,
) -> Result<()> {
    let frames = synth::read_dataset(data)?;
    let (train_set, val_set) = if split {
        let (tr, va, _) = synth::split(frames.len(), seed);
        (select(&frames, &tr), select(&frames, &va))
    } else {
        (frames, Vec::new())
    };
    let mut model = zoo::build_variant(variant, seed)?;
    let cfg = TrainConfig {
        steps,
        lr,
        batch_size: batch,
        seed,
        eval_every: if split { eval_every } else { 0 },
        ..TrainConfig::default()
    };
    let report = train::train(&mut model, &train_set, &val_set, &cfg, |r| {
        println!("{}", train::format_trace_line(r));
    })?;
    for (step, d) in &report.evals {
        println!("val step {step} mask_dice {d}");
    }
    train::save_checkpoint(&model, out, steps)?;
    let mut trace = out.as_os_str().to_owned();
    trace.push(".trace");
    train::write_trace(Path::new(&trace), &report.trace)?;
    println!("train mask_dice {}", train::mask_dice(&model, &train_set)?);
    Ok(())
}

fn eval_cmd(
    ckpt: Option<&Path>,
    predictions: Option<&Path>,
    data: &Path,
    report: &Path,
    score_thresh: f64,
    nms_iou: f64,
    ap_iou: f64,
) -> Result<()> {
    let frames = synth::read_dataset(data)?;
    let (name, preds, teacher_dice) = match (ckpt, predictions) {
        (Some(ckpt), _) => {
            let model = train::load_checkpoint(ckpt)?;
            let mut preds = Vec::with_capacity(frames.len());
            for f in &frames {
                let raw = model.forward(&f.image)?;
                preds.push(decode(&raw, score_thresh, nms_iou)?.remove(0));
            }
            let dice = train::mask_dice(&model, &frames)?;
            (model.variant().display_name().to_string(), preds, Some(dice))
        }
        (None, Some(dir)) => {
            let stored = synth::read_instances(dir)?;
            let preds = frames
                .iter()
                .map(|f| {
                    stored
                        .iter()
                        .find(|p| p.id == f.index)
                        .map(|p| p.instances.clone())
                        .unwrap_or_default()
                })
                .collect();
            ("predictions".to_string(), preds, None)
        }
        (None, None) => return Err(Error::InvalidArgument("eval needs --ckpt or --predictions".into())),
    };
    let evals: Vec<FrameEval> = frames
        .into_iter()
        .zip(preds)
        .map(|(f, preds)| FrameEval { gts: f.instances, preds })
        .collect();
    let r = subgroup_report(&name, &evals, ap_iou)?;
    let value = json!({
        "summary": [r.summary],
        "subgroups": r.subgroup,
        "per_class": r.per_class,
        "frames": evals.len(),
        "ap_iou_threshold": ap_iou,
        "score_threshold": score_thresh,
        "nms_iou": nms_iou,
        "mask_dice_teacher_forced": teacher_dice,
    });
    write_json(report, &value)?;
    println!("{}", serde_json::to_string_pretty(&value["summary"]).expect("serializable"));
    Ok(())
}

fn bench_cmd(
    variant: &str,
    ckpt: Option<&Path>,
    size: usize,
    runs: usize,
    warmup: usize,
    seed: u64,
    report: &Path,
) -> Result<()> {
    let models: Vec<SegModel> = match (variant, ckpt) {
        ("all", Some(_)) => return Err(Error::InvalidArgument("--ckpt needs a single --variant".into())),
        ("all", None) => Variant::ALL
            .iter()
            .map(|v| zoo::build_variant(v.name(), seed))
            .collect::<Result<_>>()?,
        (_, Some(ckpt)) => {
            let m = train::load_checkpoint(ckpt)?;
            if m.variant().name() != variant {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint holds variant {}, not {variant}",
                    m.variant().name()
                )));
            }
            vec![m]
        }
        (v, None) => vec![zoo::build_variant(v, seed)?],
    };
    let table = bench::bench_table(&models, size, warmup, runs)?;
    for r in &table.rows {
        println!(
            "{:<22} params {:>9} GFLOPs {:.4} ms {:.3} fps {:.3}",
            r.model, r.parameters, r.gflops, r.inference_ms, r.fps
        );
    }
    write_json(report, &serde_json::to_value(&table).expect("serializable"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { frames, size, seed, out } => gen_data(frames, size, seed.seed, &out),
        Command::Train {
            variant,
            data,
            steps,
            lr,
            batch,
            seed,
            split,
            eval_every,
            out,
        } => train_cmd(&variant, &data, steps, lr, batch, seed.seed, split, eval_every, &out),
        Command::Eval {
            ckpt,
            predictions,
            data,
            report,
            score_thresh,
            nms_iou,
            ap_iou,
        } => eval_cmd(
            ckpt.as_deref(),
            predictions.as_deref(),
            &data,
            &report,
            score_thresh,
            nms_iou,
            ap_iou,
        ),
        Command::Bench {
            variant,
            ckpt,
            size,
            runs,
            warmup,
            seed,
            report,
        } => bench_cmd(&variant, ckpt.as_deref(), size, runs, warmup, seed.seed, &report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
