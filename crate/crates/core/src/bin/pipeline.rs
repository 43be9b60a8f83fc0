//! Command-line front end: batch runs, synthetic scene rendering, and
//! the quality metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use phenosfm::eval::{average_precision, mean_precision, Detection, COCO_THRESHOLDS};
use phenosfm::io::save_color;
use phenosfm::pipeline::{emit_outputs, expand_glob, run, Config, FrameOutcome, RunReport};
use phenosfm::raster::{parse_segmentation, segmentation_to_json, BitMask, MaskClass};
use phenosfm::synth::{render_frame, scene_truth, SceneSpec};

#[derive(Parser)]
#[command(
    name = "pipeline",
    version,
    about = "Crop head volume and leaf area from a moving camera's frames plus instance masks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a frame sequence into per-plant measurement records.
    Run {
        /// Flat key = value settings file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Glob for the ordered frame images.
        #[arg(long)]
        frames: String,
        /// Glob for the per-frame segmentation JSON files.
        #[arg(long)]
        masks: String,
        /// Output directory; overrides out_dir from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for every stochastic stage; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a synthetic scene into frames, masks, and ground truth.
    Synth {
        /// Scene description JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of frames; the camera is centered on the sequence.
        #[arg(long, default_value_t = 3)]
        frames: usize,
    },
    /// Quality metrics over measurement tables and mask files.
    Eval {
        #[command(subcommand)]
        metric: EvalCommand,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// 100 minus the mean absolute percentage error between two CSV columns.
    MeanPrecision {
        /// Measured values as path.csv:column (name or zero-based index).
        #[arg(long, value_name = "CSV:COLUMN")]
        detected: String,
        /// Reference values as path.csv:column.
        #[arg(long, value_name = "CSV:COLUMN")]
        truth: String,
    },
    /// Mask average precision of predictions against ground truth.
    Ap {
        /// Predicted segmentation JSON (instances carry scores).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth segmentation JSON.
        #[arg(long)]
        gt: PathBuf,
        /// IoU threshold in (0, 1), or `coco` for the 0.50:0.05:0.95 mean.
        #[arg(long, default_value = "0.5")]
        iou: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            config,
            frames,
            masks,
            out,
            seed,
        } => cmd_run(config, &frames, &masks, out, seed),
        Command::Synth { spec, out, frames } => cmd_synth(&spec, &out, frames),
        Command::Eval { metric } => match metric {
            EvalCommand::MeanPrecision { detected, truth } => cmd_mean_precision(&detected, &truth),
            EvalCommand::Ap { pred, gt, iou } => cmd_ap(&pred, &gt, &iou),
        },
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    frames: &str,
    masks: &str,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(path) => Config::from_file(&path)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out {
        cfg.out_dir = Some(dir);
    }
    let out_dir = cfg
        .out_dir
        .clone()
        .context("no output directory: pass --out or set out_dir in the config")?;

    let frame_paths = expand_glob(frames)?;
    let mask_paths = expand_glob(masks)?;
    let report = run(&cfg, &frame_paths, &mask_paths)?;
    print_report(&report);
    let written = emit_outputs(&report, &out_dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(if report.all_frames_succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn print_report(report: &RunReport) {
    for note in &report.notes {
        println!("note: {note}");
    }
    for f in &report.frames {
        match &f.outcome {
            FrameOutcome::Ok {
                plants,
                plant_errors,
            } => {
                if *plant_errors == 0 {
                    println!("frame {}: ok, {plants} plant(s)", f.frame_id);
                } else {
                    println!(
                        "frame {}: ok, {plants} plant(s), {plant_errors} plant error(s)",
                        f.frame_id
                    );
                }
            }
            FrameOutcome::Skipped { reason } => {
                println!("frame {}: skipped ({reason})", f.frame_id)
            }
            FrameOutcome::Failed { error } => println!("frame {}: FAILED: {error}", f.frame_id),
        }
    }
    for e in &report.plant_errors {
        println!(
            "plant error: frame {} plant {}: {}",
            e.frame_id, e.plant_id, e.error
        );
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (frame_id, ms) in &report.timings_ms {
        eprintln!("timing: frame {frame_id} took {ms:.0} ms");
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, frames: usize) -> Result<ExitCode> {
    if frames == 0 {
        bail!("--frames must be at least 1");
    }
    let bytes = fs::read(spec_path)
        .with_context(|| format!("cannot read scene spec {}", spec_path.display()))?;
    let spec = SceneSpec::from_json(&bytes)?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;

    let step = spec.rig().baseline_cm();
    for i in 0..frames {
        let cam_x = (i as f64 - (frames as f64 - 1.0) / 2.0) * step;
        let frame_id = format!("frame_{i:03}");
        let rendered = render_frame(&spec, cam_x, &frame_id)?;
        let fpath = out.join(format!("{frame_id}.png"));
        save_color(&fpath, &rendered.image)?;
        let mpath = out.join(format!("mask_{i:03}.json"));
        fs::write(&mpath, segmentation_to_json(&rendered.segmentation))
            .with_context(|| format!("cannot write {}", mpath.display()))?;
        println!("wrote {}", fpath.display());
        println!("wrote {}", mpath.display());
    }

    let truth = scene_truth(&spec)?;
    let tpath = out.join("truth.json");
    fs::write(&tpath, serde_json::to_string_pretty(&truth)?)
        .with_context(|| format!("cannot write {}", tpath.display()))?;
    println!("wrote {}", tpath.display());
    Ok(ExitCode::SUCCESS)
}

/// Split `path.csv:column` on the last colon.
fn split_csv_column(arg: &str) -> Result<(&str, &str)> {
    arg.rsplit_once(':')
        .filter(|(p, c)| !p.is_empty() && !c.is_empty())
        .with_context(|| format!("`{arg}` is not of the form path.csv:column"))
}

fn read_csv_column(path: &str, column: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read CSV {path}"))?;
    let headers = reader.headers().context("CSV has no header row")?.clone();
    let index = headers
        .iter()
        .position(|h| h == column)
        .or_else(|| {
            column
                .parse::<usize>()
                .ok()
                .filter(|i| *i < headers.len())
        })
        .with_context(|| {
            format!(
                "column `{column}` not found in {path}; headers: {}",
                headers.iter().collect::<Vec<_>>().join(", ")
            )
        })?;
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("row {} of {path}", row + 2))?;
        let cell = record
            .get(index)
            .with_context(|| format!("row {} of {path} is short", row + 2))?;
        let value: f64 = cell
            .trim()
            .parse()
            .with_context(|| format!("row {} of {path}: `{cell}` is not a number", row + 2))?;
        values.push(value);
    }
    Ok(values)
}

fn cmd_mean_precision(detected: &str, truth: &str) -> Result<ExitCode> {
    let (dpath, dcol) = split_csv_column(detected)?;
    let (tpath, tcol) = split_csv_column(truth)?;
    let detected = read_csv_column(dpath, dcol)?;
    let truth = read_csv_column(tpath, tcol)?;
    let value = mean_precision(&detected, &truth)?;
    println!("mean precision: {value:.4}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_ap(pred_path: &Path, gt_path: &Path, iou: &str) -> Result<ExitCode> {
    let thresholds: Vec<f64> = if iou.eq_ignore_ascii_case("coco") {
        COCO_THRESHOLDS.to_vec()
    } else {
        let t: f64 = iou
            .parse()
            .ok()
            .filter(|t| *t > 0.0 && *t < 1.0)
            .with_context(|| format!("--iou must be in (0, 1) or `coco`, got `{iou}`"))?;
        vec![t]
    };

    let pred_bytes = fs::read(pred_path)
        .with_context(|| format!("cannot read {}", pred_path.display()))?;
    let gt_bytes =
        fs::read(gt_path).with_context(|| format!("cannot read {}", gt_path.display()))?;
    let pred = parse_segmentation(&pred_bytes, None)?;
    let gt = parse_segmentation(&gt_bytes, None)?;
    if (pred.width, pred.height) != (gt.width, gt.height) {
        bail!(
            "prediction masks are {}x{} but truth masks are {}x{}",
            pred.width,
            pred.height,
            gt.width,
            gt.height
        );
    }

    let classes = [MaskClass::Plant, MaskClass::Head, MaskClass::Leaf];
    let mut class_aps = Vec::new();
    for class in classes {
        let truths: Vec<BitMask> = gt
            .instances_of(class)
            .map(|i| i.mask.clone())
            .collect();
        if truths.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = pred
            .instances_of(class)
            .map(|i| Detection {
                mask: i.mask.clone(),
                score: i.score,
            })
            .collect();
        let mut sum = 0.0;
        for &t in &thresholds {
            sum += average_precision(&dets, &truths, t)?;
        }
        let ap = sum / thresholds.len() as f64;
        println!("ap {}: {ap:.4}", class.as_str());
        class_aps.push(ap);
    }
    if class_aps.is_empty() {
        bail!("ground truth {} has no instances", gt_path.display());
    }
    let map = class_aps.iter().sum::<f64>() / class_aps.len() as f64;
    println!("map: {map:.4}");
    Ok(ExitCode::SUCCESS)
}
