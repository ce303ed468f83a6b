use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use monosim::harness::{
    evaluation_scenes, gradient_suite, initial_student, metrics_csv, prepare_samples, read_scenes, teacher_forward,
    train_with, training_scenes, write_scene, Checkpoint, HarnessConfig,
};
use monosim::metrics::{ap_report_csv, RecallSet};
use monosim::projection::{compute_validity_mask, count_valid, render_points};
use monosim::response::{filter_soft_labels, list_label_files, read_label_file, write_label_file, ThresholdPolicy};

#[derive(Parser)]
#[command(name = "monosim", version, about = "Cross-modal feature simulation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write held-out synthetic scenes with ground truth and teacher predictions.
    GenScenes {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Optional `key = value` config for the scene parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a student and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
    },
    /// Per-class AP of a checkpoint, as CSV on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory or file; defaults to the checkpoint's held-out scenes.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        recall_set: Option<RecallSet>,
    },
    /// Keep teacher predictions at or above per-class confidence thresholds.
    FilterLabels {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        car_threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        ped_threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        cyc_threshold: f64,
    },
    /// Rendered teacher scene features and validity mask of one scene, as CSV.
    RenderDebug {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable block.
    CheckGrads {
        #[arg(long, default_value_t = monosim::harness::gradients::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = monosim::harness::gradients::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn load_config(path: Option<&Path>) -> Result<HarnessConfig> {
    match path {
        Some(p) => HarnessConfig::from_file(p).with_context(|| format!("reading config `{}`", p.display())),
        None => Ok(HarnessConfig::default()),
    }
}

fn gen_scenes(seed: u64, count: usize, out_dir: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = HarnessConfig {
        seed,
        eval_scenes: count,
        ..load_config(config)?
    };
    let teacher_dir = out_dir.join("teacher");
    for scene in evaluation_scenes(&cfg)? {
        write_scene(out_dir, &scene)?;
        let teacher = teacher_forward(&scene, cfg.teacher_noise)?;
        write_label_file(&teacher_dir, &teacher.predictions)?;
    }
    println!("wrote {count} scenes to {}", out_dir.display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    steps: Option<usize>,
    seed: Option<u64>,
    out_checkpoint: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.steps = steps.unwrap_or(cfg.steps);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let samples = prepare_samples(&cfg, training_scenes(&cfg)?)?;
    let log_every = (cfg.steps / 10).max(1);
    let run = train_with(&cfg, initial_student(&cfg)?, &samples, |r| {
        if r.step % log_every == 0 {
            eprintln!(
                "step {:>5}  L {:.4}  response {:.4}  scene {:.4}  roi {:.4}",
                r.step, r.total, r.response, r.scene, r.roi
            );
        }
    })?;
    if !run.teacher_unchanged() {
        bail!("teacher state changed during training");
    }
    if let Some(path) = metrics {
        fs::write(path, metrics_csv(&run.reports)).with_context(|| format!("writing `{}`", path.display()))?;
    }
    if let (Some(first), f) = (run.reports.first(), &run.final_probe) {
        println!(
            "scene loss {:.4} -> {:.4}, RoI loss {:.4} -> {:.4}, alpha {:.4}, beta {:.4}",
            first.scene, f.scene, first.roi, f.roi, f.alpha, f.beta
        );
    }
    Checkpoint {
        config: cfg,
        student: run.student,
    }
    .save(out_checkpoint)?;
    println!("checkpoint written to {}", out_checkpoint.display());
    Ok(())
}

fn eval(checkpoint: &Path, scenes: Option<&Path>, iou: Option<f64>, recall_set: Option<RecallSet>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading `{}`", checkpoint.display()))?;
    let scenes = match scenes {
        Some(p) => read_scenes(p)?,
        None => evaluation_scenes(&ckpt.config)?,
    };
    let iou = iou.unwrap_or(ckpt.config.eval_iou);
    if !(iou > 0.0 && iou <= 1.0) {
        bail!("--iou must lie in (0, 1], got {iou}");
    }
    let recall_set = recall_set.unwrap_or(ckpt.config.recall_set);
    let records = monosim::harness::evaluate(&ckpt.student, &scenes, iou, recall_set)?;
    print!("{}", ap_report_csv(&records));
    Ok(())
}

fn filter_labels(in_dir: &Path, out_dir: &Path, policy: &ThresholdPolicy) -> Result<()> {
    let files = list_label_files(in_dir)?;
    let (mut kept, mut total) = (0, 0);
    for file in &files {
        let labels = read_label_file(file).with_context(|| format!("reading `{}`", file.display()))?;
        let filtered = filter_soft_labels(&labels, policy)?;
        total += labels.len();
        kept += filtered.len();
        write_label_file(out_dir, &filtered)?;
    }
    println!("kept {kept} of {total} labels across {} files", files.len());
    Ok(())
}

fn render_debug(scene_path: &Path, out: &Path) -> Result<()> {
    let scenes = read_scenes(scene_path)?;
    let [scene] = scenes.as_slice() else {
        bail!("`{}` holds {} scenes, expected one", scene_path.display(), scenes.len());
    };
    let teacher = teacher_forward(scene, 0.0)?;
    let map = render_points(&teacher.scene, &scene.camera, scene.height(), scene.width())?;
    let mask = compute_validity_mask(&map);
    let (c, h, w) = map.dims();
    let mut csv = String::from("row,col,valid");
    for ch in 0..c {
        write!(csv, ",f{ch}")?;
    }
    csv.push('\n');
    for row in 0..h {
        for col in 0..w {
            write!(csv, "{row},{col},{}", mask.get(row, col))?;
            for ch in 0..c {
                write!(csv, ",{}", map.get(ch, row, col))?;
            }
            csv.push('\n');
        }
    }
    fs::write(out, csv).with_context(|| format!("writing `{}`", out.display()))?;
    println!("{h}x{w} map, {c} channels, {} valid pixels", count_valid(&mask));
    Ok(())
}

fn check_grads(epsilon: f64, tolerance: f64) -> Result<bool> {
    let mut all = true;
    for case in gradient_suite(epsilon, tolerance)? {
        let ok = case.report.passed();
        all &= ok;
        println!(
            "{} {:<38} trial {}  max relative error {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            case.name,
            case.trial,
            case.report.max_relative_error()
        );
    }
    Ok(all)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::GenScenes {
            seed,
            count,
            out_dir,
            config,
        } => gen_scenes(seed, count, &out_dir, config.as_deref())?,
        Command::Train {
            config,
            steps,
            seed,
            out_checkpoint,
            metrics_csv,
        } => train(config.as_deref(), steps, seed, &out_checkpoint, metrics_csv.as_deref())?,
        Command::Eval {
            checkpoint,
            scenes,
            iou,
            recall_set,
        } => eval(&checkpoint, scenes.as_deref(), iou, recall_set)?,
        Command::FilterLabels {
            in_dir,
            out_dir,
            car_threshold,
            ped_threshold,
            cyc_threshold,
        } => filter_labels(
            &in_dir,
            &out_dir,
            &ThresholdPolicy::new(car_threshold, ped_threshold, cyc_threshold)?,
        )?,
        Command::RenderDebug { scene, out } => render_debug(&scene, &out)?,
        Command::CheckGrads { epsilon, tolerance } => {
            if !check_grads(epsilon, tolerance)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
