//! Command-line surface: dataset synthesis, training, evaluation (with the
//! four-row ablation table), inference with overlays, the gradient-check
//! harness, and a config dump.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 validation
//! error (bad flags, bad config, inconsistent inputs), 2 runtime failure
//! (IO, corrupt artifacts, numeric divergence).
//!
//! Detections file format (one per `infer` run): a `size=HxW` header, then
//! one line per instance, `class=<id> score=<float> rle=<ints>`, where the
//! run lengths scan the mask row-major and alternate off/on starting with
//! off, summing to H*W. This is a plain internal format, not COCO RLE.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::data::{dataset_hash, decode_image, generate_dataset, load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Detection, EvalReport};
use crate::gradcheck;
use crate::supervision::Scene;
use crate::training::{train, PepModel};
use crate::viz;

#[derive(Parser)]
#[command(name = "pep", version, about = "Instance segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; optionally the ablation table.
    Eval(EvalArgs),
    /// Run a checkpoint on one image and write detections.
    Infer(InferArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the default configuration.
    PrintConfig,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Probability that a placed instance overlaps an existing one.
    #[arg(long, default_value_t = 0.7)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from `synth` or COCO-shaped polygons).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, loger, and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for report.txt and the run manifest.
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    /// Evaluate the four mechanism combinations from this one checkpoint.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PNG.
    #[arg(long)]
    image: PathBuf,
    /// Output directory for detections.txt and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Also write overlay.png with contours and translucent fills.
    #[arg(long)]
    overlay: bool,
    /// Drop detections scoring below this.
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Negate the analytic gradients; the run must then fail.
    #[arg(long)]
    sabotage: bool,
    /// Check a single term (perceiving, excavating, excavating-cls, matrix,
    /// mask) instead of all five.
    #[arg(long)]
    term: Option<String>,
}

/// 0 success, 1 validation error, 2 runtime failure.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidInput(_)
        | Error::Dataset(_)
        | Error::RleUnsupported { .. }
        | Error::ClassCountMismatch { .. } => 1,
        Error::ReadFile { .. }
        | Error::WriteFile { .. }
        | Error::Json { .. }
        | Error::Image { .. }
        | Error::Checkpoint { .. }
        | Error::NonFiniteLoss { .. }
        | Error::Eval(_) => 2,
    }
}

/// Parses argv and runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the same channel; those are
            // not validation failures.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { 0 } else { 1 };
        }
    };
    let outcome = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Infer(a) => cmd_infer(&a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a),
        Cmd::PrintConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))
        .map_err(|e| Error::WriteFile { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::WriteFile { path: path.to_path_buf(), source: e })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::WriteFile { path: dir.to_path_buf(), source: e })
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::InvalidInput("--n must be at least 1".into()));
    }
    if a.size % 32 != 0 {
        return Err(Error::InvalidInput(format!(
            "size must be a multiple of 32, got {}",
            a.size
        )));
    }
    crate::backbone::Backbone::check_input(a.size, a.size)?;
    if !(0.0..=1.0).contains(&a.overlap) {
        return Err(Error::InvalidInput(format!(
            "overlap must be in [0, 1], got {}",
            a.overlap
        )));
    }
    let cfg = DataConfig {
        image_size: a.size,
        overlap_bias: a.overlap,
        seed: a.seed,
        ..DataConfig::default()
    };
    let scenes = generate_dataset(&cfg, a.n);
    save_dataset(&scenes, &a.out)?;
    let hash = dataset_hash(&a.out)?;
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        data: &'a DataConfig,
        images: usize,
        seed: u64,
        dataset_hash: &'a str,
    }
    write_json(
        &a.out.join("manifest.json"),
        &Manifest { data: &cfg, images: a.n, seed: a.seed, dataset_hash: &hash },
    )?;
    println!("wrote {} images to {}", a.n, a.out.display());
    Ok(())
}

fn load_scenes(dir: &Path) -> Result<(Vec<Scene>, String)> {
    let loaded = load_dataset(dir)?;
    if loaded.skipped > 0 {
        eprintln!("warning: skipped {} malformed annotations", loaded.skipped);
    }
    let hash = dataset_hash(dir)?;
    Ok((loaded.scenes, hash))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let (scenes, hash) = load_scenes(&a.data)?;
    let report = train(&cfg, &scenes, Some(&hash), &a.out)?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        report.steps_run,
        report.final_loss,
        report.checkpoint.display()
    );
    Ok(())
}

/// The four Table-style rows: which mechanisms run at inference time.
const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("baseline+excavating", true, false),
    ("baseline+purifying", false, true),
    ("full", true, true),
];

fn check_classes(model_classes: usize, scenes: &[Scene]) -> Result<()> {
    let max_class = scenes
        .iter()
        .flat_map(|s| s.instances.iter().map(|i| i.class_id))
        .max()
        .unwrap_or(0);
    if max_class > model_classes {
        return Err(Error::ClassCountMismatch {
            checkpoint: model_classes,
            requested: max_class,
        });
    }
    Ok(())
}

fn infer_all(model: &PepModel, store: &crate::params::ParamStore, scenes: &[Scene], min_score: f64)
    -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for scene in scenes {
        dets.extend(model.infer(store, &scene.image, scene.id, min_score)?);
    }
    Ok(dets)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, store) = PepModel::from_checkpoint(&a.checkpoint)?;
    let (scenes, hash) = load_scenes(&a.data)?;
    check_classes(model.cfg.num_classes, &scenes)?;
    ensure_dir(&a.out)?;
    let eval_cfg = crate::config::EvalConfig::default();
    let mut report_lines: Vec<String> = Vec::new();

    let evaluate_with = |model: &PepModel| -> Result<EvalReport> {
        let dets = infer_all(model, &store, &scenes, 0.0)?;
        evaluate(&dets, &scenes, model.cfg.num_classes, eval_cfg.size_buckets)
    };

    if a.ablation {
        let fmt = |v: Option<f64>| v.map_or("undef".to_owned(), |x| format!("{x:.4}"));
        println!(
            "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "row", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"
        );
        for (name, excavating, purifying) in ABLATION_ROWS {
            let mut cfg = model.cfg.clone();
            cfg.enable_excavating = excavating;
            cfg.enable_purifying = purifying;
            let (row_model, _) = PepModel::new(&cfg, 0);
            let rep = evaluate_with(&PepModel { cfg, ..row_model })?;
            println!(
                "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                name,
                fmt(rep.ap),
                fmt(rep.ap50),
                fmt(rep.ap75),
                fmt(rep.ap_s),
                fmt(rep.ap_m),
                fmt(rep.ap_l)
            );
            for line in rep.lines() {
                report_lines.push(format!("{name}.{line}"));
            }
        }
    } else {
        let rep = evaluate_with(&model)?;
        for line in rep.lines() {
            println!("{line}");
            report_lines.push(line);
        }
    }
    write_text(&a.out.join("report.txt"), &(report_lines.join("\n") + "\n"))?;
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        model: &'a crate::config::ModelConfig,
        checkpoint: &'a Path,
        dataset_hash: &'a str,
        ablation: bool,
    }
    write_json(
        &a.out.join("manifest.json"),
        &Manifest {
            model: &model.cfg,
            checkpoint: &a.checkpoint,
            dataset_hash: &hash,
            ablation: a.ablation,
        },
    )
}

/// Row-major alternating off/on run lengths; the first count is an off run.
fn mask_rle(mask: &Array2<bool>) -> Vec<usize> {
    let mut counts = vec![0usize];
    let mut current = false;
    for &v in mask.iter() {
        if v == current {
            *counts.last_mut().expect("nonempty") += 1;
        } else {
            counts.push(1);
            current = v;
        }
    }
    counts
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.min_score) {
        return Err(Error::InvalidInput(format!(
            "min-score must be in [0, 1], got {}",
            a.min_score
        )));
    }
    let (model, store) = PepModel::from_checkpoint(&a.checkpoint)?;
    let image = decode_image(&a.image)?;
    let (_, h, w) = image.dim();
    crate::backbone::Backbone::check_input(h, w)?;
    let dets = model.infer(&store, &image, 0, a.min_score)?;
    ensure_dir(&a.out)?;

    let mut body = format!("size={h}x{w}\n");
    for d in &dets {
        let rle: Vec<String> = mask_rle(&d.mask).iter().map(ToString::to_string).collect();
        body.push_str(&format!(
            "class={} score={:.6} rle={}\n",
            d.class_id,
            d.score,
            rle.join(" ")
        ));
    }
    write_text(&a.out.join("detections.txt"), &body)?;
    if a.overlay {
        let masks: Vec<Array2<bool>> = dets.iter().map(|d| d.mask.clone()).collect();
        viz::save_overlay(&a.out.join("overlay.png"), &image, &masks)?;
    }
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        model: &'a crate::config::ModelConfig,
        checkpoint: &'a Path,
        image: &'a Path,
        min_score: f64,
    }
    write_json(
        &a.out.join("manifest.json"),
        &Manifest {
            model: &model.cfg,
            checkpoint: &a.checkpoint,
            image: &a.image,
            min_score: a.min_score,
        },
    )?;
    println!("{} instances", dets.len());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let terms: Vec<usize> = match &a.term {
        Some(name) => {
            let idx = gradcheck::TERM_NAMES
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "unknown term {name:?}; expected one of {:?}",
                        gradcheck::TERM_NAMES
                    ))
                })?;
            vec![idx]
        }
        None => (0..gradcheck::TERM_NAMES.len()).collect(),
    };
    let mut all_ok = true;
    for t in terms {
        let rep = gradcheck::check_term(t, a.sabotage)?;
        let status = if rep.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {:<14} max_rel_err={:.3e} probes={}",
            rep.term, rep.max_rel_err, rep.probes
        );
        all_ok &= rep.passed();
    }
    if !all_ok {
        return Err(Error::Eval("gradient check failed".into()));
    }
    Ok(())
}
