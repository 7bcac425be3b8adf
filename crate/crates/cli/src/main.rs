use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spdet_core::harness::config::RunConfig;
use spdet_core::harness::eval::evaluate;
use spdet_core::harness::export::{attention_dir, export_attention};
use spdet_core::harness::scene::{generate_scene, write_dataset, SceneMode, SceneParams};
use spdet_core::harness::train::train;
use spdet_core::harness::verify::{run_suite, Suite};
use spdet_core::harness::HarnessError;
use spdet_core::matching::CostWeights;
use spdet_core::model::load_checkpoint;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "spdet", version, about = "Train, evaluate and verify the salient-point detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write log, checkpoint and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on generated scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed range `a..b` (end exclusive).
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value = "normal")]
        mode: SceneMode,
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
    },
    /// Export per-head attention fields for selected queries.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        /// Comma-separated query ids.
        #[arg(long, value_delimiter = ',')]
        queries: Vec<usize>,
        /// Decoder layer, 0-based.
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value = "normal")]
        mode: SceneMode,
        #[arg(long, default_value = "exports")]
        out: PathBuf,
    },
    /// Run a property suite and print one JSON line per check.
    Verify {
        #[arg(long)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset (images plus a JSON-lines index).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "normal")]
        mode: SceneMode,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        /// Query-grid columns bounding slender short sides.
        #[arg(long, default_value_t = 8)]
        grid_cols: usize,
    },
}

fn parse_seeds(s: &str) -> Result<std::ops::Range<u64>, HarnessError> {
    let bad = || HarnessError::Config(format!("seed range `{s}` is not a..b with a < b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok(a..b)
}

fn scene_for_model(model: &spdet_core::model::Model, mode: SceneMode, min: usize, max: usize) -> SceneParams {
    SceneParams {
        image_size: model.config.image_size,
        channels: model.config.channels,
        num_classes: model.config.num_classes,
        min_objects: min,
        max_objects: max,
        mode,
        grid_cols: model.mesh_grid().cols,
    }
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Train { config, overrides } => {
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let cfg = base.with_overrides(&overrides)?;
            let out = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary(&out.report))?);
            eprintln!("wrote {}", out.output_dir.display());
            Ok(true)
        }
        Command::Eval { checkpoint, seeds, mode, min_objects, max_objects, threshold } => {
            let seeds = parse_seeds(&seeds)?;
            let model = load_checkpoint(&checkpoint)?;
            let scene = scene_for_model(&model, mode, min_objects, max_objects);
            scene.validate()?;
            let report = evaluate(&model, &scene, seeds, CostWeights::default(), threshold)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::ExportAttn { checkpoint, scene_seed, queries, layer, mode, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let params = scene_for_model(&model, mode, 1, 3);
            let scene = generate_scene(&params, scene_seed)?;
            let dir = attention_dir(&out, scene_seed, layer);
            let export = export_attention(&model, &scene, &queries, layer, &dir)?;
            println!("{}", serde_json::to_string_pretty(&export)?);
            eprintln!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Verify { suite, seed } => {
            let report = run_suite(suite, seed);
            print!("{}", report.to_json_lines());
            for c in report.failures() {
                eprintln!("FAIL {} / {}: {} > {} ({})", c.suite, c.name, c.measured, c.threshold, c.detail);
            }
            Ok(report.passed())
        }
        Command::GenData {
            out,
            count,
            mode,
            first_seed,
            image_size,
            channels,
            min_objects,
            max_objects,
            grid_cols,
        } => {
            let params =
                SceneParams { image_size, channels, num_classes: 2, min_objects, max_objects, mode, grid_cols };
            let records = write_dataset(&params, first_seed, count, &out)?;
            eprintln!("wrote {} scenes to {}", records.len(), out.display());
            Ok(true)
        }
    }
}

fn summary(r: &spdet_core::harness::EvalReport) -> serde_json::Value {
    serde_json::json!({
        "scenes": r.scenes,
        "matched_iou": r.matched_iou,
        "salient_rate": r.salient_rate,
        "recall": r.recall,
        "per_class_recall": r.per_class_recall,
        "small_object_iou": r.small_object_iou,
        "loss_at_100": r.smoothed_loss_at(100),
        "loss_final": r.loss_curve.last(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("spdet") {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_config);
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_FAILURE })
        }
    }
}
