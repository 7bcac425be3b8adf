//! Training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{eval_scene_seeds, train_scene_seed, RunConfig};
use super::eval::{evaluate, smooth, EvalReport, SMOOTHING_WINDOW};
use super::scene::{generate_scene, SyntheticScene};
use super::HarnessError;
use crate::layers::Ctx;
use crate::matching::{set_criterion, CostWeights, CriterionError, LossWeights, MatchingError};
use crate::model::{save_checkpoint, Model};
use crate::numerics::{AdamW, Graph, ParamGrads};
use crate::refpoints::MeshGrid;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

/// One line of the training log; losses are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub classification: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: EvalReport,
    pub log: Vec<LogRecord>,
    pub output_dir: PathBuf,
}

struct ImageStep {
    total: f64,
    classification: f64,
    box_l1: f64,
    box_giou: f64,
    grads: ParamGrads,
}

fn non_finite(iteration: usize, component: &str) -> HarnessError {
    HarnessError::NonFinite { iteration, component: component.to_string() }
}

fn check_in_grid(grid: &MeshGrid, points: &crate::numerics::Tensor) -> bool {
    (0..points.rows()).all(|i| {
        let r = points.row(i);
        grid.cell(i).contains(crate::geometry::Point2::new(r[0], r[1]))
    })
}

fn image_step(
    model: &Model,
    scene: &SyntheticScene,
    cost: &CostWeights,
    weights: &LossWeights,
    iteration: usize,
) -> Result<ImageStep, HarnessError> {
    let graph = Graph::new();
    let out = model.forward_with(Ctx::new(&graph, &model.params), &scene.image)?;
    if cfg!(debug_assertions) {
        let grid = model.mesh_grid();
        for layer in &out.layers {
            debug_assert!(
                check_in_grid(&grid, &layer.outputs.references.value()),
                "reference point left its cell at iteration {iteration}"
            );
        }
    }
    if let Some(op) = graph.first_non_finite() {
        return Err(non_finite(iteration, op));
    }
    let crit = match set_criterion(&out.layer_outputs(), &scene.annotations, cost, weights) {
        Err(CriterionError::Matching(MatchingError::NonFinite { .. })) => {
            return Err(non_finite(iteration, "matching cost"))
        }
        r => r?,
    };
    let b = &crit.breakdown;
    for (name, v) in
        [("classification", b.classification), ("box_l1", b.box_l1), ("box_giou", b.box_giou), ("total", b.total)]
    {
        if !v.is_finite() {
            return Err(non_finite(iteration, name));
        }
    }
    if let Some(op) = graph.first_non_finite() {
        return Err(non_finite(iteration, op));
    }
    let grads = graph.backward(crit.total)?.param_grads(&model.params);
    if !grads.all_finite() {
        return Err(non_finite(iteration, "gradient"));
    }
    Ok(ImageStep { total: b.total, classification: b.classification, box_l1: b.box_l1, box_giou: b.box_giou, grads })
}

/// Trains from scratch, writing the log, checkpoint, report and resolved
/// config into `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string())?;

    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let scene_params = cfg.scene_params();
    let (cost, weights) = (cfg.cost_weights(), cfg.loss_weights());
    let mut optim = AdamW::new(&model.params, cfg.weight_decay);
    let mut log_file = BufWriter::new(File::create(dir.join(LOG_FILE))?);
    let mut log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let iteration = it + 1;
        let mut grads = ParamGrads::zeros_like(&model.params);
        let mut record = LogRecord {
            iteration,
            lr: cfg.lr_at(it),
            loss: 0.0,
            classification: 0.0,
            box_l1: 0.0,
            box_giou: 0.0,
            grad_norm: 0.0,
        };
        for b in 0..cfg.batch_size {
            let scene = generate_scene(&scene_params, train_scene_seed(cfg.seed, it, b, cfg.batch_size))?;
            let step = image_step(&model, &scene, &cost, &weights, iteration)?;
            grads.accumulate(&step.grads);
            record.loss += step.total;
            record.classification += step.classification;
            record.box_l1 += step.box_l1;
            record.box_giou += step.box_giou;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.scale(inv);
        record.loss *= inv;
        record.classification *= inv;
        record.box_l1 *= inv;
        record.box_giou *= inv;
        record.grad_norm = grads.global_norm();
        writeln!(log_file, "{}", serde_json::to_string(&record)?)?;
        log_file.flush()?;
        optim.step(&mut model.params, &grads, record.lr);
        log.push(record);
    }
    drop(log_file);

    save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    let mut report = evaluate(&model, &scene_params, eval_scene_seeds(cfg.eval_scenes), cost, cfg.score_threshold)?;
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    report.loss_curve = smooth(&losses, SMOOTHING_WINDOW);
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(TrainOutcome { model, report, log, output_dir: dir })
}

/// Reads a training log, skipping a truncated final line.
pub fn read_log(path: &std::path::Path) -> Result<Vec<LogRecord>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}
