//! Flat run configuration. Every key of the reference training table is
//! accepted under its own name; keys without a mechanism here must keep the
//! value that matches this implementation (see [`RunConfig::validate`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{SceneMode, SceneParams};
use super::HarnessError;
use crate::matching::{CostWeights, LossWeights};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Optimizer and schedule.
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub warm_up: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,

    // Architecture.
    pub hidden_dim: usize,
    pub nheads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dim_feedforward: usize,
    pub num_queries: usize,
    pub dropout: f64,
    pub transformer_activation: String,
    pub k_pe_temp: f64,
    pub q_point_pe_temp: f64,
    pub q_bbox_pe_temp: f64,
    pub patch_size: usize,
    pub movable: bool,
    pub sdg: bool,
    pub peca: bool,
    pub detach: bool,

    // Losses and matching costs.
    pub class_loss: f64,
    pub bbox_loss: f64,
    pub giou_loss: f64,
    pub mask_loss: f64,
    pub obj_loss: f64,
    pub class_cost: f64,
    pub bbox_cost: f64,
    pub giou_cost: f64,
    pub obj_cost: f64,
    pub inner_cost: f64,
    pub focal_alpha: f64,

    // Data.
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub scene_mode: SceneMode,

    // Evaluation and output.
    pub eval_scenes: usize,
    pub score_threshold: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let cost = CostWeights::default();
        let loss = LossWeights::default();
        let scene = SceneParams::default();
        Self {
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            warm_up: 400,
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            hidden_dim: m.hidden_dim,
            nheads: m.nheads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            dim_feedforward: m.dim_feedforward,
            num_queries: m.num_queries,
            dropout: 0.0,
            transformer_activation: "relu".into(),
            k_pe_temp: m.k_pe_temp,
            q_point_pe_temp: m.q_point_pe_temp,
            q_bbox_pe_temp: m.q_bbox_pe_temp,
            patch_size: m.patch_size,
            movable: m.movable,
            sdg: m.sdg,
            peca: m.peca,
            detach: m.detach,
            class_loss: loss.class,
            bbox_loss: loss.l1,
            giou_loss: loss.giou,
            mask_loss: 1.0,
            obj_loss: 0.0,
            class_cost: cost.class,
            bbox_cost: cost.l1,
            giou_cost: cost.giou,
            obj_cost: 0.0,
            inner_cost: cost.inner,
            focal_alpha: cost.focal_alpha,
            image_size: scene.image_size,
            channels: scene.channels,
            num_classes: scene.num_classes,
            min_objects: scene.min_objects,
            max_objects: scene.max_objects,
            scene_mode: scene.mode,
            eval_scenes: 200,
            score_threshold: 0.3,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `key=value` overrides. Values are read as TOML literals, with
    /// bare words falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, HarnessError> {
        let mut table = toml::Table::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(HarnessError::Config(format!("unknown config key `{key}`")));
            }
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let value = match (&table[key], value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            table.insert(key.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.warm_up > self.iterations {
            return fail(format!("warm_up {} exceeds iterations {}", self.warm_up, self.iterations));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.dropout != 0.0 {
            return fail(format!("dropout {} is unsupported; training is deterministic (use 0)", self.dropout));
        }
        if self.transformer_activation != "relu" {
            return fail(format!(
                "transformer_activation `{}` is unsupported (only relu)",
                self.transformer_activation
            ));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return fail(format!("focal_alpha must lie in [0, 1], got {}", self.focal_alpha));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return fail(format!("score_threshold must lie in [0, 1), got {}", self.score_threshold));
        }
        for (name, v) in [
            ("class_loss", self.class_loss),
            ("bbox_loss", self.bbox_loss),
            ("giou_loss", self.giou_loss),
            ("class_cost", self.class_cost),
            ("bbox_cost", self.bbox_cost),
            ("giou_cost", self.giou_cost),
            ("inner_cost", self.inner_cost),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        self.model_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.scene_params().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            nheads: self.nheads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            dim_feedforward: self.dim_feedforward,
            num_queries: self.num_queries,
            grid_cols: None,
            grid_rows: None,
            num_classes: self.num_classes,
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            k_pe_temp: self.k_pe_temp,
            q_point_pe_temp: self.q_point_pe_temp,
            q_bbox_pe_temp: self.q_bbox_pe_temp,
            movable: self.movable,
            sdg: self.sdg,
            peca: self.peca,
            detach: self.detach,
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        let grid_cols = self.model_config().grid().map(|g| g.cols).unwrap_or(1);
        SceneParams {
            image_size: self.image_size,
            channels: self.channels,
            num_classes: self.num_classes,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            mode: self.scene_mode,
            grid_cols,
        }
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            class: self.class_cost,
            l1: self.bbox_cost,
            giou: self.giou_cost,
            inner: self.inner_cost,
            focal_alpha: self.focal_alpha,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { class: self.class_loss, l1: self.bbox_loss, giou: self.giou_loss, focal_alpha: self.focal_alpha }
    }

    /// Linear ramp to `lr` over the first `warm_up` iterations (0-based
    /// `iteration`), constant afterwards.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.warm_up {
            self.lr * (iteration + 1) as f64 / self.warm_up as f64
        } else {
            self.lr
        }
    }
}

/// Seed of training scene `index` within `iteration`.
pub fn train_scene_seed(run_seed: u64, iteration: usize, index: usize, batch: usize) -> u64 {
    (run_seed << 32) ^ (iteration * batch + index) as u64
}

/// Held-out scenes live in a range training never reaches.
pub const EVAL_SEED_BASE: u64 = 1 << 62;

pub fn eval_scene_seeds(count: usize) -> std::ops::Range<u64> {
    EVAL_SEED_BASE..EVAL_SEED_BASE + count as u64
}
