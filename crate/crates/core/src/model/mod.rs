//! The detector: patch encoder, decoder stack and per-layer prediction heads.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, content_logits, peca_logits, sdg_log_weights, AttentionConfig, AttentionError, FeatureGrid, PecaInputs,
    ScalingTransform, SdgHead, SdgOutput, SideReduction,
};
use crate::geometry::{inverse_sigmoid, BoxXYXY, Point2, SideDistances};
use crate::layers::{fill_param, init_tensor, Ctx, Init, LayerNorm, Linear, Mlp};
use crate::matching::LayerOutputs;
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::posenc::{encode_columns, PeConfig, PosEncError};
use crate::refpoints::{
    boxes_from_points_sides, realize_points, realize_sides, refine_logits, LayerPrediction, MeshGrid, RefPointError,
    INITIAL_SIDE,
};

/// Class-logit bias giving every class a 1% prior probability.
pub const CLASS_PRIOR_BIAS: f64 = -4.595;
/// Standard deviation of the learned query content at initialization.
pub const CONTENT_INIT_STD: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    PosEnc(#[from] PosEncError),
    #[error(transparent)]
    RefPoint(#[from] RefPointError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub nheads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dim_feedforward: usize,
    pub num_queries: usize,
    /// Explicit query grid; derived from `num_queries` when absent.
    pub grid_cols: Option<usize>,
    pub grid_rows: Option<usize>,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub k_pe_temp: f64,
    pub q_point_pe_temp: f64,
    pub q_bbox_pe_temp: f64,
    pub movable: bool,
    pub sdg: bool,
    pub peca: bool,
    /// Stop gradients through geometry at every decoder layer boundary.
    pub detach: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            nheads: 8,
            enc_layers: 3,
            dec_layers: 3,
            dim_feedforward: 256,
            num_queries: 64,
            grid_cols: None,
            grid_rows: None,
            num_classes: 2,
            image_size: 64,
            channels: 1,
            patch_size: 8,
            k_pe_temp: 20.0,
            q_point_pe_temp: 20.0,
            q_bbox_pe_temp: 20.0,
            movable: true,
            sdg: true,
            peca: true,
            detach: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(4) {
            return bad(format!("hidden_dim {} must be a positive multiple of 4", self.hidden_dim));
        }
        AttentionConfig::new(self.hidden_dim, self.nheads)?;
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1".into());
        }
        if self.dim_feedforward == 0 || self.num_classes == 0 || self.channels == 0 {
            return bad("dim_feedforward, num_classes and channels must be positive".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        for t in [self.k_pe_temp, self.q_point_pe_temp, self.q_bbox_pe_temp] {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("temperature {t} must be positive"));
            }
        }
        let grid = self.grid()?;
        if grid.len() != self.num_queries {
            return bad(format!("grid {}x{} does not hold {} queries", grid.cols, grid.rows, self.num_queries));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<MeshGrid, ModelError> {
        match (self.grid_cols, self.grid_rows) {
            (Some(c), Some(r)) => Ok(MeshGrid::new(c, r)?),
            (None, None) => Ok(MeshGrid::for_queries(self.num_queries)?),
            _ => Err(ModelError::Config("grid_cols and grid_rows must be given together".into())),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.hidden_dim, self.nheads).expect("validated")
    }

    pub fn feature_grid(&self) -> FeatureGrid {
        let side = self.image_size / self.patch_size;
        FeatureGrid { cols: side, rows: side }
    }

    /// Encoding width of a single scalar coordinate.
    pub fn pe_scalar_dim(&self) -> usize {
        self.hidden_dim / 2
    }
}

/// Pixels in `[0, 1]`, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, ModelError> {
        if pixels.len() != size * size * channels {
            return Err(ModelError::Config(format!("{} pixels for a {size}x{size}x{channels} image", pixels.len())));
        }
        Ok(Self { size, channels, pixels })
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    /// Non-overlapping `patch × patch` blocks, one row per block in row-major
    /// block order; each row lists pixels row-major with channels interleaved.
    pub fn patches(&self, patch: usize) -> Result<Tensor, ModelError> {
        if patch == 0 || !self.size.is_multiple_of(patch) {
            return Err(ModelError::Config(format!("image size {} is not divisible by patch size {patch}", self.size)));
        }
        let side = self.size / patch;
        let width = patch * patch * self.channels;
        let mut data = Vec::with_capacity(side * side * width);
        for by in 0..side {
            for bx in 0..side {
                for y in by * patch..(by + 1) * patch {
                    let start = (y * self.size + bx * patch) * self.channels;
                    data.extend_from_slice(&self.pixels[start..start + patch * self.channels]);
                }
            }
        }
        Ok(Tensor::new(&[side * side, width], data)?)
    }
}

#[derive(Debug, Clone)]
struct AttentionProjections {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttentionProjections {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self, NumericsError> {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), d, d, true, Init::Xavier, rng);
        Ok(Self { q: lin("q")?, k: lin("k")?, v: lin("v")?, out: lin("out")? })
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    mlp: Mlp,
    norm: LayerNorm,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, hidden, d], Init::Xavier, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
        })
    }

    fn forward<'g>(&self, ctx: Ctx<'g>, x: Var<'g>) -> Result<Var<'g>, NumericsError> {
        let y = self.mlp.forward(ctx, x)?;
        self.norm.forward(ctx, x.add(y)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionProjections,
    attn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: AttentionProjections,
    self_norm: LayerNorm,
    cross_attn: AttentionProjections,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    scaling: ScalingTransform,
    side_map: SideReduction,
    sdg: Option<SdgHead>,
}

/// Per-layer box and point heads plus the two class heads: one for the
/// first decoder layer, one shared by every later layer.
#[derive(Debug, Clone)]
pub struct HeadBank {
    pub box_heads: Vec<Mlp>,
    pub point_heads: Vec<Mlp>,
    pub class_first: Linear,
    pub class_shared: Option<Linear>,
}

impl HeadBank {
    pub fn class_head(&self, layer: usize) -> &Linear {
        match (layer, &self.class_shared) {
            (0, _) | (_, None) => &self.class_first,
            (_, Some(shared)) => shared,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub heads: HeadBank,
    patch_embed: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    query_content: ParamId,
    initial_side_logits: ParamId,
    key_positions: Tensor,
    key_pe: Tensor,
    cell_origins: Tensor,
    cell_extent: Tensor,
}

/// Encoder tokens with their positions.
#[derive(Clone, Copy)]
pub struct EncoderOutput<'g> {
    /// `H_f·W_f × d`.
    pub tokens: Var<'g>,
    /// `H_f·W_f × d` key encodings at `k_pe_temp`.
    pub key_pe: Var<'g>,
    pub grid: FeatureGrid,
}

/// Everything one decoder layer produced, kept for losses and exports.
#[derive(Clone)]
pub struct DecoderTrace<'g> {
    pub outputs: LayerOutputs<'g>,
    /// Geometry the layer started from (`n × 2`, `n × 4`).
    pub points_in: Var<'g>,
    pub sides_in: Var<'g>,
    /// Refined geometry (`n × 2`, `n × 4`).
    pub sides: Var<'g>,
    pub point_logits: Var<'g>,
    /// Post-softmax cross-attention of every head, `n × H_f·W_f`.
    pub cross_weights: Vec<Var<'g>>,
    pub sdg: Option<SdgOutput<'g>>,
}

pub struct ForwardOutput<'g> {
    pub encoder: EncoderOutput<'g>,
    pub layers: Vec<DecoderTrace<'g>>,
}

impl<'g> ForwardOutput<'g> {
    pub fn layer_outputs(&self) -> Vec<LayerOutputs<'g>> {
        self.layers.iter().map(|l| l.outputs).collect()
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let att = config.attention();
        let patch_width = config.patch_size * config.patch_size * config.channels;
        let patch_embed = Linear::new(&mut store, "patch_embed", patch_width, d, true, Init::Xavier, &mut rng)?;
        let mut encoder = Vec::with_capacity(config.enc_layers);
        for i in 0..config.enc_layers {
            let name = format!("enc.{i}");
            encoder.push(EncoderLayer {
                attn: AttentionProjections::new(&mut store, &format!("{name}.attn"), d, &mut rng)?,
                attn_norm: LayerNorm::new(&mut store, &format!("{name}.attn_norm"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, config.dim_feedforward, &mut rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.dec_layers);
        for i in 0..config.dec_layers {
            let name = format!("dec.{i}");
            decoder.push(DecoderLayer {
                self_attn: AttentionProjections::new(&mut store, &format!("{name}.self_attn"), d, &mut rng)?,
                self_norm: LayerNorm::new(&mut store, &format!("{name}.self_norm"), d)?,
                cross_attn: AttentionProjections::new(&mut store, &format!("{name}.cross_attn"), d, &mut rng)?,
                cross_norm: LayerNorm::new(&mut store, &format!("{name}.cross_norm"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, config.dim_feedforward, &mut rng)?,
                scaling: ScalingTransform::new(&mut store, &format!("{name}.scaling"), d, &mut rng)?,
                side_map: SideReduction::new(&mut store, &format!("{name}.side_map"), d, &mut rng)?,
                sdg: if config.sdg {
                    Some(SdgHead::new(&mut store, &format!("{name}.sdg"), att, &mut rng)?)
                } else {
                    None
                },
            });
        }
        let mut box_heads = Vec::with_capacity(config.dec_layers);
        let mut point_heads = Vec::new();
        for i in 0..config.dec_layers {
            box_heads.push(Mlp::new(&mut store, &format!("heads.box.{i}"), &[d, d, d, 4], Init::Zeros, &mut rng)?);
            if config.movable {
                point_heads.push(Mlp::new(&mut store, &format!("heads.point.{i}"), &[d, d, 2], Init::Zeros, &mut rng)?);
            }
        }
        let c = config.num_classes;
        let class_first = Linear::new(&mut store, "heads.class.first", d, c, true, Init::Xavier, &mut rng)?;
        fill_param(&mut store, class_first.bias.expect("bias"), CLASS_PRIOR_BIAS);
        let class_shared = if config.dec_layers > 1 {
            let l = Linear::new(&mut store, "heads.class.shared", d, c, true, Init::Xavier, &mut rng)?;
            fill_param(&mut store, l.bias.expect("bias"), CLASS_PRIOR_BIAS);
            Some(l)
        } else {
            None
        };
        let n = config.num_queries;
        let query_content =
            store.add("query.content", init_tensor(&[n, d], Init::Normal(CONTENT_INIT_STD), &mut rng))?;
        let initial_side_logits =
            store.add("query.side_logits", Tensor::full(&[n, 4], inverse_sigmoid(INITIAL_SIDE)))?;

        let fgrid = config.feature_grid();
        let key_positions = fgrid.centers_tensor();
        let key_pe = {
            let g = Graph::new();
            let pe = PeConfig::new(config.pe_scalar_dim(), config.k_pe_temp)?;
            encode_columns(g.constant(key_positions.clone()), &pe)?.value()
        };
        let grid = config.grid()?;
        let origins: Vec<f64> = grid.cells().flat_map(|c| [c.origin.x, c.origin.y]).collect();
        let (ew, eh) = grid.extent();
        Ok(Self {
            heads: HeadBank { box_heads, point_heads, class_first, class_shared },
            config,
            params: store,
            patch_embed,
            encoder,
            decoder,
            query_content,
            initial_side_logits,
            key_positions,
            key_pe,
            cell_origins: Tensor::new(&[n, 2], origins)?,
            cell_extent: Tensor::new(&[1, 2], vec![ew, eh])?,
        })
    }

    pub fn mesh_grid(&self) -> MeshGrid {
        self.config.grid().expect("validated")
    }

    /// Cell centers of the encoder feature grid, `n × 2`.
    pub fn key_positions(&self) -> &Tensor {
        &self.key_positions
    }

    pub fn encode<'g>(&self, ctx: Ctx<'g>, image: &Image) -> Result<EncoderOutput<'g>, ModelError> {
        if image.size != self.config.image_size || image.channels != self.config.channels {
            return Err(ModelError::Config(format!(
                "expected a {0}x{0}x{1} image, got {2}x{2}x{3}",
                self.config.image_size, self.config.channels, image.size, image.channels
            )));
        }
        let att = self.config.attention();
        let patches = ctx.constant(image.patches(self.config.patch_size)?);
        let key_pe = ctx.constant(self.key_pe.clone());
        let mut x = self.patch_embed.forward(ctx, patches)?.add(key_pe)?;
        for layer in &self.encoder {
            let p = &layer.attn;
            let q = p.q.forward(ctx, x)?;
            let k = p.k.forward(ctx, x)?;
            let v = p.v.forward(ctx, x)?;
            let a = attend(&content_logits(q, k, att)?, v, att)?;
            let y = p.out.forward(ctx, a.output)?;
            x = layer.attn_norm.forward(ctx, x.add(y)?)?;
            x = layer.ffn.forward(ctx, x)?;
        }
        Ok(EncoderOutput { tokens: x, key_pe, grid: self.config.feature_grid() })
    }

    pub fn forward<'g>(&'g self, graph: &'g Graph, image: &Image) -> Result<ForwardOutput<'g>, ModelError> {
        self.forward_with(Ctx::new(graph, &self.params), image)
    }

    /// Forward pass reading parameters from `ctx` (which may hold a perturbed
    /// copy of [`Model::params`]).
    pub fn forward_with<'g>(&self, ctx: Ctx<'g>, image: &Image) -> Result<ForwardOutput<'g>, ModelError> {
        let cfg = &self.config;
        let att = cfg.attention();
        let encoder = self.encode(ctx, image)?;
        let point_pe = PeConfig::new(cfg.pe_scalar_dim(), cfg.q_point_pe_temp)?;
        let side_pe = PeConfig::new(cfg.pe_scalar_dim(), cfg.q_bbox_pe_temp)?;
        let origins = ctx.constant(self.cell_origins.clone());
        let extent = ctx.constant(self.cell_extent.clone());
        let n = cfg.num_queries;

        let mut content = ctx.param(self.query_content);
        let mut point_logits = ctx.constant(Tensor::zeros(&[n, 2]));
        let mut side_logits = ctx.param(self.initial_side_logits);
        let mut layers = Vec::with_capacity(self.decoder.len());
        for (l, layer) in self.decoder.iter().enumerate() {
            let points = realize_points(point_logits, origins, extent)?;
            let sides = realize_sides(side_logits);
            let qpe = encode_columns(points, &point_pe)?;
            let spe = if cfg.peca {
                let coords = boxes_from_points_sides(points, sides)?;
                Some(layer.side_map.forward(ctx, encode_columns(coords, &side_pe)?)?)
            } else {
                None
            };

            // Query self-attention with point and side encodings as extra channels.
            let p = &layer.self_attn;
            let q = p.q.forward(ctx, content)?;
            let k = p.k.forward(ctx, content)?;
            let v = p.v.forward(ctx, content)?;
            let mut logits = content_logits(q, k, att)?;
            let hd = att.head_dim();
            for (h, lg) in logits.iter_mut().enumerate() {
                let pe_h = qpe.slice(1, h * hd, (h + 1) * hd)?;
                *lg = lg.add(pe_h.matmul(pe_h.t()?)?)?;
                if let Some(s) = spe {
                    let s_h = s.slice(1, h * hd, (h + 1) * hd)?;
                    *lg = lg.add(s_h.matmul(s_h.t()?)?)?;
                }
            }
            let y = p.out.forward(ctx, attend(&logits, v, att)?.output)?;
            content = layer.self_norm.forward(ctx, content.add(y)?)?;

            // Cross-attention over encoder tokens.
            let p = &layer.cross_attn;
            let scaling = layer.scaling.forward(ctx, content)?;
            let inputs = PecaInputs {
                content_q: p.q.forward(ctx, content)?,
                content_k: p.k.forward(ctx, encoder.tokens)?,
                point_pe_q: qpe,
                side_pe_q: spe,
                key_pe: encoder.key_pe,
                scaling: Some(scaling),
            };
            let mut logits = peca_logits(&inputs, att)?;
            let sdg = match &layer.sdg {
                Some(head) => {
                    let out = head.forward(ctx, content, points, sides)?;
                    let logs = sdg_log_weights(out.centers, out.scales, &self.key_positions, att.heads())?;
                    for (lg, g) in logits.iter_mut().zip(logs) {
                        *lg = lg.add(g)?;
                    }
                    Some(out)
                }
                None => None,
            };
            let cross = attend(&logits, p.v.forward(ctx, encoder.tokens)?, att)?;
            let y = p.out.forward(ctx, cross.output)?;
            content = layer.cross_norm.forward(ctx, content.add(y)?)?;
            content = layer.ffn.forward(ctx, content)?;

            // Geometry refinement and predictions.
            let new_side_logits = refine_logits(side_logits, self.heads.box_heads[l].forward(ctx, content)?)?;
            let new_point_logits = match self.heads.point_heads.get(l) {
                Some(head) => refine_logits(point_logits, head.forward(ctx, content)?)?,
                None => point_logits,
            };
            let new_points = realize_points(new_point_logits, origins, extent)?;
            let new_sides = realize_sides(new_side_logits);
            let boxes = boxes_from_points_sides(new_points, new_sides)?;
            let class_logits = self.heads.class_head(l).forward(ctx, content)?;
            layers.push(DecoderTrace {
                outputs: LayerOutputs { class_logits, boxes, references: new_points },
                points_in: points,
                sides_in: sides,
                sides: new_sides,
                point_logits: new_point_logits,
                cross_weights: cross.weights,
                sdg,
            });
            (point_logits, side_logits) = if cfg.detach {
                (new_point_logits.stop_gradient(), new_side_logits.stop_gradient())
            } else {
                (new_point_logits, new_side_logits)
            };
        }
        Ok(ForwardOutput { encoder, layers })
    }

    /// Plain-value predictions of every decoder layer.
    pub fn predict(&self, image: &Image) -> Result<Vec<Vec<LayerPrediction>>, ModelError> {
        let graph = Graph::new();
        let out = self.forward(&graph, image)?;
        Ok(out.layers.iter().map(trace_predictions).collect())
    }
}

/// Reads one layer's predictions out of a trace.
pub fn trace_predictions(trace: &DecoderTrace<'_>) -> Vec<LayerPrediction> {
    let logits = trace.outputs.class_logits.value();
    let boxes = trace.outputs.boxes.value();
    let points = trace.outputs.references.value();
    let sides = trace.sides.value();
    (0..logits.rows())
        .map(|i| LayerPrediction {
            bbox: BoxXYXY::from_array([boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)]),
            class_logits: logits.row(i).to_vec(),
            reference: Point2::new(points.at(i, 0), points.at(i, 1)),
            sides: SideDistances::from_array([sides.at(i, 0), sides.at(i, 1), sides.at(i, 2), sides.at(i, 3)]),
        })
        .collect()
}
