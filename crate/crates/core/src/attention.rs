//! Multi-head attention, point-enhanced cross-attention logits, the
//! conditional scaling transform and side-directed Gaussian modulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point2, SideDistances};
use crate::layers::{fill_param, Ctx, Init, Linear, Mlp};
use crate::numerics::{concat, NumericsError, ParamStore, Tensor, Var};

/// Added to the Gaussian map before taking its log.
pub const SDG_LOG_FLOOR: f64 = 1e-8;
/// Lower bound on every attention scale `v`.
pub const SCALE_FLOOR: f64 = 1e-4;
/// Attention scale produced by a freshly initialized scale head.
pub const INITIAL_SCALE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadsDoNotDivide { dim: usize, heads: usize },
    #[error("attention scale {value} for head {head} is not strictly positive")]
    NonPositiveScale { head: usize, value: f64 },
    #[error("offset scale {value} for head {head} lies outside [-1, 1]")]
    OffsetOutOfRange { head: usize, value: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    model_dim: usize,
    heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self, AttentionError> {
        if heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(heads) {
            return Err(AttentionError::HeadsDoNotDivide { dim: model_dim, heads });
        }
        Ok(Self { model_dim, heads })
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    fn check_width(&self, op: &'static str, v: Var<'_>) -> Result<(), NumericsError> {
        let shape = v.shape();
        if shape.len() != 2 || shape[1] != self.model_dim {
            return Err(NumericsError::Shape {
                op,
                detail: format!("expected rows of width {}, got {shape:?}", self.model_dim),
            });
        }
        Ok(())
    }

    fn head<'g>(&self, v: Var<'g>, h: usize) -> Result<Var<'g>, NumericsError> {
        let hd = self.head_dim();
        v.slice(1, h * hd, (h + 1) * hd)
    }
}

/// Aggregated values plus the post-softmax weights of every head.
pub struct AttentionOutput<'g> {
    pub output: Var<'g>,
    pub weights: Vec<Var<'g>>,
}

/// Softmax over each head's `nq × nk` logits, then a weighted sum of that
/// head's value channels. Outputs are concatenated back to width `d`.
pub fn attend<'g>(
    logits: &[Var<'g>],
    values: Var<'g>,
    cfg: AttentionConfig,
) -> Result<AttentionOutput<'g>, NumericsError> {
    cfg.check_width("attend", values)?;
    if logits.len() != cfg.heads {
        return Err(NumericsError::Shape {
            op: "attend",
            detail: format!("{} logit maps for {} heads", logits.len(), cfg.heads),
        });
    }
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for (h, &l) in logits.iter().enumerate() {
        let w = l.softmax();
        outs.push(w.matmul(cfg.head(values, h)?)?);
        weights.push(w);
    }
    Ok(AttentionOutput { output: concat(&outs, 1)?, weights })
}

/// Scaled dot-product content logits `q_h k_hᵀ / √head_dim` for every head.
pub fn content_logits<'g>(
    queries: Var<'g>,
    keys: Var<'g>,
    cfg: AttentionConfig,
) -> Result<Vec<Var<'g>>, NumericsError> {
    cfg.check_width("content_logits", queries)?;
    cfg.check_width("content_logits", keys)?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    (0..cfg.heads).map(|h| cfg.head(queries, h)?.matmul(cfg.head(keys, h)?.t()?).map(|l| l.scale(scale))).collect()
}

pub fn multi_head_attention<'g>(
    queries: Var<'g>,
    keys: Var<'g>,
    values: Var<'g>,
    cfg: AttentionConfig,
    extra_logits: Option<&[Var<'g>]>,
) -> Result<AttentionOutput<'g>, NumericsError> {
    let mut logits = content_logits(queries, keys, cfg)?;
    if let Some(extra) = extra_logits {
        if extra.len() != cfg.heads {
            return Err(NumericsError::Shape {
                op: "multi_head_attention",
                detail: format!("{} extra logit maps for {} heads", extra.len(), cfg.heads),
            });
        }
        for (l, &e) in logits.iter_mut().zip(extra) {
            *l = l.add(e)?;
        }
    }
    attend(&logits, values, cfg)
}

/// `T = FFN(e)`: a two-layer ReLU map applied elementwise to query PE.
#[derive(Debug, Clone)]
pub struct ScalingTransform {
    pub ffn: Mlp,
}

impl ScalingTransform {
    /// The output bias starts at 1 so the transform begins near identity.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        let ffn = Mlp::new(store, name, &[dim, dim, dim], Init::Xavier, rng)?;
        if let Some(b) = ffn.last().bias {
            fill_param(store, b, 1.0);
        }
        Ok(Self { ffn })
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g>, content: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.ffn.forward(ctx, content)
    }
}

/// The `g` map: side encoding (4 scalars) down to the point encoding width (2 scalars).
#[derive(Debug, Clone)]
pub struct SideReduction {
    pub linear: Linear,
}

impl SideReduction {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        point_pe_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let linear = Linear::new(store, name, 2 * point_pe_width, point_pe_width, false, Init::Xavier, rng)?;
        Ok(Self { linear })
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g>, side_pe: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.linear.forward(ctx, side_pe)
    }
}

/// Inputs to [`peca_logits`]. All query-side tensors have `nq` rows of width
/// `d`; key-side tensors have `nk` rows of width `d`.
#[derive(Clone, Copy)]
pub struct PecaInputs<'g> {
    pub content_q: Var<'g>,
    pub content_k: Var<'g>,
    /// `PE(r_q)`.
    pub point_pe_q: Var<'g>,
    /// `g(PE(side coordinates))`, or `None` to drop the side term.
    pub side_pe_q: Option<Var<'g>>,
    /// `PE(r_k)`, left unscaled.
    pub key_pe: Var<'g>,
    /// `T`, or `None` for the identity.
    pub scaling: Option<Var<'g>>,
}

/// Per-head cross-attention logits: scaled content term plus the scaled point
/// and side positional terms, each sliced per head before the dot product.
pub fn peca_logits<'g>(inputs: &PecaInputs<'g>, cfg: AttentionConfig) -> Result<Vec<Var<'g>>, NumericsError> {
    let scaled = |v: Var<'g>| match inputs.scaling {
        Some(t) => v.mul(t),
        None => Ok(v),
    };
    cfg.check_width("peca_logits", inputs.point_pe_q)?;
    cfg.check_width("peca_logits", inputs.key_pe)?;
    let point_q = scaled(inputs.point_pe_q)?;
    let side_q = match inputs.side_pe_q {
        Some(s) => {
            cfg.check_width("peca_logits", s)?;
            Some(scaled(s)?)
        }
        None => None,
    };
    let content = content_logits(inputs.content_q, inputs.content_k, cfg)?;
    let mut logits = Vec::with_capacity(cfg.heads);
    for (h, c) in content.into_iter().enumerate() {
        let key_t = cfg.head(inputs.key_pe, h)?.t()?;
        let mut l = c.add(cfg.head(point_q, h)?.matmul(key_t)?)?;
        if let Some(s) = side_q {
            l = l.add(cfg.head(s, h)?.matmul(key_t)?)?;
        }
        logits.push(l);
    }
    Ok(logits)
}

/// Side index pair `(a, b) = (sgn(o_x) + 1, sgn(o_y) + 2)` into `(l, t, r, b)`.
pub fn side_indices(o: [f64; 2]) -> (usize, usize) {
    let sgn = |v: f64| {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    ((sgn(o[0]) + 1) as usize, (sgn(o[1]) + 2) as usize)
}

/// `c = r + o ∘ (s_a, s_b)`.
pub fn head_point(o: [f64; 2], r: Point2, s: SideDistances) -> Point2 {
    let (a, b) = side_indices(o);
    let s = s.to_array();
    Point2::new(r.x + o[0] * s[a], r.y + o[1] * s[b])
}

/// Offset and attention scales of every head, `[x, y]` per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdgParams {
    pub offsets: Vec<[f64; 2]>,
    pub scales: Vec<[f64; 2]>,
}

impl SdgParams {
    pub fn new(offsets: Vec<[f64; 2]>, scales: Vec<[f64; 2]>) -> Result<Self, AttentionError> {
        for (head, o) in offsets.iter().enumerate() {
            if let Some(&value) = o.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(AttentionError::OffsetOutOfRange { head, value });
            }
        }
        for (head, v) in scales.iter().enumerate() {
            if let Some(&value) = v.iter().find(|v| v.is_nan() || **v <= 0.0) {
                return Err(AttentionError::NonPositiveScale { head, value });
            }
        }
        Ok(Self { offsets, scales })
    }

    pub fn heads(&self) -> usize {
        self.offsets.len()
    }

    pub fn head_points(&self, r: Point2, s: SideDistances) -> Vec<Point2> {
        self.offsets.iter().map(|&o| head_point(o, r, s)).collect()
    }
}

/// Row-major grid of feature cells covering the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub cols: usize,
    pub rows: usize,
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, index: usize) -> Point2 {
        let (row, col) = (index / self.cols, index % self.cols);
        Point2::new((col as f64 + 0.5) / self.cols as f64, (row as f64 + 0.5) / self.rows as f64)
    }

    pub fn centers(&self) -> Vec<Point2> {
        (0..self.len()).map(|i| self.cell_center(i)).collect()
    }

    /// Cell centers as an `n × 2` tensor.
    pub fn centers_tensor(&self) -> Tensor {
        let data = self.centers().iter().flat_map(|p| [p.x, p.y]).collect();
        Tensor::new(&[self.len(), 2], data).expect("grid shape")
    }
}

/// Per-head weights over the cells of a feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionField {
    pub grid: FeatureGrid,
    pub heads: Vec<Vec<f64>>,
}

impl AttentionField {
    pub fn head(&self, h: usize) -> &[f64] {
        &self.heads[h]
    }

    pub fn at(&self, h: usize, col: usize, row: usize) -> f64 {
        self.heads[h][row * self.grid.cols + col]
    }
}

/// `exp(-(x-c_x)²/v_x² - (y-c_y)²/v_y²)` at every cell center.
pub fn sdg_map(c: Point2, v: [f64; 2], grid: FeatureGrid) -> Result<Vec<f64>, AttentionError> {
    if let Some(&value) = v.iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(AttentionError::NonPositiveScale { head: 0, value });
    }
    Ok(grid.centers().iter().map(|p| (-((p.x - c.x) / v[0]).powi(2) - ((p.y - c.y) / v[1]).powi(2)).exp()).collect())
}

/// The Gaussian map of every head for one query.
pub fn sdg_field(
    params: &SdgParams,
    r: Point2,
    s: SideDistances,
    grid: FeatureGrid,
) -> Result<AttentionField, AttentionError> {
    let heads = params
        .head_points(r, s)
        .into_iter()
        .zip(&params.scales)
        .enumerate()
        .map(|(head, (c, &v))| {
            sdg_map(c, v, grid).map_err(|e| match e {
                AttentionError::NonPositiveScale { value, .. } => AttentionError::NonPositiveScale { head, value },
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(AttentionField { grid, heads })
}

/// `logits + log(G + 1e-8)`.
pub fn combine_sdg(logits: &[f64], g: &[f64]) -> Vec<f64> {
    logits.iter().zip(g).map(|(l, g)| l + (g + SDG_LOG_FLOOR).ln()).collect()
}

/// Max-subtracted softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Graph outputs of [`SdgHead::forward`], all `n × 2H` with `[x, y]` per head.
#[derive(Clone, Copy)]
pub struct SdgOutput<'g> {
    pub offsets: Var<'g>,
    pub centers: Var<'g>,
    pub scales: Var<'g>,
}

/// Offset head (tanh) and scale head (softplus + floor) over the query content.
#[derive(Debug, Clone)]
pub struct SdgHead {
    pub offset: Mlp,
    pub scale: Mlp,
    pub heads: usize,
}

impl SdgHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let (d, h) = (cfg.model_dim, cfg.heads);
        let offset = Mlp::new(store, &format!("{name}.offset"), &[d, d, 2 * h], Init::Zeros, rng)?;
        let scale = Mlp::new(store, &format!("{name}.scale"), &[d, d, 2 * h], Init::Zeros, rng)?;
        // softplus(b) + floor = INITIAL_SCALE
        let b = (INITIAL_SCALE - SCALE_FLOOR).exp_m1().ln();
        if let Some(id) = scale.last().bias {
            fill_param(store, id, b);
        }
        Ok(Self { offset, scale, heads: h })
    }

    /// `content` is `n × d`, `points` `n × 2`, `sides` `n × 4`.
    pub fn forward<'g>(
        &self,
        ctx: Ctx<'g>,
        content: Var<'g>,
        points: Var<'g>,
        sides: Var<'g>,
    ) -> Result<SdgOutput<'g>, NumericsError> {
        let offsets = self.offset.forward(ctx, content)?.tanh();
        let scales = self.scale.forward(ctx, content)?.softplus().add_scalar(SCALE_FLOOR);
        let centers = sdg_centers(offsets, points, sides, self.heads)?;
        Ok(SdgOutput { offsets, centers, scales })
    }

    /// Plain-value parameters for one row of a forward pass.
    pub fn params_row(out: &SdgOutput<'_>, row: usize) -> SdgParams {
        let pairs = |v: Var<'_>| -> Vec<[f64; 2]> {
            let t = v.value();
            t.row(row).chunks(2).map(|c| [c[0], c[1]]).collect()
        };
        SdgParams { offsets: pairs(out.offsets), scales: pairs(out.scales) }
    }
}

/// `c = r + o ∘ s[a, b]` in the graph. The side selection follows the sign of
/// the current offsets and is not differentiated.
pub fn sdg_centers<'g>(
    offsets: Var<'g>,
    points: Var<'g>,
    sides: Var<'g>,
    heads: usize,
) -> Result<Var<'g>, NumericsError> {
    let graph = offsets.graph();
    let o = offsets.value();
    let n = o.rows();
    let width = 2 * heads;
    if o.cols() != width || points.shape() != [n, 2] || sides.shape() != [n, 4] {
        return Err(NumericsError::Shape {
            op: "sdg_centers",
            detail: format!(
                "offsets {:?}, points {:?}, sides {:?} for {heads} heads",
                o.shape(),
                points.shape(),
                sides.shape()
            ),
        });
    }
    let mut masks = vec![vec![0.0; n * width]; 4];
    for i in 0..n {
        for h in 0..heads {
            let (a, b) = side_indices([o.at(i, 2 * h), o.at(i, 2 * h + 1)]);
            masks[a][i * width + 2 * h] = 1.0;
            masks[b][i * width + 2 * h + 1] = 1.0;
        }
    }
    let mut selected: Option<Var<'g>> = None;
    for (j, mask) in masks.into_iter().enumerate() {
        if mask.iter().all(|&m| m == 0.0) {
            continue;
        }
        let term = graph.constant(Tensor::new(&[n, width], mask)?).mul(sides.slice(1, j, j + 1)?)?;
        selected = Some(match selected {
            Some(s) => s.add(term)?,
            None => term,
        });
    }
    let selected = selected.expect("every entry selects a side");
    let mut tile = vec![0.0; 2 * width];
    for h in 0..heads {
        tile[2 * h] = 1.0;
        tile[width + 2 * h + 1] = 1.0;
    }
    let tiled = points.matmul(graph.constant(Tensor::new(&[2, width], tile)?))?;
    tiled.add(offsets.mul(selected)?)
}

/// `log(G + 1e-8)` of every head over the key positions (`nk × 2`), each
/// `n × nk`, ready to add to pre-softmax logits.
pub fn sdg_log_weights<'g>(
    centers: Var<'g>,
    scales: Var<'g>,
    key_positions: &Tensor,
    heads: usize,
) -> Result<Vec<Var<'g>>, NumericsError> {
    let graph = centers.graph();
    let nk = key_positions.rows();
    let kx: Vec<f64> = (0..nk).map(|i| key_positions.at(i, 0)).collect();
    let ky: Vec<f64> = (0..nk).map(|i| key_positions.at(i, 1)).collect();
    let kx = graph.constant(Tensor::new(&[1, nk], kx)?);
    let ky = graph.constant(Tensor::new(&[1, nk], ky)?);
    (0..heads)
        .map(|h| {
            let term = |k: Var<'g>, col: usize| -> Result<Var<'g>, NumericsError> {
                let c = centers.slice(1, col, col + 1)?;
                let v = scales.slice(1, col, col + 1)?;
                Ok(k.sub(c)?.div(v)?.square().neg())
            };
            let e = term(kx, 2 * h)?.add(term(ky, 2 * h + 1)?)?;
            Ok(e.exp().add_scalar(SDG_LOG_FLOOR).log())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_from_point_sides, contains};
    use crate::layers::init_tensor;
    use crate::numerics::{grad_check, Graph, ParamId, GRAD_CHECK_STEP};
    use crate::posenc::{encode_point, PeConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        init_tensor(shape, Init::Normal(1.0), rng)
    }

    fn cfg(d: usize, h: usize) -> AttentionConfig {
        AttentionConfig::new(d, h).unwrap()
    }

    #[test]
    fn config_rejects_uneven_heads() {
        assert!(matches!(AttentionConfig::new(10, 4), Err(AttentionError::HeadsDoNotDivide { dim: 10, heads: 4 })));
        assert!(AttentionConfig::new(8, 0).is_err());
        assert_eq!(cfg(64, 8).head_dim(), 8);
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let q = g.constant(random(&[3, 4], &mut rng));
        let k = g.constant(random(&[1, 4], &mut rng));
        let v = g.constant(random(&[1, 4], &mut rng));
        let out = multi_head_attention(q, k, v, cfg(4, 2), None).unwrap().output.value();
        for i in 0..3 {
            for (a, b) in out.row(i).iter().zip(v.value().row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let k = g.constant(random(&[5, 4], &mut rng));
        let v = g.constant(random(&[5, 4], &mut rng));
        let out = multi_head_attention(q, k, v, cfg(4, 2), None).unwrap().output.value();
        let vals = v.value();
        for j in 0..4 {
            let mean = (0..5).map(|i| vals.at(i, j)).sum::<f64>() / 5.0;
            assert!((out.at(0, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn two_keys_match_scalar_oracle() {
        let (q, k1, k2, v1, v2, bias) = (0.7, -1.3, 2.1, 0.25, -4.0, 0.4);
        let g = Graph::new();
        let extra = [g.constant(Tensor::new(&[1, 2], vec![bias, 0.0]).unwrap())];
        let out = multi_head_attention(
            g.constant(Tensor::scalar(q).reshaped(&[1, 1]).unwrap()),
            g.constant(Tensor::new(&[2, 1], vec![k1, k2]).unwrap()),
            g.constant(Tensor::new(&[2, 1], vec![v1, v2]).unwrap()),
            cfg(1, 1),
            Some(&extra),
        )
        .unwrap();
        let (e1, e2) = ((q * k1 + bias).exp(), (q * k2).exp());
        let expected = (e1 * v1 + e2 * v2) / (e1 + e2);
        assert!((out.output.item() - expected).abs() < 1e-9);
    }

    #[test]
    fn attention_rejects_wrong_extra_shape() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let extra = [g.constant(Tensor::zeros(&[2, 3]))];
        assert!(multi_head_attention(q, q, q, cfg(4, 2), Some(&extra)).is_err());
        let extra = [extra[0], extra[0]];
        assert!(multi_head_attention(q, q, q, cfg(4, 2), Some(&extra)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..9, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Graph::new();
            let q = g.constant(init_tensor(&[nq, 8], Init::Normal(scale), &mut rng));
            let k = g.constant(random(&[nk, 8], &mut rng));
            let out = multi_head_attention(q, k, k, cfg(8, 4), None).unwrap();
            for w in out.weights {
                let w = w.value();
                for i in 0..nq {
                    prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn raising_g_never_lowers_that_cell(
            logits in prop::collection::vec(-5.0f64..5.0, 2..12),
            g in prop::collection::vec(0.0f64..1.0, 12),
            cell in 0usize..12,
            bump in 0.0f64..1.0,
        ) {
            let n = logits.len();
            let cell = cell % n;
            let before = softmax(&combine_sdg(&logits, &g[..n]));
            let mut raised = g[..n].to_vec();
            raised[cell] += bump;
            let after = softmax(&combine_sdg(&logits, &raised));
            prop_assert!(after[cell] >= before[cell] - 1e-15);
        }
    }

    /// Query/key PE rows for a few points, at width `d`.
    fn pe_rows(points: &[Point2], d: usize) -> Tensor {
        let pe = PeConfig::new(d / 2, 20.0).unwrap();
        let data = points.iter().flat_map(|&p| encode_point(p, &pe).channels).collect();
        Tensor::new(&[points.len(), d], data).unwrap()
    }

    #[test]
    fn peca_equals_independent_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, h, nq, nk) = (8, 2, 3, 5);
        let c = cfg(d, h);
        let eq = random(&[nq, d], &mut rng);
        let ek = random(&[nk, d], &mut rng);
        let pq = random(&[nq, d], &mut rng);
        let sq = random(&[nq, d], &mut rng);
        let pk = random(&[nk, d], &mut rng);
        let t = random(&[nq, d], &mut rng);
        let g = Graph::new();
        let inputs = PecaInputs {
            content_q: g.constant(eq.clone()),
            content_k: g.constant(ek.clone()),
            point_pe_q: g.constant(pq.clone()),
            side_pe_q: Some(g.constant(sq.clone())),
            key_pe: g.constant(pk.clone()),
            scaling: Some(g.constant(t.clone())),
        };
        let logits = peca_logits(&inputs, c).unwrap();
        let hd = c.head_dim();
        for (head, l) in logits.iter().enumerate() {
            let l = l.value();
            for i in 0..nq {
                for j in 0..nk {
                    let chans = head * hd..(head + 1) * hd;
                    let content: f64 =
                        chans.clone().map(|m| eq.at(i, m) * ek.at(j, m)).sum::<f64>() / (hd as f64).sqrt();
                    let point: f64 = chans.clone().map(|m| t.at(i, m) * pq.at(i, m) * pk.at(j, m)).sum();
                    let side: f64 = chans.map(|m| t.at(i, m) * sq.at(i, m) * pk.at(j, m)).sum();
                    assert!((l.at(i, j) - (content + point + side)).abs() < 1e-9);
                }
            }
        }

        // Dropping the side term reproduces the two-term value.
        let two = peca_logits(&PecaInputs { side_pe_q: None, ..inputs }, c).unwrap();
        let zero_side =
            peca_logits(&PecaInputs { side_pe_q: Some(g.constant(Tensor::zeros(&[nq, d]))), ..inputs }, c).unwrap();
        for (a, b) in two.iter().zip(&zero_side) {
            assert_eq!(a.value().data(), b.value().data());
        }
    }

    #[test]
    fn identity_scaling_and_zero_g_give_plain_positional_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, h) = (8, 2);
        let mut store = ParamStore::new();
        let g_map = SideReduction::new(&mut store, "g", d, &mut rng).unwrap();
        fill_param(&mut store, g_map.linear.weight, 0.0);
        let qp = [Point2::new(0.2, 0.7), Point2::new(0.9, 0.1)];
        let kp = [Point2::new(0.5, 0.5), Point2::new(0.1, 0.3), Point2::new(0.8, 0.8)];
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &store);
        let side_pe = ctx.constant(random(&[2, 2 * d], &mut rng));
        let eq = random(&[2, d], &mut rng);
        let ek = random(&[3, d], &mut rng);
        let inputs = PecaInputs {
            content_q: ctx.constant(eq.clone()),
            content_k: ctx.constant(ek.clone()),
            point_pe_q: ctx.constant(pe_rows(&qp, d)),
            side_pe_q: Some(g_map.forward(ctx, side_pe).unwrap()),
            key_pe: ctx.constant(pe_rows(&kp, d)),
            scaling: Some(ctx.constant(Tensor::full(&[2, d], 1.0))),
        };
        let full: f64 =
            peca_logits(&inputs, cfg(d, h)).unwrap().iter().map(|l| l.value().data().iter().sum::<f64>()).sum();
        let pe = PeConfig::new(d / 2, 20.0).unwrap();
        let mut expected = 0.0;
        for (i, &q) in qp.iter().enumerate() {
            for (j, &k) in kp.iter().enumerate() {
                let hd = d / h;
                for head in 0..h {
                    let chans = head * hd..(head + 1) * hd;
                    expected += chans.map(|m| eq.at(i, m) * ek.at(j, m)).sum::<f64>() / (hd as f64).sqrt();
                }
                expected += encode_point(q, &pe).dot(&encode_point(k, &pe));
            }
        }
        assert!((full - expected).abs() < 1e-9);
    }

    #[test]
    fn zero_sides_collapse_side_coordinates_onto_point() {
        let g = Graph::new();
        let r = g.constant(Tensor::new(&[1, 2], vec![0.3, 0.8]).unwrap());
        let s = g.constant(Tensor::zeros(&[1, 4]));
        let coords = crate::refpoints::boxes_from_points_sides(r, s).unwrap().value();
        assert_eq!(coords.data(), &[0.3, 0.8, 0.3, 0.8]);
        let pe = PeConfig::new(4, 20.0).unwrap();
        let side_pe = crate::posenc::encode_columns(g.constant(coords), &pe).unwrap().value();
        let point = encode_point(Point2::new(0.3, 0.8), &pe).channels;
        assert!(side_pe.data()[..8].iter().zip(&point).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(side_pe.data()[8..].iter().zip(&point).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn head_point_examples() {
        let r = Point2::new(0.5, 0.5);
        assert_eq!(head_point([0.0, 0.0], r, SideDistances::new(0.1, 0.2, 0.3, 0.4)), r);
        let o = [0.5, -0.5];
        assert_eq!(side_indices(o), (2, 1));
        let c = head_point(o, r, SideDistances::uniform(0.2));
        assert!((c.x - 0.6).abs() < 1e-15 && (c.y - 0.4).abs() < 1e-15);
        assert_eq!(side_indices([-0.1, 0.1]), (0, 3));
    }

    #[test]
    fn sdg_params_validate() {
        assert!(SdgParams::new(vec![[0.5, -1.0]], vec![[0.1, 0.2]]).is_ok());
        assert!(matches!(
            SdgParams::new(vec![[1.5, 0.0]], vec![[0.1, 0.2]]),
            Err(AttentionError::OffsetOutOfRange { head: 0, .. })
        ));
        assert!(matches!(
            SdgParams::new(vec![[0.0, 0.0], [0.0, 0.0]], vec![[0.1, 0.2], [0.0, 0.2]]),
            Err(AttentionError::NonPositiveScale { head: 1, .. })
        ));
    }

    #[test]
    fn sdg_map_examples() {
        let grid = FeatureGrid { cols: 4, rows: 4 };
        let c = grid.cell_center(5);
        let v = [0.25, 0.1];
        let m = sdg_map(c, v, grid).unwrap();
        assert_eq!(m[5], 1.0);
        // One cell to the right is exactly v_w away.
        assert!((m[6] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((m[6] - 0.3679).abs() < 1e-4);
        let wide = sdg_map(c, [1e9, 1e9], grid).unwrap();
        assert!(wide.iter().all(|&g| (g - 1.0).abs() < 1e-15));
        assert!(matches!(sdg_map(c, [0.0, 1.0], grid), Err(AttentionError::NonPositiveScale { .. })));
        assert!(sdg_map(c, [0.1, -1.0], grid).is_err());
    }

    #[test]
    fn combine_examples() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let base = softmax(&logits);
        let neutral = softmax(&combine_sdg(&logits, &[1.0; 4]));
        assert!(base.iter().zip(&neutral).all(|(a, b)| (a - b).abs() < 1e-7));

        let n = 64;
        let mut g = vec![0.0; n];
        g[17] = 1.0;
        let w = softmax(&combine_sdg(&vec![0.0; n], &g));
        assert!(w[17] >= 0.99);
    }

    fn sdg_fixture(rng: &mut ChaCha8Rng) -> (ParamStore, SdgHead, AttentionConfig) {
        let c = cfg(8, 4);
        let mut store = ParamStore::new();
        let head = SdgHead::new(&mut store, "sdg", c, rng).unwrap();
        // Replace the zero output layers so offsets are non-trivial.
        for id in [head.offset.last().weight, head.scale.last().weight] {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = init_tensor(&shape, Init::Normal(0.3), rng);
        }
        (store, head, c)
    }

    #[test]
    fn fresh_sdg_head_starts_at_reference_with_initial_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(8, 4);
        let mut store = ParamStore::new();
        let head = SdgHead::new(&mut store, "sdg", c, &mut rng).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let r = ctx.constant(Tensor::new(&[1, 2], vec![0.3, 0.6]).unwrap());
        let s = ctx.constant(Tensor::full(&[1, 4], 0.1));
        let out = head.forward(ctx, ctx.constant(random(&[1, 8], &mut rng)), r, s).unwrap();
        let p = SdgHead::params_row(&out, 0);
        assert!(p.offsets.iter().all(|o| *o == [0.0, 0.0]));
        assert!(p.scales.iter().flatten().all(|v| (v - INITIAL_SCALE).abs() < 1e-12));
        assert!(out.centers.value().data().chunks(2).all(|c| c == [0.3, 0.6]));
    }

    #[test]
    fn sdg_head_points_stay_in_proposal_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, head, c) = sdg_fixture(&mut rng);
        let n = 10_000;
        let e = init_tensor(&[n, c.model_dim()], Init::Normal(3.0), &mut rng);
        let r = init_tensor(&[n, 2], Init::Normal(1.0), &mut rng);
        let r = Tensor::new(&[n, 2], r.data().iter().map(|v| crate::geometry::sigmoid(*v)).collect()).unwrap();
        let s = init_tensor(&[n, 4], Init::Normal(1.5), &mut rng);
        let s = Tensor::new(&[n, 4], s.data().iter().map(|v| crate::geometry::sigmoid(*v)).collect()).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let out = head.forward(ctx, ctx.constant(e), ctx.constant(r.clone()), ctx.constant(s.clone())).unwrap();
        let centers = out.centers.value();
        for i in 0..n {
            let rp = Point2::new(r.at(i, 0), r.at(i, 1));
            let sd = SideDistances::from_array([s.at(i, 0), s.at(i, 1), s.at(i, 2), s.at(i, 3)]);
            let bbox = box_from_point_sides(rp, sd);
            let params = SdgHead::params_row(&out, i);
            for (h, p) in params.head_points(rp, sd).into_iter().enumerate() {
                assert!(contains(&bbox, p), "draw {i} head {h}: {p:?} outside {bbox:?}");
                assert_eq!([p.x, p.y], [centers.at(i, 2 * h), centers.at(i, 2 * h + 1)]);
            }
            assert!(params.scales.iter().flatten().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn graph_log_weights_match_sdg_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, head, c) = sdg_fixture(&mut rng);
        let grid = FeatureGrid { cols: 5, rows: 3 };
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let r = Point2::new(0.4, 0.55);
        let s = SideDistances::new(0.1, 0.2, 0.15, 0.05);
        let out = head
            .forward(
                ctx,
                ctx.constant(random(&[1, 8], &mut rng)),
                ctx.constant(Tensor::new(&[1, 2], vec![r.x, r.y]).unwrap()),
                ctx.constant(Tensor::new(&[1, 4], s.to_array().to_vec()).unwrap()),
            )
            .unwrap();
        let logs = sdg_log_weights(out.centers, out.scales, &grid.centers_tensor(), c.heads()).unwrap();
        let field = sdg_field(&SdgHead::params_row(&out, 0), r, s, grid).unwrap();
        for (h, l) in logs.iter().enumerate() {
            for (cell, lv) in l.value().data().iter().enumerate() {
                let expected = (field.head(h)[cell] + SDG_LOG_FLOOR).ln();
                assert!((lv - expected).abs() < 1e-9);
            }
        }
    }

    fn check(store: &ParamStore, f: impl for<'g> Fn(&'g Graph, &'g ParamStore) -> Result<Var<'g>, NumericsError>) {
        let report = grad_check(store, GRAD_CHECK_STEP, None, f).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn add_random(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
        store.add(name, random(shape, rng)).unwrap()
    }

    #[test]
    fn multi_head_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let q = add_random(&mut store, "q", &[3, 6], &mut rng);
        let k = add_random(&mut store, "k", &[4, 6], &mut rng);
        let v = add_random(&mut store, "v", &[4, 6], &mut rng);
        let e0 = add_random(&mut store, "e0", &[3, 4], &mut rng);
        let e1 = add_random(&mut store, "e1", &[3, 4], &mut rng);
        let w = random(&[3, 6], &mut rng);
        check(&store, move |g, s| {
            let extra = [g.param(s, e0), g.param(s, e1)];
            let out = multi_head_attention(g.param(s, q), g.param(s, k), g.param(s, v), cfg(6, 2), Some(&extra))?;
            Ok(out.output.mul(g.constant(w.clone()))?.sum())
        });
    }

    #[test]
    fn peca_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let names = ["eq", "ek", "pq", "sq", "pk", "t"];
        let rows = [3, 4, 3, 3, 4, 3];
        let ids: Vec<ParamId> =
            names.iter().zip(rows).map(|(n, r)| add_random(&mut store, n, &[r, 8], &mut rng)).collect();
        let w = random(&[3, 4], &mut rng);
        check(&store, move |g, s| {
            let p = |i: usize| g.param(s, ids[i]);
            let inputs = PecaInputs {
                content_q: p(0),
                content_k: p(1),
                point_pe_q: p(2),
                side_pe_q: Some(p(3)),
                key_pe: p(4),
                scaling: Some(p(5)),
            };
            let logits = peca_logits(&inputs, cfg(8, 2))?;
            let wv = g.constant(w.clone());
            let mut total = g.scalar(0.0);
            for (h, l) in logits.into_iter().enumerate() {
                total = total.add(l.mul(wv)?.sum().scale(1.0 + h as f64))?;
            }
            Ok(total)
        });
    }

    #[test]
    fn sdg_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut store, head, c) = sdg_fixture(&mut rng);
        let e = add_random(&mut store, "e", &[3, 8], &mut rng);
        let r = store.add("r", Tensor::new(&[3, 2], vec![0.2, 0.3, 0.5, 0.5, 0.7, 0.9]).unwrap()).unwrap();
        let sides = store
            .add(
                "s",
                Tensor::new(&[3, 4], vec![0.1, 0.2, 0.3, 0.05, 0.2, 0.2, 0.2, 0.2, 0.05, 0.1, 0.15, 0.3]).unwrap(),
            )
            .unwrap();
        let grid = FeatureGrid { cols: 4, rows: 3 }.centers_tensor();
        let w = random(&[3, 12], &mut rng);
        check(&store, move |g, s| {
            let ctx = Ctx::new(g, s);
            let out = head.forward(ctx, g.param(s, e), g.param(s, r), g.param(s, sides))?;
            let logs = sdg_log_weights(out.centers, out.scales, &grid, c.heads())?;
            let wv = g.constant(w.clone());
            let mut total = g.scalar(0.0);
            for l in logs {
                total = total.add(l.mul(wv)?.sum())?;
            }
            Ok(total)
        });
    }

    #[test]
    fn scaling_transform_and_g_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let t = ScalingTransform::new(&mut store, "t", 6, &mut rng).unwrap();
        let gm = SideReduction::new(&mut store, "g", 6, &mut rng).unwrap();
        let e = add_random(&mut store, "e", &[2, 6], &mut rng);
        let side = add_random(&mut store, "side", &[2, 12], &mut rng);
        check(&store, move |g, s| {
            let ctx = Ctx::new(g, s);
            let scale = t.forward(ctx, g.param(s, e))?;
            Ok(gm.forward(ctx, g.param(s, side))?.mul(scale)?.sum())
        });
    }
}
