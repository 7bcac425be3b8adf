//! Bipartite label assignment with the inner step-cost, and the set losses.

use serde::{Deserialize, Serialize};

use crate::geometry::{contains, giou, sigmoid, BoxXYXY, Point2};
use crate::numerics::{NumericsError, Tensor, Var};
use crate::refpoints::LayerPrediction;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_INNER_PENALTY: f64 = 9999.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatchingError {
    #[error("cannot assign {gts} objects to {queries} queries one-to-one")]
    Infeasible { queries: usize, gts: usize },
    #[error("cost matrix entry ({query}, {gt}) is not finite")]
    NonFinite { query: usize, gt: usize },
    #[error("cost matrix of {queries}x{gts} given {len} entries")]
    Shape { queries: usize, gts: usize, len: usize },
}

/// A ground-truth object in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoxXYXY,
    pub class: usize,
}

/// Weights of the pairwise matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Penalty `k` for a reference point outside the object; zero disables it.
    pub inner: f64,
    pub focal_alpha: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 2.0, l1: 5.0, giou: 2.0, inner: DEFAULT_INNER_PENALTY, focal_alpha: FOCAL_ALPHA }
    }
}

/// Weights of the training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { class: 1.0, l1: 5.0, giou: 2.0, focal_alpha: FOCAL_ALPHA }
    }
}

/// `0` when `reference` lies in `gt` (edges included), otherwise `k`.
pub fn inner_cost(gt: &BoxXYXY, reference: Point2, k: f64) -> f64 {
    if contains(gt, reference) {
        0.0
    } else {
        k
    }
}

/// `-α (1-p_t)^γ log p_t` for a single probability and binary target.
pub fn focal_term(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let (pt, at) = if target { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Positive minus negative focal term of one class logit.
pub fn focal_class_cost(logit: f64, alpha: f64) -> f64 {
    let p = sigmoid(logit).clamp(1e-12, 1.0 - 1e-12);
    focal_term(p, true, alpha, FOCAL_GAMMA) - focal_term(p, false, alpha, FOCAL_GAMMA)
}

/// L1 distance between the corner coordinates of two boxes.
pub fn box_l1(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Weighted terms of one query/object matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostComponents {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub inner: f64,
}

impl CostComponents {
    pub fn total(&self) -> f64 {
        self.class + self.l1 + self.giou + self.inner
    }
}

pub fn match_cost_components(pred: &LayerPrediction, gt: &GroundTruth, w: &CostWeights) -> CostComponents {
    CostComponents {
        class: w.class * focal_class_cost(pred.class_logits[gt.class], w.focal_alpha),
        l1: w.l1 * box_l1(&pred.bbox, &gt.bbox),
        giou: -w.giou * giou(&pred.bbox, &gt.bbox),
        inner: if w.inner > 0.0 { inner_cost(&gt.bbox, pred.reference, w.inner) } else { 0.0 },
    }
}

pub fn match_cost(pred: &LayerPrediction, gt: &GroundTruth, w: &CostWeights) -> f64 {
    match_cost_components(pred, gt, w).total()
}

/// Query-by-object costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    queries: usize,
    gts: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, gts: usize, data: Vec<f64>) -> Result<Self, MatchingError> {
        if data.len() != queries * gts {
            return Err(MatchingError::Shape { queries, gts, len: data.len() });
        }
        if let Some(i) = data.iter().position(|c| !c.is_finite()) {
            return Err(MatchingError::NonFinite { query: i / gts, gt: i % gts });
        }
        Ok(Self { queries, gts, data })
    }

    pub fn build(preds: &[LayerPrediction], gts: &[GroundTruth], w: &CostWeights) -> Result<Self, MatchingError> {
        let data = preds.iter().flat_map(|p| gts.iter().map(move |g| match_cost(p, g, w))).collect();
        Self::new(preds.len(), gts.len(), data)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn gts(&self) -> usize {
        self.gts
    }

    pub fn at(&self, query: usize, gt: usize) -> f64 {
        self.data[query * self.gts + gt]
    }
}

/// `(query, gt)` pairs sorted by query; unlisted queries are background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn query_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }

    pub fn gt_for_query(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| costs.at(q, g)).sum()
    }
}

/// Minimum-cost assignment of every object to a distinct query
/// (shortest augmenting paths with potentials, `O(M²N)`). Ties go to the
/// lowest query index.
pub fn hungarian(costs: &CostMatrix) -> Result<MatchAssignment, MatchingError> {
    let (n, m) = (costs.gts, costs.queries);
    if n > m {
        return Err(MatchingError::Infeasible { queries: m, gts: n });
    }
    // Rows are objects, columns are queries; both 1-based, 0 is a sentinel.
    let a = |i: usize, j: usize| costs.at(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    Ok(MatchAssignment { pairs })
}

/// `n × c` one-hot targets: matched queries get their object's class.
pub fn class_targets(queries: usize, classes: usize, assignment: &MatchAssignment, gts: &[GroundTruth]) -> Tensor {
    let mut t = Tensor::zeros(&[queries, classes]);
    for &(q, g) in &assignment.pairs {
        t.data_mut()[q * classes + gts[g].class] = 1.0;
    }
    t
}

/// Elementwise sigmoid focal loss of `n × c` logits against binary targets.
pub fn focal_elements<'g>(logits: Var<'g>, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var<'g>, NumericsError> {
    let graph = logits.graph();
    let t = graph.constant(targets.clone());
    let one_minus_t = graph.constant(Tensor::new(targets.shape(), targets.data().iter().map(|v| 1.0 - v).collect())?);
    let alpha_t = graph.constant(Tensor::new(
        targets.shape(),
        targets.data().iter().map(|v| alpha * v + (1.0 - alpha) * (1.0 - v)).collect(),
    )?);
    // Binary cross-entropy with logits: softplus(x) - t·x.
    let ce = logits.softplus().sub(logits.mul(t)?)?;
    let p = logits.sigmoid();
    // 1 - p_t = p(1-t) + (1-p)t
    let miss = p.mul(one_minus_t)?.add(p.neg().add_scalar(1.0).mul(t)?)?;
    let modulator = if gamma == 2.0 { miss.square() } else { miss.clamp(1e-300, 1.0).log().scale(gamma).exp() };
    alpha_t.mul(modulator)?.mul(ce)
}

/// Mean over queries of the per-query sum of focal terms.
pub fn focal_loss<'g>(logits: Var<'g>, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var<'g>, NumericsError> {
    let n = logits.shape()[0].max(1);
    Ok(focal_elements(logits, targets, alpha, gamma)?.sum().scale(1.0 / n as f64))
}

/// Summed corner L1 and summed `1 - giou` over matched rows of `boxes` (`n × 4`).
pub fn box_losses<'g>(
    boxes: Var<'g>,
    assignment: &MatchAssignment,
    gts: &[GroundTruth],
) -> Result<(Var<'g>, Var<'g>), NumericsError> {
    let graph = boxes.graph();
    if assignment.pairs.is_empty() {
        return Ok((graph.scalar(0.0), graph.scalar(0.0)));
    }
    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let target: Vec<f64> = assignment.pairs.iter().flat_map(|p| gts[p.1].bbox.to_array()).collect();
    let pred = boxes.gather_rows(&rows)?;
    let target = graph.constant(Tensor::new(&[rows.len(), 4], target)?);
    let l1 = pred.sub(target)?.abs().sum();
    let g = giou_rows(pred, target)?;
    let giou_loss = g.neg().add_scalar(1.0).sum();
    Ok((l1, giou_loss))
}

/// Row-wise generalized IoU of two `n × 4` box tensors.
pub fn giou_rows<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>, NumericsError> {
    let col = |v: Var<'g>, i: usize| v.slice(1, i, i + 1);
    let (ax0, ay0, ax1, ay1) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx0, by0, bx1, by1) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let area_a = ax1.sub(ax0)?.mul(ay1.sub(ay0)?)?;
    let area_b = bx1.sub(bx0)?.mul(by1.sub(by0)?)?;
    let iw = ax1.minimum(bx1)?.sub(ax0.maximum(bx0)?)?.relu();
    let ih = ay1.minimum(by1)?.sub(ay0.maximum(by0)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = area_a.add(area_b)?.sub(inter)?;
    let cw = ax1.maximum(bx1)?.sub(ax0.minimum(bx0)?)?;
    let ch = ay1.maximum(by1)?.sub(ay0.minimum(by0)?)?;
    let enclosing = cw.mul(ch)?;
    let iou = inter.div(union)?;
    iou.sub(enclosing.sub(union)?.div(enclosing)?)
}

/// One decoder layer's differentiable outputs.
#[derive(Clone, Copy)]
pub struct LayerOutputs<'g> {
    /// `n × c`.
    pub class_logits: Var<'g>,
    /// `n × 4` corner boxes.
    pub boxes: Var<'g>,
    /// `n × 2` reference points the inner cost is checked against.
    pub references: Var<'g>,
}

impl LayerOutputs<'_> {
    pub fn predictions(&self) -> Vec<LayerPrediction> {
        let (logits, boxes, refs) = (self.class_logits.value(), self.boxes.value(), self.references.value());
        (0..logits.rows())
            .map(|i| {
                let bbox = BoxXYXY::from_array([boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)]);
                let reference = Point2::new(refs.at(i, 0), refs.at(i, 1));
                LayerPrediction {
                    bbox,
                    class_logits: logits.row(i).to_vec(),
                    reference,
                    sides: bbox.sides_from(reference),
                }
            })
            .collect()
    }
}

/// Unweighted loss terms of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLoss {
    pub classification: f64,
    pub box_l1: f64,
    pub box_giou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub per_layer: Vec<LayerLoss>,
    pub total: f64,
}

/// Everything [`set_criterion`] produces for one image.
pub struct Criterion<'g> {
    pub total: Var<'g>,
    pub breakdown: LossBreakdown,
    pub assignments: Vec<MatchAssignment>,
}

#[derive(Debug, thiserror::Error)]
pub enum CriterionError {
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Matches every layer independently and sums the weighted losses. The
/// classification sum and the box sums are divided by the object count
/// (at least one).
pub fn set_criterion<'g>(
    layers: &[LayerOutputs<'g>],
    gts: &[GroundTruth],
    cost: &CostWeights,
    weights: &LossWeights,
) -> Result<Criterion<'g>, CriterionError> {
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut total: Option<Var<'g>> = None;
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(layers.len());
    for layer in layers {
        let preds = layer.predictions();
        let assignment = hungarian(&CostMatrix::build(&preds, gts, cost)?)?;
        let shape = layer.class_logits.shape();
        let targets = class_targets(shape[0], shape[1], &assignment, gts);
        let cls = focal_elements(layer.class_logits, &targets, weights.focal_alpha, FOCAL_GAMMA)?.sum().scale(norm);
        let (l1, gi) = box_losses(layer.boxes, &assignment, gts)?;
        let (l1, gi) = (l1.scale(norm), gi.scale(norm));
        let layer_total = cls.scale(weights.class).add(l1.scale(weights.l1))?.add(gi.scale(weights.giou))?;
        let ll = LayerLoss { classification: cls.item(), box_l1: l1.item(), box_giou: gi.item() };
        breakdown.classification += ll.classification;
        breakdown.box_l1 += ll.box_l1;
        breakdown.box_giou += ll.box_giou;
        breakdown.per_layer.push(ll);
        total = Some(match total {
            Some(t) => t.add(layer_total)?,
            None => layer_total,
        });
        assignments.push(assignment);
    }
    let total = match total {
        Some(t) => t,
        None => return Err(NumericsError::shape("set_criterion", "no decoder layers".into()).into()),
    };
    breakdown.total = total.item();
    Ok(Criterion { total, breakdown, assignments })
}
