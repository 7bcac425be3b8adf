//! Desk-scale detection metrics.

use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, SceneParams};
use super::HarnessError;
use crate::geometry::{contains, iou, sigmoid};
use crate::matching::{hungarian, CostMatrix, CostWeights, GroundTruth, MatchAssignment};
use crate::model::Model;
use crate::refpoints::LayerPrediction;

pub const RECALL_IOU: f64 = 0.5;
pub const SMOOTHING_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub objects: usize,
    /// Mean IoU of Hungarian-matched final-layer predictions.
    pub matched_iou: f64,
    /// Fraction of matched queries whose reference lies inside their object.
    pub salient_rate: f64,
    /// Greedy recall at IoU 0.5 over all classes.
    pub recall: f64,
    pub per_class_recall: Vec<f64>,
    /// Matched IoU over objects whose short side fits in one query cell.
    pub small_object_iou: Option<f64>,
    pub small_objects: usize,
    /// Trailing-mean training loss (window 100); empty without a training log.
    pub loss_curve: Vec<f64>,
}

impl EvalReport {
    /// Smoothed loss at 1-based `iteration`.
    pub fn smoothed_loss_at(&self, iteration: usize) -> Option<f64> {
        iteration.checked_sub(1).and_then(|i| self.loss_curve.get(i).copied())
    }
}

/// Trailing mean over at most `window` values ending at each position.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Highest class probability and its class.
pub fn top_class(pred: &LayerPrediction) -> (usize, f64) {
    pred.class_logits.iter().enumerate().map(|(c, &l)| (c, sigmoid(l))).fold((0, f64::NEG_INFINITY), |best, cur| {
        if cur.1 > best.1 {
            cur
        } else {
            best
        }
    })
}

/// Greedy matching in descending score order: each prediction above
/// `threshold` claims the unclaimed same-class object of highest IoU, if that
/// IoU reaches 0.5. Returns the claimed flag per object.
pub fn greedy_hits(preds: &[LayerPrediction], gts: &[GroundTruth], threshold: f64) -> Vec<bool> {
    let mut order: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (c, s) = top_class(p);
            (i, c, s)
        })
        .filter(|&(_, _, s)| s > threshold)
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut hit = vec![false; gts.len()];
    for (i, class, _) in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !hit[*g] && gt.class == class)
            .map(|(g, gt)| (g, iou(&preds[i].bbox, &gt.bbox)))
            .filter(|&(_, v)| v >= RECALL_IOU)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            hit[g] = true;
        }
    }
    hit
}

#[derive(Debug, Clone, Default)]
struct Tally {
    scenes: usize,
    objects: usize,
    iou_sum: f64,
    matched: usize,
    salient: usize,
    class_hits: Vec<usize>,
    class_totals: Vec<usize>,
    small_iou_sum: f64,
    small: usize,
}

/// Accumulates metrics over `(final-layer predictions, objects)` pairs.
pub struct Evaluator {
    cost: CostWeights,
    threshold: f64,
    small_side: f64,
    tally: Tally,
}

impl Evaluator {
    /// `small_side` is the largest short side (normalized) counted as small.
    pub fn new(cost: CostWeights, threshold: f64, num_classes: usize, small_side: f64) -> Self {
        Self {
            cost,
            threshold,
            small_side,
            tally: Tally { class_hits: vec![0; num_classes], class_totals: vec![0; num_classes], ..Tally::default() },
        }
    }

    /// Adds one scene and returns its Hungarian assignment.
    pub fn add(&mut self, preds: &[LayerPrediction], gts: &[GroundTruth]) -> Result<MatchAssignment, HarnessError> {
        let t = &mut self.tally;
        t.scenes += 1;
        t.objects += gts.len();
        let assignment = hungarian(&CostMatrix::build(preds, gts, &self.cost)?)?;
        for &(q, g) in &assignment.pairs {
            let (p, gt) = (&preds[q], &gts[g]);
            let v = iou(&p.bbox, &gt.bbox);
            t.iou_sum += v;
            t.matched += 1;
            if contains(&gt.bbox, p.reference) {
                t.salient += 1;
            }
            if gt.bbox.width().min(gt.bbox.height()) <= self.small_side {
                t.small_iou_sum += v;
                t.small += 1;
            }
        }
        for (gt, hit) in gts.iter().zip(greedy_hits(preds, gts, self.threshold)) {
            if gt.class < t.class_totals.len() {
                t.class_totals[gt.class] += 1;
                if hit {
                    t.class_hits[gt.class] += 1;
                }
            }
        }
        Ok(assignment)
    }

    pub fn report(&self) -> EvalReport {
        let t = &self.tally;
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        EvalReport {
            scenes: t.scenes,
            objects: t.objects,
            matched_iou: ratio(t.iou_sum, t.matched),
            salient_rate: ratio(t.salient as f64, t.matched),
            recall: ratio(t.class_hits.iter().sum::<usize>() as f64, t.class_totals.iter().sum()),
            per_class_recall: t.class_hits.iter().zip(&t.class_totals).map(|(&h, &n)| ratio(h as f64, n)).collect(),
            small_object_iou: (t.small > 0).then(|| t.small_iou_sum / t.small as f64),
            small_objects: t.small,
            loss_curve: Vec::new(),
        }
    }
}

/// Evaluates the final decoder layer on scenes generated from `seeds`.
pub fn evaluate(
    model: &Model,
    scene: &SceneParams,
    seeds: impl IntoIterator<Item = u64>,
    cost: CostWeights,
    threshold: f64,
) -> Result<EvalReport, HarnessError> {
    let (cell_w, _) = model.mesh_grid().extent();
    let mut ev = Evaluator::new(cost, threshold, model.config.num_classes, cell_w);
    for seed in seeds {
        let s = generate_scene(scene, seed)?;
        let preds = model.predict(&s.image)?;
        let last = preds.last().expect("at least one decoder layer");
        ev.add(last, &s.annotations)?;
    }
    Ok(ev.report())
}
