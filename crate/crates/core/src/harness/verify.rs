//! Property suites with machine-readable results. A failing property is a
//! report entry, never a panic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    head_point, multi_head_attention, sdg_log_weights, sdg_map, AttentionConfig, FeatureGrid, SdgHead,
};
use crate::geometry::{box_from_point_sides, contains, BoxXYXY, Point2, SideDistances};
use crate::layers::Ctx;
use crate::matching::{
    focal_elements, giou_rows, hungarian, set_criterion, CostMatrix, CostWeights, GroundTruth, LossWeights,
    FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::model::{Image, Model, ModelConfig, ModelError};
use crate::numerics::{concat, grad_check, Graph, NumericsError, ParamStore, Tensor, Var, GRAD_CHECK_STEP};
use crate::posenc::{encode_columns, predicted_center, scan_channel_peak, PeConfig};
use crate::refpoints::{
    boxes_from_points_sides, meshgrid_init, realize_points, refine_logits, LayerPrediction, MeshGrid,
};

pub const OP_GRAD_TOLERANCE: f64 = 1e-6;
pub const MODEL_GRAD_TOLERANCE: f64 = 1e-3;
pub const DRIFT_SCAN_STEP: f64 = 1e-4;
pub const DRIFT_PE_DIM: usize = 128;
pub const DRIFT_TEMPERATURES: [(f64, f64); 3] = [(20.0, 20.0), (20.0, 1000.0), (1000.0, 20.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    PeDrift,
    Matching,
    Grads,
    Ingrid,
    Sdg,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::PeDrift, Suite::Matching, Suite::Grads, Suite::Ingrid, Suite::Sdg];

    pub fn name(self) -> &'static str {
        match self {
            Suite::PeDrift => "pe-drift",
            Suite::Matching => "matching",
            Suite::Grads => "grads",
            Suite::Ingrid => "ingrid",
            Suite::Sdg => "sdg",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Suite::All]
            .into_iter()
            .chain(Suite::EACH)
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected pe-drift, matching, grads, ingrid, sdg or all)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    /// Passes when `measured <= threshold`.
    pub fn at_most(
        suite: &str,
        name: impl Into<String>,
        measured: f64,
        threshold: f64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }

    fn error(suite: &str, name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            threshold: f64::NAN,
            detail: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json_lines(&self) -> String {
        self.checks.iter().map(|c| serde_json::to_string(c).expect("check serializes") + "\n").collect()
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    match suite {
        Suite::PeDrift => checks.extend(pe_drift_checks(seed, 10)),
        Suite::Matching => {
            checks.push(hungarian_oracle_check(seed, 1000));
            checks.push(inner_cost_check(seed, 1000));
        }
        Suite::Grads => {
            checks.extend(op_gradient_checks(seed, 20));
            checks.push(model_gradient_check(seed));
        }
        Suite::Ingrid => checks.extend(ingrid_checks(seed, 10_000, 10)),
        Suite::Sdg => checks.extend(sdg_checks(seed, 10_000)),
        Suite::All => {
            for s in Suite::EACH {
                checks.extend(run_suite(s, seed).checks);
            }
        }
    }
    VerifyReport { checks }
}

// ---------------------------------------------------------------------------
// Positional-encoding drift.

/// Scanned per-channel peaks against the closed-form drift for every
/// temperature pair, `positions` random query positions and channels
/// `{1, d/4, d/2}`. The measured value is the worst error in scan steps.
pub fn pe_drift_checks(seed: u64, positions: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<f64> = (0..positions).map(|_| rng.random_range(0.0..1.0)).collect();
    let d = DRIFT_PE_DIM;
    let mut out = Vec::new();
    for (tq, tk) in DRIFT_TEMPERATURES {
        let name = format!("drift T_q={tq} T_k={tk}");
        let (cq, ck) = match (PeConfig::new(d, tq), PeConfig::new(d, tk)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                out.push(CheckResult::error("pe-drift", name, e));
                continue;
            }
        };
        let mut worst = 0.0_f64;
        let mut worst_case = String::new();
        for &pq in &pos {
            for t in [1, d / 4, d / 2] {
                let expected = if tq == tk { pq } else { predicted_center(pq, t, &cq, &ck).unwrap_or(f64::NAN) };
                let lo = ((expected - 1.0) / DRIFT_SCAN_STEP).floor() * DRIFT_SCAN_STEP;
                let err = match scan_channel_peak(pq, t, &cq, &ck, lo, lo + 2.0, DRIFT_SCAN_STEP) {
                    Some(found) => (found - expected).abs() / DRIFT_SCAN_STEP,
                    None => f64::INFINITY,
                };
                if err.is_nan() || err > worst {
                    worst = err;
                    worst_case = format!("pos_q={pq:.6} t={t} expected={expected:.6}");
                }
            }
        }
        out.push(CheckResult::at_most(
            "pe-drift",
            name,
            worst,
            1.0 + 1e-9,
            format!("worst: {worst_case} (error in scan steps)"),
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Matching.

/// Minimum total cost over every injection of objects into queries.
pub fn brute_force_cost(costs: &CostMatrix) -> f64 {
    fn go(costs: &CostMatrix, gt: usize, used: &mut [bool]) -> f64 {
        if gt == costs.gts() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..costs.queries() {
            if !used[q] {
                used[q] = true;
                best = best.min(costs.at(q, gt) + go(costs, gt + 1, used));
                used[q] = false;
            }
        }
        best
    }
    go(costs, 0, &mut vec![false; costs.queries()])
}

fn random_box(rng: &mut impl Rng) -> BoxXYXY {
    let (x0, x1): (f64, f64) = (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9));
    let (y0, y1): (f64, f64) = (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9));
    BoxXYXY::new(x0.min(x1), y0.min(y1), x0.max(x1) + 0.05, y0.max(y1) + 0.05)
}

fn random_prediction(rng: &mut impl Rng, reference: Point2, classes: usize) -> LayerPrediction {
    let sides = SideDistances::from_array(std::array::from_fn(|_| rng.random_range(0.01..0.5)));
    LayerPrediction {
        bbox: box_from_point_sides(reference, sides),
        class_logits: (0..classes).map(|_| rng.random_range(-5.0..5.0)).collect(),
        reference,
        sides,
    }
}

/// Hungarian against brute force on `instances` problems with `N ≤ 7`
/// queries and `M ≤ N` objects; half use uniform costs, half use real match
/// costs. The measured value is the number of cost mismatches.
pub fn hungarian_oracle_check(seed: u64, instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4855_4e47);
    let mut mismatches = 0usize;
    let mut first = String::new();
    for i in 0..instances {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(0..=n);
        let costs = if i % 2 == 0 {
            CostMatrix::new(n, m, (0..n * m).map(|_| rng.random_range(-5.0..5.0)).collect())
        } else {
            let preds: Vec<_> = (0..n)
                .map(|_| {
                    let r = Point2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                    random_prediction(&mut rng, r, 2)
                })
                .collect();
            let gts: Vec<_> =
                (0..m).map(|_| GroundTruth { bbox: random_box(&mut rng), class: rng.random_range(0..2) }).collect();
            CostMatrix::build(&preds, &gts, &CostWeights::default())
        };
        let costs = match costs {
            Ok(c) => c,
            Err(e) => return CheckResult::error("matching", "hungarian vs brute force", e),
        };
        let expected = brute_force_cost(&costs);
        let got = match hungarian(&costs) {
            Ok(a) => a.total_cost(&costs),
            Err(e) => return CheckResult::error("matching", "hungarian vs brute force", e),
        };
        if (got - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            mismatches += 1;
            if first.is_empty() {
                first = format!("instance {i}: {got} vs {expected}");
            }
        }
    }
    CheckResult::at_most(
        "matching",
        "hungarian vs brute force",
        mismatches as f64,
        0.0,
        format!("{instances} instances, N <= 7; {first}"),
    )
}

/// Scenes on an 8×8 query grid where each object is built around a distinct
/// query's reference. With the default inner penalty every matched
/// reference must lie in its object. The measured value counts violations.
pub fn inner_cost_check(seed: u64, scenes: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x494e_4e52);
    let grid = match MeshGrid::new(8, 8) {
        Ok(g) => g,
        Err(e) => return CheckResult::error("matching", "inner-cost guarantee", e),
    };
    let mut violations = 0usize;
    for _ in 0..scenes {
        let refs: Vec<Point2> = grid
            .cells()
            .map(|c| {
                Point2::new(
                    c.origin.x + rng.random_range(0.0..1.0) * c.extent.0,
                    c.origin.y + rng.random_range(0.0..1.0) * c.extent.1,
                )
            })
            .collect();
        let preds: Vec<_> = refs.iter().map(|&r| random_prediction(&mut rng, r, 2)).collect();
        let count = rng.random_range(1..=5);
        let mut owners: Vec<usize> = Vec::with_capacity(count);
        while owners.len() < count {
            let q = rng.random_range(0..grid.len());
            if !owners.contains(&q) {
                owners.push(q);
            }
        }
        let gts: Vec<_> = owners
            .iter()
            .map(|&q| {
                let r = refs[q];
                GroundTruth {
                    bbox: BoxXYXY::new(
                        (r.x - rng.random_range(0.005..0.3)).max(0.0),
                        (r.y - rng.random_range(0.005..0.3)).max(0.0),
                        (r.x + rng.random_range(0.005..0.3)).min(1.0),
                        (r.y + rng.random_range(0.005..0.3)).min(1.0),
                    ),
                    class: rng.random_range(0..2),
                }
            })
            .collect();
        let assignment = match CostMatrix::build(&preds, &gts, &CostWeights::default()).and_then(|c| hungarian(&c)) {
            Ok(a) => a,
            Err(e) => return CheckResult::error("matching", "inner-cost guarantee", e),
        };
        violations += assignment.pairs.iter().filter(|&&(q, g)| !contains(&gts[g].bbox, refs[q])).count();
    }
    CheckResult::at_most(
        "matching",
        "inner-cost guarantee",
        violations as f64,
        0.0,
        format!("{scenes} scenes, 64 queries, k = {}", CostWeights::default().inner),
    )
}

// ---------------------------------------------------------------------------
// Gradients.

/// Extra arguments of a gradient case.
#[derive(Clone, Default)]
struct OpArgs {
    axis: usize,
    start: usize,
    end: usize,
    rows: Vec<usize>,
    shape: Vec<usize>,
    targets: Option<Tensor>,
    keys: Option<Tensor>,
    heads: usize,
}

type OpFn = for<'g> fn(&[Var<'g>], &OpArgs) -> Result<Var<'g>, NumericsError>;

struct GradCase {
    inputs: Vec<Tensor>,
    args: OpArgs,
    op: OpFn,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values of either sign with magnitude in `[lo, hi)`.
fn signed(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Values in `[0, 0.2) ∪ [0.8, 1)`, kept at least 0.2 away from `[0.4, 0.6)`.
fn banded(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.0..0.2) + if rng.random_bool(0.5) { 0.8 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("shape")
}

fn random_shape(rng: &mut impl Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = rng.random_range(min_rank..=max_rank);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// A shape broadcast-compatible with `shape`: some axes collapsed to 1 and
/// sometimes leading axes dropped.
fn broadcast_partner(rng: &mut impl Rng, shape: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().map(|&d| if rng.random_bool(0.3) { 1 } else { d }).collect();
    if s.len() > 1 && rng.random_bool(0.2) {
        s.remove(0);
    }
    s
}

fn binary_shapes(rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let a = random_shape(rng, 1, 4);
    let b = broadcast_partner(rng, &a);
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

fn well_formed_boxes(rng: &mut impl Rng, n: usize) -> (Tensor, Tensor) {
    // Coordinates of both boxes in a row stay 0.1 apart, away from every
    // min/max/relu switch and from thin boxes.
    let mut a = Vec::with_capacity(4 * n);
    let mut b = Vec::with_capacity(4 * n);
    for _ in 0..n {
        loop {
            let xs: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let ys: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let spaced = |v: &[f64]| (0..4).all(|i| (0..i).all(|j| (v[i] - v[j]).abs() > 0.1));
            if !(spaced(&xs) && spaced(&ys)) {
                continue;
            }
            a.extend([xs[0].min(xs[1]), ys[0].min(ys[1]), xs[0].max(xs[1]), ys[0].max(ys[1])]);
            b.extend([xs[2].min(xs[3]), ys[2].min(ys[3]), xs[2].max(xs[3]), ys[2].max(ys[3])]);
            break;
        }
    }
    (Tensor::new(&[n, 4], a).expect("shape"), Tensor::new(&[n, 4], b).expect("shape"))
}

fn case(inputs: Vec<Tensor>, op: OpFn) -> GradCase {
    GradCase { inputs, args: OpArgs::default(), op }
}

fn unary_case(rng: &mut impl Rng, name: &str) -> GradCase {
    let shape = random_shape(rng, 1, 4);
    let smooth = uniform(rng, &shape, -2.0, 2.0);
    match name {
        "neg" => case(vec![smooth], |v, _| Ok(v[0].neg())),
        "square" => case(vec![smooth], |v, _| Ok(v[0].square())),
        "sigmoid" => case(vec![smooth], |v, _| Ok(v[0].sigmoid())),
        "tanh" => case(vec![smooth], |v, _| Ok(v[0].tanh())),
        "softplus" => case(vec![smooth], |v, _| Ok(v[0].softplus())),
        "exp" => case(vec![smooth], |v, _| Ok(v[0].exp())),
        "sin" => case(vec![smooth], |v, _| Ok(v[0].sin())),
        "log" => case(vec![uniform(rng, &shape, 0.5, 2.0)], |v, _| Ok(v[0].log())),
        "relu" => case(vec![signed(rng, &shape, 0.05, 2.0)], |v, _| Ok(v[0].relu())),
        "abs" => case(vec![signed(rng, &shape, 0.05, 2.0)], |v, _| Ok(v[0].abs())),
        "scale" => case(vec![smooth], |v, _| Ok(v[0].scale(-1.7))),
        "add_scalar" => case(vec![smooth], |v, _| Ok(v[0].add_scalar(0.3))),
        "clamp" => {
            // Keep values 0.05 away from the bounds ±0.5.
            let x = signed(rng, &shape, 0.0, 0.45);
            let shifted = Tensor::new(
                &shape,
                x.data().iter().map(|&v| if v.abs() > 0.4 { v.signum() * (0.55 + v.abs()) } else { v }).collect(),
            )
            .expect("shape");
            case(vec![shifted], |v, _| Ok(v[0].clamp(-0.5, 0.5)))
        }
        "sum" => case(vec![smooth], |v, _| Ok(v[0].sum())),
        "mean" => case(vec![smooth], |v, _| Ok(v[0].mean())),
        "softmax" => case(vec![smooth], |v, _| Ok(v[0].softmax())),
        "layer_norm" => {
            let mut s = shape.clone();
            let width = rng.random_range(3..=5);
            *s.last_mut().expect("rank >= 1") = width;
            // Rows with a small spread put the central difference in its
            // truncation-dominated regime; redraw them.
            let mut x = uniform(rng, &s, -2.0, 2.0);
            while x.data().chunks(width).any(|r| {
                let m = r.iter().sum::<f64>() / width as f64;
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (width as f64) < 0.25
            }) {
                x = uniform(rng, &s, -2.0, 2.0);
            }
            case(vec![x], |v, _| Ok(v[0].layer_norm(1e-5)))
        }
        "sum_axis" => {
            let mut c = case(vec![smooth], |v, a| v[0].sum_axis(a.axis));
            c.args.axis = rng.random_range(0..shape.len());
            c
        }
        "slice" => {
            let mut c = case(vec![smooth], |v, a| v[0].slice(a.axis, a.start, a.end));
            let axis = rng.random_range(0..shape.len());
            let start = rng.random_range(0..shape[axis]);
            c.args = OpArgs { axis, start, end: rng.random_range(start + 1..=shape[axis]), ..OpArgs::default() };
            c
        }
        "reshape" => {
            let mut c = case(vec![smooth], |v, a| v[0].reshape(&a.shape));
            c.args.shape = shape.iter().rev().copied().collect();
            c
        }
        other => unreachable!("unknown unary case {other}"),
    }
}

fn binary_case(rng: &mut impl Rng, name: &str) -> GradCase {
    let (sa, sb) = binary_shapes(rng);
    match name {
        "add" => case(vec![uniform(rng, &sa, -2.0, 2.0), uniform(rng, &sb, -2.0, 2.0)], |v, _| v[0].add(v[1])),
        "sub" => case(vec![uniform(rng, &sa, -2.0, 2.0), uniform(rng, &sb, -2.0, 2.0)], |v, _| v[0].sub(v[1])),
        "mul" => case(vec![uniform(rng, &sa, -2.0, 2.0), uniform(rng, &sb, -2.0, 2.0)], |v, _| v[0].mul(v[1])),
        "div" => case(vec![uniform(rng, &sa, -2.0, 2.0), signed(rng, &sb, 0.5, 2.0)], |v, _| v[0].div(v[1])),
        "minimum" => {
            let (a, b) = (banded(rng, &sa), uniform(rng, &sb, 0.4, 0.6));
            case(vec![a, b], |v, _| v[0].minimum(v[1]))
        }
        "maximum" => {
            let (a, b) = (uniform(rng, &sa, 0.4, 0.6), banded(rng, &sb));
            case(vec![a, b], |v, _| v[0].maximum(v[1]))
        }
        other => unreachable!("unknown binary case {other}"),
    }
}

fn structural_case(rng: &mut impl Rng, name: &str) -> GradCase {
    let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
    match name {
        "matmul" => {
            case(vec![uniform(rng, &[m, k], -2.0, 2.0), uniform(rng, &[k, n], -2.0, 2.0)], |v, _| v[0].matmul(v[1]))
        }
        "transpose" => case(vec![uniform(rng, &[m, k], -2.0, 2.0)], |v, _| v[0].t()),
        "gather_rows" => {
            let mut c = case(vec![uniform(rng, &[m, k], -2.0, 2.0)], |v, a| v[0].gather_rows(&a.rows));
            c.args.rows = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect();
            c
        }
        "concat" => {
            let base = random_shape(rng, 1, 3);
            let axis = rng.random_range(0..base.len());
            let parts = rng.random_range(2..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.random_range(1..=3);
                    uniform(rng, &s, -2.0, 2.0)
                })
                .collect();
            let mut c = case(inputs, |v, a| concat(v, a.axis));
            c.args.axis = axis;
            c
        }
        other => unreachable!("unknown structural case {other}"),
    }
}

fn composite_case(rng: &mut impl Rng, name: &str) -> GradCase {
    let n = rng.random_range(1..=5);
    match name {
        "encode_columns" => {
            let k = rng.random_range(1..=4);
            case(vec![uniform(rng, &[n, k], 0.0, 1.0)], |v, _| {
                encode_columns(v[0], &PeConfig::new(8, 20.0).expect("valid"))
            })
        }
        "giou_rows" => {
            let (a, b) = well_formed_boxes(rng, n);
            case(vec![a, b], |v, _| giou_rows(v[0], v[1]))
        }
        "focal_elements" => {
            let c = rng.random_range(1..=3);
            let targets =
                Tensor::new(&[n, c], (0..n * c).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect())
                    .expect("shape");
            let mut g = case(vec![uniform(rng, &[n, c], -4.0, 4.0)], |v, a| {
                focal_elements(v[0], a.targets.as_ref().expect("targets"), FOCAL_ALPHA, FOCAL_GAMMA)
            });
            g.args.targets = Some(targets);
            g
        }
        "refine_realize_boxes" => {
            let origins = uniform(rng, &[n, 2], 0.0, 0.5);
            let extent = uniform(rng, &[1, 2], 0.1, 0.5);
            case(
                vec![
                    uniform(rng, &[n, 2], -3.0, 3.0),
                    uniform(rng, &[n, 2], -3.0, 3.0),
                    origins,
                    extent,
                    uniform(rng, &[n, 4], 0.05, 0.5),
                ],
                |v, _| {
                    let z = refine_logits(v[0], v[1])?;
                    boxes_from_points_sides(realize_points(z, v[2], v[3])?, v[4])
                },
            )
        }
        "sdg_log_weights" => {
            let heads = rng.random_range(1..=3);
            let keys = FeatureGrid { cols: 3, rows: 3 }.centers_tensor();
            let mut c = case(
                // Scales of at least 0.45 keep every exponent above the log floor.
                vec![uniform(rng, &[n, 2 * heads], 0.0, 1.0), uniform(rng, &[n, 2 * heads], 0.45, 1.0)],
                |v, a| concat(&sdg_log_weights(v[0], v[1], a.keys.as_ref().expect("keys"), a.heads)?, 1),
            );
            c.args.keys = Some(keys);
            c.args.heads = heads;
            c
        }
        "multi_head_attention" => {
            let heads = rng.random_range(1..=2);
            let d = 2 * heads;
            let nk = rng.random_range(1..=5);
            let mut c = case(
                vec![
                    uniform(rng, &[n, d], -1.0, 1.0),
                    uniform(rng, &[nk, d], -1.0, 1.0),
                    uniform(rng, &[nk, d], -1.0, 1.0),
                ],
                |v, a| {
                    let cfg = AttentionConfig::new(2 * a.heads, a.heads).expect("valid");
                    Ok(multi_head_attention(v[0], v[1], v[2], cfg, None)?.output)
                },
            );
            c.args.heads = heads;
            c
        }
        other => unreachable!("unknown composite case {other}"),
    }
}

pub const UNARY_OPS: &[&str] = &[
    "neg",
    "square",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "sin",
    "log",
    "relu",
    "abs",
    "scale",
    "add_scalar",
    "clamp",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "sum_axis",
    "slice",
    "reshape",
];
pub const BINARY_OPS: &[&str] = &["add", "sub", "mul", "div", "minimum", "maximum"];
pub const STRUCTURAL_OPS: &[&str] = &["matmul", "transpose", "gather_rows", "concat"];
pub const COMPOSITE_OPS: &[&str] = &[
    "encode_columns",
    "giou_rows",
    "focal_elements",
    "refine_realize_boxes",
    "sdg_log_weights",
    "multi_head_attention",
];

/// Worst relative error of `case` under a random linear read-out of its output.
fn check_case(c: GradCase, rng: &mut impl Rng, h: f64) -> Result<crate::numerics::GradCheckReport, NumericsError> {
    let mut store = ParamStore::new();
    let ids =
        c.inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("x{i}"), t)).collect::<Result<Vec<_>, _>>()?;
    let shape = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ids.iter().map(|&id| g.param(&store, id)).collect();
        (c.op)(&vars, &c.args)?.shape()
    };
    let readout = uniform(rng, &shape, -1.0, 1.0);
    let (op, args) = (c.op, c.args);
    grad_check(&store, h, None, |g, s| {
        let vars: Vec<Var<'_>> = ids.iter().map(|&id| g.param(s, id)).collect();
        Ok(op(&vars, &args)?.mul(g.constant(readout.clone()))?.sum())
    })
}

type CaseGen = fn(&mut ChaCha8Rng, &str) -> GradCase;

/// Every primitive and composite differentiable operation on
/// `shapes_per_op` random shapes, against central differences.
pub fn op_gradient_checks(seed: u64, shapes_per_op: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4752_4144);
    let groups: [(&[&str], CaseGen); 4] = [
        (UNARY_OPS, |r, n| unary_case(r, n)),
        (BINARY_OPS, |r, n| binary_case(r, n)),
        (STRUCTURAL_OPS, |r, n| structural_case(r, n)),
        (COMPOSITE_OPS, |r, n| composite_case(r, n)),
    ];
    let mut out = Vec::new();
    for (names, make) in groups {
        for &name in names {
            let mut worst = 0.0_f64;
            let mut detail = format!("{shapes_per_op} random shapes");
            let mut failure = None;
            for _ in 0..shapes_per_op {
                let c = make(&mut rng, name);
                let shapes: Vec<Vec<usize>> = c.inputs.iter().map(|t| t.shape().to_vec()).collect();
                match check_case(c, &mut rng, GRAD_CHECK_STEP) {
                    Ok(r) if r.max_rel_error > worst => {
                        worst = r.max_rel_error;
                        detail = format!(
                            "{shapes_per_op} random shapes; worst at inputs {shapes:?}: analytic {:.6e}, numeric {:.6e}",
                            r.analytic, r.numeric
                        );
                    }
                    Ok(_) => {}
                    Err(e) => {
                        failure = Some(format!("inputs {shapes:?}: {e}"));
                        break;
                    }
                }
            }
            out.push(match failure {
                Some(e) => CheckResult::error("grads", format!("op {name}"), e),
                None => CheckResult::at_most("grads", format!("op {name}"), worst, OP_GRAD_TOLERANCE, detail),
            });
        }
    }
    out
}

/// The tiny full model (d = 16, 2 heads, 1 encoder + 2 decoder layers,
/// 4 queries, 8×8 image) with every parameter perturbed off its
/// initialization, through the complete set loss.
pub fn model_gradient_check(seed: u64) -> CheckResult {
    let name = "full tiny model";
    let cfg = ModelConfig {
        hidden_dim: 16,
        nheads: 2,
        enc_layers: 1,
        dec_layers: 2,
        dim_feedforward: 32,
        num_queries: 4,
        image_size: 8,
        patch_size: 4,
        detach: false,
        ..ModelConfig::default()
    };
    let mut model = match Model::new(cfg, seed) {
        Ok(m) => m,
        Err(e) => return CheckResult::error("grads", name, e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d4f_444c);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.value_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let image = match Image::new(8, 1, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()) {
        Ok(i) => i,
        Err(e) => return CheckResult::error("grads", name, e),
    };
    let gts = vec![
        GroundTruth { bbox: BoxXYXY::new(0.1, 0.15, 0.45, 0.4), class: 0 },
        GroundTruth { bbox: BoxXYXY::new(0.55, 0.5, 0.9, 0.95), class: 1 },
    ];
    let result = grad_check(&model.params, GRAD_CHECK_STEP, None, |g, s| {
        let out = model.forward_with(Ctx::new(g, s), &image).map_err(|e| match e {
            ModelError::Numerics(n) => n,
            other => NumericsError::shape("model", other.to_string()),
        })?;
        let crit = set_criterion(&out.layer_outputs(), &gts, &CostWeights::default(), &LossWeights::default())
            .map_err(|e| NumericsError::shape("criterion", e.to_string()))?;
        Ok(crit.total)
    });
    match result {
        Ok(r) => CheckResult::at_most(
            "grads",
            name,
            r.max_rel_error,
            MODEL_GRAD_TOLERANCE,
            format!(
                "{} entries; worst {}[{}]: analytic {:.6e}, numeric {:.6e}",
                r.entries_checked, r.worst_param, r.worst_index, r.analytic, r.numeric
            ),
        ),
        Err(e) => CheckResult::error("grads", name, e),
    }
}

// ---------------------------------------------------------------------------
// In-grid invariant.

/// Random movable-update sequences with logit steps uniform in `[-20, 20]`,
/// through both the scalar query state and the batched graph ops. The
/// measured values count points found outside their cell.
pub fn ingrid_checks(seed: u64, sequences: usize, length: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4752_4944);
    let mut scalar_violations = 0usize;
    let mut graph_violations = 0usize;
    let mut cells = Vec::with_capacity(sequences);
    let mut states = Vec::with_capacity(sequences);
    for _ in 0..sequences {
        let grid = MeshGrid::new(rng.random_range(1..=10), rng.random_range(1..=10)).expect("non-empty grid");
        let i = rng.random_range(0..grid.len());
        let state = meshgrid_init(grid, 0).swap_remove(i);
        cells.push(state.cell);
        states.push(state);
    }
    let origins =
        Tensor::new(&[sequences, 2], cells.iter().flat_map(|c| [c.origin.x, c.origin.y]).collect()).expect("shape");
    let extents =
        Tensor::new(&[sequences, 2], cells.iter().flat_map(|c| [c.extent.0, c.extent.1]).collect()).expect("shape");
    let g = Graph::new();
    let (o, e) = (g.constant(origins), g.constant(extents));
    let mut logits = g.constant(Tensor::zeros(&[sequences, 2]));
    for _ in 0..length {
        let deltas: Vec<[f64; 2]> =
            (0..sequences).map(|_| [rng.random_range(-20.0..=20.0), rng.random_range(-20.0..=20.0)]).collect();
        for (state, d) in states.iter_mut().zip(&deltas) {
            let p = state.movable_update(*d);
            if !state.cell.contains(p) {
                scalar_violations += 1;
            }
        }
        let delta =
            g.constant(Tensor::new(&[sequences, 2], deltas.iter().flatten().copied().collect()).expect("shape"));
        let step = refine_logits(logits, delta).and_then(|z| Ok((z, realize_points(z, o, e)?)));
        let (z, points) = match step {
            Ok(v) => v,
            Err(err) => return vec![CheckResult::error("ingrid", "graph updates", err)],
        };
        logits = z;
        let pts = points.value();
        graph_violations +=
            cells.iter().enumerate().filter(|(i, c)| !c.contains(Point2::new(pts.at(*i, 0), pts.at(*i, 1)))).count();
    }
    let detail = format!("{sequences} sequences of {length} updates, steps uniform in [-20, 20]");
    vec![
        CheckResult::at_most("ingrid", "scalar updates", scalar_violations as f64, 0.0, detail.clone()),
        CheckResult::at_most("ingrid", "graph updates", graph_violations as f64, 0.0, detail),
    ]
}

// ---------------------------------------------------------------------------
// Side-directed Gaussian.

/// Head-point containment for `draws` random (content, reference, sides)
/// triples through a randomly weighted offset head, agreement between the
/// graph centers and the scalar head point, and the location of each
/// Gaussian's peak.
pub fn sdg_checks(seed: u64, draws: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5344_4721);
    let (d, heads) = (16, 4);
    let cfg = AttentionConfig::new(d, heads).expect("valid");
    let mut store = ParamStore::new();
    let head = match SdgHead::new(&mut store, "sdg", cfg, &mut rng) {
        Ok(h) => h,
        Err(e) => return vec![CheckResult::error("sdg", "containment", e)],
    };
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let batch = 1000;
    let (mut outside, mut disagreement) = (0usize, 0.0_f64);
    let mut done = 0;
    while done < draws {
        let n = batch.min(draws - done);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let content = g.constant(uniform(&mut rng, &[n, d], -3.0, 3.0));
        let points = uniform(&mut rng, &[n, 2], 0.0, 1.0);
        let sides = uniform(&mut rng, &[n, 4], 0.0, 1.0);
        let out = match head.forward(ctx, content, g.constant(points.clone()), g.constant(sides.clone())) {
            Ok(o) => o,
            Err(e) => return vec![CheckResult::error("sdg", "containment", e)],
        };
        let (centers, offsets) = (out.centers.value(), out.offsets.value());
        for i in 0..n {
            let r = Point2::new(points.at(i, 0), points.at(i, 1));
            let s = SideDistances::from_array([sides.at(i, 0), sides.at(i, 1), sides.at(i, 2), sides.at(i, 3)]);
            let b = box_from_point_sides(r, s);
            for h in 0..heads {
                let c = Point2::new(centers.at(i, 2 * h), centers.at(i, 2 * h + 1));
                if !contains(&b, c) {
                    outside += 1;
                }
                let scalar = head_point([offsets.at(i, 2 * h), offsets.at(i, 2 * h + 1)], r, s);
                disagreement = disagreement.max((scalar.x - c.x).abs()).max((scalar.y - c.y).abs());
            }
        }
        done += n;
    }

    let grid = FeatureGrid { cols: 16, rows: 16 };
    let cell = 1.0 / 16.0;
    let mut worst_peak = 0.0_f64;
    for _ in 0..1000 {
        let c = Point2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let v = [rng.random_range(0.02..0.5), rng.random_range(0.02..0.5)];
        let map = match sdg_map(c, v, grid) {
            Ok(m) => m,
            Err(e) => return vec![CheckResult::error("sdg", "gaussian peak", e)],
        };
        let i = map.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
        let p = grid.cell_center(i);
        worst_peak = worst_peak.max((p.x - c.x).abs().max((p.y - c.y).abs()) / cell);
    }

    vec![
        CheckResult::at_most(
            "sdg",
            "containment",
            outside as f64,
            0.0,
            format!("{draws} draws x {heads} heads, offset weights ~ N(0, 1)"),
        ),
        CheckResult::at_most("sdg", "graph vs scalar head point", disagreement, 1e-12, "max coordinate difference"),
        CheckResult::at_most("sdg", "gaussian peak", worst_peak, 1.0, "peak distance from head point, in 16x16 cells"),
    ]
}
