//! Mesh-grid reference points, the in-cell movable update and cascaded
//! side refinement.
//!
//! Each query owns one grid cell. Its reference point is
//! `r = r0 + σ(z)·extent` where `r0` is the cell's top-left corner and `z`
//! the accumulated 2D point logit, so the point can move but never leave the
//! cell. Side distances are likewise kept as logits and realized through a
//! sigmoid.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    box_from_point_sides, inverse_sigmoid, sigmoid, BoxXYXY, GridCell, Point2, SideDistances, INVERSE_SIGMOID_EPS,
};
use crate::numerics::{concat, NumericsError, Var};

/// Side distance every query starts from.
pub const INITIAL_SIDE: f64 = 0.05;

/// Logits are clamped to this magnitude before realization so that
/// `σ(z) < 1` holds exactly in floating point.
pub const REALIZE_LOGIT_LIMIT: f64 = 30.0;

/// `σ⁻¹(1 - ε)`: incoming logits are clamped here before a new offset is added.
pub fn carried_logit_limit() -> f64 {
    inverse_sigmoid(1.0 - INVERSE_SIGMOID_EPS)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RefPointError {
    #[error("{0} queries cannot tile a square or near-square (G x (G+1)) grid")]
    NotGridFactorable(usize),
    #[error("grid must have at least one row and one column")]
    EmptyGrid,
}

/// A `cols × rows` tiling of the unit square; cells are numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshGrid {
    pub cols: usize,
    pub rows: usize,
}

impl MeshGrid {
    pub fn new(cols: usize, rows: usize) -> Result<Self, RefPointError> {
        if cols == 0 || rows == 0 {
            return Err(RefPointError::EmptyGrid);
        }
        Ok(Self { cols, rows })
    }

    /// `G × G` for perfect squares, `G × (G+1)` for pronic counts such as 306 = 17 × 18.
    pub fn for_queries(n: usize) -> Result<Self, RefPointError> {
        let g = (n as f64).sqrt().floor() as usize;
        if g > 0 && g * g == n {
            return Self::new(g, g);
        }
        if g > 0 && g * (g + 1) == n {
            return Self::new(g, g + 1);
        }
        Err(RefPointError::NotGridFactorable(n))
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> (f64, f64) {
        (1.0 / self.cols as f64, 1.0 / self.rows as f64)
    }

    pub fn cell(&self, index: usize) -> GridCell {
        let (w, h) = self.extent();
        let (col, row) = (index % self.cols, index / self.cols);
        GridCell { origin: Point2::new(col as f64 * w, row as f64 * h), extent: (w, h) }
    }

    pub fn cells(&self) -> impl Iterator<Item = GridCell> + '_ {
        (0..self.len()).map(|i| self.cell(i))
    }
}

fn realize_fraction(logit: f64) -> f64 {
    sigmoid(logit.clamp(-REALIZE_LOGIT_LIMIT, REALIZE_LOGIT_LIMIT))
}

/// One object query: content plus its grid-anchored geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub content: Vec<f64>,
    pub anchor_origin: Point2,
    pub point_logits: [f64; 2],
    pub side_logits: [f64; 4],
    pub cell: GridCell,
}

impl QueryState {
    pub fn reference(&self) -> Point2 {
        let (w, h) = self.cell.extent;
        Point2::new(
            self.anchor_origin.x + realize_fraction(self.point_logits[0]) * w,
            self.anchor_origin.y + realize_fraction(self.point_logits[1]) * h,
        )
    }

    pub fn sides(&self) -> SideDistances {
        SideDistances::from_array(self.side_logits.map(realize_fraction))
    }

    pub fn proposal_box(&self) -> BoxXYXY {
        box_from_point_sides(self.reference(), self.sides())
    }

    /// Adds `delta` to the (clamped) point logits and returns the new point.
    pub fn movable_update(&mut self, delta: [f64; 2]) -> Point2 {
        let limit = carried_logit_limit();
        for (z, d) in self.point_logits.iter_mut().zip(delta) {
            *z = z.clamp(-limit, limit) + d;
        }
        self.reference()
    }

    /// Adds `delta` to the (clamped) side logits and returns the new sides.
    pub fn side_update(&mut self, delta: [f64; 4]) -> SideDistances {
        let limit = carried_logit_limit();
        for (z, d) in self.side_logits.iter_mut().zip(delta) {
            *z = z.clamp(-limit, limit) + d;
        }
        self.sides()
    }
}

/// Queries on a fresh grid: points at cell centers, sides at [`INITIAL_SIDE`].
pub fn meshgrid_init(grid: MeshGrid, content_dim: usize) -> Vec<QueryState> {
    let side_logit = inverse_sigmoid(INITIAL_SIDE);
    grid.cells()
        .map(|cell| QueryState {
            content: vec![0.0; content_dim],
            anchor_origin: cell.origin,
            point_logits: [0.0; 2],
            side_logits: [side_logit; 4],
            cell,
        })
        .collect()
}

/// Per-query output of one decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrediction {
    pub bbox: BoxXYXY,
    pub class_logits: Vec<f64>,
    pub reference: Point2,
    pub sides: SideDistances,
}

/// `clamp(prev, ±σ⁻¹(1-ε)) + delta`.
pub fn refine_logits<'g>(prev: Var<'g>, delta: Var<'g>) -> Result<Var<'g>, NumericsError> {
    let limit = carried_logit_limit();
    prev.clamp(-limit, limit).add(delta)
}

/// `origins + σ(z)·extent` for `n × 2` logits; `extent` is a `1 × 2` row.
pub fn realize_points<'g>(logits: Var<'g>, origins: Var<'g>, extent: Var<'g>) -> Result<Var<'g>, NumericsError> {
    let frac = logits.clamp(-REALIZE_LOGIT_LIMIT, REALIZE_LOGIT_LIMIT).sigmoid();
    origins.add(frac.mul(extent)?)
}

pub fn realize_sides(logits: Var<'_>) -> Var<'_> {
    logits.clamp(-REALIZE_LOGIT_LIMIT, REALIZE_LOGIT_LIMIT).sigmoid()
}

/// `n × 4` boxes `[x - l, y - t, x + r, y + b]` from `n × 2` points and `n × 4` sides.
pub fn boxes_from_points_sides<'g>(points: Var<'g>, sides: Var<'g>) -> Result<Var<'g>, NumericsError> {
    let lo = points.sub(sides.slice(1, 0, 2)?)?;
    let hi = points.add(sides.slice(1, 2, 4)?)?;
    concat(&[lo, hi], 1)
}
