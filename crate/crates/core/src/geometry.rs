//! Normalized-coordinate points, side distances and boxes.
//!
//! Every coordinate lives in image-normalized units where the image spans
//! `[0, 1]²`. Predicted boxes may leave that square before clamping; ground
//! truth may not.

use serde::{Deserialize, Serialize};

use crate::numerics::stable_sigmoid;

/// Clamp applied before every inverse sigmoid.
pub const INVERSE_SIGMOID_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

/// Distances from a reference point to the left, top, right and bottom box sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideDistances {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl SideDistances {
    pub const fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn uniform(v: f64) -> Self {
        Self::new(v, v, v, v)
    }

    /// Components in `(l, t, r, b)` order, the indexing used for side selection.
    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn in_unit_range(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxXYXY {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Area, zero for inverted or degenerate boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_well_formed(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn clamped_to_unit(&self) -> Self {
        Self::new(self.x0.clamp(0.0, 1.0), self.y0.clamp(0.0, 1.0), self.x1.clamp(0.0, 1.0), self.y1.clamp(0.0, 1.0))
    }

    /// Sides of this box as seen from `r` (the inverse of [`box_from_point_sides`]).
    pub fn sides_from(&self, r: Point2) -> SideDistances {
        SideDistances::new(r.x - self.x0, r.y - self.y0, self.x1 - r.x, self.y1 - r.y)
    }
}

/// One cell of the reference-point mesh grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub origin: Point2,
    /// (width, height) of the cell.
    pub extent: (f64, f64),
}

impl GridCell {
    /// Half-open membership: `origin <= p < origin + extent` on both axes.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.origin.x
            && p.x < self.origin.x + self.extent.0
            && p.y >= self.origin.y
            && p.y < self.origin.y + self.extent.1
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.origin.x + 0.5 * self.extent.0, self.origin.y + 0.5 * self.extent.1)
    }
}

/// `{x - l, y - t, x + r, y + b}`.
pub fn box_from_point_sides(r: Point2, s: SideDistances) -> BoxXYXY {
    BoxXYXY::new(r.x - s.l, r.y - s.t, r.x + s.r, r.y + s.b)
}

/// Inclusive containment: points on an edge count as inside.
pub fn contains(b: &BoxXYXY, p: Point2) -> bool {
    b.x0 <= p.x && p.x <= b.x1 && b.y0 <= p.y && p.y <= b.y1
}

fn intersection_area(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    w * h
}

pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = (a.x1.max(b.x1) - a.x0.min(b.x0)).max(0.0) * (a.y1.max(b.y1) - a.y0.min(b.y0)).max(0.0);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

/// `ln(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(INVERSE_SIGMOID_EPS, 1.0 - INVERSE_SIGMOID_EPS);
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Area oracle: counts sample points on a `1/res` lattice.
    fn raster_area(boxes: &[BoxXYXY], combine: impl Fn(&[bool]) -> bool, lo: f64, hi: f64, res: usize) -> f64 {
        let step = (hi - lo) / res as f64;
        let mut count = 0usize;
        for i in 0..res {
            let x = lo + (i as f64 + 0.5) * step;
            for j in 0..res {
                let y = lo + (j as f64 + 0.5) * step;
                let inside: Vec<bool> =
                    boxes.iter().map(|b| b.x0 <= x && x <= b.x1 && b.y0 <= y && y <= b.y1).collect();
                if combine(&inside) {
                    count += 1;
                }
            }
        }
        count as f64 * step * step
    }

    fn raster_iou_giou(a: BoxXYXY, b: BoxXYXY) -> (f64, f64) {
        let res = 2000;
        let (lo, hi) = (-0.5, 2.5);
        let inter = raster_area(&[a, b], |v| v[0] && v[1], lo, hi, res);
        let union = raster_area(&[a, b], |v| v[0] || v[1], lo, hi, res);
        let enc = BoxXYXY::new(a.x0.min(b.x0), a.y0.min(b.y0), a.x1.max(b.x1), a.y1.max(b.y1));
        let enc_area = raster_area(&[enc], |v| v[0], lo, hi, res);
        let iou = inter / union;
        (iou, iou - (enc_area - union) / enc_area)
    }

    #[test]
    fn box_from_point_sides_examples() {
        let b = box_from_point_sides(Point2::new(0.5, 0.5), SideDistances::new(0.1, 0.2, 0.3, 0.4));
        let expect = [0.4, 0.3, 0.8, 0.9];
        for (got, want) in b.to_array().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        let b = box_from_point_sides(Point2::new(0.5, 0.5), SideDistances::uniform(0.0));
        assert_eq!(b, BoxXYXY::new(0.5, 0.5, 0.5, 0.5));
        let b = box_from_point_sides(Point2::new(0.0, 0.0), SideDistances::uniform(0.1));
        assert_eq!(b, BoxXYXY::new(-0.1, -0.1, 0.1, 0.1));
    }

    #[test]
    fn containment_is_inclusive() {
        assert!(contains(&BoxXYXY::new(0.0, 0.0, 1.0, 1.0), Point2::new(0.5, 0.5)));
        assert!(contains(&BoxXYXY::new(0.0, 0.0, 0.4, 0.4), Point2::new(0.4, 0.2)));
        assert!(!contains(&BoxXYXY::new(0.0, 0.0, 0.4, 0.4), Point2::new(0.5, 0.5)));
    }

    #[test]
    fn iou_examples() {
        let a = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoxXYXY::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let b = BoxXYXY::new(0.5, 0.0, 1.5, 1.0);
        let (r_iou, r_giou) = raster_iou_giou(a, b);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - r_iou).abs() < 1e-3);
        assert!((giou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((giou(&a, &b) - r_giou).abs() < 1e-3);
    }

    #[test]
    fn giou_of_corner_touching_boxes() {
        let a = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXYXY::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert!((giou(&a, &b) + 0.5).abs() < 1e-12);
        let (_, r_giou) = raster_iou_giou(a, b);
        assert!((r_giou + 0.5).abs() < 1e-3);
    }

    #[test]
    fn degenerate_boxes_do_not_error() {
        let p = BoxXYXY::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(giou(&p, &p), 0.0);
        let line = BoxXYXY::new(0.2, 0.5, 0.6, 0.5);
        let q = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&line, &q), 0.0);
        assert!(giou(&line, &q) <= 0.0);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(inverse_sigmoid(0.5), 0.0);
        assert!((inverse_sigmoid(0.75) - 3f64.ln()).abs() < 1e-15);
        assert!(inverse_sigmoid(0.0).is_finite());
        assert!(inverse_sigmoid(1.0).is_finite());
    }

    fn any_box() -> impl Strategy<Value = BoxXYXY> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..0.6f64, 0.0..0.6f64).prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn sides_round_trip(x in 0.2..0.8f64, y in 0.2..0.8f64, s in prop::array::uniform4(0.0..0.2f64)) {
            let r = Point2::new(x, y);
            let sides = SideDistances::from_array(s);
            let back = box_from_point_sides(r, sides).sides_from(r);
            for (a, b) in back.to_array().iter().zip(s) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn giou_bounded_by_iou_and_symmetric(a in any_box(), b in any_box()) {
            let (i, g) = (iou(&a, &b), giou(&a, &b));
            prop_assert!(g <= i + 1e-15);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert_eq!(g, giou(&b, &a));
            let union = a.area() + b.area() - intersection_area(&a, &b);
            let enc = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
            if (enc - union).abs() < 1e-15 && union > 0.0 {
                prop_assert!((g - i).abs() < 1e-12);
            }
        }

        #[test]
        fn inverse_sigmoid_inverts(x in -6.9..6.9f64) {
            prop_assert!((inverse_sigmoid(sigmoid(x)) - x).abs() < 1e-9);
        }
    }
}
