use proptest::prelude::*;

use spdet_core::geometry::{contains, BoxXYXY, Point2};
use spdet_core::matching::{inner_cost, DEFAULT_INNER_PENALTY};
use spdet_core::numerics::{Graph, Tensor};
use spdet_core::posenc::{pe_similarity, PeConfig};
use spdet_core::refpoints::{meshgrid_init, MeshGrid};

fn unit_box() -> impl Strategy<Value = BoxXYXY> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, (x + w).min(1.0), (y + h).min(1.0)))
}

proptest! {
    #[test]
    fn inner_cost_vanishes_exactly_inside(b in unit_box(), x in 0.0..1.0f64, y in 0.0..1.0f64) {
        let p = Point2::new(x, y);
        let c = inner_cost(&b, p, DEFAULT_INNER_PENALTY);
        prop_assert_eq!(c == 0.0, contains(&b, p));
        prop_assert!(c == 0.0 || c == DEFAULT_INNER_PENALTY);
    }

    #[test]
    fn self_similarity_is_half_dim(pos in -2.0..2.0f64, half in 1usize..64, t in 1.0..50_000.0f64) {
        let cfg = PeConfig::new(2 * half, t).unwrap();
        let s = pe_similarity(pos, pos, &cfg, &cfg).unwrap();
        prop_assert!((s - half as f64).abs() < 1e-9);
    }

    #[test]
    fn similarity_never_exceeds_half_dim(
        q in -1.0..2.0f64, k in -1.0..2.0f64, half in 1usize..64, tq in 1.0..50_000.0f64, tk in 1.0..50_000.0f64,
    ) {
        let (a, b) = (PeConfig::new(2 * half, tq).unwrap(), PeConfig::new(2 * half, tk).unwrap());
        prop_assert!(pe_similarity(q, k, &a, &b).unwrap() <= half as f64 + 1e-9);
    }

    #[test]
    fn movable_updates_never_leave_the_cell(
        cols in 1usize..12, rows in 1usize..12, pick in any::<prop::sample::Index>(),
        deltas in prop::collection::vec((-1e6..1e6f64, -1e6..1e6f64), 1..20),
    ) {
        let grid = MeshGrid::new(cols, rows).unwrap();
        let mut q = meshgrid_init(grid, 1).swap_remove(pick.index(grid.len()));
        for (dx, dy) in deltas {
            let p = q.movable_update([dx, dy]);
            prop_assert!(q.cell.contains(p), "{:?} left {:?}", p, q.cell);
        }
    }

    #[test]
    fn positive_offsets_move_points_forward(dx in 1e-3..3.0f64, dy in 1e-3..3.0f64, start in -4.0..4.0f64) {
        let grid = MeshGrid::new(4, 4).unwrap();
        let mut q = meshgrid_init(grid, 1).swap_remove(5);
        q.point_logits = [start, -start];
        let before = q.reference();
        let after = q.movable_update([dx, dy]);
        prop_assert!(after.x > before.x && after.y > before.y);
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6, cols in 1usize..12, seed in prop::collection::vec(-300.0..300.0f64, 72),
    ) {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[rows, cols], seed[..rows * cols].to_vec()).unwrap());
        let y = x.softmax().value();
        for r in 0..rows {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn stop_gradient_keeps_values(data in prop::collection::vec(-5.0..5.0f64, 12)) {
        let g = Graph::new();
        let x = g.variable(Tensor::new(&[3, 4], data).unwrap());
        let plain = x.sigmoid().mul(x).unwrap().value();
        let blocked = x.sigmoid().stop_gradient().mul(x).unwrap().value();
        prop_assert_eq!(plain, blocked);
    }
}
