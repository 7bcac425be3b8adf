use std::fs;

use spdet_core::geometry::{box_from_point_sides, BoxXYXY, Point2, SideDistances};
use spdet_core::harness::config::{eval_scene_seeds, train_scene_seed, RunConfig};
use spdet_core::harness::eval::{greedy_hits, smooth, Evaluator};
use spdet_core::harness::export::export_attention;
use spdet_core::harness::scene::{generate_scene, write_dataset, write_image, SceneMode, SceneParams, SceneRecord};
use spdet_core::harness::train::{read_log, train, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE};
use spdet_core::harness::{evaluate, HarnessError};
use spdet_core::matching::{CostWeights, GroundTruth};
use spdet_core::model::{load_checkpoint, Model};
use spdet_core::refpoints::LayerPrediction;

fn tiny_run(dir: &std::path::Path) -> RunConfig {
    RunConfig {
        hidden_dim: 16,
        nheads: 2,
        enc_layers: 1,
        dec_layers: 2,
        dim_feedforward: 32,
        num_queries: 4,
        image_size: 16,
        patch_size: 4,
        batch_size: 2,
        iterations: 3,
        warm_up: 2,
        eval_scenes: 4,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn scenes_are_deterministic_and_in_range() {
    let p = SceneParams::default();
    assert_eq!(generate_scene(&p, 17).unwrap(), generate_scene(&p, 17).unwrap());
    assert_ne!(generate_scene(&p, 17).unwrap().image, generate_scene(&p, 18).unwrap().image);
    let mut classes = [0usize; 2];
    for seed in 0..1000 {
        let s = generate_scene(&p, seed).unwrap();
        assert!((p.min_objects..=p.max_objects).contains(&s.annotations.len()), "seed {seed}");
        for a in &s.annotations {
            let b = a.bbox;
            assert!(b.is_well_formed() && b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0);
            classes[a.class] += 1;
        }
    }
    assert!(classes.iter().all(|&c| c > 300), "{classes:?}");
}

#[test]
fn object_count_range_is_respected() {
    let p = SceneParams { min_objects: 2, max_objects: 5, ..SceneParams::default() };
    let counts: Vec<usize> = (0..1000).map(|s| generate_scene(&p, s).unwrap().annotations.len()).collect();
    assert!(counts.iter().all(|c| (2..=5).contains(c)));
    assert!(counts.contains(&2) && counts.contains(&5));
}

#[test]
fn slender_boxes_fit_one_cell_across() {
    let p = SceneParams { mode: SceneMode::Slender, ..SceneParams::default() };
    let cell = 1.0 / 8.0;
    for seed in 0..500 {
        for a in generate_scene(&p, seed).unwrap().annotations {
            let (w, h) = (a.bbox.width(), a.bbox.height());
            assert!(w.min(h) <= cell + 1e-12, "seed {seed}: {w} x {h}");
            assert!(w.max(h) / w.min(h) >= 6.0 - 1e-9, "seed {seed}: {w} x {h}");
        }
    }
}

#[test]
fn fill_intensity_encodes_class() {
    let p = SceneParams::default();
    for seed in 0..50 {
        let s = generate_scene(&p, seed).unwrap();
        // The last object is painted on top, so its center pixel is unoccluded.
        let top = s.annotations.last().unwrap();
        let c = top.bbox.center();
        let (x, y) = ((c.x * 64.0) as usize, (c.y * 64.0) as usize);
        let v = s.image.at(x.min(63), y.min(63), 0);
        assert!((v - p.class_intensity(top.class, 0)).abs() <= 0.015 + 1e-12, "seed {seed}");
    }
}

#[test]
fn scene_params_are_validated() {
    for bad in [
        SceneParams { num_classes: 1, ..SceneParams::default() },
        SceneParams { max_objects: 6, ..SceneParams::default() },
        SceneParams { min_objects: 0, ..SceneParams::default() },
        SceneParams { min_objects: 4, max_objects: 3, ..SceneParams::default() },
        SceneParams { channels: 2, ..SceneParams::default() },
    ] {
        assert!(matches!(generate_scene(&bad, 0), Err(HarnessError::Config(_))));
    }
    assert!("diagonal".parse::<SceneMode>().is_err());
    assert_eq!("slender".parse::<SceneMode>().unwrap(), SceneMode::Slender);
}

#[test]
fn images_and_datasets_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SceneParams::default(), 3).unwrap();
    let path = dir.path().join("s.pgm");
    write_image(&scene.image, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(bytes.len(), b"P5\n64 64\n255\n".len() + 64 * 64);

    let color = SceneParams { channels: 3, ..SceneParams::default() };
    let records = write_dataset(&color, 10, 5, &dir.path().join("data")).unwrap();
    assert_eq!(records.len(), 5);
    let index = fs::read_to_string(dir.path().join("data/scenes.jsonl")).unwrap();
    let parsed: Vec<SceneRecord> = index.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed[2].seed, 12);
    assert!(fs::read(dir.path().join("data").join(&parsed[2].image)).unwrap().starts_with(b"P6\n"));
    let scene = generate_scene(&color, 12).unwrap();
    assert_eq!(parsed[2].annotations.len(), scene.annotations.len());
    assert_eq!(parsed[2].annotations[0].bbox, scene.annotations[0].bbox.to_array());
}

#[test]
fn run_config_keys_and_validation() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let text = cfg.to_toml_string();
    for key in [
        "lr",
        "lr_backbone",
        "weight_decay",
        "k_pe_temp",
        "q_point_pe_temp",
        "q_bbox_pe_temp",
        "enc_layers",
        "dec_layers",
        "dim_feedforward",
        "hidden_dim",
        "dropout",
        "nheads",
        "warm_up",
        "batch_size",
        "mask_loss",
        "obj_loss",
        "class_loss",
        "bbox_loss",
        "giou_loss",
        "obj_cost",
        "class_cost",
        "bbox_cost",
        "giou_cost",
        "inner_cost",
        "focal_alpha",
        "transformer_activation",
        "num_queries",
    ] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "missing {key}");
    }
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml_str("lr = 0.0002").unwrap().lr, 2e-4);

    for bad in [
        "warm_up = 3000",
        "dropout = 0.1",
        "transformer_activation = \"gelu\"",
        "nheads = 7",
        "num_queries = 60",
        "colour = 1",
    ] {
        assert!(matches!(RunConfig::from_toml_str(bad), Err(HarnessError::Config(_))), "{bad}");
    }
}

#[test]
fn overrides_apply_typed_values() {
    let cfg = RunConfig::default()
        .with_overrides(&[
            "lr=0.001",
            "movable=false",
            "scene_mode=slender",
            "iterations = 500",
            "warm_up=100",
            "inner_cost=100000",
        ])
        .unwrap();
    assert_eq!(cfg.lr, 1e-3);
    assert!(!cfg.movable);
    assert_eq!(cfg.scene_mode, SceneMode::Slender);
    assert_eq!((cfg.iterations, cfg.warm_up), (500, 100));
    assert_eq!(cfg.inner_cost, 1e5);
    assert_eq!(cfg.with_overrides(&["output_dir=/tmp/x"]).unwrap().output_dir, std::path::PathBuf::from("/tmp/x"));
    for bad in ["nope=1", "lr", "lr=fast", "iterations=10"] {
        assert!(matches!(RunConfig::default().with_overrides(&[bad]), Err(HarnessError::Config(_))), "{bad}");
    }
}

#[test]
fn warm_up_ramps_linearly() {
    let cfg = RunConfig { iterations: 10, warm_up: 4, lr: 1e-3, ..RunConfig::default() };
    let lrs: Vec<f64> = (0..10).map(|i| cfg.lr_at(i)).collect();
    assert_eq!(&lrs[..5], &[2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3]);
    let full = RunConfig { iterations: 10, warm_up: 10, lr: 1e-3, ..RunConfig::default() };
    assert!((0..9).all(|i| full.lr_at(i) < 1e-3));
    assert_eq!(full.lr_at(9), 1e-3);
    let none = RunConfig { warm_up: 0, ..cfg };
    assert!((0..10).all(|i| none.lr_at(i) == 1e-3));
}

#[test]
fn training_and_held_out_seeds_are_disjoint() {
    let eval: Vec<u64> = eval_scene_seeds(200).collect();
    for it in 0..2000 {
        for b in 0..8 {
            let s = train_scene_seed(0, it, b, 8);
            assert!(s < eval[0]);
        }
    }
    assert_ne!(train_scene_seed(0, 1, 0, 8), train_scene_seed(1, 1, 0, 8));
}

#[test]
fn smoothing_is_a_trailing_mean() {
    let s = smooth(&[1.0, 3.0, 5.0, 7.0], 2);
    assert_eq!(s, vec![1.0, 2.0, 4.0, 6.0]);
    assert!(smooth(&[], 100).is_empty());
}

fn oracle(gt: &GroundTruth, reference: Point2, classes: usize) -> LayerPrediction {
    let sides = gt.bbox.sides_from(reference);
    let mut logits = vec![-8.0; classes];
    logits[gt.class] = 8.0;
    LayerPrediction { bbox: box_from_point_sides(reference, sides), class_logits: logits, reference, sides }
}

#[test]
fn perfect_predictions_score_perfectly() {
    let gts = vec![
        GroundTruth { bbox: BoxXYXY::new(0.1, 0.1, 0.4, 0.3), class: 0 },
        GroundTruth { bbox: BoxXYXY::new(0.5, 0.55, 0.95, 0.9), class: 1 },
    ];
    let mut preds: Vec<LayerPrediction> = (0..4)
        .map(|i| LayerPrediction {
            bbox: BoxXYXY::new(0.0, 0.0, 0.05, 0.05),
            class_logits: vec![-9.0, -9.0],
            reference: Point2::new(0.01 + 0.01 * i as f64, 0.02),
            sides: SideDistances::uniform(0.01),
        })
        .collect();
    preds[1] = oracle(&gts[0], gts[0].bbox.center(), 2);
    preds[3] = oracle(&gts[1], gts[1].bbox.center(), 2);
    let mut ev = Evaluator::new(CostWeights::default(), 0.3, 2, 0.125);
    let a = ev.add(&preds, &gts).unwrap();
    assert_eq!(a.pairs, vec![(1, 0), (3, 1)]);
    let r = ev.report();
    assert!((r.matched_iou - 1.0).abs() < 1e-12);
    assert_eq!((r.recall, r.salient_rate), (1.0, 1.0));
    assert_eq!(r.per_class_recall, vec![1.0, 1.0]);
    assert_eq!(r.small_objects, 0);
}

#[test]
fn greedy_recall_needs_class_score_and_overlap() {
    let gt = GroundTruth { bbox: BoxXYXY::new(0.2, 0.2, 0.6, 0.6), class: 1 };
    let good = oracle(&gt, Point2::new(0.4, 0.4), 2);
    assert_eq!(greedy_hits(std::slice::from_ref(&good), &[gt], 0.3), vec![true]);
    let mut wrong_class = good.clone();
    wrong_class.class_logits = vec![8.0, -8.0];
    assert_eq!(greedy_hits(&[wrong_class], &[gt], 0.3), vec![false]);
    let mut unsure = good.clone();
    unsure.class_logits = vec![-8.0, -1.0];
    assert_eq!(greedy_hits(&[unsure], &[gt], 0.3), vec![false]);
    let mut shifted = good.clone();
    shifted.bbox = BoxXYXY::new(0.45, 0.45, 0.85, 0.85);
    assert_eq!(greedy_hits(&[shifted], &[gt], 0.3), vec![false]);
    // One prediction cannot claim two objects.
    let twin = GroundTruth { bbox: BoxXYXY::new(0.21, 0.2, 0.6, 0.6), class: 1 };
    assert_eq!(greedy_hits(&[good], &[gt, twin], 0.3).iter().filter(|h| **h).count(), 1);
}

#[test]
fn untrained_model_metrics_are_well_defined() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let model = Model::new(cfg.model_config(), 0).unwrap();
    let r = evaluate(&model, &cfg.scene_params(), 0..20, cfg.cost_weights(), 0.3).unwrap();
    assert_eq!(r.scenes, 20);
    for v in [r.matched_iou, r.salient_rate, r.recall] {
        assert!((0.0..=1.0).contains(&v));
    }
    // Every object gets a query and references never leave their cells.
    assert!(r.objects > 0);
}

#[test]
fn zero_iterations_reports_the_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { iterations: 0, warm_up: 0, ..tiny_run(dir.path()) };
    let out = train(&cfg).unwrap();
    assert!(out.log.is_empty() && out.report.loss_curve.is_empty());
    assert_eq!(out.report.scenes, 4);
    for f in [CHECKPOINT_FILE, LOG_FILE, REPORT_FILE, "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(dir.path().join(LOG_FILE)).unwrap(), "");
}

#[test]
fn short_runs_log_every_iteration_and_are_reproducible() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train(&tiny_run(d1.path())).unwrap();
    let b = train(&tiny_run(d2.path())).unwrap();
    let log = read_log(&d1.path().join(LOG_FILE)).unwrap();
    assert_eq!(log, a.log);
    assert_eq!(log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(log[0].lr, 0.5e-4);
    assert!(log.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    for f in [CHECKPOINT_FILE, LOG_FILE, REPORT_FILE] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let loaded = load_checkpoint(&d1.path().join(CHECKPOINT_FILE)).unwrap();
    let scene = generate_scene(&tiny_run(d1.path()).scene_params(), 5).unwrap();
    assert_eq!(loaded.predict(&scene.image).unwrap(), b.model.predict(&scene.image).unwrap());
}

#[test]
fn divergence_aborts_with_iteration_and_leaves_a_readable_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { lr: 1e300, warm_up: 0, iterations: 5, ..tiny_run(dir.path()) };
    match train(&cfg) {
        Err(HarnessError::NonFinite { iteration, component }) => {
            assert!(iteration >= 2, "{iteration}");
            assert!(!component.is_empty());
            let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
            assert_eq!(log.len(), iteration - 1);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn truncated_log_lines_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(LOG_FILE);
    fs::write(
        &path,
        "{\"iteration\":1,\"lr\":0.1,\"loss\":2.0,\"classification\":1.0,\"box_l1\":0.5,\"box_giou\":0.5,\"grad_norm\":1.0}\n{\"iteration\":2,\"lr\"",
    )
    .unwrap();
    assert_eq!(read_log(&path).unwrap().len(), 1);
}

#[test]
fn attention_export_writes_normalized_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        hidden_dim: 32,
        nheads: 4,
        enc_layers: 1,
        dec_layers: 2,
        dim_feedforward: 32,
        num_queries: 16,
        ..RunConfig::default()
    };
    let mut model = Model::new(cfg.model_config(), 1).unwrap();
    // Spread the SDG heads so their Gaussians move off the reference.
    let ids: Vec<_> = model.params.ids().filter(|&id| model.params.name(id).contains(".sdg.")).collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (i, v) in model.params.value_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.3 * (((i * 7 + k * 13) % 11) as f64 / 5.0 - 1.0);
        }
    }
    let scene = generate_scene(&cfg.scene_params(), 9).unwrap();
    let out = export_attention(&model, &scene, &[0, 5, 15], 1, dir.path()).unwrap();
    let grid = out.grid;
    assert_eq!((grid.cols, grid.rows), (8, 8));
    assert_eq!(out.queries.len(), 3);
    for q in &out.queries {
        assert_eq!(q.heads.len(), 4);
        for h in &q.heads {
            assert!((h.attention_sum - 1.0).abs() < 1e-5);
            let bytes = fs::read(dir.path().join(&h.attention_file)).unwrap();
            assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
            let csv = fs::read_to_string(dir.path().join(h.attention_file.replace(".pgm", ".csv"))).unwrap();
            let values: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
            assert_eq!(values.len(), 64);
            assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            let c = h.sdg_head_point.unwrap();
            if c.in_unit_square() {
                let [col, row] = h.sdg_argmax.unwrap();
                let center = Point2::new((col as f64 + 0.5) / 8.0, (row as f64 + 0.5) / 8.0);
                assert!((center.x - c.x).abs() <= 1.0 / 8.0 && (center.y - c.y).abs() <= 1.0 / 8.0);
            }
        }
    }
    let traj = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 16 * 2);
    let assign = fs::read_to_string(dir.path().join("assignments.csv")).unwrap();
    assert_eq!(assign.lines().count(), 1 + 2 * scene.annotations.len());
    assert!(dir.path().join("attention.json").exists() && dir.path().join("scene.pgm").exists());
}

#[test]
fn attention_export_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let model = Model::new(cfg.model_config(), 0).unwrap();
    let scene = generate_scene(&cfg.scene_params(), 0).unwrap();
    let err = export_attention(&model, &scene, &[1, 4], 0, dir.path()).unwrap_err();
    assert!(err.to_string().contains("0..=3"), "{err}");
    let err = export_attention(&model, &scene, &[0], 2, dir.path()).unwrap_err();
    assert!(err.to_string().contains("0..=1"), "{err}");
    assert!(export_attention(&model, &scene, &[], 0, dir.path()).is_err());
}
