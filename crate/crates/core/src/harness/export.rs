//! File exports: per-head attention fields, SDG components, reference-point
//! trajectories and matching assignments.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{write_field_csv, write_field_pgm, write_image, SyntheticScene};
use super::HarnessError;
use crate::attention::{sdg_field, FeatureGrid, SdgHead};
use crate::geometry::{contains, iou, Point2, SideDistances};
use crate::matching::{hungarian, match_cost, CostMatrix, CostWeights};
use crate::model::{trace_predictions, Model};
use crate::numerics::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadExport {
    pub head: usize,
    pub attention_file: String,
    /// Sum of the exported post-softmax weights.
    pub attention_sum: f64,
    pub attention_argmax: [usize; 2],
    pub sdg_file: Option<String>,
    pub sdg_head_point: Option<Point2>,
    pub sdg_argmax: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryExport {
    pub query: usize,
    pub reference: Point2,
    pub sides: SideDistances,
    pub heads: Vec<HeadExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub layer: usize,
    pub grid: FeatureGrid,
    pub queries: Vec<QueryExport>,
}

fn argmax_cell(values: &[f64], grid: FeatureGrid) -> [usize; 2] {
    let i = values.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
    [i % grid.cols, i / grid.cols]
}

fn check_request(model: &Model, queries: &[usize], layer: usize) -> Result<(), HarnessError> {
    let (n, l) = (model.config.num_queries, model.config.dec_layers);
    if layer >= l {
        return Err(HarnessError::InvalidRequest(format!(
            "layer {layer} out of range; valid layers are 0..={}",
            l - 1
        )));
    }
    if queries.is_empty() {
        return Err(HarnessError::InvalidRequest(format!("no query ids given; valid ids are 0..={}", n - 1)));
    }
    if let Some(q) = queries.iter().find(|&&q| q >= n) {
        return Err(HarnessError::InvalidRequest(format!("query id {q} out of range; valid ids are 0..={}", n - 1)));
    }
    Ok(())
}

/// Writes, for every requested query and head of decoder `layer` (0-based),
/// the post-softmax cross-attention field and the SDG Gaussian component as
/// PGM and CSV, plus `attention.json` summarizing them. Also writes the
/// scene image, `trajectories.csv` and `assignments.csv`.
pub fn export_attention(
    model: &Model,
    scene: &SyntheticScene,
    queries: &[usize],
    layer: usize,
    dir: &Path,
) -> Result<AttentionExport, HarnessError> {
    check_request(model, queries, layer)?;
    fs::create_dir_all(dir)?;
    let graph = Graph::new();
    let out = model.forward(&graph, &scene.image)?;
    let trace = &out.layers[layer];
    let grid = out.encoder.grid;
    let points = trace.points_in.value();
    let sides = trace.sides_in.value();
    let weights: Vec<_> = trace.cross_weights.iter().map(|w| w.value()).collect();

    let mut summary = AttentionExport { layer, grid, queries: Vec::with_capacity(queries.len()) };
    for &q in queries {
        let r = Point2::new(points.at(q, 0), points.at(q, 1));
        let s = SideDistances::from_array([sides.at(q, 0), sides.at(q, 1), sides.at(q, 2), sides.at(q, 3)]);
        let sdg = match &trace.sdg {
            Some(o) => {
                let params = SdgHead::params_row(o, q);
                Some((
                    sdg_field(&params, r, s, grid).map_err(crate::model::ModelError::from)?,
                    params.head_points(r, s),
                ))
            }
            None => None,
        };
        let mut heads = Vec::with_capacity(weights.len());
        for (h, w) in weights.iter().enumerate() {
            let field = w.row(q);
            let stem = format!("q{q:03}_head{h}");
            write_field_pgm(field, grid.cols, grid.rows, &dir.join(format!("{stem}.pgm")))?;
            write_field_csv(field, grid.cols, &dir.join(format!("{stem}.csv")))?;
            let mut export = HeadExport {
                head: h,
                attention_file: format!("{stem}.pgm"),
                attention_sum: field.iter().sum(),
                attention_argmax: argmax_cell(field, grid),
                sdg_file: None,
                sdg_head_point: None,
                sdg_argmax: None,
            };
            if let Some((f, points)) = &sdg {
                let map = f.head(h);
                let name = format!("{stem}_sdg");
                write_field_pgm(map, grid.cols, grid.rows, &dir.join(format!("{name}.pgm")))?;
                write_field_csv(map, grid.cols, &dir.join(format!("{name}.csv")))?;
                export.sdg_file = Some(format!("{name}.pgm"));
                export.sdg_head_point = Some(points[h]);
                export.sdg_argmax = Some(argmax_cell(map, grid));
            }
            heads.push(export);
        }
        summary.queries.push(QueryExport { query: q, reference: r, sides: s, heads });
    }
    fs::write(dir.join("attention.json"), serde_json::to_string_pretty(&summary)?)?;
    write_image(&scene.image, &dir.join(if scene.image.channels == 1 { "scene.pgm" } else { "scene.ppm" }))?;

    let layers: Vec<_> = out.layers.iter().map(trace_predictions).collect();
    let mut traj = BufWriter::new(File::create(dir.join("trajectories.csv"))?);
    writeln!(traj, "query,layer,ref_x,ref_y,left,top,right,bottom,x0,y0,x1,y1")?;
    for q in 0..model.config.num_queries {
        for (l, preds) in layers.iter().enumerate() {
            let p = &preds[q];
            let s = p.sides.to_array();
            let b = p.bbox.to_array();
            writeln!(
                traj,
                "{q},{l},{},{},{},{},{},{},{},{},{},{}",
                p.reference.x, p.reference.y, s[0], s[1], s[2], s[3], b[0], b[1], b[2], b[3]
            )?;
        }
    }
    traj.flush()?;

    let cost = CostWeights::default();
    let mut assign = BufWriter::new(File::create(dir.join("assignments.csv"))?);
    writeln!(assign, "layer,query,object,class,cost,iou,reference_inside")?;
    for (l, preds) in layers.iter().enumerate() {
        let a = hungarian(&CostMatrix::build(preds, &scene.annotations, &cost)?)?;
        for &(q, g) in &a.pairs {
            let gt = &scene.annotations[g];
            writeln!(
                assign,
                "{l},{q},{g},{},{},{},{}",
                gt.class,
                match_cost(&preds[q], gt, &cost),
                iou(&preds[q].bbox, &gt.bbox),
                contains(&gt.bbox, preds[q].reference)
            )?;
        }
    }
    assign.flush()?;
    Ok(summary)
}

/// Output directory layout used by the CLI.
pub fn attention_dir(root: &Path, scene_seed: u64, layer: usize) -> PathBuf {
    root.join(format!("attn_scene{scene_seed}_layer{layer}"))
}
