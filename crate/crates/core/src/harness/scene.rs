//! Synthetic detection scenes: filled rectangles over textured noise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{iou, BoxXYXY};
use crate::matching::GroundTruth;
use crate::model::Image;

pub const MAX_OBJECTS: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 64;
const MAX_PLACEMENT_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    Normal,
    Slender,
}

impl std::str::FromStr for SceneMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "slender" => Ok(Self::Slender),
            other => Err(HarnessError::Config(format!("unknown scene mode `{other}` (expected normal or slender)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub mode: SceneMode,
    /// Query-grid columns; slender boxes keep their short side within one cell.
    pub grid_cols: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            num_classes: 2,
            min_objects: 1,
            max_objects: 3,
            mode: SceneMode::Normal,
            grid_cols: 8,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.image_size < 16 {
            return fail(format!("image_size {} is below 16", self.image_size));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return fail(format!(
                "object range {}..={} must lie within 1..={MAX_OBJECTS}",
                self.min_objects, self.max_objects
            ));
        }
        if self.grid_cols == 0 || self.cell_pixels() < 3 {
            return fail(format!("grid_cols {} leaves cells narrower than 3 px", self.grid_cols));
        }
        Ok(())
    }

    /// Width of one query-grid cell in pixels.
    pub fn cell_pixels(&self) -> usize {
        self.image_size / self.grid_cols.max(1)
    }

    /// Fill intensity of class `c` in channel `ch`.
    pub fn class_intensity(&self, class: usize, ch: usize) -> f64 {
        let base = 0.45 + 0.45 * class as f64 / (self.num_classes - 1) as f64;
        if self.channels == 1 {
            base
        } else {
            // Rotate the dominant channel with the class.
            if (class + ch).is_multiple_of(3) {
                base
            } else {
                0.35
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub annotations: Vec<GroundTruth>,
    pub seed: u64,
}

/// Pixel-aligned rectangle `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn normalized(&self, size: usize) -> BoxXYXY {
        let s = size as f64;
        BoxXYXY::new(self.x as f64 / s, self.y as f64 / s, (self.x + self.w) as f64 / s, (self.y + self.h) as f64 / s)
    }
}

fn sample_rect(params: &SceneParams, rng: &mut ChaCha8Rng) -> Rect {
    let size = params.image_size;
    let (w, h) = match params.mode {
        SceneMode::Normal => {
            let lo = (size / 10).max(4);
            let hi = size / 2;
            (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
        }
        SceneMode::Slender => {
            let short = rng.random_range(3..=params.cell_pixels().clamp(3, 8));
            let long = rng.random_range((6 * short).min(size - 2)..=size - 2);
            if rng.random_bool(0.5) {
                (long, short)
            } else {
                (short, long)
            }
        }
    };
    Rect { x: rng.random_range(0..=size - w), y: rng.random_range(0..=size - h), w, h }
}

/// Deterministic scene for `seed`. Later objects are painted over earlier
/// ones; placements overlapping an earlier box by more than 0.3 IoU are
/// redrawn.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SyntheticScene, HarnessError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.image_size;
    let c = params.channels;

    let (fx, fy) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut pixels = Vec::with_capacity(size * size * c);
    for y in 0..size {
        for x in 0..size {
            let wave = 0.05 * (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            for _ in 0..c {
                pixels.push(0.15 + wave + 0.1 * rng.random::<f64>());
            }
        }
    }

    let count = rng.random_range(params.min_objects..=params.max_objects);
    let mut rects: Vec<Rect> = Vec::with_capacity(count);
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rect = sample_rect(params, &mut rng);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = rect.normalized(size);
            if rects.iter().all(|r| iou(&r.normalized(size), &b) <= MAX_PLACEMENT_IOU) {
                break;
            }
            rect = sample_rect(params, &mut rng);
        }
        let class = rng.random_range(0..params.num_classes);
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                for ch in 0..c {
                    let jitter = 0.03 * (rng.random::<f64>() - 0.5);
                    pixels[(y * size + x) * c + ch] = params.class_intensity(class, ch) + jitter;
                }
            }
        }
        rects.push(rect);
        annotations.push(GroundTruth { bbox: rect.normalized(size), class });
    }
    Ok(SyntheticScene { image: Image::new(size, c, pixels).map_err(HarnessError::Model)?, annotations, seed })
}

/// Binary PGM (one channel) or PPM (three channels), values clamped to `[0, 1]`.
pub fn write_image(image: &Image, path: &Path) -> Result<(), HarnessError> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        n => return Err(HarnessError::Config(format!("cannot write a {n}-channel image"))),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n255\n", image.size, image.size)?;
    let bytes: Vec<u8> = image.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Grayscale PGM of a `cols × rows` field, scaled so the maximum maps to 255.
pub fn write_field_pgm(values: &[f64], cols: usize, rows: usize, path: &Path) -> Result<(), HarnessError> {
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.max(0.0) * scale).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Row-major CSV of a `cols × rows` field.
pub fn write_field_csv(values: &[f64], cols: usize, path: &Path) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub bbox: [f64; 4],
    pub class: usize,
}

/// One line of a dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub image: String,
    pub annotations: Vec<AnnotationRecord>,
}

/// Writes `count` scenes (seeds `first_seed..`) as images plus a JSON-lines
/// index `scenes.jsonl` in `dir`.
pub fn write_dataset(
    params: &SceneParams,
    first_seed: u64,
    count: usize,
    dir: &Path,
) -> Result<Vec<SceneRecord>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let ext = if params.channels == 1 { "pgm" } else { "ppm" };
    let mut index = BufWriter::new(File::create(dir.join("scenes.jsonl"))?);
    let mut records = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let seed = first_seed + i;
        let scene = generate_scene(params, seed)?;
        let name = format!("scene_{seed:08}.{ext}");
        write_image(&scene.image, &dir.join(&name))?;
        let record = SceneRecord {
            seed,
            image: name,
            annotations: scene
                .annotations
                .iter()
                .map(|a| AnnotationRecord { bbox: a.bbox.to_array(), class: a.class })
                .collect(),
        };
        writeln!(index, "{}", serde_json::to_string(&record)?)?;
        records.push(record);
    }
    index.flush()?;
    Ok(records)
}
