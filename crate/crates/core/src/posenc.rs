//! Sinusoidal positional encodings with an adjustable temperature.
//!
//! A scalar position `p` is scaled to `p' = 2πp` and encoded into `dim`
//! channels: channel `2(t-1)` holds `sin(p'·ω_t)` and channel `2(t-1)+1` holds
//! `cos(p'·ω_t)` with `ω_t = T^(-2t/dim)` for `t = 1..=dim/2`.
//!
//! When the query and key encodings use different temperatures, the peak of
//! each channel's similarity term moves from `pos_q` to
//! `(T_k/T_q)^(2t/dim)·pos_q`; [`predicted_center`] gives that location and
//! [`scan_channel_peak`] measures it directly.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::geometry::Point2;
use crate::numerics::{concat, NumericsError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PosEncError {
    #[error("encoding dimension must be even and positive, got {0}")]
    OddDimension(usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("query and key encodings disagree on dimension ({query} vs {key})")]
    DimensionMismatch { query: usize, key: usize },
    #[error("channel index {t} outside 1..={max}")]
    ChannelOutOfRange { t: usize, max: usize },
    #[error("field resolution must be at least 2, got {0}")]
    Resolution(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    dim: usize,
    temperature: f64,
}

impl PeConfig {
    pub fn new(dim: usize, temperature: f64) -> Result<Self, PosEncError> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(PosEncError::OddDimension(dim));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PosEncError::BadTemperature(temperature));
        }
        Ok(Self { dim, temperature })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `ω_t = T^(-2t/dim)` for the 1-based channel pair `t`.
    pub fn frequency(&self, t: usize) -> f64 {
        self.temperature.powf(-2.0 * t as f64 / self.dim as f64)
    }

    fn check_channel(&self, t: usize) -> Result<(), PosEncError> {
        if t == 0 || t > self.dim / 2 {
            Err(PosEncError::ChannelOutOfRange { t, max: self.dim / 2 })
        } else {
            Ok(())
        }
    }
}

/// Encoded channels of one or more concatenated scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct PeVector {
    pub channels: Vec<f64>,
}

impl PeVector {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn dot(&self, other: &PeVector) -> f64 {
        self.channels.iter().zip(&other.channels).map(|(a, b)| a * b).sum()
    }
}

fn push_scalar(out: &mut Vec<f64>, pos: f64, cfg: &PeConfig) {
    let scaled = TAU * pos;
    for t in 1..=cfg.dim / 2 {
        let angle = scaled * cfg.frequency(t);
        out.push(angle.sin());
        out.push(angle.cos());
    }
}

pub fn encode_scalar(pos: f64, cfg: &PeConfig) -> PeVector {
    let mut channels = Vec::with_capacity(cfg.dim);
    push_scalar(&mut channels, pos, cfg);
    PeVector { channels }
}

/// `encode_scalar(p.x) ++ encode_scalar(p.y)`.
pub fn encode_point(p: Point2, cfg: &PeConfig) -> PeVector {
    let mut channels = Vec::with_capacity(2 * cfg.dim);
    push_scalar(&mut channels, p.x, cfg);
    push_scalar(&mut channels, p.y, cfg);
    PeVector { channels }
}

/// Single-channel similarity term `cos(ω_t^q·pos_q' - ω_t^k·pos_k')`.
pub fn channel_similarity(pos_q: f64, pos_k: f64, t: usize, cfg_q: &PeConfig, cfg_k: &PeConfig) -> f64 {
    (TAU * (cfg_q.frequency(t) * pos_q - cfg_k.frequency(t) * pos_k)).cos()
}

/// Dot product of the query and key encodings, summed channel pair by channel pair.
pub fn pe_similarity(pos_q: f64, pos_k: f64, cfg_q: &PeConfig, cfg_k: &PeConfig) -> Result<f64, PosEncError> {
    if cfg_q.dim != cfg_k.dim {
        return Err(PosEncError::DimensionMismatch { query: cfg_q.dim, key: cfg_k.dim });
    }
    Ok((1..=cfg_q.dim / 2).map(|t| channel_similarity(pos_q, pos_k, t, cfg_q, cfg_k)).sum())
}

/// Closed-form peak of channel `t`: `(T_k/T_q)^(2t/dim)·pos_q`.
pub fn predicted_center(pos_q: f64, t: usize, cfg_q: &PeConfig, cfg_k: &PeConfig) -> Result<f64, PosEncError> {
    if cfg_q.dim != cfg_k.dim {
        return Err(PosEncError::DimensionMismatch { query: cfg_q.dim, key: cfg_k.dim });
    }
    cfg_q.check_channel(t)?;
    let ratio = cfg_k.temperature / cfg_q.temperature;
    Ok(ratio.powf(2.0 * t as f64 / cfg_q.dim as f64) * pos_q)
}

/// Peak of the summed similarity under a second-order expansion of every
/// channel: the per-channel centers averaged with weights `ω_t^k²`.
pub fn superposed_center(pos_q: f64, cfg_q: &PeConfig, cfg_k: &PeConfig) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for t in 1..=cfg_q.dim.min(cfg_k.dim) / 2 {
        let (wq, wk) = (cfg_q.frequency(t), cfg_k.frequency(t));
        num += wq * wk * pos_q;
        den += wk * wk;
    }
    num / den
}

/// Grid scan for the peak of channel `t` over `[lo, hi]` with spacing `step`,
/// restricted to the principal lobe (phase difference inside `(-π, π)`).
///
/// Returns `None` when no scanned position falls in the principal lobe.
pub fn scan_channel_peak(
    pos_q: f64,
    t: usize,
    cfg_q: &PeConfig,
    cfg_k: &PeConfig,
    lo: f64,
    hi: f64,
    step: f64,
) -> Option<f64> {
    let steps = ((hi - lo) / step).round() as usize;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=steps {
        let pos_k = lo + i as f64 * step;
        let phase = TAU * (cfg_q.frequency(t) * pos_q - cfg_k.frequency(t) * pos_k);
        if phase.abs() >= PI {
            continue;
        }
        let v = phase.cos();
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((pos_k, v));
        }
    }
    best.map(|(p, _)| p)
}

/// `resolution × resolution` map of query-to-key positional similarity,
/// row-major with rows along y.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityField {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl SimilarityField {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    /// Normalized coordinate of cell `i`'s center.
    pub fn cell_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.resolution as f64
    }

    /// (col, row) of the largest value; the first one wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.resolution, best / self.resolution)
    }
}

pub fn similarity_field(
    pos_q: Point2,
    cfg_q: &PeConfig,
    cfg_k: &PeConfig,
    resolution: usize,
) -> Result<SimilarityField, PosEncError> {
    if resolution < 2 {
        return Err(PosEncError::Resolution(resolution));
    }
    if cfg_q.dim != cfg_k.dim {
        return Err(PosEncError::DimensionMismatch { query: cfg_q.dim, key: cfg_k.dim });
    }
    let q = encode_point(pos_q, cfg_q);
    let keys: Vec<PeVector> =
        (0..resolution).map(|i| encode_scalar((i as f64 + 0.5) / resolution as f64, cfg_k)).collect();
    let (qx, qy) = q.channels.split_at(cfg_q.dim);
    let dot = |a: &[f64], b: &PeVector| -> f64 { a.iter().zip(&b.channels).map(|(x, y)| x * y).sum() };
    let col_terms: Vec<f64> = keys.iter().map(|k| dot(qx, k)).collect();
    let row_terms: Vec<f64> = keys.iter().map(|k| dot(qy, k)).collect();
    let mut values = Vec::with_capacity(resolution * resolution);
    for row in &row_terms {
        for col in &col_terms {
            values.push(col + row);
        }
    }
    Ok(SimilarityField { resolution, values })
}

/// Encodes every column of `coords` (`n × k`) and concatenates the results
/// column by column into an `n × (k·dim)` tensor, differentiably.
pub fn encode_columns<'g>(coords: Var<'g>, cfg: &PeConfig) -> Result<Var<'g>, NumericsError> {
    let graph = coords.graph();
    let shape = coords.shape();
    if shape.len() != 2 {
        return Err(NumericsError::Shape {
            op: "encode_columns",
            detail: format!("expected an n x k matrix, got {shape:?}"),
        });
    }
    let mut freq = Vec::with_capacity(cfg.dim);
    let mut phase = Vec::with_capacity(cfg.dim);
    for t in 1..=cfg.dim / 2 {
        let w = TAU * cfg.frequency(t);
        freq.extend([w, w]);
        // sin(x + π/2) = cos(x)
        phase.extend([0.0, FRAC_PI_2]);
    }
    let freq = graph.constant(Tensor::new(&[1, cfg.dim], freq)?);
    let phase = graph.constant(Tensor::new(&[1, cfg.dim], phase)?);
    let mut parts = Vec::with_capacity(shape[1]);
    for c in 0..shape[1] {
        let col = coords.slice(1, c, c + 1)?;
        parts.push(col.mul(freq)?.add(phase)?.sin());
    }
    concat(&parts, 1)
}
