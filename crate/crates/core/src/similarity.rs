//! Per-frame motion similarity curves.
//!
//! For every source frame the raw similarity is the negated distance to the
//! closest target frame inside a sliding window, computed once on joint
//! rotations and once on joint positions. The two raw curves are blended,
//! min-max normalized, and quantized into `K` classes that serve as
//! auxiliary labels. MotionSNR summarizes how localized an edit is and is
//! used to drop noisy pairs from the training set.

use std::collections::HashMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Block, DatasetManifest, EditTriplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
    Manhattan,
}

impl Metric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let pairs = a.iter().zip(b);
        match self {
            Metric::Euclidean => pairs.map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::SquaredEuclidean => pairs.map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Manhattan => pairs.map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Sliding window half-width in frames.
    pub window: usize,
    /// Weight of the rotation-space curve.
    pub w_rotation: f64,
    /// Weight of the location-space curve.
    pub w_location: f64,
    /// Number of quantization classes.
    pub classes: usize,
    /// Size of the top and bottom sets used by MotionSNR.
    pub kappa: usize,
    pub snr_threshold: f64,
    pub metric: Metric,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            window: 2,
            w_rotation: 0.5,
            w_location: 0.5,
            classes: 3,
            kappa: 5,
            snr_threshold: 2.0,
            metric: Metric::Euclidean,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_rotation >= 0.0 && self.w_location >= 0.0 && self.w_rotation + self.w_location > 0.0) {
            return Err(Error::Config(format!(
                "weights must be nonnegative with positive sum, got ({}, {})",
                self.w_rotation, self.w_location
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if !(self.snr_threshold >= 0.0) {
            return Err(Error::Config(format!("invalid snr threshold {}", self.snr_threshold)));
        }
        Ok(())
    }
}

/// Every stage of the similarity pipeline for one triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub raw_rotation: Vec<f64>,
    pub raw_location: Vec<f64>,
    pub combined: Vec<f64>,
    pub normalized: Vec<f64>,
    pub labels: Vec<usize>,
    #[serde(with = "snr_field")]
    pub snr: f64,
}

mod snr_field {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad snr {t:?}"))),
        }
    }
}

impl SimilarityCurve {
    pub fn len(&self) -> usize {
        self.combined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combined.is_empty()
    }
}

/// Negated minimum distance from each source frame to the target frames
/// within `window`, with window bounds clamped into `[0, F'-1]`.
pub fn raw_similarity(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    window: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    if source.ncols() != target.ncols() {
        return Err(Error::Input(format!(
            "views differ in width: {} vs {}",
            source.ncols(),
            target.ncols()
        )));
    }
    let tgt_len = target.nrows();
    if tgt_len == 0 {
        return Err(Error::Input("target view has no frames; window is empty".into()));
    }
    let last = tgt_len - 1;
    let tgt_rows: Vec<Vec<f64>> = target.rows().into_iter().map(|r| r.to_vec()).collect();
    let out = source
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row.to_vec();
            let lo = i.saturating_sub(window).min(last);
            let hi = i.saturating_add(window).min(last);
            let best = tgt_rows[lo..=hi]
                .iter()
                .map(|t| metric.distance(&row, t))
                .fold(f64::INFINITY, f64::min);
            -best
        })
        .collect();
    Ok(out)
}

/// Weighted blend `w_rot * rot + w_loc * loc`.
pub fn combine(raw_rotation: &[f64], raw_location: &[f64], w_rotation: f64, w_location: f64) -> Result<Vec<f64>> {
    if raw_rotation.len() != raw_location.len() {
        return Err(Error::Input(format!(
            "curve lengths differ: {} vs {}",
            raw_rotation.len(),
            raw_location.len()
        )));
    }
    if !(w_rotation >= 0.0 && w_location >= 0.0) || w_rotation + w_location <= 0.0 {
        return Err(Error::Input(format!(
            "weights must be nonnegative with positive sum, got ({w_rotation}, {w_location})"
        )));
    }
    Ok(raw_rotation
        .iter()
        .zip(raw_location)
        .map(|(r, l)| w_rotation * r + w_location * l)
        .collect())
}

/// Min-max normalization into `[0, 1]`. A constant curve maps to all ones.
pub fn min_max_normalize(combined: &[f64]) -> Result<Vec<f64>> {
    if combined.is_empty() {
        return Err(Error::Input("cannot normalize an empty curve".into()));
    }
    if combined.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("curve contains non-finite values".into()));
    }
    let min = combined.iter().copied().fold(f64::INFINITY, f64::min);
    let max = combined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Ok(vec![1.0; combined.len()]);
    }
    let span = max - min;
    Ok(combined.iter().map(|v| ((v - min) / span).clamp(0.0, 1.0)).collect())
}

/// Effective kappa: reduced to `floor(F/2)` when the top and bottom sets
/// would overlap.
pub fn effective_kappa(kappa: usize, len: usize) -> usize {
    if 2 * kappa > len {
        let reduced = len / 2;
        log::warn!("kappa {kappa} too large for {len} frames; using {reduced}");
        reduced
    } else {
        kappa
    }
}

/// Ratio of the summed `kappa` largest dissimilarities to the summed `kappa`
/// smallest, with dissimilarity `d_i = -combined_i`.
///
/// Returns `+inf` when only the denominator vanishes and `1` when both do.
/// Ties are ordered by value, then frame index.
pub fn motion_snr(combined: &[f64], kappa: usize) -> f64 {
    let kappa = effective_kappa(kappa, combined.len());
    let mut order: Vec<(f64, usize)> = combined.iter().enumerate().map(|(i, &s)| (-s, i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let bottom: f64 = order[..kappa].iter().map(|p| p.0).sum();
    let top: f64 = order[order.len() - kappa..].iter().map(|p| p.0).sum();
    if bottom == 0.0 {
        if top > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    } else {
        top / bottom
    }
}

/// Maps normalized similarity into `K` equal-width classes. Bins are
/// lower-closed; the top bin also contains 1.
pub fn quantize(normalized: &[f64], classes: usize) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {classes}")));
    }
    let thresholds: Vec<f64> = (0..classes - 1).map(|k| (k + 1) as f64 / classes as f64).collect();
    normalized
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("value {v} outside [0, 1]")));
            }
            Ok(thresholds.iter().take_while(|&&tau| v >= tau).count())
        })
        .collect()
}

/// Runs the full pipeline on one triplet.
pub fn build_curve(triplet: &EditTriplet, config: &SimilarityConfig) -> Result<SimilarityCurve> {
    config.validate()?;
    let src_rot = triplet.source.slice_block(Block::Rotation)?;
    let tgt_rot = triplet.target.slice_block(Block::Rotation)?;
    let src_loc = triplet.source.slice_block(Block::Position)?;
    let tgt_loc = triplet.target.slice_block(Block::Position)?;
    let raw_rotation = raw_similarity(src_rot, tgt_rot, config.window, config.metric)?;
    let raw_location = raw_similarity(src_loc, tgt_loc, config.window, config.metric)?;
    let combined = combine(&raw_rotation, &raw_location, config.w_rotation, config.w_location)?;
    let normalized = min_max_normalize(&combined)?;
    let snr = motion_snr(&combined, config.kappa);
    let labels = quantize(&normalized, config.classes)?;
    Ok(SimilarityCurve {
        raw_rotation,
        raw_location,
        combined,
        normalized,
        labels,
        snr,
    })
}

/// Anything that can report a MotionSNR value.
pub trait HasSnr {
    fn snr(&self) -> f64;
}

impl HasSnr for SimilarityCurve {
    fn snr(&self) -> f64 {
        self.snr
    }
}

impl HasSnr for f64 {
    fn snr(&self) -> f64 {
        *self
    }
}

/// Marks entries with MotionSNR below `threshold` as excluded.
pub fn filter_dataset<C: HasSnr>(
    manifest: &DatasetManifest,
    curves: &HashMap<String, C>,
    threshold: f64,
) -> Result<DatasetManifest> {
    if !(threshold >= 0.0) {
        return Err(Error::Input(format!("invalid threshold {threshold}")));
    }
    let mut out = manifest.clone();
    out.header.snr_threshold = threshold;
    for entry in &mut out.entries {
        let curve = curves
            .get(&entry.id)
            .ok_or_else(|| Error::Consistency(format!("no similarity curve for {}", entry.id)))?;
        let snr = curve.snr();
        entry.snr = Some(snr);
        entry.included = snr >= threshold;
    }
    Ok(out)
}
