//! Test-time stain normalization (TTSN) and morphological test-time
//! augmentation.
//!
//! The test image is normalized against every reference profile, each stain
//! variant is optionally rotated and flipped, and the predictor's outputs are
//! mapped back to the original frame and merged with a weighted mean. The
//! original image carries weight 50 and each normalized variant 7.14, mirroring
//! the passthrough and per-reference probabilities used during training.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{Predictor, PredictorError};
use crate::raster::{FloatMap, Orientation, RgbImage};
use crate::stain::{normalize_to_reference, NormalizationParams, ReferenceProfile, StainError};

pub const WEIGHT_ORIGINAL: f64 = 50.0;
pub const WEIGHT_PER_REFERENCE: f64 = 7.14;

/// Side length test tiles are padded to unless they are larger.
pub const DEFAULT_PAD: usize = 1024;
const PAD_STEP: usize = 32;

#[derive(Debug, Error)]
pub enum TtaError {
    #[error("cannot pad {width}x{height} into {target_width}x{target_height}")]
    TargetTooSmall { width: usize, height: usize, target_width: usize, target_height: usize },
    #[error("no prediction maps to ensemble")]
    EmptyInput,
    #[error("map for variant {variant} has shape {got:?}, expected {expected:?}")]
    DimensionMismatch { variant: String, expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("variant {0} appears more than once")]
    DuplicateVariant(String),
    #[error("variant {0} is not part of the ensemble spec")]
    UnknownVariant(String),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("prediction failed for variant {variant}: {source}")]
    Predictor { variant: String, source: PredictorError },
    #[error("predictor output has {channels} channel(s); channel {wanted} requested")]
    MissingChannel { channels: usize, wanted: usize },
}

/// Original dimensions of a padded tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub width: usize,
    pub height: usize,
}

/// Place `img` at the top-left of a white `target_w`x`target_h` canvas.
pub fn pad_white(img: &RgbImage, target_w: usize, target_h: usize) -> Result<(RgbImage, CropRecord), TtaError> {
    let (w, h) = (img.width(), img.height());
    if target_w < w || target_h < h {
        return Err(TtaError::TargetTooSmall { width: w, height: h, target_width: target_w, target_height: target_h });
    }
    let mut data = vec![255u8; target_w * target_h * 3];
    for y in 0..h {
        let src = &img.data()[y * w * 3..(y + 1) * w * 3];
        data[y * target_w * 3..y * target_w * 3 + w * 3].copy_from_slice(src);
    }
    let padded = RgbImage::new(target_w, target_h, data).expect("padded dimensions are valid");
    Ok((padded, CropRecord { width: w, height: h }))
}

fn crop_rows<T: Copy>(data: &[T], stride: usize, record: CropRecord, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(record.width * record.height * channels);
    for y in 0..record.height {
        let start = y * stride * channels;
        out.extend_from_slice(&data[start..start + record.width * channels]);
    }
    out
}

pub fn crop_rgb(img: &RgbImage, record: CropRecord) -> RgbImage {
    RgbImage::new(record.width, record.height, crop_rows(img.data(), img.width(), record, 3))
        .expect("crop lies inside the padded image")
}

pub fn crop_map(map: &FloatMap, record: CropRecord) -> FloatMap {
    let data = crop_rows(map.data(), map.width(), record, map.channels());
    FloatMap::new(record.width, record.height, map.channels(), data).expect("crop lies inside the map")
}

/// How test tiles are padded before prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadPolicy {
    None,
    /// Square canvas of this side length.
    Fixed(usize),
    /// 1024, or the smallest multiple of 32 that holds the tile.
    #[default]
    Auto,
}

impl PadPolicy {
    /// Square side length for a `w`x`h` tile, if padding applies.
    pub fn side(self, w: usize, h: usize) -> Option<usize> {
        match self {
            PadPolicy::None => None,
            PadPolicy::Fixed(s) => Some(s),
            PadPolicy::Auto => {
                let need = w.max(h).div_ceil(PAD_STEP) * PAD_STEP;
                Some(need.max(DEFAULT_PAD))
            }
        }
    }
}

impl fmt::Display for PadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PadPolicy::None => f.write_str("none"),
            PadPolicy::Fixed(s) => write!(f, "{s}"),
            PadPolicy::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for PadPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PadPolicy::None),
            "auto" => Ok(PadPolicy::Auto),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .map(PadPolicy::Fixed)
                .ok_or_else(|| format!("pad must be none, auto or a positive size, got {s:?}")),
        }
    }
}

impl Serialize for PadPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PadPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(PadPolicy::Fixed(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphTta {
    pub rot90: bool,
    pub hflip: bool,
}

impl MorphTta {
    pub fn orientations(self) -> Vec<Orientation> {
        let mut out = vec![Orientation::Identity];
        if self.rot90 {
            out.push(Orientation::Rot90);
        }
        if self.hflip {
            out.push(Orientation::HFlip);
        }
        if self.rot90 && self.hflip {
            out.push(Orientation::Rot90HFlip);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub references: Vec<ReferenceProfile>,
    pub weight_original: f64,
    pub weight_per_reference: f64,
    pub morphological_tta: MorphTta,
}

impl EnsembleSpec {
    /// TTSN with the default 50 / 7.14 weights.
    pub fn new(references: Vec<ReferenceProfile>) -> Self {
        Self {
            references,
            weight_original: WEIGHT_ORIGINAL,
            weight_per_reference: WEIGHT_PER_REFERENCE,
            morphological_tta: MorphTta::default(),
        }
    }

    /// Original image only: a single predictor call.
    pub fn baseline() -> Self {
        Self::new(Vec::new())
    }

    pub fn with_morphological_tta(mut self, morph: MorphTta) -> Self {
        self.morphological_tta = morph;
        self
    }

    pub fn validate(&self) -> Result<(), TtaError> {
        if !(self.weight_original > 0.0 && self.weight_original.is_finite())
            || !(self.weight_per_reference > 0.0 && self.weight_per_reference.is_finite())
        {
            return Err(TtaError::InvalidSpec("weights must be positive and finite".into()));
        }
        Ok(())
    }

    /// All variant ids in ensemble order.
    pub fn variant_ids(&self) -> Vec<VariantId> {
        let orientations = self.morphological_tta.orientations();
        (0..=self.references.len())
            .flat_map(|stain| orientations.iter().map(move |&orientation| VariantId { stain, orientation }))
            .collect()
    }

    /// Unnormalized weight of one variant. Orientations of one stain variant
    /// share its weight equally.
    pub fn weight(&self, id: VariantId) -> f64 {
        let share = self.morphological_tta.orientations().len() as f64;
        let stain = if id.stain == 0 { self.weight_original } else { self.weight_per_reference };
        stain / share
    }

    /// Weights of every variant divided by their total.
    pub fn normalized_weights(&self) -> Vec<(VariantId, f64)> {
        let ids = self.variant_ids();
        let total: f64 = ids.iter().map(|&id| self.weight(id)).sum();
        ids.into_iter().map(|id| (id, self.weight(id) / total)).collect()
    }
}

/// Stain variant (0 = original, `k` = normalized to reference `k - 1`) and
/// orientation. Ordered by stain first, then orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariantId {
    pub stain: usize,
    pub orientation: Orientation,
}

impl VariantId {
    pub const ORIGINAL: VariantId = VariantId { stain: 0, orientation: Orientation::Identity };
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}{}", self.stain, self.orientation.suffix())
    }
}

impl FromStr for VariantId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.strip_prefix('v').ok_or_else(|| format!("bad variant id {s:?}"))?;
        let split = body.find('-').unwrap_or(body.len());
        let stain = body[..split].parse().map_err(|_| format!("bad variant id {s:?}"))?;
        let orientation = Orientation::ALL
            .into_iter()
            .find(|o| o.suffix() == &body[split..])
            .ok_or_else(|| format!("bad variant id {s:?}"))?;
        Ok(VariantId { stain, orientation })
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub id: VariantId,
    /// Stain-normalized image, not yet reoriented.
    pub image: RgbImage,
}

#[derive(Debug, Default)]
pub struct VariantSet {
    pub variants: Vec<Variant>,
    /// Stain variants whose normalization failed.
    pub dropped: Vec<(usize, StainError)>,
}

/// Original plus one normalized image per reference, each expanded by the
/// configured orientations. Failed normalizations are dropped with a warning.
pub fn make_variants(img: &RgbImage, spec: &EnsembleSpec, params: &NormalizationParams) -> VariantSet {
    let stains: Vec<(usize, Result<RgbImage, StainError>)> = std::iter::once((0, Ok(img.clone())))
        .chain(
            spec.references
                .par_iter()
                .enumerate()
                .map(|(i, r)| (i + 1, normalize_to_reference(img, r, params)))
                .collect::<Vec<_>>(),
        )
        .collect();
    let orientations = spec.morphological_tta.orientations();
    let mut set = VariantSet::default();
    for (stain, result) in stains {
        match result {
            Ok(image) => {
                for &orientation in &orientations {
                    set.variants.push(Variant { id: VariantId { stain, orientation }, image: image.clone() });
                }
            }
            Err(e) => {
                warn!("normalization to reference {} failed: {e}; variant dropped", stain - 1);
                set.dropped.push((stain, e));
            }
        }
    }
    set
}

/// Weighted mean of the maps in f64, accumulated in ascending variant order.
/// Returns the output shape and values.
pub fn ensemble_values(
    maps: &[(VariantId, FloatMap)],
    spec: &EnsembleSpec,
) -> Result<((usize, usize, usize), Vec<f64>), TtaError> {
    spec.validate()?;
    let mut ordered: Vec<&(VariantId, FloatMap)> = maps.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let first = &ordered.first().ok_or(TtaError::EmptyInput)?.1;
    let shape = (first.width(), first.height(), first.channels());
    let allowed = spec.morphological_tta.orientations();
    for pair in ordered.windows(2) {
        if pair[0].0.cmp(&pair[1].0) == Ordering::Equal {
            return Err(TtaError::DuplicateVariant(pair[0].0.to_string()));
        }
    }
    let mut acc = vec![0.0f64; first.data().len()];
    let mut total = 0.0f64;
    for (id, map) in ordered {
        if id.stain > spec.references.len() || !allowed.contains(&id.orientation) {
            return Err(TtaError::UnknownVariant(id.to_string()));
        }
        let got = (map.width(), map.height(), map.channels());
        if got != shape {
            return Err(TtaError::DimensionMismatch { variant: id.to_string(), expected: shape, got });
        }
        let w = spec.weight(*id);
        total += w;
        for (a, &v) in acc.iter_mut().zip(map.data()) {
            *a += w * f64::from(v);
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok((shape, acc))
}

/// Weighted mean of prediction maps that are already in the original frame.
pub fn ensemble(maps: &[(VariantId, FloatMap)], spec: &EnsembleSpec) -> Result<FloatMap, TtaError> {
    let ((w, h, c), values) = ensemble_values(maps, spec)?;
    let data = values.into_iter().map(|v| v as f32).collect();
    Ok(FloatMap::new(w, h, c, data).expect("shape checked"))
}

/// Whether a failing prediction aborts the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    #[default]
    Fatal,
    DropAndRenormalize,
}

/// Which predictor output channels hold probability and distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub probability: usize,
    pub distance: usize,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self { probability: 0, distance: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct TtsnOutput {
    pub probability: FloatMap,
    pub distance: FloatMap,
    pub used: Vec<VariantId>,
    /// Variant ids dropped by normalization or prediction failures.
    pub dropped: Vec<String>,
}

/// Full inference for one tile: variants, padding, prediction, inverse
/// transforms, cropping and the weighted ensemble.
#[allow(clippy::too_many_arguments)]
pub fn run_ttsn(
    image_id: &str,
    img: &RgbImage,
    predictor: &dyn Predictor,
    layout: ChannelLayout,
    spec: &EnsembleSpec,
    params: &NormalizationParams,
    pad: PadPolicy,
    policy: DropPolicy,
) -> Result<TtsnOutput, TtaError> {
    spec.validate()?;
    let set = make_variants(img, spec, params);
    let mut dropped: Vec<String> = set.dropped.iter().map(|(s, _)| format!("v{s}")).collect();

    let predictions: Vec<(VariantId, Result<FloatMap, TtaError>)> = set
        .variants
        .par_iter()
        .map(|v| (v.id, predict_variant(image_id, v, predictor, pad)))
        .collect();

    let mut maps = Vec::with_capacity(predictions.len());
    for (id, result) in predictions {
        match result {
            Ok(map) => maps.push((id, map)),
            Err(e) if policy == DropPolicy::DropAndRenormalize => {
                warn!("{image_id}: dropping variant {id}: {e}");
                dropped.push(id.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    let merged = ensemble(&maps, spec)?;
    for wanted in [layout.probability, layout.distance] {
        if wanted >= merged.channels() {
            return Err(TtaError::MissingChannel { channels: merged.channels(), wanted });
        }
    }
    Ok(TtsnOutput {
        probability: merged.channel(layout.probability),
        distance: merged.channel(layout.distance),
        used: maps.iter().map(|(id, _)| *id).collect(),
        dropped,
    })
}

fn predict_variant(
    image_id: &str,
    variant: &Variant,
    predictor: &dyn Predictor,
    pad: PadPolicy,
) -> Result<FloatMap, TtaError> {
    let (w, h) = (variant.image.width(), variant.image.height());
    let (padded, record) = match pad.side(w, h) {
        Some(side) => pad_white(&variant.image, side, side)?,
        None => (variant.image.clone(), CropRecord { width: w, height: h }),
    };
    let input = padded.transformed(variant.id.orientation);
    let map = predictor
        .predict(image_id, &variant.id.to_string(), &input)
        .map_err(|source| TtaError::Predictor { variant: variant.id.to_string(), source })?;
    let restored = variant.id.orientation.inverse().apply_map(&map);
    Ok(crop_map(&restored, record))
}

/// On-disk ensemble description. Profile paths are relative to the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpecFile {
    pub references: Vec<std::path::PathBuf>,
    #[serde(default = "default_weight_original")]
    pub weight_original: f64,
    #[serde(default = "default_weight_per_reference")]
    pub weight_per_reference: f64,
    #[serde(default)]
    pub morphological_tta: MorphTta,
}

fn default_weight_original() -> f64 {
    WEIGHT_ORIGINAL
}

fn default_weight_per_reference() -> f64 {
    WEIGHT_PER_REFERENCE
}

impl EnsembleSpecFile {
    pub fn load(path: &std::path::Path) -> Result<EnsembleSpec, TtaError> {
        let bad = |m: String| TtaError::InvalidSpec(format!("{}: {m}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let file: EnsembleSpecFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let root = path.parent().unwrap_or(std::path::Path::new(""));
        let references = file
            .references
            .iter()
            .map(|p| {
                let full = root.join(p);
                let text = std::fs::read_to_string(&full).map_err(|e| bad(format!("{}: {e}", full.display())))?;
                ReferenceProfile::from_json(&text).map_err(|e| bad(format!("{}: {e}", full.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = EnsembleSpec {
            references,
            weight_original: file.weight_original,
            weight_per_reference: file.weight_per_reference,
            morphological_tta: file.morphological_tta,
        };
        spec.validate()?;
        Ok(spec)
    }
}
