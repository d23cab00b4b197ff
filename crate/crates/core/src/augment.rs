//! Seeded non-deterministic stain normalization for training.
//!
//! Every training item either passes through unchanged or is normalized to one
//! of `R` reference profiles chosen uniformly. Each (epoch, item) pair owns an
//! independent random stream, so the augmented epoch is identical no matter
//! how many workers load it or in which order.

use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_json, DataError};
use crate::raster::RgbImage;
use crate::stain::{normalize_to_reference, NormalizationParams, ReferenceProfile, StainError};

/// Identifier of the branch sampler, recorded in plan files.
pub const RNG_ALGORITHM: &str = "chacha8-stream-v1";

pub const DEFAULT_P_PASSTHROUGH: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation plan: {0}")]
    InvalidPlan(String),
    #[error("normalization of {id} failed: {source}")]
    Normalization { id: String, source: StainError },
    #[error("normalization failed for {} image(s): {}", .0.len(), describe(.0))]
    Failures(Vec<(String, StainError)>),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn describe(failures: &[(String, StainError)]) -> String {
    failures.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; ")
}

/// What to do when an image cannot be stain-normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Use the unmodified image and log a warning.
    #[default]
    Passthrough,
    Error,
}

#[derive(Clone, Debug)]
pub struct AugmentationPlan {
    pub references: Vec<ReferenceProfile>,
    pub p_passthrough: f64,
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn new(references: Vec<ReferenceProfile>, p_passthrough: f64, seed: u64) -> Result<Self, AugmentError> {
        if references.is_empty() {
            return Err(AugmentError::InvalidPlan("at least one reference is required".into()));
        }
        if !(0.0..=1.0).contains(&p_passthrough) {
            return Err(AugmentError::InvalidPlan(format!(
                "p_passthrough must lie in [0, 1], got {p_passthrough}"
            )));
        }
        Ok(Self { references, p_passthrough, seed })
    }

    /// Probability of passthrough followed by one entry per reference.
    pub fn branch_probabilities(&self) -> Vec<f64> {
        let r = self.references.len();
        let each = (1.0 - self.p_passthrough) / r as f64;
        std::iter::once(self.p_passthrough).chain(std::iter::repeat_n(each, r)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Passthrough,
    NormalizeTo(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationDraw {
    pub branch: Branch,
    pub rng_stream_id: u64,
}

/// Stream id of an (epoch, item) pair.
pub fn stream_id(epoch: u32, item: u32) -> u64 {
    (u64::from(epoch) << 32) | u64::from(item)
}

/// Independent generator for one (epoch, item) pair of a seeded run.
pub fn item_rng(seed: u64, epoch: u32, item: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(epoch, item));
    rng
}

/// One uniform draw decides the branch: `[0, p)` passes through, the rest of
/// the unit interval is split evenly among the references.
pub fn sample_branch<R: Rng + ?Sized>(plan: &AugmentationPlan, rng: &mut R) -> Branch {
    let u: f64 = rng.random();
    let p = plan.p_passthrough;
    if u < p {
        return Branch::Passthrough;
    }
    let r = plan.references.len();
    let idx = ((u - p) / (1.0 - p) * r as f64).floor() as usize;
    Branch::NormalizeTo(idx.min(r - 1))
}

pub fn draw_for_item(plan: &AugmentationPlan, epoch: u32, item: u32) -> AugmentationDraw {
    let mut rng = item_rng(plan.seed, epoch, item);
    AugmentationDraw { branch: sample_branch(plan, &mut rng), rng_stream_id: stream_id(epoch, item) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: RgbImage,
    pub draw: AugmentationDraw,
    /// True when normalization failed and the input was passed through.
    pub fell_back: bool,
}

pub fn apply_augmentation(
    img: &RgbImage,
    draw: AugmentationDraw,
    plan: &AugmentationPlan,
    params: &NormalizationParams,
    policy: FailurePolicy,
) -> Result<Augmented, StainError> {
    let idx = match draw.branch {
        Branch::Passthrough => return Ok(Augmented { image: img.clone(), draw, fell_back: false }),
        Branch::NormalizeTo(i) => i,
    };
    let reference = plan.references.get(idx).ok_or_else(|| {
        StainError::InvalidParams(format!("draw names reference {idx}, plan has {}", plan.references.len()))
    })?;
    match normalize_to_reference(img, reference, params) {
        Ok(image) => Ok(Augmented { image, draw, fell_back: false }),
        Err(e) if policy == FailurePolicy::Passthrough => {
            warn!("stream {}: normalization to {} failed ({e}); passing through", draw.rng_stream_id, reference.source_id);
            Ok(Augmented { image: img.clone(), draw, fell_back: true })
        }
        Err(e) => Err(e),
    }
}

/// Augment one epoch of named images in parallel. Output order follows input.
pub fn augment_epoch(
    items: &[(String, RgbImage)],
    plan: &AugmentationPlan,
    epoch: u32,
    params: &NormalizationParams,
    policy: FailurePolicy,
) -> Result<Vec<Augmented>, AugmentError> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let draw = draw_for_item(plan, epoch, i as u32);
            apply_augmentation(img, draw, plan, params, policy)
                .map_err(|source| AugmentError::Normalization { id: id.clone(), source })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OfflineMode {
    /// Every image normalized to the reference.
    Replace,
    /// Originals followed by their normalized copies.
    Extend,
}

/// Normalize a whole training set to a single reference. All failures are
/// collected and reported together.
pub fn materialize_offline(
    set: &[(String, RgbImage)],
    reference: &ReferenceProfile,
    mode: OfflineMode,
    params: &NormalizationParams,
) -> Result<Vec<RgbImage>, AugmentError> {
    let results: Vec<Result<RgbImage, (String, StainError)>> = set
        .par_iter()
        .map(|(id, img)| normalize_to_reference(img, reference, params).map_err(|e| (id.clone(), e)))
        .collect();
    let mut normalized = Vec::with_capacity(set.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(img) => normalized.push(img),
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(AugmentError::Failures(failures));
    }
    Ok(match mode {
        OfflineMode::Replace => normalized,
        OfflineMode::Extend => set.iter().map(|(_, img)| img.clone()).chain(normalized).collect(),
    })
}

/// On-disk plan: profile paths are relative to the plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub p_passthrough: f64,
    pub references: Vec<PathBuf>,
    pub seed: u64,
    pub rng_algorithm: String,
}

impl PlanFile {
    pub fn load(path: &Path) -> Result<(PlanFile, AugmentationPlan), AugmentError> {
        let file: PlanFile = read_json(path)?;
        if file.rng_algorithm != RNG_ALGORITHM {
            return Err(AugmentError::InvalidPlan(format!(
                "plan uses rng {:?}, this build provides {RNG_ALGORITHM:?}",
                file.rng_algorithm
            )));
        }
        let root = path.parent().unwrap_or(Path::new(""));
        let references = file
            .references
            .iter()
            .map(|p| load_profile(&root.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let plan = AugmentationPlan::new(references, file.p_passthrough, file.seed)?;
        Ok((file, plan))
    }
}

pub fn load_profile(path: &Path) -> Result<ReferenceProfile, AugmentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    ReferenceProfile::from_json(&text).map_err(|source| AugmentError::Normalization {
        id: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stain::StainBasis;
    use crate::synth::{CANONICAL_E, CANONICAL_H};

    fn plan(r: usize, p: f64) -> AugmentationPlan {
        let profile = ReferenceProfile {
            source_id: "ref".into(),
            basis: StainBasis::new(CANONICAL_H, CANONICAL_E).unwrap(),
            max_sat: [1.0, 0.5],
            params: NormalizationParams::default(),
        };
        AugmentationPlan::new(vec![profile; r], p, 42).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        for r in 1..10 {
            for p in [0.0, 0.25, 0.5, 1.0] {
                let s: f64 = plan(r, p).branch_probabilities().iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let probs = plan(7, 0.5).branch_probabilities();
        assert!((probs[1] - 0.5 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        assert!(AugmentationPlan::new(vec![], 0.5, 1).is_err());
        assert!(AugmentationPlan::new(plan(1, 0.5).references, 1.5, 1).is_err());
    }

    #[test]
    fn always_passthrough_at_one() {
        let p = plan(7, 1.0);
        for i in 0..1000 {
            assert_eq!(draw_for_item(&p, 0, i).branch, Branch::Passthrough);
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let p = plan(7, 0.5);
        let a: Vec<_> = (0..200).map(|i| draw_for_item(&p, 3, i)).collect();
        let b: Vec<_> = (0..200).map(|i| draw_for_item(&p, 3, i)).collect();
        assert_eq!(a, b);
        let other_epoch: Vec<_> = (0..200).map(|i| draw_for_item(&p, 4, i).branch).collect();
        assert_ne!(a.iter().map(|d| d.branch).collect::<Vec<_>>(), other_epoch);
        assert_eq!(a[5].rng_stream_id, (3u64 << 32) | 5);
    }

    #[test]
    fn passthrough_is_bit_identical() {
        let img = RgbImage::filled(3, 3, [12, 34, 56]).unwrap();
        let p = plan(2, 0.5);
        let draw = AugmentationDraw { branch: Branch::Passthrough, rng_stream_id: 0 };
        let out = apply_augmentation(&img, draw, &p, &NormalizationParams::default(), FailurePolicy::Error).unwrap();
        assert_eq!(out.image, img);
    }

    #[test]
    fn failure_policy() {
        // Flat white tile has no tissue to estimate stains from.
        let img = RgbImage::filled(8, 8, [255, 255, 255]).unwrap();
        let p = plan(1, 0.0);
        let draw = AugmentationDraw { branch: Branch::NormalizeTo(0), rng_stream_id: 9 };
        let params = NormalizationParams::default();
        let out = apply_augmentation(&img, draw, &p, &params, FailurePolicy::Passthrough).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.image, img);
        assert!(apply_augmentation(&img, draw, &p, &params, FailurePolicy::Error).is_err());
        let err = materialize_offline(&[("white".into(), img)], &p.references[0], OfflineMode::Replace, &params)
            .unwrap_err();
        assert!(matches!(err, AugmentError::Failures(f) if f[0].0 == "white"));
    }
}
