//! Automatic reference-image selection.
//!
//! Each annotated training image is scored by the contrast between the mean
//! gray level of its background (mask = 0) and of its nuclei (mask > 0). Per
//! organ, the highest-contrast images become the normalization references.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{InstanceLabelMap, RgbImage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectError {
    #[error("image {id}: mask has no {region} pixels")]
    EmptyRegion { id: String, region: &'static str },
    #[error("image {id}: mask is {mask:?} but image is {image:?}")]
    DimensionMismatch { id: String, image: (usize, usize), mask: (usize, usize) },
    #[error("organ {organ} has {available} images, {requested} requested")]
    NotEnoughImages { organ: String, available: usize, requested: usize },
}

#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: String,
    pub organ: String,
    pub image: RgbImage,
    pub mask: InstanceLabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastScore {
    pub id: String,
    pub organ: String,
    pub mean_nuclei: f64,
    pub mean_background: f64,
    pub score: f64,
}

/// BT.601 luma of an 8-bit RGB pixel.
pub fn luma(p: [u8; 3]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

pub fn contrast_score(img: &AnnotatedImage) -> Result<ContrastScore, SelectError> {
    let (w, h) = (img.image.width(), img.image.height());
    if (img.mask.width(), img.mask.height()) != (w, h) {
        return Err(SelectError::DimensionMismatch {
            id: img.id.clone(),
            image: (w, h),
            mask: (img.mask.width(), img.mask.height()),
        });
    }
    let (mut sum_fg, mut n_fg, mut sum_bg, mut n_bg) = (0.0, 0usize, 0.0, 0usize);
    for (p, &label) in img.image.pixels().zip(img.mask.labels()) {
        let g = luma(p);
        if label > 0 {
            sum_fg += g;
            n_fg += 1;
        } else {
            sum_bg += g;
            n_bg += 1;
        }
    }
    let empty = |region| SelectError::EmptyRegion { id: img.id.clone(), region };
    if n_fg == 0 {
        return Err(empty("nuclei"));
    }
    if n_bg == 0 {
        return Err(empty("background"));
    }
    let mean_nuclei = sum_fg / n_fg as f64;
    let mean_background = sum_bg / n_bg as f64;
    Ok(ContrastScore {
        id: img.id.clone(),
        organ: img.organ.clone(),
        mean_nuclei,
        mean_background,
        score: (mean_background - mean_nuclei).abs(),
    })
}

/// Per organ, the `k_per_organ` highest scores; ties go to the
/// lexicographically smaller id. Output is ordered by organ, then by
/// descending score.
pub fn rank_scores(scores: &[ContrastScore], k_per_organ: usize) -> Result<Vec<ContrastScore>, SelectError> {
    let mut groups: BTreeMap<&str, Vec<&ContrastScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.organ.as_str()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(groups.len() * k_per_organ);
    for (organ, mut group) in groups {
        if group.len() < k_per_organ {
            return Err(SelectError::NotEnoughImages {
                organ: organ.to_string(),
                available: group.len(),
                requested: k_per_organ,
            });
        }
        group.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        out.extend(group.into_iter().take(k_per_organ).cloned());
    }
    Ok(out)
}

/// Select references from a set of annotated images. Returned in the order of
/// [`rank_scores`], each paired with its score.
pub fn select_references(
    set: &[AnnotatedImage],
    k_per_organ: usize,
) -> Result<Vec<(&AnnotatedImage, ContrastScore)>, SelectError> {
    let scores = set.iter().map(contrast_score).collect::<Result<Vec<_>, _>>()?;
    let ranked = rank_scores(&scores, k_per_organ)?;
    Ok(ranked
        .into_iter()
        .map(|s| {
            let img = set
                .iter()
                .find(|a| a.id == s.id && a.organ == s.organ)
                .expect("ranked score comes from the set");
            (img, s)
        })
        .collect())
}
