//! Dice, Aggregated Jaccard Index and Panoptic Quality.
//!
//! All instance matching works on one sparse overlap table per image pair.
//! Instances are indexed in raster order of their first pixel, which is also
//! the order used for greedy AJI matching and for tie-breaks, so no score
//! depends on the numeric values of the ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::InstanceLabelMap;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("ground truth is {gt:?} but prediction is {pred:?}")]
    DimensionMismatch { gt: (usize, usize), pred: (usize, usize) },
}

/// Instance areas and pairwise intersections of two label maps.
#[derive(Clone, Debug)]
pub struct OverlapTable {
    pub gt_area: Vec<u64>,
    pub pred_area: Vec<u64>,
    /// Intersections keyed by (gt index, pred index); only non-zero entries.
    pub intersections: HashMap<(usize, usize), u64>,
}

impl OverlapTable {
    pub fn new(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Self, MetricsError> {
        check_shapes(gt, pred)?;
        let mut gt_index: HashMap<u32, usize> = HashMap::new();
        let mut pred_index: HashMap<u32, usize> = HashMap::new();
        let mut gt_area = Vec::new();
        let mut pred_area = Vec::new();
        let mut intersections = HashMap::new();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            let gi = (g > 0).then(|| index_of(&mut gt_index, &mut gt_area, g));
            let pi = (p > 0).then(|| index_of(&mut pred_index, &mut pred_area, p));
            if let Some(gi) = gi {
                gt_area[gi] += 1;
            }
            if let Some(pi) = pi {
                pred_area[pi] += 1;
            }
            if let (Some(gi), Some(pi)) = (gi, pi) {
                *intersections.entry((gi, pi)).or_insert(0) += 1;
            }
        }
        Ok(Self { gt_area, pred_area, intersections })
    }

    fn union(&self, g: usize, p: usize, inter: u64) -> u64 {
        self.gt_area[g] + self.pred_area[p] - inter
    }

    /// Overlapping predictions of each ground-truth instance, ascending.
    fn candidates(&self) -> Vec<Vec<(usize, u64)>> {
        let mut per_gt = vec![Vec::new(); self.gt_area.len()];
        for (&(g, p), &i) in &self.intersections {
            per_gt[g].push((p, i));
        }
        for c in &mut per_gt {
            c.sort_unstable();
        }
        per_gt
    }
}

fn index_of(index: &mut HashMap<u32, usize>, areas: &mut Vec<u64>, id: u32) -> usize {
    *index.entry(id).or_insert_with(|| {
        areas.push(0);
        areas.len() - 1
    })
}

fn check_shapes(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<(), MetricsError> {
    if !gt.same_shape(pred) {
        return Err(MetricsError::DimensionMismatch {
            gt: (gt.width(), gt.height()),
            pred: (pred.width(), pred.height()),
        });
    }
    Ok(())
}

/// Dice of the binarized maps; 1 when both are empty.
pub fn dice(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64, MetricsError> {
    check_shapes(gt, pred)?;
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        a += u64::from(g > 0);
        b += u64::from(p > 0);
        both += u64::from(g > 0 && p > 0);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Aggregated Jaccard Index with unique use of predictions.
pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64, MetricsError> {
    Ok(aji_from_table(&OverlapTable::new(gt, pred)?))
}

pub fn aji_from_table(t: &OverlapTable) -> f64 {
    if t.gt_area.is_empty() && t.pred_area.is_empty() {
        return 1.0;
    }
    let mut used = vec![false; t.pred_area.len()];
    let (mut inter_sum, mut union_sum) = (0u64, 0u64);
    for (g, cands) in t.candidates().into_iter().enumerate() {
        // Best IoU compared exactly as fractions; ties keep the earlier pred.
        let mut best: Option<(usize, u64, u64)> = None;
        for (p, i) in cands {
            if used[p] {
                continue;
            }
            let u = t.union(g, p, i);
            let better = match best {
                None => true,
                Some((_, bi, bu)) => u128::from(i) * u128::from(bu) > u128::from(bi) * u128::from(u),
            };
            if better {
                best = Some((p, i, u));
            }
        }
        match best {
            Some((p, i, u)) => {
                used[p] = true;
                inter_sum += i;
                union_sum += u;
            }
            None => union_sum += t.gt_area[g],
        }
    }
    union_sum += t
        .pred_area
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(&a, _)| a)
        .sum::<u64>();
    inter_sum as f64 / union_sum as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticScores {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Panoptic quality with matches at IoU strictly above one half.
pub fn pq(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<PanopticScores, MetricsError> {
    Ok(pq_from_table(&OverlapTable::new(gt, pred)?))
}

pub fn pq_from_table(t: &OverlapTable) -> PanopticScores {
    let (n_gt, n_pred) = (t.gt_area.len(), t.pred_area.len());
    if n_gt == 0 && n_pred == 0 {
        return PanopticScores { pq: 1.0, dq: 1.0, sq: 1.0, tp: 0, fp: 0, fn_: 0 };
    }
    let mut iou_sum = 0.0;
    let mut tp = 0usize;
    let mut keys: Vec<(&(usize, usize), &u64)> = t.intersections.iter().collect();
    keys.sort_unstable();
    for (&(g, p), &i) in keys {
        let u = t.union(g, p, i);
        if 2 * i > u {
            tp += 1;
            iou_sum += i as f64 / u as f64;
        }
    }
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    if tp == 0 {
        return PanopticScores { pq: 0.0, dq: 0.0, sq: 0.0, tp, fp, fn_ };
    }
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    let sq = iou_sum / tp as f64;
    PanopticScores { pq: dq * sq, dq, sq, tp, fp, fn_ }
}

/// All scores of one image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub aji: f64,
    #[serde(flatten)]
    pub panoptic: PanopticScores,
}

pub fn evaluate_pair(
    id: impl Into<String>,
    gt: &InstanceLabelMap,
    pred: &InstanceLabelMap,
) -> Result<ImageMetrics, MetricsError> {
    let table = OverlapTable::new(gt, pred)?;
    Ok(ImageMetrics {
        id: id.into(),
        dice: dice(gt, pred)?,
        aji: aji_from_table(&table),
        panoptic: pq_from_table(&table),
    })
}

/// Dataset-level scores: unweighted means of the per-image scores, summed
/// match counts. `pq = dq * sq` holds per image, not for the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn aggregate(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self {
            dice: mean(|m| m.dice),
            aji: mean(|m| m.aji),
            pq: mean(|m| m.panoptic.pq),
            dq: mean(|m| m.panoptic.dq),
            sq: mean(|m| m.panoptic.sq),
            tp: per_image.iter().map(|m| m.panoptic.tp).sum(),
            fp: per_image.iter().map(|m| m.panoptic.fp).sum(),
            fn_: per_image.iter().map(|m| m.panoptic.fn_).sum(),
            per_image,
        }
    }
}

/// Aligned plain-text table, one row per named run.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!(
        "{:<name_width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "Method", "Dice", "AJI", "PQ", "DQ", "SQ"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<name_width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}\n",
            name, r.dice, r.aji, r.pq, r.dq, r.sq
        ));
    }
    out
}
