//! From (probability, distance) maps to an instance label map.
//!
//! The foreground is the thresholded probability map. The distance map is
//! Gaussian-smoothed, its h-maxima inside the foreground seed a
//! priority-flood watershed, and a per-instance opening plus an area filter
//! clean up the result.

pub mod morphology;

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{FloatMap, InstanceLabelMap};
use morphology::{
    binary_opening, for_neighbors, label_components, reconstruct_by_dilation, Connectivity, Entry,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("expected a single-channel map, got {0} channels")]
    NotSingleChannel(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid post-processing parameters: {0}")]
    InvalidParams(String),
}

/// Depth of the h-maxima used as watershed seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerDepth {
    /// Fraction of the distance map's dynamic range inside the foreground.
    Relative(f64),
    Absolute(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub prob_threshold: f64,
    pub gaussian_sigma: f64,
    pub marker_h: MarkerDepth,
    pub min_instance_area: usize,
    pub opening_radius: usize,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            gaussian_sigma: 1.0,
            marker_h: MarkerDepth::Relative(0.1),
            min_instance_area: 10,
            opening_radius: 1,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        let bad = |m: String| Err(PostprocessError::InvalidParams(m));
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return bad(format!("prob_threshold must lie in (0, 1), got {}", self.prob_threshold));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return bad(format!("gaussian_sigma must be >= 0, got {}", self.gaussian_sigma));
        }
        let h = match self.marker_h {
            MarkerDepth::Relative(h) | MarkerDepth::Absolute(h) => h,
        };
        if !(h > 0.0 && h.is_finite()) {
            return bad(format!("marker depth must be positive, got {h}"));
        }
        Ok(())
    }
}

fn single_channel(map: &FloatMap) -> Result<(), PostprocessError> {
    if map.channels() != 1 {
        return Err(PostprocessError::NotSingleChannel(map.channels()));
    }
    Ok(())
}

/// Normalized sampled Gaussian, truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let raw: Vec<f64> =
        (-radius..=radius).map(|x| (-0.5 * (x * x) as f64 / (sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Mirror an index into `0..n` (edge samples repeated: `d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian convolution with reflected borders; `sigma = 0` is the
/// identity. Accumulates in f64.
pub fn gaussian_smooth(map: &FloatMap, sigma: f64) -> Result<FloatMap, PostprocessError> {
    single_channel(map)?;
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PostprocessError::InvalidParams(format!("sigma must be >= 0, got {sigma}")));
    }
    let (w, h) = (map.width(), map.height());
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let src = map.data();
    let mut horiz = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            horiz[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wk)| wk * f64::from(src[y * w + reflect(x as isize + k as isize - r, w)]))
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &wk)| wk * horiz[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
            out[y * w + x] = v as f32;
        }
    }
    Ok(FloatMap::new(w, h, 1, out).expect("same shape"))
}

/// Watershed seeds: the h-maxima of `dist` inside `fg`, labelled with
/// 8-connectivity.
pub fn extract_markers(
    dist: &FloatMap,
    fg: &[bool],
    params: &PostprocessParams,
) -> Result<InstanceLabelMap, PostprocessError> {
    single_channel(dist)?;
    let (w, h) = (dist.width(), dist.height());
    if fg.len() != w * h {
        return Err(PostprocessError::DimensionMismatch((w, h), (fg.len(), 1)));
    }
    let empty = InstanceLabelMap::empty(w, h).expect("valid dims");
    let f: Vec<f64> = dist
        .data()
        .iter()
        .zip(fg)
        .map(|(&v, &m)| if m { f64::from(v) } else { f64::NEG_INFINITY })
        .collect();
    let inside = || f.iter().zip(fg).filter(|(_, &m)| m).map(|(&v, _)| v);
    let (Some(lo), Some(hi)) = (inside().reduce(f64::min), inside().reduce(f64::max)) else {
        return Ok(empty);
    };
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(empty);
    }
    let depth = match params.marker_h {
        MarkerDepth::Relative(frac) => frac * range,
        MarkerDepth::Absolute(a) => a,
    };
    let marker: Vec<f64> = f.iter().map(|&v| v - depth).collect();
    let rec = reconstruct_by_dilation(&marker, &f, fg, w, h);
    let tol = 1e-9 * range.max(1.0);
    let peaks: Vec<bool> =
        (0..w * h).map(|i| fg[i] && f[i] - rec[i] >= depth - tol).collect();
    let (labels, _) = label_components(&peaks, w, h, Connectivity::Eight, 1);
    Ok(InstanceLabelMap::new(w, h, labels).expect("valid dims"))
}

/// Priority-flood watershed of `-dist` restricted to `fg`, from `seeds`.
/// Foreground components without a seed become instances with fresh ids.
pub fn watershed_split(
    fg: &[bool],
    dist: &FloatMap,
    seeds: &InstanceLabelMap,
) -> Result<InstanceLabelMap, PostprocessError> {
    single_channel(dist)?;
    let (w, h) = (dist.width(), dist.height());
    if (seeds.width(), seeds.height()) != (w, h) {
        return Err(PostprocessError::DimensionMismatch((w, h), (seeds.width(), seeds.height())));
    }
    if fg.len() != w * h {
        return Err(PostprocessError::DimensionMismatch((w, h), (fg.len(), 1)));
    }
    let d = dist.data();
    let mut labels: Vec<u32> =
        seeds.labels().iter().zip(fg).map(|(&s, &m)| if m { s } else { 0 }).collect();
    // Highest distance first; ties go to the lower raster index.
    let mut heap: BinaryHeap<Entry> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0)
        .map(|(index, _)| Entry { value: f64::from(d[index]), index })
        .collect();
    while let Some(Entry { index, .. }) = heap.pop() {
        let label = labels[index];
        for_neighbors(index, w, h, Connectivity::Four, |n| {
            if fg[n] && labels[n] == 0 {
                labels[n] = label;
                heap.push(Entry { value: f64::from(d[n]), index: n });
            }
        });
    }
    let unreached: Vec<bool> = (0..w * h).map(|i| fg[i] && labels[i] == 0).collect();
    let next = labels.iter().copied().max().unwrap_or(0) + 1;
    let (extra, _) = label_components(&unreached, w, h, Connectivity::Four, next);
    for (l, e) in labels.iter_mut().zip(extra) {
        if e > 0 {
            *l = e;
        }
    }
    Ok(InstanceLabelMap::new(w, h, labels).expect("valid dims"))
}

/// Per-instance opening, splitting into 4-connected pieces, area filter and
/// id compaction (1..N by descending area, ties by first pixel in raster order).
pub fn cleanup(inst: &InstanceLabelMap, params: &PostprocessParams) -> InstanceLabelMap {
    let (w, h) = (inst.width(), inst.height());
    let r = params.opening_radius;
    // Bounding boxes per id.
    let mut boxes: std::collections::BTreeMap<u32, (usize, usize, usize, usize)> = Default::default();
    for (i, &l) in inst.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let b = boxes.entry(l).or_insert((x, y, x, y));
        *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
    }
    // (area, first raster index, pixels)
    let mut pieces: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (&id, &(x0, y0, x1, y1)) in &boxes {
        // Window with an r-pixel margin: every window edge is either the image
        // border or at least r pixels from the instance, so opening the window
        // equals opening the full image.
        let (bx0, by0) = (x0.saturating_sub(r), y0.saturating_sub(r));
        let (bx1, by1) = ((x1 + r).min(w - 1), (y1 + r).min(h - 1));
        let (bw, bh) = (bx1 - bx0 + 1, by1 - by0 + 1);
        let local: Vec<bool> = (0..bw * bh)
            .map(|j| inst.labels()[(by0 + j / bw) * w + bx0 + j % bw] == id)
            .collect();
        let opened = binary_opening(&local, bw, bh, r);
        let (parts, n) = label_components(&opened, bw, bh, Connectivity::Four, 1);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n as usize];
        for (j, &p) in parts.iter().enumerate() {
            if p > 0 {
                groups[p as usize - 1].push((by0 + j / bw) * w + bx0 + j % bw);
            }
        }
        for mut g in groups {
            g.sort_unstable();
            if g.len() >= params.min_instance_area && !g.is_empty() {
                pieces.push((g.len(), g[0], g));
            }
        }
    }
    pieces.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut labels = vec![0u32; w * h];
    for (k, (_, _, pixels)) in pieces.iter().enumerate() {
        for &p in pixels {
            labels[p] = k as u32 + 1;
        }
    }
    InstanceLabelMap::new(w, h, labels).expect("valid dims")
}

/// The full chain: threshold, smooth, seed, flood, clean.
pub fn instances_from_maps(
    prob: &FloatMap,
    dist: &FloatMap,
    params: &PostprocessParams,
) -> Result<InstanceLabelMap, PostprocessError> {
    params.validate()?;
    single_channel(prob)?;
    single_channel(dist)?;
    if !prob.same_shape(dist) {
        return Err(PostprocessError::DimensionMismatch(
            (prob.width(), prob.height()),
            (dist.width(), dist.height()),
        ));
    }
    let fg: Vec<bool> = prob.data().iter().map(|&p| f64::from(p) >= params.prob_threshold).collect();
    let smoothed = gaussian_smooth(dist, params.gaussian_sigma)?;
    let seeds = extract_markers(&smoothed, &fg, params)?;
    let split = watershed_split(&fg, &smoothed, &seeds)?;
    Ok(cleanup(&split, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> FloatMap {
        let data = (0..w * h).map(|i| f(i % w, i / w)).collect();
        FloatMap::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity_and_constants_survive() {
        let m = single(9, 7, |x, y| (x * 3 + y) as f32 * 0.1);
        assert_eq!(gaussian_smooth(&m, 0.0).unwrap(), m);
        let c = FloatMap::filled(6, 5, 1, 0.37).unwrap();
        assert_eq!(gaussian_smooth(&c, 1.0).unwrap(), c);
        assert_eq!(gaussian_smooth(&c, 3.7).unwrap(), c);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn markers_of_trivial_maps() {
        let p = PostprocessParams::default();
        let zero = FloatMap::filled(8, 8, 1, 0.0).unwrap();
        assert_eq!(extract_markers(&zero, &[true; 64], &p).unwrap().max_label(), 0);
        let bump = single(9, 9, |x, y| {
            let d2 = (x as f32 - 4.0).powi(2) + (y as f32 - 4.0).powi(2);
            (-d2 / 8.0).exp()
        });
        assert_eq!(extract_markers(&bump, &[true; 81], &p).unwrap().instance_ids(), vec![1]);
        assert_eq!(extract_markers(&bump, &[false; 81], &p).unwrap().max_label(), 0);
    }

    #[test]
    fn seedless_watershed_is_connected_components() {
        let fg = [true, true, false, false, false, false, true, true, false];
        let dist = FloatMap::filled(3, 3, 1, 1.0).unwrap();
        let seeds = InstanceLabelMap::empty(3, 3).unwrap();
        let out = watershed_split(&fg, &dist, &seeds).unwrap();
        assert_eq!(out.labels(), &[1, 1, 0, 0, 0, 0, 2, 2, 0]);
    }

    #[test]
    fn one_seed_takes_the_blob() {
        let fg: Vec<bool> = (0..25).map(|i| i % 5 > 0).collect();
        let dist = FloatMap::filled(5, 5, 1, 0.5).unwrap();
        let mut s = vec![0; 25];
        s[12] = 4;
        let seeds = InstanceLabelMap::new(5, 5, s).unwrap();
        let out = watershed_split(&fg, &dist, &seeds).unwrap();
        for (&l, &f) in out.labels().iter().zip(&fg) {
            assert_eq!(l, if f { 4 } else { 0 });
        }
    }

    #[test]
    fn small_instances_are_removed_and_ids_compacted() {
        let mut labels = vec![0u32; 100];
        // 3-pixel speck with id 9.
        labels[0] = 9;
        labels[1] = 9;
        labels[2] = 9;
        // 4x4 square with id 5 and 5x5 square with id 2.
        for y in 3..7 {
            for x in 1..5 {
                labels[y * 10 + x] = 5;
            }
        }
        for y in 3..8 {
            for x in 5..10 {
                labels[y * 10 + x] = 2;
            }
        }
        let inst = InstanceLabelMap::new(10, 10, labels).unwrap();
        let params = PostprocessParams { opening_radius: 0, ..Default::default() };
        let out = cleanup(&inst, &params);
        assert_eq!(out.instance_ids(), vec![1, 2]);
        assert_eq!(out.get(6, 4), 1); // the 25-pixel square
        assert_eq!(out.get(2, 4), 2);
        assert_eq!(out.get(1, 0), 0);
    }

    #[test]
    fn params_validation() {
        assert!(PostprocessParams::default().validate().is_ok());
        let bad = PostprocessParams { prob_threshold: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PostprocessParams { marker_h: MarkerDepth::Relative(0.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&PostprocessParams::default()).unwrap();
        assert!(json.contains("\"marker_h\":{\"relative\":0.1}"), "{json}");
    }

    #[test]
    fn empty_probability_gives_no_instances() {
        let prob = FloatMap::filled(12, 12, 1, 0.0).unwrap();
        let dist = FloatMap::filled(12, 12, 1, 3.0).unwrap();
        let out = instances_from_maps(&prob, &dist, &PostprocessParams::default()).unwrap();
        assert_eq!(out.max_label(), 0);
    }
}
