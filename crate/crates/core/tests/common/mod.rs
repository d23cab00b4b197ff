//! Independent reference implementations used as test oracles. They favor
//! obviousness over speed and share no code with the library.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use stainseg::InstanceLabelMap;

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cos_sim(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Least squares of `od = s0*h + s1*e` through the 2x2 normal equations and
/// Cramer's rule.
pub fn normal_equations(h: [f64; 3], e: [f64; 3], od: [f64; 3]) -> [f64; 2] {
    let (a, b, d) = (dot(h, h), dot(h, e), dot(e, e));
    let (r0, r1) = (dot(h, od), dot(e, od));
    let det = a * d - b * b;
    [(r0 * d - b * r1) / det, (a * r1 - b * r0) / det]
}

/// Percentile with linear interpolation, computed from scratch.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (v.len() as f64 - 1.0);
    let below = rank.floor();
    let i = below as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (rank - below)) + v[i + 1] * (rank - below)
}

/// Pixel sets of every instance, keyed by the instance's first raster index.
pub fn instances(map: &InstanceLabelMap) -> Vec<HashSet<usize>> {
    let mut by_id: BTreeMap<u32, (usize, HashSet<usize>)> = BTreeMap::new();
    for (i, &l) in map.labels().iter().enumerate() {
        if l > 0 {
            by_id.entry(l).or_insert_with(|| (i, HashSet::new())).1.insert(i);
        }
    }
    let mut list: Vec<(usize, HashSet<usize>)> = by_id.into_values().collect();
    list.sort_by_key(|(first, _)| *first);
    list.into_iter().map(|(_, s)| s).collect()
}

pub fn oracle_dice(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> f64 {
    let a: HashSet<usize> = instances(gt).into_iter().flatten().collect();
    let b: HashSet<usize> = instances(pred).into_iter().flatten().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Greedy unique-use AJI over the full pairwise table: GT instances and
/// predictions both in first-pixel order, ties keep the earlier prediction.
pub fn oracle_aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> f64 {
    let g = instances(gt);
    let p = instances(pred);
    if g.is_empty() && p.is_empty() {
        return 1.0;
    }
    let mut used = vec![false; p.len()];
    let (mut inter, mut union) = (0usize, 0usize);
    for gi in &g {
        let mut best: Option<(usize, f64)> = None;
        for (j, pj) in p.iter().enumerate() {
            let i = gi.intersection(pj).count();
            if used[j] || i == 0 {
                continue;
            }
            let iou = i as f64 / gi.union(pj).count() as f64;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                inter += gi.intersection(&p[j]).count();
                union += gi.union(&p[j]).count();
            }
            None => union += gi.len(),
        }
    }
    union += p.iter().zip(&used).filter(|(_, &u)| !u).map(|(s, _)| s.len()).sum::<usize>();
    inter as f64 / union as f64
}

/// (pq, dq, sq, tp, fp, fn) by exhaustive pairing; panics if any instance
/// would be matched twice.
pub fn oracle_pq(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> (f64, f64, f64, usize, usize, usize) {
    let g = instances(gt);
    let p = instances(pred);
    if g.is_empty() && p.is_empty() {
        return (1.0, 1.0, 1.0, 0, 0, 0);
    }
    let mut matched_g = vec![false; g.len()];
    let mut matched_p = vec![false; p.len()];
    let mut ious = Vec::new();
    for (a, gi) in g.iter().enumerate() {
        for (b, pj) in p.iter().enumerate() {
            let i = gi.intersection(pj).count();
            let u = gi.union(pj).count();
            if 2 * i > u {
                assert!(!matched_g[a] && !matched_p[b], "double match");
                matched_g[a] = true;
                matched_p[b] = true;
                ious.push(i as f64 / u as f64);
            }
        }
    }
    let tp = ious.len();
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    if tp == 0 {
        return (0.0, 0.0, 0.0, tp, fp, fn_);
    }
    let dq = tp as f64 / (tp as f64 + fp as f64 / 2.0 + fn_ as f64 / 2.0);
    let sq = ious.iter().sum::<f64>() / tp as f64;
    (dq * sq, dq, sq, tp, fp, fn_)
}

/// Random instance map: up to `max_instances` overlapping rectangles painted
/// in order with random (sparse) ids.
pub fn random_map<R: Rng>(rng: &mut R, w: usize, h: usize, max_instances: usize) -> InstanceLabelMap {
    let mut labels = vec![0u32; w * h];
    let n = rng.random_range(0..=max_instances);
    for _ in 0..n {
        let id = rng.random_range(1..60_000u32);
        paint_rect(rng, &mut labels, w, h, id);
    }
    InstanceLabelMap::new(w, h, labels).unwrap()
}

fn paint_rect<R: Rng>(rng: &mut R, labels: &mut [u32], w: usize, h: usize, id: u32) {
    let x0 = rng.random_range(0..w);
    let y0 = rng.random_range(0..h);
    let x1 = rng.random_range(x0..w.min(x0 + 12));
    let y1 = rng.random_range(y0..h.min(y0 + 12));
    for y in y0..=y1 {
        for x in x0..=x1 {
            labels[y * w + x] = id;
        }
    }
}

/// A prediction correlated with `gt`: each instance is shifted by up to two
/// pixels, some are dropped, some spurious ones added.
pub fn perturbed<R: Rng>(rng: &mut R, gt: &InstanceLabelMap) -> InstanceLabelMap {
    let (w, h) = (gt.width(), gt.height());
    let mut labels = vec![0u32; w * h];
    for set in instances(gt) {
        if rng.random_bool(0.15) {
            continue;
        }
        let id = rng.random_range(1..60_000u32);
        let (dx, dy) = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
        for i in set {
            let (x, y) = ((i % w) as i64 + dx, (i / w) as i64 + dy);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                labels[y as usize * w + x as usize] = id;
            }
        }
    }
    if rng.random_bool(0.3) {
        let id = rng.random_range(1..60_000u32);
        paint_rect(rng, &mut labels, w, h, id);
    }
    InstanceLabelMap::new(w, h, labels).unwrap()
}

/// Relabel every instance with a fresh random id (bijectively).
pub fn relabel<R: Rng>(rng: &mut R, map: &InstanceLabelMap) -> InstanceLabelMap {
    let mut mapping = BTreeMap::new();
    let mut used = HashSet::new();
    for id in map.instance_ids() {
        let fresh = loop {
            let c = rng.random_range(1..u32::MAX);
            if used.insert(c) {
                break c;
            }
        };
        mapping.insert(id, fresh);
    }
    let labels = map.labels().iter().map(|&l| if l == 0 { 0 } else { mapping[&l] }).collect();
    InstanceLabelMap::new(map.width(), map.height(), labels).unwrap()
}

/// Erosion then dilation with a radius-r Euclidean disk, straight from the
/// set definitions; outside pixels are background.
pub fn oracle_opening(mask: &[bool], w: usize, h: usize, r: i64) -> Vec<bool> {
    let se: Vec<(i64, i64)> =
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).filter(|(dx, dy)| dx * dx + dy * dy <= r * r).collect();
    let inside = |m: &[bool], x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && m[y as usize * w + x as usize];
    let eroded: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            se.iter().all(|&(dx, dy)| inside(mask, x + dx, y + dy))
        })
        .collect();
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            se.iter().any(|&(dx, dy)| inside(&eroded, x - dx, y - dy))
        })
        .collect()
}

/// True when every instance of `map` is a single 4-connected component.
pub fn all_four_connected(map: &InstanceLabelMap) -> bool {
    let (w, h) = (map.width(), map.height());
    instances(map).into_iter().all(|set| {
        let start = *set.iter().min().unwrap();
        let mut seen = HashSet::from([start]);
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut nb = Vec::new();
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            for n in nb {
                if set.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == set.len()
    })
}
