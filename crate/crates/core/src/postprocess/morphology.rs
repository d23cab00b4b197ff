//! Grid primitives: neighborhoods, connected components, reconstruction by
//! dilation and binary opening.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

const N4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
const N8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &N4,
            Connectivity::Eight => &N8,
        }
    }
}

/// Visit the in-bounds neighbors of pixel `i`.
#[inline]
pub(crate) fn for_neighbors(
    i: usize,
    width: usize,
    height: usize,
    conn: Connectivity,
    mut f: impl FnMut(usize),
) {
    let (x, y) = ((i % width) as isize, (i / width) as isize);
    for &(dx, dy) in conn.offsets() {
        let (nx, ny) = (x + dx, y + dy);
        if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
            f(ny as usize * width + nx as usize);
        }
    }
}

/// Label the connected components of `mask`. Ids start at `first_id` and are
/// assigned in raster order of each component's first pixel. Returns the
/// labels (0 outside the mask) and the number of components.
pub fn label_components(
    mask: &[bool],
    width: usize,
    height: usize,
    conn: Connectivity,
    first_id: u32,
) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = first_id;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for_neighbors(p, width, height, conn, |n| {
                if mask[n] && labels[n] == 0 {
                    labels[n] = next;
                    queue.push_back(n);
                }
            });
        }
        next += 1;
    }
    (labels, next - first_id)
}

/// Heap entry: higher value first, then lower raster index.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Entry {
    pub value: f64,
    pub index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then_with(|| other.index.cmp(&self.index))
    }
}

/// Grayscale reconstruction by dilation of `marker` under `mask`, restricted
/// to the `domain` pixels (8-connectivity). Requires `marker <= mask`.
pub fn reconstruct_by_dilation(
    marker: &[f64],
    mask: &[f64],
    domain: &[bool],
    width: usize,
    height: usize,
) -> Vec<f64> {
    let mut rec = marker.to_vec();
    let mut heap: BinaryHeap<Entry> = domain
        .iter()
        .enumerate()
        .filter(|(_, &d)| d)
        .map(|(index, _)| Entry { value: rec[index], index })
        .collect();
    while let Some(Entry { value, index }) = heap.pop() {
        if value < rec[index] {
            continue;
        }
        for_neighbors(index, width, height, Connectivity::Eight, |n| {
            if domain[n] {
                let cand = value.min(mask[n]);
                if cand > rec[n] {
                    rec[n] = cand;
                    heap.push(Entry { value: cand, index: n });
                }
            }
        });
    }
    rec
}

/// Offsets of a digital disk of the given radius.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Binary opening (erosion then dilation) with a disk. Pixels outside the
/// raster count as background.
pub fn binary_opening(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let se = disk(radius);
    let at = |m: &[bool], x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && m[y as usize * width + x as usize]
    };
    let mut eroded = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                eroded[y * width + x] =
                    se.iter().all(|&(dx, dy)| at(mask, x as isize + dx, y as isize + dy));
            }
        }
    }
    let mut opened = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if eroded[y * width + x] {
                for &(dx, dy) in &se {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                        opened[ny as usize * width + nx as usize] = true;
                    }
                }
            }
        }
    }
    opened
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_split_under_four_connectivity() {
        let mask = [true, false, false, true];
        assert_eq!(label_components(&mask, 2, 2, Connectivity::Four, 1).1, 2);
        let (labels, n) = label_components(&mask, 2, 2, Connectivity::Eight, 5);
        assert_eq!(n, 1);
        assert_eq!(labels, vec![5, 0, 0, 5]);
    }

    #[test]
    fn radius_one_disk_is_a_cross() {
        let mut d = disk(1);
        d.sort();
        assert_eq!(d, vec![(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn reconstruction_fills_to_saddle() {
        // 1-D profile: peak 5, saddle 2, peak 4. Marker = profile - 1.
        let f = [1.0, 5.0, 2.0, 4.0, 1.0];
        let marker: Vec<f64> = f.iter().map(|v| v - 1.0).collect();
        let rec = reconstruct_by_dilation(&marker, &f, &[true; 5], 5, 1);
        assert_eq!(rec, vec![1.0, 4.0, 2.0, 3.0, 1.0]);
    }
}
