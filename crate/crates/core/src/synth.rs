//! Synthetic H&E fixtures: two-stain images with known bases, nuclei scenes
//! with ground-truth instances, and a stain-sensitive mock predictor.
//!
//! Everything here is deterministic given the seed, so the fixtures double as
//! oracles for the stain estimation and the end-to-end pipeline checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::{Path, PathBuf};

use crate::io::{self, DataError, DatasetManifest, ManifestEntry, Split};
use crate::predictor::{Predictor, PredictorError};
use crate::raster::{FloatMap, InstanceLabelMap, RgbImage};
use crate::stain::{od_to_rgb, rgb_to_od, NormalizationParams, OdImage, StainBasis};

/// Commonly cited H&E OD directions.
pub const CANONICAL_H: [f64; 3] = [0.650, 0.704, 0.286];
pub const CANONICAL_E: [f64; 3] = [0.072, 0.990, 0.105];

pub fn canonical_basis() -> StainBasis {
    StainBasis::new(CANONICAL_H, CANONICAL_E).expect("canonical stains are valid")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random pair of non-negative unit stain directions separated by at least
/// 25 degrees, ordered hematoxylin (larger red) first.
pub fn random_stain_pair<R: Rng>(rng: &mut R) -> StainBasis {
    loop {
        let mut draw = || -> [f64; 3] {
            [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)]
        };
        let (a, b) = (draw(), draw());
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        let (a, b) = (a.map(|c| c / na), b.map(|c| c / nb));
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        if cos > 25f64.to_radians().cos() || (a[0] - b[0]).abs() < 0.05 {
            continue;
        }
        let (h, e) = if a[0] > b[0] { (a, b) } else { (b, a) };
        return StainBasis::new(h, e).expect("well separated directions");
    }
}

/// OD cloud of `width * height` pixels mixing two stains. A fifth of the
/// pixels carry pure hematoxylin, a fifth pure eosin, a tenth are empty
/// background and the rest are mixtures, so the angular extremes of the cloud
/// are exactly the two stain directions.
pub fn two_stain_cloud<R: Rng>(
    rng: &mut R,
    width: usize,
    height: usize,
    basis: &StainBasis,
    max_sat: [f64; 2],
) -> OdImage {
    let mut data = Vec::with_capacity(width * height * 3);
    for _ in 0..width * height {
        let u: f64 = rng.random();
        let mut sh = rng.random_range(0.25..1.0) * max_sat[0];
        let mut se = rng.random_range(0.25..1.0) * max_sat[1];
        if u < 0.1 {
            sh = 0.0;
            se = 0.0;
        } else if u < 0.3 {
            se = 0.0;
        } else if u < 0.5 {
            sh = 0.0;
        }
        data.extend_from_slice(&basis.mix([sh, se]));
    }
    OdImage::new(width, height, data).expect("valid cloud")
}

/// 8-bit rendering of [`two_stain_cloud`].
pub fn two_stain_image<R: Rng>(
    rng: &mut R,
    width: usize,
    height: usize,
    basis: &StainBasis,
    max_sat: [f64; 2],
) -> RgbImage {
    let od = two_stain_cloud(rng, width, height, basis, max_sat);
    od_to_rgb(&od, &NormalizationParams::default())
}

/// How a scene is stained.
#[derive(Clone, Copy, Debug)]
pub struct StainStyle {
    pub basis: StainBasis,
    /// Typical hematoxylin saturation inside nuclei.
    pub nucleus_h: f64,
    /// Typical eosin saturation of the stroma.
    pub stroma_e: f64,
}

impl StainStyle {
    pub fn canonical() -> Self {
        Self { basis: canonical_basis(), nucleus_h: 1.0, stroma_e: 0.45 }
    }

    /// Faded, bluish hematoxylin with a heavier eosin counterstain: the kind of
    /// scanner and protocol shift that breaks a color-tuned predictor.
    pub fn shifted() -> Self {
        let basis = StainBasis::new([0.55, 0.62, 0.56], [0.16, 0.93, 0.33]).expect("valid");
        Self { basis, nucleus_h: 0.42, stroma_e: 0.7 }
    }

    /// Mild per-organ variation around the canonical stain.
    pub fn organ_variant(index: usize) -> Self {
        let t = index as f64;
        let h = [0.650 + 0.02 * (t * 1.3).sin(), 0.704 + 0.02 * (t * 0.7).cos(), 0.286 + 0.03 * (t * 0.9).sin()];
        let e = [0.072 + 0.01 * (t * 1.1).cos(), 0.990, 0.105 + 0.02 * (t * 1.7).sin()];
        Self {
            basis: StainBasis::new(h, e).expect("valid"),
            nucleus_h: 0.95 + 0.05 * (t * 2.1).sin(),
            stroma_e: 0.45 + 0.05 * (t * 1.5).cos(),
        }
    }
}

/// Rendered tissue tile with its ground-truth instance labels.
#[derive(Clone, Debug)]
pub struct NucleiScene {
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
}

#[derive(Clone, Copy, Debug)]
struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

/// Generate a `size`x`size` tile: eosin stroma over most of the tile, a white
/// gap along the top rows, isolated nuclei and touching nucleus pairs.
pub fn nuclei_scene(seed: u64, size: usize, style: &StainStyle) -> NucleiScene {
    let mut rng = rng(seed);
    let disks = place_disks(&mut rng, size);
    let params = NormalizationParams::default();
    let mut od = Vec::with_capacity(size * size * 3);
    let mut labels = vec![0u32; size * size];
    let gap = size / 10;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // Nearest disk center among those covering the pixel.
            let mut owner: Option<(usize, f64)> = None;
            for (k, d) in disks.iter().enumerate() {
                let dist = ((px - d.cx).powi(2) + (py - d.cy).powi(2)).sqrt();
                if dist <= d.r && owner.is_none_or(|(_, best)| dist < best) {
                    owner = Some((k, dist));
                }
            }
            let texture = 1.0 + 0.12 * ((x as f64 * 0.37).sin() * (y as f64 * 0.23).cos());
            let jitter: f64 = rng.random_range(0.92..1.08);
            let (sh, se) = match owner {
                Some((k, _)) => {
                    labels[y * size + x] = k as u32 + 1;
                    (style.nucleus_h * texture * jitter, 0.12 * style.stroma_e)
                }
                None if y < gap => (0.0, 0.0),
                None => (0.04, style.stroma_e * texture * jitter),
            };
            od.extend_from_slice(&style.basis.mix([sh, se]));
        }
    }
    let od = OdImage::new(size, size, od).expect("valid OD");
    NucleiScene {
        image: od_to_rgb(&od, &params),
        labels: InstanceLabelMap::new(size, size, labels).expect("valid labels"),
    }
}

fn place_disks(rng: &mut ChaCha8Rng, size: usize) -> Vec<Disk> {
    let mut disks: Vec<Disk> = Vec::new();
    let margin = 12.0;
    let top = size as f64 / 10.0 + margin;
    let hi = size as f64 - margin;
    let target = (size * size) / 900;
    let mut attempts = 0;
    while disks.len() < target && attempts < 2000 {
        attempts += 1;
        let r = rng.random_range(5.5..8.0);
        let cx = rng.random_range(margin..hi);
        let cy = rng.random_range(top..hi);
        let pair = rng.random_bool(0.35);
        let mut cand = vec![Disk { cx, cy, r }];
        if pair {
            // Touching partner, overlapping by a couple of pixels.
            let r2 = rng.random_range(5.5..8.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let sep = r + r2 - 2.5;
            let (x2, y2) = (cx + sep * angle.cos(), cy + sep * angle.sin());
            if x2 < margin || x2 > hi || y2 < top || y2 > hi {
                continue;
            }
            cand.push(Disk { cx: x2, cy: y2, r: r2 });
        }
        let clear = cand.iter().all(|c| {
            disks.iter().all(|d| ((c.cx - d.cx).powi(2) + (c.cy - d.cy).powi(2)).sqrt() > c.r + d.r + 4.0)
        });
        if clear {
            disks.extend(cand);
        }
    }
    disks
}

/// Layout of a synthetic dataset written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixtureSpec {
    pub organs: usize,
    pub train_per_organ: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { organs: 7, train_per_organ: 1, test: 4, size: 96, seed: 7 }
    }
}

/// Write a stain-shifted fixture: training tiles in per-organ variants of the
/// canonical stain, test tiles in [`StainStyle::shifted`]. Returns the path of
/// the manifest (`manifest.json` in `dir`).
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<PathBuf, DataError> {
    io::create_dir(&dir.join("images"))?;
    io::create_dir(&dir.join("masks"))?;
    let mut entries = Vec::new();
    let mut jobs = Vec::new();
    for organ in 0..spec.organs {
        for k in 0..spec.train_per_organ {
            let id = format!("train-o{organ}-{k}");
            jobs.push((id, Some(format!("organ{organ}")), Split::Train, StainStyle::organ_variant(organ)));
        }
    }
    for k in 0..spec.test {
        jobs.push((format!("test-{k}"), None, Split::Test, StainStyle::shifted()));
    }
    for (n, (id, organ, split, style)) in jobs.into_iter().enumerate() {
        let scene = nuclei_scene(spec.seed.wrapping_mul(1000).wrapping_add(n as u64), spec.size, &style);
        let image = PathBuf::from(format!("images/{id}.png"));
        let mask = PathBuf::from(format!("masks/{id}.png"));
        io::write_rgb_png(&dir.join(&image), &scene.image)?;
        io::write_label_png(&dir.join(&mask), &scene.labels)?;
        entries.push(ManifestEntry { id, image, mask: Some(mask), organ, split });
    }
    let manifest = DatasetManifest { name: "synthetic-stain-shift".into(), entries, root: dir.to_path_buf() };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Mock nuclei predictor tuned to the canonical stain: it unmixes each pixel
/// with the canonical basis and thresholds the hematoxylin saturation. Its
/// distance channel is the chamfer distance to the predicted background.
///
/// It is pixel-local apart from the distance transform, which is symmetric,
/// so predictions commute exactly with rotations and flips.
#[derive(Clone, Debug)]
pub struct StainThresholdPredictor {
    basis: StainBasis,
    params: NormalizationParams,
    threshold: f64,
    softness: f64,
}

impl Default for StainThresholdPredictor {
    fn default() -> Self {
        Self {
            basis: canonical_basis(),
            params: NormalizationParams::default(),
            threshold: 0.55,
            softness: 0.08,
        }
    }
}

impl StainThresholdPredictor {
    /// Two-channel map: nuclear probability, then distance.
    pub fn predict_map(&self, img: &RgbImage) -> FloatMap {
        let od = rgb_to_od(img, &self.params);
        let prob: Vec<f32> = od
            .pixels()
            .map(|p| {
                let sh = self.basis.unmix(p)[0];
                let z = (sh - self.threshold) / self.softness;
                (1.0 / (1.0 + (-z).exp())) as f32
            })
            .collect();
        let mask: Vec<bool> = prob.iter().map(|&p| p >= 0.5).collect();
        let dist = chamfer_distance(&mask, img.width(), img.height());
        let data = prob.iter().zip(&dist).flat_map(|(&p, &d)| [p, d]).collect();
        FloatMap::new(img.width(), img.height(), 2, data).expect("valid map")
    }
}

impl Predictor for StainThresholdPredictor {
    fn predict(&self, _image_id: &str, _variant_id: &str, img: &RgbImage) -> Result<FloatMap, PredictorError> {
        Ok(self.predict_map(img))
    }
}

/// 3-4 chamfer distance (in pixel units) from every foreground pixel to the
/// nearest background pixel or the image border.
pub fn chamfer_distance(mask: &[bool], width: usize, height: usize) -> Vec<f32> {
    const BIG: u32 = u32::MAX / 4;
    let mut d: Vec<u32> = mask.iter().map(|&m| if m { BIG } else { 0 }).collect();
    let at = |x: isize, y: isize, d: &Vec<u32>| -> u32 {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            0
        } else {
            d[y as usize * width + x as usize]
        }
    };
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = y as usize * width + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                at(x - 1, y, &d) + 3,
                at(x, y - 1, &d) + 3,
                at(x - 1, y - 1, &d) + 4,
                at(x + 1, y - 1, &d) + 4,
            ]
            .into_iter()
            .min()
            .unwrap_or(BIG);
            d[i] = d[i].min(best);
        }
    }
    for y in (0..height as isize).rev() {
        for x in (0..width as isize).rev() {
            let i = y as usize * width + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                at(x + 1, y, &d) + 3,
                at(x, y + 1, &d) + 3,
                at(x + 1, y + 1, &d) + 4,
                at(x - 1, y + 1, &d) + 4,
            ]
            .into_iter()
            .min()
            .unwrap_or(BIG);
            d[i] = d[i].min(best);
        }
    }
    d.into_iter().map(|v| v as f32 / 3.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Orientation;

    #[test]
    fn scenes_are_deterministic_and_labelled() {
        let a = nuclei_scene(7, 96, &StainStyle::canonical());
        let b = nuclei_scene(7, 96, &StainStyle::canonical());
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.instance_ids().len() >= 5);
        // Top gap is white.
        assert_eq!(a.image.pixel(3, 2), [255, 255, 255]);
    }

    #[test]
    fn chamfer_is_orientation_equivariant() {
        let scene = nuclei_scene(3, 64, &StainStyle::canonical());
        let p = StainThresholdPredictor::default();
        let base = p.predict_map(&scene.image);
        for t in Orientation::ALL {
            let back = t.inverse().apply_map(&p.predict_map(&scene.image.transformed(t)));
            assert_eq!(back, base, "{t:?}");
        }
    }

    #[test]
    fn chamfer_of_single_pixel_and_border() {
        let mask = [false, false, false, false, true, false, false, false, false];
        assert_eq!(chamfer_distance(&mask, 3, 3)[4], 1.0);
        let full = [true; 9];
        let d = chamfer_distance(&full, 3, 3);
        assert_eq!(d[4], 2.0);
        assert_eq!(d[0], 1.0);
    }
}
