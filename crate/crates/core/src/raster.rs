//! In-memory rasters shared by every stage of the pipeline.
//!
//! All rasters are row-major with channel-interleaved samples. Constructors
//! validate the length invariant, so a value of any of these types always has
//! `data.len() == width * height * channels`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster dimensions must be non-zero, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("raster data has {actual} samples, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("raster values must be finite")]
    NonFinite,
}

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        check_len(width * height * 3, data.len())?;
        Ok(Self { width, height, data })
    }

    /// Image filled with a single color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn transformed(&self, t: Orientation) -> RgbImage {
        let (width, height, data) = t.apply(self.width, self.height, 3, &self.data);
        RgbImage { width, height, data }
    }
}

/// Multi-channel f32 raster (probability maps, distance maps).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FloatMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        if channels == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        check_len(width * height * channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite);
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self, RasterError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &FloatMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Extract one channel as a single-channel map.
    pub fn channel(&self, c: usize) -> FloatMap {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        FloatMap { width: self.width, height: self.height, channels: 1, data }
    }

    /// Interleave single-channel maps of equal size into one map.
    pub fn stack(maps: &[&FloatMap]) -> Result<FloatMap, RasterError> {
        let first = maps.first().ok_or(RasterError::EmptyDimensions { width: 0, height: 0 })?;
        let (w, h) = (first.width, first.height);
        let channels: usize = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            for m in maps {
                if m.width != w || m.height != h {
                    return Err(RasterError::LengthMismatch {
                        expected: w * h,
                        actual: m.width * m.height,
                    });
                }
                data.extend_from_slice(&m.data[i * m.channels..(i + 1) * m.channels]);
            }
        }
        Ok(FloatMap { width: w, height: h, channels, data })
    }

    pub fn transformed(&self, t: Orientation) -> FloatMap {
        let (width, height, data) = t.apply(self.width, self.height, self.channels, &self.data);
        FloatMap { width, height, channels: self.channels, data }
    }
}

/// Instance segmentation: 0 is background, each positive id one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        check_len(width * height, labels.len())?;
        Ok(Self { width, height, labels })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, RasterError> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct positive ids.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }

    pub fn same_shape(&self, other: &InstanceLabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// One of the four orientations reachable with a 90 degree rotation and a
/// horizontal flip. `Rot90` is a counter-clockwise quarter turn;
/// `Rot90HFlip` flips first and then rotates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Identity,
    Rot90,
    HFlip,
    Rot90HFlip,
}

impl Orientation {
    pub const ALL: [Orientation; 4] =
        [Orientation::Identity, Orientation::Rot90, Orientation::HFlip, Orientation::Rot90HFlip];

    pub fn suffix(self) -> &'static str {
        match self {
            Orientation::Identity => "",
            Orientation::Rot90 => "-rot90",
            Orientation::HFlip => "-hflip",
            Orientation::Rot90HFlip => "-rot90hflip",
        }
    }

    /// Transform mapping outputs of `self` back to the original frame.
    pub fn inverse(self) -> InverseOrientation {
        InverseOrientation(self)
    }

    fn swaps_axes(self) -> bool {
        matches!(self, Orientation::Rot90 | Orientation::Rot90HFlip)
    }

    /// Source coordinate, in a `w`x`h` input, of output pixel (x, y).
    fn source(self, x: usize, y: usize, w: usize) -> (usize, usize) {
        match self {
            Orientation::Identity => (x, y),
            // Counter-clockwise: output is h wide and w tall.
            Orientation::Rot90 => (w - 1 - y, x),
            Orientation::HFlip => (w - 1 - x, y),
            // hflip then rot90: rot90 source is (w-1-y, x) in the flipped image,
            // which is (y, x) in the input.
            Orientation::Rot90HFlip => (y, x),
        }
    }

    fn apply<T: Copy>(self, w: usize, h: usize, c: usize, data: &[T]) -> (usize, usize, Vec<T>) {
        if self == Orientation::Identity {
            return (w, h, data.to_vec());
        }
        let (ow, oh) = if self.swaps_axes() { (h, w) } else { (w, h) };
        let mut out = Vec::with_capacity(data.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(x, y, w);
                let i = (sy * w + sx) * c;
                out.extend_from_slice(&data[i..i + c]);
            }
        }
        (ow, oh, out)
    }
}

/// Inverse of an [`Orientation`], applied to maps predicted in the
/// transformed frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InverseOrientation(Orientation);

impl InverseOrientation {
    pub fn forward(self) -> Orientation {
        self.0
    }

    /// `(w, h)` are the dimensions of the transformed raster.
    fn apply<T: Copy>(self, w: usize, h: usize, c: usize, data: &[T]) -> (usize, usize, Vec<T>) {
        let t = self.0;
        if t == Orientation::Identity {
            return (w, h, data.to_vec());
        }
        // Original dimensions.
        let (ow, oh) = if t.swaps_axes() { (h, w) } else { (w, h) };
        let mut out = vec![data[0]; data.len()];
        for ty in 0..h {
            for tx in 0..w {
                let (sx, sy) = t.source(tx, ty, ow);
                let src = (ty * w + tx) * c;
                let dst = (sy * ow + sx) * c;
                out[dst..dst + c].copy_from_slice(&data[src..src + c]);
            }
        }
        (ow, oh, out)
    }

    pub fn apply_map(self, map: &FloatMap) -> FloatMap {
        let (width, height, data) = self.apply(map.width, map.height, map.channels, &map.data);
        FloatMap { width, height, channels: map.channels, data }
    }

    pub fn apply_rgb(self, img: &RgbImage) -> RgbImage {
        let (width, height, data) = self.apply(img.width, img.height, 3, &img.data);
        RgbImage { width, height, data }
    }
}

fn check_dims(width: usize, height: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions { width, height });
    }
    Ok(())
}

fn check_len(expected: usize, actual: usize) -> Result<(), RasterError> {
    if expected != actual {
        return Err(RasterError::LengthMismatch { expected, actual });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn rejects_bad_lengths() {
        assert_eq!(
            RgbImage::new(2, 2, vec![0; 11]),
            Err(RasterError::LengthMismatch { expected: 12, actual: 11 })
        );
        assert!(RgbImage::new(0, 2, vec![]).is_err());
        assert_eq!(FloatMap::new(1, 1, 1, vec![f32::NAN]), Err(RasterError::NonFinite));
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // 2x1 image [a b] rotated ccw becomes a 1x2 column [b; a].
        let img = RgbImage::new(2, 1, vec![1, 1, 1, 2, 2, 2]).unwrap();
        let r = img.transformed(Orientation::Rot90);
        assert_eq!((r.width(), r.height()), (1, 2));
        assert_eq!(r.pixel(0, 0), [2, 2, 2]);
        assert_eq!(r.pixel(0, 1), [1, 1, 1]);
    }

    #[test]
    fn rot90_hflip_is_hflip_then_rotate() {
        let img = ramp(5, 3);
        let composed = img.transformed(Orientation::HFlip).transformed(Orientation::Rot90);
        assert_eq!(img.transformed(Orientation::Rot90HFlip), composed);
    }

    #[test]
    fn inverse_restores_every_orientation() {
        let img = ramp(7, 4);
        for t in Orientation::ALL {
            let back = t.inverse().apply_rgb(&img.transformed(t));
            assert_eq!(back, img, "{t:?}");
        }
        let map = FloatMap::new(3, 2, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        for t in Orientation::ALL {
            assert_eq!(t.inverse().apply_map(&map.transformed(t)), map, "{t:?}");
        }
    }

    #[test]
    fn stack_and_split_channels() {
        let a = FloatMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let b = FloatMap::new(2, 1, 1, vec![3.0, 4.0]).unwrap();
        let s = FloatMap::stack(&[&a, &b]).unwrap();
        assert_eq!(s.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.channel(1), b);
    }
}
