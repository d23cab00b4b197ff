//! Persistence: dataset manifests, 8-bit RGB PNGs, 16-bit label PNGs and the
//! F32M float-map format.
//!
//! F32M layout (all little-endian): the magic bytes `F32M`, then `u32` width,
//! height and channel count, then `width * height * channels` `f32` samples in
//! row-major, channel-interleaved order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{FloatMap, InstanceLabelMap, RgbImage};

pub const F32M_MAGIC: [u8; 4] = *b"F32M";
pub const F32M_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("not an F32M file (bad magic bytes)")]
    BadMagic,
    #[error("label id {id} does not fit a 16-bit PNG")]
    LabelOverflow { id: u32 },
    #[error("manifest validation failed: {}", format_issues(.0))]
    Invalid(Vec<ManifestIssue>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestIssue {
    DuplicateId(String),
    MissingFile { id: String, path: PathBuf },
}

impl std::fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ManifestIssue::DuplicateId(id) => write!(f, "duplicate id {id:?}"),
            ManifestIssue::MissingFile { id, path } => {
                write!(f, "entry {id:?}: missing file {}", path.display())
            }
        }
    }
}

fn format_issues(issues: &[ManifestIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entries grouped by organ, in order of first appearance within each
    /// group. Entries without an organ are skipped.
    pub fn by_organ(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut groups: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            if let Some(organ) = &e.organ {
                groups.entry(organ.as_str()).or_default().push(e);
            }
        }
        groups
    }

    /// Check id uniqueness and file existence, reporting every problem.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut issues = Vec::new();
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                issues.push(ManifestIssue::DuplicateId(e.id.clone()));
            }
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    issues.push(ManifestIssue::MissingFile { id: e.id.clone(), path: full });
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(DataError::Invalid(issues))
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Parse(e.to_string()))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Parse(format!("{}: {e}", path.display())))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Parse(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw()).map_err(|e| DataError::Parse(e.to_string()))
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    image::save_buffer(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| DataError::Parse(format!("{}: {e}", path.display())))
}

/// Read an instance map from a grayscale PNG (8- or 16-bit).
pub fn read_label_png(path: &Path) -> Result<InstanceLabelMap, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Parse(format!("{}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let labels = img.into_raw().into_iter().map(u32::from).collect();
    InstanceLabelMap::new(w as usize, h as usize, labels).map_err(|e| DataError::Parse(e.to_string()))
}

pub fn write_label_png(path: &Path, labels: &InstanceLabelMap) -> Result<(), DataError> {
    let raw = labels
        .labels()
        .iter()
        .map(|&id| u16::try_from(id).map_err(|_| DataError::LabelOverflow { id }))
        .collect::<Result<Vec<u16>, _>>()?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, raw)
            .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| DataError::Parse(format!("{}: {e}", path.display())))
}

pub fn encode_f32m(map: &FloatMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(F32M_HEADER_LEN + map.data().len() * 4);
    out.extend_from_slice(&F32M_MAGIC);
    for dim in [map.width(), map.height(), map.channels()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32m(bytes: &[u8]) -> Result<FloatMap, DataError> {
    if bytes.len() < 4 || bytes[..4] != F32M_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < F32M_HEADER_LEN {
        return Err(DataError::Parse("truncated F32M header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| DataError::Parse("F32M dimensions overflow".into()))?;
    let payload = &bytes[F32M_HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(DataError::Parse(format!(
            "F32M payload has {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    FloatMap::new(w, h, c, data).map_err(|e| DataError::Parse(e.to_string()))
}

pub fn write_f32m(path: &Path, map: &FloatMap) -> Result<(), DataError> {
    fs::write(path, encode_f32m(map)).map_err(io_err(path))
}

pub fn read_f32m(path: &Path) -> Result<FloatMap, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_f32m(&bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DataError::Parse(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), DataError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32m_header_is_sixteen_bytes() {
        let map = FloatMap::new(3, 2, 2, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let bytes = encode_f32m(&map);
        assert_eq!(&bytes[..4], &[0x46, 0x33, 0x32, 0x4D]);
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 12 * 4);
        assert_eq!(decode_f32m(&bytes).unwrap(), map);
    }

    #[test]
    fn f32m_rejects_garbage() {
        assert!(matches!(decode_f32m(b"PNG\0aaaaaaaaaaaa"), Err(DataError::BadMagic)));
        assert!(matches!(decode_f32m(b"F32M\x01\0\0\0"), Err(DataError::Parse(_))));
        let mut bytes = encode_f32m(&FloatMap::filled(2, 2, 1, 1.0).unwrap());
        bytes.pop();
        assert!(matches!(decode_f32m(&bytes), Err(DataError::Parse(_))));
    }

    #[test]
    fn label_png_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let labels = InstanceLabelMap::new(2, 1, vec![1, 70000]).unwrap();
        let err = write_label_png(&dir.path().join("l.png"), &labels).unwrap_err();
        assert!(matches!(err, DataError::LabelOverflow { id: 70000 }));
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let labels = InstanceLabelMap::new(3, 2, vec![0, 1, 65535, 300, 2, 0]).unwrap();
        let p = dir.path().join("labels.png");
        write_label_png(&p, &labels).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), labels);

        let img = RgbImage::new(2, 2, (0..12).map(|v| v as u8 * 20).collect()).unwrap();
        let p = dir.path().join("img.png");
        write_rgb_png(&p, &img).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), img);
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn manifest_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.png", "b.png", "a_mask.png"] {
            fs::write(dir.path().join(f), b"x").unwrap();
        }
        let p = write_manifest(
            dir.path(),
            r#"{"name": "tiny", "entries": [
                {"id": "b", "image": "b.png", "split": "test"},
                {"id": "a", "image": "a.png", "mask": "a_mask.png", "organ": "liver", "split": "train"}
            ]}"#,
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].id, "b");
        assert_eq!(m.entries[1].organ.as_deref(), Some("liver"));
        assert_eq!(m.resolve(&m.entries[1].image), dir.path().join("a.png"));
        assert_eq!(m.split(Split::Train).count(), 1);
    }

    #[test]
    fn manifest_reports_all_problems() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"name": "bad", "entries": [
                {"id": "a", "image": "a.png", "split": "train"},
                {"id": "a", "image": "a.png", "split": "train"},
                {"id": "c", "image": "nope.png", "split": "test"}
            ]}"#,
        );
        match load_manifest(&p) {
            Err(DataError::Invalid(issues)) => {
                assert_eq!(issues.len(), 2);
                assert_eq!(issues[0], ManifestIssue::DuplicateId("a".into()));
                assert!(matches!(&issues[1], ManifestIssue::MissingFile { id, .. } if id == "c"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let p = write_manifest(dir.path(), r#"{"name": 1}"#);
        assert!(matches!(load_manifest(&p), Err(DataError::Parse(_))));
    }
}
