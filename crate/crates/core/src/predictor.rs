//! Boundary to the trained segmentation model.
//!
//! The toolkit never runs a network itself. Predictions come either from a
//! directory of precomputed F32M maps named `<image_id>__<variant_id>.f32m`,
//! or from an external command invoked once per variant.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_f32m, write_rgb_png, DataError};
use crate::raster::{FloatMap, RgbImage};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("prediction for {image_id} variant {variant_id} not found at {path}")]
    MissingMap { image_id: String, variant_id: String, path: PathBuf },
    #[error("prediction for {image_id} variant {variant_id} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        image_id: String,
        variant_id: String,
        expected: (usize, usize),
        got: (usize, usize, usize),
    },
    #[error("predictor command failed for {image_id} variant {variant_id}: {message}")]
    Command { image_id: String, variant_id: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Anything that maps an input tile to a multi-channel prediction of the same
/// spatial size.
pub trait Predictor: Sync {
    fn predict(&self, image_id: &str, variant_id: &str, img: &RgbImage) -> Result<FloatMap, PredictorError>;
}

/// Where predictions come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSource {
    MapDirectory { dir: PathBuf },
    /// Whitespace-separated argv template. `{input}` is replaced by the path
    /// of the variant PNG, `{output}` by the F32M path the command must write;
    /// `{image_id}` and `{variant_id}` are also substituted.
    ExternalCommand { template: String },
}

/// A configured predictor and the channel layout of its output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorHandle {
    #[serde(flatten)]
    pub source: PredictorSource,
    #[serde(default)]
    pub probability_channel: usize,
    #[serde(default = "default_distance_channel")]
    pub distance_channel: usize,
}

fn default_distance_channel() -> usize {
    1
}

impl PredictorHandle {
    pub fn map_directory(dir: impl Into<PathBuf>) -> Self {
        Self {
            source: PredictorSource::MapDirectory { dir: dir.into() },
            probability_channel: 0,
            distance_channel: 1,
        }
    }

    pub fn external_command(template: impl Into<String>) -> Self {
        Self {
            source: PredictorSource::ExternalCommand { template: template.into() },
            probability_channel: 0,
            distance_channel: 1,
        }
    }

    /// Parse a CLI spec: `map-dir:<path>` or `cmd:<template>`.
    pub fn parse(spec: &str) -> Option<Self> {
        if let Some(dir) = spec.strip_prefix("map-dir:") {
            Some(Self::map_directory(dir))
        } else {
            spec.strip_prefix("cmd:").map(Self::external_command)
        }
    }

    pub fn map_file(dir: &Path, image_id: &str, variant_id: &str) -> PathBuf {
        dir.join(format!("{image_id}__{variant_id}.f32m"))
    }

    fn check_shape(
        map: FloatMap,
        image_id: &str,
        variant_id: &str,
        img: &RgbImage,
    ) -> Result<FloatMap, PredictorError> {
        if map.width() != img.width() || map.height() != img.height() {
            return Err(PredictorError::ShapeMismatch {
                image_id: image_id.into(),
                variant_id: variant_id.into(),
                expected: (img.width(), img.height()),
                got: (map.width(), map.height(), map.channels()),
            });
        }
        Ok(map)
    }

    fn run_command(
        &self,
        template: &str,
        image_id: &str,
        variant_id: &str,
        img: &RgbImage,
    ) -> Result<FloatMap, PredictorError> {
        let fail = |message: String| PredictorError::Command {
            image_id: image_id.into(),
            variant_id: variant_id.into(),
            message,
        };
        let scratch = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        let input = scratch.path().join(format!("{image_id}__{variant_id}.png"));
        let output = scratch.path().join(format!("{image_id}__{variant_id}.f32m"));
        write_rgb_png(&input, img)?;
        let argv: Vec<String> = template
            .split_whitespace()
            .map(|tok| {
                tok.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
                    .replace("{image_id}", image_id)
                    .replace("{variant_id}", variant_id)
            })
            .collect();
        let (program, args) = argv.split_first().ok_or_else(|| fail("empty command template".into()))?;
        let out = Command::new(program).args(args).output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(read_f32m(&output)?)
    }
}

impl Predictor for PredictorHandle {
    fn predict(&self, image_id: &str, variant_id: &str, img: &RgbImage) -> Result<FloatMap, PredictorError> {
        let map = match &self.source {
            PredictorSource::MapDirectory { dir } => {
                let path = Self::map_file(dir, image_id, variant_id);
                if !path.is_file() {
                    return Err(PredictorError::MissingMap {
                        image_id: image_id.into(),
                        variant_id: variant_id.into(),
                        path,
                    });
                }
                read_f32m(&path)?
            }
            PredictorSource::ExternalCommand { template } => {
                self.run_command(template, image_id, variant_id, img)?
            }
        };
        Self::check_shape(map, image_id, variant_id, img)
    }
}

impl<F> Predictor for F
where
    F: Fn(&RgbImage) -> FloatMap + Sync,
{
    fn predict(&self, _image_id: &str, _variant_id: &str, img: &RgbImage) -> Result<FloatMap, PredictorError> {
        Ok(self(img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_f32m;

    #[test]
    fn map_directory_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::filled(4, 3, [200, 100, 150]).unwrap();
        let map = FloatMap::filled(4, 3, 2, 0.25).unwrap();
        write_f32m(&PredictorHandle::map_file(dir.path(), "img1", "v0"), &map).unwrap();
        let handle = PredictorHandle::map_directory(dir.path());
        assert_eq!(handle.predict("img1", "v0", &img).unwrap(), map);
        assert!(matches!(handle.predict("img1", "v1", &img), Err(PredictorError::MissingMap { .. })));
        let small = RgbImage::filled(2, 2, [0, 0, 0]).unwrap();
        assert!(matches!(
            handle.predict("img1", "v0", &small),
            Err(PredictorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn handle_parsing_and_json() {
        let h = PredictorHandle::parse("cmd:python3 predict.py {input} {output}").unwrap();
        assert!(matches!(h.source, PredictorSource::ExternalCommand { .. }));
        assert!(PredictorHandle::parse("nonsense").is_none());
        let json = serde_json::to_string(&PredictorHandle::map_directory("maps")).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"map_directory","dir":"maps","probability_channel":0,"distance_channel":1}"#
        );
        let back: PredictorHandle = serde_json::from_str(r#"{"kind":"map_directory","dir":"m"}"#).unwrap();
        assert_eq!(back.distance_channel, 1);
    }

    #[test]
    fn failing_command_is_reported() {
        let img = RgbImage::filled(2, 2, [0, 0, 0]).unwrap();
        let handle = PredictorHandle::external_command("false {input} {output}");
        match handle.predict("a", "v0", &img) {
            Err(PredictorError::Command { variant_id, .. }) => assert_eq!(variant_id, "v0"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
