//! Stain-normalization augmentation, test-time stain ensembling and
//! watershed post-processing for nuclear instance segmentation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod augment;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod postprocess;
pub mod predictor;
pub mod raster;
pub mod reference;
pub mod stain;
pub mod synth;
pub mod tta;

pub use raster::{FloatMap, InstanceLabelMap, Orientation, RgbImage};
pub use stain::{NormalizationParams, ReferenceProfile, StainBasis};
