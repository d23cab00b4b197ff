//! Macenko color deconvolution for H&E images.
//!
//! Images are converted to optical density (OD), where the contribution of
//! each stain is additive: `od = s_h * v_h + s_e * v_e`. The two stain
//! directions are estimated from the angular extremes of the tissue OD cloud
//! projected onto its dominant plane, and normalization re-expresses the
//! per-pixel saturations of a source image in the basis and saturation scale
//! of a reference profile.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RgbImage;

/// Minimum number of tissue pixels needed to estimate a stain basis.
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Relative eigenvalue floor below which the OD cloud counts as single-stain.
const DEGENERATE_EIGEN_RATIO: f64 = 1e-9;

const PARALLEL_COS_LIMIT: f64 = 1.0 - 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StainError {
    #[error("invalid normalization parameters: {0}")]
    InvalidParams(String),
    #[error("too few tissue pixels: found {found}, need at least {required}")]
    TooFewTissuePixels { found: usize, required: usize },
    #[error("degenerate stain cloud: {0}")]
    DegenerateStainCloud(String),
    #[error("stain vectors are parallel or not unit length")]
    SingularBasis,
    #[error("saturation percentile of the {stain} channel is zero")]
    ZeroSaturation { stain: &'static str },
    #[error("stain profile error: {0}")]
    Profile(String),
}

/// Logarithm used for the OD transform. Decadic is the default; the natural
/// variant exists because normalization output does not depend on the base.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Decadic,
    Natural,
}

impl LogBase {
    fn is_decadic(&self) -> bool {
        *self == LogBase::Decadic
    }

    /// OD of one decade of attenuation in this base.
    fn unit(self) -> f64 {
        match self {
            LogBase::Decadic => 1.0,
            LogBase::Natural => std::f64::consts::LN_10,
        }
    }

    fn neg_log(self, ratio: f64) -> f64 {
        match self {
            LogBase::Decadic => -ratio.log10(),
            LogBase::Natural => -ratio.ln(),
        }
    }

    fn attenuation(self, od: f64) -> f64 {
        match self {
            LogBase::Decadic => 10f64.powf(-od),
            LogBase::Natural => (-od).exp(),
        }
    }
}

/// Constants of the Macenko procedure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    /// Transmitted intensity of an empty (white) background, 8-bit scale.
    #[serde(rename = "Io")]
    pub io: f64,
    /// OD threshold separating tissue from background, in decadic OD units.
    pub beta: f64,
    /// Percentile (and 100 minus it) of the angle distribution taken as the
    /// stain directions.
    pub alpha: f64,
    /// Percentile of the per-stain saturations used as the saturation scale.
    pub sat_percentile: f64,
    #[serde(default, skip_serializing_if = "LogBase::is_decadic")]
    pub log_base: LogBase,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self { io: 255.0, beta: 0.15, alpha: 1.0, sat_percentile: 99.0, log_base: LogBase::Decadic }
    }
}

impl NormalizationParams {
    /// Largest representable OD, reached at an intensity of 1.
    pub fn od_max(&self) -> f64 {
        self.log_base.neg_log(1.0 / self.io)
    }

    pub fn validate(&self) -> Result<(), StainError> {
        let bad = |msg: String| Err(StainError::InvalidParams(msg));
        if !(1.0..=255.0).contains(&self.io) {
            return bad(format!("Io must lie in [1, 255], got {}", self.io));
        }
        let od_max_decadic = -(1.0 / self.io).log10();
        if !(self.beta > 0.0 && self.beta < od_max_decadic) {
            return bad(format!("beta must lie in (0, {od_max_decadic}), got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha < 50.0) {
            return bad(format!("alpha must lie in (0, 50), got {}", self.alpha));
        }
        if !(self.sat_percentile > 50.0 && self.sat_percentile <= 100.0) {
            return bad(format!("sat_percentile must lie in (50, 100], got {}", self.sat_percentile));
        }
        Ok(())
    }

    fn tissue_threshold(&self) -> f64 {
        self.beta * self.log_base.unit()
    }
}

/// Three-channel optical density image.
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, channel-interleaved OD values.
    pub data: Vec<f64>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, StainError> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(StainError::InvalidParams(format!(
                "OD image of {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(StainError::InvalidParams("OD values must be finite and non-negative".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

/// Unit OD-space directions of hematoxylin and eosin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainBasis {
    h: [f64; 3],
    e: [f64; 3],
    // Rows of the least-squares pseudo-inverse (V^T V)^-1 V^T.
    pinv: [[f64; 3]; 2],
}

impl StainBasis {
    /// Build a basis from two directions. Both are normalized to unit length;
    /// they must be non-negative and not parallel.
    pub fn new(h: [f64; 3], e: [f64; 3]) -> Result<Self, StainError> {
        let h = keep_unit(h).ok_or(StainError::SingularBasis)?;
        let e = keep_unit(e).ok_or(StainError::SingularBasis)?;
        if h.iter().chain(e.iter()).any(|&c| c < 0.0) {
            return Err(StainError::InvalidParams("stain vectors must be non-negative".into()));
        }
        let pinv = pseudo_inverse(&h, &e).ok_or(StainError::SingularBasis)?;
        Ok(Self { h, e, pinv })
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.h
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.e
    }

    /// Least-squares saturations of one OD pixel, before clamping.
    pub fn unmix(&self, od: [f64; 3]) -> [f64; 2] {
        [dot(&self.pinv[0], &od), dot(&self.pinv[1], &od)]
    }

    /// OD pixel composed from saturations.
    pub fn mix(&self, sat: [f64; 2]) -> [f64; 3] {
        [
            sat[0] * self.h[0] + sat[1] * self.e[0],
            sat[0] * self.h[1] + sat[1] * self.e[1],
            sat[0] * self.h[2] + sat[1] * self.e[2],
        ]
    }
}

/// Per-pixel stain saturations.
#[derive(Clone, Debug, PartialEq)]
pub struct SaturationMap {
    pub width: usize,
    pub height: usize,
    pub hematoxylin: Vec<f64>,
    pub eosin: Vec<f64>,
}

/// Target of normalization: a reference image's stain basis and saturation scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceProfile {
    pub source_id: String,
    pub basis: StainBasis,
    /// Saturation percentiles of (hematoxylin, eosin) on the reference image.
    pub max_sat: [f64; 2],
    pub params: NormalizationParams,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    source_id: String,
    #[serde(rename = "vH")]
    v_h: [f64; 3],
    #[serde(rename = "vE")]
    v_e: [f64; 3],
    max_sat: [f64; 2],
    params: NormalizationParams,
}

impl ReferenceProfile {
    /// Serialize to JSON with every float printed at 17 significant digits.
    pub fn to_json(&self) -> String {
        let vec = |v: &[f64]| v.iter().map(|&x| format_g17(x)).collect::<Vec<_>>().join(", ");
        let p = &self.params;
        let mut params = format!(
            "\"Io\": {}, \"beta\": {}, \"alpha\": {}, \"sat_percentile\": {}",
            format_g17(p.io),
            format_g17(p.beta),
            format_g17(p.alpha),
            format_g17(p.sat_percentile)
        );
        if p.log_base == LogBase::Natural {
            params.push_str(", \"log_base\": \"natural\"");
        }
        format!(
            "{{\n  \"source_id\": {},\n  \"vH\": [{}],\n  \"vE\": [{}],\n  \"max_sat\": [{}],\n  \"params\": {{{}}}\n}}\n",
            serde_json::Value::String(self.source_id.clone()),
            vec(&self.basis.h),
            vec(&self.basis.e),
            vec(&self.max_sat),
            params
        )
    }

    pub fn from_json(text: &str) -> Result<Self, StainError> {
        let rec: ProfileRecord =
            serde_json::from_str(text).map_err(|e| StainError::Profile(e.to_string()))?;
        rec.params.validate()?;
        let basis = StainBasis::new(rec.v_h, rec.v_e)?;
        if !(rec.max_sat[0] > 0.0 && rec.max_sat[1] > 0.0) {
            return Err(StainError::Profile("max_sat must be positive".into()));
        }
        Ok(Self { source_id: rec.source_id, basis, max_sat: rec.max_sat, params: rec.params })
    }
}

/// `od = -log(max(v, 1) / Io)` per channel, floored at zero.
pub fn rgb_to_od(img: &RgbImage, params: &NormalizationParams) -> OdImage {
    let lut = od_table(params);
    let data = img.data().iter().map(|&v| lut[v as usize]).collect();
    OdImage { width: img.width(), height: img.height(), data }
}

fn od_table(params: &NormalizationParams) -> [f64; 256] {
    let mut lut = [0.0; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        let v = (v as f64).max(1.0);
        // Intensities brighter than Io carry no stain.
        *slot = params.log_base.neg_log(v / params.io).max(0.0);
    }
    lut
}

/// `v = clamp(round_half_up(Io * base^-od), 0, 255)` per channel.
pub fn od_to_rgb(od: &OdImage, params: &NormalizationParams) -> RgbImage {
    let data = od.data.par_iter().map(|&d| od_sample_to_u8(d, params)).collect();
    RgbImage::new(od.width, od.height, data).expect("OD image dimensions are valid")
}

fn od_sample_to_u8(od: f64, params: &NormalizationParams) -> u8 {
    let v = params.io * params.log_base.attenuation(od);
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Estimate the hematoxylin and eosin directions of an OD image.
pub fn estimate_stain_basis(
    od: &OdImage,
    params: &NormalizationParams,
) -> Result<StainBasis, StainError> {
    params.validate()?;
    let threshold = params.tissue_threshold();
    let tissue: Vec<[f64; 3]> = od
        .pixels()
        .filter(|p| p.iter().copied().fold(0.0, f64::max) > threshold)
        .collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(StainError::TooFewTissuePixels {
            found: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }

    let mut moment = Matrix3::<f64>::zeros();
    for p in &tissue {
        let v = Vector3::from(*p);
        moment += v * v.transpose();
    }
    moment /= tissue.len() as f64;

    let (e1, e2) = dominant_plane(moment)?;

    let mut angles: Vec<f64> =
        tissue.iter().map(|p| dot(p, &e2).atan2(dot(p, &e1))).collect();
    angles.sort_unstable_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, params.alpha);
    let hi = percentile_sorted(&angles, 100.0 - params.alpha);

    let from_angle = |phi: f64| -> [f64; 3] {
        let (s, c) = phi.sin_cos();
        [c * e1[0] + s * e2[0], c * e1[1] + s * e2[1], c * e1[2] + s * e2[2]]
    };
    let a = positive_direction(from_angle(lo)).ok_or_else(|| {
        StainError::DegenerateStainCloud("extreme stain direction has no positive part".into())
    })?;
    let b = positive_direction(from_angle(hi)).ok_or_else(|| {
        StainError::DegenerateStainCloud("extreme stain direction has no positive part".into())
    })?;
    if dot(&a, &b).abs() >= PARALLEL_COS_LIMIT {
        return Err(StainError::DegenerateStainCloud("extreme stain directions coincide".into()));
    }
    let (h, e) = order_h_e(a, b);
    StainBasis::new(h, e)
}

/// Unit eigenvectors of the two largest eigenvalues, with fixed signs.
fn dominant_plane(moment: Matrix3<f64>) -> Result<([f64; 3], [f64; 3]), StainError> {
    let eig = SymmetricEigen::new(moment);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 < DEGENERATE_EIGEN_RATIO * l1 {
        return Err(StainError::DegenerateStainCloud(format!(
            "second moment eigenvalue {l2:e} is negligible against {l1:e}"
        )));
    }
    let col = |k: usize| {
        let c = eig.eigenvectors.column(order[k]);
        [c[0], c[1], c[2]]
    };
    let mut e1 = col(0);
    if e1.iter().sum::<f64>() < 0.0 {
        e1 = neg(e1);
    }
    let mut e2 = col(1);
    let lead = e2
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if lead < 0.0 {
        e2 = neg(e2);
    }
    Ok((e1, e2))
}

fn positive_direction(v: [f64; 3]) -> Option<[f64; 3]> {
    let v = if v.iter().sum::<f64>() < 0.0 { neg(v) } else { v };
    unit([v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)])
}

/// Hematoxylin absorbs more red than eosin, so it is the direction with the
/// larger red OD component. Near-ties fall back to the smaller green component.
fn order_h_e(a: [f64; 3], b: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a_first = if (a[0] - b[0]).abs() < 1e-9 { a[1] <= b[1] } else { a[0] > b[0] };
    if a_first {
        (a, b)
    } else {
        (b, a)
    }
}

/// Least-squares saturations per pixel, clamped to be non-negative.
pub fn compute_saturations(od: &OdImage, basis: &StainBasis) -> Result<SaturationMap, StainError> {
    // Recheck the basis in case it was assembled by hand.
    if pseudo_inverse(&basis.h, &basis.e).is_none() {
        return Err(StainError::SingularBasis);
    }
    let (hematoxylin, eosin) = od
        .data
        .par_chunks_exact(3)
        .map(|p| {
            let s = basis.unmix([p[0], p[1], p[2]]);
            (s[0].max(0.0), s[1].max(0.0))
        })
        .unzip();
    Ok(SaturationMap { width: od.width, height: od.height, hematoxylin, eosin })
}

fn saturation_scale(sat: &SaturationMap, percentile: f64) -> [f64; 2] {
    let pct = |values: &[f64]| {
        let mut v = values.to_vec();
        v.sort_unstable_by(f64::total_cmp);
        percentile_sorted(&v, percentile)
    };
    [pct(&sat.hematoxylin), pct(&sat.eosin)]
}

fn check_scale(scale: [f64; 2]) -> Result<(), StainError> {
    if !(scale[0] > 0.0) {
        return Err(StainError::ZeroSaturation { stain: "hematoxylin" });
    }
    if !(scale[1] > 0.0) {
        return Err(StainError::ZeroSaturation { stain: "eosin" });
    }
    Ok(())
}

pub fn build_reference_profile(
    img: &RgbImage,
    source_id: impl Into<String>,
    params: &NormalizationParams,
) -> Result<ReferenceProfile, StainError> {
    let od = rgb_to_od(img, params);
    let basis = estimate_stain_basis(&od, params)?;
    let sat = compute_saturations(&od, &basis)?;
    let max_sat = saturation_scale(&sat, params.sat_percentile);
    check_scale(max_sat)?;
    Ok(ReferenceProfile { source_id: source_id.into(), basis, max_sat, params: *params })
}

/// Re-express `src` in the stain basis and saturation scale of `reference`.
pub fn normalize_to_reference(
    src: &RgbImage,
    reference: &ReferenceProfile,
    params: &NormalizationParams,
) -> Result<RgbImage, StainError> {
    let od = rgb_to_od(src, params);
    let basis = estimate_stain_basis(&od, params)?;
    let sat = compute_saturations(&od, &basis)?;
    let src_scale = saturation_scale(&sat, params.sat_percentile);
    check_scale(src_scale)?;

    // The profile's saturations are expressed in its own log base.
    let to_src_units = params.log_base.unit() / reference.params.log_base.unit();
    let gain = [
        reference.max_sat[0] * to_src_units / src_scale[0],
        reference.max_sat[1] * to_src_units / src_scale[1],
    ];
    let target = &reference.basis;
    let data = sat
        .hematoxylin
        .par_iter()
        .zip(sat.eosin.par_iter())
        .flat_map_iter(|(&sh, &se)| {
            let o = target.mix([sh * gain[0], se * gain[1]]);
            o.map(|d| od_sample_to_u8(d, params))
        })
        .collect();
    Ok(RgbImage::new(src.width(), src.height(), data).expect("dimensions preserved"))
}

/// Percentile of an ascending slice with linear interpolation between order
/// statistics. `p` is in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty slice");
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Format like C's `%.17g`: 17 significant digits, trailing zeros trimmed.
pub fn format_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..17).contains(&exp) {
        return format!("{sign}{}e{exp}", trim(mantissa));
    }
    let body = if exp < 0 {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    } else {
        let point = exp as usize + 1;
        format!("{}.{}", &digits[..point], &digits[point..])
    };
    format!("{sign}{}", trim(&body))
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn neg(v: [f64; 3]) -> [f64; 3] {
    [-v[0], -v[1], -v[2]]
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(&v, &v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    Some([v[0] / n, v[1] / n, v[2] / n])
}

/// Like [`unit`], but leaves vectors that are already unit length untouched
/// so that serialized bases reload bit-identically.
fn keep_unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(&v, &v).sqrt();
    if (n - 1.0).abs() <= 1e-12 {
        return Some(v);
    }
    unit(v)
}

fn pseudo_inverse(h: &[f64; 3], e: &[f64; 3]) -> Option<[[f64; 3]; 2]> {
    let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
    let det = hh * ee - he * he;
    if det.abs() < 1e-12 || (he / (hh * ee).sqrt()).abs() >= PARALLEL_COS_LIMIT {
        return None;
    }
    let inv = [[ee / det, -he / det], [-he / det, hh / det]];
    let row = |r: [f64; 2]| -> [f64; 3] {
        [r[0] * h[0] + r[1] * e[0], r[0] * h[1] + r[1] * e[1], r[0] * h[2] + r[1] * e[2]]
    };
    Some([row(inv[0]), row(inv[1])])
}
