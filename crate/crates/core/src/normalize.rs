//! Per-sensor pixel normalization.
//!
//! Radar tiles arrive in decibels and are clipped to [-20 dB, 5 dB] then
//! scaled linearly onto [0, 255]. Optical tiles arrive as scaled-reflectance
//! digital numbers; a linear map would compress the useful range because
//! cloudy pixels carry very large values, so they get a logarithmic curve
//! instead: 255 * clamp(ln(1+x) / ln(1+hi_dn), 0, 1) with hi_dn = 10000.
//!
//! The same normalization is applied to pre-training and downstream data,
//! exactly once per tile; each tile records the id of the normalization it
//! carries. Outputs stay floating point in [0, 255]; the model input layer
//! divides by 255.

use crate::datamodel::{Modality, Tile};
use crate::{Error, Result};

pub const S1_LO_DB: f64 = -20.0;
pub const S1_HI_DB: f64 = 5.0;
pub const S2_HI_DN: f64 = 10_000.0;

pub const S1_NORMALIZATION_ID: &str = "s1_db_clip_-20_5";
pub const S2_NORMALIZATION_ID: &str = "s2_log_10000";
/// Manifest id for tiles still in raw sensor units.
pub const RAW_ID: &str = "raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    ClipLinear,
    LogScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSpec {
    pub id: String,
    pub kind: NormalizationKind,
    pub lo: f64,
    pub hi: f64,
}

impl NormalizationSpec {
    pub fn s1_default() -> Self {
        NormalizationSpec {
            id: S1_NORMALIZATION_ID.into(),
            kind: NormalizationKind::ClipLinear,
            lo: S1_LO_DB,
            hi: S1_HI_DB,
        }
    }

    pub fn s2_default() -> Self {
        NormalizationSpec {
            id: S2_NORMALIZATION_ID.into(),
            kind: NormalizationKind::LogScale,
            lo: 0.0,
            hi: S2_HI_DN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "normalization {}: lo {} must be < hi {}",
                self.id, self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// 255 * clamp((x - lo) / (hi - lo), 0, 1).
#[inline]
pub fn clip_linear_value(x: f64, lo: f64, hi: f64) -> f64 {
    255.0 * ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// 255 * clamp(ln(1+x) / ln(1+hi_dn), 0, 1); negative x treated as 0.
#[inline]
pub fn log_scale_value(x: f64, hi_dn: f64) -> f64 {
    let x = x.max(0.0);
    255.0 * (x.ln_1p() / hi_dn.ln_1p()).clamp(0.0, 1.0)
}

/// Elementwise clip-linear map of a pixel slice; errors on non-finite input
/// or an empty range.
pub fn clip_linear_scale(values: &[f32], lo: f64, hi: f64) -> Result<Vec<f32>> {
    if !(lo < hi) {
        return Err(Error::Config(format!("clip range lo {lo} must be < hi {hi}")));
    }
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("clip_linear_scale input".into()));
        }
        out.push(clip_linear_value(f64::from(v), lo, hi) as f32);
    }
    Ok(out)
}

fn check_not_normalized(tile: &Tile) -> Result<()> {
    if let Some(id) = &tile.normalization {
        return Err(Error::Validation(format!(
            "tile already carries normalization {id:?}; normalization must be applied exactly once"
        )));
    }
    Ok(())
}

/// Normalize a radar tile from decibels onto [0, 255].
pub fn normalize_s1(tile: &Tile) -> Result<Tile> {
    if tile.modality != Modality::S1 {
        return Err(Error::Validation(format!(
            "normalize_s1 expects an S1 tile, got {}",
            tile.modality
        )));
    }
    check_not_normalized(tile)?;
    let mut out = tile.clone();
    for v in out.pixels.iter_mut() {
        if !v.is_finite() {
            return Err(Error::NonFinite("normalize_s1 input pixel".into()));
        }
        *v = clip_linear_value(f64::from(*v), S1_LO_DB, S1_HI_DB) as f32;
    }
    out.normalization = Some(S1_NORMALIZATION_ID.into());
    Ok(out)
}

/// Normalize an optical tile from digital numbers onto [0, 255].
///
/// Returns the normalized tile and the number of negative input pixels that
/// were clamped to zero before the log.
pub fn normalize_s2(tile: &Tile, hi_dn: f64) -> Result<(Tile, usize)> {
    if tile.modality != Modality::S2 {
        return Err(Error::Validation(format!(
            "normalize_s2 expects an S2 tile, got {}",
            tile.modality
        )));
    }
    if !(hi_dn > 0.0) {
        return Err(Error::Config(format!("hi_dn {hi_dn} must be positive")));
    }
    check_not_normalized(tile)?;
    let mut out = tile.clone();
    let mut clamped = 0usize;
    for v in out.pixels.iter_mut() {
        if !v.is_finite() {
            return Err(Error::NonFinite("normalize_s2 input pixel".into()));
        }
        if *v < 0.0 {
            clamped += 1;
        }
        *v = log_scale_value(f64::from(*v), hi_dn) as f32;
    }
    out.normalization = Some(if hi_dn == S2_HI_DN {
        S2_NORMALIZATION_ID.to_string()
    } else {
        format!("s2_log_{hi_dn}")
    });
    Ok((out, clamped))
}

/// Normalize either modality with its default spec.
pub fn normalize_tile(tile: &Tile) -> Result<Tile> {
    match tile.modality {
        Modality::S1 => normalize_s1(tile),
        Modality::S2 => normalize_s2(tile, S2_HI_DN).map(|(t, _)| t),
    }
}
