//! Core domain types and their on-disk formats.
//!
//! A tile is stored as a raw little-endian f32 payload plus a text sidecar
//! (`<uri>.meta`) holding every metadata field; label maps use a u8 payload
//! with the same sidecar convention. Both formats are bit-exact round trips.
//! Manifests are line-oriented text: one header line, then one entry per
//! line, with `key=value` tokens throughout.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::{Error, Result};

/// Geographic tolerance, in degrees, for "same location" (about 0.1 m).
pub const EPS_GEO_DEG: f64 = 1e-6;
/// Pairing window: a scene may precede its anchor by at most this much.
pub const PAIR_WINDOW_S: i64 = 30 * 86_400;
/// Downstream join window, symmetric around the labeled scene.
pub const DOWNSTREAM_WINDOW_S: i64 = 90 * 86_400;
/// Maximum cloud fraction accepted for optical scenes in a pair.
pub const MAX_PAIR_CLOUD: f64 = 0.15;
/// Label value meaning "no ground truth at this pixel".
pub const IGNORE_INDEX: u8 = 255;

pub const S1_CHANNEL_NAMES: [&str; 2] = ["VV", "VH"];
pub const S2_CHANNEL_NAMES: [&str; 3] = ["B4", "B3", "B2"];

// ---- modality ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    S1,
    S2,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::S1 => 2,
            Modality::S2 => 3,
        }
    }

    pub fn channel_names(self) -> Vec<String> {
        match self {
            Modality::S1 => S1_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            Modality::S2 => S2_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::S1 => write!(f, "S1"),
            Modality::S2 => write!(f, "S2"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" => Ok(Modality::S1),
            "S2" => Ok(Modality::S2),
            other => Err(Error::Validation(format!("unknown modality {other:?}"))),
        }
    }
}

// ---- tile ----

/// One sensor image: pixels H×W×C plus geo/time/cloud metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub modality: Modality,
    /// Row-major H×W×C.
    pub pixels: Array3<f32>,
    pub channel_names: Vec<String>,
    pub center_lat: f64,
    pub center_lon: f64,
    pub resolution_m: f64,
    /// UTC seconds.
    pub timestamp: i64,
    /// In [0,1]; always 0 for radar.
    pub cloud_fraction: f64,
    /// Id of the normalization already applied, if any. `None` = raw sensor
    /// units. Guards against normalizing twice.
    pub normalization: Option<String>,
}

impl Tile {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        if h == 0 || w == 0 {
            return Err(Error::Validation(format!("empty tile {h}x{w}")));
        }
        if c != self.modality.channels() {
            return Err(Error::Validation(format!(
                "modality {} requires {} channels, tile has {c}",
                self.modality,
                self.modality.channels()
            )));
        }
        if self.channel_names != self.modality.channel_names() {
            return Err(Error::Validation(format!(
                "modality {} requires channel names {:?}, tile has {:?}",
                self.modality,
                self.modality.channel_names(),
                self.channel_names
            )));
        }
        if !(0.0..=1.0).contains(&self.cloud_fraction) {
            return Err(Error::Validation(format!(
                "cloud_fraction {} outside [0,1]",
                self.cloud_fraction
            )));
        }
        if self.modality == Modality::S1 && self.cloud_fraction != 0.0 {
            return Err(Error::Validation(
                "radar tiles must carry cloud_fraction 0".into(),
            ));
        }
        if self.center_lat.abs() > 90.0 || self.center_lon.abs() > 180.0 {
            return Err(Error::Validation(format!(
                "center ({}, {}) outside valid lat/lon range",
                self.center_lat, self.center_lon
            )));
        }
        if !self.resolution_m.is_finite() || self.resolution_m <= 0.0 {
            return Err(Error::Validation(format!(
                "resolution_m {} must be positive",
                self.resolution_m
            )));
        }
        Ok(())
    }
}

// ---- sidecar helpers ----

const TILE_MAGIC: &str = "twinsat-tile v1";
const LABELS_MAGIC: &str = "twinsat-labels v1";
const MANIFEST_MAGIC: &str = "twinsat-manifest";

fn sidecar_path(uri: &Path) -> PathBuf {
    let mut s = uri.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse `key: value` sidecar lines after the magic line.
fn parse_sidecar<'a>(
    path: &Path,
    text: &'a str,
    magic: &str,
) -> Result<Vec<(&'a str, &'a str)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == magic => {}
        Some(l) => return Err(Error::parse(path, format!("expected {magic:?}, found {l:?}"))),
        None => return Err(Error::parse(path, "empty sidecar")),
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::parse(path, format!("bad sidecar line {line:?}")))?;
        out.push((k, v));
    }
    Ok(out)
}

fn field<'a>(path: &Path, fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::parse(path, format!("missing sidecar field {key:?}")))
}

fn parse_num<T: FromStr>(path: &Path, key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::parse(path, format!("field {key}={v:?}: {e}")))
}

// ---- tile io ----

/// Write `tile` as payload at `uri` plus sidecar at `uri.meta`.
pub fn write_tile(tile: &Tile, uri: &Path) -> Result<()> {
    tile.validate()?;
    let mut payload = Vec::with_capacity(tile.pixels.len() * 4);
    for v in tile.pixels.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(uri, &payload)?;

    let mut meta = String::new();
    meta.push_str(TILE_MAGIC);
    meta.push('\n');
    meta.push_str(&format!("modality: {}\n", tile.modality));
    meta.push_str(&format!("height: {}\n", tile.height()));
    meta.push_str(&format!("width: {}\n", tile.width()));
    meta.push_str(&format!("channels: {}\n", tile.channels()));
    meta.push_str(&format!("channel_names: {}\n", tile.channel_names.join(",")));
    meta.push_str("dtype: f32le\n");
    meta.push_str(&format!("center_lat: {}\n", tile.center_lat));
    meta.push_str(&format!("center_lon: {}\n", tile.center_lon));
    meta.push_str(&format!("resolution_m: {}\n", tile.resolution_m));
    meta.push_str(&format!("timestamp: {}\n", tile.timestamp));
    meta.push_str(&format!("cloud_fraction: {}\n", tile.cloud_fraction));
    if let Some(id) = &tile.normalization {
        meta.push_str(&format!("normalization: {id}\n"));
    }
    write_bytes(&sidecar_path(uri), meta.as_bytes())
}

/// Read a tile written by [`write_tile`]; bit-exact inverse.
pub fn read_tile(uri: &Path) -> Result<Tile> {
    let meta_path = sidecar_path(uri);
    let meta_text = read_to_string(&meta_path)?;
    let fields = parse_sidecar(&meta_path, &meta_text, TILE_MAGIC)?;

    let known = [
        "modality",
        "height",
        "width",
        "channels",
        "channel_names",
        "dtype",
        "center_lat",
        "center_lon",
        "resolution_m",
        "timestamp",
        "cloud_fraction",
        "normalization",
    ];
    for (k, _) in &fields {
        if !known.contains(k) {
            return Err(Error::parse(&meta_path, format!("unknown sidecar field {k:?}")));
        }
    }

    let modality: Modality = field(&meta_path, &fields, "modality")?.parse()?;
    let h: usize = parse_num(&meta_path, "height", field(&meta_path, &fields, "height")?)?;
    let w: usize = parse_num(&meta_path, "width", field(&meta_path, &fields, "width")?)?;
    let c: usize = parse_num(&meta_path, "channels", field(&meta_path, &fields, "channels")?)?;
    let dtype = field(&meta_path, &fields, "dtype")?;
    if dtype != "f32le" {
        return Err(Error::parse(&meta_path, format!("unsupported dtype {dtype:?}")));
    }
    let channel_names: Vec<String> = field(&meta_path, &fields, "channel_names")?
        .split(',')
        .map(|s| s.to_string())
        .collect();

    let mut payload = Vec::new();
    std::fs::File::open(uri)
        .and_then(|mut f| f.read_to_end(&mut payload))
        .map_err(|e| Error::io(uri, e))?;
    let expect = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(&meta_path, "dimension overflow"))?;
    if payload.len() != expect {
        return Err(Error::parse(
            uri,
            format!("payload holds {} bytes, metadata implies {expect}", payload.len()),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let pixels = Array3::from_shape_vec((h, w, c), values)
        .map_err(|e| Error::parse(uri, format!("shape error: {e}")))?;

    let tile = Tile {
        modality,
        pixels,
        channel_names,
        center_lat: parse_num(&meta_path, "center_lat", field(&meta_path, &fields, "center_lat")?)?,
        center_lon: parse_num(&meta_path, "center_lon", field(&meta_path, &fields, "center_lon")?)?,
        resolution_m: parse_num(
            &meta_path,
            "resolution_m",
            field(&meta_path, &fields, "resolution_m")?,
        )?,
        timestamp: parse_num(&meta_path, "timestamp", field(&meta_path, &fields, "timestamp")?)?,
        cloud_fraction: parse_num(
            &meta_path,
            "cloud_fraction",
            field(&meta_path, &fields, "cloud_fraction")?,
        )?,
        normalization: fields
            .iter()
            .find(|(k, _)| *k == "normalization")
            .map(|(_, v)| v.to_string()),
    };
    tile.validate()?;
    Ok(tile)
}

// ---- label map ----

/// Per-pixel class ids; `ignore_index` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub classes: Array2<u8>,
    pub num_classes: usize,
    pub ignore_index: u8,
}

impl LabelMap {
    pub fn new(classes: Array2<u8>, num_classes: usize) -> Result<Self> {
        let lm = LabelMap { classes, num_classes, ignore_index: IGNORE_INDEX };
        lm.validate()?;
        Ok(lm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > usize::from(u8::MAX) {
            return Err(Error::Validation(format!(
                "num_classes {} outside 1..=255",
                self.num_classes
            )));
        }
        for &v in self.classes.iter() {
            if v != self.ignore_index && usize::from(v) >= self.num_classes {
                return Err(Error::Validation(format!(
                    "label {v} outside [0,{}) and not ignore ({})",
                    self.num_classes, self.ignore_index
                )));
            }
        }
        Ok(())
    }
}

pub fn write_labels(labels: &LabelMap, uri: &Path) -> Result<()> {
    labels.validate()?;
    let payload: Vec<u8> = labels.classes.iter().copied().collect();
    write_bytes(uri, &payload)?;
    let (h, w) = labels.classes.dim();
    let meta = format!(
        "{LABELS_MAGIC}\nheight: {h}\nwidth: {w}\nnum_classes: {}\nignore_index: {}\n",
        labels.num_classes, labels.ignore_index
    );
    write_bytes(&sidecar_path(uri), meta.as_bytes())
}

pub fn read_labels(uri: &Path) -> Result<LabelMap> {
    let meta_path = sidecar_path(uri);
    let meta_text = read_to_string(&meta_path)?;
    let fields = parse_sidecar(&meta_path, &meta_text, LABELS_MAGIC)?;
    let h: usize = parse_num(&meta_path, "height", field(&meta_path, &fields, "height")?)?;
    let w: usize = parse_num(&meta_path, "width", field(&meta_path, &fields, "width")?)?;
    let num_classes: usize =
        parse_num(&meta_path, "num_classes", field(&meta_path, &fields, "num_classes")?)?;
    let ignore_index: u8 =
        parse_num(&meta_path, "ignore_index", field(&meta_path, &fields, "ignore_index")?)?;

    let mut payload = Vec::new();
    std::fs::File::open(uri)
        .and_then(|mut f| f.read_to_end(&mut payload))
        .map_err(|e| Error::io(uri, e))?;
    if payload.len() != h * w {
        return Err(Error::parse(
            uri,
            format!("payload holds {} bytes, metadata implies {}", payload.len(), h * w),
        ));
    }
    let classes = Array2::from_shape_vec((h, w), payload)
        .map_err(|e| Error::parse(uri, format!("shape error: {e}")))?;
    let lm = LabelMap { classes, num_classes, ignore_index };
    lm.validate()?;
    Ok(lm)
}

// ---- scene metadata ----

/// Catalog record describing one stored scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub scene_id: String,
    pub modality: Modality,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    pub cloud_fraction: f64,
    pub uri: String,
}

impl SceneMeta {
    pub fn validate(&self) -> Result<()> {
        if self.scene_id.is_empty() || self.scene_id.contains(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "scene_id {:?} must be non-empty and whitespace-free",
                self.scene_id
            )));
        }
        if self.uri.contains(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "uri {:?} must not contain whitespace",
                self.uri
            )));
        }
        if self.lat.abs() > 90.0 || self.lon.abs() > 180.0 {
            return Err(Error::Validation(format!(
                "scene {} at ({}, {}) outside valid range",
                self.scene_id, self.lat, self.lon
            )));
        }
        if !(0.0..=1.0).contains(&self.cloud_fraction) {
            return Err(Error::Validation(format!(
                "scene {} cloud_fraction {} outside [0,1]",
                self.scene_id, self.cloud_fraction
            )));
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        format!(
            "id={} modality={} lat={} lon={} timestamp={} cloud_fraction={} uri={}",
            self.scene_id,
            self.modality,
            self.lat,
            self.lon,
            self.timestamp,
            self.cloud_fraction,
            self.uri
        )
    }

    pub fn from_line(path: &Path, line: &str) -> Result<SceneMeta> {
        let mut id = None;
        let mut modality = None;
        let mut lat = None;
        let mut lon = None;
        let mut timestamp = None;
        let mut cloud = None;
        let mut uri = None;
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad catalog token {tok:?}")))?;
            match k {
                "id" => id = Some(v.to_string()),
                "modality" => modality = Some(v.parse()?),
                "lat" => lat = Some(parse_num(path, k, v)?),
                "lon" => lon = Some(parse_num(path, k, v)?),
                "timestamp" => timestamp = Some(parse_num(path, k, v)?),
                "cloud_fraction" => cloud = Some(parse_num(path, k, v)?),
                "uri" => uri = Some(v.to_string()),
                other => {
                    return Err(Error::parse(path, format!("unknown catalog key {other:?}")))
                }
            }
        }
        let missing = |k: &str| Error::parse(path, format!("catalog line missing {k}: {line:?}"));
        let meta = SceneMeta {
            scene_id: id.ok_or_else(|| missing("id"))?,
            modality: modality.ok_or_else(|| missing("modality"))?,
            lat: lat.ok_or_else(|| missing("lat"))?,
            lon: lon.ok_or_else(|| missing("lon"))?,
            timestamp: timestamp.ok_or_else(|| missing("timestamp"))?,
            cloud_fraction: cloud.ok_or_else(|| missing("cloud_fraction"))?,
            uri: uri.ok_or_else(|| missing("uri"))?,
        };
        meta.validate()?;
        Ok(meta)
    }
}

const CATALOG_MAGIC: &str = "twinsat-catalog v1";

pub fn write_catalog(scenes: &[SceneMeta], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CATALOG_MAGIC);
    out.push('\n');
    for s in scenes {
        s.validate()?;
        out.push_str(&s.to_line());
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_catalog(path: &Path) -> Result<Vec<SceneMeta>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(CATALOG_MAGIC) => {}
        other => {
            return Err(Error::parse(path, format!("expected {CATALOG_MAGIC:?}, found {other:?}")))
        }
    }
    let mut scenes = Vec::new();
    let mut seen = HashSet::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let meta = SceneMeta::from_line(path, line)?;
        if !seen.insert(meta.scene_id.clone()) {
            return Err(Error::Validation(format!("duplicate scene_id {}", meta.scene_id)));
        }
        scenes.push(meta);
    }
    Ok(scenes)
}

// ---- paired samples ----

/// Catalog-level pair: which scenes form a positive pair, and when.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScene {
    pub s1: SceneMeta,
    pub s2: SceneMeta,
    pub anchor_timestamp: i64,
    pub delta_t_s1: i64,
    pub delta_t_s2: i64,
}

impl PairedScene {
    pub fn validate(&self) -> Result<()> {
        self.s1.validate()?;
        self.s2.validate()?;
        if self.s1.modality != Modality::S1 || self.s2.modality != Modality::S2 {
            return Err(Error::Validation("pair modalities must be (S1, S2)".into()));
        }
        if (self.s1.lat - self.s2.lat).abs() > EPS_GEO_DEG
            || (self.s1.lon - self.s2.lon).abs() > EPS_GEO_DEG
        {
            return Err(Error::Validation(format!(
                "pair {}/{} not co-located",
                self.s1.scene_id, self.s2.scene_id
            )));
        }
        for (name, dt, t) in [
            ("s1", self.delta_t_s1, self.s1.timestamp),
            ("s2", self.delta_t_s2, self.s2.timestamp),
        ] {
            if dt != self.anchor_timestamp - t {
                return Err(Error::Validation(format!(
                    "{name} delta_t {dt} inconsistent with anchor {} and scene time {t}",
                    self.anchor_timestamp
                )));
            }
            if !(0..=PAIR_WINDOW_S).contains(&dt) {
                return Err(Error::Validation(format!(
                    "{name} delta_t {dt} outside [0, {PAIR_WINDOW_S}]"
                )));
            }
        }
        if self.s2.cloud_fraction > MAX_PAIR_CLOUD {
            return Err(Error::Validation(format!(
                "pair optical scene {} cloud_fraction {} exceeds {MAX_PAIR_CLOUD}",
                self.s2.scene_id, self.s2.cloud_fraction
            )));
        }
        Ok(())
    }
}

/// Fully loaded positive pair, ready for the training path.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub s1: Tile,
    pub s2: Tile,
    pub anchor_timestamp: i64,
    pub delta_t_s1: i64,
    pub delta_t_s2: i64,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        self.s1.validate()?;
        self.s2.validate()?;
        if self.s1.modality != Modality::S1 || self.s2.modality != Modality::S2 {
            return Err(Error::Validation("pair modalities must be (S1, S2)".into()));
        }
        if (self.s1.center_lat - self.s2.center_lat).abs() > EPS_GEO_DEG
            || (self.s1.center_lon - self.s2.center_lon).abs() > EPS_GEO_DEG
        {
            return Err(Error::Validation("pair tiles not co-located".into()));
        }
        for (name, dt) in [("s1", self.delta_t_s1), ("s2", self.delta_t_s2)] {
            if !(0..=PAIR_WINDOW_S).contains(&dt) {
                return Err(Error::Validation(format!(
                    "{name} delta_t {dt} outside [0, {PAIR_WINDOW_S}]"
                )));
            }
        }
        if self.s2.cloud_fraction > MAX_PAIR_CLOUD {
            return Err(Error::Validation(format!(
                "optical tile cloud_fraction {} exceeds {MAX_PAIR_CLOUD}",
                self.s2.cloud_fraction
            )));
        }
        Ok(())
    }
}

// ---- manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One dataset entry: tile uri(s), optional label uri, anchor time.
///
/// Uris are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub s1_uri: Option<String>,
    pub s2_uri: Option<String>,
    pub label_uri: Option<String>,
    pub anchor_timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub normalization_id: String,
    pub version: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "{MANIFEST_MAGIC} {} name={} split={} normalization={} entries={}\n",
            self.version,
            self.name,
            self.split,
            self.normalization_id,
            self.entries.len()
        ));
        for e in &self.entries {
            out.push_str(&format!("id={}", e.id));
            if let Some(u) = &e.s1_uri {
                out.push_str(&format!(" s1={u}"));
            }
            if let Some(u) = &e.s2_uri {
                out.push_str(&format!(" s2={u}"));
            }
            if let Some(u) = &e.label_uri {
                out.push_str(&format!(" label={u}"));
            }
            out.push_str(&format!(" anchor={}\n", e.anchor_timestamp));
        }
        write_bytes(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(path, "empty manifest"))?;
        let mut parts = header.split_whitespace();
        match parts.next() {
            Some(MANIFEST_MAGIC) => {}
            other => {
                return Err(Error::parse(
                    path,
                    format!("expected {MANIFEST_MAGIC:?}, found {other:?}"),
                ))
            }
        }
        let version = parts
            .next()
            .ok_or_else(|| Error::parse(path, "manifest header missing version"))?
            .to_string();
        let mut name = None;
        let mut split = None;
        let mut normalization = None;
        let mut count = None;
        for tok in parts {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad header token {tok:?}")))?;
            match k {
                "name" => name = Some(v.to_string()),
                "split" => split = Some(v.parse()?),
                "normalization" => normalization = Some(v.to_string()),
                "entries" => count = Some(parse_num::<usize>(path, k, v)?),
                other => return Err(Error::parse(path, format!("unknown header key {other:?}"))),
            }
        }
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut id = None;
            let mut s1_uri = None;
            let mut s2_uri = None;
            let mut label_uri = None;
            let mut anchor = None;
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::parse(path, format!("bad entry token {tok:?}")))?;
                match k {
                    "id" => id = Some(v.to_string()),
                    "s1" => s1_uri = Some(v.to_string()),
                    "s2" => s2_uri = Some(v.to_string()),
                    "label" => label_uri = Some(v.to_string()),
                    "anchor" => anchor = Some(parse_num::<i64>(path, k, v)?),
                    other => {
                        return Err(Error::parse(path, format!("unknown entry key {other:?}")))
                    }
                }
            }
            entries.push(ManifestEntry {
                id: id.ok_or_else(|| Error::parse(path, format!("entry missing id: {line:?}")))?,
                s1_uri,
                s2_uri,
                label_uri,
                anchor_timestamp: anchor
                    .ok_or_else(|| Error::parse(path, format!("entry missing anchor: {line:?}")))?,
            });
        }
        let manifest = DatasetManifest {
            name: name.ok_or_else(|| Error::parse(path, "header missing name"))?,
            split: split.ok_or_else(|| Error::parse(path, "header missing split"))?,
            normalization_id: normalization
                .ok_or_else(|| Error::parse(path, "header missing normalization"))?,
            version,
            entries,
        };
        let declared = count.ok_or_else(|| Error::parse(path, "header missing entries"))?;
        if declared != manifest.entries.len() {
            return Err(Error::parse(
                path,
                format!("header declares {declared} entries, found {}", manifest.entries.len()),
            ));
        }
        Ok(manifest)
    }
}

/// One problem found by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestIssue {
    MissingUri { entry_id: String, uri: String },
    DuplicateId { entry_id: String },
    BadEntry { entry_id: String, msg: String },
}

impl fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestIssue::MissingUri { entry_id, uri } => {
                write!(f, "entry {entry_id}: missing file {uri}")
            }
            ManifestIssue::DuplicateId { entry_id } => write!(f, "duplicate entry id {entry_id}"),
            ManifestIssue::BadEntry { entry_id, msg } => write!(f, "entry {entry_id}: {msg}"),
        }
    }
}

/// Check every referenced uri and entry invariant. Empty report = valid.
///
/// Deterministic and order-independent: issues are reported in entry order,
/// and reordering entries permutes but never changes the issue set.
pub fn validate_manifest(manifest: &DatasetManifest, base_dir: &Path) -> Vec<ManifestIssue> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.clone()) {
            issues.push(ManifestIssue::DuplicateId { entry_id: e.id.clone() });
        }
        if e.s1_uri.is_none() && e.s2_uri.is_none() {
            issues.push(ManifestIssue::BadEntry {
                entry_id: e.id.clone(),
                msg: "entry references no tile".into(),
            });
        }
        for uri in [&e.s1_uri, &e.s2_uri, &e.label_uri].into_iter().flatten() {
            let p = base_dir.join(uri);
            if !p.is_file() {
                issues.push(ManifestIssue::MissingUri { entry_id: e.id.clone(), uri: uri.clone() });
            } else if !sidecar_path(&p).is_file() {
                issues.push(ManifestIssue::MissingUri {
                    entry_id: e.id.clone(),
                    uri: format!("{uri}.meta"),
                });
            }
        }
    }
    issues
}
