//! Scene sampling and spatio-temporal joins.
//!
//! Anchors are (lat, lon, t) points sampled area-uniformly inside a region
//! set. A positive pair exists for an anchor when both sensors have a scene
//! at that location within the 30 days before t, with the optical scene at
//! most 15% cloudy; the scene closest to t wins, ties broken by smallest
//! scene_id. Labeled downstream scenes join to the radar scene minimizing
//! |dt| within 90 days, symmetric.
//!
//! Joins run on a spatial-hash index; brute-force full scans are kept as
//! oracles and the two are tested for exact agreement.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    Modality, PairedScene, SceneMeta, DOWNSTREAM_WINDOW_S, EPS_GEO_DEG, MAX_PAIR_CLOUD,
    PAIR_WINDOW_S,
};
use crate::{Error, Result};

// ---- regions ----

/// Union of closed lat/lon polygons.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    /// Each ring is a sequence of (lat, lon) vertices; the closing edge from
    /// last back to first is implicit.
    pub polygons: Vec<Vec<(f64, f64)>>,
}

impl RegionSet {
    pub fn validate(&self) -> Result<()> {
        if self.polygons.is_empty() {
            return Err(Error::Validation("region set has no polygons".into()));
        }
        for (pi, ring) in self.polygons.iter().enumerate() {
            if ring.len() < 3 {
                return Err(Error::Validation(format!(
                    "polygon {pi} has {} vertices, need at least 3",
                    ring.len()
                )));
            }
            for &(lat, lon) in ring {
                if lat.abs() > 90.0 || lon.abs() > 180.0 {
                    return Err(Error::Validation(format!(
                        "polygon {pi} vertex ({lat}, {lon}) outside valid range"
                    )));
                }
            }
            if ring_self_intersects(ring) {
                return Err(Error::Validation(format!("polygon {pi} is self-intersecting")));
            }
        }
        Ok(())
    }

    /// Point-in-union test (even-odd rule per ring).
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.polygons.iter().any(|ring| point_in_ring(ring, lat, lon))
    }

    fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut lat_min = f64::INFINITY;
        let mut lat_max = f64::NEG_INFINITY;
        let mut lon_min = f64::INFINITY;
        let mut lon_max = f64::NEG_INFINITY;
        for ring in &self.polygons {
            for &(lat, lon) in ring {
                lat_min = lat_min.min(lat);
                lat_max = lat_max.max(lat);
                lon_min = lon_min.min(lon);
                lon_max = lon_max.max(lon);
            }
        }
        (lat_min, lat_max, lon_min, lon_max)
    }
}

fn point_in_ring(ring: &[(f64, f64)], lat: f64, lon: f64) -> bool {
    // Ray cast in the (lon, lat) plane toward +lon.
    let mut inside = false;
    let n = ring.len();
    for i in 0..n {
        let (lat_i, lon_i) = ring[i];
        let (lat_j, lon_j) = ring[(i + 1) % n];
        let crosses = (lat_i > lat) != (lat_j > lat);
        if crosses {
            let t = (lat - lat_i) / (lat_j - lat_i);
            let x = lon_i + t * (lon_j - lon_i);
            if lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    // Proper intersection only; shared endpoints between adjacent edges are
    // handled by the caller skipping neighbors.
    fn orient(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    }
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    (o1 * o2 < 0.0) && (o3 * o4 < 0.0)
}

fn ring_self_intersects(ring: &[(f64, f64)]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        for j in (i + 1)..n {
            // Skip edges sharing a vertex with edge i.
            if j == i || (j + 1) % n == i || j == (i + 1) % n {
                continue;
            }
            let c = ring[j];
            let d = ring[(j + 1) % n];
            if segments_intersect(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

const REGIONS_MAGIC: &str = "twinsat-regions v1";

pub fn write_regions(regions: &RegionSet, path: &Path) -> Result<()> {
    regions.validate()?;
    let mut out = String::from(REGIONS_MAGIC);
    out.push('\n');
    for ring in &regions.polygons {
        out.push_str("poly\n");
        for (lat, lon) in ring {
            out.push_str(&format!("{lat} {lon}\n"));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_regions(path: &Path) -> Result<RegionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(REGIONS_MAGIC) => {}
        other => {
            return Err(Error::parse(path, format!("expected {REGIONS_MAGIC:?}, found {other:?}")))
        }
    }
    let mut polygons: Vec<Vec<(f64, f64)>> = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "poly" {
            polygons.push(Vec::new());
            continue;
        }
        let mut it = line.split_whitespace();
        let lat: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, format!("bad vertex line {line:?}")))?;
        let lon: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, format!("bad vertex line {line:?}")))?;
        polygons
            .last_mut()
            .ok_or_else(|| Error::parse(path, "vertex before any poly line"))?
            .push((lat, lon));
    }
    let regions = RegionSet { polygons };
    regions.validate()?;
    Ok(regions)
}

// ---- anchors ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

pub const DEFAULT_REJECTION_BUDGET: usize = 10_000;

/// Sample `n` points area-uniformly on the sphere inside the region union.
///
/// Latitude is drawn with cos(lat) weighting (uniform in sin(lat) over the
/// bounding band), longitude uniformly; points outside the polygons are
/// rejected. `budget` bounds the rejected draws per accepted point.
pub fn sample_locations(
    regions: &RegionSet,
    n: usize,
    rng: &mut ChaCha8Rng,
    budget: usize,
) -> Result<Vec<(f64, f64)>> {
    regions.validate()?;
    let (lat_min, lat_max, lon_min, lon_max) = regions.bounding_box();
    let (s_min, s_max) = (lat_min.to_radians().sin(), lat_max.to_radians().sin());
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0usize;
    let max_rejected = budget.saturating_mul(n.max(1));
    while out.len() < n {
        let s = rng.random_range(s_min..=s_max);
        let lat = s.asin().to_degrees();
        let lon = rng.random_range(lon_min..=lon_max);
        if regions.contains(lat, lon) {
            out.push((lat, lon));
        } else {
            rejected += 1;
            if rejected > max_rejected {
                return Err(Error::Validation(format!(
                    "rejection budget exhausted after {rejected} draws; region too thin"
                )));
            }
        }
    }
    Ok(out)
}

/// `n` IID uniform timestamps in [start, end).
pub fn sample_timestamps(
    start: i64,
    end: i64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<i64>> {
    if start >= end {
        return Err(Error::Config(format!("timestamp range [{start}, {end}) is empty")));
    }
    Ok((0..n).map(|_| rng.random_range(start..end)).collect())
}

// ---- closest-scene search ----

#[inline]
fn same_location(a_lat: f64, a_lon: f64, b_lat: f64, b_lon: f64) -> bool {
    (a_lat - b_lat).abs() <= EPS_GEO_DEG && (a_lon - b_lon).abs() <= EPS_GEO_DEG
}

/// Candidate ordering: smallest age first, then smallest scene_id.
fn better<'a>(best: Option<(&'a SceneMeta, i64)>, cand: (&'a SceneMeta, i64)) -> bool {
    match best {
        None => true,
        Some((b, b_age)) => cand.1 < b_age || (cand.1 == b_age && cand.0.scene_id < b.scene_id),
    }
}

/// Brute-force closest-scene search; the oracle for the indexed version.
///
/// Among scenes of `modality` at `loc` (within the geo tolerance) with
/// anchor_t - window_s <= t <= anchor_t and cloud_fraction <= max_cloud,
/// returns the one with smallest anchor_t - t, ties broken by scene_id.
pub fn find_scene_scan<'a>(
    catalog: &'a [SceneMeta],
    modality: Modality,
    loc: (f64, f64),
    anchor_t: i64,
    window_s: i64,
    max_cloud: f64,
) -> Option<&'a SceneMeta> {
    let mut best: Option<(&SceneMeta, i64)> = None;
    for s in catalog {
        if s.modality != modality
            || !same_location(loc.0, loc.1, s.lat, s.lon)
            || s.cloud_fraction > max_cloud
        {
            continue;
        }
        let age = anchor_t - s.timestamp;
        if age < 0 || age > window_s {
            continue;
        }
        if better(best, (s, age)) {
            best = Some((s, age));
        }
    }
    best.map(|(s, _)| s)
}

/// Spatial-hash index over a catalog: scenes bucketed by quantized
/// (lat, lon) cell, each bucket sorted by timestamp.
pub struct SceneIndex<'a> {
    cells: HashMap<(i64, i64), Vec<&'a SceneMeta>>,
}

const CELL_SCALE: f64 = 1e6; // one cell = 1e-6 degrees, the geo tolerance

fn cell_of(lat: f64, lon: f64) -> (i64, i64) {
    ((lat * CELL_SCALE).round() as i64, (lon * CELL_SCALE).round() as i64)
}

impl<'a> SceneIndex<'a> {
    pub fn build(catalog: &'a [SceneMeta]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<&SceneMeta>> = HashMap::new();
        for s in catalog {
            cells.entry(cell_of(s.lat, s.lon)).or_default().push(s);
        }
        for bucket in cells.values_mut() {
            bucket.sort_by(|a, b| {
                a.timestamp.cmp(&b.timestamp).then_with(|| a.scene_id.cmp(&b.scene_id))
            });
        }
        SceneIndex { cells }
    }

    /// Indexed equivalent of [`find_scene_scan`].
    pub fn find_scene(
        &self,
        modality: Modality,
        loc: (f64, f64),
        anchor_t: i64,
        window_s: i64,
        max_cloud: f64,
    ) -> Option<&'a SceneMeta> {
        let (ci, cj) = cell_of(loc.0, loc.1);
        let mut best: Option<(&SceneMeta, i64)> = None;
        // A point within tolerance of loc can quantize to a neighboring
        // cell, so scan the 3x3 neighborhood.
        for di in -1..=1 {
            for dj in -1..=1 {
                let Some(bucket) = self.cells.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                // Bucket is time-sorted: walk backward from the last scene
                // at or before anchor_t until the window opens.
                let hi = bucket.partition_point(|s| s.timestamp <= anchor_t);
                for s in bucket[..hi].iter().rev() {
                    let age = anchor_t - s.timestamp;
                    if age > window_s {
                        break;
                    }
                    if s.modality != modality
                        || !same_location(loc.0, loc.1, s.lat, s.lon)
                        || s.cloud_fraction > max_cloud
                    {
                        continue;
                    }
                    if better(best, (s, age)) {
                        best = Some((s, age));
                    }
                }
            }
        }
        best.map(|(s, _)| s)
    }
}

// ---- pair construction ----

/// Why anchors were skipped during pair construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairStats {
    pub paired: usize,
    /// No radar scene in the window at the anchor location.
    pub no_s1: usize,
    /// No optical scene in the window at all.
    pub no_s2: usize,
    /// Optical scenes existed but every candidate exceeded the cloud limit.
    pub s2_too_cloudy: usize,
}

/// Build positive pairs for `anchors`: radar within 30 days (any cloud),
/// optical within 30 days at <= 15% cloud, both closest-in-time. Output
/// order follows anchor order; anchors missing either side are skipped.
pub fn build_pairs(
    s1_catalog: &[SceneMeta],
    s2_catalog: &[SceneMeta],
    anchors: &[Anchor],
) -> (Vec<PairedScene>, PairStats) {
    let s1_index = SceneIndex::build(s1_catalog);
    let s2_index = SceneIndex::build(s2_catalog);
    let mut out = Vec::new();
    let mut stats = PairStats::default();
    for a in anchors {
        let loc = (a.lat, a.lon);
        let s1 = s1_index.find_scene(Modality::S1, loc, a.timestamp, PAIR_WINDOW_S, 1.0);
        let Some(s1) = s1 else {
            stats.no_s1 += 1;
            continue;
        };
        let s2 =
            s2_index.find_scene(Modality::S2, loc, a.timestamp, PAIR_WINDOW_S, MAX_PAIR_CLOUD);
        let Some(s2) = s2 else {
            if s2_index
                .find_scene(Modality::S2, loc, a.timestamp, PAIR_WINDOW_S, 1.0)
                .is_some()
            {
                stats.s2_too_cloudy += 1;
            } else {
                stats.no_s2 += 1;
            }
            continue;
        };
        stats.paired += 1;
        out.push(PairedScene {
            s1: s1.clone(),
            s2: s2.clone(),
            anchor_timestamp: a.timestamp,
            delta_t_s1: a.timestamp - s1.timestamp,
            delta_t_s2: a.timestamp - s2.timestamp,
        });
    }
    (out, stats)
}

/// Brute-force oracle for [`build_pairs`].
pub fn build_pairs_scan(
    s1_catalog: &[SceneMeta],
    s2_catalog: &[SceneMeta],
    anchors: &[Anchor],
) -> Vec<PairedScene> {
    let mut out = Vec::new();
    for a in anchors {
        let loc = (a.lat, a.lon);
        let s1 = find_scene_scan(s1_catalog, Modality::S1, loc, a.timestamp, PAIR_WINDOW_S, 1.0);
        let s2 = find_scene_scan(
            s2_catalog,
            Modality::S2,
            loc,
            a.timestamp,
            PAIR_WINDOW_S,
            MAX_PAIR_CLOUD,
        );
        if let (Some(s1), Some(s2)) = (s1, s2) {
            out.push(PairedScene {
                s1: s1.clone(),
                s2: s2.clone(),
                anchor_timestamp: a.timestamp,
                delta_t_s1: a.timestamp - s1.timestamp,
                delta_t_s2: a.timestamp - s2.timestamp,
            });
        }
    }
    out
}

// ---- downstream join ----

/// A labeled optical scene joined to its closest radar scene.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedEntry {
    pub s2: SceneMeta,
    pub s1: SceneMeta,
    /// s1.timestamp - s2.timestamp, signed; |delta_t| <= 90 days.
    pub delta_t: i64,
}

/// Join each labeled optical scene to the radar scene at the same location
/// minimizing |dt|, within a symmetric 90-day window; unmatched entries are
/// discarded. Ties on |dt| break toward the smaller scene_id.
pub fn join_downstream(s2_entries: &[SceneMeta], s1_catalog: &[SceneMeta]) -> Vec<JoinedEntry> {
    let index = SceneIndex::build(s1_catalog);
    let mut out = Vec::new();
    for s2 in s2_entries {
        // Two past-window searches centered at t and t + window cover the
        // symmetric interval; rank candidates by |dt| directly.
        let mut best: Option<(&SceneMeta, i64)> = None;
        let (ci, cj) = cell_of(s2.lat, s2.lon);
        for di in -1..=1 {
            for dj in -1..=1 {
                let Some(bucket) = index.cells.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                let lo = bucket.partition_point(|s| s.timestamp < s2.timestamp - DOWNSTREAM_WINDOW_S);
                for s in &bucket[lo..] {
                    if s.timestamp > s2.timestamp + DOWNSTREAM_WINDOW_S {
                        break;
                    }
                    if s.modality != Modality::S1
                        || !same_location(s2.lat, s2.lon, s.lat, s.lon)
                    {
                        continue;
                    }
                    let adt = (s.timestamp - s2.timestamp).abs();
                    if better(best, (s, adt)) {
                        best = Some((s, adt));
                    }
                }
            }
        }
        if let Some((s1, _)) = best {
            out.push(JoinedEntry {
                s2: s2.clone(),
                s1: s1.clone(),
                delta_t: s1.timestamp - s2.timestamp,
            });
        }
    }
    out
}

/// Brute-force oracle for [`join_downstream`].
pub fn join_downstream_scan(
    s2_entries: &[SceneMeta],
    s1_catalog: &[SceneMeta],
) -> Vec<JoinedEntry> {
    let mut out = Vec::new();
    for s2 in s2_entries {
        let mut best: Option<(&SceneMeta, i64)> = None;
        for s in s1_catalog {
            if s.modality != Modality::S1 || !same_location(s2.lat, s2.lon, s.lat, s.lon) {
                continue;
            }
            let adt = (s.timestamp - s2.timestamp).abs();
            if adt > DOWNSTREAM_WINDOW_S {
                continue;
            }
            if better(best, (s, adt)) {
                best = Some((s, adt));
            }
        }
        if let Some((s1, _)) = best {
            out.push(JoinedEntry {
                s2: s2.clone(),
                s1: s1.clone(),
                delta_t: s1.timestamp - s2.timestamp,
            });
        }
    }
    out
}

// ---- sub-sampling splits ----

/// One fixed subset of the training ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub fraction: f64,
    pub set_index: usize,
    pub seed: u64,
    pub member_ids: Vec<String>,
}

/// Build k pairwise-disjoint subsets per fraction, each of size
/// round(fraction * N), carved from one seeded shuffle of the train ids.
/// Sets are chosen once and fixed; fraction 1.0 yields the full id set.
pub fn make_subsample_splits(
    train_ids: &[String],
    plan: &[(f64, usize)],
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    let n = train_ids.len();
    let mut shuffled: Vec<String> = train_ids.to_vec();
    let mut rng = crate::rng::derive_stream(seed, "subsample_splits");
    // Fisher-Yates, explicit so the draw sequence is part of the format.
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let mut out = Vec::new();
    for &(fraction, k) in plan {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let size = (fraction * n as f64).round() as usize;
        if size == 0 {
            return Err(Error::Config(format!(
                "fraction {fraction} of {n} train ids rounds to an empty set"
            )));
        }
        if k * size > n {
            return Err(Error::Config(format!(
                "plan infeasible: {k} disjoint sets of {size} from {n} ids"
            )));
        }
        for set_index in 0..k {
            out.push(SplitPlan {
                fraction,
                set_index,
                seed,
                member_ids: shuffled[set_index * size..(set_index + 1) * size].to_vec(),
            });
        }
    }
    Ok(out)
}

const SPLITS_MAGIC: &str = "twinsat-splits v1";

pub fn write_splits(plans: &[SplitPlan], path: &Path) -> Result<()> {
    let mut out = String::from(SPLITS_MAGIC);
    out.push('\n');
    for p in plans {
        out.push_str(&format!(
            "fraction={} set={} seed={} ids={}\n",
            p.fraction,
            p.set_index,
            p.seed,
            p.member_ids.join(",")
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_splits(path: &Path) -> Result<Vec<SplitPlan>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(SPLITS_MAGIC) => {}
        other => {
            return Err(Error::parse(path, format!("expected {SPLITS_MAGIC:?}, found {other:?}")))
        }
    }
    let mut plans = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fraction = None;
        let mut set_index = None;
        let mut seed = None;
        let mut ids = None;
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad splits token {tok:?}")))?;
            match k {
                "fraction" => {
                    fraction =
                        Some(v.parse::<f64>().map_err(|e| Error::parse(path, e.to_string()))?)
                }
                "set" => {
                    set_index =
                        Some(v.parse::<usize>().map_err(|e| Error::parse(path, e.to_string()))?)
                }
                "seed" => {
                    seed = Some(v.parse::<u64>().map_err(|e| Error::parse(path, e.to_string()))?)
                }
                "ids" => ids = Some(v.split(',').map(|s| s.to_string()).collect::<Vec<_>>()),
                other => return Err(Error::parse(path, format!("unknown splits key {other:?}"))),
            }
        }
        plans.push(SplitPlan {
            fraction: fraction.ok_or_else(|| Error::parse(path, "missing fraction"))?,
            set_index: set_index.ok_or_else(|| Error::parse(path, "missing set"))?,
            seed: seed.ok_or_else(|| Error::parse(path, "missing seed"))?,
            member_ids: ids.ok_or_else(|| Error::parse(path, "missing ids"))?,
        });
    }
    Ok(plans)
}
