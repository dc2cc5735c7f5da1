//! Paired-sensor scene generator.
//!
//! Every scene starts from one latent label map; the optical and radar
//! renderings draw from it independently, so the two modalities of a pair
//! agree pixelwise on class identity but nothing else. Class signatures are
//! chosen so some pairs are separable in exactly one modality, which is what
//! makes cross-modal transfer measurable on this data.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::augment::{gaussian_kernel, reflect};
use crate::datamodel::{
    validate_manifest, write_catalog, write_labels, write_tile, DatasetManifest, LabelMap,
    ManifestEntry, Modality, PairedSample, SceneMeta, Split, Tile, MAX_PAIR_CLOUD, PAIR_WINDOW_S,
};
use crate::normalize::{S1_HI_DB, S1_LO_DB, S2_HI_DN};
use crate::rng::derive_stream;
use crate::{Error, Result};

/// 2022-01-01T00:00:00Z; scene timestamps count forward from here.
const EPOCH_START: i64 = 1_640_995_200;
/// Optical scenes re-draw their clouds until under the pairing limit.
const MAX_CLOUD_TRIES: usize = 64;
const CLOUD_DN_MEAN: f64 = 8_000.0;
const CLOUD_DN_SD: f64 = 300.0;

/// A pair counts as confusable in a modality when its signature gap is under
/// this fraction of the noise level, and separable when over twice the noise.
const ALIKE_FACTOR: f64 = 0.1;
const DISTINCT_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub name: String,
    /// Mean digital numbers for B4/B3/B2.
    pub optical_dn: [f64; 3],
    /// Mean backscatter for VV/VH, dB.
    pub sar_db: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSignature>,
    pub optical_noise_dn: f64,
    pub sar_noise_db: f64,
    /// Expected cloud blobs per optical tile.
    pub cloud_rate: f64,
    /// Gaussian sigma, in pixels, applied to the latent fields.
    pub smoothing_radius: f64,
    pub seed: u64,
}

fn optical_gap(a: &ClassSignature, b: &ClassSignature) -> f64 {
    (0..3).map(|c| (a.optical_dn[c] - b.optical_dn[c]).abs()).fold(0.0, f64::max)
}

fn sar_gap(a: &ClassSignature, b: &ClassSignature) -> f64 {
    (0..2).map(|c| (a.sar_db[c] - b.sar_db[c]).abs()).fold(0.0, f64::max)
}

impl SceneRecipe {
    /// Six classes over water, bare ground, two vegetation types, built-up,
    /// and bright soil. Water vs. smooth flats look alike optically but far
    /// apart in backscatter; the two vegetation classes are the reverse.
    pub fn standard(seed: u64) -> SceneRecipe {
        let cls = |name: &str, optical_dn: [f64; 3], sar_db: [f64; 2]| ClassSignature {
            name: name.into(),
            optical_dn,
            sar_db,
        };
        SceneRecipe {
            height: 64,
            width: 64,
            classes: vec![
                cls("water", [300.0, 400.0, 600.0], [-17.0, -16.5]),
                cls("smooth_flat", [330.0, 410.0, 590.0], [-10.0, -11.0]),
                cls("meadow", [1200.0, 2600.0, 900.0], [-7.5, -12.5]),
                cls("shrub", [2600.0, 2100.0, 1200.0], [-7.4, -12.35]),
                cls("built", [4500.0, 4500.0, 4600.0], [-2.0, -6.0]),
                cls("bright_soil", [7000.0, 6200.0, 5200.0], [-13.0, -15.5]),
            ],
            optical_noise_dn: 300.0,
            sar_noise_db: 2.0,
            cloud_rate: 1.0,
            smoothing_radius: 7.0,
            seed,
        }
    }

    /// Structural checks only; enough to render individual scenes.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "scene size {}x{} too small",
                self.height, self.width
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("recipe needs at least 2 classes".into()));
        }
        if self.classes.len() > 254 {
            return Err(Error::Config("class count collides with the ignore label".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            for v in c.optical_dn {
                if !(0.0..=S2_HI_DN).contains(&v) {
                    return Err(Error::Config(format!(
                        "class {i} optical mean {v} outside [0, {S2_HI_DN}]"
                    )));
                }
            }
            for v in c.sar_db {
                if !(S1_LO_DB..=S1_HI_DB).contains(&v) {
                    return Err(Error::Config(format!(
                        "class {i} sar mean {v} outside [{S1_LO_DB}, {S1_HI_DB}]"
                    )));
                }
            }
        }
        for (name, v) in [
            ("optical noise", self.optical_noise_dn),
            ("sar noise", self.sar_noise_db),
            ("cloud rate", self.cloud_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if !self.smoothing_radius.is_finite() || self.smoothing_radius <= 0.0 {
            return Err(Error::Config(format!(
                "smoothing radius {} must be positive",
                self.smoothing_radius
            )));
        }
        Ok(())
    }

    /// Full check: geometry plus the designed-confusion requirement, which
    /// dataset generation insists on.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.sar_only_separable_pairs().is_empty() {
            return Err(Error::Config(
                "no class pair is optical-alike but sar-separable".into(),
            ));
        }
        if self.optical_only_separable_pairs().is_empty() {
            return Err(Error::Config(
                "no class pair is sar-alike but optical-separable".into(),
            ));
        }
        Ok(())
    }

    /// Pairs a probe can separate only through radar: optical gap under the
    /// noise, backscatter gap well over it.
    pub fn sar_only_separable_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs_where(|a, b| {
            optical_gap(a, b) <= ALIKE_FACTOR * self.optical_noise_dn
                && sar_gap(a, b) >= DISTINCT_FACTOR * self.sar_noise_db
        })
    }

    /// Pairs a probe can separate only through optical.
    pub fn optical_only_separable_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs_where(|a, b| {
            sar_gap(a, b) <= ALIKE_FACTOR * self.sar_noise_db
                && optical_gap(a, b) >= DISTINCT_FACTOR * self.optical_noise_dn
        })
    }

    /// Classes involved in some optical-only-separable pair; the ones where
    /// radar-side transfer from optical should help most.
    pub fn optical_distinct_only_classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .optical_only_separable_pairs()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn pairs_where(
        &self,
        pred: impl Fn(&ClassSignature, &ClassSignature) -> bool,
    ) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.classes.len() {
            for j in i + 1..self.classes.len() {
                if pred(&self.classes[i], &self.classes[j]) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

// ---- latent scene ----

/// Separable Gaussian smoothing with reflect edges; the kernel is truncated
/// when the field is smaller than its natural support.
fn smooth_field(f: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (h, w) = f.dim();
    let full = gaussian_kernel(sigma);
    let r = full.len() / 2;
    let capped = |n: usize| -> (Vec<f64>, usize) {
        let ru = r.min(n - 1);
        let taps: Vec<f64> = full.iter().skip(r - ru).take(2 * ru + 1).copied().collect();
        let s: f64 = taps.iter().sum();
        (taps.iter().map(|v| v / s).collect(), ru)
    };
    let (kx, rx) = capped(w);
    let (ky, ry) = capped(h);
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kx.iter().enumerate() {
                let xi = reflect(x as i64 + t as i64 - rx as i64, w as i64) as usize;
                acc += kv * f[(y, xi)];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in ky.iter().enumerate() {
                let yi = reflect(y as i64 + t as i64 - ry as i64, h as i64) as usize;
                acc += kv * tmp[(yi, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// One smoothed white-noise field per class; the per-pixel argmax is the
/// label. Ties resolve to the lower class index.
pub fn gen_latent_scene(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    recipe.validate_geometry()?;
    let (h, w, k) = (recipe.height, recipe.width, recipe.classes.len());
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut best = Array2::<f64>::from_elem((h, w), f64::NEG_INFINITY);
    let mut labels = Array2::<u8>::zeros((h, w));
    for class in 0..k {
        let noise = Array2::from_shape_fn((h, w), |_| normal.sample(rng));
        let field = smooth_field(&noise, recipe.smoothing_radius);
        for y in 0..h {
            for x in 0..w {
                if field[(y, x)] > best[(y, x)] {
                    best[(y, x)] = field[(y, x)];
                    labels[(y, x)] = class as u8;
                }
            }
        }
    }
    LabelMap::new(labels, k)
}

// ---- rendering ----

fn blank_tile(modality: Modality, pixels: Array3<f32>, cloud_fraction: f64) -> Tile {
    Tile {
        modality,
        channel_names: modality.channel_names(),
        pixels,
        center_lat: 0.0,
        center_lon: 0.0,
        resolution_m: 10.0,
        timestamp: 0,
        cloud_fraction,
        normalization: None,
    }
}

/// Optical rendering: palette plus Gaussian noise, clamped to the sensor's
/// digital-number range, with elliptical cloud blobs stamped on top.
/// Geo and time metadata are left zeroed for the caller to fill.
pub fn render_optical(
    labels: &LabelMap,
    recipe: &SceneRecipe,
    rng: &mut ChaCha8Rng,
) -> Result<(Tile, Array2<bool>)> {
    recipe.validate_geometry()?;
    let (h, w) = labels.classes.dim();
    if labels.num_classes > recipe.classes.len() {
        return Err(Error::Validation(format!(
            "label map has {} classes, recipe only {}",
            labels.num_classes,
            recipe.classes.len()
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Cloud geometry first, then per-pixel noise: the noise draw count stays
    // independent of how much ends up covered.
    let blob_count = if recipe.cloud_rate > 0.0 {
        Poisson::new(recipe.cloud_rate)
            .map_err(|e| Error::Config(format!("cloud rate: {e}")))?
            .sample(rng) as usize
    } else {
        0
    };
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    for _ in 0..blob_count {
        let cx: f64 = rng.random_range(0.0..w as f64);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let a: f64 = rng.random_range(2.0..(w as f64 / 6.0).max(3.0));
        let b: f64 = rng.random_range(2.0..(h as f64 / 6.0).max(3.0));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    mask[(y, x)] = true;
                }
            }
        }
    }
    let mut pixels = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let sig = &recipe.classes[labels.classes[(y, x)] as usize];
            for c in 0..3 {
                let v = sig.optical_dn[c] + recipe.optical_noise_dn * normal.sample(rng);
                pixels[(y, x, c)] = v.clamp(0.0, S2_HI_DN) as f32;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                for c in 0..3 {
                    let v = CLOUD_DN_MEAN + CLOUD_DN_SD * normal.sample(rng);
                    pixels[(y, x, c)] = v.clamp(0.0, S2_HI_DN) as f32;
                }
            }
        }
    }
    let covered = mask.iter().filter(|&&m| m).count();
    let fraction = covered as f64 / (h * w) as f64;
    Ok((blank_tile(Modality::S2, pixels, fraction), mask))
}

/// Radar rendering: class signature plus dB-space Gaussian noise. Clouds
/// never enter here; that independence is the point of the pairing.
pub fn render_sar(labels: &LabelMap, recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Result<Tile> {
    recipe.validate_geometry()?;
    let (h, w) = labels.classes.dim();
    if labels.num_classes > recipe.classes.len() {
        return Err(Error::Validation(format!(
            "label map has {} classes, recipe only {}",
            labels.num_classes,
            recipe.classes.len()
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = Array3::<f32>::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let sig = &recipe.classes[labels.classes[(y, x)] as usize];
            for c in 0..2 {
                pixels[(y, x, c)] =
                    (sig.sar_db[c] + recipe.sar_noise_db * normal.sample(rng)) as f32;
            }
        }
    }
    Ok(blank_tile(Modality::S1, pixels, 0.0))
}

// ---- whole scenes ----

pub struct SyntheticScene {
    pub labels: LabelMap,
    pub optical: Tile,
    pub sar: Tile,
    pub cloud_mask: Array2<bool>,
    pub anchor_timestamp: i64,
    pub delta_t_s2: i64,
}

/// Deterministic scene `index` under the recipe seed: latent map, both
/// renderings, co-located metadata, and timestamps satisfying the pairing
/// window. Optical re-draws its clouds until under the pairing limit.
pub fn gen_scene(recipe: &SceneRecipe, index: usize) -> Result<SyntheticScene> {
    let mut latent_rng = derive_stream(recipe.seed, &format!("scene/{index}/latent"));
    let labels = gen_latent_scene(recipe, &mut latent_rng)?;
    let mut optical = None;
    let mut cloud_mask = None;
    for try_idx in 0..MAX_CLOUD_TRIES {
        let mut rng = derive_stream(recipe.seed, &format!("scene/{index}/optical/{try_idx}"));
        let (tile, mask) = render_optical(&labels, recipe, &mut rng)?;
        if tile.cloud_fraction <= MAX_PAIR_CLOUD {
            optical = Some(tile);
            cloud_mask = Some(mask);
            break;
        }
    }
    let (mut optical, cloud_mask) = match (optical, cloud_mask) {
        (Some(t), Some(m)) => (t, m),
        _ => {
            return Err(Error::Validation(format!(
                "scene {index}: no optical draw under cloud limit in {MAX_CLOUD_TRIES} tries"
            )))
        }
    };
    let mut sar_rng = derive_stream(recipe.seed, &format!("scene/{index}/sar"));
    let mut sar = render_sar(&labels, recipe, &mut sar_rng)?;

    let lat = (index / 100) as f64 * 0.01;
    let lon = (index % 100) as f64 * 0.01;
    if lat > 90.0 {
        return Err(Error::Validation(format!("scene index {index} walks off the grid")));
    }
    let mut meta_rng = derive_stream(recipe.seed, &format!("scene/{index}/meta"));
    let anchor = EPOCH_START + index as i64 * 2 * 86_400;
    let delta_t_s2: i64 = meta_rng.random_range(0..=PAIR_WINDOW_S);
    for (tile, t) in [(&mut sar, anchor), (&mut optical, anchor - delta_t_s2)] {
        tile.center_lat = lat;
        tile.center_lon = lon;
        tile.timestamp = t;
    }
    Ok(SyntheticScene {
        labels,
        optical,
        sar,
        cloud_mask,
        anchor_timestamp: anchor,
        delta_t_s2,
    })
}

// ---- dataset emission ----

fn scene_stem(index: usize) -> String {
    format!("syn{index:05}")
}

/// Render `n_pairs` scenes to disk with train/validation/test manifests
/// split 70/15/15 by scene, label maps for the labeled subset, and a
/// catalog covering every tile. Returns the three manifests in that order.
pub fn gen_dataset(
    recipe: &SceneRecipe,
    n_pairs: usize,
    labeled_fraction: f64,
    out_dir: &Path,
) -> Result<Vec<DatasetManifest>> {
    recipe.validate()?;
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::Config(format!(
            "labeled_fraction {labeled_fraction} outside [0, 1]"
        )));
    }
    let tiles_dir = out_dir.join("tiles");
    let labels_dir = out_dir.join("labels");
    for d in [&tiles_dir, &labels_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let shuffled = |label: &str| -> Vec<usize> {
        let mut rng = derive_stream(recipe.seed, label);
        let mut idx: Vec<usize> = (0..n_pairs).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx
    };
    let labeled: HashSet<usize> = shuffled("labeled_subset")
        .into_iter()
        .take((labeled_fraction * n_pairs as f64).round() as usize)
        .collect();
    let order = shuffled("dataset_split");
    let n_train = (0.7 * n_pairs as f64).round() as usize;
    let n_val = (0.15 * n_pairs as f64).round() as usize;
    let mut split_of = vec![Split::Test; n_pairs];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }

    let mut catalog = Vec::new();
    let mut entries: Vec<Vec<ManifestEntry>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for i in 0..n_pairs {
        let scene = gen_scene(recipe, i)?;
        let stem = scene_stem(i);
        let s1_uri = format!("tiles/{stem}_s1.tile");
        let s2_uri = format!("tiles/{stem}_s2.tile");
        write_tile(&scene.sar, &out_dir.join(&s1_uri))?;
        write_tile(&scene.optical, &out_dir.join(&s2_uri))?;
        let sample = PairedSample {
            s1: scene.sar.clone(),
            s2: scene.optical.clone(),
            anchor_timestamp: scene.anchor_timestamp,
            delta_t_s1: 0,
            delta_t_s2: scene.delta_t_s2,
        };
        sample.validate()?;
        let label_uri = if labeled.contains(&i) {
            let uri = format!("labels/{stem}.labels");
            write_labels(&scene.labels, &out_dir.join(&uri))?;
            Some(uri)
        } else {
            None
        };
        for (tile, id, uri) in [
            (&scene.sar, format!("{stem}_s1"), &s1_uri),
            (&scene.optical, format!("{stem}_s2"), &s2_uri),
        ] {
            catalog.push(SceneMeta {
                scene_id: id,
                modality: tile.modality,
                lat: tile.center_lat,
                lon: tile.center_lon,
                timestamp: tile.timestamp,
                cloud_fraction: tile.cloud_fraction,
                uri: uri.clone(),
            });
        }
        let slot = match split_of[i] {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        };
        entries[slot].push(ManifestEntry {
            id: stem,
            s1_uri: Some(s1_uri),
            s2_uri: Some(s2_uri),
            label_uri,
            anchor_timestamp: scene.anchor_timestamp,
        });
    }
    write_catalog(&catalog, &out_dir.join("catalog.txt"))?;

    let mut manifests = Vec::new();
    for (split, entry_list) in
        [Split::Train, Split::Validation, Split::Test].into_iter().zip(entries)
    {
        let m = DatasetManifest {
            name: "synthetic".into(),
            split,
            normalization_id: "raw".into(),
            version: "1".into(),
            entries: entry_list,
        };
        let path = out_dir.join(format!("{split}.manifest"));
        m.write(&path)?;
        let issues = validate_manifest(&m, out_dir);
        if let Some(first) = issues.first() {
            return Err(Error::Validation(format!(
                "generated {split} manifest invalid ({} issues): {first}",
                issues.len()
            )));
        }
        manifests.push(m);
    }
    Ok(manifests)
}
