//! Training loops: contrastive pre-training and segmentation fine-tuning.
//!
//! Both loops are bitwise deterministic for a fixed seed: data order comes
//! from per-epoch derived streams, every augmentation draw has its own
//! stream labeled by step and slot, and all arithmetic runs in f64 on a
//! single thread. Running the same config twice must produce checkpoints
//! with identical value fingerprints; a test pins that.
//!
//! Pre-training touches only tile pixels. Label files are never opened on
//! that path, so no leakage from the evaluation task is possible by
//! construction. Fine-tuning refuses manifests whose split tag does not
//! match its role: gradients only ever come from a train split and model
//! selection only from a validation split.
//!
//! A non-finite loss or gradient aborts the run and leaves the most recent
//! cadence checkpoint on disk rather than overwriting it with poison.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};

use crate::augment::build_pipeline;
use crate::datamodel::{
    read_labels, read_tile, DatasetManifest, LabelMap, Modality, Split, IGNORE_INDEX,
};
use crate::eval::{self, ConfusionMatrix, RunResult, SWEEP_LRS};
use crate::loss::{multimodal_nce, ntxent, Reduction};
use crate::model::{
    snapshot_encoder, snapshot_projection, transfer_encoder, Checkpoint, CheckpointGroup,
    EncoderSpec, PretrainTower, Profile, SegmentationNet, TransferReport,
};
use crate::nn::{softmax_cross_entropy, Param, ParamKind};
use crate::normalize::{normalize_tile, S1_NORMALIZATION_ID, S2_NORMALIZATION_ID};
use crate::rng::{derive_seed, derive_stream, snapshot};
use crate::{Error, Result};

/// Marker file written once a run finishes; a run directory containing it
/// is never reused.
pub const COMPLETE_MARKER: &str = "COMPLETE";
/// Metric log filename inside a run directory.
pub const METRICS_FILE: &str = "metrics.log";
const METRICS_MAGIC: &str = "twinsat-metrics v1";

// ---- learning-rate schedules ----

fn check_schedule(step: usize, total_steps: usize) -> Result<()> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "schedule step {step} beyond total_steps {total_steps}"
        )));
    }
    Ok(())
}

/// Half-cosine decay: base_lr * 0.5 * (1 + cos(pi * step / total)).
///
/// Exactly base_lr at step 0 and exactly 0 at step == total_steps.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    check_schedule(step, total_steps)?;
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Polynomial decay: base_lr * (1 - step / total)^power.
pub fn polynomial_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    check_schedule(step, total_steps)?;
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Config(format!("poly power {power} must be positive")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 - frac).powf(power))
}

// ---- optimizers ----

fn l2_norm(a: &ArrayD<f64>) -> f64 {
    a.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

type ParamVisitor<'a> = dyn FnMut(&mut dyn FnMut(&mut Param)) + 'a;

fn check_grads_finite(params: &mut ParamVisitor) -> Result<()> {
    let mut bad: Option<String> = None;
    params(&mut |p: &mut Param| {
        if bad.is_none() && p.grad.iter().any(|v| !v.is_finite()) {
            bad = Some(format!("gradient of {}", p.name));
        }
    });
    match bad {
        Some(what) => Err(Error::NonFinite(what)),
        None => Ok(()),
    }
}

/// Layer-wise adaptive rate scaling with momentum.
///
/// Per parameter: g' = g + weight_decay * w, then
/// local = trust_coeff * ||w|| / ||g'|| when both norms are positive
/// (1 otherwise), m <- momentum * m + (local * lr) * g', w <- w - m.
/// Biases and norm parameters skip both decay and the trust ratio.
///
/// The whole step is rejected before any parameter moves if some gradient
/// is non-finite, so an aborted step cannot half-update the model.
pub struct Lars {
    pub momentum: f64,
    pub trust_coeff: f64,
    pub weight_decay: f64,
    /// When false every local rate is 1 and the update reduces to
    /// momentum SGD with the lr folded in; used to cross-check the
    /// implementation against plain gradient descent.
    pub trust_adaptation: bool,
    buffers: std::collections::HashMap<String, ArrayD<f64>>,
}

impl Lars {
    pub fn new(momentum: f64, trust_coeff: f64, weight_decay: f64) -> Lars {
        Lars {
            momentum,
            trust_coeff,
            weight_decay,
            trust_adaptation: true,
            buffers: std::collections::HashMap::new(),
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut ParamVisitor) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("lars lr {lr} must be finite and >= 0")));
        }
        check_grads_finite(params)?;
        let mut broken: Option<String> = None;
        params(&mut |p: &mut Param| {
            if broken.is_some() {
                return;
            }
            let excluded = p.kind != ParamKind::Weight;
            let wd = if excluded { 0.0 } else { self.weight_decay };
            let mut gprime = p.grad.clone();
            if wd != 0.0 {
                gprime.zip_mut_with(&p.value, |g, &w| *g += wd * w);
            }
            let local = if excluded || !self.trust_adaptation {
                1.0
            } else {
                let wn = l2_norm(&p.value);
                let gn = l2_norm(&gprime);
                if wn > 0.0 && gn > 0.0 {
                    self.trust_coeff * wn / gn
                } else {
                    1.0
                }
            };
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.shape()));
            if buf.shape() != p.value.shape() {
                broken = Some(format!("momentum buffer shape changed for {}", p.name));
                return;
            }
            let scale = local * lr;
            buf.zip_mut_with(&gprime, |m, &g| *m = self.momentum * *m + scale * g);
            p.value.zip_mut_with(buf, |w, &m| *w -= m);
        });
        match broken {
            Some(msg) => Err(Error::Shape(msg)),
            None => Ok(()),
        }
    }
}

/// Plain momentum SGD: m <- momentum * m + g + weight_decay * w,
/// w <- w - lr * m. Unlike [`Lars`] the lr stays outside the buffer.
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: std::collections::HashMap<String, ArrayD<f64>>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, weight_decay: f64) -> MomentumSgd {
        MomentumSgd { momentum, weight_decay, buffers: std::collections::HashMap::new() }
    }

    pub fn step(&mut self, lr: f64, params: &mut ParamVisitor) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("sgd lr {lr} must be finite and >= 0")));
        }
        check_grads_finite(params)?;
        let mut broken: Option<String> = None;
        params(&mut |p: &mut Param| {
            if broken.is_some() {
                return;
            }
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.shape()));
            if buf.shape() != p.value.shape() {
                broken = Some(format!("momentum buffer shape changed for {}", p.name));
                return;
            }
            let wd = self.weight_decay;
            ndarray::Zip::from(&mut *buf)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|m, &g, &w| *m = self.momentum * *m + g + wd * w);
            p.value.zip_mut_with(buf, |w, &m| *w -= lr * m);
        });
        match broken {
            Some(msg) => Err(Error::Shape(msg)),
            None => Ok(()),
        }
    }
}

// ---- metric log ----

/// One appended line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only line log: `step=N split=S metric=M value=V`.
pub struct MetricLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricLog {
    pub fn create(path: &Path) -> Result<MetricLog> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_MAGIC}").map_err(|e| Error::io(path, e))?;
        Ok(MetricLog { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
        writeln!(self.file, "step={step} split={split} metric={metric} value={value}")
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(first)) if first == METRICS_MAGIC => {}
        _ => return Err(Error::parse(path, format!("missing {METRICS_MAGIC:?} header"))),
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut step = None;
        let mut split = None;
        let mut metric = None;
        let mut value = None;
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("line {}: bad token {tok:?}", lineno + 2)))?;
            match k {
                "step" => step = Some(v.parse::<u64>()),
                "split" => split = Some(v.to_string()),
                "metric" => metric = Some(v.to_string()),
                "value" => value = Some(v.parse::<f64>()),
                other => {
                    return Err(Error::parse(path, format!("line {}: unknown key {other:?}", lineno + 2)))
                }
            }
        }
        let bad = |what: &str| Error::parse(path, format!("line {}: missing {what}", lineno + 2));
        out.push(MetricRecord {
            step: step.ok_or_else(|| bad("step"))?.map_err(|e| Error::parse(path, e.to_string()))?,
            split: split.ok_or_else(|| bad("split"))?,
            metric: metric.ok_or_else(|| bad("metric"))?,
            value: value.ok_or_else(|| bad("value"))?.map_err(|e| Error::parse(path, e.to_string()))?,
        });
    }
    Ok(out)
}

/// Extract one (step, value) series from a record list.
pub fn metric_series(records: &[MetricRecord], split: &str, metric: &str) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| r.split == split && r.metric == metric)
        .map(|r| (r.step, r.value))
        .collect()
}

// ---- dataset loading ----

/// A normalized positive pair held in memory, pixels on [0, 255] HWC.
pub struct PairItem {
    pub id: String,
    pub s1: Array3<f32>,
    pub s2: Array3<f32>,
}

/// A normalized tile of one modality with its label map.
pub struct SegItem {
    pub id: String,
    pub image: Array3<f32>,
    pub labels: LabelMap,
}

fn expected_normalization(m: Modality) -> &'static str {
    match m {
        Modality::S1 => S1_NORMALIZATION_ID,
        Modality::S2 => S2_NORMALIZATION_ID,
    }
}

/// Read one tile and bring it onto the shared [0, 255] scale. Raw tiles
/// are normalized here; tiles that already carry the right normalization
/// id pass through, anything else is refused.
fn load_normalized(base_dir: &Path, uri: &str, want: Modality) -> Result<Array3<f32>> {
    let tile = read_tile(&base_dir.join(uri))?;
    if tile.modality != want {
        return Err(Error::Validation(format!(
            "tile {uri} is {}, manifest slot says {want}",
            tile.modality
        )));
    }
    match &tile.normalization {
        None => Ok(normalize_tile(&tile)?.pixels),
        Some(id) if id == expected_normalization(want) => Ok(tile.pixels),
        Some(id) => Err(Error::Validation(format!(
            "tile {uri} carries normalization {id:?}, expected {:?} or raw",
            expected_normalization(want)
        ))),
    }
}

/// Load every pair of a manifest into memory. Label files are deliberately
/// not read here; this is the only loader the pre-training path uses.
pub fn load_pair_tiles(manifest: &DatasetManifest, base_dir: &Path) -> Result<Vec<PairItem>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let s1_uri = e.s1_uri.as_deref().ok_or_else(|| {
            Error::Validation(format!("entry {} has no radar tile; pre-training needs full pairs", e.id))
        })?;
        let s2_uri = e.s2_uri.as_deref().ok_or_else(|| {
            Error::Validation(format!("entry {} has no optical tile; pre-training needs full pairs", e.id))
        })?;
        out.push(PairItem {
            id: e.id.clone(),
            s1: load_normalized(base_dir, s1_uri, Modality::S1)?,
            s2: load_normalized(base_dir, s2_uri, Modality::S2)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("manifest {} has no entries", manifest.name)));
    }
    Ok(out)
}

/// Load the labeled subset of a manifest for one downstream modality.
/// Unlabeled entries are skipped; an entirely unlabeled manifest is an
/// error since nothing could train on it.
pub fn load_seg_tiles(
    manifest: &DatasetManifest,
    base_dir: &Path,
    modality: Modality,
    num_classes: usize,
) -> Result<Vec<SegItem>> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        let Some(label_uri) = e.label_uri.as_deref() else { continue };
        let uri = match modality {
            Modality::S1 => e.s1_uri.as_deref(),
            Modality::S2 => e.s2_uri.as_deref(),
        };
        let uri = uri.ok_or_else(|| {
            Error::Validation(format!("entry {} has labels but no {modality} tile", e.id))
        })?;
        let image = load_normalized(base_dir, uri, modality)?;
        let labels = read_labels(&base_dir.join(label_uri))?;
        let (h, w, _c) = image.dim();
        if labels.classes.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "entry {}: labels {:?} do not cover tile {h}x{w}",
                e.id,
                labels.classes.dim()
            )));
        }
        if labels.num_classes != num_classes {
            return Err(Error::Validation(format!(
                "entry {}: labels declare {} classes, run expects {num_classes}",
                e.id, labels.num_classes
            )));
        }
        out.push(SegItem { id: e.id.clone(), image, labels });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!(
            "manifest {} has no labeled entries for {modality}",
            manifest.name
        )));
    }
    Ok(out)
}

// ---- batch assembly ----

/// Without-replacement sampler, reshuffled each epoch from its own derived
/// stream so data order replays exactly for a given seed.
struct EpochSampler {
    n: usize,
    batch: usize,
    seed: u64,
    drop_partial: bool,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize, batch: usize, seed: u64, drop_partial: bool) -> EpochSampler {
        let mut s = EpochSampler { n, batch, seed, drop_partial, epoch: 0, order: Vec::new(), cursor: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.n).collect();
        let mut rng = derive_stream(self.seed, &format!("epoch/{}", self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let remaining = self.n - self.cursor;
        let too_few = if self.drop_partial { remaining < self.batch } else { remaining == 0 };
        if too_few {
            self.epoch += 1;
            self.reshuffle();
        }
        let take = self.batch.min(self.n - self.cursor);
        let out = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        out
    }
}

/// Stack HWC [0, 255] views into the NCHW [0, 1] f64 batch the encoders eat.
fn to_input_batch(views: &[Array3<f32>]) -> Result<Array4<f64>> {
    let first = views.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (h, w, c) = first.dim();
    let mut out = Array4::<f64>::zeros((views.len(), c, h, w));
    for (i, v) in views.iter().enumerate() {
        if v.dim() != (h, w, c) {
            return Err(Error::Shape(format!(
                "batch mixes view shapes {:?} and {:?}",
                (h, w, c),
                v.dim()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[i, ch, y, x]] = f64::from(v[[y, x, ch]]) / 255.0;
                }
            }
        }
    }
    Ok(out)
}

// ---- pre-training ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainObjective {
    /// Dual towers, one per sensor, pulled together across modalities.
    Multimodal,
    /// Single radar tower on two augmented views of the same tile.
    SimclrS1,
    /// Single optical tower on two augmented views.
    SimclrS2,
}

impl fmt::Display for PretrainObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretrainObjective::Multimodal => "multimodal",
            PretrainObjective::SimclrS1 => "simclr_s1",
            PretrainObjective::SimclrS2 => "simclr_s2",
        })
    }
}

impl FromStr for PretrainObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<PretrainObjective> {
        match s {
            "multimodal" => Ok(PretrainObjective::Multimodal),
            "simclr_s1" => Ok(PretrainObjective::SimclrS1),
            "simclr_s2" => Ok(PretrainObjective::SimclrS2),
            other => Err(Error::Config(format!(
                "unknown objective {other:?}; expected multimodal, simclr_s1 or simclr_s2"
            ))),
        }
    }
}

impl PretrainObjective {
    /// Default augmentation recipe: spatial-only for the cross-modal
    /// objective, the full single-sensor recipe otherwise.
    pub fn default_augmentation(self) -> &'static str {
        match self {
            PretrainObjective::Multimodal => "multimodal_spatial",
            PretrainObjective::SimclrS1 => "simclr_s1",
            PretrainObjective::SimclrS2 => "simclr_s2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub objective: PretrainObjective,
    pub profile: Profile,
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub momentum: f64,
    pub trust_coeff: f64,
    pub crop_size: usize,
    /// Augmentation preset override; the objective picks its default when
    /// this is empty.
    pub augmentation: Option<String>,
    /// Cadence in steps for numbered checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batches need at least 2 pairs".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.trust_coeff > 0.0) || !self.trust_coeff.is_finite() {
            return Err(Error::Config(format!("trust_coeff {} must be positive", self.trust_coeff)));
        }
        if self.crop_size < 8 {
            return Err(Error::Config(format!("crop_size {} too small", self.crop_size)));
        }
        Ok(())
    }

    fn augmentation_name(&self) -> &str {
        self.augmentation.as_deref().unwrap_or_else(|| self.objective.default_augmentation())
    }
}

/// Lowercase stream and group suffix for one sensor.
fn side(m: Modality) -> &'static str {
    match m {
        Modality::S1 => "s1",
        Modality::S2 => "s2",
    }
}

enum Towers {
    Dual { s1: PretrainTower, s2: PretrainTower },
    Single { tower: PretrainTower, modality: Modality },
}

impl Towers {
    fn build(cfg: &PretrainConfig) -> Result<Towers> {
        let spec = |m: Modality| EncoderSpec { profile: cfg.profile, input_channels: m.channels() };
        let init = |t: &mut PretrainTower, m: Modality| {
            t.init(derive_seed(cfg.seed, &format!("tower/{}", side(m))));
        };
        match cfg.objective {
            PretrainObjective::Multimodal => {
                let mut s1 = PretrainTower::new(spec(Modality::S1))?;
                let mut s2 = PretrainTower::new(spec(Modality::S2))?;
                init(&mut s1, Modality::S1);
                init(&mut s2, Modality::S2);
                Ok(Towers::Dual { s1, s2 })
            }
            PretrainObjective::SimclrS1 | PretrainObjective::SimclrS2 => {
                let m = if cfg.objective == PretrainObjective::SimclrS1 {
                    Modality::S1
                } else {
                    Modality::S2
                };
                let mut tower = PretrainTower::new(spec(m))?;
                init(&mut tower, m);
                Ok(Towers::Single { tower, modality: m })
            }
        }
    }

    fn snapshot_groups(&mut self) -> Vec<CheckpointGroup> {
        match self {
            Towers::Dual { s1, s2 } => vec![
                snapshot_encoder(&mut s1.encoder, "encoder_s1"),
                snapshot_projection(&mut s1.proj, "projection_s1"),
                snapshot_encoder(&mut s2.encoder, "encoder_s2"),
                snapshot_projection(&mut s2.proj, "projection_s2"),
            ],
            Towers::Single { tower, modality } => vec![
                snapshot_encoder(&mut tower.encoder, &format!("encoder_{}", side(*modality))),
                snapshot_projection(&mut tower.proj, &format!("projection_{}", side(*modality))),
            ],
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

fn guard_fresh_run_dir(out_dir: &Path) -> Result<()> {
    let marker = out_dir.join(COMPLETE_MARKER);
    if marker.exists() {
        return Err(Error::Validation(format!(
            "run directory {} is already complete; pick a fresh one",
            out_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

fn write_complete(out_dir: &Path, body: &str) -> Result<()> {
    let path = out_dir.join(COMPLETE_MARKER);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

fn abort(step: usize, what: impl Into<String>) -> Error {
    Error::TrainAbort { step: step as u64, msg: what.into() }
}

/// Contrastive pre-training over paired tiles.
///
/// Writes `metrics.log`, cadence checkpoints, `final.ckpt` and a COMPLETE
/// marker into `out_dir` and returns the final loss. Aborts on the first
/// non-finite loss or gradient, keeping the latest cadence checkpoint.
pub fn pretrain(
    cfg: &PretrainConfig,
    manifest: &DatasetManifest,
    base_dir: &Path,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    guard_fresh_run_dir(out_dir)?;
    let pairs = load_pair_tiles(manifest, base_dir)?;
    if pairs.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "batch_size {} exceeds the {} available pairs",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let pipe = build_pipeline(cfg.augmentation_name(), (cfg.crop_size, cfg.crop_size))?;
    let mut towers = Towers::build(cfg)?;
    // Tower parameter names collide across towers, so each tower gets its
    // own optimizer state.
    let mut opt_a = Lars::new(cfg.momentum, cfg.trust_coeff, cfg.weight_decay);
    let mut opt_b = Lars::new(cfg.momentum, cfg.trust_coeff, cfg.weight_decay);
    let mut sampler = EpochSampler::new(pairs.len(), cfg.batch_size, cfg.seed, true);
    let mut log = MetricLog::create(&out_dir.join(METRICS_FILE))?;

    let mut last_loss = f64::NAN;
    for step in 1..=cfg.total_steps {
        let idx = sampler.next_batch();
        let lr = cosine_lr(step - 1, cfg.total_steps, cfg.base_lr)?;

        let loss = match &mut towers {
            Towers::Dual { s1, s2 } => {
                let mut va = Vec::with_capacity(idx.len());
                let mut vb = Vec::with_capacity(idx.len());
                for (slot, &i) in idx.iter().enumerate() {
                    let mut ra = derive_stream(cfg.seed, &format!("aug/{step}/{slot}/s1"));
                    let mut rb = derive_stream(cfg.seed, &format!("aug/{step}/{slot}/s2"));
                    va.push(pipe.apply(&pairs[i].s1, &mut ra)?);
                    vb.push(pipe.apply(&pairs[i].s2, &mut rb)?);
                }
                let xa = to_input_batch(&va)?;
                let xb = to_input_batch(&vb)?;
                let za = s1.forward(&xa)?;
                let zb = s2.forward(&xb)?;
                let out = multimodal_nce(&za, &zb, cfg.temperature, Reduction::Mean)
                    .map_err(|e| abort(step, e.to_string()))?;
                if !out.loss.is_finite() {
                    return Err(abort(step, format!("loss became {}", out.loss)));
                }
                s1.zero_grads();
                s2.zero_grads();
                s1.backward(&out.grad_x);
                s2.backward(&out.grad_y);
                opt_a
                    .step(lr, &mut |f| s1.for_each_param(f))
                    .map_err(|e| abort(step, e.to_string()))?;
                opt_b
                    .step(lr, &mut |f| s2.for_each_param(f))
                    .map_err(|e| abort(step, e.to_string()))?;
                out.loss
            }
            Towers::Single { tower, modality } => {
                // Both views go through the tower as one concatenated batch
                // so a single backward pass sees every gradient path.
                let n = idx.len();
                let mut views = Vec::with_capacity(2 * n);
                for (slot, &i) in idx.iter().enumerate() {
                    let mut r = derive_stream(cfg.seed, &format!("aug/{step}/{slot}/v1"));
                    views.push(pipe.apply(pairs[i].tile(*modality), &mut r)?);
                }
                for (slot, &i) in idx.iter().enumerate() {
                    let mut r = derive_stream(cfg.seed, &format!("aug/{step}/{slot}/v2"));
                    views.push(pipe.apply(pairs[i].tile(*modality), &mut r)?);
                }
                let x = to_input_batch(&views)?;
                let z = tower.forward(&x)?;
                let z1 = z.slice(ndarray::s![..n, ..]).to_owned();
                let z2 = z.slice(ndarray::s![n.., ..]).to_owned();
                let out =
                    ntxent(&z1, &z2, cfg.temperature).map_err(|e| abort(step, e.to_string()))?;
                if !out.loss.is_finite() {
                    return Err(abort(step, format!("loss became {}", out.loss)));
                }
                let mut dz = Array2::<f64>::zeros((2 * n, z.ncols()));
                dz.slice_mut(ndarray::s![..n, ..]).assign(&out.grad_x);
                dz.slice_mut(ndarray::s![n.., ..]).assign(&out.grad_y);
                tower.zero_grads();
                tower.backward(&dz);
                opt_a
                    .step(lr, &mut |f| tower.for_each_param(f))
                    .map_err(|e| abort(step, e.to_string()))?;
                out.loss
            }
        };
        last_loss = loss;
        log.append(step as u64, "train", "nce_loss", loss)?;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps {
            save_pretrain_checkpoint(&mut towers, cfg, step, &out_dir.join(format!("step_{step:06}.ckpt")))?;
        }
    }

    let final_path = out_dir.join("final.ckpt");
    save_pretrain_checkpoint(&mut towers, cfg, cfg.total_steps, &final_path)?;
    write_complete(
        out_dir,
        &format!("status=complete steps={} final_loss={last_loss}\n", cfg.total_steps),
    )?;
    Ok(PretrainOutcome {
        steps_run: cfg.total_steps,
        final_loss: last_loss,
        final_checkpoint: final_path,
        metrics_path: out_dir.join(METRICS_FILE),
    })
}

impl PairItem {
    fn tile(&self, m: Modality) -> &Array3<f32> {
        match m {
            Modality::S1 => &self.s1,
            Modality::S2 => &self.s2,
        }
    }
}

fn save_pretrain_checkpoint(
    towers: &mut Towers,
    cfg: &PretrainConfig,
    step: usize,
    path: &Path,
) -> Result<()> {
    let data_rng = derive_stream(cfg.seed, &format!("epoch/{step}"));
    let ckpt = Checkpoint {
        step: step as u64,
        groups: towers.snapshot_groups(),
        rng: vec![("data_order".into(), snapshot(&data_rng))],
    };
    ckpt.save(path)
}

// ---- fine-tuning ----

/// Where the downstream encoder starts from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSpec {
    Random,
    /// A named encoder group out of a saved checkpoint; 3-channel weights
    /// adapt to other channel counts by first-layer averaging.
    Checkpoint { path: PathBuf, group: String },
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub profile: Profile,
    pub downstream: Modality,
    pub num_classes: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Name recorded in results, e.g. "random" or "multimodal".
    pub init_name: String,
    pub init: InitSpec,
    /// Fraction bookkeeping for the results file; the actual subset is
    /// `subset_ids`.
    pub fraction: f64,
    pub set_index: usize,
    /// When present, restrict training to these manifest entry ids.
    pub subset_ids: Option<Vec<String>>,
    pub eval_every: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("segmentation needs at least 2 classes".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, total_steps and eval_every must be positive".into(),
            ));
        }
        if self.crop_size < 16 {
            return Err(Error::Config(format!(
                "crop_size {} below the stride-16 minimum",
                self.crop_size
            )));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.poly_power > 0.0) || !self.poly_power.is_finite() {
            return Err(Error::Config(format!("poly_power {} must be positive", self.poly_power)));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.init_name.is_empty() {
            return Err(Error::Config("init_name must not be empty".into()));
        }
        Ok(())
    }
}

/// Build the downstream network and apply the configured initialization.
/// The decoder always starts fresh; only encoder weights transfer.
pub fn init_segmentation_net(
    cfg: &FinetuneConfig,
) -> Result<(SegmentationNet, Option<TransferReport>)> {
    let spec = EncoderSpec { profile: cfg.profile, input_channels: cfg.downstream.channels() };
    let mut net = SegmentationNet::new(spec, cfg.num_classes)?;
    net.init(derive_seed(cfg.seed, "finetune/init"));
    match &cfg.init {
        InitSpec::Random => Ok((net, None)),
        InitSpec::Checkpoint { path, group } => {
            let ckpt = Checkpoint::load(path)?;
            let report = transfer_encoder(&ckpt, group, &mut net.encoder)?;
            Ok((net, Some(report)))
        }
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub best_val_mean_iou: f64,
    pub peak_step: u64,
    pub best_checkpoint: PathBuf,
    pub results_path: PathBuf,
    pub final_train_loss: f64,
    pub transfer: Option<TransferReport>,
}

fn check_split(manifest: &DatasetManifest, want: Split, role: &str) -> Result<()> {
    if manifest.split != want {
        return Err(Error::Validation(format!(
            "{role} manifest {} carries split tag {}, refusing to use it as {want}",
            manifest.name, manifest.split
        )));
    }
    Ok(())
}

fn apply_subset(items: Vec<SegItem>, ids: &[String]) -> Result<Vec<SegItem>> {
    let want: HashSet<&str> = ids.iter().map(String::as_str).collect();
    if want.len() != ids.len() {
        return Err(Error::Validation("subset ids contain duplicates".into()));
    }
    let have: HashSet<&str> = items.iter().map(|it| it.id.as_str()).collect();
    for id in &want {
        if !have.contains(id) {
            return Err(Error::Validation(format!(
                "subset id {id:?} is not a labeled entry of the train manifest"
            )));
        }
    }
    Ok(items.into_iter().filter(|it| want.contains(it.id.as_str())).collect())
}

/// Random label-aligned window of one item; images crop together with
/// their labels, so no resampling and no flips here.
fn window_crop(
    item: &SegItem,
    crop: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Array3<f32>, Array2<u8>) {
    use rand::Rng;
    let (h, w, _c) = item.image.dim();
    let y0 = if h > crop { rng.random_range(0..=h - crop) } else { 0 };
    let x0 = if w > crop { rng.random_range(0..=w - crop) } else { 0 };
    let img = item.image.slice(ndarray::s![y0..y0 + crop, x0..x0 + crop, ..]).to_owned();
    let lab = item.labels.classes.slice(ndarray::s![y0..y0 + crop, x0..x0 + crop]).to_owned();
    (img, lab)
}

fn eval_mean_iou(
    net: &mut SegmentationNet,
    items: &[SegItem],
    batch: usize,
    num_classes: usize,
) -> Result<(f64, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(num_classes)?;
    for chunk in items.chunks(batch) {
        let views: Vec<Array3<f32>> = chunk.iter().map(|it| it.image.clone()).collect();
        let x = to_input_batch(&views)?;
        let logits = net.forward(&x)?;
        let (_b, _k, h, w) = logits.dim();
        for (bi, it) in chunk.iter().enumerate() {
            let mut pred = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x2 in 0..w {
                    let mut best = 0usize;
                    let mut best_v = logits[[bi, 0, y, x2]];
                    for k in 1..num_classes {
                        let v = logits[[bi, k, y, x2]];
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    pred[[y, x2]] = best as u8;
                }
            }
            let pred_map = LabelMap::new(pred, num_classes)?;
            cm.accumulate(&pred_map, &it.labels)?;
        }
    }
    let miou = cm
        .mean_iou()
        .ok_or_else(|| Error::Validation("validation pass produced no defined classes".into()))?;
    Ok((miou, cm))
}

/// Supervised segmentation fine-tuning with best-validation checkpointing.
///
/// Trains on the labeled subset of a train-split manifest, evaluates the
/// full validation manifest every `eval_every` steps and at the end, and
/// keeps the strictly best checkpoint. Results land next to the metrics
/// log in `out_dir`.
pub fn finetune(
    cfg: &FinetuneConfig,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    base_dir: &Path,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_split(train_manifest, Split::Train, "train")?;
    check_split(val_manifest, Split::Validation, "validation")?;
    guard_fresh_run_dir(out_dir)?;

    let mut train_items =
        load_seg_tiles(train_manifest, base_dir, cfg.downstream, cfg.num_classes)?;
    if let Some(ids) = &cfg.subset_ids {
        train_items = apply_subset(train_items, ids)?;
        if train_items.is_empty() {
            return Err(Error::Validation("subset selects no training items".into()));
        }
    }
    let val_items = load_seg_tiles(val_manifest, base_dir, cfg.downstream, cfg.num_classes)?;
    for it in train_items.iter().chain(val_items.iter()) {
        let (h, w, _c) = it.image.dim();
        if h < cfg.crop_size || w < cfg.crop_size {
            return Err(Error::Validation(format!(
                "tile {} is {h}x{w}, smaller than crop_size {}",
                it.id, cfg.crop_size
            )));
        }
    }

    let (mut net, transfer) = init_segmentation_net(cfg)?;
    let mut opt = MomentumSgd::new(cfg.momentum, cfg.weight_decay);
    let mut sampler = EpochSampler::new(train_items.len(), cfg.batch_size, cfg.seed, false);
    let mut log = MetricLog::create(&out_dir.join(METRICS_FILE))?;
    let best_path = out_dir.join("best.ckpt");

    let mut best: Option<(f64, ConfusionMatrix)> = None;
    let mut val_series: Vec<(u64, f64)> = Vec::new();
    let mut last_train_loss = f64::NAN;

    for step in 1..=cfg.total_steps {
        let idx = sampler.next_batch();
        let mut views = Vec::with_capacity(idx.len());
        let mut labels = Array3::<u8>::zeros((idx.len(), cfg.crop_size, cfg.crop_size));
        for (slot, &i) in idx.iter().enumerate() {
            let mut rng = derive_stream(cfg.seed, &format!("crop/{step}/{slot}"));
            let (img, lab) = window_crop(&train_items[i], cfg.crop_size, &mut rng);
            labels.index_axis_mut(Axis(0), slot).assign(&lab);
            views.push(img);
        }
        let x = to_input_batch(&views)?;
        let logits = net.forward(&x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX)
            .map_err(|e| abort(step, e.to_string()))?;
        if !loss.is_finite() {
            return Err(abort(step, format!("loss became {loss}")));
        }
        net.zero_grads();
        net.backward(&dlogits);
        let lr = polynomial_lr(step - 1, cfg.total_steps, cfg.base_lr, cfg.poly_power)?;
        opt.step(lr, &mut |f| net.for_each_param(f)).map_err(|e| abort(step, e.to_string()))?;
        last_train_loss = loss;
        log.append(step as u64, "train", "ce_loss", loss)?;

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let (miou, cm) = eval_mean_iou(&mut net, &val_items, cfg.batch_size, cfg.num_classes)?;
            log.append(step as u64, "validation", "mean_iou", miou)?;
            val_series.push((step as u64, miou));
            let improved = best.as_ref().map_or(true, |(b, _)| miou > *b);
            if improved {
                best = Some((miou, cm));
                let ckpt = Checkpoint {
                    step: step as u64,
                    groups: net.snapshot_groups(),
                    rng: Vec::new(),
                };
                ckpt.save(&best_path)?;
            }
        }
    }

    let (best_miou, best_cm) = best.expect("final step always evaluates");
    let peak_step = eval::steps_to_peak(&val_series)?;

    let mut results = Vec::new();
    let mut push = |metric: String, value: f64| {
        results.push(RunResult {
            dataset: train_manifest.name.clone(),
            init: cfg.init_name.clone(),
            fraction: cfg.fraction,
            set_index: cfg.set_index,
            metric,
            value,
            peak_step,
        });
    };
    push("mean_iou".into(), best_miou);
    push("overall_accuracy".into(), best_cm.overall_accuracy()?);
    for (c, iou) in best_cm.per_class_iou().iter().enumerate() {
        if let Some(v) = iou {
            push(format!("per_class_iou[{c}]"), *v);
        }
    }
    let results_path = out_dir.join("results.txt");
    eval::write_results(&results, &results_path)?;
    write_complete(
        out_dir,
        &format!("status=complete steps={} best_mean_iou={best_miou} peak_step={peak_step}\n", cfg.total_steps),
    )?;
    Ok(FinetuneOutcome {
        best_val_mean_iou: best_miou,
        peak_step,
        best_checkpoint: best_path,
        results_path,
        final_train_loss: last_train_loss,
        transfer,
    })
}

// ---- learning-rate sweep ----

pub struct SweepOutcome {
    pub chosen_lr: f64,
    /// Every grid point with its best validation mean IoU; None marks a
    /// diverged run.
    pub tried: Vec<(f64, Option<f64>)>,
}

/// Run the fixed lr grid on the full train split and pick the winner.
/// Diverged runs drop out of contention instead of failing the sweep.
pub fn run_lr_sweep(
    base: &FinetuneConfig,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    base_dir: &Path,
    out_root: &Path,
) -> Result<SweepOutcome> {
    let mut tried = Vec::new();
    for &lr in SWEEP_LRS.iter() {
        let mut cfg = base.clone();
        cfg.base_lr = lr;
        let out_dir = out_root.join(format!("lr_{lr:e}"));
        match finetune(&cfg, train_manifest, val_manifest, base_dir, &out_dir) {
            Ok(o) => tried.push((lr, Some(o.best_val_mean_iou))),
            Err(Error::TrainAbort { .. }) => tried.push((lr, None)),
            Err(e) => return Err(e),
        }
    }
    let chosen_lr = eval::pick_sweep_lr(&tried)?;
    Ok(SweepOutcome { chosen_lr, tried })
}
