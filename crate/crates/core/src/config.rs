//! Experiment configuration: one TOML document drives every command.
//!
//! Precedence is flag over file over built-in default. The driver mutates
//! the loaded document with its flag overrides and then calls
//! [`ExperimentConfig::resolved`]; the result, with every computed default
//! filled in, is what gets frozen into the run directory, so a finished
//! run can be replayed from its frozen config alone.
//!
//! Unknown keys anywhere in the document are rejected. Range checks live
//! in [`ExperimentConfig::validate`]; checks that touch the filesystem
//! (checkpoints, manifests, split files) happen when a command resolves
//! the section it actually uses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::Modality;
use crate::model::Profile;
use crate::pairing::{read_splits, SplitPlan};
use crate::synthetic::SceneRecipe;
use crate::trainer::{FinetuneConfig, InitSpec, PretrainConfig, PretrainObjective};
use crate::{Error, Result};

/// Environment variable holding the default data root; a `data_root` key
/// in the document wins over it, a flag wins over both.
pub const DATA_ROOT_ENV: &str = "TWINSAT_DATA_ROOT";
/// Filename of the frozen copy inside a run directory.
pub const FROZEN_CONFIG: &str = "config.toml";

/// Reference batch size the published base learning rate belongs to.
const REFERENCE_BATCH: f64 = 4096.0;
const REFERENCE_LR: f64 = 0.48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Base directory for manifests, tiles and catalogs; falls back to the
    /// environment variable, then the working directory.
    pub data_root: Option<PathBuf>,
    pub synth: SynthSection,
    pub pair: PairSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            data_root: None,
            synth: SynthSection::default(),
            pair: PairSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_pairs: usize,
    pub labeled_fraction: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { n_pairs: 2000, labeled_fraction: 1.0, height: 64, width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSection {
    /// Scene catalogs, relative to the data root.
    pub s1_catalog: PathBuf,
    pub s2_catalog: PathBuf,
    /// Region polygons anchors are sampled from.
    pub regions: PathBuf,
    pub n_anchors: usize,
    /// Anchor timestamp range, unix seconds, half-open.
    pub t_start: i64,
    pub t_end: i64,
    /// Name stamped on the emitted pair manifest.
    pub manifest_name: String,
}

impl Default for PairSection {
    fn default() -> Self {
        PairSection {
            s1_catalog: "catalog_s1.txt".into(),
            s2_catalog: "catalog_s2.txt".into(),
            regions: "regions.txt".into(),
            n_anchors: 256,
            // Calendar year 2022.
            t_start: 1_640_995_200,
            t_end: 1_672_531_200,
            manifest_name: "paired".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub objective: String,
    pub profile: String,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Defaults to the published 0.48 rescaled linearly by batch/4096.
    pub base_lr: Option<f64>,
    pub weight_decay: f64,
    pub temperature: f64,
    pub momentum: f64,
    pub trust_coeff: f64,
    pub crop_size: usize,
    /// Augmentation preset override; empty means the objective's default.
    pub augmentation: Option<String>,
    pub checkpoint_every: usize,
    /// Training manifest, relative to the data root.
    pub manifest: PathBuf,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            objective: "multimodal".into(),
            profile: "tiny".into(),
            batch_size: 256,
            total_steps: 2000,
            base_lr: None,
            weight_decay: 1e-4,
            temperature: 0.1,
            momentum: 0.9,
            trust_coeff: 0.001,
            crop_size: 64,
            augmentation: None,
            checkpoint_every: 500,
            manifest: "train.manifest".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub profile: String,
    /// Which sensor the downstream task consumes: "s1" or "s2".
    pub downstream: String,
    pub num_classes: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// random | imagenet_adapted | simclr_ckpt | multimodal_ckpt.
    pub init: String,
    /// Checkpoint file for the non-random kinds, relative to the data root.
    pub init_checkpoint: Option<PathBuf>,
    /// Encoder group to transfer; defaults to the downstream sensor's
    /// group for the contrastive kinds.
    pub init_group: Option<String>,
    pub fraction: f64,
    pub set_index: usize,
    /// Subset definitions from the sub-sampling protocol; required when
    /// fraction < 1.
    pub splits_file: Option<PathBuf>,
    pub eval_every: usize,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            profile: "tiny".into(),
            downstream: "s1".into(),
            num_classes: 6,
            batch_size: 64,
            crop_size: 64,
            total_steps: 1000,
            base_lr: 0.01,
            weight_decay: 1e-6,
            momentum: 0.9,
            poly_power: 0.9,
            init: "random".into(),
            init_checkpoint: None,
            init_group: None,
            fraction: 1.0,
            set_index: 0,
            splits_file: None,
            eval_every: 100,
            train_manifest: "train.manifest".into(),
            val_manifest: "validation.manifest".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Directory scanned (one level deep) for finished fine-tune runs.
    pub runs_root: PathBuf,
    /// Headline metric for the aggregated table.
    pub metric: String,
    /// Init names whose per-class IoU difference the delta report takes,
    /// a minus b.
    pub delta_init_a: String,
    pub delta_init_b: String,
    /// Label fraction the delta report is computed at.
    pub delta_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            runs_root: "runs".into(),
            metric: "mean_iou".into(),
            delta_init_a: "multimodal_ckpt".into(),
            delta_init_b: "simclr_ckpt".into(),
            delta_fraction: 0.01,
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "s1" => Ok(Modality::S1),
        "s2" => Ok(Modality::S2),
        other => Err(Error::Config(format!("unknown downstream sensor {other:?}; use s1 or s2"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Data root after precedence: document value, then the environment
    /// variable, then the working directory.
    pub fn resolve_data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Copy of the document with every computed default made explicit;
    /// this is what run directories freeze.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.data_root = Some(self.resolve_data_root());
        out.pretrain.base_lr = Some(self.pretrain_base_lr());
        out
    }

    /// Write the resolved document into a run directory.
    pub fn freeze_into(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(FROZEN_CONFIG);
        self.resolved().save(&path)?;
        Ok(path)
    }

    /// Linear batch-size rescaling of the published learning rate unless
    /// the document pins one.
    pub fn pretrain_base_lr(&self) -> f64 {
        self.pretrain
            .base_lr
            .unwrap_or(REFERENCE_LR * self.pretrain.batch_size as f64 / REFERENCE_BATCH)
    }

    /// Range-check every section without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.scene_recipe().validate()?;
        if !(0.0..=1.0).contains(&self.synth.labeled_fraction) {
            return Err(Error::Config(format!(
                "labeled_fraction {} outside [0, 1]",
                self.synth.labeled_fraction
            )));
        }
        if self.synth.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be positive".into()));
        }
        if self.pair.t_start >= self.pair.t_end {
            return Err(Error::Config(format!(
                "anchor time range [{}, {}) is empty",
                self.pair.t_start, self.pair.t_end
            )));
        }
        if self.pair.n_anchors == 0 {
            return Err(Error::Config("n_anchors must be positive".into()));
        }
        self.pretrain_config()?.validate()?;
        // Use a placeholder init so the range checks run without a
        // checkpoint on disk.
        self.finetune_config_with(InitSpec::Random)?.validate()?;
        match self.eval.metric.as_str() {
            "mean_iou" | "overall_accuracy" => {}
            other => {
                return Err(Error::Config(format!(
                    "eval metric {other:?} is not aggregatable; use mean_iou or overall_accuracy"
                )))
            }
        }
        if !(self.eval.delta_fraction > 0.0 && self.eval.delta_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "delta_fraction {} outside (0, 1]",
                self.eval.delta_fraction
            )));
        }
        Ok(())
    }

    /// The synthetic recipe: the standard class table at the configured
    /// tile size, keyed by the experiment seed.
    pub fn scene_recipe(&self) -> SceneRecipe {
        let mut r = SceneRecipe::standard(self.seed);
        r.height = self.synth.height;
        r.width = self.synth.width;
        r
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let objective: PretrainObjective = self.pretrain.objective.parse()?;
        let profile: Profile = self.pretrain.profile.parse()?;
        Ok(PretrainConfig {
            objective,
            profile,
            batch_size: self.pretrain.batch_size,
            total_steps: self.pretrain.total_steps,
            base_lr: self.pretrain_base_lr(),
            weight_decay: self.pretrain.weight_decay,
            temperature: self.pretrain.temperature,
            momentum: self.pretrain.momentum,
            trust_coeff: self.pretrain.trust_coeff,
            crop_size: self.pretrain.crop_size,
            augmentation: self.pretrain.augmentation.clone(),
            checkpoint_every: self.pretrain.checkpoint_every,
            seed: self.seed,
        })
    }

    fn finetune_config_with(&self, init: InitSpec) -> Result<FinetuneConfig> {
        let profile: Profile = self.finetune.profile.parse()?;
        let downstream = parse_modality(&self.finetune.downstream)?;
        Ok(FinetuneConfig {
            profile,
            downstream,
            num_classes: self.finetune.num_classes,
            batch_size: self.finetune.batch_size,
            crop_size: self.finetune.crop_size,
            total_steps: self.finetune.total_steps,
            base_lr: self.finetune.base_lr,
            weight_decay: self.finetune.weight_decay,
            momentum: self.finetune.momentum,
            poly_power: self.finetune.poly_power,
            init_name: self.finetune.init.clone(),
            init,
            fraction: self.finetune.fraction,
            set_index: self.finetune.set_index,
            subset_ids: None,
            eval_every: self.finetune.eval_every,
            seed: self.seed,
        })
    }

    /// Resolve the init kind against the filesystem and derive the group
    /// name from the downstream sensor where the kind implies it.
    pub fn resolve_init(&self) -> Result<InitSpec> {
        let need_checkpoint = |default_group: String| -> Result<InitSpec> {
            let rel = self.finetune.init_checkpoint.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "init {:?} needs init_checkpoint to point at a saved encoder",
                    self.finetune.init
                ))
            })?;
            let path = self.resolve_data_root().join(rel);
            if !path.is_file() {
                return Err(Error::Validation(format!(
                    "init checkpoint {} does not exist",
                    path.display()
                )));
            }
            let group = self.finetune.init_group.clone().unwrap_or(default_group);
            Ok(InitSpec::Checkpoint { path, group })
        };
        let side_group = || format!("encoder_{}", self.finetune.downstream);
        match self.finetune.init.as_str() {
            "random" => Ok(InitSpec::Random),
            "simclr_ckpt" | "multimodal_ckpt" => need_checkpoint(side_group()),
            // An externally converted supervised RGB encoder; the channel
            // adapter handles 2-channel downstream inputs.
            "imagenet_adapted" => need_checkpoint("encoder".into()),
            other => Err(Error::Config(format!(
                "unknown init {other:?}; use random, imagenet_adapted, simclr_ckpt or multimodal_ckpt"
            ))),
        }
    }

    /// Fine-tune config with the init resolved; `fraction`, `set_index`
    /// and `seed` overrides land before subset resolution.
    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let init = self.resolve_init()?;
        let mut cfg = self.finetune_config_with(init)?;
        cfg.subset_ids = self.resolve_subset()?;
        Ok(cfg)
    }

    /// Member ids for the configured (fraction, set_index), or None for
    /// the full training split.
    fn resolve_subset(&self) -> Result<Option<Vec<String>>> {
        if self.finetune.fraction >= 1.0 {
            return Ok(None);
        }
        let rel = self.finetune.splits_file.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "fraction {} needs splits_file from the sub-sampling protocol",
                self.finetune.fraction
            ))
        })?;
        let path = self.resolve_data_root().join(rel);
        let plans = read_splits(&path)?;
        let plan: &SplitPlan = plans
            .iter()
            .find(|p| {
                p.fraction == self.finetune.fraction && p.set_index == self.finetune.set_index
            })
            .ok_or_else(|| {
                Error::Validation(format!(
                    "splits file {} has no set {} at fraction {}",
                    path.display(),
                    self.finetune.set_index,
                    self.finetune.fraction
                ))
            })?;
        Ok(Some(plan.member_ids.clone()))
    }
}
