//! Scratch timing and lr probes; not part of the suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use twinsat_core::config::ExperimentConfig;
use twinsat_core::datamodel::DatasetManifest;
use twinsat_core::synthetic::gen_dataset;
use twinsat_core::trainer::{
    metric_series, pretrain, read_metrics, PretrainConfig, PretrainObjective,
};

fn probe_data() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("probe_data");
    if !dir.join("train.manifest").is_file() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.synth.n_pairs = 2000;
        cfg.synth.height = 64;
        cfg.synth.width = 64;
        std::fs::create_dir_all(&dir).unwrap();
        let t0 = Instant::now();
        gen_dataset(&cfg.scene_recipe(), 2000, 1.0, &dir).unwrap();
        println!("synth 2000 pairs: {:.1?}", t0.elapsed());
    }
    dir
}

fn pretrain_cfg(objective: PretrainObjective, lr: f64, steps: usize) -> PretrainConfig {
    pretrain_cfg_b(objective, lr, steps, 16)
}

fn pretrain_cfg_b(
    objective: PretrainObjective,
    lr: f64,
    steps: usize,
    batch: usize,
) -> PretrainConfig {
    PretrainConfig {
        objective,
        profile: "tiny".parse().unwrap(),
        batch_size: batch,
        total_steps: steps,
        base_lr: lr,
        weight_decay: 1e-4,
        temperature: 0.1,
        momentum: 0.9,
        trust_coeff: 0.001,
        crop_size: 32,
        augmentation: None,
        checkpoint_every: 100_000,
        seed: 11,
    }
}

#[test]
#[ignore]
fn grid_probe() {
    let data = probe_data();
    let manifest = DatasetManifest::read(&data.join("train.manifest")).unwrap();
    for (tag, temperature, weight_decay, lr, steps) in [("mm_6k", 0.1, 1e-4, 0.5, 6000)] {
        let out = data.join(format!("probe_{tag}"));
        if out.join("COMPLETE").exists() {
            println!("{tag} already present");
            continue;
        }
        let mut cfg = pretrain_cfg_b(PretrainObjective::Multimodal, lr, steps, 32);
        cfg.temperature = temperature;
        cfg.weight_decay = weight_decay;
        let t0 = Instant::now();
        let o = pretrain(&cfg, &manifest, &data, &out).unwrap();
        let recs = read_metrics(&o.metrics_path).unwrap();
        let series = metric_series(&recs, "train", "nce_loss");
        let win: Vec<f64> = series
            .chunks(250)
            .map(|c| c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64)
            .collect();
        println!("{tag}: windows {win:.3?} ({:.1?})", t0.elapsed());
    }
}

#[test]
#[ignore]
fn batch32_pretrain_probe() {
    let data = probe_data();
    let manifest = DatasetManifest::read(&data.join("train.manifest")).unwrap();
    for (objective, tag) in [
        (PretrainObjective::Multimodal, "mm"),
        (PretrainObjective::SimclrS1, "s1"),
    ] {
        let out = data.join(format!("probe_{tag}_b32"));
        if out.join("COMPLETE").exists() {
            println!("{tag} b32 checkpoint already present");
            continue;
        }
        let t0 = Instant::now();
        let o = pretrain(&pretrain_cfg_b(objective, 0.5, 2000, 32), &manifest, &data, &out).unwrap();
        let recs = read_metrics(&o.metrics_path).unwrap();
        let series = metric_series(&recs, "train", "nce_loss");
        let tail: Vec<f64> = series.iter().rev().take(5).rev().map(|p| p.1).collect();
        println!("{tag} b32 lr 0.5: tail {tail:.4?} ({:.1?})", t0.elapsed());
    }
}

#[test]
#[ignore]
fn simclr_pretrain_probe() {
    let data = probe_data();
    let manifest = DatasetManifest::read(&data.join("train.manifest")).unwrap();
    let out = data.join("probe_s1_lr0.5");
    if out.join("COMPLETE").exists() {
        println!("simclr checkpoint already present");
        return;
    }
    let t0 = Instant::now();
    let o = pretrain(
        &pretrain_cfg(PretrainObjective::SimclrS1, 0.5, 2000),
        &manifest,
        &data,
        &out,
    )
    .unwrap();
    let recs = read_metrics(&o.metrics_path).unwrap();
    let series = metric_series(&recs, "train", "nce_loss");
    let tail: Vec<f64> = series.iter().rev().take(5).rev().map(|p| p.1).collect();
    println!("s1 lr 0.5: tail {tail:.4?} ({:.1?})", t0.elapsed());
}

#[test]
#[ignore]
fn finetune_probe() {
    use twinsat_core::pairing::make_subsample_splits;
    use twinsat_core::trainer::{finetune, FinetuneConfig, InitSpec};

    let data = probe_data();
    let train = DatasetManifest::read(&data.join("train.manifest")).unwrap();
    let val = DatasetManifest::read(&data.join("validation.manifest")).unwrap();
    let train_ids: Vec<String> = train.entries.iter().map(|e| e.id.clone()).collect();
    let fraction = 0.01;
    let plans = make_subsample_splits(&train_ids, &[(fraction, 3)], 11).unwrap();

    let inits: Vec<(&str, InitSpec)> = vec![
        ("random", InitSpec::Random),
        (
            "multimodal",
            InitSpec::Checkpoint {
                path: data.join("probe_mm_6k/final.ckpt"),
                group: "encoder_s1".into(),
            },
        ),
        (
            "simclr",
            InitSpec::Checkpoint {
                path: data.join("probe_s1_b32/final.ckpt"),
                group: "encoder_s1".into(),
            },
        ),
    ];
    for set in [0usize] {
        for (name, init) in &inits {
            if let InitSpec::Checkpoint { path, .. } = init {
                if !path.is_file() {
                    println!("ft {name}: checkpoint not ready, skipping");
                    continue;
                }
            }
            for lr in [0.01, 0.03] {
                let cfg = FinetuneConfig {
                    profile: "tiny".parse().unwrap(),
                    downstream: twinsat_core::datamodel::Modality::S1,
                    num_classes: 6,
                    batch_size: 4,
                    crop_size: 48,
                    total_steps: 600,
                    base_lr: lr,
                    weight_decay: 1e-6,
                    momentum: 0.9,
                    poly_power: 0.9,
                    init_name: name.to_string(),
                    init: init.clone(),
                    fraction,
                    set_index: set,
                    subset_ids: Some(plans[set].member_ids.clone()),
                    eval_every: 100,
                    seed: 100 + set as u64,
                };
                let out = data.join(format!("probe_ft_{name}_lr{lr}_set{set}"));
                if out.exists() {
                    std::fs::remove_dir_all(&out).unwrap();
                }
                let t0 = Instant::now();
                let o = finetune(&cfg, &train, &val, &data, &out).unwrap();
                let results = twinsat_core::eval::read_results(&o.results_path).unwrap();
                let per_class: Vec<String> = results
                    .iter()
                    .filter_map(|r| r.class_index().map(|c| format!("{c}:{:.3}", r.value)))
                    .collect();
                println!(
                    "ft {name} lr {lr} set {set}: best miou {:.4} peak {} classes [{}] ({:.1?})",
                    o.best_val_mean_iou,
                    o.peak_step,
                    per_class.join(" "),
                    t0.elapsed()
                );
            }
        }
    }
}

#[test]
#[ignore]
fn pretrain_lr_probe() {
    let data = probe_data();
    let manifest = DatasetManifest::read(&data.join("train.manifest")).unwrap();
    for lr in [0.5, 1.0] {
        let out = data.join(format!("probe_mm_lr{lr}"));
        if out.join("COMPLETE").exists() {
            std::fs::remove_dir_all(&out).unwrap();
        }
        let t0 = Instant::now();
        let o = pretrain(&pretrain_cfg(PretrainObjective::Multimodal, lr, 2000), &manifest, &data, &out)
            .unwrap();
        let recs = read_metrics(&o.metrics_path).unwrap();
        let series = metric_series(&recs, "train", "nce_loss");
        let head: Vec<f64> = series.iter().take(3).map(|p| p.1).collect();
        let tail: Vec<f64> = series.iter().rev().take(5).rev().map(|p| p.1).collect();
        println!(
            "mm lr {lr}: head {head:.4?} tail {tail:.4?} ({:.1?})",
            t0.elapsed()
        );
    }
}
