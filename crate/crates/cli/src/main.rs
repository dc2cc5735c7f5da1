//! Command-line driver: synth, pair, pretrain, finetune, eval.
//!
//! Every command freezes its resolved configuration into the run directory
//! and drops a COMPLETE marker on success, so a finished directory is a
//! self-describing record and never gets reused by accident. Relative paths
//! in configs and manifests resolve against the data root (document value,
//! then TWINSAT_DATA_ROOT, then the working directory).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use twinsat_core::config::{ExperimentConfig, FROZEN_CONFIG};
use twinsat_core::datamodel::{read_catalog, DatasetManifest, ManifestEntry, Split};
use twinsat_core::eval::{
    aggregate_runs, per_class_delta, read_results, write_class_deltas, write_results_table,
    RunResult, TableRow,
};
use twinsat_core::pairing::{
    build_pairs, read_regions, sample_locations, sample_timestamps, Anchor,
    DEFAULT_REJECTION_BUDGET,
};
use twinsat_core::rng::derive_stream;
use twinsat_core::synthetic::gen_dataset;
use twinsat_core::trainer::{self, COMPLETE_MARKER};

#[derive(Parser)]
#[command(name = "twinsat", version, about = "Dual-sensor contrastive pre-training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset into the run directory.
    Synth(CommonArgs),
    /// Join sensor catalogs into a paired-scene manifest.
    Pair(CommonArgs),
    /// Contrastive pre-training over paired tiles.
    Pretrain(CommonArgs),
    /// Segmentation fine-tuning from a configured initialization.
    Finetune(FinetuneArgs),
    /// Aggregate finished fine-tune runs into result tables.
    Eval(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; refused when it already holds a COMPLETE marker.
    #[arg(long)]
    out: PathBuf,
    /// Validate the configuration and inputs, then stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Label fraction from the sub-sampling protocol.
    #[arg(long)]
    fraction: Option<f64>,
    /// Which subset at that fraction.
    #[arg(long)]
    set_index: Option<usize>,
    /// Encoder init: random, imagenet_adapted, simclr_ckpt or multimodal_ckpt.
    #[arg(long)]
    init: Option<String>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pair(a) => cmd_pair(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Refuse finished run directories, create the directory, freeze the
/// resolved config. Runs after input validation so a bad invocation
/// leaves no half-made directory behind.
fn begin_run(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if out.join(COMPLETE_MARKER).exists() {
        bail!("run directory {} is already complete; pick a fresh one", out.display());
    }
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating run directory {}", out.display()))?;
    cfg.freeze_into(out)?;
    Ok(())
}

fn finish_run(out: &Path, body: String) -> Result<()> {
    let path = out.join(COMPLETE_MARKER);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(args: CommonArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let recipe = cfg.scene_recipe();
    if args.dry_run {
        println!(
            "synth: config ok; {} pairs at {}x{}, {:.0}% labeled (dry run)",
            cfg.synth.n_pairs,
            recipe.height,
            recipe.width,
            cfg.synth.labeled_fraction * 100.0
        );
        return Ok(());
    }
    begin_run(&cfg, &args.out)?;
    let manifests =
        gen_dataset(&recipe, cfg.synth.n_pairs, cfg.synth.labeled_fraction, &args.out)?;
    let counts: Vec<usize> = manifests.iter().map(|m| m.entries.len()).collect();
    finish_run(
        &args.out,
        format!(
            "status=complete pairs={} train={} validation={} test={}\n",
            cfg.synth.n_pairs, counts[0], counts[1], counts[2]
        ),
    )?;
    println!(
        "synth: {} pairs ({} train / {} validation / {} test) -> {}",
        cfg.synth.n_pairs,
        counts[0],
        counts[1],
        counts[2],
        args.out.display()
    );
    Ok(())
}

fn cmd_pair(args: CommonArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let root = cfg.resolve_data_root();
    let s1 = read_catalog(&root.join(&cfg.pair.s1_catalog))?;
    let s2 = read_catalog(&root.join(&cfg.pair.s2_catalog))?;
    let regions = read_regions(&root.join(&cfg.pair.regions))?;
    if args.dry_run {
        println!(
            "pair: config ok; {} radar scenes, {} optical scenes, {} regions, {} anchors (dry run)",
            s1.len(),
            s2.len(),
            regions.polygons.len(),
            cfg.pair.n_anchors
        );
        return Ok(());
    }

    let mut loc_rng = derive_stream(cfg.seed, "anchors/loc");
    let locations =
        sample_locations(&regions, cfg.pair.n_anchors, &mut loc_rng, DEFAULT_REJECTION_BUDGET)?;
    let mut time_rng = derive_stream(cfg.seed, "anchors/time");
    let times =
        sample_timestamps(cfg.pair.t_start, cfg.pair.t_end, cfg.pair.n_anchors, &mut time_rng)?;
    let anchors: Vec<Anchor> = locations
        .into_iter()
        .zip(times)
        .map(|((lat, lon), timestamp)| Anchor { lat, lon, timestamp })
        .collect();
    let (pairs, stats) = build_pairs(&s1, &s2, &anchors);

    // The manifest carries catalog uris untouched, so they stay relative
    // to the data root no matter where the run directory lives.
    let entries: Vec<ManifestEntry> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| ManifestEntry {
            id: format!("pair{i:05}"),
            s1_uri: Some(p.s1.uri.clone()),
            s2_uri: Some(p.s2.uri.clone()),
            label_uri: None,
            anchor_timestamp: p.anchor_timestamp,
        })
        .collect();
    let manifest = DatasetManifest {
        name: cfg.pair.manifest_name.clone(),
        split: Split::Train,
        normalization_id: "raw".into(),
        version: "1".into(),
        entries,
    };

    begin_run(&cfg, &args.out)?;
    let manifest_path = args.out.join(format!("{}.manifest", cfg.pair.manifest_name));
    manifest.write(&manifest_path)?;
    let stats_line = format!(
        "anchors={} paired={} no_s1={} no_s2={} s2_too_cloudy={}\n",
        anchors.len(),
        stats.paired,
        stats.no_s1,
        stats.no_s2,
        stats.s2_too_cloudy
    );
    let stats_path = args.out.join("pair_stats.txt");
    std::fs::write(&stats_path, &stats_line)
        .with_context(|| format!("writing {}", stats_path.display()))?;
    finish_run(&args.out, format!("status=complete paired={}\n", stats.paired))?;
    println!(
        "pair: {}/{} anchors paired (no_s1={}, no_s2={}, s2_too_cloudy={}) -> {}",
        stats.paired,
        anchors.len(),
        stats.no_s1,
        stats.no_s2,
        stats.s2_too_cloudy,
        manifest_path.display()
    );
    Ok(())
}

fn cmd_pretrain(args: CommonArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let root = cfg.resolve_data_root();
    let pcfg = cfg.pretrain_config()?;
    let manifest_path = root.join(&cfg.pretrain.manifest);
    let manifest = DatasetManifest::read(&manifest_path)?;
    if args.dry_run {
        pcfg.validate()?;
        println!(
            "pretrain: config ok; objective {}, {} pairs from {} (dry run)",
            pcfg.objective,
            manifest.entries.len(),
            manifest_path.display()
        );
        return Ok(());
    }
    begin_run(&cfg, &args.out)?;
    let outcome = trainer::pretrain(&pcfg, &manifest, &root, &args.out)?;
    println!(
        "pretrain[{}]: {} steps, final loss {:.6} -> {}",
        pcfg.objective,
        outcome.steps_run,
        outcome.final_loss,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(fraction) = args.fraction {
        cfg.finetune.fraction = fraction;
    }
    if let Some(set_index) = args.set_index {
        cfg.finetune.set_index = set_index;
    }
    if let Some(init) = &args.init {
        cfg.finetune.init = init.clone();
    }
    // Flag overrides can push values out of range; recheck before touching
    // the filesystem.
    cfg.validate()?;

    let root = cfg.resolve_data_root();
    let fcfg = cfg.finetune_config()?;
    let train = DatasetManifest::read(&root.join(&cfg.finetune.train_manifest))?;
    let val = DatasetManifest::read(&root.join(&cfg.finetune.val_manifest))?;
    if args.common.dry_run {
        fcfg.validate()?;
        println!(
            "finetune: config ok; init {}, fraction {} set {}, {} train / {} val entries (dry run)",
            fcfg.init_name,
            fcfg.fraction,
            fcfg.set_index,
            train.entries.len(),
            val.entries.len()
        );
        return Ok(());
    }
    begin_run(&cfg, &args.common.out)?;
    let outcome = trainer::finetune(&fcfg, &train, &val, &root, &args.common.out)?;
    println!(
        "finetune[{}]: best val mean_iou {:.4} at step {} -> {}",
        fcfg.init_name,
        outcome.best_val_mean_iou,
        outcome.peak_step,
        outcome.results_path.display()
    );
    Ok(())
}

/// A finished fine-tune run as eval sees it: the results rows plus the
/// learning rate recovered from the frozen config.
struct ScannedRun {
    lr: f64,
    results: Vec<RunResult>,
}

fn scan_runs(runs_root: &Path) -> Result<Vec<ScannedRun>> {
    let entries = std::fs::read_dir(runs_root)
        .with_context(|| format!("scanning runs root {}", runs_root.display()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("results.txt").is_file())
        .collect();
    // Directory-name order fixes the accumulation order, which keeps the
    // aggregated table byte-identical across invocations.
    dirs.sort();
    let mut runs = Vec::new();
    for dir in dirs {
        let frozen = dir.join(FROZEN_CONFIG);
        if !frozen.is_file() {
            bail!(
                "run {} has results but no {FROZEN_CONFIG}; eval only aggregates runs made by this tool",
                dir.display()
            );
        }
        let run_cfg = ExperimentConfig::load(&frozen)?;
        let results = read_results(&dir.join("results.txt"))?;
        runs.push(ScannedRun { lr: run_cfg.finetune.base_lr, results });
    }
    Ok(runs)
}

fn cmd_eval(args: CommonArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let root = cfg.resolve_data_root();
    let runs_root = root.join(&cfg.eval.runs_root);
    let runs = scan_runs(&runs_root)?;
    if args.dry_run {
        println!(
            "eval: config ok; {} finished runs under {} (dry run)",
            runs.len(),
            runs_root.display()
        );
        return Ok(());
    }
    if runs.is_empty() {
        bail!("no finished runs with results.txt under {}", runs_root.display());
    }
    begin_run(&cfg, &args.out)?;

    // Group the headline metric by (init, lr); each cell aggregates one
    // fraction's values across split sets. f64 keys go through to_bits,
    // which orders positives the same as the values themselves.
    let mut groups: BTreeMap<(String, u64), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut all: Vec<RunResult> = Vec::new();
    for run in &runs {
        for r in &run.results {
            if r.metric == cfg.eval.metric {
                groups
                    .entry((r.init.clone(), run.lr.to_bits()))
                    .or_default()
                    .entry(r.fraction.to_bits())
                    .or_default()
                    .push(r.value);
            }
        }
        all.extend(run.results.iter().cloned());
    }
    let mut rows = Vec::new();
    for ((init, lr_bits), cells) in &groups {
        let mut out_cells = Vec::new();
        for (fraction_bits, values) in cells {
            let (mean, std) = aggregate_runs(values)?;
            out_cells.push((f64::from_bits(*fraction_bits), mean, std));
        }
        rows.push(TableRow { init: init.clone(), lr: f64::from_bits(*lr_bits), cells: out_cells });
    }
    let table_path = args.out.join("results_table.txt");
    write_results_table(&rows, &cfg.eval.metric, &table_path)?;

    // Per-class IoU deltas between the two configured inits at one
    // fraction; mixing fractions would alias (class, set) cells.
    let side = |init: &str| -> Vec<RunResult> {
        all.iter()
            .filter(|r| {
                r.init == init
                    && r.fraction == cfg.eval.delta_fraction
                    && r.class_index().is_some()
            })
            .cloned()
            .collect()
    };
    let side_a = side(&cfg.eval.delta_init_a);
    let side_b = side(&cfg.eval.delta_init_b);
    let delta_note = if side_a.is_empty() || side_b.is_empty() {
        format!(
            "delta report skipped: no per-class rows for {} vs {} at fraction {}",
            cfg.eval.delta_init_a, cfg.eval.delta_init_b, cfg.eval.delta_fraction
        )
    } else {
        let deltas = per_class_delta(&side_a, &side_b).with_context(|| {
            format!(
                "comparing {} against {} at fraction {}",
                cfg.eval.delta_init_a, cfg.eval.delta_init_b, cfg.eval.delta_fraction
            )
        })?;
        let delta_path = args.out.join("class_deltas.tsv");
        write_class_deltas(&deltas, &delta_path)?;
        format!("class deltas -> {}", delta_path.display())
    };

    // Convergence report: the peak step of every mean-IoU row.
    let mut peak_rows: Vec<&RunResult> =
        all.iter().filter(|r| r.metric == "mean_iou").collect();
    peak_rows.sort_by(|x, y| {
        x.init
            .cmp(&y.init)
            .then(x.fraction.total_cmp(&y.fraction))
            .then(x.set_index.cmp(&y.set_index))
            .then(x.dataset.cmp(&y.dataset))
    });
    let mut peaks = String::from("init\tfraction\tset\tpeak_step\n");
    for r in &peak_rows {
        peaks.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.init, r.fraction, r.set_index, r.peak_step
        ));
    }
    let peaks_path = args.out.join("steps_to_peak.txt");
    std::fs::write(&peaks_path, peaks)
        .with_context(|| format!("writing {}", peaks_path.display()))?;

    finish_run(
        &args.out,
        format!("status=complete runs={} table_rows={}\n", runs.len(), rows.len()),
    )?;
    println!(
        "eval: {} runs -> {} ({} rows); {}; peaks -> {}",
        runs.len(),
        table_path.display(),
        rows.len(),
        delta_note,
        peaks_path.display()
    );
    Ok(())
}
