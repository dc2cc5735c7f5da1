//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use twinsat_core::datamodel::{write_catalog, DatasetManifest, Modality, SceneMeta};
use twinsat_core::pairing::{write_regions, RegionSet};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twinsat"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning twinsat")
}

fn expect_ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn expect_err(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded\nstdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Hash every file under `dir` (sorted relative paths plus contents), so
/// two trees compare equal only when byte-identical.
fn tree_hash(dir: &Path) -> [u8; 32] {
    fn walk(root: &Path, dir: &Path, files: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, files);
            } else {
                files.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(dir.join(&rel)).unwrap());
        h.update([1]);
    }
    h.finalize().into()
}

#[test]
fn dry_run_validates_without_creating_the_run_dir() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("never_created");
    let stdout = expect_ok(bin().args([
        "synth",
        "--out",
        out_dir.to_str().unwrap(),
        "--dry-run",
    ]));
    assert!(stdout.contains("dry run"), "stdout: {stdout}");
    assert!(!out_dir.exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nnonsense = true\n").unwrap();
    let stderr = expect_err(bin().args([
        "synth",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dry-run",
    ]));
    assert!(stderr.contains("nonsense"), "stderr: {stderr}");
    assert!(!out_dir.exists());
}

#[test]
fn synth_reruns_are_byte_identical_and_seed_sensitive() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, "[synth]\nn_pairs = 6\nheight = 32\nwidth = 32\n").unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("d{i}"))).collect();
    for (dir, seed) in dirs.iter().zip(["42", "42", "7"]) {
        expect_ok(bin().args([
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]));
    }
    assert_eq!(tree_hash(&dirs[0]), tree_hash(&dirs[1]));
    assert_ne!(tree_hash(&dirs[0]), tree_hash(&dirs[2]));
}

/// A region so small that every sampled anchor sits within the geo
/// tolerance of one catalog location.
fn pinpoint_region(dir: &Path) -> PathBuf {
    let path = dir.join("regions.txt");
    let ring = vec![(0.0, 0.0), (1e-7, 0.0), (1e-7, 1e-7), (0.0, 1e-7)];
    write_regions(&RegionSet { polygons: vec![ring] }, &path).unwrap();
    path
}

fn scene(id: &str, modality: Modality, timestamp: i64, cloud: f64) -> SceneMeta {
    SceneMeta {
        scene_id: id.into(),
        modality,
        lat: 5e-8,
        lon: 5e-8,
        timestamp,
        cloud_fraction: cloud,
        uri: format!("tiles/{id}.tile"),
    }
}

fn read_pair_stats(path: &Path) -> Vec<(String, usize)> {
    std::fs::read_to_string(path)
        .unwrap()
        .split_whitespace()
        .map(|tok| {
            let (k, v) = tok.split_once('=').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn pair_accounts_for_every_anchor() {
    let t0 = 1_000_000i64;
    let config_body = |data: &Path| {
        format!(
            "seed = 3\ndata_root = {:?}\n[pair]\nn_anchors = 16\nt_start = {}\nt_end = {}\n",
            data.to_str().unwrap(),
            t0,
            t0 + 86_400
        )
    };

    // Clear optical scene available: every anchor pairs.
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    pinpoint_region(&data);
    write_catalog(&[scene("a1", Modality::S1, t0, 0.0)], &data.join("catalog_s1.txt")).unwrap();
    write_catalog(&[scene("b1", Modality::S2, t0, 0.05)], &data.join("catalog_s2.txt")).unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, config_body(&data)).unwrap();
    let out = tmp.path().join("pairs");
    expect_ok(bin().args([
        "pair",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let stats = read_pair_stats(&out.join("pair_stats.txt"));
    assert_eq!(
        stats,
        vec![
            ("anchors".to_string(), 16),
            ("paired".to_string(), 16),
            ("no_s1".to_string(), 0),
            ("no_s2".to_string(), 0),
            ("s2_too_cloudy".to_string(), 0),
        ]
    );
    let manifest = DatasetManifest::read(&out.join("paired.manifest")).unwrap();
    assert_eq!(manifest.entries.len(), 16);
    assert_eq!(manifest.entries[0].id, "pair00000");
    assert_eq!(manifest.entries[0].s1_uri.as_deref(), Some("tiles/a1.tile"));

    // Only cloudy optical scenes: every anchor skipped for clouds.
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    pinpoint_region(&data);
    write_catalog(&[scene("a1", Modality::S1, t0, 0.0)], &data.join("catalog_s1.txt")).unwrap();
    write_catalog(&[scene("b1", Modality::S2, t0, 0.9)], &data.join("catalog_s2.txt")).unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, config_body(&data)).unwrap();
    let out = tmp.path().join("pairs");
    expect_ok(bin().args([
        "pair",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let stats = read_pair_stats(&out.join("pair_stats.txt"));
    let total: usize = stats.iter().skip(1).map(|(_, v)| v).sum();
    assert_eq!(total, 16, "skip reasons must cover every anchor: {stats:?}");
    assert_eq!(stats[4], ("s2_too_cloudy".to_string(), 16));
}

/// Generate, pretrain, fine-tune twice, aggregate; then check the eval
/// outputs and that re-evaluation reproduces them byte for byte.
#[test]
fn micro_protocol_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "seed = 5\n\
         [synth]\n\
         n_pairs = 8\n\
         height = 32\n\
         width = 32\n\
         [pretrain]\n\
         batch_size = 4\n\
         total_steps = 2\n\
         crop_size = 16\n\
         base_lr = 0.05\n\
         [finetune]\n\
         batch_size = 2\n\
         crop_size = 32\n\
         total_steps = 2\n\
         eval_every = 1\n\
         base_lr = 0.01\n\
         init_checkpoint = \"runs/pre_mm/final.ckpt\"\n\
         [eval]\n\
         delta_fraction = 1.0\n\
         delta_init_b = \"random\"\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();

    expect_ok(bin().args(["synth", "--config", cfg, "--out", data.to_str().unwrap()]));
    for m in ["train", "validation", "test"] {
        assert!(data.join(format!("{m}.manifest")).is_file());
    }

    let with_root = |mut c: Command| {
        c.env("TWINSAT_DATA_ROOT", &data);
        c
    };

    let pre_out = data.join("runs/pre_mm");
    let stdout = expect_ok(with_root(bin()).args([
        "pretrain",
        "--config",
        cfg,
        "--out",
        pre_out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("final loss"), "stdout: {stdout}");
    assert!(pre_out.join("final.ckpt").is_file());
    assert!(pre_out.join("COMPLETE").is_file());

    let ft_mm = data.join("runs/ft_mm");
    let stdout = expect_ok(with_root(bin()).args([
        "finetune",
        "--config",
        cfg,
        "--init",
        "multimodal_ckpt",
        "--out",
        ft_mm.to_str().unwrap(),
    ]));
    assert!(stdout.contains("best val mean_iou"), "stdout: {stdout}");
    let ft_rand = data.join("runs/ft_rand");
    expect_ok(with_root(bin()).args([
        "finetune",
        "--config",
        cfg,
        "--out",
        ft_rand.to_str().unwrap(),
    ]));
    for dir in [&ft_mm, &ft_rand] {
        assert!(dir.join("results.txt").is_file());
        assert!(dir.join("best.ckpt").is_file());
    }

    // A finished run directory refuses a second invocation.
    let stderr = expect_err(with_root(bin()).args([
        "finetune",
        "--config",
        cfg,
        "--out",
        ft_rand.to_str().unwrap(),
    ]));
    assert!(stderr.contains("complete"), "stderr: {stderr}");

    let eval_a = tmp.path().join("eval_a");
    let eval_b = tmp.path().join("eval_b");
    for out in [&eval_a, &eval_b] {
        expect_ok(with_root(bin()).args([
            "eval",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let table = std::fs::read_to_string(eval_a.join("results_table.txt")).unwrap();
    assert!(table.contains("multimodal_ckpt"), "table: {table}");
    assert!(table.contains("random"), "table: {table}");
    assert!(table.lines().any(|l| l.starts_with("init\tlr")), "table: {table}");

    let deltas = std::fs::read_to_string(eval_a.join("class_deltas.tsv")).unwrap();
    assert!(deltas.lines().count() > 2, "deltas: {deltas}");

    let peaks = std::fs::read_to_string(eval_a.join("steps_to_peak.txt")).unwrap();
    let data_lines: Vec<&str> = peaks.lines().skip(1).collect();
    assert_eq!(data_lines.len(), 2, "peaks: {peaks}");
    assert!(data_lines.iter().all(|l| l.split('\t').count() == 4));

    for name in ["results_table.txt", "class_deltas.tsv", "steps_to_peak.txt"] {
        assert_eq!(
            std::fs::read(eval_a.join(name)).unwrap(),
            std::fs::read(eval_b.join(name)).unwrap(),
            "{name} differs between eval invocations"
        );
    }
}
