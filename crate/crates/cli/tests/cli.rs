use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn slumseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slumseg"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn hash(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    format!("{:x}", Sha256::digest(bytes))
}

fn hash_tree(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), hash(&p)));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = "seed = 1
[corpus]
tiles = 60
[corpus.spec]
tile_size = 16
[train]
steps = 30
labeled_batch = 4
unlabeled_batch = 4
";

fn small_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&slumseg(dir.path(), &["--config", "small.toml", "--out", "corpus", "synth"]));
    dir
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn synth_default_and_rerun_identical() {
    let dir = tempfile::tempdir().unwrap();
    ok(&slumseg(dir.path(), &["--out", "a", "synth"]));
    ok(&slumseg(dir.path(), &["--out", "b", "synth"]));
    let manifest = read_lines(&dir.path().join("a/manifest.csv"));
    assert_eq!(manifest.len(), 1001);
    assert_eq!(manifest[0], "id,path,mask_path,category,split,budgets_containing_as_labeled");
    // config.toml records each run's own output directory
    let corpus_files = |run: &str| -> Vec<_> {
        hash_tree(&dir.path().join(run))
            .into_iter()
            .filter(|(p, _)| p != Path::new("config.toml"))
            .collect()
    };
    assert_eq!(corpus_files("a"), corpus_files("b"));

    ok(&slumseg(dir.path(), &["--out", "c", "--seed", "5", "synth"]));
    assert_ne!(hash(&dir.path().join("a/manifest.csv")), hash(&dir.path().join("c/manifest.csv")));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[corpus.spec]\nslum_pixel_fraction = 0.9\n").unwrap();
    let out = slumseg(dir.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("slum_pixel_fraction"));

    for args in [
        &["--config", "missing.toml", "synth"][..],
        &["--budget", "0.15", "synth"],
        &["--method", "teacher", "train"],
        &["frobnicate"],
        &["dataq", "--corpus", "nowhere"],
        &["eval", "--checkpoint", "nowhere.ckpt"],
        &["export-bank", "--checkpoint", "nowhere.ckpt"],
    ] {
        assert_eq!(slumseg(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn dataq_report_matches_schema() {
    let dir = small_workspace();
    let d = dir.path();
    ok(&slumseg(d, &["--config", "small.toml", "--out", "full", "dataq", "--corpus", "corpus"]));
    ok(&slumseg(d, &["--config", "small.toml", "--out", "sub", "dataq", "--corpus", "corpus", "--subset-size", "20"]));

    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schema/report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for run in ["full", "sub"] {
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(run).join("report.json")).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{run}: {errors:?}");
    }

    let full: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("full/report.json")).unwrap()).unwrap();
    assert_eq!(full["jsd_edge"], 0.0);
    assert_eq!(full["jsd_entropy"], 0.0);
    assert_eq!(full["subset_size"], 60);
    let features = read_lines(&d.join("full/features.csv"));
    assert_eq!(features[0], "tile_id,entropy,edge_density");
    assert_eq!(features.len(), 61);
    for csv in [
        "edge_density_histogram.csv",
        "entropy_histogram.csv",
        "displacement_histogram.csv",
    ] {
        assert_eq!(read_lines(&d.join("full").join(csv))[0], "bin_lo,bin_hi,mass");
    }

    let sub: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sub/report.json")).unwrap()).unwrap();
    assert_eq!(sub["subset_size"], 20);
}

#[test]
fn train_outputs_and_resume() {
    let dir = small_workspace();
    let d = dir.path();
    let base = ["--config", "small.toml", "--method", "full", "--budget", "0.3"];
    let train = |out: &str, extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend(["--out", out, "train", "--corpus", "corpus", "--checkpoint-every", "10"]);
        args.extend(extra);
        ok(&slumseg(d, &args));
    };
    train("run", &[]);

    let run = d.join("run");
    let log = read_lines(&run.join("runlog.jsonl"));
    assert_eq!(log.len(), 30);
    let first: serde_json::Value = serde_json::from_str(&log[0]).unwrap();
    for key in ["step", "L_total", "L_sup", "L_s1", "L_s2", "L_fp", "thresholds", "lr", "admitted_fraction", "mean_omega"] {
        assert!(first.get(key).is_some(), "runlog lacks {key}: {first}");
    }
    for step in [10, 20, 30] {
        assert!(run.join(format!("checkpoints/step_{step:06}.ckpt")).is_file());
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["method"], "full");
    assert_eq!(metrics["steps"], 30);
    assert!(metrics["test"]["miou"].as_f64().unwrap() > 0.0);

    // the saved config is the effective one and re-parses
    let saved = slumseg::config::ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(saved.method, slumseg::train::Method::Full);
    assert_eq!(saved.budget, 0.3);
    assert_eq!(saved.train.steps, 30);

    // resuming from step 10 replays the remaining records and parameters exactly
    let ckpt = run.join("checkpoints/step_000010.ckpt");
    train("resumed", &["--resume", ckpt.to_str().unwrap()]);
    let resumed = read_lines(&d.join("resumed/runlog.jsonl"));
    assert_eq!(resumed, log[10..]);
    assert_eq!(hash(&run.join("checkpoint.ckpt")), hash(&d.join("resumed/checkpoint.ckpt")));
    assert_eq!(hash(&run.join("metrics.json")), hash(&d.join("resumed/metrics.json")));

    // identical reruns give identical outputs apart from the metadata
    // sidecar and the recorded output directory
    train("again", &[]);
    let strip = |v: Vec<(PathBuf, String)>| -> Vec<_> {
        v.into_iter()
            .filter(|(p, _)| p != Path::new("run_meta.json") && p != Path::new("config.toml"))
            .collect()
    };
    assert_eq!(strip(hash_tree(&run)), strip(hash_tree(&d.join("again"))));

    // a checkpoint from another method cannot be resumed
    let mut args = base.to_vec();
    args[3] = "caat_only";
    args.extend(["--out", "x", "train", "--corpus", "corpus", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(slumseg(d, &args).status.code(), Some(2));

    // eval and export-bank on the finished run
    let out = slumseg(
        d,
        &["--config", "small.toml", "eval", "--corpus", "corpus", "--checkpoint", "run/checkpoint.ckpt"],
    );
    ok(&out);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["split"], "test");
    assert_eq!(eval["miou"], metrics["test"]["miou"]);

    ok(&slumseg(
        d,
        &[
            "--config", "small.toml", "--out", "bank", "export-bank", "--corpus", "corpus",
            "--checkpoint", "run/checkpoint.ckpt",
        ],
    ));
    let files: Vec<String> = std::fs::read_dir(d.join("bank"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.len(), 2, "{files:?}");
    assert!(files.iter().all(|f| f.starts_with("bank_class") && f.contains("_epoch")));
    let rows = read_lines(&d.join("bank").join(&files[0]));
    assert_eq!(rows[0].split(',').count(), 16);
}

#[test]
fn converged_supervised_fits_its_labeled_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = "seed = 1\n[corpus]\ntiles = 200\n[corpus.spec]\ncontrast_gap = 0.3\n[train]\nsteps = 1500\n";
    std::fs::write(d.join("conv.toml"), text).unwrap();
    ok(&slumseg(d, &["--config", "conv.toml", "--out", "corpus", "synth"]));
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "conv.toml", "--method", "supervised", "--budget", "1.0"];
        all.extend(args);
        slumseg(d, &all)
    };
    ok(&run(&["--out", "sup", "train", "--corpus", "corpus", "--checkpoint-every", "1500"]));
    let out = run(&["eval", "--corpus", "corpus", "--checkpoint", "sup/checkpoint.ckpt", "--split", "labeled"]);
    ok(&out);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let miou = eval["miou"].as_f64().unwrap();
    assert!(miou > 0.9, "labeled mIoU {miou}");
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = small_workspace();
    let d = dir.path();
    let text = format!(
        "{SMALL}[ablation]\nmethods = [\"supervised\", \"full\"]\nbudgets = [0.1, 0.3]\nseeds = [0, 1]\n"
    )
    .replace("steps = 30", "steps = 5");
    std::fs::write(d.join("ab.toml"), text).unwrap();
    for out in ["a", "b"] {
        ok(&slumseg(d, &["--config", "ab.toml", "--out", out, "ablate", "--corpus", "corpus"]));
    }
    let rows = read_lines(&d.join("a/ablation.csv"));
    assert_eq!(rows.len(), 1 + 2 * 2 * 2);
    assert_eq!(rows[0], "method,budget,seed,miou,iou_class0,iou_class1");
    assert!(rows[1].starts_with("supervised,0.1,0,"));
    assert!(rows[8].starts_with("full,0.3,1,"));
    assert_eq!(hash(&d.join("a/ablation.csv")), hash(&d.join("b/ablation.csv")));
}
