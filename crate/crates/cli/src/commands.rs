use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use slumseg::checkpoint;
use slumseg::config::ExperimentConfig;
use slumseg::dataq::quality_report;
use slumseg::io::{read_corpus, read_splits, write_corpus};
use slumseg::metrics::IouReport;
use slumseg::split::{make_splits, stratified_subset, Budget, Splits};
use slumseg::synth::{generate_corpus, TileRecord};
use slumseg::train::{evaluate, Dataset, Method, TrainState, Trainer};

use crate::failure::{usage, Failure, UsageExt};
use crate::{Cli, Command, SplitName};

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            if let Some(seed) = cli.seed {
                cfg.corpus.spec.seed = seed;
            }
            synth(&cfg)
        }
        Command::Dataq { corpus, subset_size } => dataq(&cfg, corpus.as_deref(), subset_size.or(cfg.dataq.subset_size)),
        Command::Train {
            corpus,
            resume,
            checkpoint_every,
        } => train(&cfg, corpus.as_deref(), resume.as_deref(), *checkpoint_every),
        Command::Eval {
            checkpoint,
            split,
            corpus,
        } => eval(&cfg, cli.out.is_some(), checkpoint, *split, corpus.as_deref()),
        Command::Ablate { corpus } => ablate(&cfg, corpus.as_deref()),
        Command::ExportBank {
            checkpoint,
            epoch,
            corpus,
        } => export_bank(&cfg, checkpoint, *epoch, corpus.as_deref()),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).usage_context(format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(b) = cli.budget {
        cfg.budget = b;
    }
    if let Some(m) = &cli.method {
        cfg.method = Method::parse(m).usage()?;
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn synth(cfg: &ExperimentConfig) -> Outcome {
    let started = Instant::now();
    let (tiles, splits) = generate(cfg)?;
    let manifest = write_corpus(&cfg.out_dir, &tiles, &splits)?;
    cfg.save_into(&cfg.out_dir)?;
    info!(
        "wrote {} tiles and {} in {:.1}s",
        tiles.len(),
        manifest.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn generate(cfg: &ExperimentConfig) -> Result<(Vec<TileRecord>, Splits), Failure> {
    let tiles = generate_corpus(&cfg.corpus.spec, cfg.corpus.tiles)?;
    let categories: Vec<_> = tiles.iter().map(|t| t.category).collect();
    let splits = make_splits(&categories, &cfg.split, cfg.corpus.spec.seed).usage()?;
    Ok((tiles, splits))
}

/// Reads the corpus at `dir` (or `corpus_dir`), or regenerates it from the
/// config when neither is given.
fn load_corpus(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<(Vec<TileRecord>, Splits), Failure> {
    let Some(dir) = dir.or(cfg.corpus_dir.as_deref()) else {
        return generate(cfg);
    };
    if !dir.join("manifest.csv").is_file() {
        return Err(usage(format!("no corpus at {} (manifest.csv missing)", dir.display())));
    }
    let tiles = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let splits = read_splits(dir)?;
    Ok((tiles, splits))
}

fn dataq(cfg: &ExperimentConfig, corpus: Option<&Path>, subset_size: Option<usize>) -> Outcome {
    let (tiles, _) = load_corpus(cfg, corpus)?;
    let subset = match subset_size {
        Some(k) => {
            let categories: Vec<_> = tiles.iter().map(|t| t.category).collect();
            Some(stratified_subset(&categories, k, cfg.seed).usage()?)
        }
        None => None,
    };
    let report = quality_report(&tiles, subset.as_deref())?;
    for flag in &report.flags {
        warn!("{flag}");
    }
    let written = report.write(&cfg.out_dir)?;
    info!("wrote {} files to {}", written.len(), cfg.out_dir.display());
    Ok(())
}

struct Prepared {
    data: Dataset,
    splits: Splits,
}

impl Prepared {
    fn load(cfg: &ExperimentConfig, corpus: Option<&Path>) -> Result<Self, Failure> {
        let (tiles, splits) = load_corpus(cfg, corpus)?;
        Ok(Self {
            data: Dataset::from_tiles(&tiles)?,
            splits,
        })
    }

    fn trainer<'a>(&'a self, cfg: &'a ExperimentConfig, budget: Budget) -> Result<Trainer<'a>, Failure> {
        // sorted so an on-disk corpus and its in-memory twin sample alike
        let mut labeled = self.splits.labeled(budget).usage()?.to_vec();
        labeled.sort_unstable();
        let unlabeled = self.splits.unlabeled(budget).usage()?;
        Trainer::new(&cfg.train, &self.data, labeled, unlabeled).usage()
    }

    fn ids(&self, cfg: &ExperimentConfig, split: SplitName) -> Result<Vec<usize>, Failure> {
        let budget = cfg.budget();
        Ok(match split {
            SplitName::Train => self.splits.train.clone(),
            SplitName::Val => self.splits.val.clone(),
            SplitName::Test => self.splits.test.clone(),
            SplitName::Labeled => self.splits.labeled(budget).usage()?.to_vec(),
            SplitName::Unlabeled => self.splits.unlabeled(budget).usage()?,
        })
    }
}

#[derive(Serialize)]
struct RunMetrics {
    method: Method,
    budget: f64,
    seed: u64,
    steps: u64,
    val: IouReport,
    test: IouReport,
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn train(cfg: &ExperimentConfig, corpus: Option<&Path>, resume: Option<&Path>, every: u64) -> Outcome {
    if every == 0 {
        return Err(usage("--checkpoint-every must be positive"));
    }
    let prepared = Prepared::load(cfg, corpus)?;
    let trainer = prepared.trainer(cfg, cfg.budget())?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    cfg.save_into(out)?;

    let mut state = match resume {
        Some(path) => {
            let state = checkpoint::load(path).usage_context(format!("loading {}", path.display()))?;
            if state.method != cfg.method || state.seed != cfg.seed {
                return Err(usage(format!(
                    "checkpoint is {} seed {}, config asks for {} seed {}",
                    state.method, state.seed, cfg.method, cfg.seed
                )));
            }
            info!("resuming at step {}", state.step());
            state
        }
        None => TrainState::new(&cfg.train, cfg.method, cfg.seed).usage()?,
    };

    let log_path = out.join("runlog.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);

    let started = unix_seconds();
    let clock = Instant::now();
    let total = cfg.train.steps;
    while state.step() < total {
        let until = ((state.step() / every) + 1) * every;
        trainer.run(&mut state, until.min(total), |record| {
            serde_json::to_writer(&mut log, record)?;
            log.write_all(b"\n").map_err(|source| slumseg::Error::Io {
                path: log_path.clone(),
                source,
            })?;
            if record.step % 100 == 0 {
                info!("step {} loss {:.4} lr {:.5}", record.step, record.losses.total, record.lr);
            }
            Ok(())
        })?;
        log.flush()?;
        let path = ckpt_dir.join(format!("step_{:06}.ckpt", state.step()));
        checkpoint::save(&state, &path)?;
    }
    checkpoint::save(&state, &out.join("checkpoint.ckpt"))?;

    let metrics = RunMetrics {
        method: cfg.method,
        budget: cfg.budget,
        seed: cfg.seed,
        steps: state.step(),
        val: evaluate(&state.model, &prepared.data, &prepared.splits.val)?,
        test: evaluate(&state.model, &prepared.data, &prepared.splits.test)?,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    // wall-clock values live only here so the other outputs stay reproducible
    write_json(
        &out.join("run_meta.json"),
        &json!({
            "started_unix": started,
            "finished_unix": unix_seconds(),
            "elapsed_seconds": clock.elapsed().as_secs_f64(),
            "resumed_from": resume,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    info!("test mIoU {:.4}", metrics.test.miou);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<TrainState, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    checkpoint::load(path).usage_context(format!("loading {}", path.display()))
}

fn eval(cfg: &ExperimentConfig, to_file: bool, ckpt: &Path, split: SplitName, corpus: Option<&Path>) -> Outcome {
    let state = load_checkpoint(ckpt)?;
    let prepared = Prepared::load(cfg, corpus)?;
    let ids = prepared.ids(cfg, split)?;
    let report = evaluate(&state.model, &prepared.data, &ids)?;
    let name = format!("{split:?}").to_lowercase();
    let value = json!({
        "checkpoint": ckpt,
        "split": name,
        "method": state.method,
        "seed": state.seed,
        "steps": state.step(),
        "per_class": report.per_class,
        "miou": report.miou,
        "pixels": report.pixels,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    if to_file {
        fs::create_dir_all(&cfg.out_dir)?;
        write_json(&cfg.out_dir.join(format!("eval_{name}.json")), &value)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    method: Method,
    budget: f64,
    seed: u64,
    miou: f64,
    iou_class0: Option<f64>,
    iou_class1: Option<f64>,
}

fn ablate(cfg: &ExperimentConfig, corpus: Option<&Path>) -> Outcome {
    let prepared = Prepared::load(cfg, corpus)?;
    let a = &cfg.ablation;
    let cells: Vec<(Method, f64, u64)> = a
        .methods
        .iter()
        .flat_map(|&m| a.budgets.iter().flat_map(move |&b| a.seeds.iter().map(move |&s| (m, b, s))))
        .collect();
    if cells.is_empty() {
        return Err(usage("the ablation matrix is empty"));
    }
    info!("{} cells", cells.len());

    let results: Vec<Result<AblationRow, anyhow::Error>> = cells
        .par_iter()
        .map(|&(method, budget, seed)| {
            let run = || -> Result<AblationRow, anyhow::Error> {
                let trainer = prepared
                    .trainer(cfg, Budget::from_fraction(budget))
                    .map_err(|f| match f {
                        Failure::Usage(e) | Failure::Runtime(e) => e,
                    })?;
                let mut state = TrainState::new(&cfg.train, method, seed)?;
                trainer.run(&mut state, cfg.train.steps, |_| Ok(()))?;
                let r = evaluate(&state.model, &prepared.data, &prepared.splits.test)?;
                info!("{method} budget {budget} seed {seed}: mIoU {:.4}", r.miou);
                Ok(AblationRow {
                    method,
                    budget,
                    seed,
                    miou: r.miou,
                    iou_class0: r.per_class.first().copied().flatten(),
                    iou_class1: r.per_class.get(1).copied().flatten(),
                })
            };
            run().with_context(|| format!("{method} budget {budget} seed {seed}"))
        })
        .collect();

    fs::create_dir_all(&cfg.out_dir)?;
    cfg.save_into(&cfg.out_dir)?;
    let path: PathBuf = cfg.out_dir.join("ablation.csv");
    let failed = write_ablation(&path, results)?;
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{failed} of {} cells failed; completed rows are in {}",
            cells.len(),
            path.display()
        )));
    }
    info!("wrote {}", path.display());
    Ok(())
}

/// Writes the successful rows in matrix order, flushing each one, and
/// returns the number of failed cells.
fn write_ablation(path: &Path, results: Vec<anyhow::Result<AblationRow>>) -> Result<usize, Failure> {
    let mut w = csv::Writer::from_path(path)?;
    let mut failed = 0;
    for r in results {
        match r {
            Ok(row) => {
                w.serialize(row)?;
                w.flush()?;
            }
            Err(e) => {
                failed += 1;
                warn!("cell failed: {e:#}");
            }
        }
    }
    w.flush()?;
    Ok(failed)
}

fn export_bank(cfg: &ExperimentConfig, ckpt: &Path, epoch: Option<u64>, corpus: Option<&Path>) -> Outcome {
    let state = load_checkpoint(ckpt)?;
    let epoch = match epoch {
        Some(e) => e,
        None => {
            // completed passes over the unlabeled pool
            let prepared = Prepared::load(cfg, corpus)?;
            let pool = prepared.ids(cfg, SplitName::Unlabeled)?.len() as u64;
            (state.step() * cfg.train.unlabeled_batch as u64)
                .checked_div(pool)
                .unwrap_or(0)
        }
    };
    let paths = state.bank.export(&cfg.out_dir, epoch)?;
    for p in &paths {
        info!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_cells_leave_completed_rows() {
        let row = |seed| AblationRow {
            method: Method::Full,
            budget: 0.1,
            seed,
            miou: 0.5,
            iou_class0: Some(0.9),
            iou_class1: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        let results = vec![Ok(row(0)), Err(anyhow::anyhow!("diverged")), Ok(row(2))];
        assert_eq!(write_ablation(&path, results).unwrap(), 1);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "method,budget,seed,miou,iou_class0,iou_class1\nfull,0.1,0,0.5,0.9,\nfull,0.1,2,0.5,0.9,\n"
        );
    }
}
