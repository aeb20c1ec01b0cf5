//! Runs a configured experiment and writes its artifacts into the output
//! directory:
//!
//! | file | experiments |
//! |---|---|
//! | `config.toml` | all |
//! | `metrics.csv` | every run that trains |
//! | `summary.csv` | supervised, continual |
//! | `task_manifest.csv`, `accuracy_matrix.csv` | continual |
//! | `noise.csv` | noise_eval |
//! | `adv.csv` | adv_eval |
//! | `bench.csv` | bench |
//! | `checkpoint.bin`, `checkpoint.manifest` | every run with a model |

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::{self, BenchConfig};
use crate::config::{DataConfig, Experiment, ExperimentConfig};
use crate::data::{corrupt, fgsm_dataset, load_idx, permute_task, task_seeds, write_task_manifest, ImageDataset};
use crate::error::{Error, Result};
use crate::layers::{Network, ParamStore};
use crate::metrics::avg_accuracy;
use crate::modulation::{continual_run, ContinualConfig, Task};
use crate::training::{evaluate, train_supervised, EpochMetrics, TrainConfig};

pub const CLASSES: usize = 10;
pub const CHECKPOINT: &str = "checkpoint";

#[derive(Serialize)]
struct TaskEpoch {
    task: usize,
    epoch: usize,
    train_loss: f32,
    test_acc: f32,
    wall_ms: u64,
}

#[derive(Serialize)]
struct LevelAccuracy {
    level: f32,
    accuracy: f32,
}

#[derive(Serialize)]
struct EpsAccuracy {
    eps: f32,
    accuracy: f32,
}

struct CsvLog {
    w: csv::Writer<File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf) -> Result<Self> {
        Ok(Self {
            w: csv::Writer::from_path(&path)?,
            path,
        })
    }

    /// Writes and flushes one row so partial runs leave usable files.
    fn row(&mut self, r: &impl Serialize) -> Result<()> {
        self.w.serialize(r)?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_summary(path: PathBuf, key: &str, value: f32) -> Result<()> {
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([key])?;
    w.write_record([value.to_string()])?;
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_data(cfg: &DataConfig) -> Result<(ImageDataset, ImageDataset)> {
    let mut train = load_idx(&cfg.train_images, &cfg.train_labels)?;
    let mut test = load_idx(&cfg.test_images, &cfg.test_labels)?;
    if let Some(n) = cfg.train_limit {
        train = train.take(n);
    }
    if let Some(n) = cfg.test_limit {
        test = test.take(n);
    }
    Ok((train, test))
}

/// A fresh network seeded from the training seed, or the configured
/// checkpoint.
pub fn build_network(cfg: &ExperimentConfig, inputs: usize) -> Result<Network> {
    let model = cfg.model()?;
    let spec = model.network_spec(inputs, CLASSES);
    spec.validate()?;
    match &model.checkpoint {
        Some(dir) => Network::from_params(spec, ParamStore::load(dir, CHECKPOINT)?),
        None => Network::new(spec, cfg.train.as_ref().map_or(0, |t| t.seed)),
    }
}

fn progress(tag: &str, m: &EpochMetrics) {
    eprintln!(
        "{tag}epoch {:>3}  loss {:.4}  test acc {:.4}  ({} ms)",
        m.epoch, m.train_loss, m.test_acc, m.wall_ms
    );
}

/// Trains unless the model comes from a checkpoint.
fn fit(net: &mut Network, cfg: &ExperimentConfig, train: &ImageDataset, test: &ImageDataset, out: &Path) -> Result<()> {
    if cfg.model()?.checkpoint.is_some() {
        return Ok(());
    }
    let tc = cfg.train.as_ref().ok_or_else(|| Error::config("train", "missing"))?;
    let mut log = CsvLog::create(out.join("metrics.csv"))?;
    train_supervised(net, train, test, tc, None, |m| {
        progress("", m);
        log.row(m)
    })?;
    Ok(())
}

fn train_cfg(cfg: &ExperimentConfig) -> Result<&TrainConfig> {
    cfg.train.as_ref().ok_or_else(|| Error::config("train", "missing"))
}

/// Validates `cfg` for `exp`, writes the config snapshot and runs.
pub fn run(exp: Experiment, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate(exp)?;
    let out = cfg.output_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let snapshot = ExperimentConfig {
        experiment: Some(exp),
        ..cfg.clone()
    };
    let snap_path = out.join("config.toml");
    std::fs::write(&snap_path, snapshot.to_toml()).map_err(|e| Error::io(&snap_path, e))?;

    if exp == Experiment::Bench {
        return run_bench(cfg.bench.as_ref().expect("validated"), &out);
    }
    let data = cfg.data.as_ref().expect("validated");
    let (train, test) = load_data(data)?;
    let mut net = build_network(cfg, train.features())?;
    match exp {
        Experiment::Supervised => {
            fit(&mut net, cfg, &train, &test, &out)?;
            let tc = train_cfg(cfg)?;
            let acc = evaluate(&net, &test, None, tc.batch_size.max(256), tc.threads)?;
            write_summary(out.join("summary.csv"), "final_test_acc", acc)?;
            eprintln!("final test accuracy {acc:.4}");
        }
        Experiment::Continual => run_continual(&mut net, cfg, &train, &test, &out)?,
        Experiment::NoiseEval => {
            fit(&mut net, cfg, &train, &test, &out)?;
            let tc = train_cfg(cfg)?;
            let noise = cfg.noise.as_ref().expect("validated");
            let mut log = CsvLog::create(out.join("noise.csv"))?;
            for &level in &noise.levels {
                let noisy = corrupt(&test, level, noise.seed);
                let accuracy = evaluate(&net, &noisy, None, tc.batch_size.max(256), tc.threads)?;
                eprintln!("noise {level:.2}  acc {accuracy:.4}");
                log.row(&LevelAccuracy { level, accuracy })?;
            }
        }
        Experiment::AdvEval => {
            fit(&mut net, cfg, &train, &test, &out)?;
            let tc = train_cfg(cfg)?;
            let adv = cfg.adv.as_ref().expect("validated");
            let mut log = CsvLog::create(out.join("adv.csv"))?;
            for &eps in &adv.eps {
                let attacked = fgsm_dataset(&net, &test, eps, tc.batch_size, None)?;
                let accuracy = evaluate(&net, &attacked, None, tc.batch_size.max(256), tc.threads)?;
                eprintln!("eps {eps:.2}  acc {accuracy:.4}");
                log.row(&EpsAccuracy { eps, accuracy })?;
            }
        }
        Experiment::Bench => unreachable!(),
    }
    net.params().save(&out, CHECKPOINT)
}

fn run_continual(
    net: &mut Network,
    cfg: &ExperimentConfig,
    train: &ImageDataset,
    test: &ImageDataset,
    out: &Path,
) -> Result<()> {
    let c = cfg.continual.as_ref().expect("validated");
    let seeds = task_seeds(c.task_seed, c.tasks);
    write_task_manifest(&out.join("task_manifest.csv"), &seeds)?;
    let tasks: Vec<Task> = seeds
        .iter()
        .map(|&(_, s)| Task {
            train: permute_task(train, s),
            test: permute_task(test, s),
        })
        .collect();
    let ccfg = ContinualConfig {
        train: train_cfg(cfg)?.clone(),
        strategy: c.strategy,
        freeze_readout: c.freeze_readout,
        gate_seed: c.gate_seed,
    };
    let mut log = CsvLog::create(out.join("metrics.csv"))?;
    let acc = continual_run(net, &tasks, &ccfg, |task, m| {
        progress(&format!("task {task:>2}  "), m);
        log.row(&TaskEpoch {
            task,
            epoch: m.epoch,
            train_loss: m.train_loss,
            test_acc: m.test_acc,
            wall_ms: m.wall_ms,
        })
    })?;
    acc.write_csv(&out.join("accuracy_matrix.csv"))?;
    let avg = avg_accuracy(&acc, c.tasks - 1)?;
    write_summary(out.join("summary.csv"), "final_avg_acc", avg)?;
    eprintln!("final average accuracy {avg:.4}");
    Ok(())
}

fn run_bench(cfg: &BenchConfig, out: &Path) -> Result<()> {
    let rows = bench::run_bench(cfg)?;
    for r in &rows {
        eprintln!("{:?} T={} B={}  {:.3} ms", r.mode, r.t_steps, r.branches, r.total_ms);
    }
    bench::write_csv(&out.join("bench.csv"), &rows)
}
