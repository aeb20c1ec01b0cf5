//! TOML experiment configuration.
//!
//! ```toml
//! experiment = "supervised"
//! output_dir = "runs/fmnist-point"
//!
//! [model]
//! hidden = 200
//! t_steps = 4
//! neuron = { type = "dend", branches = 1, activation = "mexican_hat" }
//!
//! [train]
//! epochs = 5
//! batch_size = 128
//! lr = 1e-3
//!
//! [data]
//! train_images = "data/fashion/train-images-idx3-ubyte"
//! train_labels = "data/fashion/train-labels-idx1-ubyte"
//! test_images = "data/fashion/t10k-images-idx3-ubyte"
//! test_labels = "data/fashion/t10k-labels-idx1-ubyte"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::layers::{NetworkSpec, NeuronKind, NeuronLayerSpec};
use crate::modulation::Strategy;
use crate::neuron::{NeuronParams, SurrogateSpec, UpdatePath};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Supervised,
    Continual,
    NoiseEval,
    AdvEval,
    Bench,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Supervised => "supervised",
            Experiment::Continual => "continual",
            Experiment::NoiseEval => "noise_eval",
            Experiment::AdvEval => "adv_eval",
            Experiment::Bench => "bench",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub t_steps: usize,
    pub neuron: NeuronKind,
    #[serde(default)]
    pub params: NeuronParams,
    #[serde(default)]
    pub path: UpdatePath,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    /// Load weights from `<dir>/checkpoint.{bin,manifest}` instead of
    /// initializing and training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl ModelConfig {
    pub fn network_spec(&self, inputs: usize, classes: usize) -> NetworkSpec {
        let layer = NeuronLayerSpec {
            kind: self.neuron,
            params: self.params,
        };
        let mut spec = NetworkSpec::two_hidden(inputs, self.hidden, classes, self.t_steps, layer);
        spec.surrogate = self.surrogate;
        spec.path = self.path;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Use only the first `n` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualSection {
    pub tasks: usize,
    /// Task `q` permutes pixels with seed `task_seed + q`.
    #[serde(default)]
    pub task_seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub freeze_readout: bool,
    #[serde(default)]
    pub gate_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_noise_levels")]
    pub levels: Vec<f32>,
    #[serde(default)]
    pub seed: u64,
}

pub fn default_noise_levels() -> Vec<f32> {
    (0..=10).map(|i| i as f32 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvSection {
    #[serde(default = "default_eps")]
    pub eps: Vec<f32>,
}

pub fn default_eps() -> Vec<f32> {
    (0..=5).map(|i| i as f32 * 0.04).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continual: Option<ContinualSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv: Option<AdvSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

fn require<'a, T>(v: &'a Option<T>, field: &str, exp: Experiment) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::config(field, format!("section is required for {exp}")))
}

fn must_exist(path: &Path, field: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{} does not exist", path.display())))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "document".into());
            Error::config(line, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        require(&self.model, "model", Experiment::Supervised)
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::config("output_dir", "not set in the config or on the command line"))
    }

    /// Checks everything `exp` needs, including that input files exist.
    pub fn validate(&self, exp: Experiment) -> Result<()> {
        if let Some(e) = self.experiment {
            if e != exp {
                return Err(Error::config(
                    "experiment",
                    format!("config is for {e} but the {exp} subcommand was used"),
                ));
            }
        }
        self.output_dir()?;
        if exp == Experiment::Bench {
            return require(&self.bench, "bench", exp)?.validate();
        }
        let model = require(&self.model, "model", exp)?;
        if model.hidden == 0 {
            return Err(Error::config("model.hidden", "must be at least 1"));
        }
        if model.t_steps == 0 {
            return Err(Error::config("model.t_steps", "must be at least 1"));
        }
        let b = model.neuron.branches();
        if b == 0 || model.hidden % b != 0 {
            return Err(Error::config(
                "model.hidden",
                format!("{} hidden units cannot be split into {b} branches", model.hidden),
            ));
        }
        model.network_spec(1, 1).validate()?;
        if let Some(dir) = &model.checkpoint {
            must_exist(&dir.join("checkpoint.manifest"), "model.checkpoint")?;
        }
        require(&self.train, "train", exp)?.validate()?;
        let data = require(&self.data, "data", exp)?;
        must_exist(&data.train_images, "data.train_images")?;
        must_exist(&data.train_labels, "data.train_labels")?;
        must_exist(&data.test_images, "data.test_images")?;
        must_exist(&data.test_labels, "data.test_labels")?;
        match exp {
            Experiment::Continual => {
                let c = require(&self.continual, "continual", exp)?;
                if c.tasks == 0 {
                    return Err(Error::config("continual.tasks", "must be at least 1"));
                }
                c.strategy.validate()?;
                let dbg = !matches!(c.strategy, Strategy::None | Strategy::Xdg { .. });
                if dbg && model.neuron == NeuronKind::Point {
                    return Err(Error::config(
                        "continual.strategy",
                        "branch gating needs a dendritic model",
                    ));
                }
            }
            Experiment::NoiseEval => {
                let n = require(&self.noise, "noise", exp)?;
                if n.levels.is_empty() || n.levels.iter().any(|l| l.is_nan() || *l < 0.0) {
                    return Err(Error::config("noise.levels", "needs non-negative levels"));
                }
            }
            Experiment::AdvEval => {
                let a = require(&self.adv, "adv", exp)?;
                if a.eps.is_empty() || a.eps.iter().any(|e| e.is_nan() || *e < 0.0) {
                    return Err(Error::config("adv.eps", "needs non-negative values"));
                }
            }
            Experiment::Supervised | Experiment::Bench => {}
        }
        Ok(())
    }
}
