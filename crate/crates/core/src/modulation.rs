//! Task-context modulation for task-incremental learning.
//!
//! Dendritic branch gating (DBG) sets every dendritic layer's strength
//! matrix from the task index `q`: a one-hot branch selector, a sparse
//! random softmax row, or a learnable per-task table. XdG instead masks a
//! fixed random subset of each hidden layer's outputs.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::layers::{fc_name, layer_prefix, LayerGate, Network, NeuronKind};
use crate::metrics::AccuracyMatrix;
use crate::tensor::{Graph, Tensor};
use crate::training::{evaluate, softmax_xent_var, train_supervised, EpochMetrics, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// No context signal.
    #[default]
    None,
    DbgOnehot,
    DbgRandom {
        rho: f32,
    },
    DbgEmbedding,
    Xdg {
        keep: f32,
    },
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::DbgRandom { rho } if !(rho > 0.0 && rho <= 1.0) => {
                Err(Error::config("strategy.rho", format!("{rho} not in (0, 1]")))
            }
            Strategy::Xdg { keep } if !(keep > 0.0 && keep <= 1.0) => {
                Err(Error::config("strategy.keep", format!("{keep} not in (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    fn is_dbg(&self) -> bool {
        matches!(
            self,
            Strategy::DbgOnehot | Strategy::DbgRandom { .. } | Strategy::DbgEmbedding
        )
    }
}

/// Every row is `e_{q mod B}`.
pub fn dbg_onehot(q: usize, t_steps: usize, branches: usize) -> Tensor {
    let hot = q % branches.max(1);
    Tensor::from_fn(&[t_steps, branches], |i| if i % branches == hot { 1.0 } else { 0.0 })
}

/// Generator keyed by a tuple of indices, so any entry can be regenerated
/// on its own.
fn keyed_rng(words: [u64; 4]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Softmax over the entries where `mask` is set; all zeros if none are.
pub fn masked_softmax(mask: &[bool], values: &[f32]) -> Vec<f32> {
    let m = mask
        .iter()
        .zip(values)
        .filter(|(&on, _)| on)
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = mask
        .iter()
        .zip(values)
        .map(|(&on, &v)| if on { (v - m).exp() } else { 0.0 })
        .collect();
    let z: f32 = e.iter().sum();
    if z == 0.0 {
        return e;
    }
    e.into_iter().map(|v| v / z).collect()
}

/// One neuron's random strength matrix: a `Bernoulli(rho)` mask over
/// `N(0, 1)` values, softmax-normalized over the kept entries and repeated
/// over time.
pub fn dbg_random(
    q: usize,
    layer: usize,
    neuron: usize,
    t_steps: usize,
    branches: usize,
    rho: f32,
    master_seed: u64,
) -> Tensor {
    let mut rng = keyed_rng([master_seed, q as u64, layer as u64, neuron as u64]);
    let mask: Vec<bool> = (0..branches).map(|_| rng.random::<f32>() < rho).collect();
    let values: Vec<f32> = (0..branches).map(|_| rng.sample(StandardNormal)).collect();
    let row = masked_softmax(&mask, &values);
    Tensor::from_fn(&[t_steps, branches], |i| row[i % branches])
}

/// `[T, C, B]` strengths for all `C` neurons of a layer.
pub fn dbg_random_layer(
    q: usize,
    layer: usize,
    neurons: usize,
    t_steps: usize,
    branches: usize,
    rho: f32,
    master_seed: u64,
) -> Tensor {
    let per: Vec<Tensor> = (0..neurons)
        .map(|c| dbg_random(q, layer, c, 1, branches, rho, master_seed))
        .collect();
    Tensor::from_fn(&[t_steps, neurons, branches], |i| {
        let c = (i / branches) % neurons;
        per[c].data()[i % branches]
    })
}

pub fn embedding_name(layer: usize, q: usize) -> String {
    format!("dbg.{}.task{q}", layer_prefix(layer))
}

/// Adds an all-ones `[T, B]` table per (dendritic layer, task), unless
/// already present.
pub fn add_embedding_tables(net: &mut Network, tasks: usize) {
    let spec = net.spec().clone();
    for (k, b) in spec.blocks.iter().enumerate() {
        if let NeuronKind::Dend { branches, .. } = b.neuron.kind {
            for q in 0..tasks {
                let name = embedding_name(k, q);
                if !net.params().contains(&name) {
                    net.params_mut()
                        .insert(name, Tensor::ones(&[spec.t_steps, branches]), true);
                }
            }
        }
    }
}

pub fn dbg_embedding_lookup(net: &Network, q: usize, layer: usize) -> Result<&Tensor> {
    net.params()
        .get(&embedding_name(layer, q))
        .map(|p| &p.value)
        .ok_or_else(|| Error::contract(format!("no embedding table for task {q} in layer {layer}")))
}

/// Binary mask keeping `ceil(keep * hidden)` units, fixed per `(q, layer)`.
pub fn xdg_mask(q: usize, layer: usize, hidden: usize, keep: f32, master_seed: u64) -> Tensor {
    let kept = ((keep as f64 * hidden as f64).ceil() as usize).min(hidden);
    let mut idx: Vec<usize> = (0..hidden).collect();
    idx.shuffle(&mut keyed_rng([master_seed, q as u64, layer as u64, u64::MAX]));
    let mut m = Tensor::zeros(&[hidden]);
    for &i in &idx[..kept] {
        m.data_mut()[i] = 1.0;
    }
    m
}

/// Builds and caches the per-layer gates of each task.
pub struct Modulator {
    strategy: Strategy,
    seed: u64,
    cache: HashMap<usize, Vec<Option<LayerGate>>>,
}

impl Modulator {
    pub fn new(strategy: Strategy, seed: u64) -> Result<Self> {
        strategy.validate()?;
        Ok(Self {
            strategy,
            seed,
            cache: HashMap::new(),
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Gates for task `q`, or `None` when the strategy uses no context.
    pub fn gates(&mut self, net: &Network, q: usize) -> Result<Option<&[Option<LayerGate>]>> {
        if self.strategy == Strategy::None {
            return Ok(None);
        }
        if !self.cache.contains_key(&q) {
            let g = self.build(net, q)?;
            self.cache.insert(q, g);
        }
        Ok(self.cache.get(&q).map(Vec::as_slice))
    }

    fn build(&self, net: &Network, q: usize) -> Result<Vec<Option<LayerGate>>> {
        let spec = net.spec();
        let t = spec.t_steps;
        let widths = spec.widths();
        spec.blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let branches = match (b.neuron.kind, self.strategy.is_dbg()) {
                    (NeuronKind::Dend { branches, .. }, _) => branches,
                    (NeuronKind::Point, true) => {
                        return Err(Error::contract(format!(
                            "branch gating needs dendritic neurons, layer {k} is a point layer"
                        )))
                    }
                    (NeuronKind::Point, false) => 1,
                };
                Ok(Some(match self.strategy {
                    Strategy::None => unreachable!("handled by the caller"),
                    Strategy::DbgOnehot => LayerGate::Strength(dbg_onehot(q, t, branches)),
                    Strategy::DbgRandom { rho } => {
                        LayerGate::Strength(dbg_random_layer(q, k, widths[k], t, branches, rho, self.seed))
                    }
                    Strategy::DbgEmbedding => {
                        dbg_embedding_lookup(net, q, k)?;
                        LayerGate::StrengthParam(embedding_name(k, q))
                    }
                    Strategy::Xdg { keep } => LayerGate::Mask(xdg_mask(q, k, widths[k], keep, self.seed)),
                }))
            })
            .collect()
    }
}

/// One task of a continual stream.
pub struct Task {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub strategy: Strategy,
    /// Keep the readout layer at its initial weights.
    #[serde(default)]
    pub freeze_readout: bool,
    /// Seed for random gates and masks.
    #[serde(default)]
    pub gate_seed: u64,
}

/// Trains on the tasks in order. After task `q`, every task `j <= q` is
/// evaluated under its own context and recorded as `acc[q][j]`.
///
/// Each task gets a fresh optimizer, and its shuffling seed is the
/// configured seed plus `q`.
pub fn continual_run(
    net: &mut Network,
    tasks: &[Task],
    cfg: &ContinualConfig,
    mut on_epoch: impl FnMut(usize, &EpochMetrics) -> Result<()>,
) -> Result<AccuracyMatrix> {
    if tasks.is_empty() {
        return Err(Error::contract("no tasks"));
    }
    if cfg.strategy == Strategy::DbgEmbedding {
        add_embedding_tables(net, tasks.len());
    }
    if cfg.freeze_readout {
        let name = net.readout_name();
        net.params_mut().set_trainable(&name, false)?;
    }
    let mut modulator = Modulator::new(cfg.strategy, cfg.gate_seed)?;
    let mut acc = AccuracyMatrix::new(tasks.len());
    for (q, task) in tasks.iter().enumerate() {
        let tc = TrainConfig {
            seed: cfg.train.seed.wrapping_add(q as u64),
            ..cfg.train.clone()
        };
        let gates = modulator.gates(net, q)?.map(<[_]>::to_vec);
        train_supervised(net, &task.train, &task.test, &tc, gates.as_deref(), |m| on_epoch(q, m))?;
        for (j, old) in tasks.iter().enumerate().take(q + 1) {
            let gates = modulator.gates(net, j)?;
            let a = evaluate(net, &old.test, gates, tc.batch_size.max(256), tc.threads)?;
            acc.set(q, j, a)?;
        }
    }
    Ok(acc)
}

/// Hidden weight entries that violate one-hot branch isolation for task
/// `q`: every column whose folded channel feeds a branch other than
/// `q mod B` must get exactly zero gradient. Returns `(parameter, column)`
/// pairs with a non-zero gradient there, plus the number of columns checked.
pub fn onehot_isolation_violations(
    net: &Network,
    images: Tensor,
    labels: &[usize],
    q: usize,
) -> Result<(Vec<(String, usize)>, usize)> {
    let mut modulator = Modulator::new(Strategy::DbgOnehot, 0)?;
    let gates = modulator.gates(net, q)?;
    let mut g = Graph::new();
    let x = g.constant(images);
    let fwd = net.forward(&mut g, x, gates)?;
    let loss = softmax_xent_var(&mut g, fwd.logits, labels)?;
    g.backward(loss)?;
    let mut bad = Vec::new();
    let mut checked = 0;
    for (k, b) in net.spec().blocks.iter().enumerate() {
        let NeuronKind::Dend { branches, .. } = b.neuron.kind else {
            continue;
        };
        let name = fc_name(k);
        let grad = fwd
            .params
            .get(&name)
            .and_then(|&v| g.grad(v))
            .ok_or_else(|| Error::contract(format!("no gradient reached `{name}`")))?;
        let cols = grad.shape()[1];
        for col in (0..cols).filter(|c| c % branches != q % branches) {
            checked += 1;
            if grad.data().iter().skip(col).step_by(cols).any(|&v| v != 0.0) {
                bad.push((name.clone(), col));
            }
        }
    }
    Ok((bad, checked))
}
