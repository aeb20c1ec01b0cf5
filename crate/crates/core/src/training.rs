//! STBP training: loss, Adam, learning-rate schedules, the epoch loop and
//! evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{add_noise, ImageDataset};
use crate::error::{Error, Result};
use crate::layers::{LayerGate, Network, ParamStore};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(
            "softmax_xent",
            format!("logits {s:?} for {} labels", labels.len()),
        ));
    }
    if s[0] == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", s[1])));
    }
    Ok((s[0], s[1]))
}

/// Row-wise softmax, max-shifted.
fn softmax_rows(logits: &Tensor, c: usize) -> Vec<f32> {
    let mut p = logits.data().to_vec();
    for row in p.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (n, c) = check_labels(logits, labels)?;
    let mut total = 0.0f64;
    for (row, &l) in logits.data().chunks_exact(c).zip(labels) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
        total += f64::from(lse - row[l]);
    }
    Ok((total / n as f64) as f32)
}

struct SoftmaxXent {
    labels: Vec<usize>,
}

impl CustomOp for SoftmaxXent {
    fn name(&self) -> &'static str {
        "softmax_xent"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let (n, c) = check_labels(logits, &self.labels)?;
        let mut p = softmax_rows(logits, c);
        let scale = grad.item() / n as f32;
        for (row, &l) in p.chunks_exact_mut(c).zip(&self.labels) {
            row[l] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(vec![Some(Tensor::new(logits.shape(), p)?)])
    }
}

pub fn softmax_xent_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let loss = softmax_xent(g.value(logits), labels)?;
    Ok(g.custom(
        &[logits],
        Tensor::scalar(loss),
        Box::new(SoftmaxXent {
            labels: labels.to_vec(),
        }),
    ))
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has an entry in `grads`; parameters
    /// without one are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = (1.0 - self.beta2.powi(t)).sqrt();
        for (name, gr) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if gr.shape() != p.value.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{name}: {:?} vs {:?}", gr.shape(), p.value.shape()),
                ));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(gr.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(gr.shape()));
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / bc1) / (v.sqrt() / bc2 + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    None,
    /// Multiply the rate by `factor` at the start of each listed epoch
    /// (0-based).
    Multistep {
        milestones: Vec<usize>,
        #[serde(default = "default_factor")]
        factor: f32,
    },
}

fn default_factor() -> f32 {
    0.25
}

impl LrSchedule {
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        match self {
            LrSchedule::None => base,
            LrSchedule::Multistep { milestones, factor } => {
                let hits = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(hits as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    /// Gaussian noise amplitude added to training images, redrawn every
    /// epoch.
    #[serde(default)]
    pub train_noise: f32,
    /// Worker threads for evaluation.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 128,
            lr: 1e-3,
            lr_schedule: LrSchedule::None,
            seed: 0,
            train_noise: 0.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::config("train.lr", format!("{} is not a valid rate", self.lr)));
        }
        if self.train_noise.is_nan() || self.train_noise < 0.0 {
            return Err(Error::config("train.train_noise", "must be non-negative"));
        }
        if self.threads == 0 {
            return Err(Error::config("train.threads", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub test_acc: f32,
    pub wall_ms: u64,
}

/// One gradient step on a batch; returns the batch loss.
pub fn train_step(
    net: &mut Network,
    opt: &mut Adam,
    images: Tensor,
    labels: &[usize],
    gates: Option<&[Option<LayerGate>]>,
) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let fwd = net.forward(&mut g, x, gates)?;
    let loss = softmax_xent_var(&mut g, fwd.logits, labels)?;
    g.backward(loss)?;
    let grads: BTreeMap<String, Tensor> = fwd
        .params
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.clone())))
        .collect();
    opt.step(net.params_mut(), &grads)?;
    Ok(g.value(loss).item())
}

/// Trains for `cfg.epochs` epochs with a fresh optimizer, evaluating on
/// `test` after each epoch. `on_epoch` sees each epoch's metrics as soon as
/// they are available.
pub fn train_supervised(
    net: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
    gates: Option<&[Option<LayerGate>]>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("training set `{}` is empty", train.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.lr = cfg.lr_schedule.lr_at(cfg.lr, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (mut images, labels) = train.batch(batch);
            if cfg.train_noise > 0.0 {
                add_noise(&mut images, cfg.train_noise, &mut rng);
            }
            let loss = train_step(net, &mut opt, images, &labels, gates)?;
            loss_sum += f64::from(loss) * batch.len() as f64;
            seen += batch.len();
        }
        let test_acc = evaluate(net, test, gates, cfg.batch_size.max(256), cfg.threads)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: (loss_sum / seen as f64) as f32,
            test_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&m)?;
        history.push(m);
    }
    Ok(history)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Logits `[N, classes]` for a batch of inputs, without tracking gradients.
pub fn predict(net: &Network, images: Tensor, gates: Option<&[Option<LayerGate>]>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let fwd = net.forward_frozen(&mut g, x, gates)?;
    g.check_finite()?;
    Ok(g.value(fwd.logits).clone())
}

fn count_correct(
    net: &Network,
    ds: &ImageDataset,
    range: std::ops::Range<usize>,
    gates: Option<&[Option<LayerGate>]>,
    batch_size: usize,
) -> Result<usize> {
    let idx: Vec<usize> = range.collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = ds.batch(chunk);
        let logits = predict(net, images, gates)?;
        let c = logits.shape()[1];
        correct += logits
            .data()
            .chunks_exact(c)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(correct)
}

/// Classification accuracy in `[0, 1]`. With `threads > 1` the dataset is
/// split into contiguous shards evaluated concurrently; the result does not
/// depend on the thread count.
pub fn evaluate(
    net: &Network,
    ds: &ImageDataset,
    gates: Option<&[Option<LayerGate>]>,
    batch_size: usize,
    threads: usize,
) -> Result<f32> {
    if ds.is_empty() {
        return Err(Error::Data(format!("cannot evaluate on empty dataset `{}`", ds.name)));
    }
    let n = ds.len();
    let batch_size = batch_size.max(1);
    let correct = if threads <= 1 {
        count_correct(net, ds, 0..n, gates, batch_size)?
    } else {
        let shard = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|i| {
                    let r = (i * shard).min(n)..((i + 1) * shard).min(n);
                    s.spawn(move || count_correct(net, ds, r, gates, batch_size))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f32 / n as f32)
}
