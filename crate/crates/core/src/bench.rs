//! Timing of the point neuron against the sequential and matrix-form
//! dendritic updates.
//!
//! Each trial simulates one neuron for `T` steps. Dendritic neurons get a
//! `[T, B]` standard normal input, point neurons a `[T, 1]` one. The timed
//! path is dendritic update, activation, branch sum and soma. Inputs are
//! generated before timing and warm-up trials are not counted.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{
    branch_to_soma, dend_activate, dend_update_parallel, dend_update_seq, soma_forward, ActivationKind, DecayMatrix,
    NeuronParams, SurrogateSpec,
};
use crate::tensor::Tensor;

pub const EQUIVALENCE_TOL: f32 = 1e-5;
const WARMUP_TRIALS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMode {
    PointRef,
    DendVanilla,
    DendParallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    #[serde(rename = "T")]
    pub t_steps: usize,
    #[serde(rename = "B")]
    pub branches: usize,
    pub trials: usize,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_ts")]
    pub t_steps: Vec<usize>,
    #[serde(default = "default_bs")]
    pub branches: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub neuron: NeuronParams,
}

fn default_ts() -> Vec<usize> {
    (0..10).map(|p| 1 << p).collect()
}

fn default_bs() -> Vec<usize> {
    (0..7).map(|p| 1 << p).collect()
}

fn default_trials() -> usize {
    512
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            t_steps: default_ts(),
            branches: default_bs(),
            trials: default_trials(),
            seed: 0,
            neuron: NeuronParams::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("bench.trials", "must be at least 1"));
        }
        if self.t_steps.is_empty() || self.t_steps.contains(&0) {
            return Err(Error::config(
                "bench.t_steps",
                "needs non-empty list of positive values",
            ));
        }
        if self.branches.is_empty() || self.branches.contains(&0) {
            return Err(Error::config(
                "bench.branches",
                "needs non-empty list of positive values",
            ));
        }
        self.neuron.validate()
    }
}

fn inputs(rng: &mut ChaCha8Rng, n: usize, shape: &[usize]) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::from_fn(shape, |_| StandardNormal.sample(rng)))
        .collect()
}

/// Milliseconds spent running `f` over every input, after an untimed pass
/// over the first `WARMUP_TRIALS`.
fn timed(xs: &[Tensor], mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    for x in &xs[..WARMUP_TRIALS.min(xs.len())] {
        std::hint::black_box(f(x)?);
    }
    let start = Instant::now();
    for x in xs {
        std::hint::black_box(f(x)?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn dend_tail(v: &Tensor, k: &Tensor, p: &NeuronParams, sg: &SurrogateSpec) -> Result<Tensor> {
    let y = branch_to_soma(&dend_activate(v, ActivationKind::LeakyRelu, None)?, k)?;
    Ok(soma_forward(&y, p, sg).0)
}

/// Times every `(mode, T, B)` combination. Point-neuron rows do not depend
/// on `B` but are repeated per `B` so the grid is complete. Fails if the two
/// dendritic paths' states differ by more than [`EQUIVALENCE_TOL`] on any
/// trial.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    let p = cfg.neuron;
    let sg = SurrogateSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &t in &cfg.t_steps {
        let dm = DecayMatrix::new(t, p.alpha)?;
        for &b in &cfg.branches {
            let k = Tensor::ones(&[t, 1, b]);
            let xs_point = inputs(&mut rng, cfg.trials, &[t, 1]);
            let xs = inputs(&mut rng, cfg.trials, &[t, 1, b]);

            let point_ms = timed(&xs_point, |x| Ok(soma_forward(x, &p, &sg).0))?;
            let mut v_seq = Vec::with_capacity(cfg.trials);
            let seq_ms = timed(&xs, |x| {
                let v = dend_update_seq(x, p.alpha)?;
                let s = dend_tail(&v, &k, &p, &sg)?;
                v_seq.push(v);
                Ok(s)
            })?;
            let mut v_par = Vec::with_capacity(cfg.trials);
            let par_ms = timed(&xs, |x| {
                let v = dend_update_parallel(x, &dm)?;
                let s = dend_tail(&v, &k, &p, &sg)?;
                v_par.push(v);
                Ok(s)
            })?;
            // Warm-up outputs are pushed too; both lists line up trial by trial.
            let drift = v_seq
                .iter()
                .zip(&v_par)
                .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
                .fold(0.0f32, f32::max);
            if drift.is_nan() || drift > EQUIVALENCE_TOL {
                return Err(Error::contract(format!(
                    "dendritic paths diverge by {drift} at T={t}, B={b}"
                )));
            }
            for (mode, ms) in [
                (BenchMode::PointRef, point_ms),
                (BenchMode::DendVanilla, seq_ms),
                (BenchMode::DendParallel, par_ms),
            ] {
                rows.push(BenchResult {
                    mode,
                    t_steps: t,
                    branches: b,
                    trials: cfg.trials,
                    total_ms: ms,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[BenchResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn lookup(rows: &[BenchResult], mode: BenchMode, t: usize, b: usize) -> Option<&BenchResult> {
    rows.iter()
        .find(|r| r.mode == mode && r.t_steps == t && r.branches == b)
}
