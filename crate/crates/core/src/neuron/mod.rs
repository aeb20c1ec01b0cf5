//! Dendritic spiking neuron dynamics.
//!
//! Per neuron and time step `t`, with `B` branches:
//!
//! ```text
//! V_i[t] = alpha * V_i[t-1] + X_i[t]            branch state
//! Y[t]   = sum_i K[t,i] * f_i(V_i[t])           branch-to-soma signal
//! H[t]   = beta * V[t-1] + (1 - beta) * Y[t]    soma (LIF)
//! S[t]   = Θ(H[t] - V_th)
//! V[t]   = (1 - S[t]) * H[t] + S[t] * V_reset
//! ```
//!
//! Branch inputs are laid out `[T, ..., B]`: the branch index is always the
//! last axis and time the first.

mod activation;
mod dendrite;
mod soma;

pub use activation::{dend_activate, dend_activate_var, leaky_relu, mexican_hat, swish, ActivationKind};
pub use dendrite::{dend_update_parallel, dend_update_parallel_var, dend_update_seq, dend_update_seq_var, DecayMatrix};
pub use soma::{soma_forward, soma_var, surrogate_heaviside, SomaKind, SpikeForward, SurrogateSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Per-layer neuron constants. Resting potentials are fixed at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronParams {
    pub alpha: f32,
    pub beta: f32,
    pub v_th: f32,
    pub v_reset: f32,
    pub soma: SomaKind,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            v_th: 1.0,
            v_reset: 0.0,
            soma: SomaKind::Lif,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} not in [0, 1)", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config("beta", format!("{} not in [0, 1)", self.beta)));
        }
        if self.v_th <= self.v_reset {
            return Err(Error::config(
                "v_th",
                format!("threshold {} must exceed reset {}", self.v_th, self.v_reset),
            ));
        }
        Ok(())
    }
}

/// Geometry of a strength tensor relative to a `[T, M, B]` signal: `K` is
/// `[T, P, B]` with `M % P == 0`, broadcast over the leading `M / P` factor.
/// `P = 1` shares one matrix across all neurons, `P = M` is fully per-entry.
fn strength_groups(y: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let ys = y.shape();
    let ks = k.shape();
    if ys.len() < 2 || ks.len() < 2 {
        return Err(Error::dim("branch_to_soma", format!("{ys:?} with K {ks:?}")));
    }
    let (t_steps, b) = (ys[0], ys[ys.len() - 1]);
    if ks[0] != t_steps || ks[ks.len() - 1] != b {
        return Err(Error::contract(format!(
            "strength matrix {ks:?} does not match [T={t_steps}, .., B={b}]"
        )));
    }
    let m = y.len() / (t_steps * b).max(1);
    let p = k.len() / (t_steps * b).max(1);
    let k_mid = &ks[1..ks.len() - 1];
    let y_mid = &ys[1..ys.len() - 1];
    if k_mid.len() > y_mid.len() || !y_mid.ends_with(k_mid) {
        return Err(Error::contract(format!(
            "strength matrix {ks:?} cannot broadcast over {ys:?}"
        )));
    }
    Ok((t_steps, m, p, b))
}

/// `Y[t, m] = sum_i K[t, m % P, i] * y[t, m, i]`; removes the branch axis.
pub fn branch_to_soma(y: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (t_steps, m, p, b) = strength_groups(y, k)?;
    let mut out = Vec::with_capacity(t_steps * m);
    let (yd, kd) = (y.data(), k.data());
    for t in 0..t_steps {
        for j in 0..m {
            let yr = &yd[(t * m + j) * b..(t * m + j + 1) * b];
            let kr = &kd[(t * p + j % p) * b..(t * p + j % p + 1) * b];
            out.push(yr.iter().zip(kr).map(|(a, c)| a * c).sum());
        }
    }
    let shape = &y.shape()[..y.ndim() - 1];
    Tensor::new(shape, out)
}

struct BranchSum;

impl CustomOp for BranchSum {
    fn name(&self) -> &'static str {
        "branch_to_soma"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (y, k) = (inputs[0], inputs[1]);
        let (t_steps, m, p, b) = strength_groups(y, k)?;
        let mut gy = needs[0].then(|| Tensor::zeros(y.shape()));
        let mut gk = needs[1].then(|| Tensor::zeros(k.shape()));
        let (yd, kd, gd) = (y.data(), k.data(), grad.data());
        for t in 0..t_steps {
            for j in 0..m {
                let g = gd[t * m + j];
                let yo = (t * m + j) * b;
                let ko = (t * p + j % p) * b;
                if let Some(gy) = gy.as_mut() {
                    for (o, c) in gy.data_mut()[yo..yo + b].iter_mut().zip(&kd[ko..ko + b]) {
                        *o = g * c;
                    }
                }
                if let Some(gk) = gk.as_mut() {
                    for (o, a) in gk.data_mut()[ko..ko + b].iter_mut().zip(&yd[yo..yo + b]) {
                        *o += g * a;
                    }
                }
            }
        }
        Ok(vec![gy, gk])
    }
}

pub fn branch_to_soma_var(g: &mut Graph, y: Var, k: Var) -> Result<Var> {
    let out = branch_to_soma(g.value(y), g.value(k))?;
    Ok(g.custom(&[y, k], out, Box::new(BranchSum)))
}

/// How the branch states are integrated over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePath {
    #[default]
    Parallel,
    Sequential,
}

/// Everything a DendSN layer needs besides its input and strengths.
pub struct DendriticUnit<'a> {
    pub params: NeuronParams,
    pub activation: ActivationKind,
    pub slopes: Option<Var>,
    pub decay: &'a DecayMatrix,
    pub surrogate: SurrogateSpec,
    pub path: UpdatePath,
}

impl DendriticUnit<'_> {
    /// Branch states followed by the nonlinearity: the signal `Ỹ` that the
    /// strength matrix weights.
    pub fn activated(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let v = match self.path {
            UpdatePath::Parallel => dend_update_parallel_var(g, x, self.decay)?,
            UpdatePath::Sequential => dend_update_seq_var(g, x, self.decay.alpha())?,
        };
        dend_activate_var(g, v, self.activation, self.slopes)
    }

    /// Full neuron: `[T, ..., B]` branch inputs to `[T, ...]` spikes.
    ///
    /// `strength` receives the activated signal and returns the `K` tensor
    /// to weight it with, so input-dependent strengths fit the same path.
    pub fn forward(&self, g: &mut Graph, x: Var, strength: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Var> {
        let y_tilde = self.activated(g, x)?;
        let k = strength(g, y_tilde)?;
        let y = branch_to_soma_var(g, y_tilde, k)?;
        Ok(soma_var(g, y, &self.params, &self.surrogate))
    }
}
