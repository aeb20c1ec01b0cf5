use serde::{Deserialize, Serialize};

use super::NeuronParams;
use crate::error::Result;
use crate::tensor::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SomaKind {
    /// `H[t] = beta * V[t-1] + (1 - beta) * Y[t]`
    Lif,
    /// `H[t] = V[t-1] + Y[t]`
    If,
}

/// What the spike function computes on the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeForward {
    /// Exact step function; the surrogate only shapes the backward pass.
    Heaviside,
    /// The surrogate's own sigmoid is used forward too, making the whole
    /// neuron smooth. Only meant for finite-difference gradient checks.
    Sigmoid,
}

/// Sigmoid-derivative surrogate: `d/du Θ(u) ≈ k·σ(ku)·(1 - σ(ku))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSpec {
    pub sharpness: f32,
    pub forward: SpikeForward,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            sharpness: 4.0,
            forward: SpikeForward::Heaviside,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl SurrogateSpec {
    pub fn smooth(sharpness: f32) -> Self {
        Self {
            sharpness,
            forward: SpikeForward::Sigmoid,
        }
    }

    /// Forward spike value for a threshold-relative potential `u`.
    /// `Θ(0) = 1`: a neuron exactly at threshold fires.
    pub fn fire(&self, u: f32) -> f32 {
        match self.forward {
            SpikeForward::Heaviside => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeForward::Sigmoid => sigmoid(self.sharpness * u),
        }
    }

    pub fn grad(&self, u: f32) -> f32 {
        let s = sigmoid(self.sharpness * u.abs());
        self.sharpness * s * (1.0 - s)
    }
}

struct Heaviside {
    spec: SurrogateSpec,
}

impl CustomOp for Heaviside {
    fn name(&self) -> &'static str {
        "surrogate_heaviside"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.zip_map(inputs[0], |g, u| g * self.spec.grad(u))?)])
    }
}

/// Step function with a surrogate derivative.
pub fn surrogate_heaviside(g: &mut Graph, u: Var, spec: SurrogateSpec) -> Var {
    let out = g.value(u).map(|x| spec.fire(x));
    g.custom(&[u], out, Box::new(Heaviside { spec }))
}

/// Runs the soma over a `[T, ...]` input. Returns `(spikes, V)` where `V` is
/// the post-reset membrane potential trace. `V[-1] = 0`.
pub fn soma_forward(y: &Tensor, p: &NeuronParams, surrogate: &SurrogateSpec) -> (Tensor, Tensor) {
    let (s, _h, v) = simulate(y, p, surrogate);
    (s, v)
}

fn simulate(y: &Tensor, p: &NeuronParams, surrogate: &SurrogateSpec) -> (Tensor, Tensor, Tensor) {
    let t_steps = y.shape().first().copied().unwrap_or(0);
    let m = y.len().checked_div(t_steps).unwrap_or(0);
    let mut spikes = Tensor::zeros(y.shape());
    let mut pre = Tensor::zeros(y.shape());
    let mut post = Tensor::zeros(y.shape());
    let mut v = vec![0.0f32; m];
    let (ys, ss, hs, vs) = (y.data(), spikes.data_mut(), pre.data_mut(), post.data_mut());
    for t in 0..t_steps {
        let base = t * m;
        for j in 0..m {
            let h = match p.soma {
                SomaKind::Lif => p.beta * v[j] + (1.0 - p.beta) * ys[base + j],
                SomaKind::If => v[j] + ys[base + j],
            };
            let s = surrogate.fire(h - p.v_th);
            v[j] = (1.0 - s) * h + s * p.v_reset;
            hs[base + j] = h;
            ss[base + j] = s;
            vs[base + j] = v[j];
        }
    }
    (spikes, pre, post)
}

struct Soma {
    params: NeuronParams,
    surrogate: SurrogateSpec,
    pre: Tensor,
}

impl CustomOp for Soma {
    fn name(&self) -> &'static str {
        "soma"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        spikes: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let p = &self.params;
        let t_steps = grad.shape()[0];
        let m = grad.len() / t_steps.max(1);
        let (leak, gain) = match p.soma {
            SomaKind::Lif => (p.beta, 1.0 - p.beta),
            SomaKind::If => (1.0, 1.0),
        };
        let mut gy = Tensor::zeros(grad.shape());
        // ∂L/∂V[t], carried from H[t+1] = leak·V[t] + ...
        let mut gv = vec![0.0f32; m];
        let (gs, hs, ss, out) = (grad.data(), self.pre.data(), spikes.data(), gy.data_mut());
        for t in (0..t_steps).rev() {
            let base = t * m;
            for j in 0..m {
                let (h, s) = (hs[base + j], ss[base + j]);
                // V = (1-S)·H + S·V_reset, with S = Θ(H - V_th)
                let g_s = gs[base + j] + gv[j] * (p.v_reset - h);
                let g_h = gv[j] * (1.0 - s) + g_s * self.surrogate.grad(h - p.v_th);
                out[base + j] = g_h * gain;
                gv[j] = g_h * leak;
            }
        }
        Ok(vec![Some(gy)])
    }
}

/// Differentiable soma. Output is the spike train, shape `[T, ...]`.
pub fn soma_var(g: &mut Graph, y: Var, p: &NeuronParams, surrogate: &SurrogateSpec) -> Var {
    let (spikes, pre, _) = simulate(g.value(y), p, surrogate);
    let op = Soma {
        params: *p,
        surrogate: *surrogate,
        pre,
    };
    g.custom(&[y], spikes, Box::new(op))
}
