//! Branch strength matrices `K` (`[T, B]` per neuron).
//!
//! The default is a fixed all-ones matrix. It can instead be a single
//! learnable matrix shared by the whole layer, or be derived from the
//! activated branch signal `Ỹ` on every forward pass by parameter-free
//! attention (PFA) or multi-dimensional attention (MDA).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Reduce, Tensor, Var};

pub const DEFAULT_PFA_LAMBDA: f32 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrengthMode {
    #[default]
    Ones,
    Learnable,
    Pfa {
        lambda: f32,
    },
    Mda,
}

impl StrengthMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StrengthMode::Pfa { lambda } if lambda.is_nan() || lambda <= 0.0 => Err(Error::config(
                "strength.lambda",
                format!("PFA regularizer must be positive, got {lambda}"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn k_ones(t_steps: usize, branches: usize) -> Tensor {
    Tensor::ones(&[t_steps, branches])
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-neuron statistics over a `[T, M, B]` signal: for neuron `m`, the
/// `T·B` values `y[t, m, i]`.
fn neuron_view(y: &Tensor) -> Result<(usize, usize, usize)> {
    let s = y.shape();
    if s.len() < 2 {
        return Err(Error::dim("pfa", format!("signal shape {s:?}")));
    }
    let (t_steps, b) = (s[0], s[s.len() - 1]);
    if t_steps * b < 2 {
        return Err(Error::contract("PFA needs at least two entries per neuron (T*B >= 2)"));
    }
    Ok((t_steps, y.len() / (t_steps * b), b))
}

struct PfaStats {
    mean: Vec<f32>,
    var: Vec<f32>,
}

fn pfa_stats(y: &Tensor, t_steps: usize, m: usize, b: usize) -> PfaStats {
    let d = y.data();
    let n = (t_steps * b) as f32;
    let mut mean = vec![0.0f32; m];
    let mut var = vec![0.0f32; m];
    for t in 0..t_steps {
        for j in 0..m {
            mean[j] += d[(t * m + j) * b..(t * m + j + 1) * b].iter().sum::<f32>();
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);
    for t in 0..t_steps {
        for j in 0..m {
            var[j] += d[(t * m + j) * b..(t * m + j + 1) * b]
                .iter()
                .map(|v| (v - mean[j]).powi(2))
                .sum::<f32>();
        }
    }
    var.iter_mut().for_each(|x| *x /= n - 1.0);
    PfaStats { mean, var }
}

/// Parameter-free attention over a `[T, M, B]` (or `[T, B]`) signal.
///
/// For each neuron, with mean `μ` and `(T·B - 1)`-denominator variance `v`
/// of its own `T·B` entries:
/// `K = σ(((Ỹ - μ)² + 2v + 2λ) / (4(v + λ)))`.
pub fn pfa(y: &Tensor, lambda: f32) -> Result<Tensor> {
    let (t_steps, m, b) = neuron_view(y)?;
    let st = pfa_stats(y, t_steps, m, b);
    let mut out = y.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let j = (idx / b) % m;
        let dev = *v - st.mean[j];
        let arg = (dev * dev + 2.0 * st.var[j] + 2.0 * lambda) / (4.0 * (st.var[j] + lambda));
        *v = sigmoid(arg);
    }
    Ok(out)
}

struct Pfa {
    lambda: f32,
}

impl CustomOp for Pfa {
    fn name(&self) -> &'static str {
        "pfa"
    }

    fn backward(&self, inputs: &[&Tensor], k: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        // With d = y - μ and D = v + λ the sigmoid argument simplifies to
        // u = 1/2 + d²/(4D). Using Σd = 0 and ∂v/∂y_j = 2 d_j / M:
        //   ∂L/∂y_j = (a_j d_j - mean(a·d)) / (2D) - d_j Σ(a d²) / (2 M D²)
        // where a = ∂L/∂K · σ'(u).
        let y = inputs[0];
        let (t_steps, m, b) = neuron_view(y)?;
        let st = pfa_stats(y, t_steps, m, b);
        let n = (t_steps * b) as f32;
        let big_m = n - 1.0;
        let yd = y.data();
        let kd = k.data();
        let gd = grad.data();
        let mut sum_ad = vec![0.0f32; m];
        let mut sum_add = vec![0.0f32; m];
        for idx in 0..y.len() {
            let j = (idx / b) % m;
            let a = gd[idx] * kd[idx] * (1.0 - kd[idx]);
            let d = yd[idx] - st.mean[j];
            sum_ad[j] += a * d;
            sum_add[j] += a * d * d;
        }
        let mut gy = Tensor::zeros(y.shape());
        for (idx, o) in gy.data_mut().iter_mut().enumerate() {
            let j = (idx / b) % m;
            let a = gd[idx] * kd[idx] * (1.0 - kd[idx]);
            let d = yd[idx] - st.mean[j];
            let big_d = st.var[j] + self.lambda;
            *o = (a * d - sum_ad[j] / n) / (2.0 * big_d) - d * sum_add[j] / (2.0 * big_m * big_d * big_d);
        }
        Ok(vec![Some(gy)])
    }
}

pub fn pfa_var(g: &mut Graph, y: Var, lambda: f32) -> Result<Var> {
    let out = pfa(g.value(y), lambda)?;
    Ok(g.custom(&[y], out, Box::new(Pfa { lambda })))
}

/// Two-layer perceptron `W2·relu(W1·x + b1) + b2` acting on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    /// Weights uniform in `±1/sqrt(width)`, biases zero.
    pub fn new(width: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (width as f32).sqrt();
        let mut w = || Tensor::from_fn(&[width, width], |_| rng.random_range(-bound..=bound));
        Self {
            w1: w(),
            b1: Tensor::zeros(&[width]),
            w2: w(),
            b2: Tensor::zeros(&[width]),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[width, width]),
            b1: Tensor::zeros(&[width]),
            w2: Tensor::zeros(&[width, width]),
            b2: Tensor::zeros(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.b1.len()
    }
}

/// Graph handles of an [`Mlp`]'s four tensors.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_bias(h, self.b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, self.w2)?;
        g.add_bias(o, self.b2)
    }

    fn width(&self, g: &Graph) -> usize {
        g.shape(self.b1)[0]
    }
}

/// Gate `σ(MLP(avg) + MLP(max))` for `[R, L]` rows pooled over `L`; the
/// pooled values are regrouped into `[R / W, W]` vectors for the MLP.
fn pooled_gate(g: &mut Graph, rows: Var, mlp: &MlpVars) -> Result<Var> {
    let r = g.shape(rows)[0];
    let w = mlp.width(g);
    let avg = g.reduce_last(rows, Reduce::Mean)?;
    let max = g.reduce_last(rows, Reduce::Max)?;
    let avg = g.reshape(avg, &[r / w, w])?;
    let max = g.reshape(max, &[r / w, w])?;
    let a = mlp.apply(g, avg)?;
    let m = mlp.apply(g, max)?;
    let s = g.add(a, m)?;
    Ok(g.sigmoid(s))
}

/// Multi-dimensional attention on a `[T, M, B]` signal; returns `K` of the
/// same shape.
///
/// A temporal gate `g_t` (from the branch-pooled signal) scales `Ỹ`; a
/// branch gate `g_b` is then computed from the time-pooled result, and
/// `K[t, m, i] = g_t[t, m] · g_b[m, i]`.
pub fn mda_var(g: &mut Graph, y: Var, mlp_t: &MlpVars, mlp_b: &MlpVars) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("mda", format!("expected [T, M, B], got {shape:?}")));
    }
    let (t_steps, m, b) = (shape[0], shape[1], shape[2]);
    if mlp_t.width(g) != t_steps || mlp_b.width(g) != b {
        return Err(Error::contract(format!(
            "MDA widths ({}, {}) do not match T={t_steps}, B={b}",
            mlp_t.width(g),
            mlp_b.width(g)
        )));
    }
    // Temporal gate: rows are (m, t) with the branch axis last.
    let ym = g.permute(y, &[1, 0, 2])?; // [M, T, B]
    let ym_rows = g.reshape(ym, &[m * t_steps, b])?;
    let gate_t = pooled_gate(g, ym_rows, mlp_t)?; // [M, T]
    let ta = g.mul_expand_last(ym, gate_t)?; // [M, T, B]
                                             // Branch gate: rows are (m, i) with the time axis last.
    let tb = g.permute(ta, &[0, 2, 1])?; // [M, B, T]
    let tb_rows = g.reshape(tb, &[m * b, t_steps])?;
    let gate_b = pooled_gate(g, tb_rows, mlp_b)?; // [M, B]
                                                  // K[t, m, i] = gate_t[m, t] * gate_b[m, i]
    let gb_rep = g.repeat_leading(gate_b, t_steps)?; // [T, M, B]
    let gt = g.permute(gate_t, &[1, 0])?; // [T, M]
    g.mul_expand_last(gb_rep, gt)
}

/// Tensor-level MDA for a single neuron's `[T, B]` signal.
pub fn mda(y: &Tensor, mlp_t: &Mlp, mlp_b: &Mlp) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 2 {
        return Err(Error::dim("mda", format!("expected [T, B], got {s:?}")));
    }
    let mut g = Graph::new();
    let yv = g.constant(y.clone().reshape(&[s[0], 1, s[1]])?);
    let bind = |g: &mut Graph, p: &Mlp| MlpVars {
        w1: g.constant(p.w1.clone()),
        b1: g.constant(p.b1.clone()),
        w2: g.constant(p.w2.clone()),
        b2: g.constant(p.b2.clone()),
    };
    let (vt, vb) = (bind(&mut g, mlp_t), bind(&mut g, mlp_b));
    let k = mda_var(&mut g, yv, &vt, &vb)?;
    g.value(k).clone().reshape(s)
}
