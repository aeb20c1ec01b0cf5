use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Branch nonlinearity applied to the dendritic state before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    MexicanHat,
    LeakyRelu,
    /// `x * sigmoid(gamma_i * x)` with a learnable slope per branch.
    Swish,
    /// Swish with the slope frozen at its random initial value.
    USwish,
}

const MH_VAR: f32 = 0.75;

fn mh_norm() -> f32 {
    MH_VAR * MH_VAR * (2.0 * std::f32::consts::PI * MH_VAR).sqrt()
}

pub fn mexican_hat(x: f32) -> f32 {
    (MH_VAR - x * x) / mh_norm() * (-x * x / (2.0 * MH_VAR)).exp()
}

fn mexican_hat_grad(x: f32) -> f32 {
    let e = (-x * x / (2.0 * MH_VAR)).exp();
    e / mh_norm() * x * (x * x / MH_VAR - 3.0)
}

pub fn leaky_relu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        0.01 * x
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f32, gamma: f32) -> f32 {
    x * sigmoid(gamma * x)
}

impl ActivationKind {
    pub fn has_slope(self) -> bool {
        matches!(self, Self::Swish | Self::USwish)
    }

    pub fn slope_is_learnable(self) -> bool {
        self == Self::Swish
    }

    /// Draws per-branch slopes with `ln(gamma) ~ N(0, 1)`.
    pub fn sample_slopes(branches: usize, rng: &mut impl Rng) -> Tensor {
        let dist = LogNormal::new(0.0f32, 1.0).expect("valid log-normal");
        Tensor::from_fn(&[branches], |_| dist.sample(rng))
    }
}

fn check_slopes(x: &Tensor, kind: ActivationKind, gamma: Option<&Tensor>) -> Result<usize> {
    let b = *x.shape().last().unwrap_or(&0);
    match (kind.has_slope(), gamma) {
        (true, Some(gm)) if gm.shape() == [b] => Ok(b),
        (true, Some(gm)) => Err(Error::dim(
            "dend_activate",
            format!("slope vector {:?} for {b} branches", gm.shape()),
        )),
        (true, None) => Err(Error::contract("swish activation needs per-branch slopes")),
        (false, _) => Ok(b),
    }
}

/// Applies the branch nonlinearity elementwise over a `[T, ..., B]` tensor.
pub fn dend_activate(x: &Tensor, kind: ActivationKind, gamma: Option<&Tensor>) -> Result<Tensor> {
    let b = check_slopes(x, kind, gamma)?;
    Ok(match kind {
        ActivationKind::MexicanHat => x.map(mexican_hat),
        ActivationKind::LeakyRelu => x.map(leaky_relu),
        ActivationKind::Swish | ActivationKind::USwish => {
            let gm = gamma.expect("checked").data();
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(b.max(1)) {
                for (v, &s) in row.iter_mut().zip(gm) {
                    *v = swish(*v, s);
                }
            }
            out
        }
    })
}

struct Activate {
    kind: ActivationKind,
}

impl CustomOp for Activate {
    fn name(&self) -> &'static str {
        "dend_activate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        match self.kind {
            ActivationKind::MexicanHat => Ok(vec![Some(grad.zip_map(x, |g, v| g * mexican_hat_grad(v))?)]),
            ActivationKind::LeakyRelu => Ok(vec![Some(grad.zip_map(x, |g, v| if v >= 0.0 { g } else { 0.01 * g })?)]),
            ActivationKind::Swish | ActivationKind::USwish => {
                let gm = inputs[1].data();
                let b = gm.len();
                let mut gx = grad.clone();
                let mut gg = vec![0.0; b];
                for ((grow, xrow), gxrow) in grad
                    .data()
                    .chunks_exact(b)
                    .zip(x.data().chunks_exact(b))
                    .zip(gx.data_mut().chunks_exact_mut(b))
                {
                    for i in 0..b {
                        let (v, s) = (xrow[i], gm[i]);
                        let sg = sigmoid(s * v);
                        let ds = sg * (1.0 - sg);
                        gxrow[i] = grow[i] * (sg + s * v * ds);
                        gg[i] += grow[i] * v * v * ds;
                    }
                }
                let gg = needs[1].then(|| Tensor::new(&[b], gg)).transpose()?;
                Ok(vec![Some(gx), gg])
            }
        }
    }
}

/// Differentiable [`dend_activate`]. `gamma` must be given for the Swish
/// variants; gradients reach it when it requires grad.
pub fn dend_activate_var(g: &mut Graph, x: Var, kind: ActivationKind, gamma: Option<Var>) -> Result<Var> {
    let out = dend_activate(g.value(x), kind, gamma.map(|v| g.value(v)))?;
    let inputs: Vec<Var> = std::iter::once(x).chain(gamma.filter(|_| kind.has_slope())).collect();
    Ok(g.custom(&inputs, out, Box::new(Activate { kind })))
}
