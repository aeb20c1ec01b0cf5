use crate::error::{Error, Result};
use crate::tensor::{gemm, CustomOp, Graph, Tensor, Transpose, Var};

/// Lower-triangular `[T, T]` matrix with `A[i][j] = alpha^(i-j)` for `i >= j`.
///
/// Multiplying it into a `[T, R]` block of branch inputs yields every
/// leaky-integrated branch state at once, so the time loop becomes a
/// single matrix product. Build once per `(T, alpha)` and reuse.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMatrix {
    t_steps: usize,
    alpha: f32,
    a: Tensor,
}

impl DecayMatrix {
    pub fn new(t_steps: usize, alpha: f32) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::contract("decay matrix needs at least one time step"));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::contract(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        let mut a = Tensor::zeros(&[t_steps, t_steps]);
        let data = a.data_mut();
        for i in 0..t_steps {
            data[i * t_steps + i] = 1.0;
            for j in (0..i).rev() {
                // Built by repeated multiplication so each sub-diagonal entry
                // is exactly alpha times the one above it.
                data[i * t_steps + j] = alpha * data[(i - 1) * t_steps + j];
            }
        }
        Ok(Self { t_steps, alpha, a })
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }
}

fn time_split(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape().first() {
        Some(&t) if t > 0 => Ok((t, x.len() / t)),
        _ => Err(Error::contract(format!("{op}: empty time dimension"))),
    }
}

/// `V[0] = X[0]`, `V[t] = alpha * V[t-1] + X[t]`, independently for every
/// trailing index of a `[T, ...]` tensor.
pub fn dend_update_seq(x: &Tensor, alpha: f32) -> Result<Tensor> {
    let (t_steps, rest) = time_split(x, "dend_update_seq")?;
    let mut v = x.clone();
    let data = v.data_mut();
    for t in 1..t_steps {
        let (prev, cur) = data.split_at_mut(t * rest);
        let prev = &prev[(t - 1) * rest..];
        for (c, p) in cur[..rest].iter_mut().zip(prev) {
            *c += alpha * p;
        }
    }
    Ok(v)
}

/// Below this many columns per step the product goes through GEMM; wider
/// blocks use row updates that skip the zero upper triangle.
const WIDE: usize = 256;

/// `A · X`, or `Aᵀ · X` when `transpose` is set, for a `[T, R]` block.
fn apply_decay(dm: &DecayMatrix, x: &[f32], rest: usize, transpose: bool) -> Vec<f32> {
    let t_steps = dm.t_steps;
    let a = dm.a.data();
    if rest < WIDE {
        let mut out = vec![0.0; t_steps * rest];
        let ta = if transpose { Transpose::Yes } else { Transpose::No };
        gemm(t_steps, t_steps, rest, a, ta, x, Transpose::No, 0.0, &mut out);
        return out;
    }
    let coef = |i: usize, j: usize| {
        if transpose {
            a[j * t_steps + i]
        } else {
            a[i * t_steps + j]
        }
    };
    let mut out = Vec::with_capacity(t_steps * rest);
    for i in 0..t_steps {
        let (first, others) = if transpose { (i, i + 1..t_steps) } else { (0, 1..i + 1) };
        let start = out.len();
        let c = coef(i, first);
        out.extend(x[first * rest..(first + 1) * rest].iter().map(|v| c * v));
        let row = &mut out[start..];
        for j in others {
            let c = coef(i, j);
            for (o, v) in row.iter_mut().zip(&x[j * rest..(j + 1) * rest]) {
                *o += c * v;
            }
        }
    }
    out
}

fn check_steps(dm: &DecayMatrix, t_steps: usize) -> Result<()> {
    if t_steps != dm.t_steps {
        return Err(Error::contract(format!(
            "decay matrix built for T={}, input has T={t_steps}",
            dm.t_steps
        )));
    }
    Ok(())
}

/// Same result as [`dend_update_seq`], computed as `A · X` over the time axis.
pub fn dend_update_parallel(x: &Tensor, dm: &DecayMatrix) -> Result<Tensor> {
    let (t_steps, rest) = time_split(x, "dend_update_parallel")?;
    check_steps(dm, t_steps)?;
    Tensor::new(x.shape(), apply_decay(dm, x.data(), rest, false))
}

struct DecayApply {
    dm: DecayMatrix,
}

impl CustomOp for DecayApply {
    fn name(&self) -> &'static str {
        "dend_update_parallel"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (_, rest) = time_split(grad, "dend_update_parallel")?;
        let gx = apply_decay(&self.dm, grad.data(), rest, true);
        Ok(vec![Some(Tensor::new(grad.shape(), gx)?)])
    }
}

struct LeakyScan {
    alpha: f32,
}

impl CustomOp for LeakyScan {
    fn name(&self) -> &'static str {
        "dend_update_seq"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        // Adjoint of the forward scan is the same scan run backwards in time.
        let (t_steps, rest) = time_split(grad, "dend_update_seq")?;
        let mut gx = grad.clone();
        let data = gx.data_mut();
        for t in (0..t_steps.saturating_sub(1)).rev() {
            let (cur, next) = data.split_at_mut((t + 1) * rest);
            for (c, n) in cur[t * rest..].iter_mut().zip(&next[..rest]) {
                *c += self.alpha * n;
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Differentiable sequential branch update.
pub fn dend_update_seq_var(g: &mut Graph, x: Var, alpha: f32) -> Result<Var> {
    let out = dend_update_seq(g.value(x), alpha)?;
    Ok(g.custom(&[x], out, Box::new(LeakyScan { alpha })))
}

/// Differentiable parallel branch update: `A · X`, with `Aᵀ · G` as the
/// input gradient.
pub fn dend_update_parallel_var(g: &mut Graph, x: Var, dm: &DecayMatrix) -> Result<Var> {
    let out = dend_update_parallel(g.value(x), dm)?;
    Ok(g.custom(&[x], out, Box::new(DecayApply { dm: dm.clone() })))
}
