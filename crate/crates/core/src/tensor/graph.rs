use super::gemm::{gemm, Transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the forward inputs and output along with the
/// gradient flowing into the output, and returns one gradient per input.
/// Entries whose `needs` flag is false may be `None`.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Exp(Var),
    Sigmoid(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    ReduceLast { x: Var, argmax: Option<Vec<u32>> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumLeading(Var),
    RepeatLeading(Var),
    AddBias(Var, Var),
    MulBcastLast(Var, Var),
    MulExpandLast(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ReduceLast { .. } => "reduce_last",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::SumLeading(_) => "sum_leading",
            Op::RepeatLeading(_) => "repeat_leading",
            Op::AddBias(..) => "add_bias",
            Op::MulBcastLast(..) => "mul_bcast_last",
            Op::MulExpandLast(..) => "mul_expand_last",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation as it is evaluated and replays it backwards.
///
/// Nodes are appended in evaluation order, so parents always have smaller
/// indices than their children and the reverse sweep is a plain reverse
/// iteration.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(idx)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Fails with the first node whose value contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Transpose::No,
            self.value(b).data(),
            Transpose::No,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else if tb.len() == 1 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else if ta.len() == 1 {
            let s = ta.data()[0];
            tb.map(|x| f(s, x))
        } else {
            return Err(Error::dim(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f32);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Reduces the last axis with a mean or a max (first maximum wins).
    pub fn reduce_last(&mut self, a: Var, how: Reduce) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(Error::dim("reduce_last", "scalar input"));
        };
        if n == 0 {
            return Err(Error::dim("reduce_last", "empty last axis"));
        }
        let rows = t.len() / n;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::new();
        for row in t.data().chunks_exact(n) {
            match how {
                Reduce::Mean => out.push(row.iter().sum::<f32>() / n as f32),
                Reduce::Max => {
                    let (mut bi, mut bv) = (0, row[0]);
                    for (i, &v) in row.iter().enumerate().skip(1) {
                        if v > bv {
                            bi = i;
                            bv = v;
                        }
                    }
                    out.push(bv);
                    argmax.push(bi as u32);
                }
            }
        }
        let out = Tensor::new(lead, out)?;
        let rg = self.rg(&[a]);
        let argmax = (how == Reduce::Max).then_some(argmax);
        Ok(self.push(out, Op::ReduceLast { x: a, argmax }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Sums over axis 0: `[T, ...] -> [...]`.
    pub fn sum_leading(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some((&lead, rest)) = t.shape().split_first() else {
            return Err(Error::dim("sum_leading", "scalar input"));
        };
        let inner: usize = rest.iter().product();
        let mut out = vec![0.0; inner];
        for s in 0..lead {
            for (o, x) in out.iter_mut().zip(&t.data()[s * inner..(s + 1) * inner]) {
                *o += x;
            }
        }
        let out = Tensor::new(rest, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumLeading(a), rg))
    }

    /// Stacks `times` copies along a new axis 0: `[...] -> [times, ...]`.
    pub fn repeat_leading(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(t.len() * times);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RepeatLeading(a), rg))
    }

    /// `x[..., j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.last_axis_bcast("add_bias", x, b, |a, c| a + c)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x[..., j] * v[j]`.
    pub fn mul_bcast_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.last_axis_bcast("mul_bcast_last", x, v, |a, c| a * c)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::MulBcastLast(x, v), rg))
    }

    fn last_axis_bcast(&self, name: &'static str, x: Var, v: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        let n = *tx.shape().last().unwrap_or(&0);
        if tv.shape() != [n] {
            return Err(Error::dim(name, format!("{:?} against {:?}", tx.shape(), tv.shape())));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, &c) in row.iter_mut().zip(tv.data()) {
                *o = f(*o, c);
            }
        }
        Ok(out)
    }

    /// `x[..., i] * s[...]`: scales each last-axis fibre of `x` by one entry
    /// of `s`, whose shape is `x`'s shape without the last axis.
    pub fn mul_expand_last(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let n = *tx.shape().last().unwrap_or(&0);
        if tx.shape().split_last().map(|(_, l)| l) != Some(ts.shape()) {
            return Err(Error::dim(
                "mul_expand_last",
                format!("{:?} against {:?}", tx.shape(), ts.shape()),
            ));
        }
        let mut out = tx.clone();
        for (row, &c) in out.data_mut().chunks_exact_mut(n.max(1)).zip(ts.data()) {
            for o in row {
                *o *= c;
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulExpandLast(x, s), rg))
    }

    /// Accumulates `∂root/∂v` into every reachable node that requires grad.
    ///
    /// Grads add onto whatever a previous call left behind; call
    /// [`Graph::zero_grad`] between independent passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check_finite()?;
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Transpose::No,
                        tb.data(),
                        Transpose::Yes,
                        0.0,
                        &mut ga,
                    );
                    out.push((a, Tensor::new(&[m, k], ga)?));
                }
                if need(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        Transpose::Yes,
                        g.data(),
                        Transpose::No,
                        0.0,
                        &mut gb,
                    );
                    out.push((b, Tensor::new(&[k, n], gb)?));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, reduce_to(g, val(a))));
                out.push((b, reduce_to(g, val(b))));
            }
            &Op::Sub(a, b) => {
                out.push((a, reduce_to(g, val(a))));
                out.push((b, reduce_to(&g.map(|x| -x), val(b))));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if need(a) {
                    out.push((a, reduce_to(&bcast_mul(g, tb), ta)));
                }
                if need(b) {
                    out.push((b, reduce_to(&bcast_mul(g, ta), tb)));
                }
            }
            &Op::Scale(a, c) => out.push((a, g.map(|x| x * c))),
            &Op::Exp(a) => out.push((a, g.zip_map(&node.value, |gx, y| gx * y)?)),
            &Op::Sigmoid(a) => out.push((a, g.zip_map(&node.value, |gx, y| gx * y * (1.0 - y))?)),
            &Op::Square(a) => out.push((a, g.zip_map(val(a), |gx, x| 2.0 * x * gx)?)),
            &Op::Relu(a) => out.push((a, g.zip_map(val(a), |gx, x| if x > 0.0 { gx } else { 0.0 })?)),
            &Op::Sum(a) => out.push((a, Tensor::full(val(a).shape(), g.item()))),
            &Op::Mean(a) => {
                let n = val(a).len() as f32;
                out.push((a, Tensor::full(val(a).shape(), g.item() / n)));
            }
            Op::ReduceLast { x, argmax } => {
                let tx = val(*x);
                let n = *tx.shape().last().unwrap();
                let mut gx = Tensor::zeros(tx.shape());
                for (r, (row, &gr)) in gx.data_mut().chunks_exact_mut(n).zip(g.data()).enumerate() {
                    match argmax {
                        Some(am) => row[am[r] as usize] = gr,
                        None => row.iter_mut().for_each(|v| *v = gr / n as f32),
                    }
                }
                out.push((*x, gx));
            }
            &Op::Reshape(a) => out.push((a, g.clone().reshape(val(a).shape())?)),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                out.push((*a, g.permute(&inv)?));
            }
            &Op::SumLeading(a) => {
                let shape = val(a).shape();
                let mut data = Vec::with_capacity(val(a).len());
                for _ in 0..shape[0] {
                    data.extend_from_slice(g.data());
                }
                out.push((a, Tensor::new(shape, data)?));
            }
            &Op::RepeatLeading(a) => {
                let ta = val(a);
                let inner = ta.len();
                let mut acc = vec![0.0; inner];
                for chunk in g.data().chunks_exact(inner.max(1)) {
                    for (o, x) in acc.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                out.push((a, Tensor::new(ta.shape(), acc)?));
            }
            &Op::AddBias(x, b) => {
                out.push((x, g.clone()));
                if need(b) {
                    let n = val(b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks_exact(n.max(1)) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((b, Tensor::new(&[n], gb)?));
                }
            }
            &Op::MulBcastLast(x, v) => {
                let (tx, tv) = (val(x), val(v));
                let n = tv.len();
                if need(x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_exact_mut(n.max(1)) {
                        for (o, &c) in row.iter_mut().zip(tv.data()) {
                            *o *= c;
                        }
                    }
                    out.push((x, gx));
                }
                if need(v) {
                    let mut gv = vec![0.0; n];
                    for (grow, xrow) in g.data().chunks_exact(n.max(1)).zip(tx.data().chunks_exact(n.max(1))) {
                        for ((o, a), b) in gv.iter_mut().zip(grow).zip(xrow) {
                            *o += a * b;
                        }
                    }
                    out.push((v, Tensor::new(&[n], gv)?));
                }
            }
            &Op::MulExpandLast(x, s) => {
                let (tx, ts) = (val(x), val(s));
                let n = *tx.shape().last().unwrap();
                if need(x) {
                    let mut gx = g.clone();
                    for (row, &c) in gx.data_mut().chunks_exact_mut(n.max(1)).zip(ts.data()) {
                        row.iter_mut().for_each(|o| *o *= c);
                    }
                    out.push((x, gx));
                }
                if need(s) {
                    let gs: Vec<f32> = g
                        .data()
                        .chunks_exact(n.max(1))
                        .zip(tx.data().chunks_exact(n.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((s, Tensor::new(ts.shape(), gs)?));
                }
            }
            Op::Custom(inputs, op) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let grads = op.backward(&tensors, &node.value, g, &needs)?;
                for ((&v, gv), &nd) in inputs.iter().zip(grads).zip(&needs) {
                    if let (Some(gv), true) = (gv, nd) {
                        if gv.shape() != val(v).shape() {
                            return Err(Error::dim(
                                op.name(),
                                format!("backward produced {:?} for input {:?}", gv.shape(), val(v).shape()),
                            ));
                        }
                        out.push((v, gv));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Elementwise product where `other` is either the same shape as `g` or a
/// one-element tensor.
fn bcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        g.zip_map(other, |a, b| a * b).expect("shapes checked")
    } else {
        let c = other.data()[0];
        g.map(|a| a * c)
    }
}

/// Sums `g` down to `target`'s shape when `target` was scalar-broadcast.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}
