//! Analytic gradients against central finite differences. Each check
//! panics on the first mismatch.
//!
//! Differences are taken on straightforward `f64` reimplementations of each
//! op (and of the whole network), so rounding in the `f32` forward pass does
//! not swamp the step size. Every case also checks that the `f32` forward
//! agrees with its reference.

use std::collections::BTreeMap;

use dendsnn::layers::{fc_name, Network, NetworkSpec, NeuronKind, NeuronLayerSpec};
use dendsnn::neuron::{
    branch_to_soma_var, dend_activate_var, dend_update_parallel_var, dend_update_seq_var, soma_var,
    surrogate_heaviside, ActivationKind, DecayMatrix, NeuronParams, SomaKind, SurrogateSpec,
};
use dendsnn::strength::{mda_var, pfa_var, MlpVars, StrengthMode};
use dendsnn::tensor::{Graph, Reduce, Tensor, Var};
use dendsnn::training::softmax_xent_var;
use dendsnn::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;
const DRAWS: u64 = 10;

type GraphFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    name: String,
    inputs: Vec<Tensor>,
    /// Inputs that stay constant in the graph and are not perturbed.
    fixed: Vec<bool>,
    graph: GraphFn,
    reference: RefFn,
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn compare(name: &str, what: &str, analytic: f64, numeric: f64) {
    let err = (analytic - numeric).abs();
    let ok = if analytic.abs() < ABS_FLOOR {
        err <= ABS_FLOOR
    } else {
        err / analytic.abs() <= REL_TOL
    };
    assert!(ok, "{name} {what}: analytic {analytic:e} vs numeric {numeric:e}");
}

fn run(case: Case, rng: &mut ChaCha8Rng) {
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.fixed)
        .map(|(t, &fixed)| {
            if fixed {
                g.constant(t.clone())
            } else {
                g.param(t.clone())
            }
        })
        .collect();
    let out = (case.graph)(&mut g, &vars).unwrap();
    let out_val = g.value(out).clone();
    let weights: Vec<f64> = (0..out_val.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(out_val.shape(), weights.iter().map(|&v| v as f32).collect()).unwrap();
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = case.inputs.iter().map(to64).collect();
    let reference = (case.reference)(&base);
    assert_eq!(reference.len(), out_val.len(), "{}: reference output size", case.name);
    for (i, (&r, &v)) in reference.iter().zip(out_val.data()).enumerate() {
        assert!(
            (r - v as f64).abs() <= 1e-4 * (1.0 + r.abs()),
            "{}: forward[{i}] {v} vs reference {r}",
            case.name
        );
    }
    let objective = |xs: &[Vec<f64>]| -> f64 { (case.reference)(xs).iter().zip(&weights).map(|(a, b)| a * b).sum() };
    for (k, var) in vars.iter().enumerate() {
        if case.fixed[k] {
            continue;
        }
        let grad = g
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[k].shape()));
        for e in 0..base[k].len() {
            let mut xs = base.clone();
            xs[k][e] = base[k][e] + H;
            let up = objective(&xs);
            xs[k][e] = base[k][e] - H;
            let down = objective(&xs);
            let numeric = (up - down) / (2.0 * H);
            compare(&case.name, &format!("input {k}[{e}]"), grad.data()[e] as f64, numeric);
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `0.1` away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1f32..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Rows whose entries are distinct by at least `0.05`, for max-pooling.
fn spaced_rows(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let mut row: Vec<f32> = (0..n).map(|i| i as f32 * 0.3 - 0.5).collect();
        row.shuffle(rng);
        data.extend(row.into_iter().map(|v| v + rng.random_range(-0.1..0.1)));
    }
    Tensor::new(&[rows, n], data).unwrap()
}

fn map1(f: impl Fn(f64) -> f64 + 'static) -> RefFn {
    Box::new(move |x| x[0].iter().map(|&v| f(v)).collect())
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
        }
    }
    out
}

fn scan(x: &[f64], t_steps: usize, alpha: f64) -> Vec<f64> {
    let rest = x.len() / t_steps;
    let mut v = x.to_vec();
    for t in 1..t_steps {
        for r in 0..rest {
            v[t * rest + r] += alpha * v[(t - 1) * rest + r];
        }
    }
    v
}

fn mh(x: f64) -> f64 {
    let s = 0.75f64;
    (s - x * x) / (s * s * (2.0 * std::f64::consts::PI * s).sqrt()) * (-x * x / (2.0 * s)).exp()
}

fn lrelu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.01 * x
    }
}

fn activate(kind: ActivationKind, x: &[f64], gamma: Option<&[f64]>, b: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| match kind {
            ActivationKind::MexicanHat => mh(v),
            ActivationKind::LeakyRelu => lrelu(v),
            ActivationKind::Swish | ActivationKind::USwish => v * sig(gamma.unwrap()[i % b] * v),
        })
        .collect()
}

/// Smooth soma over `[T, M]`.
fn soma(y: &[f64], t_steps: usize, p: &NeuronParams, k: f64) -> Vec<f64> {
    let m = y.len() / t_steps;
    let mut v = vec![0.0; m];
    let mut out = vec![0.0; y.len()];
    for t in 0..t_steps {
        for j in 0..m {
            let yy = y[t * m + j];
            let h = match p.soma {
                SomaKind::Lif => p.beta as f64 * v[j] + (1.0 - p.beta as f64) * yy,
                SomaKind::If => v[j] + yy,
            };
            let s = sig(k * (h - p.v_th as f64));
            v[j] = (1.0 - s) * h + s * p.v_reset as f64;
            out[t * m + j] = s;
        }
    }
    out
}

/// PFA over `[T, M, B]`.
fn pfa64(y: &[f64], t_steps: usize, b: usize, lambda: f64) -> Vec<f64> {
    let m = y.len() / (t_steps * b);
    let n = (t_steps * b) as f64;
    let at = |t: usize, j: usize, i: usize| y[(t * m + j) * b + i];
    let mut out = vec![0.0; y.len()];
    for j in 0..m {
        let vals: Vec<f64> = (0..t_steps)
            .flat_map(|t| (0..b).map(move |i| (t, i)))
            .map(|(t, i)| at(t, j, i))
            .collect();
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
        for t in 0..t_steps {
            for i in 0..b {
                let d = at(t, j, i) - mu;
                out[(t * m + j) * b + i] = sig((d * d + 2.0 * var + 2.0 * lambda) / (4.0 * (var + lambda)));
            }
        }
    }
    out
}

/// Returns the output and the smallest distance of a relu input from zero.
fn mlp64(x: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> (Vec<f64>, f64) {
    let w = b1.len();
    let pre: Vec<f64> = (0..w)
        .map(|j| (0..w).map(|l| x[l] * w1[l * w + j]).sum::<f64>() + b1[j])
        .collect();
    let margin = pre.iter().map(|v| v.abs()).fold(f64::MAX, f64::min);
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let out = (0..w)
        .map(|j| (0..w).map(|l| h[l] * w2[l * w + j]).sum::<f64>() + b2[j])
        .collect();
    (out, margin)
}

/// Gap between the two largest entries.
fn max_gap(row: &[f64]) -> f64 {
    let mut v = row.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    if v.len() > 1 {
        v[0] - v[1]
    } else {
        f64::MAX
    }
}

/// Returns the gates and the distance of the inputs from any kink.
fn pooled_gate64(rows: &[Vec<f64>], mlp: &[&[f64]]) -> (Vec<f64>, f64) {
    let w = mlp[1].len();
    let avg: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let max: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().cloned().fold(f64::MIN, f64::max))
        .collect();
    let mut margin = rows.iter().map(|r| max_gap(r)).fold(f64::MAX, f64::min);
    let mut out = Vec::new();
    for (a, m) in avg.chunks(w).zip(max.chunks(w)) {
        let (ga, ma) = mlp64(a, mlp[0], mlp[1], mlp[2], mlp[3]);
        let (gm, mm) = mlp64(m, mlp[0], mlp[1], mlp[2], mlp[3]);
        margin = margin.min(ma).min(mm);
        out.extend(ga.iter().zip(&gm).map(|(x, y)| sig(x + y)));
    }
    (out, margin)
}

/// MDA over `[T, M, B]`; `x[1..5]` and `x[5..9]` hold the two MLPs. Also
/// returns the distance of the inputs from the nearest kink.
fn mda64(x: &[Vec<f64>], t_steps: usize, m: usize, b: usize) -> (Vec<f64>, f64) {
    let y = &x[0];
    let at = |t: usize, j: usize, i: usize| y[(t * m + j) * b + i];
    let mt: Vec<&[f64]> = x[1..5].iter().map(|v| v.as_slice()).collect();
    let mb: Vec<&[f64]> = x[5..9].iter().map(|v| v.as_slice()).collect();
    // Rows (j, t) over branches.
    let rows_t: Vec<Vec<f64>> = (0..m)
        .flat_map(|j| (0..t_steps).map(move |t| (j, t)))
        .map(|(j, t)| (0..b).map(|i| at(t, j, i)).collect())
        .collect();
    let (gate_t, margin_t) = pooled_gate64(&rows_t, &mt); // [M, T]
    let rows_b: Vec<Vec<f64>> = (0..m)
        .flat_map(|j| (0..b).map(move |i| (j, i)))
        .map(|(j, i)| (0..t_steps).map(|t| at(t, j, i) * gate_t[j * t_steps + t]).collect())
        .collect();
    let (gate_b, margin_b) = pooled_gate64(&rows_b, &mb); // [M, B]
    let mut out = vec![0.0; y.len()];
    for t in 0..t_steps {
        for j in 0..m {
            for i in 0..b {
                out[(t * m + j) * b + i] = gate_t[j * t_steps + t] * gate_b[j * b + i];
            }
        }
    }
    (out, margin_t.min(margin_b))
}

fn xent64(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / n as f64
}

fn case(name: impl Into<String>, inputs: Vec<Tensor>, graph: GraphFn, reference: RefFn) -> Case {
    let fixed = vec![false; inputs.len()];
    Case {
        name: name.into(),
        inputs,
        fixed,
        graph,
        reference,
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let (m, k, n) = (3, 4, 2);
    cases.push(case(
        "matmul",
        vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
        Box::new(|g, v| g.matmul(v[0], v[1])),
        Box::new(move |x| mm(&x[0], &x[1], m, k, n)),
    ));
    let same = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)];
    cases.push(case(
        "add",
        same(rng),
        Box::new(|g, v| g.add(v[0], v[1])),
        Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    ));
    cases.push(case(
        "sub",
        same(rng),
        Box::new(|g, v| g.sub(v[0], v[1])),
        Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
    ));
    cases.push(case(
        "mul",
        same(rng),
        Box::new(|g, v| g.mul(v[0], v[1])),
        Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    ));
    cases.push(case(
        "mul_scalar",
        vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[1], -1.0, 1.0)],
        Box::new(|g, v| g.mul(v[0], v[1])),
        Box::new(|x| x[0].iter().map(|a| a * x[1][0]).collect()),
    ));
    cases.push(case(
        "sub_scalar_lhs",
        vec![uniform(rng, &[1], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
        Box::new(|g, v| g.sub(v[0], v[1])),
        Box::new(|x| x[1].iter().map(|b| x[0][0] - b).collect()),
    ));
    cases.push(case(
        "scale",
        vec![uniform(rng, &[5], -1.0, 1.0)],
        Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        map1(|v| -1.7 * v),
    ));
    cases.push(case(
        "exp",
        vec![uniform(rng, &[5], -2.0, 2.0)],
        Box::new(|g, v| Ok(g.exp(v[0]))),
        map1(f64::exp),
    ));
    cases.push(case(
        "sigmoid",
        vec![uniform(rng, &[5], -3.0, 3.0)],
        Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        map1(sig),
    ));
    cases.push(case(
        "square",
        vec![uniform(rng, &[5], -2.0, 2.0)],
        Box::new(|g, v| Ok(g.square(v[0]))),
        map1(|v| v * v),
    ));
    cases.push(case(
        "relu",
        vec![off_zero(rng, &[6])],
        Box::new(|g, v| Ok(g.relu(v[0]))),
        map1(|v| v.max(0.0)),
    ));
    cases.push(case(
        "sum",
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| Ok(g.sum(v[0]))),
        Box::new(|x| vec![x[0].iter().sum()]),
    ));
    cases.push(case(
        "mean",
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| g.mean(v[0])),
        Box::new(|x| vec![x[0].iter().sum::<f64>() / 6.0]),
    ));
    cases.push(case(
        "reduce_mean",
        vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        Box::new(|g, v| g.reduce_last(v[0], Reduce::Mean)),
        Box::new(|x| x[0].chunks(4).map(|r| r.iter().sum::<f64>() / 4.0).collect()),
    ));
    cases.push(case(
        "reduce_max",
        vec![spaced_rows(rng, 3, 4)],
        Box::new(|g, v| g.reduce_last(v[0], Reduce::Max)),
        Box::new(|x| {
            x[0].chunks(4)
                .map(|r| r.iter().cloned().fold(f64::MIN, f64::max))
                .collect()
        }),
    ));
    cases.push(case(
        "reshape",
        vec![uniform(rng, &[2, 6], -1.0, 1.0)],
        Box::new(|g, v| g.reshape(v[0], &[3, 4])),
        Box::new(|x| x[0].clone()),
    ));
    cases.push(case(
        "permute",
        vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        Box::new(|g, v| g.permute(v[0], &[2, 0, 1])),
        Box::new(|x| {
            let mut out = Vec::new();
            for k in 0..4 {
                for i in 0..2 {
                    for j in 0..3 {
                        out.push(x[0][(i * 3 + j) * 4 + k]);
                    }
                }
            }
            out
        }),
    ));
    cases.push(case(
        "sum_leading",
        vec![uniform(rng, &[3, 2, 2], -1.0, 1.0)],
        Box::new(|g, v| g.sum_leading(v[0])),
        Box::new(|x| (0..4).map(|i| (0..3).map(|t| x[0][t * 4 + i]).sum()).collect()),
    ));
    cases.push(case(
        "repeat_leading",
        vec![uniform(rng, &[2, 2], -1.0, 1.0)],
        Box::new(|g, v| g.repeat_leading(v[0], 3)),
        Box::new(|x| x[0].repeat(3)),
    ));
    cases.push(case(
        "add_bias",
        vec![uniform(rng, &[2, 2, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        Box::new(|g, v| g.add_bias(v[0], v[1])),
        Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % 3]).collect()),
    ));
    cases.push(case(
        "mul_bcast_last",
        vec![uniform(rng, &[2, 2, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        Box::new(|g, v| g.mul_bcast_last(v[0], v[1])),
        Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a * x[1][i % 3]).collect()),
    ));
    cases.push(case(
        "mul_expand_last",
        vec![uniform(rng, &[2, 2, 3], -1.0, 1.0), uniform(rng, &[2, 2], -1.0, 1.0)],
        Box::new(|g, v| g.mul_expand_last(v[0], v[1])),
        Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a * x[1][i / 3]).collect()),
    ));
    let labels = vec![2usize, 0, 1];
    let l2 = labels.clone();
    cases.push(case(
        "softmax_xent",
        vec![uniform(rng, &[3, 4], -2.0, 2.0)],
        Box::new(move |g, v| softmax_xent_var(g, v[0], &labels)),
        Box::new(move |x| vec![xent64(&x[0], &l2, 4)]),
    ));
    cases.extend(neuron_cases(rng));
    cases.extend(strength_cases(rng));
    cases
}

fn neuron_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let (t, m, b) = (4, 2, 3);
    let alpha = 0.5;
    cases.push(case(
        "dend_update_seq",
        vec![uniform(rng, &[t, m, b], -1.0, 1.0)],
        Box::new(move |g, v| dend_update_seq_var(g, v[0], alpha)),
        Box::new(move |x| scan(&x[0], t, alpha as f64)),
    ));
    let dm = DecayMatrix::new(t, 0.9).unwrap();
    cases.push(case(
        "dend_update_parallel",
        vec![uniform(rng, &[t, m, b], -1.0, 1.0)],
        Box::new(move |g, v| dend_update_parallel_var(g, v[0], &dm)),
        Box::new(move |x| scan(&x[0], t, 0.9f32 as f64)),
    ));
    // Wide enough to take the row-update path.
    let wide = DecayMatrix::new(3, 0.5).unwrap();
    cases.push(case(
        "dend_update_parallel_wide",
        vec![uniform(rng, &[3, 300], -1.0, 1.0)],
        Box::new(move |g, v| dend_update_parallel_var(g, v[0], &wide)),
        Box::new(|x| scan(&x[0], 3, 0.5)),
    ));
    for kind in [ActivationKind::MexicanHat, ActivationKind::LeakyRelu] {
        let x = if kind == ActivationKind::LeakyRelu {
            off_zero(rng, &[t, m, b])
        } else {
            uniform(rng, &[t, m, b], -2.5, 2.5)
        };
        cases.push(case(
            format!("activate_{kind:?}"),
            vec![x],
            Box::new(move |g, v| dend_activate_var(g, v[0], kind, None)),
            Box::new(move |x| activate(kind, &x[0], None, b)),
        ));
    }
    for kind in [ActivationKind::Swish, ActivationKind::USwish] {
        let mut c = case(
            format!("activate_{kind:?}"),
            vec![uniform(rng, &[t, m, b], -2.0, 2.0), uniform(rng, &[b], 0.3, 2.5)],
            Box::new(move |g, v| dend_activate_var(g, v[0], kind, Some(v[1]))),
            Box::new(move |x| activate(kind, &x[0], Some(&x[1]), b)),
        );
        c.fixed[1] = kind == ActivationKind::USwish;
        cases.push(c);
    }
    cases.push(case(
        "branch_to_soma_shared",
        vec![uniform(rng, &[t, m, b], -1.0, 1.0), uniform(rng, &[t, b], 0.0, 1.0)],
        Box::new(|g, v| branch_to_soma_var(g, v[0], v[1])),
        Box::new(move |x| {
            (0..t * m)
                .map(|r| (0..b).map(|i| x[0][r * b + i] * x[1][(r / m) * b + i]).sum())
                .collect()
        }),
    ));
    cases.push(case(
        "branch_to_soma_per_neuron",
        vec![uniform(rng, &[t, m, b], -1.0, 1.0), uniform(rng, &[t, m, b], 0.0, 1.0)],
        Box::new(|g, v| branch_to_soma_var(g, v[0], v[1])),
        Box::new(move |x| {
            (0..t * m)
                .map(|r| (0..b).map(|i| x[0][r * b + i] * x[1][r * b + i]).sum())
                .collect()
        }),
    ));
    for soma_kind in [SomaKind::Lif, SomaKind::If] {
        let p = NeuronParams {
            soma: soma_kind,
            ..NeuronParams::default()
        };
        let sg = SurrogateSpec::smooth(4.0);
        cases.push(case(
            format!("soma_{soma_kind:?}"),
            vec![uniform(rng, &[6, 3], 0.0, 2.5)],
            Box::new(move |g, v| Ok(soma_var(g, v[0], &p, &sg))),
            Box::new(move |x| soma(&x[0], 6, &p, 4.0)),
        ));
    }
    let sg = SurrogateSpec::smooth(4.0);
    cases.push(case(
        "heaviside_smooth",
        vec![uniform(rng, &[6], -1.5, 1.5)],
        Box::new(move |g, v| Ok(surrogate_heaviside(g, v[0], sg))),
        map1(|u| sig(4.0 * u)),
    ));
    cases
}

fn strength_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let (t, m, b) = (3, 2, 4);
    for lambda in [1e-4f32, 0.5] {
        cases.push(case(
            format!("pfa_{lambda}"),
            vec![uniform(rng, &[t, m, b], -1.0, 1.0)],
            Box::new(move |g, v| pfa_var(g, v[0], lambda)),
            Box::new(move |x| pfa64(&x[0], t, b, lambda as f64)),
        ));
    }
    let bound_t = 1.0 / (t as f32).sqrt();
    let bound_b = 1.0 / (b as f32).sqrt();
    // Redraw until every relu input and max-pooling gap clears the step.
    let inputs = loop {
        let mut inputs = vec![uniform(rng, &[t, m, b], 0.0, 1.0)];
        for (w, bound) in [(t, bound_t), (b, bound_b)] {
            inputs.push(uniform(rng, &[w, w], -bound, bound));
            inputs.push(uniform(rng, &[w], -0.1, 0.1));
            inputs.push(uniform(rng, &[w, w], -bound, bound));
            inputs.push(uniform(rng, &[w], -0.1, 0.1));
        }
        let x: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
        if mda64(&x, t, m, b).1 > 20.0 * H {
            break inputs;
        }
    };
    cases.push(case(
        "mda",
        inputs,
        Box::new(|g, v| {
            let mt = MlpVars {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            };
            let mb = MlpVars {
                w1: v[5],
                b1: v[6],
                w2: v[7],
                b2: v[8],
            };
            mda_var(g, v[0], &mt, &mb)
        }),
        Box::new(move |x| mda64(x, t, m, b).0),
    ));
    cases
}

pub fn check_ops() {
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        for c in op_cases(&mut rng) {
            run(c, &mut rng);
        }
    }
}

/// `f64` forward of a smooth two-hidden-layer network returning the mean
/// cross-entropy and the smallest distance of a LeakyReLU input from zero.
fn network_loss64(spec: &NetworkSpec, params: &BTreeMap<String, Vec<f64>>, x: &[f64], labels: &[usize]) -> (f64, f64) {
    let mut margin = f64::MAX;
    let t_steps = spec.t_steps;
    let n = labels.len();
    let sharp = spec.surrogate.sharpness as f64;
    let widths_in: Vec<usize> = std::iter::once(spec.inputs)
        .chain(spec.blocks.iter().map(|b| b.fc_out / b.neuron.kind.branches()))
        .collect();
    let z0 = mm(x, &params[&fc_name(0)], n, spec.inputs, spec.blocks[0].fc_out);
    let mut z: Vec<f64> = z0.repeat(t_steps); // [T, N, C0]
    for (k, block) in spec.blocks.iter().enumerate() {
        let c0 = block.fc_out;
        let p = &block.neuron.params;
        let s = match block.neuron.kind {
            NeuronKind::Point => soma(&z, t_steps, p, sharp),
            NeuronKind::Dend {
                branches: b,
                activation,
                strength,
            } => {
                let v = scan(&z, t_steps, p.alpha as f64);
                if activation == ActivationKind::LeakyRelu {
                    margin = v.iter().map(|a| a.abs()).fold(margin, f64::min);
                }
                let gamma = params.get(&format!("nl{k}.gamma")).map(|g| g.as_slice());
                let yt = activate(activation, &v, gamma, b);
                let kk: Vec<f64> = match strength {
                    StrengthMode::Ones => vec![1.0; yt.len()],
                    StrengthMode::Learnable => {
                        let kp = &params[&format!("nl{k}.k")];
                        (0..yt.len()).map(|i| kp[(i / (n * c0)) * b + i % b]).collect()
                    }
                    StrengthMode::Pfa { lambda } => pfa64(&yt, t_steps, b, lambda as f64),
                    StrengthMode::Mda => unreachable!("covered by the op-level check"),
                };
                let y: Vec<f64> = yt
                    .chunks(b)
                    .zip(kk.chunks(b))
                    .map(|(a, c)| a.iter().zip(c).map(|(u, w)| u * w).sum())
                    .collect();
                soma(&y, t_steps, p, sharp)
            }
        };
        let c_in = widths_in[k + 1];
        let w = &params[&fc_name(k + 1)];
        let out_w = w.len() / c_in;
        z = mm(&s, w, t_steps * n, c_in, out_w);
    }
    let classes = spec.classes;
    let mut logits = vec![0.0; n * classes];
    for t in 0..t_steps {
        for (l, v) in logits.iter_mut().zip(&z[t * n * classes..(t + 1) * n * classes]) {
            *l += v;
        }
    }
    (xent64(&logits, labels, classes), margin)
}

fn check_network(name: &str, layer: NeuronLayerSpec, hidden: usize, seed: u64) {
    let mut spec = NetworkSpec::two_hidden(2, hidden, 4, 3, layer);
    spec.surrogate = SurrogateSpec::smooth(4.0);
    let mut net = Network::new(spec.clone(), seed).unwrap();
    // Larger weights push potentials through the sigmoid's steep region.
    for k in 0..3 {
        let w = &mut net.params_mut().get_mut(&fc_name(k)).unwrap().value;
        *w = w.map(|v| v * 4.0);
    }
    let params: BTreeMap<String, Vec<f64>> = net
        .params()
        .iter()
        .map(|(n, p)| (n.to_string(), to64(&p.value)))
        .collect();
    let labels = vec![0usize, 3, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Redraw until no LeakyReLU input lies near its kink.
    let x = (0..1000)
        .map(|_| uniform(&mut rng, &[3, 2], 0.0, 1.0))
        .find(|x| network_loss64(&spec, &params, &to64(x), &labels).1 > 20.0 * H)
        .expect("no input clear of the kink");

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let fwd = net.forward(&mut g, xv, None).unwrap();
    let loss = softmax_xent_var(&mut g, fwd.logits, &labels).unwrap();
    g.backward(loss).unwrap();

    let x64 = to64(&x);
    let l64 = network_loss64(&spec, &params, &x64, &labels).0;
    let l32 = g.value(loss).item() as f64;
    assert!((l64 - l32).abs() < 1e-4, "{name}: loss {l32} vs reference {l64}");

    let mut checked = 0;
    for (pname, var) in &fwd.params {
        let Some(grad) = g.grad(*var) else { continue };
        for e in 0..grad.len() {
            let mut p = params.clone();
            p.get_mut(pname).unwrap()[e] += H;
            let up = network_loss64(&spec, &p, &x64, &labels).0;
            p.get_mut(pname).unwrap()[e] -= 2.0 * H;
            let down = network_loss64(&spec, &p, &x64, &labels).0;
            compare(
                name,
                &format!("{pname}[{e}]"),
                grad.data()[e] as f64,
                (up - down) / (2.0 * H),
            );
            checked += 1;
        }
    }
    assert!(checked >= 16, "{name}: only {checked} parameters checked");
}

pub fn check_point_networks() {
    // 2*2 + 2*2 + 2*4 = 16 weights.
    for seed in 0..3 {
        check_network("point", NeuronLayerSpec::point(), 2, seed);
    }
}

pub fn check_dendritic_networks() {
    use ActivationKind::*;
    let layers = [
        (MexicanHat, StrengthMode::Ones),
        (LeakyRelu, StrengthMode::Ones),
        (Swish, StrengthMode::Ones),
        (USwish, StrengthMode::Learnable),
        (MexicanHat, StrengthMode::Learnable),
        (LeakyRelu, StrengthMode::Pfa { lambda: 1e-4 }),
    ];
    for (act, strength) in layers {
        for seed in 0..3 {
            check_network(
                &format!("{act:?}/{strength:?}"),
                NeuronLayerSpec::dend(2, act, strength),
                4,
                seed,
            );
        }
    }
}
