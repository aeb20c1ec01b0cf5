//! Weight-DendSN blocks and the fully connected network builder.
//!
//! A block is a bias-free fully connected layer followed by a neuron layer.
//! For a dendritic layer with `B` branches the `C0` FC outputs are folded
//! into `C0 / B` neurons (see [`FoldSpec`]). The readout is a final FC layer
//! whose output is summed over time to give the logits.

mod fold;
mod params;

pub use fold::FoldSpec;
pub use params::{Binder, Param, ParamStore};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{soma_var, ActivationKind, DecayMatrix, DendriticUnit, NeuronParams, SurrogateSpec, UpdatePath};
use crate::strength::{k_ones, mda_var, pfa_var, Mlp, MlpVars, StrengthMode};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NeuronKind {
    /// LIF/IF soma driven directly by the FC output.
    Point,
    Dend {
        branches: usize,
        activation: ActivationKind,
        #[serde(default)]
        strength: StrengthMode,
    },
}

impl NeuronKind {
    pub fn branches(&self) -> usize {
        match *self {
            NeuronKind::Point => 1,
            NeuronKind::Dend { branches, .. } => branches,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronLayerSpec {
    pub kind: NeuronKind,
    #[serde(default)]
    pub params: NeuronParams,
}

impl NeuronLayerSpec {
    pub fn point() -> Self {
        Self {
            kind: NeuronKind::Point,
            params: NeuronParams::default(),
        }
    }

    pub fn dend(branches: usize, activation: ActivationKind, strength: StrengthMode) -> Self {
        Self {
            kind: NeuronKind::Dend {
                branches,
                activation,
                strength,
            },
            params: NeuronParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Output channels of the block's FC layer, before folding.
    pub fc_out: usize,
    pub neuron: NeuronLayerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub inputs: usize,
    pub classes: usize,
    pub t_steps: usize,
    pub blocks: Vec<BlockSpec>,
    pub surrogate: SurrogateSpec,
    pub path: UpdatePath,
}

impl NetworkSpec {
    /// `FC(in -> H) => NL1 => FC(H/B -> H*B) => NL2 => FC(H -> classes)`,
    /// with `B = 1` for point layers.
    pub fn two_hidden(inputs: usize, hidden: usize, classes: usize, t_steps: usize, layer: NeuronLayerSpec) -> Self {
        let b = layer.kind.branches();
        Self {
            inputs,
            classes,
            t_steps,
            blocks: vec![
                BlockSpec {
                    fc_out: hidden,
                    neuron: layer,
                },
                BlockSpec {
                    fc_out: hidden * b,
                    neuron: layer,
                },
            ],
            surrogate: SurrogateSpec::default(),
            path: UpdatePath::Parallel,
        }
    }

    /// Neuron count of every hidden layer.
    pub fn widths(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| b.fc_out / b.neuron.kind.branches())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::config("t_steps", "must be at least 1"));
        }
        if self.inputs == 0 || self.classes == 0 {
            return Err(Error::config("model", "inputs and classes must be positive"));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            FoldSpec::new(b.fc_out, b.neuron.kind.branches())
                .map_err(|e| Error::config(format!("blocks[{k}].fc_out"), e.to_string()))?;
            b.neuron
                .params
                .validate()
                .map_err(|e| Error::config(format!("blocks[{k}].params"), e.to_string()))?;
            if let NeuronKind::Dend { strength, .. } = b.neuron.kind {
                strength.validate()?;
            }
        }
        Ok(())
    }
}

pub fn fc_name(k: usize) -> String {
    format!("fc{k}.weight")
}

pub fn layer_prefix(k: usize) -> String {
    format!("nl{k}")
}

/// Per-layer override applied by task-context modulation.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGate {
    /// Fixed strengths, `[T, B]` shared or `[T, C, B]` per neuron.
    Strength(Tensor),
    /// Strengths taken from a named (possibly trainable) parameter.
    StrengthParam(String),
    /// Multiplicative `[C]` mask on the layer's output spikes.
    Mask(Tensor),
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Output spikes `[T, N, C]` of each hidden layer.
    pub spikes: Vec<Var>,
    /// Every parameter that was lifted into the graph, by name.
    pub params: BTreeMap<String, Var>,
}

pub struct Network {
    spec: NetworkSpec,
    params: ParamStore,
    decay: Vec<Option<DecayMatrix>>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut fan_in = spec.inputs;
        let mut decay = Vec::new();
        for (k, b) in spec.blocks.iter().enumerate() {
            params.insert(fc_name(k), uniform_weight(fan_in, b.fc_out, &mut rng), true);
            let pre = layer_prefix(k);
            match b.neuron.kind {
                NeuronKind::Point => decay.push(None),
                NeuronKind::Dend {
                    branches,
                    activation,
                    strength,
                } => {
                    decay.push(Some(DecayMatrix::new(spec.t_steps, b.neuron.params.alpha)?));
                    if activation.has_slope() {
                        let gamma = ActivationKind::sample_slopes(branches, &mut rng);
                        params.insert(format!("{pre}.gamma"), gamma, activation.slope_is_learnable());
                    }
                    match strength {
                        StrengthMode::Learnable => {
                            params.insert(format!("{pre}.k"), k_ones(spec.t_steps, branches), true)
                        }
                        StrengthMode::Mda => {
                            for (tag, width) in [("mda_t", spec.t_steps), ("mda_b", branches)] {
                                let m = Mlp::new(width, &mut rng);
                                for (part, t) in [("w1", m.w1), ("b1", m.b1), ("w2", m.w2), ("b2", m.b2)] {
                                    params.insert(format!("{pre}.{tag}.{part}"), t, true);
                                }
                            }
                        }
                        StrengthMode::Ones | StrengthMode::Pfa { .. } => {}
                    }
                }
            }
            fan_in = b.fc_out / b.neuron.kind.branches();
        }
        let readout = spec.blocks.len();
        params.insert(fc_name(readout), uniform_weight(fan_in, spec.classes, &mut rng), true);
        Ok(Self { spec, params, decay })
    }

    /// Rebuilds a network around previously saved parameters.
    pub fn from_params(spec: NetworkSpec, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(spec, 0)?;
        for (name, p) in fresh.params.iter() {
            let got = params.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn readout_name(&self) -> String {
        fc_name(self.spec.blocks.len())
    }

    /// Runs the network on `x`, which is either a static `[N, inputs]` batch
    /// (fed identically at every step) or a `[T, N, inputs]` sequence.
    ///
    /// `gates`, when given, has one optional entry per hidden layer and
    /// overrides that layer's strengths or masks its output.
    pub fn forward(&self, g: &mut Graph, x: Var, gates: Option<&[Option<LayerGate>]>) -> Result<Forward> {
        self.forward_with(g, x, gates, Binder::new(&self.params))
    }

    /// [`Network::forward`] with every parameter bound as a constant, for
    /// inference and input-gradient passes.
    pub fn forward_frozen(&self, g: &mut Graph, x: Var, gates: Option<&[Option<LayerGate>]>) -> Result<Forward> {
        self.forward_with(g, x, gates, Binder::frozen(&self.params))
    }

    fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        gates: Option<&[Option<LayerGate>]>,
        mut binder: Binder,
    ) -> Result<Forward> {
        let t_steps = self.spec.t_steps;
        let xs = g.shape(x).to_vec();
        let n = match xs[..] {
            [n, c] if c == self.spec.inputs => n,
            [t, n, c] if t == t_steps && c == self.spec.inputs => n,
            _ => {
                return Err(Error::dim(
                    "network_forward",
                    format!("input {xs:?} for T={t_steps}, {} inputs", self.spec.inputs),
                ))
            }
        };
        if let Some(gs) = gates {
            if gs.len() != self.spec.blocks.len() {
                return Err(Error::contract(format!(
                    "{} gates for {} hidden layers",
                    gs.len(),
                    self.spec.blocks.len()
                )));
            }
        }
        let w0 = binder.var(g, &fc_name(0))?;
        let mut z = if xs.len() == 2 {
            // Static input: the first FC output is the same at every step.
            let z = g.matmul(x, w0)?;
            g.repeat_leading(z, t_steps)?
        } else {
            let flat = g.reshape(x, &[t_steps * n, self.spec.inputs])?;
            let z = g.matmul(flat, w0)?;
            g.reshape(z, &[t_steps, n, self.spec.blocks[0].fc_out])?
        };
        let mut spikes = Vec::with_capacity(self.spec.blocks.len());
        for (k, block) in self.spec.blocks.iter().enumerate() {
            let gate = gates.and_then(|gs| gs[k].as_ref());
            let s = self.neuron_layer(g, &mut binder, k, block, z, gate)?;
            spikes.push(s);
            let c = g.shape(s)[2];
            let w = binder.var(g, &fc_name(k + 1))?;
            let flat = g.reshape(s, &[t_steps * n, c])?;
            let out = g.matmul(flat, w)?;
            let width = g.shape(w)[1];
            z = g.reshape(out, &[t_steps, n, width])?;
        }
        let logits = g.sum_leading(z)?;
        Ok(Forward {
            logits,
            spikes,
            params: binder.into_vars(),
        })
    }

    fn neuron_layer(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        k: usize,
        block: &BlockSpec,
        z: Var,
        gate: Option<&LayerGate>,
    ) -> Result<Var> {
        let p = &block.neuron.params;
        let spikes = match block.neuron.kind {
            NeuronKind::Point => {
                if matches!(gate, Some(LayerGate::Strength(_) | LayerGate::StrengthParam(_))) {
                    return Err(Error::contract(format!(
                        "layer {k} has point neurons and cannot take branch strengths"
                    )));
                }
                soma_var(g, z, p, &self.spec.surrogate)
            }
            NeuronKind::Dend {
                branches,
                activation,
                strength,
            } => {
                let pre = layer_prefix(k);
                let fold = FoldSpec::new(block.fc_out, branches)?;
                let shape = fold.folded_shape(g.shape(z))?;
                let x = g.reshape(z, &shape)?;
                let slopes = if activation.has_slope() {
                    Some(binder.var(g, &format!("{pre}.gamma"))?)
                } else {
                    None
                };
                let unit = DendriticUnit {
                    params: *p,
                    activation,
                    slopes,
                    decay: self.decay[k].as_ref().expect("dendritic layer has a decay matrix"),
                    surrogate: self.spec.surrogate,
                    path: self.spec.path,
                };
                let t_steps = self.spec.t_steps;
                unit.forward(g, x, |g, y| match gate {
                    Some(LayerGate::Strength(t)) => Ok(g.constant(t.clone())),
                    Some(LayerGate::StrengthParam(name)) => binder.var(g, name),
                    Some(LayerGate::Mask(_)) | None => match strength {
                        StrengthMode::Ones => Ok(g.constant(k_ones(t_steps, branches))),
                        StrengthMode::Learnable => binder.var(g, &format!("{pre}.k")),
                        StrengthMode::Pfa { lambda } => {
                            let flat = g.reshape(y, &[t_steps, shape[1] * shape[2], branches])?;
                            let kk = pfa_var(g, flat, lambda)?;
                            g.reshape(kk, &shape)
                        }
                        StrengthMode::Mda => {
                            let mut mlp = |tag: &str| -> Result<MlpVars> {
                                let mut v = |part: &str| binder.var(g, &format!("{pre}.{tag}.{part}"));
                                Ok(MlpVars {
                                    w1: v("w1")?,
                                    b1: v("b1")?,
                                    w2: v("w2")?,
                                    b2: v("b2")?,
                                })
                            };
                            let (mt, mb) = (mlp("mda_t")?, mlp("mda_b")?);
                            let flat = g.reshape(y, &[t_steps, shape[1] * shape[2], branches])?;
                            let kk = mda_var(g, flat, &mt, &mb)?;
                            g.reshape(kk, &shape)
                        }
                    },
                })?
            }
        };
        match gate {
            Some(LayerGate::Mask(m)) => {
                let mv = g.constant(m.clone());
                g.mul_bcast_last(spikes, mv)
            }
            _ => Ok(spikes),
        }
    }
}

/// `[fan_in, fan_out]`, uniform in `±sqrt(1 / fan_in)`.
fn uniform_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f32).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..=bound))
}
