//! The global spatio-temporal network `Z(t, x | θ)`.
//!
//! `(t/T, x)` is projected to `hidden` features, passed through `blocks`
//! residual blocks `y = LayerNorm(x + 0.5 · F(x))` with
//! `F = affine ∘ silu ∘ affine`, and mapped to `dim` outputs by an affine
//! head. The trainable initial value `v` lives alongside the weights so that
//! the optimizer sees one parameter set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// State dimension `d`.
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub eps_ln: f64,
    pub seed: u64,
    /// Horizon `T` used to rescale the time feature.
    pub horizon: f64,
    /// Feed `t/T` instead of raw `t`.
    pub normalize_time: bool,
}

impl NetworkConfig {
    pub fn new(dim: usize, horizon: f64) -> Self {
        Self {
            dim,
            hidden: DEFAULT_HIDDEN,
            blocks: DEFAULT_BLOCKS,
            eps_ln: DEFAULT_LN_EPS,
            seed: 0,
            horizon,
            normalize_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Config("network dim must be at least 1".into()));
        }
        if self.hidden < 2 {
            return Err(Error::Config("network hidden width must be at least 2".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("network horizon must be positive".into()));
        }
        if !(self.eps_ln >= 0.0) {
            return Err(Error::Config("layer norm eps must be non-negative".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count, including `v`.
    pub fn param_count(&self) -> usize {
        let (d, h, l) = (self.dim, self.hidden, self.blocks);
        (d + 1) * h + h + l * (2 * h * h + 2 * h + 2 * h) + h * d + d + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Array,
    /// `[out]`
    pub bias: Array,
}

impl Dense {
    fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Array::matrix(fan_out, fan_in, w).expect("positive extents"),
            bias: Array::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub fc1: Dense,
    pub fc2: Dense,
    pub gamma: Array,
    pub beta: Array,
}

/// Every trainable quantity: network weights and the initial value `v`.
///
/// The same type doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub proj: Dense,
    pub blocks: Vec<ResidualBlock>,
    pub head: Dense,
    /// Scalar initial value, shape `[1]`.
    pub v: Array,
}

/// Xavier-uniform weights, zero biases, unit `gamma`, zero `beta`, `v = 0`.
///
/// Training replaces `v` with a pilot estimate before the first epoch.
pub fn init_params(cfg: &NetworkConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let proj = Dense::xavier(&mut rng, cfg.dim + 1, h);
    let blocks = (0..cfg.blocks)
        .map(|_| ResidualBlock {
            fc1: Dense::xavier(&mut rng, h, h),
            fc2: Dense::xavier(&mut rng, h, h),
            gamma: Array::filled(&[h], 1.0),
            beta: Array::zeros(&[h]),
        })
        .collect();
    let head = Dense::xavier(&mut rng, h, cfg.dim);
    Ok(NetworkParams {
        proj,
        blocks,
        head,
        v: Array::scalar(0.0),
    })
}

impl NetworkParams {
    pub fn v(&self) -> f64 {
        self.v.data()[0]
    }

    pub fn set_v(&mut self, v: f64) {
        self.v.data_mut()[0] = v;
    }

    /// Same structure, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, a| a.data_mut().iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, a| n += a.len());
        n
    }

    /// Visits every tensor in a fixed order with a stable name.
    pub fn visit(&self, mut f: impl FnMut(&str, &Array)) {
        f("proj.weight", &self.proj.weight);
        f("proj.bias", &self.proj.bias);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.fc1.weight"), &b.fc1.weight);
            f(&format!("blocks.{i}.fc1.bias"), &b.fc1.bias);
            f(&format!("blocks.{i}.fc2.weight"), &b.fc2.weight);
            f(&format!("blocks.{i}.fc2.bias"), &b.fc2.bias);
            f(&format!("blocks.{i}.gamma"), &b.gamma);
            f(&format!("blocks.{i}.beta"), &b.beta);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
        f("v", &self.v);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Array)) {
        f("proj.weight", &mut self.proj.weight);
        f("proj.bias", &mut self.proj.bias);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.fc1.weight"), &mut b.fc1.weight);
            f(&format!("blocks.{i}.fc1.bias"), &mut b.fc1.bias);
            f(&format!("blocks.{i}.fc2.weight"), &mut b.fc2.weight);
            f(&format!("blocks.{i}.fc2.bias"), &mut b.fc2.bias);
            f(&format!("blocks.{i}.gamma"), &mut b.gamma);
            f(&format!("blocks.{i}.beta"), &mut b.beta);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
        f("v", &mut self.v);
    }

    /// Adds `other` entrywise; both must share one structure.
    pub fn accumulate(&mut self, other: &NetworkParams) {
        let mut src = Vec::new();
        other.visit(|_, a| src.push(a.data().to_vec()));
        let mut it = src.into_iter();
        self.visit_mut(|_, a| {
            for (x, y) in a.data_mut().iter_mut().zip(it.next().expect("same structure")) {
                *x += y;
            }
        });
    }

    /// Registers every tensor as a tape parameter.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let dense = |tape: &mut Tape, d: &Dense| BoundDense {
            weight: tape.parameter(d.weight.clone()),
            bias: tape.parameter(d.bias.clone()),
        };
        BoundParams {
            proj: dense(tape, &self.proj),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    fc1: dense(tape, &b.fc1),
                    fc2: dense(tape, &b.fc2),
                    gamma: tape.parameter(b.gamma.clone()),
                    beta: tape.parameter(b.beta.clone()),
                })
                .collect(),
            head: dense(tape, &self.head),
            v: tape.parameter(self.v.clone()),
        }
    }

    /// Evaluates `Z(t, x)` without keeping a tape around.
    pub fn evaluate(&self, cfg: &NetworkConfig, t: &[f64], x: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = z_forward(&mut tape, &bound, cfg, t, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn save(&self, cfg: &NetworkConfig, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        self.visit(|name, a| {
            tensors.push(CheckpointTensor {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.data().to_vec(),
            })
        });
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            tensors,
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(NetworkConfig, NetworkParams)> {
        let text = std::fs::read_to_string(path)?;
        let file: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let mut params = init_params(&file.config)?;
        let mut tensors = file.tensors.into_iter();
        let mut failure = None;
        params.visit_mut(|name, a| {
            if failure.is_some() {
                return;
            }
            match tensors.next() {
                Some(t) if t.name == name && t.shape == a.shape() && t.data.len() == a.len() => {
                    a.data_mut().copy_from_slice(&t.data)
                }
                Some(t) => failure = Some(format!("unexpected tensor `{}` {:?} for `{name}`", t.name, t.shape)),
                None => failure = Some(format!("missing tensor `{name}`")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if tensors.next().is_some() {
            return Err(Error::Checkpoint("trailing tensors".into()));
        }
        Ok((file.config, params))
    }
}

/// Checkpoint file: JSON object `{format, version, config, tensors}` where
/// each tensor is `{name, shape, data}` in [`NetworkParams::visit`] order.
pub const CHECKPOINT_FORMAT: &str = "dpm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: NetworkConfig,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub fc1: BoundDense,
    pub fc2: BoundDense,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles of a parameter set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub proj: BoundDense,
    pub blocks: Vec<BoundBlock>,
    pub head: BoundDense,
    pub v: Var,
}

impl BoundParams {
    /// Collects gradients into a parameter-shaped container; tensors that
    /// received no gradient are zero.
    pub fn gradients(&self, grads: &mut Gradients, like: &NetworkParams) -> NetworkParams {
        let mut out = like.zeros_like();
        let mut take = |var: Var, dst: &mut Array| {
            if let Some(g) = grads.take(var) {
                *dst = g;
            }
        };
        take(self.proj.weight, &mut out.proj.weight);
        take(self.proj.bias, &mut out.proj.bias);
        for (b, o) in self.blocks.iter().zip(out.blocks.iter_mut()) {
            take(b.fc1.weight, &mut o.fc1.weight);
            take(b.fc1.bias, &mut o.fc1.bias);
            take(b.fc2.weight, &mut o.fc2.weight);
            take(b.fc2.bias, &mut o.fc2.bias);
            take(b.gamma, &mut o.gamma);
            take(b.beta, &mut o.beta);
        }
        take(self.head.weight, &mut out.head.weight);
        take(self.head.bias, &mut out.head.bias);
        take(self.v, &mut out.v);
        out
    }
}

/// Network input rows `(t/T, x)` (or `(t, x)` without time normalization).
pub fn input_features(cfg: &NetworkConfig, t: &[f64], x: &Array) -> Result<Array> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.dim || shape[0] != t.len() {
        return Err(Error::Dimension {
            op: "z_forward input",
            left: vec![t.len(), cfg.dim],
            right: shape.to_vec(),
        });
    }
    let scale = if cfg.normalize_time { 1.0 / cfg.horizon } else { 1.0 };
    let d = cfg.dim;
    let mut data = Vec::with_capacity(t.len() * (d + 1));
    for (r, &ti) in t.iter().enumerate() {
        data.push(ti * scale);
        data.extend_from_slice(x.row(r));
    }
    Array::matrix(t.len(), d + 1, data)
}

/// `LayerNorm(x + 0.5 · fc2(silu(fc1(x))))`.
pub fn residual_block(tape: &mut Tape, x: Var, block: &BoundBlock, eps: f64) -> Result<Var> {
    let a = tape.affine(block.fc1.weight, block.fc1.bias, x)?;
    let s = tape.silu(a);
    let f = tape.affine(block.fc2.weight, block.fc2.bias, s)?;
    let half = tape.scale(f, 0.5);
    let sum = tape.add(x, half)?;
    tape.layer_norm(sum, block.gamma, block.beta, eps)
}

/// Network body applied to prepared input rows `[batch, d + 1]`.
pub fn z_forward_features(tape: &mut Tape, bound: &BoundParams, eps: f64, input: Var) -> Result<Var> {
    let mut h = tape.affine(bound.proj.weight, bound.proj.bias, input)?;
    for block in &bound.blocks {
        h = residual_block(tape, h, block, eps)?;
    }
    tape.affine(bound.head.weight, bound.head.bias, h)
}

/// `Z(t, x | θ)` for a batch of times `t: [batch]` and states `x: [batch, d]`.
pub fn z_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &NetworkConfig,
    t: &[f64],
    x: &Array,
) -> Result<Var> {
    let input = tape.constant(input_features(cfg, t, x)?);
    z_forward_features(tape, bound, cfg.eps_ln, input)
}
