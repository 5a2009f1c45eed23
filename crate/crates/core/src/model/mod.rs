//! Residual dense networks: the graph family students and teachers are
//! drawn from.
//!
//! A network is a linear stem, then a sequence of stages, then a linear
//! head. Each stage holds `block_count` residual blocks of a fixed width,
//!
//! ```text
//! x <- x + relu(x * W_in + b_in) * W_out + b_out
//! ```
//!
//! and consecutive stages are joined by a plain linear transition. Weights
//! are stored `fan_in x fan_out` so a batch of row vectors multiplies from
//! the left.

mod codec;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Ev3Error, Result};
use crate::tensor::Tensor;

pub use codec::{decode_params, encode_params, read_params, write_params};
pub(crate) use codec::{decode_named_at, encode_named};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StageSpec {
    pub width: usize,
    pub block_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GraphSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
}

impl GraphSpec {
    pub fn new(input_dim: usize, num_classes: usize, stages: Vec<StageSpec>) -> Result<Self> {
        let spec = Self {
            input_dim,
            num_classes,
            stages,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Convenience constructor: one stage per `(width, block_count)` pair.
    pub fn from_pairs(input_dim: usize, num_classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            input_dim,
            num_classes,
            pairs
                .iter()
                .map(|&(width, block_count)| StageSpec { width, block_count })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Ev3Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Ev3Error::Config("num_classes must be at least 2".into()));
        }
        if self.stages.is_empty() {
            return Err(Ev3Error::Config("a graph needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.width == 0 || s.block_count == 0 {
                return Err(Ev3Error::Config(format!(
                    "stage {i} has width {} and {} blocks; both must be positive",
                    s.width, s.block_count
                )));
            }
        }
        Ok(())
    }

    /// Total residual blocks; identifies a model size within a run.
    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.block_count).sum()
    }

    pub fn block_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.block_count).collect()
    }

    pub fn last_width(&self) -> usize {
        self.stages.last().expect("validated spec").width
    }

    /// Same graph with one more block at the end of every stage.
    pub fn deepened(&self) -> GraphSpec {
        let mut out = self.clone();
        for s in &mut out.stages {
            s.block_count += 1;
        }
        out
    }

    /// Every parameter the graph demands, in forward order, with its shape.
    pub fn param_shapes(&self) -> Vec<(ParamKey, (usize, usize))> {
        let mut shapes = Vec::new();
        let w0 = self.stages[0].width;
        shapes.push((ParamKey::StemWeight, (self.input_dim, w0)));
        shapes.push((ParamKey::StemBias, (1, w0)));
        let mut prev = w0;
        for (si, stage) in self.stages.iter().enumerate() {
            let w = stage.width;
            if si > 0 {
                shapes.push((ParamKey::TransitionWeight { stage: si }, (prev, w)));
                shapes.push((ParamKey::TransitionBias { stage: si }, (1, w)));
            }
            for bi in 0..stage.block_count {
                let key = |role| ParamKey::Block {
                    stage: si,
                    block: bi,
                    role,
                };
                shapes.push((key(BlockRole::ProjIn), (w, w)));
                shapes.push((key(BlockRole::BiasIn), (1, w)));
                shapes.push((key(BlockRole::ProjOut), (w, w)));
                shapes.push((key(BlockRole::BiasOut), (1, w)));
            }
            prev = w;
        }
        shapes.push((ParamKey::HeadWeight, (prev, self.num_classes)));
        shapes.push((ParamKey::HeadBias, (1, self.num_classes)));
        shapes
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->", self.input_dim)?;
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}x{}", s.width, s.block_count)?;
        }
        write!(f, "->{}", self.num_classes)
    }
}

/// Exact number of scalar parameters implied by `spec`.
pub fn param_count(spec: &GraphSpec) -> Result<usize> {
    spec.validate()?;
    Ok(spec.param_shapes().iter().map(|(_, (r, c))| r * c).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockRole {
    ProjIn,
    BiasIn,
    ProjOut,
    BiasOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    StemWeight,
    StemBias,
    TransitionWeight { stage: usize },
    TransitionBias { stage: usize },
    Block { stage: usize, block: usize, role: BlockRole },
    HeadWeight,
    HeadBias,
}

impl ParamKey {
    pub fn is_bias(self) -> bool {
        matches!(
            self,
            ParamKey::StemBias
                | ParamKey::TransitionBias { .. }
                | ParamKey::HeadBias
                | ParamKey::Block {
                    role: BlockRole::BiasIn | BlockRole::BiasOut,
                    ..
                }
        )
    }

    pub fn parse(s: &str) -> Option<ParamKey> {
        match s {
            "stem.weight" => return Some(ParamKey::StemWeight),
            "stem.bias" => return Some(ParamKey::StemBias),
            "head.weight" => return Some(ParamKey::HeadWeight),
            "head.bias" => return Some(ParamKey::HeadBias),
            _ => {}
        }
        let mut parts = s.split('.');
        let stage = parts.next()?.strip_prefix("stage")?.parse().ok()?;
        let second = parts.next()?;
        let third = parts.next()?;
        if parts.next().is_some() {
            return None;
        }
        if second == "transition" {
            return match third {
                "weight" => Some(ParamKey::TransitionWeight { stage }),
                "bias" => Some(ParamKey::TransitionBias { stage }),
                _ => None,
            };
        }
        let block = second.strip_prefix("block")?.parse().ok()?;
        let role = match third {
            "proj_in" => BlockRole::ProjIn,
            "bias_in" => BlockRole::BiasIn,
            "proj_out" => BlockRole::ProjOut,
            "bias_out" => BlockRole::BiasOut,
            _ => return None,
        };
        Some(ParamKey::Block { stage, block, role })
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::StemWeight => write!(f, "stem.weight"),
            ParamKey::StemBias => write!(f, "stem.bias"),
            ParamKey::TransitionWeight { stage } => write!(f, "stage{stage}.transition.weight"),
            ParamKey::TransitionBias { stage } => write!(f, "stage{stage}.transition.bias"),
            ParamKey::Block { stage, block, role } => {
                let role = match role {
                    BlockRole::ProjIn => "proj_in",
                    BlockRole::BiasIn => "bias_in",
                    BlockRole::ProjOut => "proj_out",
                    BlockRole::BiasOut => "bias_out",
                };
                write!(f, "stage{stage}.block{block}.{role}")
            }
            ParamKey::HeadWeight => write!(f, "head.weight"),
            ParamKey::HeadBias => write!(f, "head.bias"),
        }
    }
}

/// Trainable tensors keyed by their role in a [`GraphSpec`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<ParamKey, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, value: Tensor) -> Option<Tensor> {
        self.entries.insert(key, value)
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub(crate) fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.entries.get_mut(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (*k, Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn same_keys(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    /// Checks that exactly the keys and shapes demanded by `spec` are present.
    pub fn check(&self, spec: &GraphSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.entries.len() {
            return Err(Ev3Error::Contract(format!(
                "graph {spec} needs {} tensors, parameter set has {}",
                shapes.len(),
                self.entries.len()
            )));
        }
        for (key, shape) in shapes {
            match self.entries.get(&key) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Ev3Error::Contract(format!(
                        "{key} has shape {:?}, graph {spec} needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Ev3Error::Contract(format!("missing parameter {key}"))),
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

/// He-scaled uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(spec: &GraphSpec, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for (key, (rows, cols)) in spec.param_shapes() {
        let t = if key.is_bias() {
            Tensor::zeros(rows, cols)
        } else {
            he_uniform(&mut rng, rows, cols)
        };
        params.insert(key, t);
    }
    params
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / fan_in)`, so variance `2 / fan_in`.
pub(crate) fn he_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..=a))
}

fn param(params: &ParameterSet, key: ParamKey) -> &Tensor {
    params.get(&key).expect("parameters checked against spec")
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    out.add_row_in_place(b);
    Ok(out)
}

/// Logits for a batch of inputs.
pub fn forward(spec: &GraphSpec, params: &ParameterSet, inputs: &Tensor) -> Result<Tensor> {
    params.check(spec)?;
    if inputs.cols() != spec.input_dim {
        return Err(Ev3Error::dim(
            "forward",
            format!("inputs have {} features, graph expects {}", inputs.cols(), spec.input_dim),
        ));
    }
    let mut h = linear(
        inputs,
        param(params, ParamKey::StemWeight),
        param(params, ParamKey::StemBias),
    )?;
    for (si, stage) in spec.stages.iter().enumerate() {
        if si > 0 {
            h = linear(
                &h,
                param(params, ParamKey::TransitionWeight { stage: si }),
                param(params, ParamKey::TransitionBias { stage: si }),
            )?;
        }
        for bi in 0..stage.block_count {
            let key = |role| ParamKey::Block {
                stage: si,
                block: bi,
                role,
            };
            let mut u = linear(&h, param(params, key(BlockRole::ProjIn)), param(params, key(BlockRole::BiasIn)))?;
            for v in u.values_mut() {
                *v = v.max(0.0);
            }
            let r = linear(&u, param(params, key(BlockRole::ProjOut)), param(params, key(BlockRole::BiasOut)))?;
            h.add_in_place(&r);
        }
    }
    linear(&h, param(params, ParamKey::HeadWeight), param(params, ParamKey::HeadBias))
}

/// Forward pass recorded on a tape. Returns the logits node and the leaf
/// created for each parameter.
pub fn record_forward(
    tape: &mut Tape,
    spec: &GraphSpec,
    params: &ParameterSet,
    inputs: &Tensor,
) -> Result<(Var, Vec<(ParamKey, Var)>)> {
    params.check(spec)?;
    let mut leaves = Vec::with_capacity(params.len());
    let mut leaf = |tape: &mut Tape, key: ParamKey| {
        let v = tape.leaf(param(params, key).clone());
        leaves.push((key, v));
        v
    };
    let x = tape.leaf(inputs.clone());
    let w = leaf(tape, ParamKey::StemWeight);
    let b = leaf(tape, ParamKey::StemBias);
    let xw = tape.matmul(x, w)?;
    let mut h = tape.add_row(xw, b)?;
    for (si, stage) in spec.stages.iter().enumerate() {
        if si > 0 {
            let w = leaf(tape, ParamKey::TransitionWeight { stage: si });
            let b = leaf(tape, ParamKey::TransitionBias { stage: si });
            let hw = tape.matmul(h, w)?;
            h = tape.add_row(hw, b)?;
        }
        for bi in 0..stage.block_count {
            let key = |role| ParamKey::Block {
                stage: si,
                block: bi,
                role,
            };
            let w_in = leaf(tape, key(BlockRole::ProjIn));
            let b_in = leaf(tape, key(BlockRole::BiasIn));
            let w_out = leaf(tape, key(BlockRole::ProjOut));
            let b_out = leaf(tape, key(BlockRole::BiasOut));
            let pre = tape.matmul(h, w_in)?;
            let pre = tape.add_row(pre, b_in)?;
            let act = tape.relu(pre);
            let r = tape.matmul(act, w_out)?;
            let r = tape.add_row(r, b_out)?;
            h = tape.add(h, r)?;
        }
    }
    let w = leaf(tape, ParamKey::HeadWeight);
    let b = leaf(tape, ParamKey::HeadBias);
    let logits = tape.matmul(h, w)?;
    let logits = tape.add_row(logits, b)?;
    Ok((logits, leaves))
}
