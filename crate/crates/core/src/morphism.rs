//! Function-preserving depth expansion.
//!
//! Every stage gets one new residual block appended after its existing
//! blocks. The new block's input projection is random, while its output
//! projection and both biases are zero, so the branch adds exactly `+0` and
//! the grown network computes the same logits bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Ev3Error, Result};
use crate::model::{he_uniform, BlockRole, GraphSpec, ParamKey, ParameterSet};
use crate::tensor::Tensor;

/// Grows every stage by one block without changing the network's function.
pub fn deepen(spec: &GraphSpec, params: &ParameterSet, seed: u64) -> Result<(GraphSpec, ParameterSet)> {
    deepen_with_noise(spec, params, seed, 0.0)
}

/// Like [`deepen`], but perturbs the new output projections with
/// `N(0, noise_std^2)` when `noise_std > 0`. The result is then only
/// approximately function-preserving.
pub fn deepen_with_noise(
    spec: &GraphSpec,
    params: &ParameterSet,
    seed: u64,
    noise_std: f64,
) -> Result<(GraphSpec, ParameterSet)> {
    params.check(spec)?;
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Ev3Error::Config(format!("expansion noise must be >= 0, got {noise_std}")));
    }
    let grown = spec.deepened();
    let mut out = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    for (si, stage) in spec.stages.iter().enumerate() {
        let w = stage.width;
        let key = |role| ParamKey::Block {
            stage: si,
            block: stage.block_count,
            role,
        };
        let proj_out = if noise_std > 0.0 {
            Tensor::from_fn(w, w, |_, _| noise.sample(&mut rng))
        } else {
            Tensor::zeros(w, w)
        };
        out.insert(key(BlockRole::ProjIn), he_uniform(&mut rng, w, w));
        out.insert(key(BlockRole::BiasIn), Tensor::zeros(1, w));
        out.insert(key(BlockRole::ProjOut), proj_out);
        out.insert(key(BlockRole::BiasOut), Tensor::zeros(1, w));
    }
    out.check(&grown)?;
    Ok((grown, out))
}

/// `[base, deepen(base), ..., deepen^steps(base)]`, graphs only.
pub fn size_ladder(base: &GraphSpec, steps: usize) -> Vec<GraphSpec> {
    let mut ladder = Vec::with_capacity(steps + 1);
    ladder.push(base.clone());
    for _ in 0..steps {
        let next = ladder.last().expect("non-empty").deepened();
        ladder.push(next);
    }
    ladder
}
