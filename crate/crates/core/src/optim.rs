use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Ev3Error, Result};
use crate::model::{ParamKey, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Ev3Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        match self.kind {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Momentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum must be in [0, 1), got {momentum}"))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad(format!("adam needs betas in [0, 1) and eps > 0, got {beta1}, {beta2}, {eps}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for OptimizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(lr={})", self.kind.name(), self.learning_rate)
    }
}

/// An optimizer together with its accumulated moments.
///
/// Moments are created lazily per key, so a network that grows new blocks
/// starts those blocks from zero state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    steps: u64,
    first: BTreeMap<ParamKey, Tensor>,
    second: BTreeMap<ParamKey, Tensor>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn reset(&mut self) {
        self.steps = 0;
        self.first.clear();
        self.second.clear();
    }

    /// Returns updated parameters; `params` itself is left untouched.
    pub fn step(&mut self, params: &ParameterSet, grads: &ParameterSet) -> Result<ParameterSet> {
        if !params.same_keys(grads) {
            return Err(Ev3Error::Contract(
                "gradient keys or shapes differ from parameter keys".into(),
            ));
        }
        self.steps += 1;
        let lr = self.spec.learning_rate;
        let mut out = ParameterSet::new();
        for ((key, p), (_, g)) in params.iter().zip(grads.iter()) {
            let (rows, cols) = p.shape();
            let updated: Vec<f64> = match self.spec.kind {
                OptimizerKind::Sgd => p.values().iter().zip(g.values()).map(|(p, g)| p - lr * g).collect(),
                OptimizerKind::Momentum { momentum } => {
                    let v = self.first.entry(*key).or_insert_with(|| Tensor::zeros(rows, cols));
                    let mut next = Vec::with_capacity(p.len());
                    for ((vi, &pi), &gi) in v.values_mut().iter_mut().zip(p.values()).zip(g.values()) {
                        *vi = momentum * *vi + gi;
                        next.push(pi - lr * *vi);
                    }
                    next
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first.entry(*key).or_insert_with(|| Tensor::zeros(rows, cols));
                    let v = self.second.entry(*key).or_insert_with(|| Tensor::zeros(rows, cols));
                    let mut next = Vec::with_capacity(p.len());
                    for (((mi, vi), &pi), &gi) in m
                        .values_mut()
                        .iter_mut()
                        .zip(v.values_mut().iter_mut())
                        .zip(p.values())
                        .zip(g.values())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        next.push(pi - lr * m_hat / (v_hat.sqrt() + eps));
                    }
                    next
                }
            };
            out.insert(*key, Tensor::from_vec_unchecked(rows, cols, updated));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(ParamKey::HeadBias, Tensor::scalar(v));
        p
    }

    fn value(p: &ParameterSet) -> f64 {
        p.get(&ParamKey::HeadBias).unwrap().item().unwrap()
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
        })
        .unwrap();
        let p = scalar_set(1.0);
        let next = opt.step(&p, &scalar_set(2.0)).unwrap();
        assert!((value(&next) - 0.8).abs() < 1e-15);
        assert_eq!(value(&p), 1.0);
        assert_eq!(opt.step(&p, &scalar_set(0.0)).unwrap(), p);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut opt = Optimizer::new(OptimizerSpec {
            kind: OptimizerKind::adam(),
            learning_rate: 0.01,
        })
        .unwrap();
        let p = scalar_set(-0.3);
        assert_eq!(opt.step(&p, &scalar_set(0.0)).unwrap(), p);
    }

    #[test]
    fn adam_matches_hand_iterated_recurrence() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let mut opt = Optimizer::new(OptimizerSpec {
            kind: OptimizerKind::Adam { beta1: b1, beta2: b2, eps },
            learning_rate: lr,
        })
        .unwrap();
        // minimize f(x) = (x - 3)^2 from x = 0
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut p = scalar_set(0.0);
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let grad = 2.0 * (value(&p) - 3.0);
            p = opt.step(&p, &scalar_set(grad)).unwrap();
            assert!((value(&p) - x).abs() <= 1e-12, "step {t}: {} vs {x}", value(&p));
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerSpec {
            kind: OptimizerKind::Momentum { momentum: 0.5 },
            learning_rate: 1.0,
        })
        .unwrap();
        let p = opt.step(&scalar_set(0.0), &scalar_set(1.0)).unwrap();
        assert_eq!(value(&p), -1.0);
        let p = opt.step(&p, &scalar_set(1.0)).unwrap();
        assert_eq!(value(&p), -2.5);
    }

    #[test]
    fn key_mismatch_and_bad_hyperparameters() {
        let mut opt = Optimizer::new(OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
        })
        .unwrap();
        let mut g = ParameterSet::new();
        g.insert(ParamKey::HeadWeight, Tensor::scalar(1.0));
        assert!(opt.step(&scalar_set(0.0), &g).is_err());

        for kind in [
            OptimizerKind::Momentum { momentum: 1.0 },
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 1.0,
                eps: 1e-8,
            },
        ] {
            assert!(Optimizer::new(OptimizerSpec { kind, learning_rate: 0.1 }).is_err());
        }
        assert!(Optimizer::new(OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate: -1.0
        })
        .is_err());
    }
}
