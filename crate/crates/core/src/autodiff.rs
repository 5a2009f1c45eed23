//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] walks it in reverse from a scalar output node
//! and accumulates gradients for every node. Tapes are rebuilt for every
//! forward pass and never shared between threads.

use crate::error::{Ev3Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LogSoftmax(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; a zero tensor if the output does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.is_finite(), "non-finite activation from {op:?}");
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Broadcast-adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(a, bias), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Elementwise product with a tensor that receives no gradient.
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var> {
        let out = self.value(a).mul(&k)?;
        Ok(self.push(Op::MulConst(a, k), out))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(Op::AddScalar(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(Op::Relu(a), out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).log_softmax();
        self.push(Op::LogSoftmax(a), out)
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Ev3Error::Contract(format!(
                "backward needs a scalar output, got {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, k) => accumulate(&mut grads, *a, g.mul(k)?),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    // dx = dy - softmax(x) * rowsum(dy)
                    let y = &node.value;
                    let cols = y.cols();
                    let mut out = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let gy = g.row(r);
                        let total: f64 = gy.iter().sum();
                        out.extend(
                            gy.iter()
                                .zip(y.row(r))
                                .map(|(&gv, &lv)| gv - lv.exp() * total),
                        );
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::from_vec_unchecked(y.rows(), cols, out),
                    );
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let gv = g.item().expect("sum gradient is scalar");
                    accumulate(&mut grads, *a, Tensor::from_vec_unchecked(r, c, vec![gv; r * c]));
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
    match &mut grads[target.0] {
        Some(existing) => existing.add_in_place(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad(
    f: impl Fn(&ParameterSet) -> f64,
    params: &ParameterSet,
    h: f64,
) -> Result<ParameterSet> {
    if !(h > 0.0) {
        return Err(Ev3Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for key in params.keys().copied().collect::<Vec<_>>() {
        let n = params.get(&key).expect("key from params").len();
        for i in 0..n {
            let orig = params.get(&key).expect("key").values()[i];
            probe.get_mut(&key).expect("key").values_mut()[i] = orig + h;
            let up = f(&probe);
            probe.get_mut(&key).expect("key").values_mut()[i] = orig - h;
            let down = f(&probe);
            probe.get_mut(&key).expect("key").values_mut()[i] = orig;
            grad.get_mut(&key).expect("key").values_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKey;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), Some(6.0));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.scale(x, 5.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(c), Tensor::zeros(2, 2));
        assert_eq!(grads.get(x).item(), Some(5.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 1));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Ev3Error::Contract(_))));
    }

    fn sum_relu_wv(w: &Tensor, v: &Tensor) -> f64 {
        w.matmul(v).unwrap().relu().sum()
    }

    #[test]
    fn sum_relu_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0));
        let v = Tensor::from_fn(3, 1, |_, _| rng.gen_range(-2.0..2.0));

        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let vv = tape.leaf(v.clone());
        let p = tape.matmul(wv, vv).unwrap();
        let r = tape.relu(p);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap().get(wv);

        let mut params = ParameterSet::new();
        params.insert(ParamKey::HeadWeight, w);
        let fd = finite_diff_grad(
            |ps| sum_relu_wv(ps.get(&ParamKey::HeadWeight).unwrap(), &v),
            &params,
            1e-5,
        )
        .unwrap();
        let fd = fd.get(&ParamKey::HeadWeight).unwrap();
        for (a, b) in g.values().iter().zip(fd.values()) {
            let scale = a.abs().max(b.abs());
            assert!((a - b).abs() <= 1e-4 * scale.max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn finite_diff_exact_on_linear_and_quadratic() {
        let mut params = ParameterSet::new();
        params.insert(ParamKey::HeadBias, Tensor::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let lin = finite_diff_grad(
            |ps| {
                let v = ps.get(&ParamKey::HeadBias).unwrap().values();
                3.0 * v[0] - 2.0 * v[1] + 0.25 * v[2]
            },
            &params,
            1e-3,
        )
        .unwrap();
        let lin = lin.get(&ParamKey::HeadBias).unwrap().values().to_vec();
        for (g, e) in lin.iter().zip([3.0, -2.0, 0.25]) {
            assert!((g - e).abs() < 1e-10);
        }
        let quad = finite_diff_grad(
            |ps| ps.get(&ParamKey::HeadBias).unwrap().values().iter().map(|v| v * v).sum(),
            &params,
            1e-3,
        )
        .unwrap();
        for (g, v) in quad
            .get(&ParamKey::HeadBias)
            .unwrap()
            .values()
            .iter()
            .zip([0.5, -1.0, 2.0])
        {
            // central differences are exact for quadratics up to rounding
            assert!((g - 2.0 * v).abs() < 1e-9);
        }
        assert!(finite_diff_grad(|_| 0.0, &params, 0.0).is_err());
    }

    #[test]
    fn replayed_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(6, 4, |_, _| rng.gen_range(-2.0..2.0)));
        let w = tape.leaf(Tensor::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0)));
        let h = tape.matmul(x, w).unwrap();
        let l = tape.log_softmax(h);
        let s = tape.sum(l);
        let a = tape.backward(s).unwrap().get(w);
        let b = tape.backward(s).unwrap().get(w);
        assert_eq!(a.values(), b.values());
    }
}
