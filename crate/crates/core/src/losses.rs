//! Training objectives and the accuracy metric.
//!
//! Distillation never sees labels: [`Objective::Distill`] carries only the
//! teacher's logits. Labels enter through [`Objective::CrossEntropy`] (used
//! for teacher training) and through [`evaluate_on`].

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Ev3Error, Result};
use crate::model::{forward, record_forward, GraphSpec, ParameterSet};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TeacherId(pub String);

impl TeacherId {
    pub const ORIGINAL: &'static str = "teacher";

    pub fn original() -> Self {
        TeacherId(Self::ORIGINAL.to_string())
    }
}

impl fmt::Display for TeacherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    Distill { temperature: f64, teacher: TeacherId },
    CrossEntropy,
}

impl LossSpec {
    pub fn distill(teacher: TeacherId) -> Self {
        LossSpec::Distill {
            temperature: DEFAULT_TEMPERATURE,
            teacher,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Distill { temperature, .. } if !(*temperature > 0.0 && temperature.is_finite()) => Err(
                Ev3Error::Config(format!("distillation temperature must be positive, got {temperature}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn teacher(&self) -> Option<&TeacherId> {
        match self {
            LossSpec::Distill { teacher, .. } => Some(teacher),
            LossSpec::CrossEntropy => None,
        }
    }
}

/// What a gradient step is taken against.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Distill { teacher_logits: &'a Tensor, temperature: f64 },
    CrossEntropy { labels: &'a [usize] },
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Ev3Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Ev3Error::Contract(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Ev3Error::dim("labels", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Ev3Error::Data(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// `tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))` for each row.
pub fn kd_loss_per_example(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    check_same_shape("kd_loss", student, teacher)?;
    check_temperature(temperature)?;
    let inv = 1.0 / temperature;
    let ls = student.scale(inv).log_softmax();
    let lt = teacher.scale(inv).log_softmax();
    let t2 = temperature * temperature;
    Ok((0..student.rows())
        .map(|r| {
            let kl: f64 = lt
                .row(r)
                .iter()
                .zip(ls.row(r))
                .map(|(&t, &s)| t.exp() * (t - s))
                .sum();
            (t2 * kl).max(0.0)
        })
        .collect())
}

/// Batch-mean distillation loss. Takes no labels.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    let per = kd_loss_per_example(student, teacher, temperature)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Records the distillation loss on `tape`; the teacher is a constant.
pub fn record_kd_loss(tape: &mut Tape, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    check_same_shape("kd_loss", tape.value(student), teacher)?;
    check_temperature(temperature)?;
    let inv = 1.0 / temperature;
    let n = teacher.rows() as f64;
    let k = temperature * temperature / n;
    let lt = teacher.scale(inv).log_softmax();
    let pt = lt.map(f64::exp);
    // sum(p_t * log p_t) is constant; only the cross term carries gradient.
    let neg_entropy = lt.mul(&pt)?.sum();
    let scaled = tape.scale(student, inv);
    let ls = tape.log_softmax(scaled);
    let cross = tape.mul_const(ls, pt)?;
    let cross = tape.sum(cross);
    let loss = tape.scale(cross, -k);
    Ok(tape.add_scalar(loss, k * neg_entropy))
}

/// Mean negative log-likelihood of `labels`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let per = ce_loss_per_example(logits, labels)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn ce_loss_per_example(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let ls = logits.log_softmax();
    Ok(labels.iter().enumerate().map(|(i, &l)| -ls.get(i, l)).collect())
}

pub fn record_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = tape.value(logits).shape();
    check_labels(labels, rows, cols)?;
    let onehot = Tensor::from_fn(rows, cols, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
    let ls = tape.log_softmax(logits);
    let picked = tape.mul_const(ls, onehot)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Loss value and parameter gradients of `objective` on one batch.
pub fn loss_and_grad(
    spec: &GraphSpec,
    params: &ParameterSet,
    inputs: &Tensor,
    objective: Objective<'_>,
) -> Result<(f64, ParameterSet)> {
    let mut tape = Tape::new();
    let (logits, leaves) = record_forward(&mut tape, spec, params, inputs)?;
    let loss = match objective {
        Objective::Distill {
            teacher_logits,
            temperature,
        } => record_kd_loss(&mut tape, logits, teacher_logits, temperature)?,
        Objective::CrossEntropy { labels } => record_ce_loss(&mut tape, logits, labels)?,
    };
    let value = tape.value(loss).item().expect("scalar loss");
    let mut grads = tape.backward(loss)?;
    let mut out = ParameterSet::new();
    for (key, var) in leaves {
        out.insert(key, grads.take(var));
    }
    Ok((value, out))
}

/// Per-example correctness of an argmax classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    per_example: Vec<bool>,
    correct: usize,
}

impl EvalRecord {
    pub fn from_outcomes(per_example: Vec<bool>) -> Self {
        let correct = per_example.iter().filter(|&&b| b).count();
        Self { per_example, correct }
    }

    /// Summary-only record (no per-example bits), e.g. parsed back from a trace.
    pub fn from_counts(n: usize, correct: usize) -> Result<Self> {
        if correct > n || n == 0 {
            return Err(Ev3Error::Contract(format!("invalid counts {correct}/{n}")));
        }
        let mut per_example = vec![false; n];
        per_example[..correct].iter_mut().for_each(|b| *b = true);
        Ok(Self { per_example, correct })
    }

    pub fn n(&self) -> usize {
        self.per_example.len()
    }

    pub fn correct(&self) -> usize {
        self.correct
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.per_example.len() as f64
    }

    pub fn error(&self) -> f64 {
        1.0 - self.accuracy()
    }

    pub fn per_example(&self) -> &[bool] {
        &self.per_example
    }
}

/// Accuracy of argmax predictions; ties go to the lowest class index.
pub fn evaluate_on(spec: &GraphSpec, params: &ParameterSet, inputs: &Tensor, labels: &[usize]) -> Result<EvalRecord> {
    if labels.is_empty() {
        return Err(Ev3Error::Contract("evaluation batch is empty".into()));
    }
    let logits = forward(spec, params, inputs)?;
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(EvalRecord::from_outcomes(
        logits
            .argmax_rows()
            .into_iter()
            .zip(labels)
            .map(|(p, &l)| p == l)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use crate::model::{init_params, ParamKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn kd_zero_when_logits_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random(&mut rng, 6, 5);
        assert_eq!(kd_loss(&t, &t, 4.0).unwrap(), 0.0);
        let mut tape = Tape::new();
        let s = tape.leaf(t.clone());
        let l = record_kd_loss(&mut tape, s, &t, 4.0).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));
    }

    #[test]
    fn kd_two_class_hand_value() {
        let teacher = Tensor::new(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let student = Tensor::new(1, 2, vec![0.0, 0.0]).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((expected - 0.13081).abs() < 1e-5);
        assert!((kd_loss(&student, &teacher, 1.0).unwrap() - expected).abs() < 1e-14);
        let mut tape = Tape::new();
        let s = tape.leaf(student);
        let l = record_kd_loss(&mut tape, s, &teacher, 1.0).unwrap();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn kd_rejects_bad_input() {
        let a = Tensor::zeros(2, 3);
        assert!(kd_loss(&a, &Tensor::zeros(2, 4), 1.0).is_err());
        assert!(kd_loss(&a, &a, 0.0).is_err());
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let student = random(&mut rng, 4, 3);
        let teacher = random(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let s = tape.leaf(student.clone());
        let l = record_kd_loss(&mut tape, s, &teacher, 2.5).unwrap();
        let g = tape.backward(l).unwrap().get(s);

        let mut ps = ParameterSet::new();
        ps.insert(ParamKey::HeadWeight, student);
        let fd = finite_diff_grad(
            |p| kd_loss(p.get(&ParamKey::HeadWeight).unwrap(), &teacher, 2.5).unwrap(),
            &ps,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.values().iter().zip(fd.get(&ParamKey::HeadWeight).unwrap().values()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn ce_cases() {
        let uniform = Tensor::zeros(3, 5);
        assert!((ce_loss(&uniform, &[0, 2, 4]).unwrap() - 5f64.ln()).abs() < 1e-14);

        let confident = Tensor::new(1, 3, vec![0.0, 1e3, 0.0]).unwrap();
        assert!(ce_loss(&confident, &[1]).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&mut rng, 7, 4);
        let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
        let direct = {
            let mut acc = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                let row = logits.row(i);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                acc += row[l] - lse;
            }
            -acc / 7.0
        };
        assert!((ce_loss(&logits, &labels).unwrap() - direct).abs() <= 1e-12);

        let mut tape = Tape::new();
        let lv = tape.leaf(logits.clone());
        let l = record_ce_loss(&mut tape, lv, &labels).unwrap();
        assert!((tape.value(l).item().unwrap() - direct).abs() <= 1e-12);

        assert!(matches!(ce_loss(&logits, &[9; 7]), Err(Ev3Error::Data(_))));
    }

    fn constant_class_model(class: usize) -> (GraphSpec, ParameterSet) {
        let spec = GraphSpec::from_pairs(2, 3, &[(2, 1)]).unwrap();
        let mut p = init_params(&spec, 0);
        p.insert(ParamKey::HeadWeight, Tensor::zeros(2, 3));
        let mut bias = vec![0.0; 3];
        bias[class] = 1.0;
        p.insert(ParamKey::HeadBias, Tensor::new(1, 3, bias).unwrap());
        (spec, p)
    }

    #[test]
    fn evaluate_constant_predictor() {
        let (spec, p) = constant_class_model(0);
        let x = Tensor::from_fn(10, 2, |r, c| (r + c) as f64);
        assert_eq!(evaluate_on(&spec, &p, &x, &[0; 10]).unwrap().accuracy(), 1.0);
        assert_eq!(evaluate_on(&spec, &p, &x, &[1; 10]).unwrap().accuracy(), 0.0);
    }

    #[test]
    fn evaluate_tie_goes_to_lowest_class() {
        let spec = GraphSpec::from_pairs(2, 3, &[(2, 1)]).unwrap();
        let mut p = init_params(&spec, 0);
        p.insert(ParamKey::HeadWeight, Tensor::zeros(2, 3));
        p.insert(ParamKey::HeadBias, Tensor::new(1, 3, vec![0.0, 2.0, 2.0]).unwrap());
        let x = Tensor::zeros(4, 2);
        let rec = evaluate_on(&spec, &p, &x, &[1, 1, 2, 0]).unwrap();
        assert_eq!(rec.per_example(), &[true, true, false, false]);
        assert_eq!(rec.correct(), 2);
        assert!(evaluate_on(&spec, &p, &x, &[]).is_err());
    }

    #[test]
    fn objective_gradients_cover_every_parameter() {
        let spec = GraphSpec::from_pairs(3, 4, &[(5, 1), (4, 1)]).unwrap();
        let p = init_params(&spec, 8);
        let x = Tensor::from_fn(6, 3, |r, c| ((r * 3 + c) as f64).cos());
        let (loss, g) = loss_and_grad(&spec, &p, &x, Objective::CrossEntropy { labels: &[0, 1, 2, 3, 0, 1] }).unwrap();
        assert!(loss > 0.0);
        assert!(g.same_keys(&p));
    }

    proptest::proptest! {
        #[test]
        fn kd_is_non_negative(
            s in proptest::collection::vec(-5.0f64..5.0, 8),
            t in proptest::collection::vec(-5.0f64..5.0, 8),
            tau in 0.5f64..8.0,
        ) {
            let s = Tensor::new(2, 4, s).unwrap();
            let t = Tensor::new(2, 4, t).unwrap();
            proptest::prop_assert!(kd_loss(&s, &t, tau).unwrap() >= 0.0);
        }

        #[test]
        fn accuracy_is_mean_of_outcomes(bits in proptest::collection::vec(proptest::bool::ANY, 1..200)) {
            let rec = EvalRecord::from_outcomes(bits.clone());
            let mean = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
            proptest::prop_assert_eq!(rec.accuracy(), mean);
        }
    }
}
