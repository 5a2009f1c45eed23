//! The explore-assess-adapt loop.
//!
//! One iteration proposes a candidate per [`Arm`] from the current
//! parameters, scores every candidate and the current parameters on one
//! fresh i.i.d. assessment batch, then lets [`adapt`] accept or reject the
//! winner, maintain the best-so-far [`Snapshot`] and grow the network when
//! the snapshot has stopped improving for `patience` iterations.
//!
//! Randomness comes from substreams keyed by `(seed, pass, t, arm)`, so
//! running arms in parallel gives the same result as running them in order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{evaluate, sample_iid, Batch, BoostContext, BoostedSampler, Split, SplitKind};
use crate::error::{Ev3Error, Result};
use crate::losses::{loss_and_grad, EvalRecord, LossSpec, Objective, TeacherId};
use crate::model::{forward, init_params, param_count, GraphSpec, ParameterSet};
use crate::morphism::deepen_with_noise;
use crate::optim::{Optimizer, OptimizerSpec};
use crate::rng::{derive_seed, substream};
use crate::stats::z_test;
use crate::tensor::Tensor;

const TAG_INIT: u64 = 1;
const TAG_EXPLORE: u64 = 2;
const TAG_ASSESS: u64 = 3;
const TAG_EXPAND: u64 = 4;
const TAG_START: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Iid,
    Boosted,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Iid => "iid",
            SamplerKind::Boosted => "boosted",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Ev3Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(SamplerKind::Iid),
            "boosted" => Ok(SamplerKind::Boosted),
            other => Err(Ev3Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// One way of proposing an update: a loss (and teacher), an optimizer and a
/// gradient-batch sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub sampler: SamplerKind,
    pub steps_per_iteration: usize,
}

impl Arm {
    pub fn teacher_id(&self) -> Option<&TeacherId> {
        self.loss.teacher()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_iteration == 0 {
            return Err(Ev3Error::Config("arm steps_per_iteration must be at least 1".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }

    /// Same arm distilling from `teacher`.
    pub fn with_teacher(&self, teacher: TeacherId) -> Arm {
        let loss = match &self.loss {
            LossSpec::Distill { temperature, .. } => LossSpec::Distill {
                temperature: *temperature,
                teacher,
            },
            LossSpec::CrossEntropy => LossSpec::distill(teacher),
        };
        Arm { loss, ..self.clone() }
    }
}

/// Teacher logits, row-aligned with the training split.
#[derive(Clone, Debug, Default)]
pub struct TeacherRegistry {
    logits: BTreeMap<TeacherId, Tensor>,
}

impl TeacherRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: TeacherId, logits: Tensor) {
        self.logits.insert(id, logits);
    }

    /// Registers a model as a teacher by running it over `train`.
    pub fn insert_model(&mut self, id: TeacherId, spec: &GraphSpec, params: &ParameterSet, train: &Split) -> Result<()> {
        let logits = forward(spec, params, &train.features)?;
        self.insert(id, logits);
        Ok(())
    }

    pub fn get(&self, id: &TeacherId) -> Result<&Tensor> {
        self.logits
            .get(id)
            .ok_or_else(|| Ev3Error::UnknownTeacher(id.to_string()))
    }

    pub fn contains(&self, id: &TeacherId) -> bool {
        self.logits.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// The data an engine run may touch. There is no test split here.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub train: &'a Split,
    /// Validation split by default; the training split when assessing on train.
    pub assess: &'a Split,
    pub teachers: &'a TeacherRegistry,
    pub grad_batch_size: usize,
    pub parallel: bool,
}

impl<'a> Env<'a> {
    pub fn new(train: &'a Split, assess: &'a Split, teachers: &'a TeacherRegistry, grad_batch_size: usize) -> Result<Self> {
        if train.kind != SplitKind::Train {
            return Err(Ev3Error::Contract(format!("explore needs the train split, got {}", train.kind)));
        }
        if assess.kind == SplitKind::Test {
            return Err(Ev3Error::Contract("the test split cannot be used for assessment".into()));
        }
        if grad_batch_size == 0 {
            return Err(Ev3Error::Config("gradient batch size must be positive".into()));
        }
        for (id, logits) in &teachers.logits {
            if logits.rows() != train.len() {
                return Err(Ev3Error::dim(
                    "teacher registry",
                    format!("teacher {id} has {} rows for {} train examples", logits.rows(), train.len()),
                ));
            }
        }
        Ok(Self {
            train,
            assess,
            teachers,
            grad_batch_size,
            parallel: false,
        })
    }

    pub fn with_parallel(self, parallel: bool) -> Self {
        Self { parallel, ..self }
    }

    fn check_assess_batch(&self, batch: &Batch) -> Result<()> {
        if batch.origin == SplitKind::Test || batch.origin != self.assess.kind {
            return Err(Ev3Error::Contract(format!(
                "assessment expects a {} batch, got a {} batch",
                self.assess.kind, batch.origin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ev3Config {
    pub base: GraphSpec,
    /// Largest total block count the run may grow to.
    pub max_depth: usize,
    pub arms: Vec<Arm>,
    pub patience: usize,
    pub confidence: f64,
    /// Iteration cap per pass.
    pub max_iterations: usize,
    /// Optimizer-step cap per pass, charged per arm.
    pub step_budget: Option<u64>,
    pub assess_batch_size: usize,
    pub passes: usize,
    /// Standard deviation of noise on new output projections; 0 keeps expansion exact.
    pub expansion_noise: f64,
    pub seed: u64,
}

impl Ev3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Ev3Error::Config(m));
        self.base.validate()?;
        if self.arms.is_empty() {
            return bad("at least one explore arm is required".into());
        }
        for arm in &self.arms {
            arm.validate()?;
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.confidence > 0.5 && self.confidence < 1.0) {
            return bad(format!("confidence must lie in (0.5, 1), got {}", self.confidence));
        }
        if self.assess_batch_size == 0 {
            return bad("assessment batch size must be positive".into());
        }
        if self.passes == 0 {
            return bad("passes must be at least 1".into());
        }
        if !(self.expansion_noise >= 0.0 && self.expansion_noise.is_finite()) {
            return bad(format!("expansion noise must be >= 0, got {}", self.expansion_noise));
        }
        let (base, stages) = (self.base.depth(), self.base.stages.len());
        if self.max_depth < base || !(self.max_depth - base).is_multiple_of(stages) {
            return bad(format!(
                "max depth {} is not reachable from depth {base} in steps of {stages}",
                self.max_depth
            ));
        }
        Ok(())
    }

    pub fn iteration_cost(arms: &[Arm]) -> u64 {
        arms.iter().map(|a| a.steps_per_iteration as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateUpdate {
    pub arm_id: usize,
    pub params: ParameterSet,
    pub eval: Option<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub spec: GraphSpec,
    pub params: ParameterSet,
    pub eval: EvalRecord,
    /// Positions in the assessment split the eval was measured on.
    pub batch: Vec<usize>,
    pub created_at: usize,
}

/// Errors of one parameter set as seen by the harness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportedErrors {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl ReportedErrors {
    pub const UNKNOWN: ReportedErrors = ReportedErrors {
        train: f64::NAN,
        val: f64::NAN,
        test: f64::NAN,
    };
}

/// Observes `params_current` after every adapt. The engine never reads the
/// result back, so whatever a reporter measures cannot steer a run.
pub trait Reporter {
    fn report(&mut self, spec: &GraphSpec, params: &ParameterSet) -> Result<ReportedErrors>;
}

pub struct NoReport;

impl Reporter for NoReport {
    fn report(&mut self, _: &GraphSpec, _: &ParameterSet) -> Result<ReportedErrors> {
        Ok(ReportedErrors::UNKNOWN)
    }
}

impl<F> Reporter for F
where
    F: FnMut(&GraphSpec, &ParameterSet) -> Result<ReportedErrors>,
{
    fn report(&mut self, spec: &GraphSpec, params: &ParameterSet) -> Result<ReportedErrors> {
        self(spec, params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub pass: usize,
    pub t: usize,
    /// Depth after this iteration, including any expansion.
    pub depth: usize,
    pub param_count: usize,
    pub arm_id: usize,
    pub accepted: bool,
    pub snapshot_updated: bool,
    pub expanded: bool,
    pub cum_steps: u64,
    pub assess_n: usize,
    /// Assessment error of the parameters kept by the accept/reject rule.
    pub assess_err: f64,
    /// Assessment error of the parameters held before this iteration.
    pub prev_assess_err: f64,
    /// Stored assessment error of the snapshot after this iteration.
    pub snap_err: f64,
    pub errors: ReportedErrors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptOutcome {
    pub accepted: bool,
    pub snapshot_updated: bool,
    pub expanded: bool,
}

#[derive(Clone, Debug)]
pub struct EV3State {
    /// Global iteration counter across passes.
    pub t: usize,
    pub spec: GraphSpec,
    pub params_current: ParameterSet,
    pub snapshot: Snapshot,
    pub patience_counter: usize,
    pub size_collection: BTreeMap<usize, Snapshot>,
    pub pass_index: usize,
    pub cum_steps: u64,
    pub trace: Vec<IterationRecord>,
    optimizers: Vec<Optimizer>,
    last_errors: ReportedErrors,
}

impl EV3State {
    /// Fresh state: initialized base network, snapshot measured on a fresh
    /// assessment batch.
    pub fn initial(config: &Ev3Config, env: &Env<'_>) -> Result<Self> {
        config.validate()?;
        let spec = config.base.clone();
        let params = init_params(&spec, derive_seed(config.seed, &[TAG_INIT]));
        let mut rng = substream(config.seed, &[TAG_START, 1]);
        let batch = sample_iid(env.assess, config.assess_batch_size, &mut rng)?;
        env.check_assess_batch(&batch)?;
        let snapshot = Snapshot {
            spec: spec.clone(),
            params: params.clone(),
            eval: evaluate(&spec, &params, &batch)?,
            batch: batch.positions,
            created_at: 0,
        };
        let mut size_collection = BTreeMap::new();
        size_collection.insert(spec.depth(), snapshot.clone());
        Ok(Self {
            t: 0,
            spec,
            params_current: params,
            snapshot,
            patience_counter: 0,
            size_collection,
            pass_index: 1,
            cum_steps: 0,
            trace: Vec::new(),
            optimizers: Vec::new(),
            last_errors: ReportedErrors::UNKNOWN,
        })
    }

    fn sync_optimizers(&mut self, arms: &[Arm]) -> Result<()> {
        let matches = self.optimizers.len() == arms.len()
            && self.optimizers.iter().zip(arms).all(|(o, a)| *o.spec() == a.optimizer);
        if !matches {
            self.optimizers = arms.iter().map(|a| Optimizer::new(a.optimizer)).collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Keeps `snap` as the collection entry for its depth if it beats the
    /// stored one (or the depth is new).
    fn offer_to_collection(&mut self, snap: &Snapshot) {
        let depth = snap.spec.depth();
        let better = self
            .size_collection
            .get(&depth)
            .is_none_or(|old| snap.eval.accuracy() > old.eval.accuracy());
        if better {
            self.size_collection.insert(depth, snap.clone());
        }
    }
}

/// Runs one arm's optimizer steps from `start`.
pub fn explore_arm(
    spec: &GraphSpec,
    start: &ParameterSet,
    arm: &Arm,
    optimizer: &mut Optimizer,
    env: &Env<'_>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ParameterSet> {
    let teacher = match arm.teacher_id() {
        Some(id) => Some(env.teachers.get(id)?),
        None => None,
    };
    let boosted = match arm.sampler {
        SamplerKind::Boosted => {
            let ctx = BoostContext {
                spec,
                params: start,
                loss: &arm.loss,
                teacher_logits: teacher,
            };
            Some(BoostedSampler::fit(env.train, &ctx, rng)?)
        }
        SamplerKind::Iid => None,
    };
    let mut params = start.clone();
    for _ in 0..arm.steps_per_iteration {
        let batch = match &boosted {
            Some(s) => s.sample(env.train, env.grad_batch_size, rng)?,
            None => sample_iid(env.train, env.grad_batch_size, rng)?,
        };
        if batch.origin != SplitKind::Train {
            return Err(Ev3Error::Contract(format!("explore drew a {} batch", batch.origin)));
        }
        let (_, grads) = match (&arm.loss, teacher) {
            (LossSpec::Distill { temperature, .. }, Some(logits)) => {
                let teacher_logits = logits.gather_rows(&batch.positions);
                let objective = Objective::Distill {
                    teacher_logits: &teacher_logits,
                    temperature: *temperature,
                };
                loss_and_grad(spec, &params, &batch.features, objective)?
            }
            (LossSpec::CrossEntropy, _) => loss_and_grad(
                spec,
                &params,
                &batch.features,
                Objective::CrossEntropy { labels: &batch.labels },
            )?,
            (LossSpec::Distill { teacher, .. }, None) => return Err(Ev3Error::UnknownTeacher(teacher.to_string())),
        };
        params = optimizer.step(&params, &grads)?;
    }
    Ok(params)
}

/// Proposes one candidate per arm; `params_current` is left untouched.
pub fn explore(state: &mut EV3State, arms: &[Arm], seed: u64, env: &Env<'_>) -> Result<Vec<CandidateUpdate>> {
    if arms.is_empty() {
        return Err(Ev3Error::Contract("explore needs at least one arm".into()));
    }
    state.sync_optimizers(arms)?;
    let (pass, t) = (state.pass_index as u64, state.t as u64);
    let EV3State {
        spec,
        params_current,
        optimizers,
        ..
    } = state;
    let (spec, start) = (&*spec, &*params_current);
    let run_one = |(i, (arm, opt)): (usize, (&Arm, &mut Optimizer))| -> Result<CandidateUpdate> {
        let mut rng = substream(seed, &[TAG_EXPLORE, pass, t, i as u64]);
        let params = explore_arm(spec, start, arm, opt, env, &mut rng)?;
        Ok(CandidateUpdate {
            arm_id: i,
            params,
            eval: None,
        })
    };
    let jobs: Vec<_> = arms.iter().zip(optimizers.iter_mut()).enumerate().collect();
    let out: Vec<Result<CandidateUpdate>> = if env.parallel {
        jobs.into_par_iter().map(run_one).collect()
    } else {
        jobs.into_iter().map(run_one).collect()
    };
    state.cum_steps += Ev3Config::iteration_cost(arms);
    out.into_iter().collect()
}

/// Index of the most accurate record; ties go to the lower index.
pub fn select_best(evals: &[&EvalRecord]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in evals.iter().enumerate() {
        if best.is_none_or(|b| e.correct() * evals[b].n() > evals[b].correct() * e.n()) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Ev3Error::Contract("assess needs at least one candidate".into()))
}

/// Evaluates every candidate on the same batch and returns the winner's index.
pub fn assess(
    spec: &GraphSpec,
    mut candidates: Vec<CandidateUpdate>,
    batch: &Batch,
    env: &Env<'_>,
) -> Result<(usize, Vec<CandidateUpdate>)> {
    env.check_assess_batch(batch)?;
    if candidates.is_empty() {
        return Err(Ev3Error::Contract("assess needs at least one candidate".into()));
    }
    let evals: Vec<Result<EvalRecord>> = if env.parallel {
        candidates.par_iter().map(|c| evaluate(spec, &c.params, batch)).collect()
    } else {
        candidates.iter().map(|c| evaluate(spec, &c.params, batch)).collect()
    };
    for (c, e) in candidates.iter_mut().zip(evals) {
        c.eval = Some(e?);
    }
    let refs: Vec<&EvalRecord> = candidates.iter().map(|c| c.eval.as_ref().expect("filled")).collect();
    let best = select_best(&refs)?;
    Ok((best, candidates))
}

/// Accept/reject, snapshot maintenance, expansion, then bookkeeping.
///
/// `current_eval` is `params_current` measured on `batch`, the same batch
/// `best` was assessed on.
pub fn adapt(
    state: &mut EV3State,
    best: CandidateUpdate,
    current_eval: &EvalRecord,
    batch: &Batch,
    config: &Ev3Config,
    env: &Env<'_>,
    reporter: &mut dyn Reporter,
) -> Result<AdaptOutcome> {
    env.check_assess_batch(batch)?;
    let best_eval = best
        .eval
        .clone()
        .ok_or_else(|| Ev3Error::Contract("adapt needs an assessed candidate".into()))?;
    if best_eval.n() != batch.len() || current_eval.n() != batch.len() {
        return Err(Ev3Error::Contract("adapt records were not measured on the given batch".into()));
    }

    let rejected = z_test(current_eval, &best_eval, config.confidence)?.verdict.is_significant();
    let kept_eval = if rejected { current_eval } else { &best_eval };
    let kept_err = kept_eval.error();
    let snapshot_updated = z_test(&best_eval, &state.snapshot.eval, config.confidence)?
        .verdict
        .is_significant();
    if snapshot_updated {
        state.snapshot = Snapshot {
            spec: state.spec.clone(),
            params: best.params.clone(),
            eval: best_eval,
            batch: batch.positions.clone(),
            created_at: state.t,
        };
        state.patience_counter = 0;
        let snap = state.snapshot.clone();
        state.offer_to_collection(&snap);
    } else {
        state.patience_counter = (state.patience_counter + 1).min(config.patience);
    }
    if !rejected {
        state.params_current = best.params;
    }

    let mut expanded = false;
    if state.patience_counter >= config.patience && state.spec.depth() < config.max_depth {
        let seed = derive_seed(config.seed, &[TAG_EXPAND, state.pass_index as u64, state.t as u64]);
        let (spec, params) = deepen_with_noise(&state.snapshot.spec, &state.snapshot.params, seed, config.expansion_noise)?;
        let eval = evaluate(&spec, &params, &env.assess.batch(state.snapshot.batch.clone()))?;
        if config.expansion_noise == 0.0 && eval != state.snapshot.eval {
            return Err(Ev3Error::Contract("expansion changed the measured accuracy".into()));
        }
        state.snapshot = Snapshot {
            spec: spec.clone(),
            params: params.clone(),
            eval,
            batch: state.snapshot.batch.clone(),
            created_at: state.t,
        };
        let snap = state.snapshot.clone();
        state.offer_to_collection(&snap);
        state.spec = spec;
        state.params_current = params;
        state.patience_counter = 0;
        state.optimizers.iter_mut().for_each(Optimizer::reset);
        expanded = true;
    }

    if !rejected || expanded || state.trace.is_empty() {
        state.last_errors = reporter.report(&state.spec, &state.params_current)?;
    }
    state.trace.push(IterationRecord {
        pass: state.pass_index,
        t: state.t,
        depth: state.spec.depth(),
        param_count: param_count(&state.spec)?,
        arm_id: best.arm_id,
        accepted: !rejected,
        snapshot_updated,
        expanded,
        cum_steps: state.cum_steps,
        assess_n: batch.len(),
        assess_err: kept_err,
        prev_assess_err: current_eval.error(),
        snap_err: state.snapshot.eval.error(),
        errors: state.last_errors,
    });
    state.t += 1;
    Ok(AdaptOutcome {
        accepted: !rejected,
        snapshot_updated,
        expanded,
    })
}

/// One explore, assess, adapt round.
pub fn iterate(
    state: &mut EV3State,
    arms: &[Arm],
    config: &Ev3Config,
    env: &Env<'_>,
    reporter: &mut dyn Reporter,
) -> Result<AdaptOutcome> {
    let candidates = explore(state, arms, config.seed, env)?;
    let mut rng = substream(config.seed, &[TAG_ASSESS, state.pass_index as u64, state.t as u64]);
    let batch = sample_iid(env.assess, config.assess_batch_size, &mut rng)?;
    let current_eval = evaluate(&state.spec, &state.params_current, &batch)?;
    let (best, mut candidates) = assess(&state.spec, candidates, &batch, env)?;
    let best = candidates.swap_remove(best);
    adapt(state, best, &current_eval, &batch, config, env, reporter)
}

fn run_pass(state: &mut EV3State, arms: &[Arm], config: &Ev3Config, env: &Env<'_>, reporter: &mut dyn Reporter) -> Result<()> {
    let cost = Ev3Config::iteration_cost(arms);
    let mut spent = 0u64;
    for _ in 0..config.max_iterations {
        if config.step_budget.is_some_and(|b| spent + cost > b) {
            break;
        }
        iterate(state, arms, config, env, reporter)?;
        spent += cost;
    }
    Ok(())
}

fn check_teachers(arms: &[Arm], teachers: &TeacherRegistry) -> Result<()> {
    for id in arms.iter().filter_map(Arm::teacher_id) {
        teachers.get(id)?;
    }
    Ok(())
}

/// Single-pass EV3.
pub fn run(config: &Ev3Config, env: &Env<'_>, reporter: &mut dyn Reporter) -> Result<EV3State> {
    config.validate()?;
    check_teachers(&config.arms, env.teachers)?;
    let mut state = EV3State::initial(config, env)?;
    run_pass(&mut state, &config.arms, config, env, reporter)?;
    Ok(state)
}

pub fn snapshot_teacher_id(depth: usize) -> TeacherId {
    TeacherId(format!("snapshot_depth{depth}"))
}

/// Arms for a later student-as-teacher pass: the template on the original
/// teacher, then one clone per collected snapshot.
pub fn sat_arms(template: &Arm, collection: &BTreeMap<usize, Snapshot>) -> Vec<Arm> {
    let mut arms = vec![template.with_teacher(TeacherId::original())];
    arms.extend(collection.keys().map(|&d| template.with_teacher(snapshot_teacher_id(d))));
    arms
}

/// Multi-pass EV3 where later passes also distill from the collected
/// models. Pass 1 is exactly [`run`]; each later pass restarts from the best
/// base-depth snapshot and gets its own budget.
pub fn run_student_as_teacher(config: &Ev3Config, env: &Env<'_>, reporter: &mut dyn Reporter) -> Result<EV3State> {
    let mut state = run(config, env, reporter)?;
    let base_depth = config.base.depth();
    for pass in 2..=config.passes {
        let arms = sat_arms(&config.arms[0], &state.size_collection);
        let mut teachers = env.teachers.clone();
        for (&depth, snap) in &state.size_collection {
            teachers.insert_model(snapshot_teacher_id(depth), &snap.spec, &snap.params, env.train)?;
        }
        let pass_env = Env { teachers: &teachers, ..*env };
        check_teachers(&arms, &teachers)?;

        let start = state.size_collection[&base_depth].clone();
        state.pass_index = pass;
        state.spec = start.spec.clone();
        state.params_current = start.params.clone();
        state.snapshot = start;
        state.patience_counter = 0;
        state.optimizers.clear();
        state.last_errors = reporter.report(&state.spec, &state.params_current)?;
        run_pass(&mut state, &arms, config, &pass_env, reporter)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, split, DatasetKind, GeneratorConfig, SplitSpec};
    use crate::losses::kd_loss;
    use crate::optim::OptimizerKind;
    use proptest::prelude::*;

    struct Toy {
        train: Split,
        val: Split,
        test: Split,
        teachers: TeacherRegistry,
    }

    fn toy(classes: usize) -> Toy {
        let ds = gen_dataset(&GeneratorConfig {
            kind: DatasetKind::GaussianMixture,
            num_classes: classes,
            dim: 4,
            n: 600,
            noise: 0.6,
            clusters_per_class: 1,
            seed: 2,
        })
        .unwrap();
        let (train, val, test) = split(
            &ds,
            &SplitSpec {
                train: 0.6,
                val: 0.2,
                test: 0.2,
                seed: 3,
            },
        )
        .unwrap();
        let tspec = GraphSpec::from_pairs(4, classes, &[(12, 1)]).unwrap();
        let mut teachers = TeacherRegistry::new();
        teachers
            .insert_model(TeacherId::original(), &tspec, &init_params(&tspec, 99), &train)
            .unwrap();
        Toy {
            train,
            val,
            test,
            teachers,
        }
    }

    fn arm(lr: f64, steps: usize) -> Arm {
        Arm {
            loss: LossSpec::distill(TeacherId::original()),
            optimizer: OptimizerSpec {
                kind: OptimizerKind::adam(),
                learning_rate: lr,
            },
            sampler: SamplerKind::Iid,
            steps_per_iteration: steps,
        }
    }

    fn config(classes: usize) -> Ev3Config {
        Ev3Config {
            base: GraphSpec::from_pairs(4, classes, &[(6, 1), (6, 1)]).unwrap(),
            max_depth: 6,
            arms: vec![arm(0.01, 5)],
            patience: 3,
            confidence: 0.95,
            max_iterations: 12,
            step_budget: None,
            assess_batch_size: 64,
            passes: 1,
            expansion_noise: 0.0,
            seed: 17,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let mut cfg = config(3);
        cfg.arms = vec![Arm {
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Sgd,
                learning_rate: 0.0,
            },
            ..arm(0.0, 1)
        }];
        let mut state = EV3State::initial(&cfg, &env).unwrap();
        let before = state.params_current.clone();
        let c = explore(&mut state, &cfg.arms, cfg.seed, &env).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].params, before);
        assert_eq!(state.params_current, before);
    }

    #[test]
    fn identical_arms_and_streams_give_identical_candidates() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = config(3);
        let start = init_params(&cfg.base, 4);
        let a = arm(0.01, 7);
        let run = || {
            let mut opt = Optimizer::new(a.optimizer).unwrap();
            let mut rng = substream(5, &[1]);
            explore_arm(&cfg.base, &start, &a, &mut opt, &env, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kd_arm_descends_on_two_class_toy() {
        let toy = toy(2);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 32).unwrap();
        let spec = GraphSpec::from_pairs(4, 2, &[(6, 1)]).unwrap();
        let start = init_params(&spec, 1);
        let a = arm(0.01, 50);
        let teacher = toy.teachers.get(&TeacherId::original()).unwrap();
        let loss = |p: &ParameterSet| kd_loss(&forward(&spec, p, &toy.train.features).unwrap(), teacher, 4.0).unwrap();
        let mut opt = Optimizer::new(a.optimizer).unwrap();
        let after = explore_arm(&spec, &start, &a, &mut opt, &env, &mut substream(0, &[])).unwrap();
        assert!(loss(&after) < loss(&start), "{} -> {}", loss(&start), loss(&after));
    }

    #[test]
    fn unknown_teacher_is_reported() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let mut cfg = config(3);
        cfg.arms[0].loss = LossSpec::distill(TeacherId("nobody".into()));
        assert!(matches!(run(&cfg, &env, &mut NoReport), Err(Ev3Error::UnknownTeacher(_))));
    }

    #[test]
    fn selection_rule() {
        let r = |n, c| EvalRecord::from_counts(n, c).unwrap();
        let (a, b, c) = (r(10, 6), r(10, 7), r(20, 14));
        assert_eq!(select_best(&[&a]).unwrap(), 0);
        assert_eq!(select_best(&[&a, &b]).unwrap(), 1);
        assert_eq!(select_best(&[&b, &c]).unwrap(), 0);
        assert_eq!(select_best(&[&c, &b]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn assess_rejects_foreign_batches() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let spec = config(3).base;
        let cand = vec![CandidateUpdate {
            arm_id: 0,
            params: init_params(&spec, 0),
            eval: None,
        }];
        assert!(assess(&spec, cand.clone(), &toy.test.full_batch(), &env).is_err());
        assert!(assess(&spec, cand.clone(), &toy.train.full_batch(), &env).is_err());
        assert!(assess(&spec, vec![], &toy.val.full_batch(), &env).is_err());
        let (best, filled) = assess(&spec, cand, &toy.val.full_batch(), &env).unwrap();
        assert_eq!(best, 0);
        assert_eq!(filled[0].eval.as_ref().unwrap().n(), toy.val.len());
        assert!(Env::new(&toy.train, &toy.test, &toy.teachers, 16).is_err());
        assert!(Env::new(&toy.val, &toy.val, &toy.teachers, 16).is_err());
    }

    fn forced(state: &EV3State, eval: EvalRecord) -> CandidateUpdate {
        CandidateUpdate {
            arm_id: 0,
            params: state.params_current.clone(),
            eval: Some(eval),
        }
    }

    #[test]
    fn significant_improvement_replaces_snapshot() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = config(3);
        let mut state = EV3State::initial(&cfg, &env).unwrap();
        let batch = toy.val.full_batch();
        let n = batch.len();
        state.snapshot.eval = EvalRecord::from_counts(n, n / 4).unwrap();
        state.patience_counter = 2;
        let best = forced(&state, EvalRecord::from_counts(n, 3 * n / 4).unwrap());
        let cur = EvalRecord::from_counts(n, n / 4).unwrap();
        let out = adapt(&mut state, best, &cur, &batch, &cfg, &env, &mut NoReport).unwrap();
        assert!(out.accepted && out.snapshot_updated && !out.expanded);
        assert_eq!(state.patience_counter, 0);
        assert_eq!(state.snapshot.eval.correct(), 3 * n / 4);
        assert_eq!(state.size_collection[&2].eval.correct(), 3 * n / 4);
        assert_eq!(state.t, 1);
        assert_eq!(state.trace.len(), 1);
    }

    #[test]
    fn significantly_worse_candidate_is_rejected() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = config(3);
        let mut state = EV3State::initial(&cfg, &env).unwrap();
        let before = state.params_current.clone();
        let batch = toy.val.full_batch();
        let n = batch.len();
        let mut best = forced(&state, EvalRecord::from_counts(n, n / 4).unwrap());
        best.params = init_params(&cfg.base, 1234);
        let cur = EvalRecord::from_counts(n, 3 * n / 4).unwrap();
        let out = adapt(&mut state, best, &cur, &batch, &cfg, &env, &mut NoReport).unwrap();
        assert!(!out.accepted);
        assert_eq!(state.params_current, before);
        let again = forced(&state, cur.clone());
        assert!(adapt(&mut state, again, &cur, &toy.test.full_batch(), &cfg, &env, &mut NoReport).is_err());
    }

    #[test]
    fn patience_triggers_exact_expansion_and_saturates_at_the_top() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = config(3);
        let mut state = EV3State::initial(&cfg, &env).unwrap();
        let batch = toy.val.batch(state.snapshot.batch.clone());
        let acc = state.snapshot.eval.accuracy();
        let mut expansions = 0;
        for i in 0..3 * cfg.patience + 2 {
            let e = state.snapshot.eval.clone();
            let cand = forced(&state, e.clone());
            let out = adapt(&mut state, cand, &e, &batch, &cfg, &env, &mut NoReport).unwrap();
            assert!(state.patience_counter <= cfg.patience);
            assert_eq!(state.snapshot.eval.accuracy(), acc);
            if out.expanded {
                expansions += 1;
                assert_eq!(i % cfg.patience, cfg.patience - 1);
            }
        }
        assert_eq!(expansions, 2);
        assert_eq!(state.spec.depth(), cfg.max_depth);
        assert_eq!(state.patience_counter, cfg.patience);
        assert_eq!(state.size_collection.keys().copied().collect::<Vec<_>>(), vec![2, 4, 6]);
        let logits = |s: &Snapshot| forward(&s.spec, &s.params, &toy.val.features).unwrap();
        assert_eq!(logits(&state.size_collection[&2]), logits(&state.size_collection[&6]));
    }

    #[test]
    fn zero_iterations_leave_the_initial_state() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = Ev3Config {
            max_iterations: 0,
            ..config(3)
        };
        let state = run(&cfg, &env, &mut NoReport).unwrap();
        let init = EV3State::initial(&cfg, &env).unwrap();
        assert!(state.trace.is_empty());
        assert_eq!(state.params_current, init.params_current);
        assert_eq!(state.snapshot, init.snapshot);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn runs_are_deterministic_and_parallel_invariant() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let mut cfg = config(3);
        cfg.arms.push(Arm {
            sampler: SamplerKind::Boosted,
            ..arm(0.02, 3)
        });
        let a = run(&cfg, &env, &mut NoReport).unwrap();
        let b = run(&cfg, &env, &mut NoReport).unwrap();
        let c = run(&cfg, &env.with_parallel(true), &mut NoReport).unwrap();
        assert_eq!(a.trace.len(), 12);
        assert_eq!(a.cum_steps, 12 * 8);
        for s in [&b, &c] {
            assert_eq!(a.params_current, s.params_current);
            assert_eq!(format!("{:?}", a.trace), format!("{:?}", s.trace));
        }
    }

    #[test]
    fn step_budget_caps_iterations() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = Ev3Config {
            step_budget: Some(23),
            ..config(3)
        };
        let s = run(&cfg, &env, &mut NoReport).unwrap();
        assert_eq!(s.trace.len(), 4);
        assert_eq!(s.cum_steps, 20);
    }

    #[test]
    fn reporter_sees_every_iteration() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = config(3);
        let mut calls = 0;
        let mut reporter = |spec: &GraphSpec, params: &ParameterSet| {
            calls += 1;
            let e = evaluate(spec, params, &toy.test.full_batch())?.error();
            Ok(ReportedErrors {
                train: f64::NAN,
                val: f64::NAN,
                test: e,
            })
        };
        let with = run(&cfg, &env, &mut reporter).unwrap();
        let without = run(&cfg, &env, &mut NoReport).unwrap();
        assert!(calls >= 1 && calls <= with.trace.len());
        assert!(with.trace.iter().all(|r| r.errors.test.is_finite()));
        assert_eq!(with.params_current, without.params_current);
    }

    #[test]
    fn student_as_teacher_passes() {
        let toy = toy(3);
        let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
        let cfg = config(3);
        let single = run(&cfg, &env, &mut NoReport).unwrap();
        let one = run_student_as_teacher(&cfg, &env, &mut NoReport).unwrap();
        assert_eq!(format!("{:?}", single.trace), format!("{:?}", one.trace));

        let two_cfg = Ev3Config { passes: 2, ..cfg.clone() };
        let two = run_student_as_teacher(&two_cfg, &env, &mut NoReport).unwrap();
        let arms = sat_arms(&cfg.arms[0], &single.size_collection);
        assert_eq!(arms.len(), 1 + single.size_collection.len());
        let pass2: Vec<_> = two.trace.iter().filter(|r| r.pass == 2).collect();
        assert_eq!(pass2.len(), cfg.max_iterations);
        assert!(pass2.iter().all(|r| r.arm_id < arms.len()));
        assert_eq!(pass2[0].t, cfg.max_iterations);
        let per_iter = Ev3Config::iteration_cost(&arms);
        assert_eq!(two.cum_steps, single.cum_steps + per_iter * cfg.max_iterations as u64);
        for (d, s) in &single.size_collection {
            assert!(two.size_collection[d].eval.accuracy() >= s.eval.accuracy());
        }
    }

    #[test]
    fn config_validation() {
        let ok = config(3);
        ok.validate().unwrap();
        for bad in [
            Ev3Config { arms: vec![], ..ok.clone() },
            Ev3Config { patience: 0, ..ok.clone() },
            Ev3Config { confidence: 1.0, ..ok.clone() },
            Ev3Config { max_depth: 5, ..ok.clone() },
            Ev3Config { max_depth: 0, ..ok.clone() },
            Ev3Config { assess_batch_size: 0, ..ok.clone() },
            Ev3Config { arms: vec![arm(0.1, 0)], ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn adapt_invariants_hold_on_arbitrary_outcomes(
            outcomes in prop::collection::vec((0usize..=200, 0usize..=200), 1..40),
            patience in 1usize..5,
        ) {
            let toy = toy(3);
            let env = Env::new(&toy.train, &toy.val, &toy.teachers, 16).unwrap();
            let cfg = Ev3Config { patience, max_depth: 2, ..config(3) };
            let mut state = EV3State::initial(&cfg, &env).unwrap();
            let batch = toy.val.batch((0..100).chain(0..100).collect());
            let mut current = EvalRecord::from_counts(200, 100).unwrap();
            for (best_c, _) in outcomes {
                let best = EvalRecord::from_counts(200, best_c).unwrap();
                let snap_before = state.snapshot.eval.accuracy();
                let cand = forced(&state, best.clone());
                let out = adapt(&mut state, cand, &current, &batch, &cfg, &env, &mut NoReport).unwrap();
                prop_assert!(state.snapshot.eval.accuracy() >= snap_before);
                prop_assert!(state.patience_counter <= patience);
                let kept = if out.accepted { best } else { current.clone() };
                prop_assert!(!z_test(&current, &kept, 0.95).unwrap().verdict.is_significant());
                current = kept;
            }
        }
    }
}
