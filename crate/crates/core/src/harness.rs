//! Experiment driver: teacher training, the four training regimes, and the
//! CSV / summary outputs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{evaluate, gen_dataset, sample_iid, split, Batch, Split};
use crate::engine::{
    explore_arm, run, run_student_as_teacher, Arm, EV3State, Env, Ev3Config, ReportedErrors, Reporter, TeacherRegistry,
};
use crate::error::{Ev3Error, Result};
use crate::losses::{loss_and_grad, Objective, TeacherId};
use crate::model::{init_params, param_count, GraphSpec, ParameterSet};
use crate::morphism::deepen_with_noise;
use crate::optim::Optimizer;
use crate::rng::{derive_seed, substream};

const TAG_TEACHER: u64 = 11;
const TAG_VANILLA: u64 = 12;
const TAG_MORPHISM: u64 = 13;
const TAG_EV3: u64 = 14;
const TAG_REPORT: u64 = 15;

pub const TRACE_HEADER: &str = "regime,seed,t,depth,param_count,train_err,val_err,test_err,arm_id,accepted,expanded,cum_steps,pass,assess_n,assess_err,prev_assess_err,snap_err";
pub const PARETO_HEADER: &str = "regime,depth,param_count,best_test_err";
pub const FINAL_SIZES_HEADER: &str = "regime,depth,param_count,train_err,val_err,test_err";

/// `printf("%.9g")`: 9 significant digits, trailing zeros removed.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_fraction(&format!("{x:.*}", (8 - exp) as usize)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    Vanilla,
    Morphism,
    Ev3Base,
    Ev3Sat,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Vanilla, Regime::Morphism, Regime::Ev3Base, Regime::Ev3Sat];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Vanilla => "vanilla",
            Regime::Morphism => "morphism",
            Regime::Ev3Base => "ev3_base",
            Regime::Ev3Sat => "ev3_sat",
        }
    }

    /// Parses a comma-separated list, rejecting duplicates and empty lists.
    pub fn parse_list(s: &str) -> Result<Vec<Regime>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let r: Regime = part.parse()?;
            if out.contains(&r) {
                return Err(Ev3Error::Config(format!("regime `{part}` listed twice")));
            }
            out.push(r);
        }
        if out.is_empty() {
            return Err(Ev3Error::Config("no regimes requested".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Ev3Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Ev3Error::Config(format!("unknown regime `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub spec: GraphSpec,
    pub params: ParameterSet,
    pub test_accuracy: f64,
}

/// Trains the teacher with cross-entropy on the training split and checks
/// its test accuracy against the configured floor.
pub fn train_teacher(config: &ExperimentConfig, train: &Split, test: &Split) -> Result<TeacherModel> {
    let spec = config.teacher_spec()?;
    let seed = derive_seed(config.data.seed, &[TAG_TEACHER]);
    let mut params = init_params(&spec, seed);
    let mut opt = Optimizer::new(config.teacher.optimizer)?;
    let mut rng = substream(seed, &[1]);
    for _ in 0..config.teacher.steps {
        let batch = sample_iid(train, config.teacher.batch_size, &mut rng)?;
        let objective = Objective::CrossEntropy { labels: &batch.labels };
        let (_, grads) = loss_and_grad(&spec, &params, &batch.features, objective)?;
        params = opt.step(&params, &grads)?;
    }
    let test_accuracy = evaluate(&spec, &params, &test.full_batch())?.accuracy();
    if !(test_accuracy >= config.teacher.floor) {
        return Err(Ev3Error::Calibration {
            accuracy: test_accuracy,
            floor: config.teacher.floor,
        });
    }
    Ok(TeacherModel {
        spec,
        params,
        test_accuracy,
    })
}

/// Measures train (fixed subsample), validation and test error. Lives on the
/// harness side so the engine never holds the test split.
pub struct ErrorReporter {
    train: Batch,
    val: Batch,
    test: Batch,
}

impl ErrorReporter {
    pub fn new(train: &Split, val: &Split, test: &Split, train_size: usize, seed: u64) -> Self {
        let train = if train.len() <= train_size {
            train.full_batch()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pos = rand::seq::index::sample(&mut rng, train.len(), train_size).into_vec();
            pos.sort_unstable();
            train.batch(pos)
        };
        Self {
            train,
            val: val.full_batch(),
            test: test.full_batch(),
        }
    }

    pub fn measure(&self, spec: &GraphSpec, params: &ParameterSet) -> Result<ReportedErrors> {
        Ok(ReportedErrors {
            train: evaluate(spec, params, &self.train)?.error(),
            val: evaluate(spec, params, &self.val)?.error(),
            test: evaluate(spec, params, &self.test)?.error(),
        })
    }
}

impl Reporter for &ErrorReporter {
    fn report(&mut self, spec: &GraphSpec, params: &ParameterSet) -> Result<ReportedErrors> {
        self.measure(spec, params)
    }
}

/// Everything the regimes share: data splits, the teacher and its logits.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub teacher: TeacherModel,
    pub teachers: TeacherRegistry,
    reporter: ErrorReporter,
}

impl Experiment {
    /// Generates the data and trains the teacher.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = gen_dataset(&config.data)?;
        let (train, _, test) = split(&dataset, &config.split)?;
        let teacher = train_teacher(config, &train, &test)?;
        Self::with_teacher(config, teacher)
    }

    /// Reuses an already trained teacher. The teacher depends only on the
    /// data, split and teacher settings, not on the experiment seed.
    pub fn with_teacher(config: &ExperimentConfig, teacher: TeacherModel) -> Result<Self> {
        config.validate()?;
        if teacher.spec != config.teacher_spec()? {
            return Err(Ev3Error::Config("teacher does not match the configured teacher graph".into()));
        }
        teacher.params.check(&teacher.spec)?;
        let dataset = gen_dataset(&config.data)?;
        let (train, val, test) = split(&dataset, &config.split)?;
        let mut teachers = TeacherRegistry::new();
        teachers.insert_model(TeacherId::original(), &teacher.spec, &teacher.params, &train)?;
        let reporter = ErrorReporter::new(
            &train,
            &val,
            &test,
            config.train_report_size,
            derive_seed(config.data.seed, &[TAG_REPORT]),
        );
        Ok(Self {
            config: config.clone(),
            train,
            val,
            test,
            teacher,
            teachers,
            reporter,
        })
    }

    fn env(&self) -> Result<Env<'_>> {
        let assess = if self.config.ev3.assess_on_train {
            &self.train
        } else {
            &self.val
        };
        Env::new(&self.train, assess, &self.teachers, self.config.ev3.grad_batch_size)
    }

    pub fn ev3_config(&self, regime: Regime) -> Result<Ev3Config> {
        let c = &self.config;
        let ladder = c.ladder()?;
        Ok(Ev3Config {
            base: ladder[0].clone(),
            max_depth: ladder.last().expect("non-empty ladder").depth(),
            arms: c.ev3.arms.clone(),
            patience: c.ev3.patience,
            confidence: c.ev3.confidence,
            max_iterations: usize::MAX,
            step_budget: Some(c.total_budget()),
            assess_batch_size: c.ev3.assess_batch_size,
            passes: if regime == Regime::Ev3Sat { c.ev3.passes } else { 1 },
            expansion_noise: c.ev3.expansion_noise,
            seed: derive_seed(c.seed, &[TAG_EV3]),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub regime: Regime,
    pub seed: u64,
    pub t: usize,
    pub depth: usize,
    pub param_count: usize,
    pub errors: ReportedErrors,
    pub arm_id: usize,
    pub accepted: bool,
    pub expanded: bool,
    pub cum_steps: u64,
    pub pass: usize,
    pub assess_n: usize,
    pub assess_err: f64,
    pub prev_assess_err: f64,
    pub snap_err: f64,
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.regime,
            self.seed,
            self.t,
            self.depth,
            self.param_count,
            fmt_g9(self.errors.train),
            fmt_g9(self.errors.val),
            fmt_g9(self.errors.test),
            self.arm_id,
            u8::from(self.accepted),
            u8::from(self.expanded),
            self.cum_steps,
            self.pass,
            self.assess_n,
            fmt_g9(self.assess_err),
            fmt_g9(self.prev_assess_err),
            fmt_g9(self.snap_err),
        )
    }
}

/// Errors of the last model a regime held at one size.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeSummary {
    pub depth: usize,
    pub param_count: usize,
    pub errors: ReportedErrors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeTrace {
    pub regime: Regime,
    pub rows: Vec<TraceRow>,
    pub final_sizes: Vec<SizeSummary>,
}

impl RegimeTrace {
    pub fn expansions(&self) -> usize {
        self.rows.iter().filter(|r| r.expanded).count()
    }

    /// Optimizer steps spent in each pass.
    pub fn steps_per_pass(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        let mut prev_end = 0;
        let passes = self.rows.iter().map(|r| r.pass).max().unwrap_or(0);
        for p in 1..=passes {
            let end = self.rows.iter().filter(|r| r.pass == p).map(|r| r.cum_steps).max().unwrap_or(prev_end);
            out.push(end - prev_end);
            prev_end = end;
        }
        out
    }

    /// Largest step cost of a single row in each pass.
    pub fn iteration_cost_per_pass(&self) -> Vec<u64> {
        let passes = self.rows.iter().map(|r| r.pass).max().unwrap_or(0);
        let mut out = vec![0; passes];
        let mut prev = 0;
        for r in &self.rows {
            out[r.pass - 1] = out[r.pass - 1].max(r.cum_steps - prev);
            prev = r.cum_steps;
        }
        out
    }
}

fn baseline_row(regime: Regime, seed: u64, t: usize, spec: &GraphSpec, errors: ReportedErrors, expanded: bool, cum: u64) -> Result<TraceRow> {
    Ok(TraceRow {
        regime,
        seed,
        t,
        depth: spec.depth(),
        param_count: param_count(spec)?,
        errors,
        arm_id: 0,
        accepted: true,
        expanded,
        cum_steps: cum,
        pass: 1,
        assess_n: 0,
        assess_err: f64::NAN,
        prev_assess_err: f64::NAN,
        snap_err: f64::NAN,
    })
}

fn chunk_sizes(total: u64, chunk: u64) -> Vec<usize> {
    let mut out = vec![chunk as usize; (total / chunk) as usize];
    if !total.is_multiple_of(chunk) {
        out.push((total % chunk) as usize);
    }
    out
}

fn train_chunk(
    spec: &GraphSpec,
    params: &ParameterSet,
    template: &Arm,
    steps: usize,
    opt: &mut Optimizer,
    env: &Env<'_>,
    seed: u64,
    t: usize,
) -> Result<ParameterSet> {
    let arm = Arm {
        steps_per_iteration: steps,
        ..template.clone()
    };
    explore_arm(spec, params, &arm, opt, env, &mut substream(seed, &[t as u64]))
}

fn run_vanilla(exp: &Experiment) -> Result<RegimeTrace> {
    let c = &exp.config;
    let env = exp.env()?;
    let arm = &c.ev3.arms[0];
    let (mut t, mut cum) = (0, 0u64);
    let mut rows = Vec::new();
    let mut final_sizes = Vec::new();
    for (k, spec) in c.ladder()?.iter().enumerate() {
        let seed = derive_seed(c.seed, &[TAG_VANILLA, k as u64]);
        let mut params = init_params(spec, seed);
        let mut opt = Optimizer::new(arm.optimizer)?;
        let mut errors = ReportedErrors::UNKNOWN;
        for steps in chunk_sizes(c.steps_per_size, arm.steps_per_iteration as u64) {
            params = train_chunk(spec, &params, arm, steps, &mut opt, &env, seed, t)?;
            cum += steps as u64;
            errors = exp.reporter.measure(spec, &params)?;
            rows.push(baseline_row(Regime::Vanilla, c.seed, t, spec, errors, false, cum)?);
            t += 1;
        }
        final_sizes.push(SizeSummary {
            depth: spec.depth(),
            param_count: param_count(spec)?,
            errors,
        });
    }
    Ok(RegimeTrace {
        regime: Regime::Vanilla,
        rows,
        final_sizes,
    })
}

fn run_morphism(exp: &Experiment) -> Result<RegimeTrace> {
    let c = &exp.config;
    let env = exp.env()?;
    let arm = &c.ev3.arms[0];
    let seed = derive_seed(c.seed, &[TAG_MORPHISM]);
    let ladder = c.ladder()?;
    let mut spec = ladder[0].clone();
    let mut params = init_params(&spec, seed);
    let mut opt = Optimizer::new(arm.optimizer)?;
    let (mut t, mut cum) = (0, 0u64);
    let mut rows = Vec::new();
    let mut final_sizes = Vec::new();
    for k in 0..ladder.len() {
        let chunks = chunk_sizes(c.steps_per_size, arm.steps_per_iteration as u64);
        for (i, &steps) in chunks.iter().enumerate() {
            params = train_chunk(&spec, &params, arm, steps, &mut opt, &env, seed, t)?;
            cum += steps as u64;
            let last = i + 1 == chunks.len();
            if last {
                final_sizes.push(SizeSummary {
                    depth: spec.depth(),
                    param_count: param_count(&spec)?,
                    errors: exp.reporter.measure(&spec, &params)?,
                });
            }
            let expand = last && k + 1 < ladder.len();
            if expand {
                let grown = deepen_with_noise(&spec, &params, derive_seed(seed, &[t as u64]), c.ev3.expansion_noise)?;
                (spec, params) = grown;
                opt.reset();
            }
            let errors = exp.reporter.measure(&spec, &params)?;
            rows.push(baseline_row(Regime::Morphism, c.seed, t, &spec, errors, expand, cum)?);
            t += 1;
        }
    }
    Ok(RegimeTrace {
        regime: Regime::Morphism,
        rows,
        final_sizes,
    })
}

fn run_ev3(exp: &Experiment, regime: Regime) -> Result<RegimeTrace> {
    let env = exp.env()?;
    let cfg = exp.ev3_config(regime)?;
    let mut reporter = &exp.reporter;
    let state: EV3State = if regime == Regime::Ev3Sat {
        run_student_as_teacher(&cfg, &env, &mut reporter)?
    } else {
        run(&cfg, &env, &mut reporter)?
    };
    let seed = exp.config.seed;
    let rows = state
        .trace
        .iter()
        .map(|r| TraceRow {
            regime,
            seed,
            t: r.t,
            depth: r.depth,
            param_count: r.param_count,
            errors: r.errors,
            arm_id: r.arm_id,
            accepted: r.accepted,
            expanded: r.expanded,
            cum_steps: r.cum_steps,
            pass: r.pass,
            assess_n: r.assess_n,
            assess_err: r.assess_err,
            prev_assess_err: r.prev_assess_err,
            snap_err: r.snap_err,
        })
        .collect();
    let final_sizes = state
        .size_collection
        .values()
        .map(|s| {
            Ok(SizeSummary {
                depth: s.spec.depth(),
                param_count: param_count(&s.spec)?,
                errors: exp.reporter.measure(&s.spec, &s.params)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RegimeTrace {
        regime,
        rows,
        final_sizes,
    })
}

pub fn run_regime(regime: Regime, exp: &Experiment) -> Result<RegimeTrace> {
    match regime {
        Regime::Vanilla => run_vanilla(exp),
        Regime::Morphism => run_morphism(exp),
        Regime::Ev3Base | Regime::Ev3Sat => run_ev3(exp, regime),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub teacher_spec: GraphSpec,
    pub teacher_test_accuracy: f64,
    pub ladder: Vec<GraphSpec>,
    pub traces: Vec<RegimeTrace>,
}

/// Runs `regimes` in the given order (or concurrently when `parallel`;
/// results are identical either way).
pub fn run_experiment(exp: &Experiment, regimes: &[Regime], parallel: bool) -> Result<ExperimentResults> {
    if regimes.is_empty() {
        return Err(Ev3Error::Config("no regimes requested".into()));
    }
    let traces: Vec<Result<RegimeTrace>> = if parallel {
        regimes.par_iter().map(|&r| run_regime(r, exp)).collect()
    } else {
        regimes.iter().map(|&r| run_regime(r, exp)).collect()
    };
    let results = ExperimentResults {
        config: exp.config.clone(),
        teacher_spec: exp.teacher.spec.clone(),
        teacher_test_accuracy: exp.teacher.test_accuracy,
        ladder: exp.config.ladder()?,
        traces: traces.into_iter().collect::<Result<_>>()?,
    };
    check_budget_fairness(&results)?;
    Ok(results)
}

/// Every pass of every regime spends the configured budget to within one
/// iteration of that pass.
pub fn check_budget_fairness(results: &ExperimentResults) -> Result<()> {
    let budget = results.config.total_budget();
    for trace in &results.traces {
        for (pass, (&spent, &cost)) in trace.steps_per_pass().iter().zip(&trace.iteration_cost_per_pass()).enumerate() {
            if spent > budget || budget - spent >= cost {
                return Err(Ev3Error::Contract(format!(
                    "{} pass {} spent {spent} of {budget} steps (iteration cost {cost})",
                    trace.regime,
                    pass + 1
                )));
            }
        }
    }
    Ok(())
}

pub struct ParetoRow {
    pub regime: Regime,
    pub depth: usize,
    pub param_count: usize,
    pub best_test_err: f64,
}

/// One row per regime and ladder size; sizes a regime never reached get NaN.
pub fn pareto_rows(results: &ExperimentResults) -> Result<Vec<ParetoRow>> {
    let mut out = Vec::new();
    for trace in &results.traces {
        for spec in &results.ladder {
            let best = trace
                .rows
                .iter()
                .filter(|r| r.depth == spec.depth() && !r.errors.test.is_nan())
                .map(|r| r.errors.test)
                .fold(f64::NAN, f64::min);
            out.push(ParetoRow {
                regime: trace.regime,
                depth: spec.depth(),
                param_count: param_count(spec)?,
                best_test_err: best,
            });
        }
    }
    Ok(out)
}

pub fn render_trace_csv(results: &ExperimentResults) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for row in results.traces.iter().flat_map(|t| &t.rows) {
        s.push_str(&row.to_csv());
        s.push('\n');
    }
    s
}

pub fn render_pareto_csv(results: &ExperimentResults) -> Result<String> {
    let mut s = format!("{PARETO_HEADER}\n");
    for r in pareto_rows(results)? {
        let _ = writeln!(s, "{},{},{},{}", r.regime, r.depth, r.param_count, fmt_g9(r.best_test_err));
    }
    Ok(s)
}

pub fn render_summary(results: &ExperimentResults) -> Result<String> {
    let c = &results.config;
    let mut s = String::new();
    let _ = writeln!(s, "ev3 experiment summary");
    let _ = writeln!(s, "seed={}", c.seed);
    let _ = writeln!(
        s,
        "teacher={} params={} test_accuracy={}",
        results.teacher_spec,
        param_count(&results.teacher_spec)?,
        fmt_g9(results.teacher_test_accuracy)
    );
    let _ = writeln!(
        s,
        "budget={} optimizer steps per regime, charged per arm; each student-as-teacher pass gets its own budget",
        c.total_budget()
    );
    let sizes: Vec<String> = results
        .ladder
        .iter()
        .map(|g| Ok(format!("{}:{}", g.depth(), param_count(g)?)))
        .collect::<Result<_>>()?;
    let _ = writeln!(s, "sizes(depth:params)={}", sizes.join(" "));
    let _ = writeln!(s);
    let _ = writeln!(s, "[regimes]");
    let _ = writeln!(s, "regime,rows,expansions,total_steps,steps_per_pass");
    for t in &results.traces {
        let per: Vec<String> = t.steps_per_pass().iter().map(u64::to_string).collect();
        let total = t.rows.last().map_or(0, |r| r.cum_steps);
        let _ = writeln!(s, "{},{},{},{},{}", t.regime, t.rows.len(), t.expansions(), total, per.join(";"));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "[final_sizes]");
    let _ = writeln!(s, "{FINAL_SIZES_HEADER}");
    for t in &results.traces {
        for f in &t.final_sizes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                t.regime,
                f.depth,
                f.param_count,
                fmt_g9(f.errors.train),
                fmt_g9(f.errors.val),
                fmt_g9(f.errors.test)
            );
        }
    }
    let find = |r: Regime| results.traces.iter().find(|t| t.regime == r);
    if let (Some(base), Some(sat)) = (find(Regime::Ev3Base), find(Regime::Ev3Sat)) {
        let _ = writeln!(s);
        let _ = writeln!(s, "[student_as_teacher]");
        let _ = writeln!(s, "depth,base_test_err,sat_test_err");
        let by_depth = |t: &RegimeTrace| -> BTreeMap<usize, f64> {
            t.final_sizes.iter().map(|f| (f.depth, f.errors.test)).collect()
        };
        let (b, st) = (by_depth(base), by_depth(sat));
        for g in &results.ladder {
            let d = g.depth();
            let get = |m: &BTreeMap<usize, f64>| m.get(&d).copied().unwrap_or(f64::NAN);
            let _ = writeln!(s, "{d},{},{}", fmt_g9(get(&b)), fmt_g9(get(&st)));
        }
    }
    Ok(s)
}

/// Writes trace.csv, pareto.csv and summary.txt into `out_dir`.
pub fn emit_results(results: &ExperimentResults, out_dir: &Path) -> Result<()> {
    if results.traces.is_empty() {
        return Err(Ev3Error::Config("no regime traces to emit".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Ev3Error::io(out_dir, e))?;
    let files = [
        ("trace.csv", render_trace_csv(results)),
        ("pareto.csv", render_pareto_csv(results)?),
        ("summary.txt", render_summary(results)?),
    ];
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Ev3Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        // expected strings from C printf("%.9g")
        let cases: [(f64, &str); 14] = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001, "1e-05"),
            (0.000123456789123, "0.000123456789"),
            (-2.5, "-2.5"),
            (999999999.5, "1e+09"),
            (1e300, "1e+300"),
            (0.125, "0.125"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g9(x), want, "{x}");
        }
        assert_eq!(fmt_g9(f64::NAN), "nan");
    }

    #[test]
    fn regime_lists() {
        assert_eq!(
            Regime::parse_list("vanilla,ev3_sat").unwrap(),
            vec![Regime::Vanilla, Regime::Ev3Sat]
        );
        assert!(Regime::parse_list("").is_err());
        assert!(Regime::parse_list("vanilla,vanilla").is_err());
        assert!(Regime::parse_list("ev4").is_err());
    }

    #[test]
    fn chunks_cover_the_budget() {
        assert_eq!(chunk_sizes(100, 50), vec![50, 50]);
        assert_eq!(chunk_sizes(120, 50), vec![50, 50, 20]);
    }
}
