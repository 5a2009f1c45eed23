//! Experiment configuration and its flat `key=value` text form.
//!
//! A config file overrides the desk preset key by key; `#` starts a comment.
//! Stage lists are written `width x blocks` per stage, e.g. `16x1,16x1`.
//! Explore arms are numbered from 0:
//!
//! ```text
//! ev3.arm.0.loss=kd
//! ev3.arm.0.temperature=4
//! ev3.arm.0.optimizer=adam
//! ev3.arm.0.lr=0.002
//! ev3.arm.0.sampler=iid
//! ev3.arm.0.steps=50
//! ```
//!
//! Giving any `ev3.arm.*` key replaces the preset's arm list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetKind, GeneratorConfig, SplitSpec};
use crate::engine::{Arm, SamplerKind};
use crate::error::{Ev3Error, Result};
use crate::losses::{LossSpec, TeacherId, DEFAULT_TEMPERATURE};
use crate::model::GraphSpec;
use crate::morphism::size_ladder;
use crate::optim::{OptimizerKind, OptimizerSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub stages: Vec<(usize, usize)>,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Minimum test accuracy the teacher must reach.
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ev3Params {
    pub patience: usize,
    pub confidence: f64,
    pub arms: Vec<Arm>,
    pub assess_batch_size: usize,
    pub grad_batch_size: usize,
    pub passes: usize,
    pub expansion_noise: f64,
    pub assess_on_train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub split: SplitSpec,
    pub teacher: TeacherConfig,
    pub student: Vec<(usize, usize)>,
    /// Number of deepenings from the base student; the ladder has one more size.
    pub ladder_steps: usize,
    pub steps_per_size: u64,
    /// Size of the fixed training subsample used to report train error.
    pub train_report_size: usize,
    pub ev3: Ev3Params,
}

fn adam(lr: f64) -> OptimizerSpec {
    OptimizerSpec {
        kind: OptimizerKind::adam(),
        learning_rate: lr,
    }
}

impl ExperimentConfig {
    /// Defaults sized for a single-core machine. The task is calibrated so
    /// the smallest student sits near 80% accuracy, the largest above 92%,
    /// and a small training split makes larger students overfit more.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig {
                kind: DatasetKind::GaussianMixture,
                num_classes: 8,
                dim: 8,
                n: 20_000,
                noise: 0.3,
                clusters_per_class: 16,
                seed: 7,
            },
            split: SplitSpec {
                train: 0.3,
                val: 0.2,
                test: 0.5,
                seed: 11,
            },
            teacher: TeacherConfig {
                stages: vec![(64, 4), (64, 4)],
                steps: 3000,
                batch_size: 128,
                optimizer: adam(0.002),
                floor: 0.92,
            },
            student: vec![(12, 1), (12, 1)],
            ladder_steps: 3,
            steps_per_size: 5000,
            train_report_size: 2000,
            ev3: Ev3Params {
                patience: 20,
                confidence: 0.95,
                arms: vec![Arm {
                    loss: LossSpec::distill(TeacherId::original()),
                    optimizer: adam(0.01),
                    sampler: SamplerKind::Iid,
                    steps_per_iteration: 50,
                }],
                assess_batch_size: 2048,
                grad_batch_size: 64,
                passes: 2,
                expansion_noise: 0.0,
                assess_on_train: false,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            other => Err(Ev3Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn teacher_spec(&self) -> Result<GraphSpec> {
        GraphSpec::from_pairs(self.data.dim, self.data.num_classes, &self.teacher.stages)
    }

    pub fn student_spec(&self) -> Result<GraphSpec> {
        GraphSpec::from_pairs(self.data.dim, self.data.num_classes, &self.student)
    }

    pub fn ladder(&self) -> Result<Vec<GraphSpec>> {
        Ok(size_ladder(&self.student_spec()?, self.ladder_steps))
    }

    /// Optimizer steps each regime (and each student-as-teacher pass) may spend.
    pub fn total_budget(&self) -> u64 {
        self.steps_per_size * (self.ladder_steps as u64 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Ev3Error::Config(m));
        self.data.validate()?;
        self.split.sizes(self.data.n)?;
        self.teacher_spec()?;
        self.student_spec()?;
        self.teacher.optimizer.validate()?;
        if self.teacher.steps == 0 || self.teacher.batch_size == 0 {
            return bad("teacher steps and batch size must be positive".into());
        }
        if !self.teacher.floor.is_finite() {
            return bad("teacher floor must be finite".into());
        }
        if self.steps_per_size == 0 {
            return bad("budget.steps_per_size must be positive".into());
        }
        if self.train_report_size == 0 {
            return bad("report.train_subsample must be positive".into());
        }
        let e = &self.ev3;
        if e.arms.is_empty() {
            return bad("at least one explore arm is required".into());
        }
        for arm in &e.arms {
            arm.validate()?;
        }
        if e.arms[0].teacher_id() != Some(&TeacherId::original()) {
            return bad("arm 0 must distill from the original teacher".into());
        }
        if let Some(id) = e.arms.iter().filter_map(Arm::teacher_id).find(|id| **id != TeacherId::original()) {
            return bad(format!("unknown teacher `{id}`"));
        }
        if e.patience == 0 || e.passes == 0 || e.assess_batch_size == 0 || e.grad_batch_size == 0 {
            return bad("ev3 patience, passes and batch sizes must be positive".into());
        }
        if !(e.confidence > 0.5 && e.confidence < 1.0) {
            return bad(format!("ev3.confidence must lie in (0.5, 1), got {}", e.confidence));
        }
        if !(e.expansion_noise >= 0.0 && e.expansion_noise.is_finite()) {
            return bad("ev3.expansion_noise must be >= 0".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Ev3Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut arm_fields: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Ev3Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(rest) = key.strip_prefix("ev3.arm.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Ev3Error::Config(format!("bad arm key `{key}`")))?;
                let idx: usize = parse_value(key, idx)?;
                arm_fields.entry(idx).or_default().insert(field.to_string(), value.to_string());
            } else {
                cfg.set(key, value)?;
            }
        }
        if !arm_fields.is_empty() {
            if arm_fields.keys().copied().ne(0..arm_fields.len()) {
                return Err(Ev3Error::Config("arm indices must run 0, 1, 2, ...".into()));
            }
            cfg.ev3.arms = arm_fields.values().map(parse_arm).collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "data.kind" => self.data.kind = v.parse()?,
            "data.num_classes" => self.data.num_classes = parse_value(key, v)?,
            "data.dim" => self.data.dim = parse_value(key, v)?,
            "data.n" => self.data.n = parse_value(key, v)?,
            "data.noise" => self.data.noise = parse_value(key, v)?,
            "data.clusters_per_class" => self.data.clusters_per_class = parse_value(key, v)?,
            "data.seed" => self.data.seed = parse_value(key, v)?,
            "split.train" => self.split.train = parse_value(key, v)?,
            "split.val" => self.split.val = parse_value(key, v)?,
            "split.test" => self.split.test = parse_value(key, v)?,
            "split.seed" => self.split.seed = parse_value(key, v)?,
            "teacher.stages" => self.teacher.stages = parse_stages(key, v)?,
            "teacher.steps" => self.teacher.steps = parse_value(key, v)?,
            "teacher.batch_size" => self.teacher.batch_size = parse_value(key, v)?,
            "teacher.optimizer" => self.teacher.optimizer.kind = parse_optimizer_kind(v)?,
            "teacher.lr" => self.teacher.optimizer.learning_rate = parse_value(key, v)?,
            "teacher.floor" => self.teacher.floor = parse_value(key, v)?,
            "student.stages" => self.student = parse_stages(key, v)?,
            "ladder.steps" => self.ladder_steps = parse_value(key, v)?,
            "budget.steps_per_size" => self.steps_per_size = parse_value(key, v)?,
            "report.train_subsample" => self.train_report_size = parse_value(key, v)?,
            "ev3.patience" => self.ev3.patience = parse_value(key, v)?,
            "ev3.confidence" => self.ev3.confidence = parse_value(key, v)?,
            "ev3.assess_batch_size" => self.ev3.assess_batch_size = parse_value(key, v)?,
            "ev3.grad_batch_size" => self.ev3.grad_batch_size = parse_value(key, v)?,
            "ev3.passes" => self.ev3.passes = parse_value(key, v)?,
            "ev3.expansion_noise" => self.ev3.expansion_noise = parse_value(key, v)?,
            "ev3.assess_on" => {
                self.ev3.assess_on_train = match v {
                    "val" => false,
                    "train" => true,
                    other => return Err(Ev3Error::Config(format!("ev3.assess_on must be val or train, got `{other}`"))),
                }
            }
            other => return Err(Ev3Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key, in the form [`ExperimentConfig::parse`] reads back.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("data.kind", self.data.kind.to_string());
        kv("data.num_classes", self.data.num_classes.to_string());
        kv("data.dim", self.data.dim.to_string());
        kv("data.n", self.data.n.to_string());
        kv("data.noise", self.data.noise.to_string());
        kv("data.clusters_per_class", self.data.clusters_per_class.to_string());
        kv("data.seed", self.data.seed.to_string());
        kv("split.train", self.split.train.to_string());
        kv("split.val", self.split.val.to_string());
        kv("split.test", self.split.test.to_string());
        kv("split.seed", self.split.seed.to_string());
        kv("teacher.stages", stages_string(&self.teacher.stages));
        kv("teacher.steps", self.teacher.steps.to_string());
        kv("teacher.batch_size", self.teacher.batch_size.to_string());
        kv("teacher.optimizer", self.teacher.optimizer.kind.name().to_string());
        kv("teacher.lr", self.teacher.optimizer.learning_rate.to_string());
        kv("teacher.floor", self.teacher.floor.to_string());
        kv("student.stages", stages_string(&self.student));
        kv("ladder.steps", self.ladder_steps.to_string());
        kv("budget.steps_per_size", self.steps_per_size.to_string());
        kv("report.train_subsample", self.train_report_size.to_string());
        kv("ev3.patience", self.ev3.patience.to_string());
        kv("ev3.confidence", self.ev3.confidence.to_string());
        kv("ev3.assess_batch_size", self.ev3.assess_batch_size.to_string());
        kv("ev3.grad_batch_size", self.ev3.grad_batch_size.to_string());
        kv("ev3.passes", self.ev3.passes.to_string());
        kv("ev3.expansion_noise", self.ev3.expansion_noise.to_string());
        kv("ev3.assess_on", if self.ev3.assess_on_train { "train" } else { "val" }.to_string());
        for (i, arm) in self.ev3.arms.iter().enumerate() {
            let p = format!("ev3.arm.{i}");
            match &arm.loss {
                LossSpec::Distill { temperature, teacher } => {
                    kv(&format!("{p}.loss"), "kd".into());
                    kv(&format!("{p}.temperature"), temperature.to_string());
                    if *teacher != TeacherId::original() {
                        kv(&format!("{p}.teacher"), teacher.to_string());
                    }
                }
                LossSpec::CrossEntropy => kv(&format!("{p}.loss"), "ce".into()),
            }
            kv(&format!("{p}.optimizer"), arm.optimizer.kind.name().into());
            kv(&format!("{p}.lr"), arm.optimizer.learning_rate.to_string());
            match arm.optimizer.kind {
                OptimizerKind::Momentum { momentum } => kv(&format!("{p}.momentum"), momentum.to_string()),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    kv(&format!("{p}.beta1"), beta1.to_string());
                    kv(&format!("{p}.beta2"), beta2.to_string());
                    kv(&format!("{p}.eps"), eps.to_string());
                }
                OptimizerKind::Sgd => {}
            }
            kv(&format!("{p}.sampler"), arm.sampler.to_string());
            kv(&format!("{p}.steps"), arm.steps_per_iteration.to_string());
        }
        s
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Ev3Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_stages(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|s| {
            let (w, b) = s
                .trim()
                .split_once('x')
                .ok_or_else(|| Ev3Error::Config(format!("`{key}` stage `{s}` is not WIDTHxBLOCKS")))?;
            Ok((parse_value(key, w)?, parse_value(key, b)?))
        })
        .collect()
}

fn stages_string(stages: &[(usize, usize)]) -> String {
    stages.iter().map(|(w, b)| format!("{w}x{b}")).collect::<Vec<_>>().join(",")
}

fn parse_optimizer_kind(v: &str) -> Result<OptimizerKind> {
    match v {
        "sgd" => Ok(OptimizerKind::Sgd),
        "momentum" => Ok(OptimizerKind::Momentum { momentum: 0.9 }),
        "adam" => Ok(OptimizerKind::adam()),
        other => Err(Ev3Error::Config(format!("unknown optimizer `{other}`"))),
    }
}

fn parse_arm(fields: &BTreeMap<String, String>) -> Result<Arm> {
    let get = |k: &str| fields.get(k).map(String::as_str);
    for k in fields.keys() {
        if !["loss", "temperature", "teacher", "optimizer", "lr", "momentum", "beta1", "beta2", "eps", "sampler", "steps"]
            .contains(&k.as_str())
        {
            return Err(Ev3Error::Config(format!("unknown arm field `{k}`")));
        }
    }
    let loss = match get("loss").unwrap_or("kd") {
        "kd" => LossSpec::Distill {
            temperature: get("temperature").map_or(Ok(DEFAULT_TEMPERATURE), |v| parse_value("temperature", v))?,
            teacher: TeacherId(get("teacher").unwrap_or(TeacherId::ORIGINAL).to_string()),
        },
        "ce" => LossSpec::CrossEntropy,
        other => return Err(Ev3Error::Config(format!("unknown arm loss `{other}`"))),
    };
    let mut kind = parse_optimizer_kind(get("optimizer").unwrap_or("adam"))?;
    match &mut kind {
        OptimizerKind::Momentum { momentum } => {
            if let Some(v) = get("momentum") {
                *momentum = parse_value("momentum", v)?;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            for (name, slot) in [("beta1", beta1), ("beta2", beta2), ("eps", eps)] {
                if let Some(v) = get(name) {
                    *slot = parse_value(name, v)?;
                }
            }
        }
        OptimizerKind::Sgd => {}
    }
    Ok(Arm {
        loss,
        optimizer: OptimizerSpec {
            kind,
            learning_rate: get("lr").map_or(Ok(0.002), |v| parse_value("lr", v))?,
        },
        sampler: get("sampler").unwrap_or("iid").parse()?,
        steps_per_iteration: get("steps").map_or(Ok(50), |v| parse_value("steps", v))?,
    })
}
