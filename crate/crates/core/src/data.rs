//! Synthetic labeled data, stratified splits and batch samplers.
//!
//! Every batch is tagged with the split it was drawn from. The engine
//! only ever receives train and validation splits; the test split stays
//! with the harness for final reporting.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Ev3Error, Result};
use crate::losses::{ce_loss_per_example, evaluate_on, kd_loss_per_example, EvalRecord, LossSpec};
use crate::model::{decode_named_at, encode_named, forward, GraphSpec, ParameterSet};
use crate::tensor::Tensor;

/// Largest pool a boosted sampler scores per draw.
pub const BOOST_POOL: usize = 4096;
/// Minimum sampling weight after normalization.
pub const BOOST_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    GaussianMixture,
    Spirals,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::GaussianMixture => "gaussian_mixture",
            DatasetKind::Spirals => "spirals",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Ev3Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_mixture" => Ok(DatasetKind::GaussianMixture),
            "spirals" => Ok(DatasetKind::Spirals),
            other => Err(Ev3Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub dim: usize,
    pub n: usize,
    /// Isotropic noise standard deviation (before standardization).
    pub noise: f64,
    /// Gaussian components per class; ignored for spirals.
    pub clusters_per_class: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Ev3Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if self.kind == DatasetKind::Spirals && self.dim < 2 {
            return bad("spirals need at least 2 dimensions".into());
        }
        if self.n < self.num_classes {
            return bad(format!("{} examples cannot cover {} classes", self.n, self.num_classes));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.clusters_per_class == 0 {
            return bad("clusters_per_class must be positive".into());
        }
        Ok(())
    }

    fn header_lines(&self) -> Vec<String> {
        vec![
            format!("kind={}", self.kind),
            format!("num_classes={}", self.num_classes),
            format!("dim={}", self.dim),
            format!("n={}", self.n),
            format!("noise={}", self.noise),
            format!("clusters_per_class={}", self.clusters_per_class),
            format!("seed={}", self.seed),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

/// Generates a class-balanced, standardized dataset; deterministic in the seed.
pub fn gen_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, d, n) = (config.num_classes, config.dim, config.n);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut raw = Vec::with_capacity(n * d);

    match config.kind {
        DatasetKind::GaussianMixture => {
            let k = config.clusters_per_class;
            let centers: Vec<Vec<f64>> = (0..c * k)
                .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            for &label in &labels {
                let center = &centers[label * k + rng.gen_range(0..k)];
                for &mu in center {
                    raw.push(mu + config.noise * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        DatasetKind::Spirals => {
            // 2-d interleaved spirals, linearly embedded in `dim` dimensions
            let embed: Vec<f64> = (0..2 * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for &label in &labels {
                let t: f64 = rng.gen_range(0.05..1.0);
                let angle = std::f64::consts::TAU * (label as f64 / c as f64 + 1.5 * t);
                let (x, y) = (t * angle.cos(), t * angle.sin());
                for j in 0..d {
                    let v = x * embed[j] + y * embed[d + j];
                    raw.push(v + config.noise * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }

    standardize(&mut raw, n, d);
    Ok(Dataset {
        config: config.clone(),
        features: Tensor::new(n, d, raw)?,
        labels,
    })
}

fn standardize(raw: &mut [f64], n: usize, d: usize) {
    for j in 0..d {
        let mean = (0..n).map(|i| raw[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (raw[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let v = raw[i * d + j] - mean;
            raw[i * d + j] = if sd > 0.0 { v / sd } else { v };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Ev3Error::Config(format!(
                "split fractions must be positive, got {fr:?}"
            )));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Ev3Error::Config(format!("split fractions must sum to 1, got {fr:?}")));
        }
        let n_train = (self.train * n as f64).round() as usize;
        let n_val = (self.val * n as f64).round() as usize;
        let n_test = n.saturating_sub(n_train + n_val);
        if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != n {
            return Err(Ev3Error::Config(format!(
                "split {fr:?} of {n} examples leaves an empty split"
            )));
        }
        Ok((n_train, n_val, n_test))
    }
}

/// A subset of a dataset, materialized.
#[derive(Clone, Debug)]
pub struct Split {
    pub kind: SplitKind,
    /// Row indices into the parent dataset.
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Split {
    fn from_indices(dataset: &Dataset, kind: SplitKind, indices: Vec<usize>) -> Self {
        Self {
            kind,
            features: dataset.features.gather_rows(&indices),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            indices,
            num_classes: dataset.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Batch of the given positions (indices into this split).
    pub fn batch(&self, positions: Vec<usize>) -> Batch {
        Batch {
            origin: self.kind,
            features: self.features.gather_rows(&positions),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            positions,
        }
    }

    /// The whole split as one batch.
    pub fn full_batch(&self) -> Batch {
        self.batch((0..self.len()).collect())
    }

    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.len() as f64).collect()
    }
}

/// Examples drawn from one split; `positions` index into that split.
#[derive(Clone, Debug)]
pub struct Batch {
    pub origin: SplitKind,
    pub positions: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn evaluate(spec: &GraphSpec, params: &ParameterSet, batch: &Batch) -> Result<EvalRecord> {
    evaluate_on(spec, params, &batch.features, &batch.labels)
}

/// Stratified, seeded train/val/test partition.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Split, Split, Split)> {
    let n = dataset.len();
    let (n_train, n_val, _) = spec.sizes(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut class_rank: Vec<usize> = (0..c).collect();
    class_rank.shuffle(&mut rng);
    // each example gets the quantile of its shuffled within-class position;
    // any contiguous cut of the sorted order is then close to stratified
    let mut keyed = Vec::with_capacity(n);
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        for (j, &idx) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / m, class_rank[class], idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    Ok((
        Split::from_indices(dataset, SplitKind::Train, order[..n_train].to_vec()),
        Split::from_indices(dataset, SplitKind::Val, order[n_train..n_train + n_val].to_vec()),
        Split::from_indices(dataset, SplitKind::Test, order[n_train + n_val..].to_vec()),
    ))
}

/// Uniform draw with replacement.
pub fn sample_iid(split: &Split, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Ev3Error::Config("batch size must be positive".into()));
    }
    if split.is_empty() {
        return Err(Ev3Error::Data(format!("cannot sample from empty {} split", split.kind)));
    }
    let positions = (0..batch_size).map(|_| rng.gen_range(0..split.len())).collect();
    Ok(split.batch(positions))
}

/// Sampling probabilities proportional to per-example loss, floored at
/// [`BOOST_FLOOR`] and renormalized. All-zero losses give the uniform law.
pub fn boosting_weights(losses: &[f64]) -> Vec<f64> {
    let total: f64 = losses.iter().sum();
    let n = losses.len() as f64;
    let raw: Vec<f64> = if total > 0.0 && total.is_finite() {
        losses.iter().map(|&l| (l / total).max(BOOST_FLOOR)).collect()
    } else {
        vec![1.0 / n; losses.len()]
    };
    let norm: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / norm).collect()
}

/// What a boosted sampler scores examples with.
pub struct BoostContext<'a> {
    pub spec: &'a GraphSpec,
    pub params: &'a ParameterSet,
    pub loss: &'a LossSpec,
    /// Teacher logits row-aligned with the split; required for distillation.
    pub teacher_logits: Option<&'a Tensor>,
}

/// Loss-proportional sampling law over a split.
///
/// Losses are computed once, at fit time, on a seeded pool of at most
/// [`BOOST_POOL`] examples (the whole split when it is smaller); every
/// pooled example keeps at least the floor probability.
#[derive(Clone, Debug)]
pub struct BoostedSampler {
    pool: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl BoostedSampler {
    pub fn fit(split: &Split, ctx: &BoostContext<'_>, rng: &mut impl Rng) -> Result<Self> {
        if split.is_empty() {
            return Err(Ev3Error::Data(format!("cannot sample from empty {} split", split.kind)));
        }
        let pool: Vec<usize> = if split.len() <= BOOST_POOL {
            (0..split.len()).collect()
        } else {
            let mut p = rand::seq::index::sample(rng, split.len(), BOOST_POOL).into_vec();
            p.sort_unstable();
            p
        };
        let logits = forward(ctx.spec, ctx.params, &split.features.gather_rows(&pool))?;
        let losses = match ctx.loss {
            LossSpec::Distill { temperature, .. } => {
                let teacher = ctx
                    .teacher_logits
                    .ok_or_else(|| Ev3Error::Contract("boosted distillation needs teacher logits".into()))?;
                if teacher.rows() != split.len() {
                    return Err(Ev3Error::dim(
                        "boosted sampler",
                        format!("{} teacher rows for a split of {}", teacher.rows(), split.len()),
                    ));
                }
                kd_loss_per_example(&logits, &teacher.gather_rows(&pool), *temperature)?
            }
            LossSpec::CrossEntropy => {
                let labels: Vec<usize> = pool.iter().map(|&p| split.labels[p]).collect();
                ce_loss_per_example(&logits, &labels)?
            }
        };
        let dist = WeightedIndex::new(boosting_weights(&losses))
            .map_err(|e| Ev3Error::Data(format!("boosting weights: {e}")))?;
        Ok(Self { pool, dist })
    }

    pub fn sample(&self, split: &Split, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Ev3Error::Config("batch size must be positive".into()));
        }
        let positions = (0..batch_size).map(|_| self.pool[self.dist.sample(rng)]).collect();
        Ok(split.batch(positions))
    }
}

/// One-shot [`BoostedSampler`] fit and draw.
pub fn sample_boosted(split: &Split, ctx: &BoostContext<'_>, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    BoostedSampler::fit(split, ctx, rng)?.sample(split, batch_size, rng)
}

const DATA_MAGIC: &str = "EV3DATA 1";

/// Header of generator settings, the feature matrix in the checkpoint
/// layout, then labels as little-endian `u32`.
pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut out = format!("{DATA_MAGIC}\n").into_bytes();
    for line in dataset.config.header_lines() {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(b"end\n");
    out.extend(encode_named(&[("features".to_string(), &dataset.features)]));
    for &l in &dataset.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> std::result::Result<String, String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or("truncated header")?;
        *pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| "header is not utf-8".to_string())
    };
    if next_line(&mut pos)? != DATA_MAGIC {
        return Err("missing EV3DATA header".into());
    }
    let mut fields = std::collections::BTreeMap::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad header line `{line}`"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| format!("missing header field `{k}`"));
    let num = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse().map_err(|_| format!("bad value for `{k}`"))
    };
    let config = GeneratorConfig {
        kind: get("kind")?.parse().map_err(|e: Ev3Error| e.to_string())?,
        num_classes: num("num_classes")?,
        dim: num("dim")?,
        n: num("n")?,
        noise: get("noise")?.parse().map_err(|_| "bad noise".to_string())?,
        clusters_per_class: num("clusters_per_class")?,
        seed: get("seed")?.parse().map_err(|_| "bad seed".to_string())?,
    };
    let mut block = decode_named_at(bytes, &mut pos)?;
    if block.len() != 1 || block[0].0 != "features" {
        return Err("expected a single `features` block".into());
    }
    let features = block.pop().expect("one block").1;
    if features.shape() != (config.n, config.dim) {
        return Err(format!("features shape {:?} disagrees with header", features.shape()));
    }
    let raw = &bytes[pos..];
    if raw.len() != config.n * 4 {
        return Err(format!("expected {} label bytes, found {}", config.n * 4, raw.len()));
    }
    let labels: Vec<usize> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(format!("label {bad} out of range"));
    }
    Ok(Dataset {
        config,
        features,
        labels,
    })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(dataset)).map_err(|e| Ev3Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Ev3Error::io(path, e))?;
    decode_dataset(&bytes).map_err(|detail| Ev3Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}
