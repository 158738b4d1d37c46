//! Synthetic multi-task datasets, deterministic splits and persistence.
//!
//! Two procedural suites are provided. `shapes` renders one of four glyphs
//! (filled square, horizontal bar, vertical bar, plus) into an 8×8 image at a
//! random intensity and asks for the glyph class, its area and its horizontal centroid; all three
//! labels derive from the same rendered mask. `vector` maps a 3-d latent
//! through a fixed nonlinear mixing into 8 features and asks for a quadrant
//! class and two smooth functions of the latent.

use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::task::{TaskKind, TaskLabels, TaskSpec};
use crate::tensor::Array;

pub const IMAGE_SIDE: usize = 8;
pub const VECTOR_DIM: usize = 8;
/// Range of the per-image glyph intensity.
pub const GLYPH_INTENSITY: (f64, f64) = (0.3, 1.5);
const VECTOR_LATENT: usize = 3;
// Mixing matrix of the vector suite is shared by every generator seed.
const VECTOR_MIXING_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Shapes,
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub suite: Suite,
    pub samples: usize,
    /// Standard deviation of additive input noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn shapes(samples: usize) -> Self {
        Self { suite: Suite::Shapes, samples, noise: default_noise() }
    }

    pub fn vector(samples: usize) -> Self {
        Self { suite: Suite::Vector, samples, noise: default_noise() }
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        match self.suite {
            Suite::Shapes => vec![
                TaskSpec { name: "shape".into(), kind: TaskKind::Classification { classes: 4 } },
                TaskSpec { name: "area".into(), kind: TaskKind::Regression { dim: 1 } },
                TaskSpec { name: "centroid_x".into(), kind: TaskKind::Regression { dim: 1 } },
            ],
            Suite::Vector => vec![
                TaskSpec { name: "quadrant".into(), kind: TaskKind::Classification { classes: 4 } },
                TaskSpec { name: "product".into(), kind: TaskKind::Regression { dim: 1 } },
                TaskSpec { name: "wave".into(), kind: TaskKind::Regression { dim: 1 } },
            ],
        }
    }
}

/// Inputs shared by every task plus one label set per task.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub inputs: Array,
    pub labels: Vec<TaskLabels>,
    pub tasks: Vec<TaskSpec>,
}

/// Inputs and labels for a subset of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array,
    pub labels: Vec<TaskLabels>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MtlDataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            inputs: self.inputs.select_rows(indices)?,
            labels: self.labels.iter().map(|l| l.select(indices)).collect::<Result<_>>()?,
        })
    }

    /// Consecutive batches of at most `size` samples, in storage order.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        if size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        (0..self.len())
            .step_by(size)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
                self.batch(&idx)
            })
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Ok(Self { spec: self.spec.clone(), seed: self.seed, inputs: b.inputs, labels: b.labels, tasks: self.tasks.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": "dataset",
            "spec": self.spec,
            "seed": self.seed,
            "tasks": self.tasks,
        });
        let label_arrays: Vec<Array> = self
            .labels
            .iter()
            .map(|l| match l {
                TaskLabels::Classes(c) => Array::from_vec(c.iter().map(|&v| v as f64).collect()),
                TaskLabels::Values(v) => v.clone(),
            })
            .collect();
        let mut arrays = vec![("inputs".to_string(), &self.inputs)];
        arrays.extend(label_arrays.iter().enumerate().map(|(t, a)| (format!("labels.{t}"), a)));
        container::write(path, header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays) = container::read(path)?;
        if header.get("format").and_then(|f| f.as_str()) != Some("dataset") {
            return Err(Error::format("container does not hold a dataset"));
        }
        let bad = |e: serde_json::Error| Error::format(format!("bad dataset header: {e}"));
        let spec: DatasetSpec = serde_json::from_value(header["spec"].clone()).map_err(bad)?;
        let seed: u64 = serde_json::from_value(header["seed"].clone()).map_err(bad)?;
        let tasks: Vec<TaskSpec> = serde_json::from_value(header["tasks"].clone()).map_err(bad)?;
        let mut arrays = arrays.into_iter();
        let (name, inputs) = arrays.next().ok_or_else(|| Error::format("dataset has no inputs"))?;
        if name != "inputs" {
            return Err(Error::format(format!("expected `inputs`, found `{name}`")));
        }
        let mut labels = Vec::with_capacity(tasks.len());
        for task in &tasks {
            let (_, a) = arrays.next().ok_or_else(|| Error::format("dataset is missing label arrays"))?;
            labels.push(match task.kind {
                TaskKind::Classification { .. } => TaskLabels::Classes(a.data().iter().map(|&v| v as usize).collect()),
                TaskKind::Regression { .. } => TaskLabels::Values(a),
            });
        }
        if labels.iter().any(|l| l.len() != inputs.shape()[0]) {
            return Err(Error::format("label count differs from sample count"));
        }
        Ok(Self { spec, seed, inputs, labels, tasks })
    }
}

/// Generates `spec.samples` samples deterministically from `seed`.
pub fn gen_synthetic_mtl(spec: &DatasetSpec, seed: u64) -> Result<MtlDataset> {
    if spec.samples == 0 {
        return Err(Error::arg("dataset needs at least one sample"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::arg(format!("noise must be a finite non-negative value, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, labels) = match spec.suite {
        Suite::Shapes => gen_shapes(spec, &mut rng)?,
        Suite::Vector => gen_vector(spec, &mut rng)?,
    };
    Ok(MtlDataset { spec: spec.clone(), seed, inputs, labels, tasks: spec.tasks() })
}

/// Binary mask of a glyph of class `class` at a random admissible position.
pub fn render_glyph(class: usize, rng: &mut impl Rng) -> [[bool; IMAGE_SIDE]; IMAGE_SIDE] {
    let mut m = [[false; IMAGE_SIDE]; IMAGE_SIDE];
    let n = IMAGE_SIDE;
    match class {
        0 => {
            let s = rng.random_range(2..=4);
            let (r, c) = (rng.random_range(0..=n - s), rng.random_range(0..=n - s));
            for row in m.iter_mut().skip(r).take(s) {
                row[c..c + s].iter_mut().for_each(|p| *p = true);
            }
        }
        1 => {
            let len = rng.random_range(3..=6);
            let (r, c) = (rng.random_range(0..n), rng.random_range(0..=n - len));
            m[r][c..c + len].iter_mut().for_each(|p| *p = true);
        }
        2 => {
            let len = rng.random_range(3..=6);
            let (r, c) = (rng.random_range(0..=n - len), rng.random_range(0..n));
            for row in m.iter_mut().skip(r).take(len) {
                row[c] = true;
            }
        }
        _ => {
            let arm = rng.random_range(1..=2);
            let (r, c) = (rng.random_range(arm..n - arm), rng.random_range(arm..n - arm));
            for d in 0..=2 * arm {
                m[r - arm + d][c] = true;
                m[r][c - arm + d] = true;
            }
        }
    }
    m
}

fn gen_shapes(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<(Array, Vec<TaskLabels>)> {
    let s = spec.samples;
    let px = IMAGE_SIDE * IMAGE_SIDE;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::arg(e.to_string()))?;
    let mut inputs = Vec::with_capacity(s * px);
    let mut classes = Vec::with_capacity(s);
    let mut area = Vec::with_capacity(s);
    let mut centroid = Vec::with_capacity(s);
    for _ in 0..s {
        let class = rng.random_range(0..4);
        let mask = render_glyph(class, rng);
        let level = rng.random_range(GLYPH_INTENSITY.0..GLYPH_INTENSITY.1);
        let mut count = 0usize;
        let mut col_sum = 0usize;
        for row in &mask {
            for (c, &on) in row.iter().enumerate() {
                if on {
                    count += 1;
                    col_sum += c;
                }
                inputs.push(if on { level } else { 0.0 } + noise.sample(rng));
            }
        }
        classes.push(class);
        area.push(count as f64 / px as f64);
        centroid.push(col_sum as f64 / count as f64 / (IMAGE_SIDE - 1) as f64);
    }
    let inputs = Array::new(vec![s, 1, IMAGE_SIDE, IMAGE_SIDE], inputs)?;
    Ok((
        inputs,
        vec![
            TaskLabels::Classes(classes),
            TaskLabels::Values(Array::new(vec![s, 1], area)?),
            TaskLabels::Values(Array::new(vec![s, 1], centroid)?),
        ],
    ))
}

fn vector_mixing() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(VECTOR_MIXING_SEED);
    (0..VECTOR_DIM * VECTOR_LATENT).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn gen_vector(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<(Array, Vec<TaskLabels>)> {
    let s = spec.samples;
    let mix = vector_mixing();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::arg(e.to_string()))?;
    let mut inputs = Vec::with_capacity(s * VECTOR_DIM);
    let mut classes = Vec::with_capacity(s);
    let mut product = Vec::with_capacity(s);
    let mut wave = Vec::with_capacity(s);
    for _ in 0..s {
        let u: [f64; VECTOR_LATENT] = std::array::from_fn(|_| StandardNormal.sample(rng));
        for d in 0..VECTOR_DIM {
            let a: f64 = (0..VECTOR_LATENT).map(|k| mix[d * VECTOR_LATENT + k] * u[k]).sum();
            inputs.push(a.tanh() + noise.sample(rng));
        }
        classes.push(usize::from(u[0] > 0.0) + 2 * usize::from(u[1] > 0.0));
        product.push(u[0] * u[1]);
        wave.push((2.0 * u[2]).sin());
    }
    Ok((
        Array::new(vec![s, VECTOR_DIM], inputs)?,
        vec![
            TaskLabels::Classes(classes),
            TaskLabels::Values(Array::new(vec![s, 1], product)?),
            TaskLabels::Values(Array::new(vec![s, 1], wave)?),
        ],
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.9, seed: 0 }
    }
}

/// Samples the SuperNet may be trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSplit(pub MtlDataset);

/// Samples reserved for predictor pairs and search-side validation.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutSplit(pub MtlDataset);

impl Deref for TrainSplit {
    type Target = MtlDataset;

    fn deref(&self) -> &MtlDataset {
        &self.0
    }
}

impl Deref for HoldoutSplit {
    type Target = MtlDataset;

    fn deref(&self) -> &MtlDataset {
        &self.0
    }
}

/// Seeded shuffle, then the first `round(fraction * S)` samples train.
pub fn split(dataset: &MtlDataset, spec: &SplitSpec) -> Result<(TrainSplit, HoldoutSplit)> {
    let s = dataset.len();
    if s < 10 {
        return Err(Error::arg(format!("splitting needs at least 10 samples, got {s}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::arg(format!("train fraction {} outside (0, 1)", spec.train_fraction)));
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((s as f64 * spec.train_fraction).round() as usize).clamp(1, s - 1);
    let (train, hold) = order.split_at(n_train);
    Ok((TrainSplit(dataset.subset(train)?), HoldoutSplit(dataset.subset(hold)?)))
}

/// The first `count` consecutive batches of training inputs, used to
/// recalibrate norm statistics.
pub fn calibration_batches(train: &TrainSplit, batch_size: usize, count: usize) -> Result<Vec<Array>> {
    Ok(train.batches(batch_size)?.into_iter().take(count.max(1)).map(|b| b.inputs).collect())
}
