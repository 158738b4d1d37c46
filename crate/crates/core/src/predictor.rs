//! Per-task loss predictor over width configurations.
//!
//! A configuration is flattened into its ratio vector (encoder layers first,
//! then each decoder in task order) and fed to a small rectified MLP trunk
//! with one scalar head per task.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, ParamId, Params, Var};
use crate::container;
use crate::data::HoldoutSplit;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_subnet;
use crate::optim::{AdamConfig, AdamState};
use crate::slimnet::{SuperNet, WidthConfig};
use crate::tensor::Array;

/// Hidden widths of the predictor trunk.
pub const TRUNK_WIDTHS: [usize; 3] = [100, 100, 50];

/// Default number of sampled configurations for pair collection.
pub const DEFAULT_PAIRS: usize = 200;

/// Flattens a configuration: encoder ratios, then each decoder's ratios.
pub fn encode_config(cfg: &WidthConfig) -> Vec<f64> {
    cfg.ratios().collect()
}

/// Inverse of [`encode_config`] given the per-part layer counts.
pub fn decode_config(arch: &[f64], encoder_layers: usize, decoder_layers: &[usize]) -> Result<WidthConfig> {
    let total = encoder_layers + decoder_layers.iter().sum::<usize>();
    if arch.len() != total {
        return Err(Error::dim(format!("arch vector has {} entries, expected {total}", arch.len())));
    }
    let (enc, mut rest) = arch.split_at(encoder_layers);
    let mut decoders = Vec::with_capacity(decoder_layers.len());
    for &n in decoder_layers {
        let (d, tail) = rest.split_at(n);
        decoders.push(d.to_vec());
        rest = tail;
    }
    Ok(WidthConfig { encoder: enc.to_vec(), decoders })
}

/// A sampled configuration and its measured per-task losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub arch: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Samples `m` configurations uniformly and measures each one's per-task
/// loss on the holdout split after recalibrating norm statistics on `calib`.
pub fn collect_pairs(net: &SuperNet, m: usize, val: &HoldoutSplit, calib: &[Array], seed: u64) -> Result<Vec<AccuracyRecord>> {
    if m < 1 {
        return Err(Error::arg("pair collection needs at least one configuration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<WidthConfig> = (0..m).map(|_| net.sample_config(&mut rng)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(m);
    let chunk = m.div_ceil(workers);
    let results: Vec<Result<Vec<AccuracyRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|cfg| {
                            let eval = evaluate_subnet(net, cfg, val, calib)?;
                            Ok(AccuracyRecord { arch: encode_config(cfg), losses: eval.losses })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("pair collection worker panicked")).collect()
    });
    let mut records = Vec::with_capacity(m);
    for r in results {
        records.extend(r?);
    }
    Ok(records)
}

pub fn write_records_csv(path: &Path, records: &[AccuracyRecord]) -> Result<()> {
    let first = records.first().ok_or_else(|| Error::arg("no records to write"))?;
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..first.arch.len())
        .map(|i| format!("arch_{i}"))
        .chain((0..first.losses.len()).map(|n| format!("loss_task{n}")))
        .collect();
    w.write_record(&header)?;
    for r in records {
        if r.arch.len() != first.arch.len() || r.losses.len() != first.losses.len() {
            return Err(Error::dim("records have inconsistent lengths"));
        }
        w.write_record(r.arch.iter().chain(&r.losses).map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<AccuracyRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let n_arch = headers.iter().filter(|h| h.starts_with("arch_")).count();
    let n_loss = headers.iter().filter(|h| h.starts_with("loss_task")).count();
    if n_arch == 0 || n_loss == 0 || n_arch + n_loss != headers.len() {
        return Err(Error::format("records CSV needs arch_* and loss_task* columns only"));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let vals = row
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::format(format!("bad number `{s}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(AccuracyRecord { arch: vals[..n_arch].to_vec(), losses: vals[n_arch..].to_vec() });
    }
    Ok(out)
}

/// Anything that maps a configuration to predicted per-task losses.
pub trait LossPredictor {
    fn predict(&self, cfg: &WidthConfig) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        Self { epochs: 150, lr: 1e-3, batch_size: 16, holdout_fraction: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

/// Rectified MLP trunk with one linear head per task. Heads predict
/// standardized losses; `offset` and `scale` map them back.
#[derive(Clone, Debug)]
pub struct Predictor {
    input_dim: usize,
    params: Params,
    trunk: Vec<Affine>,
    heads: Vec<Affine>,
    offset: Vec<f64>,
    scale: Vec<f64>,
}

impl Predictor {
    fn build(input_dim: usize, tasks: usize, mut init: impl FnMut(&[usize], usize) -> Array) -> Result<Self> {
        if input_dim == 0 || tasks == 0 {
            return Err(Error::arg("predictor needs a non-empty input and at least one task"));
        }
        let mut params = Params::new();
        let mut affine = |params: &mut Params, name: String, fan_in: usize, fan_out: usize| Affine {
            weight: params.add(format!("{name}.weight"), init(&[fan_in, fan_out], fan_in)),
            bias: params.add(format!("{name}.bias"), Array::zeros(&[fan_out])),
        };
        let mut trunk = Vec::new();
        let mut fan_in = input_dim;
        for (i, &w) in TRUNK_WIDTHS.iter().enumerate() {
            trunk.push(affine(&mut params, format!("trunk.{i}"), fan_in, w));
            fan_in = w;
        }
        let heads = (0..tasks).map(|t| affine(&mut params, format!("head{t}"), fan_in, 1)).collect();
        Ok(Self { input_dim, params, trunk, heads, offset: vec![0.0; tasks], scale: vec![1.0; tasks] })
    }

    /// He-normal initialization.
    pub fn new(input_dim: usize, tasks: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(input_dim, tasks, |shape, fan_in| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("consistent shape")
        })
    }

    /// All parameters zero; every prediction is 0.
    pub fn zeros(input_dim: usize, tasks: usize) -> Result<Self> {
        Self::build(input_dim, tasks, |shape, _| Array::zeros(shape))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        for a in &self.trunk {
            let w = g.param_full(&self.params, a.weight);
            let b = g.param_full(&self.params, a.bias);
            let m = g.matmul(h, w)?;
            let z = g.add_bias(m, b)?;
            h = g.relu(z);
        }
        self.heads
            .iter()
            .map(|a| {
                let w = g.param_full(&self.params, a.weight);
                let b = g.param_full(&self.params, a.bias);
                let m = g.matmul(h, w)?;
                g.add_bias(m, b)
            })
            .collect()
    }

    /// Predicted per-task losses for one ratio vector.
    pub fn predict_arch(&self, arch: &[f64]) -> Result<Vec<f64>> {
        if arch.len() != self.input_dim {
            return Err(Error::dim(format!("arch vector has {} entries, predictor expects {}", arch.len(), self.input_dim)));
        }
        let mut g = Graph::new();
        let x = g.input(Array::new(vec![1, arch.len()], arch.to_vec())?);
        let outs = self.forward(&mut g, x)?;
        Ok(outs
            .iter()
            .enumerate()
            .map(|(t, &o)| g.value(o).data()[0] * self.scale[t] + self.offset[t])
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": "predictor",
            "input_dim": self.input_dim,
            "tasks": self.task_count(),
            "offset": self.offset,
            "scale": self.scale,
        });
        let arrays: Vec<(String, &Array)> =
            self.params.ids().map(|id| (self.params.name(id).to_string(), self.params.value(id))).collect();
        container::write(path, header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays) = container::read(path)?;
        if header.get("format").and_then(|f| f.as_str()) != Some("predictor") {
            return Err(Error::format("container does not hold a predictor"));
        }
        let field = |k: &str| header.get(k).cloned().ok_or_else(|| Error::format(format!("predictor header lacks `{k}`")));
        let input_dim: usize = serde_json::from_value(field("input_dim")?).map_err(|e| Error::format(e.to_string()))?;
        let tasks: usize = serde_json::from_value(field("tasks")?).map_err(|e| Error::format(e.to_string()))?;
        let offset: Vec<f64> = serde_json::from_value(field("offset")?).map_err(|e| Error::format(e.to_string()))?;
        let scale: Vec<f64> = serde_json::from_value(field("scale")?).map_err(|e| Error::format(e.to_string()))?;
        if offset.len() != tasks || scale.len() != tasks {
            return Err(Error::format("predictor target scaling does not match task count"));
        }
        let mut p = Self::zeros(input_dim, tasks)?;
        if arrays.len() != p.params.len() {
            return Err(Error::format(format!("expected {} predictor arrays, found {}", p.params.len(), arrays.len())));
        }
        for (name, value) in arrays {
            let id = p.params.find(&name).ok_or_else(|| Error::format(format!("unknown parameter `{name}`")))?;
            if p.params.value(id).shape() != value.shape() {
                return Err(Error::format(format!("parameter `{name}` has shape {:?}", value.shape())));
            }
            *p.params.value_mut(id) = value;
        }
        p.offset = offset;
        p.scale = scale;
        Ok(p)
    }
}

impl LossPredictor for Predictor {
    fn predict(&self, cfg: &WidthConfig) -> Result<Vec<f64>> {
        self.predict_arch(&encode_config(cfg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    /// Mean absolute error per task on the internal holdout.
    pub holdout_l1: Vec<f64>,
    /// Same error for a predictor returning the training mean.
    pub baseline_l1: Vec<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub degenerate: bool,
}

fn column_stats(rows: &[&AccuracyRecord], t: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.losses[t]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.losses[t] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn holdout_l1(rows: &[&AccuracyRecord], tasks: usize, predict: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut err = vec![0.0; tasks];
    for r in rows {
        let p = predict(&r.arch)?;
        err.iter_mut().zip(p.iter().zip(&r.losses)).for_each(|(e, (p, l))| *e += (p - l).abs());
    }
    Ok(err.into_iter().map(|e| e / rows.len() as f64).collect())
}

/// Fits a predictor with Adam on the mean per-task L1 of standardized
/// targets, holding out a seeded fraction of the records for reporting.
/// All-identical records produce a mean predictor and a warning.
pub fn train_predictor(records: &[AccuracyRecord], hyper: &PredictorHyper) -> Result<(Predictor, PredictorReport)> {
    if records.len() < 2 {
        return Err(Error::arg(format!("predictor training needs at least 2 records, got {}", records.len())));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 || !(hyper.lr > 0.0) {
        return Err(Error::Recipe("predictor epochs, batch size and learning rate must be positive".into()));
    }
    if !(hyper.holdout_fraction > 0.0 && hyper.holdout_fraction < 1.0) {
        return Err(Error::Recipe(format!("holdout fraction {} outside (0, 1)", hyper.holdout_fraction)));
    }
    let dim = records[0].arch.len();
    let tasks = records[0].losses.len();
    if records.iter().any(|r| r.arch.len() != dim || r.losses.len() != tasks) {
        return Err(Error::dim("records have inconsistent lengths"));
    }
    if records.iter().flat_map(|r| &r.losses).any(|l| !l.is_finite()) {
        return Err(Error::arg("records contain non-finite losses"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((records.len() as f64 * hyper.holdout_fraction).round() as usize).clamp(1, records.len() - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train: Vec<&AccuracyRecord> = train_idx.iter().map(|&i| &records[i]).collect();
    let hold: Vec<&AccuracyRecord> = hold_idx.iter().map(|&i| &records[i]).collect();

    let stats: Vec<(f64, f64)> = (0..tasks).map(|t| column_stats(&train, t)).collect();
    let degenerate = records.iter().all(|r| r.losses == records[0].losses);
    let mut predictor;
    if degenerate {
        log::warn!("all loss records are identical; returning a mean predictor");
        predictor = Predictor::zeros(dim, tasks)?;
        predictor.offset = stats.iter().map(|s| s.0).collect();
    } else {
        predictor = Predictor::new(dim, tasks, hyper.seed)?;
        predictor.offset = stats.iter().map(|s| s.0).collect();
        predictor.scale = stats.iter().map(|&(_, sd)| if sd > 0.0 { sd } else { 1.0 }).collect();
        let adam_cfg = AdamConfig { lr: hyper.lr, ..AdamConfig::default() };
        let mut adam = AdamState::new(adam_cfg, &predictor.params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..hyper.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch_size) {
                let x: Vec<f64> = chunk.iter().flat_map(|&i| train[i].arch.iter().copied()).collect();
                predictor.params.zero_grad();
                let mut g = Graph::new();
                let xv = g.input(Array::new(vec![chunk.len(), dim], x)?);
                let outs = predictor.forward(&mut g, xv)?;
                let mut total: Option<Var> = None;
                for (t, &o) in outs.iter().enumerate() {
                    let y: Vec<f64> = chunk
                        .iter()
                        .map(|&i| (train[i].losses[t] - predictor.offset[t]) / predictor.scale[t])
                        .collect();
                    let yv = g.input(Array::new(vec![chunk.len(), 1], y)?);
                    let l = g.l1(o, yv)?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
                let loss = g.scale(total.expect("at least one task"), 1.0 / tasks as f64);
                g.backward(loss, &mut predictor.params)?;
                adam.step(&mut predictor.params)?;
            }
        }
    }
    let report = PredictorReport {
        holdout_l1: holdout_l1(&hold, tasks, |a| predictor.predict_arch(a))?,
        baseline_l1: holdout_l1(&hold, tasks, |_| Ok(stats.iter().map(|s| s.0).collect()))?,
        train_size: train.len(),
        holdout_size: hold.len(),
        degenerate,
    };
    Ok((predictor, report))
}
