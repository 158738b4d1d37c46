//! Measured sub-network evaluation and preference-controllability sweeps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::MtlDataset;
use crate::error::{Error, Result};
use crate::hv::{hypervolume_exact, hypervolume_mc, MAX_EXACT_DIMS};
use crate::predictor::LossPredictor;
use crate::search::{preference_config, preferred_task, search, PreferenceQuery, SearchConfig};
use crate::slimnet::{NormMode, SuperNet, WidthConfig};
use crate::task::{task_loss, TaskLabels};
use crate::tensor::Array;

/// Number of preference vectors in a controllability sweep.
pub const DEFAULT_PREFERENCE_COUNT: usize = 20;
/// Dirichlet concentration for dense-prediction-style suites.
pub const DEFAULT_ALPHA_DENSE: f64 = 0.2;
/// Dirichlet concentration for classification-style suites.
pub const DEFAULT_ALPHA_CLASSIFICATION: f64 = 1.0;
/// Per-task reference loss for hypervolume.
pub const DEFAULT_REFERENCE_LOSS: f64 = 4.0;
/// Monte-Carlo samples used when there are too many tasks for exact HV.
pub const SWEEP_MC_SAMPLES: usize = 100_000;

const EVAL_CHUNK: usize = 256;

/// `count` preference vectors on the simplex, via normalized Gamma draws.
pub fn dirichlet_sample(alpha: &[f64], count: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if alpha.is_empty() || count == 0 {
        return Err(Error::arg("Dirichlet sampling needs at least one task and one sample"));
    }
    let gammas = alpha
        .iter()
        .map(|&a| {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::arg(format!("Dirichlet concentration {a} must be positive")));
            }
            Ok(Gamma::new(a, 1.0).expect("positive shape"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // tiny concentrations can underflow every draw to zero
        if total > 0.0 && total.is_finite() {
            out.push(draws.into_iter().map(|d| d / total).collect());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetEval {
    /// Mean loss per task.
    pub losses: Vec<f64>,
    /// Accuracy for classification tasks, rmse for regression tasks.
    pub metrics: Vec<TaskMetric>,
}

/// Recalibrates norm statistics for `cfg` on `calib`, then measures the
/// mean per-task loss and metric over all of `data`.
pub fn evaluate_subnet(net: &SuperNet, cfg: &WidthConfig, data: &MtlDataset, calib: &[Array]) -> Result<SubnetEval> {
    if data.is_empty() {
        return Err(Error::arg("evaluation data is empty"));
    }
    if data.labels.len() != net.task_count() {
        return Err(Error::dim(format!("dataset has {} tasks, network has {}", data.labels.len(), net.task_count())));
    }
    let stats = net.bn_recalibrate(cfg, calib)?;
    let n_tasks = net.task_count();
    let mut loss_sum = vec![0.0; n_tasks];
    let mut hits = vec![0usize; n_tasks];
    let mut sq_err = vec![0.0; n_tasks];
    for batch in data.batches(EVAL_CHUNK)? {
        let rows = batch.len() as f64;
        let mut g = Graph::new();
        let out = net.forward(&mut g, cfg, &batch.inputs, NormMode::Stats(&stats))?;
        for (t, (&o, labels)) in out.outputs.iter().zip(&batch.labels).enumerate() {
            let l = task_loss(&mut g, o, labels)?;
            loss_sum[t] += g.value(l).item() * rows;
            let pred = g.value(o);
            match labels {
                TaskLabels::Classes(classes) => {
                    let k = pred.shape()[1];
                    for (row, &c) in pred.data().chunks(k).zip(classes) {
                        let arg = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                        hits[t] += usize::from(arg == c);
                    }
                }
                TaskLabels::Values(y) => {
                    let dim = y.shape()[1] as f64;
                    sq_err[t] += pred.data().iter().zip(y.data()).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / dim;
                }
            }
        }
    }
    let n = data.len() as f64;
    let metrics = data
        .labels
        .iter()
        .enumerate()
        .map(|(t, labels)| match labels {
            TaskLabels::Classes(_) => TaskMetric { name: "accuracy".into(), value: hits[t] as f64 / n },
            TaskLabels::Values(_) => TaskMetric { name: "rmse".into(), value: (sq_err[t] / n).sqrt() },
        })
        .collect();
    Ok(SubnetEval { losses: loss_sum.into_iter().map(|s| s / n).collect(), metrics })
}

/// Random baseline for a query: preference-derived decoders with
/// independently drawn encoder ratios, redrawn until the budget fits.
pub fn random_feasible_config(net: &SuperNet, query: &PreferenceQuery, rng: &mut impl Rng) -> Result<WidthConfig> {
    query.validate(net.task_count())?;
    let floor = preference_config(net, &query.preferences, net.widths().min());
    let min_macs = net.count_macs(&floor)?;
    if min_macs > query.budget_macs {
        return Err(Error::InfeasibleBudget { budget: query.budget_macs, min_macs });
    }
    loop {
        let mut cfg = floor.clone();
        cfg.encoder.iter_mut().for_each(|r| *r = net.widths().sample(rng));
        if net.count_macs(&cfg)? <= query.budget_macs {
            return Ok(cfg);
        }
    }
}

/// Budget halfway between the all-smallest and all-largest configurations.
pub fn mid_budget(net: &SuperNet) -> Result<u64> {
    let (hi, lo) = net.extremes();
    Ok((net.count_macs(&lo)? + net.count_macs(&hi)?) / 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepQuery {
    pub prefs: Vec<f64>,
    pub budget: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalPoint {
    pub pref: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    pub reference_point: Vec<f64>,
    pub queries: Vec<SweepQuery>,
    pub loss_points: Vec<Vec<f64>>,
    pub configs: Vec<WidthConfig>,
    pub macs: Vec<u64>,
    pub hv: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hv_stderr: Option<f64>,
    /// Task name to its loss averaged within preference bins.
    pub marginals: BTreeMap<String, Vec<MarginalPoint>>,
}

/// Sweep inputs that stay fixed across preference vectors.
#[derive(Clone, Debug)]
pub struct SweepSetup<'a> {
    pub data: &'a MtlDataset,
    pub calib: &'a [Array],
    pub reference: Vec<f64>,
    pub search: SearchConfig,
    pub marginal_bins: usize,
}

/// Hypervolume of `points`, exact when possible and Monte-Carlo otherwise.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64], seed: u64) -> Result<(f64, Option<f64>)> {
    if reference.len() <= MAX_EXACT_DIMS {
        Ok((hypervolume_exact(points, reference)?, None))
    } else {
        let est = hypervolume_mc(points, reference, SWEEP_MC_SAMPLES, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((est.hv, Some(est.stderr)))
    }
}

/// Searches a sub-network for every preference vector at `budget`,
/// measures it, and reports the hypervolume of the measured losses plus
/// per-task marginal curves.
pub fn controllability_sweep(
    net: &SuperNet,
    predictor: &dyn LossPredictor,
    budget: u64,
    prefs: &[Vec<f64>],
    setup: &SweepSetup<'_>,
) -> Result<ControllabilityReport> {
    if prefs.is_empty() {
        return Err(Error::arg("sweep needs at least one preference vector"));
    }
    if setup.reference.len() != net.task_count() {
        return Err(Error::dim(format!("reference has {} entries for {} tasks", setup.reference.len(), net.task_count())));
    }
    let mut queries = Vec::with_capacity(prefs.len());
    let mut loss_points = Vec::with_capacity(prefs.len());
    let mut configs = Vec::with_capacity(prefs.len());
    let mut macs = Vec::with_capacity(prefs.len());
    for (i, p) in prefs.iter().enumerate() {
        let query = PreferenceQuery { budget_macs: budget, preferences: p.clone() };
        let cfg = SearchConfig { seed: setup.search.seed.wrapping_add(i as u64), ..setup.search };
        let found = search(net, predictor, &query, &cfg)?;
        let eval = evaluate_subnet(net, &found.config, setup.data, setup.calib)?;
        queries.push(SweepQuery { prefs: p.clone(), budget });
        loss_points.push(eval.losses);
        macs.push(found.macs);
        configs.push(found.config);
    }
    let (hv, hv_stderr) = hypervolume(&loss_points, &setup.reference, setup.search.seed)?;
    let marginals = net
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, spec)| (spec.name.clone(), marginal(prefs, &loss_points, t, setup.marginal_bins.max(1))))
        .collect();
    Ok(ControllabilityReport { reference_point: setup.reference.clone(), queries, loss_points, configs, macs, hv, hv_stderr, marginals })
}

/// Loss of task `t` averaged over the queries whose preference for `t`
/// falls in each of `bins` equal bins of `[0, 1]`; empty bins are skipped.
fn marginal(prefs: &[Vec<f64>], losses: &[Vec<f64>], t: usize, bins: usize) -> Vec<MarginalPoint> {
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for (p, l) in prefs.iter().zip(losses) {
        let b = ((p[t] * bins as f64) as usize).min(bins - 1);
        acc[b].0 += p[t];
        acc[b].1 += l[t];
        acc[b].2 += 1;
    }
    acc.into_iter()
        .filter(|a| a.2 > 0)
        .map(|(ps, ls, n)| MarginalPoint { pref: ps / n as f64, mean_loss: ls / n as f64 })
        .collect()
}

/// One row per query: `query,budget,macs,pref_*,loss_*`.
pub fn write_report_csv(path: &Path, report: &ControllabilityReport) -> Result<()> {
    let n = report.reference_point.len();
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = ["query", "budget", "macs"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..n).map(|t| format!("pref_{t}")))
        .chain((0..n).map(|t| format!("loss_{t}")))
        .collect();
    w.write_record(&header)?;
    for (i, ((q, l), m)) in report.queries.iter().zip(&report.loss_points).zip(&report.macs).enumerate() {
        let row: Vec<String> = [i.to_string(), q.budget.to_string(), m.to_string()]
            .into_iter()
            .chain(q.prefs.iter().chain(l).map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of pairing searched and random configurations per preference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub searched: Vec<f64>,
    pub random: Vec<f64>,
    /// Fraction of pairs where the searched loss is not higher.
    pub win_rate: f64,
}

/// Measured preferred-task loss of the searched configuration against one
/// random feasible configuration, for each preference vector.
pub fn search_vs_random(
    net: &SuperNet,
    predictor: &dyn LossPredictor,
    budget: u64,
    prefs: &[Vec<f64>],
    setup: &SweepSetup<'_>,
    seed: u64,
) -> Result<PairedComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut searched, mut random) = (Vec::new(), Vec::new());
    for (i, p) in prefs.iter().enumerate() {
        let query = PreferenceQuery { budget_macs: budget, preferences: p.clone() };
        let t = preferred_task(p);
        let cfg = SearchConfig { seed: setup.search.seed.wrapping_add(i as u64), ..setup.search };
        let found = search(net, predictor, &query, &cfg)?;
        searched.push(evaluate_subnet(net, &found.config, setup.data, setup.calib)?.losses[t]);
        let rand_cfg = random_feasible_config(net, &query, &mut rng)?;
        random.push(evaluate_subnet(net, &rand_cfg, setup.data, setup.calib)?.losses[t]);
    }
    let wins = searched.iter().zip(&random).filter(|(s, r)| s <= r).count();
    Ok(PairedComparison { win_rate: wins as f64 / prefs.len() as f64, searched, random })
}
