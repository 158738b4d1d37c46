//! Budget- and preference-constrained sub-network search.
//!
//! Preferences fix every decoder's width up front. The encoder widths are
//! then evolved over a pool of budget-feasible candidates, scored by a
//! [`LossPredictor`]: each cycle mutates one encoder layer of a random pool
//! member one grid step towards the budget, admits the mutant if it fits,
//! and evicts the member predicted worst on the preferred task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::LossPredictor;
use crate::slimnet::{SuperNet, WidthConfig, WidthList, WIDTH_STEP};

pub const DEFAULT_POOL_SIZE: usize = 50;
/// Search cycles for classification-style suites.
pub const DEFAULT_CYCLES: usize = 150;
/// Search cycles for dense-prediction-style suites.
pub const DEFAULT_CYCLES_DENSE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceQuery {
    pub budget_macs: u64,
    pub preferences: Vec<f64>,
}

impl PreferenceQuery {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.preferences.len() != tasks {
            return Err(Error::arg(format!("{} preferences for {tasks} tasks", self.preferences.len())));
        }
        if let Some(p) = self.preferences.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("preference {p} outside [0, 1]")));
        }
        Ok(())
    }

    /// Index of the largest preference; ties go to the lowest index.
    pub fn preferred_task(&self) -> usize {
        preferred_task(&self.preferences)
    }
}

pub fn preferred_task(prefs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in prefs.iter().enumerate() {
        if p > prefs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub pool_size: usize,
    pub cycles: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { pool_size: DEFAULT_POOL_SIZE, cycles: DEFAULT_CYCLES, eta: WIDTH_STEP, seed: 0 }
    }
}

/// Min-max normalization; an all-equal vector maps to all ones.
pub fn normalize_prefs(prefs: &[f64]) -> Vec<f64> {
    let lo = prefs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = prefs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; prefs.len()];
    }
    prefs.iter().map(|p| (p - lo) / (hi - lo)).collect()
}

/// Decoder ratio per task: `ω_min + (ω_max - ω_min)·τ̂` snapped to the
/// nearest grid member, ties upward.
pub fn decoder_widths(normalized: &[f64], widths: &WidthList) -> Vec<f64> {
    normalized.iter().map(|t| widths.snap(widths.min() + (widths.max() - widths.min()) * t)).collect()
}

/// Configuration with every decoder at its preference width and every
/// encoder layer at `encoder_ratio`.
pub fn preference_config(net: &SuperNet, prefs: &[f64], encoder_ratio: f64) -> WidthConfig {
    let dec = decoder_widths(&normalize_prefs(prefs), net.widths());
    WidthConfig {
        encoder: vec![encoder_ratio; net.encoder_layer_count()],
        decoders: net.decoder_layer_counts().iter().zip(&dec).map(|(&n, &w)| vec![w; n]).collect(),
    }
}

fn step_count(eta: f64) -> Result<i64> {
    let steps = (eta / WIDTH_STEP).round();
    if !(eta > 0.0) || steps < 1.0 || (steps * WIDTH_STEP - eta).abs() > 1e-9 {
        return Err(Error::arg(format!("mutation step {eta} is not a positive multiple of the grid spacing {WIDTH_STEP}")));
    }
    Ok(steps as i64)
}

/// Moves encoder layer `layer_index` by `eta` towards the budget: up when
/// under it, down when over, unchanged when exactly at it. The result is
/// clamped to the width list. Indices address the flattened ratio vector,
/// so decoder positions are rejected.
pub fn mutate(net: &SuperNet, cfg: &WidthConfig, layer_index: usize, budget: u64, eta: f64) -> Result<WidthConfig> {
    let enc = net.encoder_layer_count();
    if layer_index >= net.slimmable_layer_count() {
        return Err(Error::arg(format!("layer index {layer_index} out of range")));
    }
    if layer_index >= enc {
        return Err(Error::arg(format!("layer index {layer_index} is a decoder layer; only encoder layers mutate")));
    }
    let steps = step_count(eta)?;
    let macs = net.count_macs(cfg)?;
    let direction = match budget.cmp(&macs) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => -1,
        std::cmp::Ordering::Equal => 0,
    };
    let current = (cfg.encoder[layer_index] * 10.0).round() as i64;
    let lo = (net.widths().min() * 10.0).round() as i64;
    let hi = (net.widths().max() * 10.0).round() as i64;
    let next = (current + direction * steps).clamp(lo, hi);
    let mut out = cfg.clone();
    out.encoder[layer_index] = next as f64 / 10.0;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: WidthConfig,
    pub macs: u64,
    pub predicted: Vec<f64>,
}

fn candidate(net: &SuperNet, predictor: &dyn LossPredictor, config: WidthConfig) -> Result<Candidate> {
    let macs = net.count_macs(&config)?;
    let predicted = predictor.predict(&config)?;
    if predicted.len() != net.task_count() {
        return Err(Error::dim(format!("predictor returned {} losses for {} tasks", predicted.len(), net.task_count())));
    }
    Ok(Candidate { config, macs, predicted })
}

/// Pool of `pool_size` candidates with uniform encoder widths that fit the
/// budget. The largest feasible uniform width comes first; the rest are
/// drawn uniformly from the feasible uniform widths.
pub fn init_pool(
    net: &SuperNet,
    predictor: &dyn LossPredictor,
    query: &PreferenceQuery,
    pool_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Candidate>> {
    query.validate(net.task_count())?;
    if pool_size == 0 {
        return Err(Error::arg("pool size must be at least 1"));
    }
    let mut feasible = Vec::new();
    let mut min_macs = u64::MAX;
    for &r in net.widths().ratios() {
        let cfg = preference_config(net, &query.preferences, r);
        let macs = net.count_macs(&cfg)?;
        min_macs = min_macs.min(macs);
        if macs <= query.budget_macs {
            feasible.push(cfg);
        }
    }
    let Some(largest) = feasible.last().cloned() else {
        return Err(Error::InfeasibleBudget { budget: query.budget_macs, min_macs });
    };
    let mut pool = vec![candidate(net, predictor, largest)?];
    while pool.len() < pool_size {
        let cfg = feasible[rng.random_range(0..feasible.len())].clone();
        pool.push(candidate(net, predictor, cfg)?);
    }
    Ok(pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub cycle: usize,
    /// Predicted preferred-task loss of the pool's best member after the cycle.
    pub best_predicted: f64,
    pub macs: u64,
    pub admitted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: WidthConfig,
    pub macs: u64,
    pub predicted_losses: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

/// Ranking key: preferred-task loss, then preference-weighted total loss.
fn rank_key(c: &Candidate, prefs: &[f64], preferred: usize) -> (f64, f64) {
    (c.predicted[preferred], c.predicted.iter().zip(prefs).map(|(l, p)| l * p).sum())
}

fn best_index(pool: &[Candidate], prefs: &[f64], preferred: usize) -> usize {
    let mut best = 0;
    for i in 1..pool.len() {
        let (a, b) = (rank_key(&pool[i], prefs, preferred), rank_key(&pool[best], prefs, preferred));
        if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
            best = i;
        }
    }
    best
}

fn worst_index(pool: &[Candidate], prefs: &[f64], preferred: usize) -> usize {
    let mut worst = 0;
    for i in 1..pool.len() {
        let (a, b) = (rank_key(&pool[i], prefs, preferred), rank_key(&pool[worst], prefs, preferred));
        if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
            worst = i;
        }
    }
    worst
}

/// Evolves the encoder widths for `cycles` cycles and returns the pool
/// member with the lowest predicted preferred-task loss.
pub fn search(net: &SuperNet, predictor: &dyn LossPredictor, query: &PreferenceQuery, cfg: &SearchConfig) -> Result<SearchResult> {
    step_count(cfg.eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = init_pool(net, predictor, query, cfg.pool_size, &mut rng)?;
    let prefs = &query.preferences;
    let preferred = query.preferred_task();
    let enc = net.encoder_layer_count();
    let mut trace = Vec::with_capacity(cfg.cycles);
    for cycle in 1..=cfg.cycles {
        let parent = &pool[rng.random_range(0..pool.len())];
        let layer = rng.random_range(0..enc);
        let child = mutate(net, &parent.config, layer, query.budget_macs, cfg.eta)?;
        let child = candidate(net, predictor, child)?;
        let admitted = child.macs <= query.budget_macs;
        if admitted {
            pool.push(child);
            let worst = worst_index(&pool, prefs, preferred);
            pool.remove(worst);
        }
        let best = &pool[best_index(&pool, prefs, preferred)];
        trace.push(TraceEntry { cycle, best_predicted: best.predicted[preferred], macs: best.macs, admitted });
    }
    let best = pool.swap_remove(best_index(&pool, prefs, preferred));
    Ok(SearchResult { config: best.config, macs: best.macs, predicted_losses: best.predicted, trace })
}
