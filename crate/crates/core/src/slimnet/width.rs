use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid spacing between admissible width ratios.
pub const WIDTH_STEP: f64 = 0.1;

const TOL: f64 = 1e-9;

/// Number of active channels for `ratio` of `full`: `ceil(ratio * full)`,
/// never below one.
pub fn active_count(ratio: f64, full: usize) -> usize {
    let raw = (ratio * full as f64 - TOL).ceil();
    (raw.max(1.0) as usize).min(full)
}

fn canonical(r: f64) -> f64 {
    (r * 10.0).round() / 10.0
}

/// Admissible width ratios: ascending, spaced by exactly 0.1, ending at 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WidthList {
    ratios: Vec<f64>,
}

impl WidthList {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        let Some(&last) = ratios.last() else {
            return Err(Error::config("width list is empty"));
        };
        if (last - 1.0).abs() > TOL {
            return Err(Error::config(format!("width list must end at 1.0, ends at {last}")));
        }
        for w in ratios.windows(2) {
            if ((w[1] - w[0]) - WIDTH_STEP).abs() > TOL {
                return Err(Error::config(format!(
                    "width list spacing must be {WIDTH_STEP}, found {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if ratios[0] <= TOL {
            return Err(Error::config(format!("width ratio {} is not positive", ratios[0])));
        }
        Ok(Self { ratios: ratios.into_iter().map(canonical).collect() })
    }

    /// Every grid value from `min` up to 1.0.
    pub fn from_min(min: f64) -> Result<Self> {
        let steps = ((1.0 - min) / WIDTH_STEP).round() as i64;
        if steps < 0 || (1.0 - steps as f64 * WIDTH_STEP - min).abs() > TOL {
            return Err(Error::config(format!("{min} is not on the {WIDTH_STEP} grid below 1.0")));
        }
        Self::new((0..=steps).map(|i| (10 - steps + i) as f64 / 10.0).collect())
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.ratios[0]
    }

    pub fn max(&self) -> f64 {
        self.ratios[self.ratios.len() - 1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.ratios[i]
    }

    pub fn index_of(&self, ratio: f64) -> Option<usize> {
        self.ratios.iter().position(|r| (r - ratio).abs() < TOL)
    }

    pub fn contains(&self, ratio: f64) -> bool {
        self.index_of(ratio).is_some()
    }

    /// Nearest member; exact midpoints go to the larger member.
    pub fn snap(&self, raw: f64) -> f64 {
        let mut best = self.ratios[0];
        for &r in &self.ratios {
            if (raw - r).abs() <= (raw - best).abs() + TOL {
                best = r;
            }
        }
        best
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.ratios[rng.random_range(0..self.ratios.len())]
    }
}

impl TryFrom<Vec<f64>> for WidthList {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WidthList> for Vec<f64> {
    fn from(w: WidthList) -> Self {
        w.ratios
    }
}

/// One width ratio per slimmable layer: encoder layers, then each task
/// decoder's layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub encoder: Vec<f64>,
    pub decoders: Vec<Vec<f64>>,
}

impl WidthConfig {
    pub fn layer_count(&self) -> usize {
        self.encoder.len() + self.decoders.iter().map(Vec::len).sum::<usize>()
    }

    pub fn ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.encoder.iter().chain(self.decoders.iter().flatten()).copied()
    }
}
