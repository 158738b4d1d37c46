//! Measured evaluation shared by the `eval` command and the service.

use ecmt_core::data::{calibration_batches, MtlDataset, TrainSplit};
use ecmt_core::evaluation::{evaluate_subnet, TaskMetric};
use ecmt_core::slimnet::{SuperNet, WidthConfig};
use ecmt_core::{Array, Result};
use serde::{Deserialize, Serialize};

pub const CALIBRATION_BATCH: usize = 32;
pub const CALIBRATION_BATCHES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub losses: Vec<f64>,
    pub metrics: Vec<TaskMetric>,
    pub macs: u64,
}

/// Norm calibration inputs drawn from the evaluated dataset itself.
pub fn calibration_for(data: &MtlDataset) -> Result<Vec<Array>> {
    calibration_batches(&TrainSplit(data.clone()), CALIBRATION_BATCH, CALIBRATION_BATCHES)
}

pub fn measure(net: &SuperNet, cfg: &WidthConfig, data: &MtlDataset, calib: &[Array]) -> Result<Measurement> {
    net.validate(cfg)?;
    let eval = evaluate_subnet(net, cfg, data, calib)?;
    Ok(Measurement { losses: eval.losses, metrics: eval.metrics, macs: net.count_macs(cfg)? })
}
