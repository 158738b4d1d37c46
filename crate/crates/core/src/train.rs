//! SuperNet training with the sandwich rule and configuration-invariant
//! feature distillation.
//!
//! Every step runs the largest configuration on the task losses alone, cuts
//! its encoder feature from the graph, then runs `b - 1` children (`b - 2`
//! random configurations plus the smallest one). Each child learns from the
//! ground-truth labels and additionally matches the channel-averaged encoder
//! feature of the largest model. Gradients of all `b` models accumulate
//! before a single optimizer step.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Batch, TrainSplit};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::slimnet::{NormMode, SuperNet, WidthConfig};
use crate::task::{task_loss, TaskLabels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    /// Models per sandwich step, including the largest and smallest.
    pub b: usize,
    /// Weight of the distillation term.
    pub lambda: f64,
    /// Per-task loss weights; empty means all ones.
    pub rho: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            b: 4,
            lambda: 1.0,
            rho: Vec::new(),
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            seed: 0,
        }
    }
}

impl TrainingRecipe {
    pub fn task_weights(&self, tasks: usize) -> Result<Vec<f64>> {
        if self.b < 2 {
            return Err(Error::Recipe(format!("sandwich size b must be at least 2, got {}", self.b)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Recipe(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::Recipe("batch size must be at least 2 for batch statistics".into()));
        }
        if self.rho.is_empty() {
            return Ok(vec![1.0; tasks]);
        }
        if self.rho.len() != tasks {
            return Err(Error::Recipe(format!("{} task weights for {tasks} tasks", self.rho.len())));
        }
        if let Some(bad) = self.rho.iter().find(|&&r| !(r > 0.0)) {
            return Err(Error::Recipe(format!("task weight {bad} is not positive")));
        }
        Ok(self.rho.clone())
    }
}

/// `Σ ρₙ·Lₙ` over the task outputs. Returns the total node and each
/// unweighted task loss value.
pub fn weighted_task_loss(g: &mut Graph, outputs: &[Var], labels: &[TaskLabels], rho: &[f64]) -> Result<(Var, Vec<f64>)> {
    if outputs.len() != labels.len() || outputs.len() != rho.len() || outputs.is_empty() {
        return Err(Error::arg(format!(
            "{} outputs, {} label sets and {} weights",
            outputs.len(),
            labels.len(),
            rho.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(outputs.len());
    for ((&out, lab), &w) in outputs.iter().zip(labels).zip(rho) {
        let l = task_loss(g, out, lab)?;
        values.push(g.value(l).item());
        let weighted = g.scale(l, w);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok((total.expect("at least one task"), values))
}

/// Mean over children of the MSE between channel-averaged teacher and child
/// features. The teacher feature is detached first, so no gradient reaches it.
pub fn cikd_loss(g: &mut Graph, teacher_z: Var, child_zs: &[Var]) -> Result<Var> {
    if child_zs.is_empty() {
        return Err(Error::arg("distillation needs at least one child feature"));
    }
    let teacher = g.detach(teacher_z);
    let target = g.channel_mean(teacher)?;
    let mut total: Option<Var> = None;
    for &z in child_zs {
        let m = g.channel_mean(z)?;
        let e = g.mse(m, target)?;
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / child_zs.len() as f64))
}

/// Losses of one model within a sandwich step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLoss {
    pub config: WidthConfig,
    pub task_losses: Vec<f64>,
    /// Distillation MSE against the teacher; zero for the teacher itself.
    pub kd: f64,
}

#[derive(Clone, Debug)]
pub struct SandwichReport {
    /// Largest model first, random children next, smallest last.
    pub models: Vec<ModelLoss>,
    /// Largest absolute gradient reaching any teacher parameter leaf from the
    /// distillation terms; present when auditing was requested.
    pub kd_teacher_grad_max: Option<f64>,
}

/// One sandwich-rule update. Clears the gradient buffers, accumulates the
/// gradients of all `b` models and, when `optimizer` is given, applies one
/// step. Buffers are left populated for inspection.
pub fn sandwich_step(
    net: &mut SuperNet,
    batch: &Batch,
    recipe: &TrainingRecipe,
    rng: &mut ChaCha8Rng,
    optimizer: Option<&mut AdamState>,
    audit_kd: bool,
) -> Result<SandwichReport> {
    let rho = recipe.task_weights(net.task_count())?;
    net.params_mut().zero_grad();
    let (largest, smallest) = net.extremes();
    let mut g = Graph::new();

    let out = net.forward(&mut g, &largest, &batch.inputs, NormMode::Batch)?;
    let (loss, task_losses) = weighted_task_loss(&mut g, &out.outputs, &batch.labels, &rho)?;
    g.backward(loss, net.params_mut())?;
    let teacher_end = g.len();
    let teacher_z = g.detach(out.z);
    let mut models = vec![ModelLoss { config: largest, task_losses, kd: 0.0 }];

    let mut children: Vec<WidthConfig> = (0..recipe.b - 2).map(|_| net.sample_config(rng)).collect();
    children.push(smallest);
    let kd_scale = recipe.lambda / (recipe.b - 1) as f64;
    let mut kd_teacher_grad_max = audit_kd.then_some(0.0f64);
    for cfg in children {
        let out = net.forward(&mut g, &cfg, &batch.inputs, NormMode::Batch)?;
        let (lco, task_losses) = weighted_task_loss(&mut g, &out.outputs, &batch.labels, &rho)?;
        let kd = cikd_loss(&mut g, teacher_z, &[out.z])?;
        let kd_value = g.value(kd).item();
        if let Some(worst) = kd_teacher_grad_max.as_mut() {
            let grads = g.node_grads(kd)?;
            for (leaf, _) in g.param_leaves().filter(|(v, _)| v.index() < teacher_end) {
                if let Some(gr) = grads.get(leaf) {
                    *worst = worst.max(gr.max_abs());
                }
            }
        }
        let weighted_kd = g.scale(kd, kd_scale);
        let total = g.add(lco, weighted_kd)?;
        g.backward(total, net.params_mut())?;
        models.push(ModelLoss { config: cfg, task_losses, kd: kd_value });
    }
    if let Some(opt) = optimizer {
        opt.step(net.params_mut())?;
    }
    Ok(SandwichReport { models, kd_teacher_grad_max })
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub config_tag: String,
    pub task_id: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    /// Worst teacher-leaf gradient from distillation over all audited steps.
    pub kd_teacher_grad_max: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub audit_kd: bool,
}

/// Runs `recipe.epochs` epochs of sandwich steps over shuffled mini-batches
/// and records the per-epoch mean task losses of the largest and smallest
/// configurations. Batches of a single sample are skipped.
pub fn train_supernet(net: &mut SuperNet, data: &TrainSplit, recipe: &TrainingRecipe, opts: TrainOptions) -> Result<TrainReport> {
    recipe.task_weights(net.task_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut adam = AdamState::new(recipe.adam, net.params());
    let n_tasks = net.task_count();
    let mut report = TrainReport { kd_teacher_grad_max: opts.audit_kd.then_some(0.0), ..Default::default() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=recipe.epochs {
        order.shuffle(&mut rng);
        let mut sums = [vec![0.0; n_tasks], vec![0.0; n_tasks]];
        let mut steps = 0usize;
        for (bi, chunk) in order.chunks(recipe.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.batch(chunk)?;
            let rep = sandwich_step(net, &batch, recipe, &mut rng, Some(&mut adam), opts.audit_kd)
                .map_err(|e| match e {
                    Error::Numeric { .. } => Error::NonFiniteLoss { epoch, batch: bi },
                    other => other,
                })?;
            let largest = &rep.models[0];
            let smallest = rep.models.last().expect("b >= 2");
            if largest.task_losses.iter().chain(&smallest.task_losses).any(|l| !l.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            for (s, m) in sums.iter_mut().zip([largest, smallest]) {
                s.iter_mut().zip(&m.task_losses).for_each(|(a, l)| *a += l);
            }
            if let (Some(w), Some(r)) = (report.kd_teacher_grad_max.as_mut(), rep.kd_teacher_grad_max) {
                *w = w.max(r);
            }
            steps += 1;
        }
        for (tag, s) in ["largest", "smallest"].iter().zip(&sums) {
            for (task_id, total) in s.iter().enumerate() {
                report.history.push(LossRecord {
                    epoch,
                    config_tag: tag.to_string(),
                    task_id,
                    loss: total / steps.max(1) as f64,
                });
            }
        }
        log::debug!("epoch {epoch}: largest {:?}", sums[0].iter().map(|v| v / steps.max(1) as f64).collect::<Vec<_>>());
    }
    Ok(report)
}

/// Writes the loss history as CSV: `epoch,config_tag,task_id,loss`.
pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    #[test]
    fn weighted_sum_of_losses() {
        let mut g = Graph::new();
        // two regression outputs with MSE 0.5 and 0.25
        let a = g.input(Array::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let b = g.input(Array::new(vec![1, 1], vec![0.5]).unwrap());
        let la = TaskLabels::Values(Array::zeros(&[2, 1]));
        let lb = TaskLabels::Values(Array::zeros(&[1, 1]));
        let (t, parts) = weighted_task_loss(&mut g, &[a, b], &[la.clone(), lb.clone()], &[1.0, 2.0]).unwrap();
        assert_eq!(parts, vec![0.5, 0.25]);
        assert_eq!(g.value(t).item(), 1.0);
        assert!(weighted_task_loss(&mut g, &[a], &[la, lb], &[1.0]).is_err());

        let zero = TaskLabels::Values(Array::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let (t, _) = weighted_task_loss(&mut g, &[a], &[zero], &[3.0]).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn cikd_values() {
        let mut g = Graph::new();
        let teacher = g.input(Array::ones(&[1, 3, 2, 2]));
        let child = g.input(Array::zeros(&[1, 2, 2, 2]));
        let kd = cikd_loss(&mut g, teacher, &[child]).unwrap();
        assert_eq!(g.value(kd).item(), 1.0);
        let same = g.input(Array::ones(&[1, 5, 2, 2]));
        let kd = cikd_loss(&mut g, teacher, &[same]).unwrap();
        assert_eq!(g.value(kd).item(), 0.0);

        // children with MSE 0.2 and 0.6 against a zero teacher
        let t0 = g.input(Array::zeros(&[1, 1, 1, 1]));
        let c1 = g.input(Array::filled(&[1, 1, 1, 1], 0.2f64.sqrt()));
        let c2 = g.input(Array::filled(&[1, 1, 1, 1], 0.6f64.sqrt()));
        let kd = cikd_loss(&mut g, t0, &[c1, c2]).unwrap();
        assert!((g.value(kd).item() - 0.4).abs() < 1e-15);

        let wrong = g.input(Array::zeros(&[1, 1, 3, 2]));
        assert!(matches!(cikd_loss(&mut g, teacher, &[wrong]), Err(Error::Dimension(_))));
    }

    #[test]
    fn recipe_validation() {
        let r = TrainingRecipe { b: 1, ..Default::default() };
        assert!(matches!(r.task_weights(3), Err(Error::Recipe(_))));
        let r = TrainingRecipe { rho: vec![1.0, 0.0, 1.0], ..Default::default() };
        assert!(matches!(r.task_weights(3), Err(Error::Recipe(_))));
        assert_eq!(TrainingRecipe::default().task_weights(2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(TrainingRecipe::default().b, 4);
    }
}
