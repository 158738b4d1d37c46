use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// K-way classification trained with softmax cross-entropy.
    Classification { classes: usize },
    /// d-dimensional regression trained with mean squared error.
    Regression { dim: usize },
}

impl TaskKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { dim } => dim,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TaskKind::Classification { .. } => "classification",
            TaskKind::Regression { .. } => "regression",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
}

/// Ground truth for one task over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskLabels {
    Classes(Vec<usize>),
    /// `S×dim` targets.
    Values(Array),
}

impl TaskLabels {
    pub fn len(&self) -> usize {
        match self {
            TaskLabels::Classes(c) => c.len(),
            TaskLabels::Values(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(match self {
            TaskLabels::Classes(c) => TaskLabels::Classes(
                indices
                    .iter()
                    .map(|&i| c.get(i).copied().ok_or_else(|| Error::Index(format!("label {i} out of range"))))
                    .collect::<Result<_>>()?,
            ),
            TaskLabels::Values(v) => TaskLabels::Values(v.select_rows(indices)?),
        })
    }

    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }
}

/// Task loss node: cross-entropy for classes, MSE for values.
pub fn task_loss(g: &mut Graph, output: Var, labels: &TaskLabels) -> Result<Var> {
    match labels {
        TaskLabels::Classes(c) => g.softmax_cross_entropy(output, c),
        TaskLabels::Values(v) => {
            let t = g.input(v.clone());
            g.mse(output, t)
        }
    }
}
