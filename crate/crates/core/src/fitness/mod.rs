//! Multitask fitness: `f(θ)` is the arithmetic mean of per-task scores,
//! higher is better.

mod external;
mod mlp;
mod quadratic;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::ParameterSet;

pub use external::{ExternalEvaluator, ExternalEvaluatorConfig, TASKS_ENV_VAR};
pub use mlp::{
    mlp_accuracy, mlp_base, mlp_synthetic_build, train_mlp, Dataset, MlpBenchSpec, MlpEvaluator, MlpShape, MlpTask,
};
pub use quadratic::{make_synthetic_experts, quadratic_score, QuadraticBenchSpec, QuadraticEvaluator, QuadraticTask};

/// Per-task scores and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub per_task: IndexMap<String, f64>,
    pub mean: f64,
}

impl FitnessReport {
    pub fn new(per_task: IndexMap<String, f64>) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::InvalidParameter(
                "a fitness report needs at least one task".into(),
            ));
        }
        let mean = per_task.values().sum::<f64>() / per_task.len() as f64;
        Ok(Self { per_task, mean })
    }

    pub fn from_scores<S: Into<String>>(scores: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        Self::new(scores.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

/// A generated merging problem: shared base, one expert per task, and the
/// evaluator over the optimization split (plus a holdout one when available).
#[derive(Clone, Debug)]
pub struct SyntheticProblem<E> {
    pub base: ParameterSet,
    pub experts: Vec<ParameterSet>,
    pub evaluator: E,
    pub holdout: Option<E>,
}

/// Anything that can score a parameter set on a fixed list of tasks.
pub trait FitnessEvaluator: Send + Sync {
    fn task_names(&self) -> &[String];

    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport>;

    /// Upper bound on concurrent `evaluate` calls.
    fn max_concurrency(&self) -> usize {
        usize::MAX
    }
}

impl<E: FitnessEvaluator + ?Sized> FitnessEvaluator for &E {
    fn task_names(&self) -> &[String] {
        (**self).task_names()
    }
    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport> {
        (**self).evaluate(theta)
    }
    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<E: FitnessEvaluator + ?Sized> FitnessEvaluator for Box<E> {
    fn task_names(&self) -> &[String] {
        (**self).task_names()
    }
    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport> {
        (**self).evaluate(theta)
    }
    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

/// Evaluates every position, running at most `max_concurrency()` at once.
/// Results come back in input order.
pub fn evaluate_many<E: FitnessEvaluator + ?Sized>(
    evaluator: &E,
    positions: &[&ParameterSet],
) -> Vec<Result<FitnessReport>> {
    let cap = evaluator.max_concurrency().max(1);
    if cap == 1 {
        return positions.iter().map(|p| evaluator.evaluate(p)).collect();
    }
    positions
        .chunks(cap)
        .flat_map(|chunk| chunk.par_iter().map(|p| evaluator.evaluate(p)).collect::<Vec<_>>())
        .collect()
}

/// Wraps a closure returning one score per task, in `task_names` order.
pub struct FnEvaluator<F> {
    task_names: Vec<String>,
    f: F,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&ParameterSet) -> Result<Vec<f64>> + Send + Sync,
{
    pub fn new<S: Into<String>>(task_names: impl IntoIterator<Item = S>, f: F) -> Self {
        Self {
            task_names: task_names.into_iter().map(Into::into).collect(),
            f,
        }
    }
}

impl<F> FitnessEvaluator for FnEvaluator<F>
where
    F: Fn(&ParameterSet) -> Result<Vec<f64>> + Send + Sync,
{
    fn task_names(&self) -> &[String] {
        &self.task_names
    }

    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport> {
        let scores = (self.f)(theta)?;
        if scores.len() != self.task_names.len() {
            return Err(Error::MalformedScores(format!(
                "expected {} scores, got {}",
                self.task_names.len(),
                scores.len()
            )));
        }
        FitnessReport::from_scores(self.task_names.iter().cloned().zip(scores))
    }
}
