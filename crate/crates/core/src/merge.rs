//! Single-shot merging baselines and an evolution-strategy weight search.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::{evaluate_many, FitnessEvaluator, FitnessReport};
use crate::rng::keyed_rng;
use crate::task_vectors::{
    apply_delta, dare_sparsify, della_prune, elect_and_merge, expert_seed, make_task_vector, rankmean_weights,
    ties_trim_elect, weighted_sum, TaskVector,
};
use crate::tensor_store::{ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    TaskArithmetic,
    DareLinear,
    Ties,
    DareTies,
    Della,
    Rankmean,
    EsWeightSearch,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 7] = [
        MergeMethod::TaskArithmetic,
        MergeMethod::DareLinear,
        MergeMethod::Ties,
        MergeMethod::DareTies,
        MergeMethod::Della,
        MergeMethod::Rankmean,
        MergeMethod::EsWeightSearch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::DareLinear => "dare_linear",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare_ties",
            MergeMethod::Della => "della",
            MergeMethod::Rankmean => "rankmean",
            MergeMethod::EsWeightSearch => "es_weight_search",
        }
    }

    /// Whether the method uses the scaling term λ.
    pub fn uses_scaling(self) -> bool {
        !matches!(self, MergeMethod::Rankmean | MergeMethod::EsWeightSearch)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Error::InvalidParameter(format!("unknown method `{s}`; valid methods: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsParams {
    /// Candidates per generation; `4 + ⌊3 ln n⌋` when unset.
    pub population: Option<usize>,
    pub sigma: f64,
    /// Hard cap on fitness evaluations; `n · steps` when unset.
    pub budget: Option<usize>,
    pub steps: usize,
}

impl Default for EsParams {
    fn default() -> Self {
        Self {
            population: None,
            sigma: 0.3,
            budget: None,
            steps: 5,
        }
    }
}

impl EsParams {
    pub fn resolved_population(&self, n: usize) -> usize {
        self.population
            .unwrap_or_else(|| 4 + (3.0 * (n as f64).ln()).floor() as usize)
    }

    pub fn resolved_budget(&self, n: usize) -> usize {
        self.budget.unwrap_or(n * self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub scaling: f64,
    pub drop_rate: f64,
    pub keep_fraction: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub es: EsParams,
}

impl Default for MergeRecipe {
    fn default() -> Self {
        Self {
            method: MergeMethod::TaskArithmetic,
            scaling: 1.0,
            drop_rate: 0.8,
            keep_fraction: 0.2,
            epsilon: 0.1,
            seed: 0,
            es: EsParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub merged: ParameterSet,
    /// Per-expert weights found by the weight search.
    pub weights: Option<Vec<f64>>,
    pub evaluations: usize,
}

fn task_vectors(base: &ParameterSet, experts: &[ParameterSet]) -> Result<Vec<TaskVector>> {
    if experts.is_empty() {
        return Err(Error::InvalidParameter("at least one expert is required".into()));
    }
    experts.iter().map(|e| make_task_vector(e, base)).collect()
}

fn check_scaling(scaling: f64) -> Result<()> {
    if !(scaling >= 0.0 && scaling.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "scaling must be finite and non-negative, got {scaling}"
        )));
    }
    Ok(())
}

fn sum_and_apply(base: &ParameterSet, tvs: &[TaskVector], scaling: f64) -> Result<ParameterSet> {
    let ones = vec![1.0; tvs.len()];
    apply_delta(base, &weighted_sum(tvs, &ones)?, scaling)
}

/// `θ_0 + λ · Σ_t (θ_t − θ_0)`.
pub fn task_arithmetic(base: &ParameterSet, experts: &[ParameterSet], scaling: f64) -> Result<ParameterSet> {
    check_scaling(scaling)?;
    sum_and_apply(base, &task_vectors(base, experts)?, scaling)
}

/// Task arithmetic over DARE-sparsified task vectors; expert `t` uses the
/// mask seed derived from `(seed, t)`.
pub fn dare_linear(
    base: &ParameterSet,
    experts: &[ParameterSet],
    scaling: f64,
    drop_rate: f64,
    seed: u64,
) -> Result<ParameterSet> {
    check_scaling(scaling)?;
    let sparse = task_vectors(base, experts)?
        .iter()
        .enumerate()
        .map(|(t, tv)| dare_sparsify(tv, drop_rate, expert_seed(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    sum_and_apply(base, &sparse, scaling)
}

pub fn ties_merge(
    base: &ParameterSet,
    experts: &[ParameterSet],
    scaling: f64,
    keep_fraction: f64,
) -> Result<ParameterSet> {
    check_scaling(scaling)?;
    let out = ties_trim_elect(&task_vectors(base, experts)?, keep_fraction)?;
    apply_delta(base, &out.merged, scaling)
}

pub fn dare_ties(
    base: &ParameterSet,
    experts: &[ParameterSet],
    scaling: f64,
    drop_rate: f64,
    keep_fraction: f64,
    seed: u64,
) -> Result<ParameterSet> {
    check_scaling(scaling)?;
    let sparse = task_vectors(base, experts)?
        .iter()
        .enumerate()
        .map(|(t, tv)| dare_sparsify(tv, drop_rate, expert_seed(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    let out = ties_trim_elect(&sparse, keep_fraction)?;
    apply_delta(base, &out.merged, scaling)
}

pub fn della_merge(
    base: &ParameterSet,
    experts: &[ParameterSet],
    scaling: f64,
    drop_rate: f64,
    epsilon: f64,
    seed: u64,
) -> Result<ParameterSet> {
    check_scaling(scaling)?;
    let pruned = task_vectors(base, experts)?
        .iter()
        .enumerate()
        .map(|(t, tv)| della_prune(tv, drop_rate, epsilon, expert_seed(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    let (_, merged) = elect_and_merge(&pruned)?;
    apply_delta(base, &merged, scaling)
}

/// Per-tensor weighted average of task vectors with RankMean weights.
pub fn rankmean_merge(base: &ParameterSet, experts: &[ParameterSet]) -> Result<ParameterSet> {
    let tvs = task_vectors(base, experts)?;
    let weights = rankmean_weights(&tvs)?;
    let mut delta = TaskVector::new();
    for (name, w) in &weights {
        let first = tvs[0].get(name).expect("keyspace checked");
        let mut acc: Vec<f64> = first.data().iter().map(|&v| w[0] * v).collect();
        for (tv, &wt) in tvs.iter().zip(w).skip(1) {
            for (a, &v) in acc.iter_mut().zip(tv.get(name).expect("keyspace checked").data()) {
                *a += wt * v;
            }
        }
        delta.insert(name.clone(), Tensor::new(first.shape().to_vec(), acc)?)?;
    }
    apply_delta(base, &delta, 1.0)
}

/// Result of [`es_weight_search`].
#[derive(Clone, Debug)]
pub struct EsOutcome {
    pub merged: ParameterSet,
    pub weights: Vec<f64>,
    pub report: FitnessReport,
    pub evaluations: usize,
    /// Best fitness seen after each generation.
    pub best_per_generation: Vec<f64>,
}

const ES_WEIGHT_MIN: f64 = -1.0;
const ES_WEIGHT_MAX: f64 = 2.0;

/// Gaussian (μ, λ)-ES over per-expert task-arithmetic weights.
///
/// Weights start at `1/n`; each generation samples `mean + σ·N(0, I)`,
/// clamped to `[-1, 2]`, and moves the mean to the average of the better
/// half. The final generation is truncated so that at most `budget`
/// evaluations run in total.
pub fn es_weight_search<E: FitnessEvaluator + ?Sized>(
    base: &ParameterSet,
    experts: &[ParameterSet],
    evaluator: &E,
    params: &EsParams,
    seed: u64,
) -> Result<EsOutcome> {
    let tvs = task_vectors(base, experts)?;
    let n = tvs.len();
    let population = params.resolved_population(n);
    let budget = params.resolved_budget(n);
    if population == 0 {
        return Err(Error::InvalidParameter("ES population must be at least 1".into()));
    }
    if budget < population {
        return Err(Error::InvalidParameter(format!(
            "ES budget {budget} is smaller than the population {population}"
        )));
    }
    if !(params.sigma >= 0.0 && params.sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ES sigma must be non-negative, got {}",
            params.sigma
        )));
    }

    let mut mean = vec![1.0 / n as f64; n];
    let mut best: Option<(Vec<f64>, ParameterSet, FitnessReport)> = None;
    let mut evaluations = 0usize;
    let mut history = Vec::new();
    let mut generation = 0usize;
    while evaluations < budget {
        let count = population.min(budget - evaluations);
        let mut rng = keyed_rng("es", seed, &[&(generation as u64).to_le_bytes()]);
        let candidates: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                mean.iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (m + params.sigma * z).clamp(ES_WEIGHT_MIN, ES_WEIGHT_MAX)
                    })
                    .collect()
            })
            .collect();
        let positions = candidates
            .iter()
            .map(|w| apply_delta(base, &weighted_sum(&tvs, w)?, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ParameterSet> = positions.iter().collect();
        let reports = evaluate_many(evaluator, &refs)
            .into_iter()
            .enumerate()
            .map(|(candidate, r)| {
                r.map_err(|e| Error::CandidateEvaluation {
                    candidate,
                    generation,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        evaluations += count;
        debug_assert!(evaluations <= budget);

        for ((w, pos), report) in candidates.iter().zip(&positions).zip(&reports) {
            if best.as_ref().is_none_or(|(_, _, b)| report.mean > b.mean) {
                best = Some((w.clone(), pos.clone(), report.clone()));
            }
        }
        history.push(best.as_ref().expect("evaluated at least once").2.mean);

        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| reports[b].mean.total_cmp(&reports[a].mean).then(a.cmp(&b)));
        let elite = (count / 2).max(1);
        mean = (0..n)
            .map(|j| order[..elite].iter().map(|&c| candidates[c][j]).sum::<f64>() / elite as f64)
            .collect();
        generation += 1;
    }
    let (weights, merged, report) = best.expect("budget ≥ population ≥ 1");
    Ok(EsOutcome {
        merged,
        weights,
        report,
        evaluations,
        best_per_generation: history,
    })
}

/// Runs `recipe` on `base` and `experts`. The weight search needs an evaluator.
pub fn merge(
    recipe: &MergeRecipe,
    base: &ParameterSet,
    experts: &[ParameterSet],
    evaluator: Option<&dyn FitnessEvaluator>,
) -> Result<MergeOutcome> {
    let r = recipe;
    let static_outcome = |merged| MergeOutcome {
        merged,
        weights: None,
        evaluations: 0,
    };
    Ok(match r.method {
        MergeMethod::TaskArithmetic => static_outcome(task_arithmetic(base, experts, r.scaling)?),
        MergeMethod::DareLinear => static_outcome(dare_linear(base, experts, r.scaling, r.drop_rate, r.seed)?),
        MergeMethod::Ties => static_outcome(ties_merge(base, experts, r.scaling, r.keep_fraction)?),
        MergeMethod::DareTies => static_outcome(dare_ties(
            base,
            experts,
            r.scaling,
            r.drop_rate,
            r.keep_fraction,
            r.seed,
        )?),
        MergeMethod::Della => static_outcome(della_merge(base, experts, r.scaling, r.drop_rate, r.epsilon, r.seed)?),
        MergeMethod::Rankmean => static_outcome(rankmean_merge(base, experts)?),
        MergeMethod::EsWeightSearch => {
            let evaluator = evaluator
                .ok_or_else(|| Error::InvalidParameter("es_weight_search requires a fitness evaluator".into()))?;
            let out = es_weight_search(base, experts, evaluator, &r.es, r.seed)?;
            MergeOutcome {
                merged: out.merged,
                weights: Some(out.weights),
                evaluations: out.evaluations,
            }
        }
    })
}
