//! Quadratic-landscape tasks: `score(θ) = exp(−s · ½ · Σ_j D_j (θ_j − μ_j)²)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FitnessEvaluator, FitnessReport, SyntheticProblem};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor_store::{ParameterSet, Tensor, TensorMap};

#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub optimum: ParameterSet,
    pub curvature: TensorMap<f64>,
    pub sharpness: f64,
}

impl QuadraticTask {
    pub fn new(optimum: ParameterSet, curvature: TensorMap<f64>, sharpness: f64) -> Result<Self> {
        optimum.keyspace_check(&curvature)?;
        if let Some((name, i)) = curvature
            .iter()
            .flat_map(|(n, t)| t.data().iter().enumerate().map(move |(i, &d)| (n, i, d)))
            .find(|&(_, _, d)| !(d > 0.0 && d.is_finite()))
            .map(|(n, i, _)| (n.to_string(), i))
        {
            return Err(Error::InvalidParameter(format!(
                "curvature must be positive and finite (tensor `{name}`, element {i})"
            )));
        }
        if !(sharpness >= 0.0 && sharpness.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sharpness must be non-negative, got {sharpness}"
            )));
        }
        Ok(Self {
            optimum,
            curvature,
            sharpness,
        })
    }

    /// Isotropic task: unit curvature everywhere.
    pub fn isotropic(optimum: ParameterSet, sharpness: f64) -> Result<Self> {
        let curvature = optimum.map(|_| 1.0f64);
        Self::new(optimum, curvature, sharpness)
    }

    fn energy(&self, theta: &ParameterSet) -> Result<f64> {
        self.optimum.keyspace_check(theta)?;
        let mut e = 0.0f64;
        for (name, mu) in self.optimum.iter() {
            let th = theta.get(name).expect("keyspace checked").data();
            let d = self.curvature.get(name).expect("keyspace checked").data();
            for ((&t, &m), &c) in th.iter().zip(mu.data()).zip(d) {
                let diff = t as f64 - m as f64;
                e += c * diff * diff;
            }
        }
        Ok(0.5 * e)
    }
}

/// Score of `theta` on one quadratic task, in `(0, 1]`.
pub fn quadratic_score(task: &QuadraticTask, theta: &ParameterSet) -> Result<f64> {
    Ok((-task.sharpness * task.energy(theta)?).exp())
}

#[derive(Clone, Debug)]
pub struct QuadraticEvaluator {
    task_names: Vec<String>,
    tasks: Vec<QuadraticTask>,
}

impl QuadraticEvaluator {
    pub fn new(task_names: Vec<String>, tasks: Vec<QuadraticTask>) -> Result<Self> {
        if tasks.is_empty() || task_names.len() != tasks.len() {
            return Err(Error::InvalidParameter(format!(
                "{} task names for {} quadratic tasks",
                task_names.len(),
                tasks.len()
            )));
        }
        for t in &tasks[1..] {
            tasks[0].optimum.keyspace_check(&t.optimum)?;
        }
        Ok(Self { task_names, tasks })
    }

    pub fn tasks(&self) -> &[QuadraticTask] {
        &self.tasks
    }

    /// Best mean-score position found by fixed-point ascent from several
    /// starting points (every task optimum, their centroid and sum, and any
    /// `extra_starts`).
    ///
    /// At a stationary point `θ_j = Σ_i a_i D_ij μ_ij / Σ_i a_i D_ij` with
    /// `a_i = s_i · score_i(θ)`; iterating that map never decreases the mean
    /// score.
    pub fn optimum(&self, extra_starts: &[ParameterSet]) -> Result<(ParameterSet, f64)> {
        let names: Vec<&str> = self.tasks[0].optimum.names().collect();
        let flat = |ps: &TensorMap<f32>| -> Vec<f64> {
            names
                .iter()
                .flat_map(|n| ps.get(n).unwrap().data().iter().map(|&v| v as f64))
                .collect()
        };
        let mus: Vec<Vec<f64>> = self.tasks.iter().map(|t| flat(&t.optimum)).collect();
        let curv: Vec<Vec<f64>> = self
            .tasks
            .iter()
            .map(|t| {
                names
                    .iter()
                    .flat_map(|n| t.curvature.get(n).unwrap().data().to_vec())
                    .collect()
            })
            .collect();
        let sharp: Vec<f64> = self.tasks.iter().map(|t| t.sharpness).collect();
        let d = mus[0].len();
        let k = mus.len() as f64;

        let mean_score = |th: &[f64]| -> f64 {
            (0..mus.len())
                .map(|i| {
                    let e: f64 = (0..d).map(|j| curv[i][j] * (th[j] - mus[i][j]).powi(2)).sum();
                    (-sharp[i] * 0.5 * e).exp()
                })
                .sum::<f64>()
                / k
        };

        let mut starts = mus.clone();
        starts.push((0..d).map(|j| mus.iter().map(|m| m[j]).sum::<f64>() / k).collect());
        starts.push((0..d).map(|j| mus.iter().map(|m| m[j]).sum::<f64>()).collect());
        for s in extra_starts {
            self.tasks[0].optimum.keyspace_check(s)?;
            starts.push(flat(s));
        }

        let mut best: Option<(Vec<f64>, f64)> = None;
        for mut th in starts {
            for _ in 0..20_000 {
                let a: Vec<f64> = (0..mus.len())
                    .map(|i| {
                        let e: f64 = (0..d).map(|j| curv[i][j] * (th[j] - mus[i][j]).powi(2)).sum();
                        sharp[i] * (-sharp[i] * 0.5 * e).exp()
                    })
                    .collect();
                let mut moved = 0.0f64;
                for j in 0..d {
                    let den: f64 = (0..mus.len()).map(|i| a[i] * curv[i][j]).sum();
                    if den <= 0.0 {
                        continue;
                    }
                    let num: f64 = (0..mus.len()).map(|i| a[i] * curv[i][j] * mus[i][j]).sum();
                    let next = num / den;
                    moved = moved.max((next - th[j]).abs());
                    th[j] = next;
                }
                if moved < 1e-13 {
                    break;
                }
            }
            let v = mean_score(&th);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((th, v));
            }
        }
        let (th, _) = best.expect("at least one start");
        let mut out = ParameterSet::new();
        let mut offset = 0;
        for name in &names {
            let t = self.tasks[0].optimum.get(name).unwrap();
            let data = th[offset..offset + t.numel()].iter().map(|&v| v as f32).collect();
            offset += t.numel();
            out.insert(*name, Tensor::new(t.shape().to_vec(), data)?)?;
        }
        let fitness = self.evaluate(&out)?.mean;
        Ok((out, fitness))
    }
}

impl FitnessEvaluator for QuadraticEvaluator {
    fn task_names(&self) -> &[String] {
        &self.task_names
    }

    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport> {
        let scores = self
            .tasks
            .iter()
            .map(|t| quadratic_score(t, theta))
            .collect::<Result<Vec<_>>>()?;
        FitnessReport::from_scores(self.task_names.iter().cloned().zip(scores))
    }
}

/// Generator settings for the quadratic M-MTC bench.
///
/// Each task optimum is sparse: an element belongs to the task's support with
/// probability `support_prob` and is then drawn from `N(0, optimum_std²)`.
/// Curvature is 1 on the support and `off_support_curvature` elsewhere, so
/// tasks mostly care about their own coordinates but still interfere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticBenchSpec {
    pub tasks: usize,
    pub dim: usize,
    pub support_prob: f64,
    pub optimum_std: f64,
    pub off_support_curvature: f64,
    pub sharpness: f64,
}

impl Default for QuadraticBenchSpec {
    fn default() -> Self {
        Self {
            tasks: 3,
            dim: 64,
            support_prob: 0.6,
            optimum_std: 0.3,
            off_support_curvature: 0.2,
            sharpness: 1.0,
        }
    }
}

fn split_layout(dim: usize) -> Vec<(&'static str, usize)> {
    vec![("layer0.weight", dim / 2), ("layer1.weight", dim - dim / 2)]
}

fn unflatten<T: crate::tensor_store::Element>(values: Vec<T>, layout: &[(&str, usize)]) -> Result<TensorMap<T>> {
    let mut out = TensorMap::new();
    let mut it = values.into_iter();
    for &(name, len) in layout {
        out.insert(name, Tensor::vector(it.by_ref().take(len).collect()))?;
    }
    Ok(out)
}

/// Builds `spec.tasks` quadratic tasks, an all-zero base, and one expert per
/// task at `μ_i + N(0, noise²)`.
pub fn make_synthetic_experts(
    spec: &QuadraticBenchSpec,
    noise: f64,
    seed: u64,
) -> Result<SyntheticProblem<QuadraticEvaluator>> {
    if spec.tasks == 0 || spec.dim < 2 {
        return Err(Error::InvalidParameter(
            "quadratic bench needs ≥1 task and dim ≥ 2".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.support_prob)
        || noise.is_nan()
        || noise < 0.0
        || spec.optimum_std.is_nan()
        || spec.optimum_std < 0.0
    {
        return Err(Error::InvalidParameter("invalid quadratic bench spec".into()));
    }
    let layout = split_layout(spec.dim);
    let optimum_dist = Normal::new(0.0, spec.optimum_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let noise_dist = Normal::new(0.0, noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut experts = Vec::with_capacity(spec.tasks);
    for i in 0..spec.tasks {
        let mut rng = keyed_rng("quadratic-task", seed, &[&(i as u64).to_le_bytes()]);
        let mut mu = Vec::with_capacity(spec.dim);
        let mut curv = Vec::with_capacity(spec.dim);
        for _ in 0..spec.dim {
            let on_support = rng.random::<f64>() < spec.support_prob;
            let value: f64 = optimum_dist.sample(&mut rng);
            mu.push(if on_support { value as f32 } else { 0.0 });
            curv.push(if on_support { 1.0 } else { spec.off_support_curvature });
        }
        let mut noise_rng = keyed_rng("quadratic-noise", seed, &[&(i as u64).to_le_bytes()]);
        let expert: Vec<f32> = mu
            .iter()
            .map(|&m| (m as f64 + noise_dist.sample(&mut noise_rng)) as f32)
            .collect();
        tasks.push(QuadraticTask::new(
            unflatten(mu, &layout)?,
            unflatten(curv, &layout)?,
            spec.sharpness,
        )?);
        experts.push(unflatten(expert, &layout)?);
    }
    let base = unflatten(vec![0.0f32; spec.dim], &layout)?;
    let names = (0..spec.tasks).map(|i| format!("task{i}")).collect();
    Ok(SyntheticProblem {
        base,
        experts,
        evaluator: QuadraticEvaluator::new(names, tasks)?,
        holdout: None,
    })
}
