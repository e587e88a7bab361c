//! Tiny 2→H→2 tanh MLP on Gaussian-blob binary tasks.
//!
//! The base network has random first-layer weights and biases and a zero
//! output layer, so every input produces tied logits, is classified as class
//! 0, and scores exactly 0.5 on a balanced task. Each expert is the base
//! trained by full-batch gradient descent on one task.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FitnessEvaluator, FitnessReport, SyntheticProblem};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor_store::{ParameterSet, Tensor};

const INPUT: usize = 2;
const CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub hidden: usize,
}

/// Labeled 2-D points; labels alternate 0, 1, 0, ...
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<[f64; INPUT]>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct MlpTask {
    pub train: Dataset,
    pub optimization: Dataset,
    pub holdout: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpBenchSpec {
    pub tasks: usize,
    pub hidden: usize,
    /// Distance of each task's blob pair from the origin.
    pub radius: f64,
    /// Half-distance between a task's two class centers.
    pub class_offset: f64,
    pub blob_std: f64,
    pub train_size: usize,
    pub optimization_size: usize,
    pub holdout_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
}

impl Default for MlpBenchSpec {
    fn default() -> Self {
        Self {
            tasks: 3,
            hidden: 32,
            radius: 3.0,
            class_offset: 3.0,
            blob_std: 0.6,
            train_size: 200,
            optimization_size: 100,
            holdout_size: 200,
            train_steps: 500,
            learning_rate: 0.1,
        }
    }
}

struct Params {
    w1: Vec<f64>, // [INPUT, H] row-major
    b1: Vec<f64>,
    w2: Vec<f64>, // [H, CLASSES] row-major
    b2: Vec<f64>,
}

impl Params {
    fn from_set(ps: &ParameterSet, shape: MlpShape) -> Result<Self> {
        let h = shape.hidden;
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = ps
                .get(name)
                .ok_or_else(|| Error::Keyspace(format!("missing tensor `{name}`")))?;
            if t.numel() != len {
                return Err(Error::Keyspace(format!(
                    "tensor `{name}` has {} elements, expected {len}",
                    t.numel()
                )));
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        Ok(Self {
            w1: get("fc1.weight", INPUT * h)?,
            b1: get("fc1.bias", h)?,
            w2: get("fc2.weight", h * CLASSES)?,
            b2: get("fc2.bias", CLASSES)?,
        })
    }

    fn to_set(&self, h: usize) -> Result<ParameterSet> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        ParameterSet::from_tensors([
            ("fc1.weight", Tensor::new(vec![INPUT, h], f(&self.w1))?),
            ("fc1.bias", Tensor::new(vec![h], f(&self.b1))?),
            ("fc2.weight", Tensor::new(vec![h, CLASSES], f(&self.w2))?),
            ("fc2.bias", Tensor::new(vec![CLASSES], f(&self.b2))?),
        ])
    }

    fn hidden(&self, x: &[f64; INPUT], out: &mut [f64]) {
        let h = self.b1.len();
        for (j, o) in out.iter_mut().enumerate().take(h) {
            let z = self.b1[j] + x[0] * self.w1[j] + x[1] * self.w1[h + j];
            *o = z.tanh();
        }
    }

    fn logits(&self, hid: &[f64]) -> [f64; CLASSES] {
        let mut lo = [self.b2[0], self.b2[1]];
        for (j, &a) in hid.iter().enumerate() {
            lo[0] += a * self.w2[j * CLASSES];
            lo[1] += a * self.w2[j * CLASSES + 1];
        }
        lo
    }

    fn accuracy(&self, data: &Dataset) -> f64 {
        let mut hid = vec![0.0; self.b1.len()];
        let correct = data
            .x
            .iter()
            .zip(&data.y)
            .filter(|(x, &y)| {
                self.hidden(x, &mut hid);
                let lo = self.logits(&hid);
                // ties go to class 0
                let pred = usize::from(lo[1] > lo[0]);
                pred == y
            })
            .count();
        correct as f64 / data.len() as f64
    }

    /// One full-batch gradient-descent step on mean softmax cross-entropy.
    fn gd_step(&mut self, data: &Dataset, lr: f64) {
        let h = self.b1.len();
        let n = data.len() as f64;
        let mut gw1 = vec![0.0; INPUT * h];
        let mut gb1 = vec![0.0; h];
        let mut gw2 = vec![0.0; h * CLASSES];
        let mut gb2 = [0.0; CLASSES];
        let mut hid = vec![0.0; h];
        for (x, &y) in data.x.iter().zip(&data.y) {
            self.hidden(x, &mut hid);
            let lo = self.logits(&hid);
            let m = lo[0].max(lo[1]);
            let e = [(lo[0] - m).exp(), (lo[1] - m).exp()];
            let z = e[0] + e[1];
            let mut g = [e[0] / z, e[1] / z];
            g[y] -= 1.0;
            g[0] /= n;
            g[1] /= n;
            gb2[0] += g[0];
            gb2[1] += g[1];
            for j in 0..h {
                gw2[j * CLASSES] += hid[j] * g[0];
                gw2[j * CLASSES + 1] += hid[j] * g[1];
                let gh = (g[0] * self.w2[j * CLASSES] + g[1] * self.w2[j * CLASSES + 1]) * (1.0 - hid[j] * hid[j]);
                gb1[j] += gh;
                gw1[j] += x[0] * gh;
                gw1[h + j] += x[1] * gh;
            }
        }
        let upd = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        upd(&mut self.w1, &gw1);
        upd(&mut self.b1, &gb1);
        upd(&mut self.w2, &gw2);
        upd(&mut self.b2, &gb2);
    }
}

/// Trains `base` on `data` for `steps` full-batch gradient-descent steps.
pub fn train_mlp(base: &ParameterSet, shape: MlpShape, data: &Dataset, steps: usize, lr: f64) -> Result<ParameterSet> {
    let mut p = Params::from_set(base, shape)?;
    for _ in 0..steps {
        p.gd_step(data, lr);
    }
    p.to_set(shape.hidden)
}

/// Accuracy of the network `theta` on `data`.
pub fn mlp_accuracy(theta: &ParameterSet, shape: MlpShape, data: &Dataset) -> Result<f64> {
    Ok(Params::from_set(theta, shape)?.accuracy(data))
}

/// Scores a network by per-task accuracy on a fixed split.
#[derive(Clone, Debug)]
pub struct MlpEvaluator {
    shape: MlpShape,
    task_names: Vec<String>,
    datasets: Vec<Dataset>,
}

impl MlpEvaluator {
    pub fn new(shape: MlpShape, task_names: Vec<String>, datasets: Vec<Dataset>) -> Result<Self> {
        if datasets.is_empty() || task_names.len() != datasets.len() || datasets.iter().any(Dataset::is_empty) {
            return Err(Error::InvalidParameter(
                "MLP evaluator needs one non-empty dataset per task".into(),
            ));
        }
        Ok(Self {
            shape,
            task_names,
            datasets,
        })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }
}

impl FitnessEvaluator for MlpEvaluator {
    fn task_names(&self) -> &[String] {
        &self.task_names
    }

    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport> {
        if let Some((name, i)) = theta.first_non_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite parameter in `{name}` at element {i}"
            )));
        }
        let p = Params::from_set(theta, self.shape)?;
        FitnessReport::from_scores(
            self.task_names
                .iter()
                .cloned()
                .zip(self.datasets.iter().map(|d| p.accuracy(d))),
        )
    }
}

fn blobs(spec: &MlpBenchSpec, task: usize, split: &str, n: usize, seed: u64) -> Result<Dataset> {
    let k = spec.tasks as f64;
    let angle = 2.0 * std::f64::consts::PI * task as f64 / k;
    let center = [spec.radius * angle.cos(), spec.radius * angle.sin()];
    let dir_angle = angle + std::f64::consts::FRAC_PI_2 + 0.7 * task as f64;
    let dir = [dir_angle.cos(), dir_angle.sin()];
    let noise = Normal::new(0.0, spec.blob_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = keyed_rng("mlp-data", seed, &[&(task as u64).to_le_bytes(), split.as_bytes()]);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let off = sign * spec.class_offset;
        x.push([
            center[0] + off * dir[0] + noise.sample(&mut rng),
            center[1] + off * dir[1] + noise.sample(&mut rng),
        ]);
        y.push(label);
    }
    Ok(Dataset { x, y })
}

/// The random base network: `fc1` weights and biases `~ N(0, 1)`, zero `fc2`.
pub fn mlp_base(shape: MlpShape, seed: u64) -> Result<ParameterSet> {
    let h = shape.hidden;
    let mut rng = keyed_rng("mlp-base", seed, &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w1: Vec<f64> = (0..INPUT * h).map(|_| normal.sample(&mut rng)).collect();
    let b1: Vec<f64> = (0..h).map(|_| normal.sample(&mut rng)).collect();
    Params {
        w1,
        b1,
        w2: vec![0.0; h * CLASSES],
        b2: vec![0.0; CLASSES],
    }
    .to_set(h)
}

/// Builds the blob tasks, base, trained experts, and optimization-split and
/// holdout-split evaluators.
pub fn mlp_synthetic_build(spec: &MlpBenchSpec, seed: u64) -> Result<SyntheticProblem<MlpEvaluator>> {
    if spec.tasks == 0 || spec.hidden == 0 {
        return Err(Error::InvalidParameter(
            "MLP bench needs ≥1 task and ≥1 hidden unit".into(),
        ));
    }
    if spec.train_size == 0 || spec.optimization_size == 0 || spec.holdout_size == 0 {
        return Err(Error::InvalidParameter("MLP bench splits must be non-empty".into()));
    }
    let shape = MlpShape { hidden: spec.hidden };
    let base = mlp_base(shape, seed)?;
    let tasks = (0..spec.tasks)
        .map(|t| {
            Ok(MlpTask {
                train: blobs(spec, t, "train", spec.train_size, seed)?,
                optimization: blobs(spec, t, "optimization", spec.optimization_size, seed)?,
                holdout: blobs(spec, t, "holdout", spec.holdout_size, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let experts = tasks
        .iter()
        .map(|t| train_mlp(&base, shape, &t.train, spec.train_steps, spec.learning_rate))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = (0..spec.tasks).map(|i| format!("task{i}")).collect();
    let evaluator = MlpEvaluator::new(
        shape,
        names.clone(),
        tasks.iter().map(|t| t.optimization.clone()).collect(),
    )?;
    let holdout = MlpEvaluator::new(shape, names, tasks.iter().map(|t| t.holdout.clone()).collect())?;
    Ok(SyntheticProblem {
        base,
        experts,
        evaluator,
        holdout: Some(holdout),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_scores_exactly_chance() {
        let p = mlp_synthetic_build(&MlpBenchSpec::default(), 1).unwrap();
        let r = p.evaluator.evaluate(&p.base).unwrap();
        assert!(r.per_task.values().all(|&a| a == 0.5));
    }

    #[test]
    fn experts_learn_their_task() {
        let p = mlp_synthetic_build(&MlpBenchSpec::default(), 2).unwrap();
        for (i, e) in p.experts.iter().enumerate() {
            let r = p.evaluator.evaluate(e).unwrap();
            assert!(r.per_task[i] >= 0.9, "expert {i}: {:?}", r.per_task);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = mlp_synthetic_build(&MlpBenchSpec::default(), 3).unwrap();
        let b = mlp_synthetic_build(&MlpBenchSpec::default(), 3).unwrap();
        assert!(a.base.bit_eq(&b.base));
        for (x, y) in a.experts.iter().zip(&b.experts) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = MlpShape { hidden: 3 };
        let spec = MlpBenchSpec {
            hidden: 3,
            ..Default::default()
        };
        let data = blobs(&spec, 0, "train", 10, 0).unwrap();
        let mut p = Params::from_set(&mlp_base(shape, 0).unwrap(), shape).unwrap();
        p.w2 = vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.2];
        p.b2 = vec![0.05, -0.05];
        let loss = |p: &Params| {
            let mut hid = vec![0.0; 3];
            data.x
                .iter()
                .zip(&data.y)
                .map(|(x, &y)| {
                    p.hidden(x, &mut hid);
                    let lo = p.logits(&hid);
                    let m = lo[0].max(lo[1]);
                    -(lo[y] - m - ((lo[0] - m).exp() + (lo[1] - m).exp()).ln())
                })
                .sum::<f64>()
                / data.len() as f64
        };
        let before = Params {
            w1: p.w1.clone(),
            b1: p.b1.clone(),
            w2: p.w2.clone(),
            b2: p.b2.clone(),
        };
        let lr = 1.0;
        p.gd_step(&data, lr);
        // the step on w1[0] equals -lr * dL/dw1[0]
        let h = 1e-6;
        let mut plus = Params {
            w1: before.w1.clone(),
            b1: before.b1.clone(),
            w2: before.w2.clone(),
            b2: before.b2.clone(),
        };
        plus.w1[0] += h;
        let mut minus = Params {
            w1: before.w1.clone(),
            b1: before.b1.clone(),
            w2: before.w2.clone(),
            b2: before.b2.clone(),
        };
        minus.w1[0] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = (before.w1[0] - p.w1[0]) / lr;
        assert!((numeric - analytic).abs() < 1e-6, "{numeric} vs {analytic}");
    }
}
