//! PSO-Merging: a swarm over full parameter sets seeded with the experts,
//! their DARE-sparsified copies and the base.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::{evaluate_many, FitnessEvaluator, FitnessReport};
use crate::rng::pso_coefficients;
use crate::task_vectors::{apply_delta, dare_sparsify, expert_seed, make_task_vector, TaskVector};
use crate::tensor_store::{ParameterSet, Tensor, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoHyperparams {
    /// Pull towards the global best.
    pub c1: f64,
    /// Pull towards the particle's own best.
    pub c2: f64,
    /// Momentum.
    pub w: f64,
    /// DARE drop rate for the sparsified particles.
    pub p: f64,
    pub steps: usize,
}

impl Default for PsoHyperparams {
    fn default() -> Self {
        Self {
            c1: 2.0,
            c2: 2.0,
            w: 0.2,
            p: 0.8,
            steps: 5,
        }
    }
}

impl PsoHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.c1 >= 0.0 && self.c1.is_finite()) || !(self.c2 >= 0.0 && self.c2.is_finite()) {
            return bad(format!(
                "c1 and c2 must be non-negative, got {} and {}",
                self.c1, self.c2
            ));
        }
        if !(0.0..1.0).contains(&self.w) {
            return bad(format!("w must lie in [0, 1), got {}", self.w));
        }
        if !(0.0..1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1), got {}", self.p));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Which particles seed the swarm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwarmComposition {
    /// Experts, sparsified experts and the base: `2n + 1` particles.
    #[default]
    Full,
    OriginalsOnly,
    SparsifiedOnly,
}

impl SwarmComposition {
    pub fn as_str(self) -> &'static str {
        match self {
            SwarmComposition::Full => "full",
            SwarmComposition::OriginalsOnly => "originals_only",
            SwarmComposition::SparsifiedOnly => "sparsified_only",
        }
    }

    pub fn particle_count(self, n: usize) -> usize {
        match self {
            SwarmComposition::Full => 2 * n + 1,
            _ => n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Particle {
    pub position: ParameterSet,
    pub velocity: TaskVector,
    pub pbest_position: ParameterSet,
    /// Report for `pbest_position`; `None` before the first evaluation.
    pub pbest: Option<FitnessReport>,
    /// Fitness of the current position at the last evaluation.
    pub fitness: Option<f64>,
    pub origin_label: String,
}

impl Particle {
    fn new(position: ParameterSet, origin_label: String) -> Self {
        Self {
            velocity: position.map(|_| 0.0f64),
            pbest_position: position.clone(),
            position,
            pbest: None,
            fitness: None,
            origin_label,
        }
    }

    pub fn pbest_fitness(&self) -> Option<f64> {
        self.pbest.as_ref().map(|r| r.mean)
    }
}

/// One row of the per-evaluation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub particle_index: usize,
    pub origin_label: String,
    pub fitness: f64,
    pub is_gbest: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// gbest fitness after each evaluation.
    pub gbest_fitness: Vec<f64>,
    /// Holdout score of the gbest after each evaluation, when requested.
    pub holdout_gbest: Vec<f64>,
    /// Distinct positions actually sent to the evaluator.
    pub evaluator_calls: usize,
}

impl RunTrace {
    /// Current-position fitness of every particle at evaluation `step`.
    pub fn step_fitness(&self, step: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.step == step).map(|r| r.fitness).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let to_err = |e: csv::Error| Error::io("trace.csv", std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io("trace.csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Setup options beyond the hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct SwarmSetup {
    pub composition: SwarmComposition,
    /// Names used in origin labels; `expert{t}` when empty.
    pub expert_labels: Vec<String>,
}

pub struct Swarm {
    pub particles: Vec<Particle>,
    gbest_index: Option<usize>,
    pub hp: PsoHyperparams,
    pub seed: u64,
    step: usize,
    cache: HashMap<[u8; 32], FitnessReport>,
    evaluator_calls: usize,
}

impl Swarm {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn gbest_index(&self) -> Option<usize> {
        self.gbest_index
    }

    pub fn gbest_position(&self) -> Option<&ParameterSet> {
        self.gbest_index.map(|i| &self.particles[i].pbest_position)
    }

    pub fn gbest_report(&self) -> Option<&FitnessReport> {
        self.gbest_index.and_then(|i| self.particles[i].pbest.as_ref())
    }

    pub fn gbest_fitness(&self) -> Option<f64> {
        self.gbest_report().map(|r| r.mean)
    }

    pub fn evaluator_calls(&self) -> usize {
        self.evaluator_calls
    }
}

/// Full swarm: experts, sparsified experts and the base.
pub fn init_swarm(base: &ParameterSet, experts: &[ParameterSet], hp: &PsoHyperparams, seed: u64) -> Result<Swarm> {
    init_swarm_with(base, experts, hp, seed, &SwarmSetup::default())
}

/// Builds the initial swarm. Expert `t`'s drop mask uses the seed derived
/// from `(seed, t)` and stays fixed for the run.
pub fn init_swarm_with(
    base: &ParameterSet,
    experts: &[ParameterSet],
    hp: &PsoHyperparams,
    seed: u64,
    setup: &SwarmSetup,
) -> Result<Swarm> {
    hp.validate()?;
    if experts.is_empty() {
        return Err(Error::InvalidParameter("at least one expert is required".into()));
    }
    if !setup.expert_labels.is_empty() && setup.expert_labels.len() != experts.len() {
        return Err(Error::InvalidParameter(format!(
            "{} labels for {} experts",
            setup.expert_labels.len(),
            experts.len()
        )));
    }
    let label = |t: usize| {
        setup
            .expert_labels
            .get(t)
            .cloned()
            .unwrap_or_else(|| format!("expert{t}"))
    };
    let tvs = experts
        .iter()
        .map(|e| make_task_vector(e, base))
        .collect::<Result<Vec<_>>>()?;

    let mut particles = Vec::new();
    if setup.composition != SwarmComposition::SparsifiedOnly {
        for (t, e) in experts.iter().enumerate() {
            particles.push(Particle::new(e.clone(), label(t)));
        }
    }
    if setup.composition != SwarmComposition::OriginalsOnly {
        for (t, tv) in tvs.iter().enumerate() {
            let sparse = dare_sparsify(tv, hp.p, expert_seed(seed, t))?;
            particles.push(Particle::new(
                apply_delta(base, &sparse, 1.0)?,
                format!("sparse:{}", label(t)),
            ));
        }
    }
    if setup.composition == SwarmComposition::Full {
        particles.push(Particle::new(base.clone(), "base".into()));
    }
    Ok(Swarm {
        particles,
        gbest_index: None,
        hp: hp.clone(),
        seed,
        step: 0,
        cache: HashMap::new(),
        evaluator_calls: 0,
    })
}

/// Scores every particle's current position (reusing cached scores for
/// repeated positions), updates personal bests on strict improvement, and
/// recomputes the global best with ties going to the lowest index.
pub fn evaluate_swarm<E: FitnessEvaluator + ?Sized>(swarm: &mut Swarm, evaluator: &E) -> Result<()> {
    let digests: Vec<[u8; 32]> = swarm.particles.par_iter().map(|p| p.position.digest()).collect();

    let mut pending: Vec<usize> = Vec::new();
    let mut queued = HashMap::new();
    for (i, d) in digests.iter().enumerate() {
        if !swarm.cache.contains_key(d) && !queued.contains_key(d) {
            queued.insert(*d, i);
            pending.push(i);
        }
    }
    let positions: Vec<&ParameterSet> = pending.iter().map(|&i| &swarm.particles[i].position).collect();
    let results = evaluate_many(evaluator, &positions);
    swarm.evaluator_calls += pending.len();
    for (&i, result) in pending.iter().zip(results) {
        let report = result.map_err(|e| Error::ParticleEvaluation {
            particle: i,
            step: swarm.step,
            source: Box::new(e),
        })?;
        swarm.cache.insert(digests[i], report);
    }

    let previous = swarm.gbest_fitness();
    for (p, d) in swarm.particles.iter_mut().zip(&digests) {
        let report = &swarm.cache[d];
        p.fitness = Some(report.mean);
        if p.pbest.as_ref().is_none_or(|b| report.mean > b.mean) {
            p.pbest = Some(report.clone());
            p.pbest_position = p.position.clone();
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in swarm.particles.iter().enumerate() {
        let f = p.pbest_fitness().expect("evaluated");
        if best.is_none_or(|(_, b)| f > b) {
            best = Some((i, f));
        }
    }
    swarm.gbest_index = best.map(|(i, _)| i);
    if let (Some(prev), Some(now)) = (previous, swarm.gbest_fitness()) {
        debug_assert!(now >= prev || prev.is_nan());
    }
    Ok(())
}

/// One particle's update: `v' = w·v + c1·r1·(gbest − θ) + c2·r2·(pbest − θ)`,
/// `θ' = θ + v'`. Computed in `f64`; positions are rounded once to `f32`.
pub fn update_particle(
    position: &ParameterSet,
    velocity: &TaskVector,
    pbest: &ParameterSet,
    gbest: &ParameterSet,
    hp: &PsoHyperparams,
    r1: f64,
    r2: f64,
) -> Result<(ParameterSet, TaskVector)> {
    position.keyspace_check(velocity)?;
    position.keyspace_check(pbest)?;
    position.keyspace_check(gbest)?;
    let (a, b) = (hp.c1 * r1, hp.c2 * r2);
    let mut new_pos = TensorMap::new();
    let mut new_vel = TensorMap::new();
    for (name, theta) in position.iter() {
        let v = velocity.get(name).expect("checked").data();
        let pb = pbest.get(name).expect("checked").data();
        let g = gbest.get(name).expect("checked").data();
        let n = theta.numel();
        let mut vel = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        for j in 0..n {
            let th = theta.data()[j] as f64;
            let vj = hp.w * v[j] + a * (g[j] as f64 - th) + b * (pb[j] as f64 - th);
            vel.push(vj);
            pos.push((th + vj) as f32);
        }
        new_vel.insert(name, Tensor::new(theta.shape().to_vec(), vel)?)?;
        new_pos.insert(name, Tensor::new(theta.shape().to_vec(), pos)?)?;
    }
    new_pos.set_metadata(position.metadata().cloned());
    Ok((new_pos, new_vel))
}

/// Synchronous update of every particle against the current gbest. The
/// scalars `(r1, r2)` for particle `t` come from the stream keyed by
/// `(seed, t, step)`, where `step` is the index of the step being taken.
pub fn step_swarm(swarm: &mut Swarm) -> Result<()> {
    let gbest = swarm
        .gbest_position()
        .ok_or_else(|| Error::InvalidParameter("step_swarm called before evaluate_swarm".into()))?
        .clone();
    let next = swarm.step + 1;
    let hp = swarm.hp.clone();
    let seed = swarm.seed;
    let updates = swarm
        .particles
        .par_iter()
        .enumerate()
        .map(|(t, p)| {
            let (r1, r2) = pso_coefficients(seed, t, next);
            let (pos, vel) = update_particle(&p.position, &p.velocity, &p.pbest_position, &gbest, &hp, r1, r2)?;
            if let Some((tensor, element)) = pos.first_non_finite().or_else(|| vel.first_non_finite()) {
                return Err(Error::NonFinite {
                    particle: t,
                    step: next,
                    tensor: tensor.to_string(),
                    element,
                });
            }
            Ok((pos, vel))
        })
        .collect::<Result<Vec<_>>>()?;
    for (p, (pos, vel)) in swarm.particles.iter_mut().zip(updates) {
        p.position = pos;
        p.velocity = vel;
    }
    swarm.step = next;
    Ok(())
}

fn record<E: FitnessEvaluator + ?Sized>(
    swarm: &Swarm,
    trace: &mut RunTrace,
    holdout: Option<&E>,
    holdout_cache: &mut HashMap<[u8; 32], f64>,
) -> Result<()> {
    let g = swarm.gbest_index().expect("evaluated");
    for (i, p) in swarm.particles.iter().enumerate() {
        trace.rows.push(TraceRow {
            step: swarm.step(),
            particle_index: i,
            origin_label: p.origin_label.clone(),
            fitness: p.fitness.expect("evaluated"),
            is_gbest: i == g,
        });
    }
    trace.gbest_fitness.push(swarm.gbest_fitness().expect("evaluated"));
    if let Some(h) = holdout {
        let pos = swarm.gbest_position().expect("evaluated");
        let d = pos.digest();
        let score = match holdout_cache.get(&d) {
            Some(&s) => s,
            None => {
                let s = h.evaluate(pos)?.mean;
                holdout_cache.insert(d, s);
                s
            }
        };
        trace.holdout_gbest.push(score);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PsoOutcome {
    pub merged: ParameterSet,
    pub report: FitnessReport,
    pub trace: RunTrace,
}

/// `init → [evaluate; step] × S → evaluate`, returning the final gbest.
pub fn run_pso_merge<E: FitnessEvaluator + ?Sized>(
    base: &ParameterSet,
    experts: &[ParameterSet],
    hp: &PsoHyperparams,
    evaluator: &E,
    seed: u64,
) -> Result<PsoOutcome> {
    run_pso_merge_with(base, experts, hp, evaluator, seed, &SwarmSetup::default(), None::<&E>)
}

/// [`run_pso_merge`] with a swarm setup and an optional holdout evaluator
/// that scores the gbest after every evaluation.
pub fn run_pso_merge_with<E, H>(
    base: &ParameterSet,
    experts: &[ParameterSet],
    hp: &PsoHyperparams,
    evaluator: &E,
    seed: u64,
    setup: &SwarmSetup,
    holdout: Option<&H>,
) -> Result<PsoOutcome>
where
    E: FitnessEvaluator + ?Sized,
    H: FitnessEvaluator + ?Sized,
{
    let mut swarm = init_swarm_with(base, experts, hp, seed, setup)?;
    let mut trace = RunTrace::default();
    let mut holdout_cache = HashMap::new();
    for _ in 0..hp.steps {
        evaluate_swarm(&mut swarm, evaluator)?;
        record(&swarm, &mut trace, holdout, &mut holdout_cache)?;
        step_swarm(&mut swarm)?;
    }
    evaluate_swarm(&mut swarm, evaluator)?;
    record(&swarm, &mut trace, holdout, &mut holdout_cache)?;
    trace.evaluator_calls = swarm.evaluator_calls();
    Ok(PsoOutcome {
        merged: swarm.gbest_position().expect("evaluated").clone(),
        report: swarm.gbest_report().expect("evaluated").clone(),
        trace,
    })
}
