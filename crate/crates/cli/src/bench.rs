//! Synthetic benchmark: every baseline, PSO-Merging, and the swarm
//! composition ablation on generated experts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use swarm_merge::fitness::{make_synthetic_experts, mlp_synthetic_build, SyntheticProblem};
use swarm_merge::merge::{
    dare_linear, dare_ties, della_merge, es_weight_search, rankmean_merge, task_arithmetic, ties_merge,
};
use swarm_merge::{
    save_checkpoint, Error, FitnessEvaluator, FitnessReport, ParameterSet, PsoHyperparams, RunTrace, SwarmComposition,
    SwarmSetup,
};

use crate::config::{BenchSuite, MergeSection, RunConfig};

pub const STATIC_METHODS: [&str; 7] = [
    "task_arithmetic",
    "dare_linear",
    "ties",
    "dare_ties",
    "della",
    "rankmean",
    "es_weight_search",
];

pub const PSO_ROW: &str = "pso_merging";
pub const ORIGINALS_ROW: &str = "pso_originals_only";
pub const SPARSIFIED_ROW: &str = "pso_sparsified_only";
pub const OPTIMUM_ROW: &str = "optimum";

/// One table row for one seed. `report` is `None` when the run diverged.
#[derive(Clone, Debug, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub report: Option<FitnessReport>,
    /// λ picked from {1/n, 1} for methods that take one.
    pub scaling: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PsoRun {
    pub label: String,
    pub trace: Option<RunTrace>,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub suite: BenchSuite,
    pub seed: u64,
    pub task_names: Vec<String>,
    pub rows: Vec<MethodResult>,
    pub pso_runs: Vec<PsoRun>,
}

impl SeedRun {
    pub fn mean(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| r.report.as_ref())
            .map(|r| r.mean)
    }
}

fn suite_name(s: BenchSuite) -> &'static str {
    match s {
        BenchSuite::Quadratic => "quadratic",
        BenchSuite::Mlp => "mlp",
    }
}

/// Runs a λ-scaled method at λ = 1/n and λ = 1 and keeps the better one.
fn best_scaling<E: FitnessEvaluator + ?Sized>(
    evaluator: &E,
    n: usize,
    run: impl Fn(f64) -> swarm_merge::Result<ParameterSet>,
) -> Result<(FitnessReport, f64)> {
    let mut best: Option<(FitnessReport, f64)> = None;
    for lambda in [1.0 / n as f64, 1.0] {
        let report = evaluator.evaluate(&run(lambda)?)?;
        if best.as_ref().is_none_or(|(b, _)| report.mean > b.mean) {
            best = Some((report, lambda));
        }
    }
    Ok(best.expect("two candidates"))
}

/// Every static baseline on `problem`, scored on its evaluator.
pub fn static_baselines<E: FitnessEvaluator>(
    problem: &SyntheticProblem<E>,
    merge: &MergeSection,
    steps: usize,
    seed: u64,
) -> Result<Vec<MethodResult>> {
    let (base, experts, evaluator) = (&problem.base, &problem.experts, &problem.evaluator);
    let n = experts.len();
    let m = merge;
    let scaled = |method: &str, run: &dyn Fn(f64) -> swarm_merge::Result<ParameterSet>| -> Result<MethodResult> {
        let (report, lambda) = best_scaling(evaluator, n, run)?;
        Ok(MethodResult {
            method: method.to_string(),
            report: Some(report),
            scaling: Some(lambda),
        })
    };
    let mut rows = vec![
        scaled("task_arithmetic", &|l| task_arithmetic(base, experts, l))?,
        scaled("dare_linear", &|l| dare_linear(base, experts, l, m.drop_rate, seed))?,
        scaled("ties", &|l| ties_merge(base, experts, l, m.keep_fraction))?,
        scaled("dare_ties", &|l| {
            dare_ties(base, experts, l, m.drop_rate, m.keep_fraction, seed)
        })?,
        scaled("della", &|l| {
            della_merge(base, experts, l, m.drop_rate, m.epsilon, seed)
        })?,
    ];
    rows.push(MethodResult {
        method: "rankmean".into(),
        report: Some(evaluator.evaluate(&rankmean_merge(base, experts)?)?),
        scaling: None,
    });
    let mut es = m.es.clone();
    es.steps = steps;
    let out = es_weight_search(base, experts, evaluator, &es, seed)?;
    rows.push(MethodResult {
        method: "es_weight_search".into(),
        report: Some(out.report),
        scaling: None,
    });
    Ok(rows)
}

/// Runs PSO with the given composition; a non-finite position counts as
/// divergence rather than an error.
pub fn pso_run<E: FitnessEvaluator>(
    problem: &SyntheticProblem<E>,
    hp: &PsoHyperparams,
    composition: SwarmComposition,
    seed: u64,
) -> Result<(Option<FitnessReport>, Option<RunTrace>)> {
    let setup = SwarmSetup {
        composition,
        ..Default::default()
    };
    match swarm_merge::run_pso_merge_with(
        &problem.base,
        &problem.experts,
        hp,
        &problem.evaluator,
        seed,
        &setup,
        problem.holdout.as_ref(),
    ) {
        Ok(out) => Ok((Some(out.report), Some(out.trace))),
        Err(Error::NonFinite { .. }) => Ok((None, None)),
        Err(e) => Err(e.into()),
    }
}

fn run_problem<E: FitnessEvaluator>(
    suite: BenchSuite,
    problem: &SyntheticProblem<E>,
    config: &RunConfig,
    steps: usize,
    seed: u64,
) -> Result<SeedRun> {
    let mut rows: Vec<MethodResult> = problem
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(MethodResult {
                method: format!("expert{i}"),
                report: Some(problem.evaluator.evaluate(e)?),
                scaling: None,
            })
        })
        .collect::<Result<_>>()?;
    rows.extend(static_baselines(problem, &config.merge, steps, seed)?);

    let hp = PsoHyperparams {
        steps,
        ..config.pso.hyperparams()
    };
    let mut pso_runs = Vec::new();
    for (label, composition) in [
        (PSO_ROW, SwarmComposition::Full),
        (ORIGINALS_ROW, SwarmComposition::OriginalsOnly),
        (SPARSIFIED_ROW, SwarmComposition::SparsifiedOnly),
    ] {
        let (report, trace) = pso_run(problem, &hp, composition, seed)?;
        rows.push(MethodResult {
            method: label.into(),
            report,
            scaling: None,
        });
        pso_runs.push(PsoRun {
            label: label.into(),
            trace,
        });
    }
    Ok(SeedRun {
        suite,
        seed,
        task_names: problem.evaluator.task_names().to_vec(),
        rows,
        pso_runs,
    })
}

/// One seed of the quadratic bench, including the optimum row.
pub fn quadratic_seed(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    let b = &config.bench;
    let problem = make_synthetic_experts(&b.quadratic, b.noise, seed)?;
    let mut run = run_problem(BenchSuite::Quadratic, &problem, config, config.pso.steps, seed)?;
    let (opt, _) = problem.evaluator.optimum(&[])?;
    run.rows.push(MethodResult {
        method: OPTIMUM_ROW.into(),
        report: Some(problem.evaluator.evaluate(&opt)?),
        scaling: None,
    });
    Ok(run)
}

/// One seed of the MLP bench.
pub fn mlp_seed(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    let problem = mlp_synthetic_build(&config.bench.mlp, seed)?;
    run_problem(BenchSuite::Mlp, &problem, config, config.bench.mlp_steps, seed)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-method medians across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub method: String,
    pub per_task: Vec<f64>,
    pub avg: f64,
    pub diverged: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteTable {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub task_names: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub fn summarize(suite: BenchSuite, runs: &[SeedRun]) -> SuiteTable {
    let task_names = runs[0].task_names.clone();
    let methods: Vec<String> = runs[0].rows.iter().map(|r| r.method.clone()).collect();
    let rows = methods
        .iter()
        .map(|m| {
            let reports: Vec<&FitnessReport> = runs
                .iter()
                .filter_map(|r| r.rows.iter().find(|x| &x.method == m).and_then(|x| x.report.as_ref()))
                .collect();
            let per_task = task_names
                .iter()
                .map(|t| median(&mut reports.iter().map(|r| r.per_task[t]).collect::<Vec<_>>()))
                .collect();
            TableRow {
                method: m.clone(),
                per_task,
                avg: median(&mut reports.iter().map(|r| r.mean).collect::<Vec<_>>()),
                diverged: runs.len() - reports.len(),
            }
        })
        .collect();
    SuiteTable {
        suite: suite_name(suite).into(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        task_names,
        rows,
    }
}

pub fn table_markdown(tables: &[SuiteTable]) -> String {
    let mut out = String::new();
    for t in tables {
        let _ = writeln!(out, "## {} ({} seeds, medians)\n", t.suite, t.seeds.len());
        let _ = writeln!(out, "| method | {} | AVG |", t.task_names.join(" | "));
        let _ = writeln!(out, "|---|{}---|", "---|".repeat(t.task_names.len()));
        for r in &t.rows {
            let cells: Vec<String> = r.per_task.iter().map(|v| format!("{v:.4}")).collect();
            let avg = if r.diverged == t.seeds.len() {
                "diverged".to_string()
            } else {
                format!("{:.4}", r.avg)
            };
            let _ = writeln!(out, "| {} | {} | {} |", r.method, cells.join(" | "), avg);
        }
        out.push('\n');
    }
    out
}

pub fn write_table_csv(tables: &[SuiteTable], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let width = tables.iter().map(|t| t.task_names.len()).max().unwrap_or(0);
    let mut header = vec!["suite".to_string(), "method".to_string()];
    header.extend((0..width).map(|i| format!("task{i}")));
    header.extend(["AVG".to_string(), "diverged_seeds".to_string()]);
    w.write_record(&header)?;
    for t in tables {
        for r in &t.rows {
            let mut rec = vec![t.suite.clone(), r.method.clone()];
            rec.extend(r.per_task.iter().map(|v| v.to_string()));
            rec.extend((r.per_task.len()..width).map(|_| String::new()));
            rec.push(r.avg.to_string());
            rec.push(r.diverged.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_convergence(dir: &Path, run: &SeedRun) -> Result<()> {
    for pso in &run.pso_runs {
        let Some(trace) = &pso.trace else { continue };
        let path = dir.join(format!("{}_seed{}_{}.csv", suite_name(run.suite), run.seed, pso.label));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["step", "gbest_fitness", "holdout_gbest"])?;
        for (step, g) in trace.gbest_fitness.iter().enumerate() {
            let h = trace.holdout_gbest.get(step).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([step.to_string(), g.to_string(), h])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn export_problem<E>(dir: &Path, problem: &SyntheticProblem<E>) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&problem.base, dir.join("base.safetensors"))?;
    for (i, e) in problem.experts.iter().enumerate() {
        save_checkpoint(e, dir.join(format!("expert{i}.safetensors")))?;
    }
    Ok(())
}

fn export_checkpoints(out_dir: &Path, config: &RunConfig, suite: BenchSuite, seed: u64) -> Result<()> {
    let dir = out_dir
        .join("checkpoints")
        .join(format!("{}_seed{seed}", suite_name(suite)));
    match suite {
        BenchSuite::Quadratic => {
            let p = make_synthetic_experts(&config.bench.quadratic, config.bench.noise, seed)?;
            export_problem(&dir, &p)?;
            for (i, t) in p.evaluator.tasks().iter().enumerate() {
                save_checkpoint(&t.optimum, dir.join(format!("optimum{i}.safetensors")))?;
            }
        }
        BenchSuite::Mlp => export_problem(&dir, &mlp_synthetic_build(&config.bench.mlp, seed)?)?,
    }
    Ok(())
}

/// Runs every configured suite over every seed and writes `table.md`,
/// `table.csv` and per-run convergence CSVs under `out_dir`.
pub fn run_bench(config: &RunConfig) -> Result<Vec<SuiteTable>> {
    let out_dir = &config.out_dir;
    let conv_dir = out_dir.join("convergence");
    fs::create_dir_all(&conv_dir).with_context(|| format!("creating {}", conv_dir.display()))?;
    let seeds: Vec<u64> = (0..config.bench.seeds as u64).map(|i| config.seed + i).collect();
    let mut tables = Vec::new();
    for &suite in &config.bench.suites {
        let runs = seeds
            .par_iter()
            .map(|&seed| match suite {
                BenchSuite::Quadratic => quadratic_seed(config, seed),
                BenchSuite::Mlp => mlp_seed(config, seed),
            })
            .collect::<Result<Vec<_>>>()?;
        for run in &runs {
            write_convergence(&conv_dir, run)?;
            if config.bench.export_checkpoints {
                export_checkpoints(out_dir, config, suite, run.seed)?;
            }
        }
        tables.push(summarize(suite, &runs));
    }
    fs::write(out_dir.join("table.md"), table_markdown(&tables))?;
    write_table_csv(&tables, &out_dir.join("table.csv"))?;
    Ok(tables)
}
