use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use swarm_merge::{
    encode_checkpoint, load_checkpoint, merge, run_pso_merge_with, FitnessEvaluator, MergeMethod, ParameterSet,
    SwarmSetup,
};

use crate::bench::run_bench;
use crate::config::RunConfig;

fn out_path(config: &RunConfig, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.out_dir.join(p)
    }
}

/// Writes through a temp file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

struct Inputs {
    base: ParameterSet,
    experts: Vec<ParameterSet>,
    labels: Vec<String>,
    digests: BTreeMap<String, String>,
}

/// Checks that every input file exists before anything is loaded.
fn check_input_paths(config: &RunConfig) -> Result<()> {
    let base = config.base.as_ref().context("config has no `base` checkpoint")?;
    if config.experts.is_empty() {
        bail!("config lists no experts");
    }
    for p in std::iter::once(base).chain(config.experts.iter().map(|e| &e.path)) {
        if !p.is_file() {
            bail!("checkpoint not found: {}", p.display());
        }
    }
    Ok(())
}

fn load_inputs(config: &RunConfig) -> Result<Inputs> {
    let base_path = config.base.as_ref().expect("checked");
    let base = load_checkpoint(base_path).with_context(|| format!("loading {}", base_path.display()))?;
    let mut digests = BTreeMap::new();
    digests.insert("base".to_string(), base.digest_hex());
    let mut experts = Vec::new();
    let mut labels = Vec::new();
    for e in &config.experts {
        let ps = load_checkpoint(&e.path).with_context(|| format!("loading {}", e.path.display()))?;
        ps.keyspace_check(&base)
            .with_context(|| format!("expert `{}` does not match the base", e.name))?;
        if digests.insert(e.name.clone(), ps.digest_hex()).is_some() {
            bail!("duplicate expert name `{}`", e.name);
        }
        experts.push(ps);
        labels.push(e.name.clone());
    }
    Ok(Inputs {
        base,
        experts,
        labels,
        digests,
    })
}

fn build_evaluator(config: &RunConfig) -> Result<Option<Box<dyn FitnessEvaluator>>> {
    config.evaluator.as_ref().map(|e| e.build()).transpose()
}

fn resolved(config: &RunConfig) -> Result<Value> {
    Ok(serde_json::to_value(config)?)
}

fn write_resolved_config(config: &RunConfig) -> Result<()> {
    write_json(&config.out_dir.join("resolved_config.json"), &resolved(config)?)
}

fn save_merged(config: &RunConfig, merged: &ParameterSet) -> Result<PathBuf> {
    let path = out_path(config, &config.output.checkpoint);
    write_atomic(&path, &encode_checkpoint(merged, config.output.dtype)?)?;
    Ok(path)
}

/// `merge`: runs the configured static method (or the weight search).
pub fn cmd_merge(config: &RunConfig) -> Result<Value> {
    let recipe = config.merge.recipe(config.seed)?;
    check_input_paths(config)?;
    if recipe.method == MergeMethod::EsWeightSearch && config.evaluator.is_none() {
        bail!("es_weight_search requires an evaluator");
    }
    let evaluator = build_evaluator(config)?;
    let inputs = load_inputs(config)?;
    write_resolved_config(config)?;

    let out = merge(&recipe, &inputs.base, &inputs.experts, evaluator.as_deref())?;
    let report = evaluator.as_ref().map(|e| e.evaluate(&out.merged)).transpose()?;
    save_merged(config, &out.merged)?;

    let mut value = json!({
        "method": recipe.method.as_str(),
        "config": resolved(config)?,
        "per_task": report.as_ref().map(|r| &r.per_task),
        "mean": report.as_ref().map(|r| r.mean),
        "input_digests": inputs.digests,
    });
    if let Some(w) = &out.weights {
        value["weights"] = json!(w);
        value["evaluations"] = json!(out.evaluations);
    }
    write_json(&out_path(config, &config.output.report), &value)?;
    Ok(value)
}

/// The hyperparameter echo printed by `pso`.
pub fn pso_echo(config: &RunConfig) -> String {
    let p = &config.pso;
    format!(
        "c1={:?} c2={:?} w={:?} p={:?} steps={} composition={} seed={}",
        p.c1,
        p.c2,
        p.w,
        p.p,
        p.steps,
        p.composition.as_str(),
        config.seed
    )
}

/// `pso`: full PSO-Merging run; writes checkpoint, trace CSV and report.
pub fn cmd_pso(config: &RunConfig) -> Result<Value> {
    let hp = config.pso.hyperparams();
    hp.validate()?;
    check_input_paths(config)?;
    let evaluator = build_evaluator(config)?.context("pso requires an evaluator")?;
    let holdout = if config.pso.holdout_eval {
        Some(
            config
                .holdout_evaluator
                .as_ref()
                .context("pso.holdout_eval is set but no holdout_evaluator is configured")?
                .build()?,
        )
    } else {
        None
    };
    let inputs = load_inputs(config)?;
    write_resolved_config(config)?;

    let setup = SwarmSetup {
        composition: config.pso.composition,
        expert_labels: inputs.labels.clone(),
    };
    let out = run_pso_merge_with(
        &inputs.base,
        &inputs.experts,
        &hp,
        evaluator.as_ref(),
        config.seed,
        &setup,
        holdout.as_deref(),
    )?;
    save_merged(config, &out.merged)?;
    write_atomic(
        &out_path(config, &config.output.trace),
        out.trace.to_csv_string()?.as_bytes(),
    )?;

    let mut value = json!({
        "method": "pso_merging",
        "config": resolved(config)?,
        "per_task": out.report.per_task,
        "mean": out.report.mean,
        "input_digests": inputs.digests,
        "gbest_fitness": out.trace.gbest_fitness,
        "evaluator_calls": out.trace.evaluator_calls,
    });
    if holdout.is_some() {
        value["holdout_gbest"] = json!(out.trace.holdout_gbest);
    }
    write_json(&out_path(config, &config.output.report), &value)?;
    Ok(value)
}

/// `bench-synthetic`: writes `table.md`, `table.csv` and convergence CSVs.
pub fn cmd_bench(config: &RunConfig) -> Result<Value> {
    if config.bench.seeds == 0 || config.bench.suites.is_empty() {
        bail!("bench needs at least one seed and one suite");
    }
    config.pso.hyperparams().validate()?;
    config.merge.recipe(config.seed)?;
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    write_resolved_config(config)?;
    let tables = run_bench(config)?;
    Ok(json!({ "method": "bench_synthetic", "config": resolved(config)?, "tables": tables }))
}

/// `eval`: scores one checkpoint.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<Value> {
    let spec = config.evaluator.as_ref().context("eval requires an evaluator")?;
    if !checkpoint.is_file() {
        bail!("checkpoint not found: {}", checkpoint.display());
    }
    let theta = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let report = spec.build()?.evaluate(&theta)?;
    Ok(json!({
        "method": "eval",
        "config": resolved(config)?,
        "per_task": report.per_task,
        "mean": report.mean,
        "input_digests": { "checkpoint": theta.digest_hex() },
    }))
}
