//! Run configuration: a JSON file plus `--dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use swarm_merge::fitness::{
    make_synthetic_experts, mlp_synthetic_build, ExternalEvaluator, ExternalEvaluatorConfig, MlpBenchSpec,
    QuadraticBenchSpec,
};
use swarm_merge::{Dtype, EsParams, FitnessEvaluator, MergeMethod, MergeRecipe, PsoHyperparams, SwarmComposition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub base: Option<PathBuf>,
    pub experts: Vec<ExpertEntry>,
    pub merge: MergeSection,
    pub pso: PsoSection,
    pub evaluator: Option<EvaluatorSpec>,
    /// Scores the gbest after every PSO evaluation when `pso.holdout_eval` is set.
    pub holdout_evaluator: Option<EvaluatorSpec>,
    pub output: OutputSection,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            base: None,
            experts: Vec::new(),
            merge: MergeSection::default(),
            pso: PsoSection::default(),
            evaluator: None,
            holdout_evaluator: None,
            output: OutputSection::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub method: String,
    pub scaling: f64,
    pub drop_rate: f64,
    pub keep_fraction: f64,
    pub epsilon: f64,
    pub es: EsParams,
}

impl Default for MergeSection {
    fn default() -> Self {
        let r = MergeRecipe::default();
        Self {
            method: r.method.to_string(),
            scaling: r.scaling,
            drop_rate: r.drop_rate,
            keep_fraction: r.keep_fraction,
            epsilon: r.epsilon,
            es: r.es,
        }
    }
}

impl MergeSection {
    pub fn recipe(&self, seed: u64) -> Result<MergeRecipe> {
        let method: MergeMethod = self.method.parse()?;
        Ok(MergeRecipe {
            method,
            scaling: self.scaling,
            drop_rate: self.drop_rate,
            keep_fraction: self.keep_fraction,
            epsilon: self.epsilon,
            seed,
            es: self.es.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoSection {
    pub c1: f64,
    pub c2: f64,
    pub w: f64,
    pub p: f64,
    pub steps: usize,
    pub composition: SwarmComposition,
    pub holdout_eval: bool,
}

impl Default for PsoSection {
    fn default() -> Self {
        let hp = PsoHyperparams::default();
        Self {
            c1: hp.c1,
            c2: hp.c2,
            w: hp.w,
            p: hp.p,
            steps: hp.steps,
            composition: SwarmComposition::Full,
            holdout_eval: false,
        }
    }
}

impl PsoSection {
    pub fn hyperparams(&self) -> PsoHyperparams {
        PsoHyperparams {
            c1: self.c1,
            c2: self.c2,
            w: self.w,
            p: self.p,
            steps: self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub report: PathBuf,
    pub dtype: Dtype,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("merged.safetensors"),
            trace: PathBuf::from("trace.csv"),
            report: PathBuf::from("report.json"),
            dtype: Dtype::F32,
        }
    }
}

/// Where fitness comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    QuadraticSynthetic {
        #[serde(default)]
        spec: QuadraticBenchSpec,
        #[serde(default = "default_noise")]
        noise: f64,
        seed: u64,
    },
    MlpSynthetic {
        #[serde(default)]
        spec: MlpBenchSpec,
        seed: u64,
        /// Score on the holdout split instead of the optimization split.
        #[serde(default)]
        holdout: bool,
    },
    ExternalCommand(ExternalEvaluatorConfig),
}

pub fn default_noise() -> f64 {
    0.01
}

impl EvaluatorSpec {
    pub fn build(&self) -> Result<Box<dyn FitnessEvaluator>> {
        Ok(match self {
            EvaluatorSpec::QuadraticSynthetic { spec, noise, seed } => {
                Box::new(make_synthetic_experts(spec, *noise, *seed)?.evaluator)
            }
            EvaluatorSpec::MlpSynthetic { spec, seed, holdout } => {
                let problem = mlp_synthetic_build(spec, *seed)?;
                if *holdout {
                    Box::new(problem.holdout.expect("MLP problems carry a holdout split"))
                } else {
                    Box::new(problem.evaluator)
                }
            }
            EvaluatorSpec::ExternalCommand(cfg) => Box::new(ExternalEvaluator::new(cfg.clone())?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchSuite {
    Quadratic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub suites: Vec<BenchSuite>,
    /// Seeds `seed, seed+1, ..., seed+seeds-1`.
    pub seeds: usize,
    pub quadratic: QuadraticBenchSpec,
    pub noise: f64,
    pub mlp: MlpBenchSpec,
    /// PSO step count on the MLP bench; `pso.steps` applies to the quadratic bench.
    pub mlp_steps: usize,
    /// Also write base, experts and (quadratic) task optima as checkpoints.
    pub export_checkpoints: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suites: vec![BenchSuite::Quadratic],
            seeds: 1,
            quadratic: QuadraticBenchSpec::default(),
            noise: default_noise(),
            mlp: MlpBenchSpec::default(),
            mlp_steps: 5,
            export_checkpoints: false,
        }
    }
}

/// Parses a dotted override value: JSON when it parses, a plain string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `root` to `value`, creating objects on the way.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("invalid override path `{path}`");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            bail!("override `{path}`: `{key}` is not inside an object");
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| anyhow!("override `{path}`: parent is not an object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), override_value(raw));
    Ok(())
}

/// `(dotted path, raw value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b=v` / `--a.b v` overrides out of the raw argument list.
/// Flags without a dot in their name are left for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("override --{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

/// Loads `path` (or an empty object), applies overrides in order, and
/// materializes every default.
pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Map::new()),
    };
    if !value.is_object() {
        bail!("config must be a JSON object");
    }
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let config: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    Ok(config)
}
