//! Scores parameter sets by running an external command.
//!
//! The command template is shell-split; `{checkpoint}` in any argument is
//! replaced by the absolute path of a temporary checkpoint holding θ. The
//! command must print `{"scores": {"<task>": <number>, ...}}` as the last
//! line of stdout and exit 0.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{FitnessEvaluator, FitnessReport};
use crate::error::{Error, Result};
use crate::tensor_store::{save_checkpoint, ParameterSet};

/// Comma-separated task list passed to the evaluator process.
pub const TASKS_ENV_VAR: &str = "SWARM_MERGE_TASKS";

const PLACEHOLDER: &str = "{checkpoint}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEvaluatorConfig {
    pub command: String,
    pub task_names: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Maximum number of evaluator processes alive at once.
    #[serde(default = "default_processes")]
    pub max_processes: usize,
    /// Directory for temporary checkpoints; the system temp dir when unset.
    #[serde(default)]
    pub temp_dir: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    3600.0
}

fn default_processes() -> usize {
    1
}

#[derive(Clone, Debug)]
pub struct ExternalEvaluator {
    config: ExternalEvaluatorConfig,
    argv: Vec<String>,
}

impl ExternalEvaluator {
    pub fn new(config: ExternalEvaluatorConfig) -> Result<Self> {
        let argv = shlex::split(&config.command)
            .ok_or_else(|| Error::InvalidParameter(format!("cannot split command `{}`", config.command)))?;
        if argv.is_empty() {
            return Err(Error::InvalidParameter("evaluator command is empty".into()));
        }
        if !argv.iter().any(|a| a.contains(PLACEHOLDER)) {
            return Err(Error::InvalidParameter(format!(
                "evaluator command must contain the {PLACEHOLDER} placeholder"
            )));
        }
        if config.task_names.is_empty() {
            return Err(Error::InvalidParameter("evaluator needs at least one task name".into()));
        }
        if !(config.timeout_s > 0.0 && config.timeout_s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "timeout must be positive, got {}",
                config.timeout_s
            )));
        }
        if config.max_processes == 0 {
            return Err(Error::InvalidParameter("max_processes must be at least 1".into()));
        }
        Ok(Self { config, argv })
    }

    pub fn config(&self) -> &ExternalEvaluatorConfig {
        &self.config
    }

    fn run(&self, checkpoint: &str) -> Result<String> {
        let args: Vec<String> = self.argv.iter().map(|a| a.replace(PLACEHOLDER, checkpoint)).collect();
        let mut child = Command::new(&args[0])
            .args(&args[1..])
            .env(TASKS_ENV_VAR, self.config.task_names.join(","))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(&args[0], e))?;

        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let timeout = Duration::from_secs_f64(self.config.timeout_s);
        let status = match child.wait_timeout(timeout).map_err(|e| Error::io(&args[0], e))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                // readers may still be blocked on grandchildren holding the pipes
                return Err(Error::EvaluatorTimeout {
                    seconds: self.config.timeout_s,
                });
            }
        };
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::EvaluatorExit {
                status: status.to_string(),
                stderr: String::from_utf8_lossy(&err).trim_end().to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    /// Parses the last non-empty stdout line against the configured tasks.
    pub fn parse_scores(&self, stdout: &str) -> Result<FitnessReport> {
        let line = stdout
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::MalformedScores("evaluator printed nothing".into()))?;
        let value: serde_json::Value =
            serde_json::from_str(line.trim()).map_err(|e| Error::MalformedScores(format!("{e}: {line}")))?;
        let scores = value
            .get("scores")
            .and_then(|s| s.as_object())
            .ok_or_else(|| Error::MalformedScores(format!("expected {{\"scores\": {{...}}}}, got {line}")))?;

        let missing: Vec<String> = self
            .config
            .task_names
            .iter()
            .filter(|t| !scores.contains_key(*t))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteScores { missing });
        }
        let extra: Vec<String> = scores
            .keys()
            .filter(|k| !self.config.task_names.contains(k))
            .cloned()
            .collect();
        if !extra.is_empty() {
            return Err(Error::UnexpectedScores { extra });
        }
        let mut per_task = IndexMap::new();
        for name in &self.config.task_names {
            let v = scores[name]
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedScores(format!("score for `{name}` is not a finite number")))?;
            per_task.insert(name.clone(), v);
        }
        FitnessReport::new(per_task)
    }
}

impl FitnessEvaluator for ExternalEvaluator {
    fn task_names(&self) -> &[String] {
        &self.config.task_names
    }

    fn evaluate(&self, theta: &ParameterSet) -> Result<FitnessReport> {
        let dir = match &self.config.temp_dir {
            Some(d) => d.clone(),
            None => std::env::temp_dir(),
        };
        let file = tempfile::Builder::new()
            .prefix("swarm-merge-")
            .suffix(".safetensors")
            .tempfile_in(&dir)
            .map_err(|e| Error::io(&dir, e))?;
        let path = std::path::absolute(file.path()).map_err(|e| Error::io(file.path(), e))?;
        save_checkpoint(theta, &path)?;
        let stdout = self.run(&path.to_string_lossy())?;
        drop(file);
        self.parse_scores(&stdout)
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_processes
    }
}
