use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinrim::dephasing::StrengthGrid;
use spinrim::optimizer::{Algorithm, OptimizationConfig};
use spinrim::pipeline::{parse_problem_list, EvaluationConfig, ProblemSpec};

/// Rejected configuration; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub restarts: usize,
    pub keep: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub delta_bound: f64,
    pub t_min: f64,
    pub t_max_per_spin: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizationConfig::new(Algorithm::A, 0);
        Self {
            restarts: d.restarts,
            keep: d.keep,
            max_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
            delta_bound: d.delta_bound,
            t_min: d.t_min,
            t_max_per_spin: d.t_max_per_spin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub ops: usize,
    pub delta_max: f64,
    pub delta_steps: usize,
    pub write_grids: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let d = EvaluationConfig::new(0);
        Self {
            ops: d.ops,
            delta_max: d.grid.delta_max,
            delta_steps: d.grid.steps,
            write_grids: true,
        }
    }
}

/// Declarative run description. Every seed has a fixed default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Seed of the dephasing ensemble; the synthesis seed when absent.
    pub dephasing_seed: Option<u64>,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    /// Comma-separated `topology:N:OUT[:scheme]` entries; all default problems when absent.
    pub problems: Option<String>,
    pub optimizer: OptimizerSection,
    pub evaluation: EvaluationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dephasing_seed: None,
            out: PathBuf::from("spinrim-out"),
            jobs: None,
            problems: None,
            optimizer: OptimizerSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub problems: Option<String>,
    pub delta_max: Option<f64>,
    pub delta_steps: Option<usize>,
    pub no_grids: bool,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if overrides.jobs.is_some() {
            cfg.jobs = overrides.jobs;
        }
        if overrides.problems.is_some() {
            cfg.problems = overrides.problems.clone();
        }
        if let Some(d) = overrides.delta_max {
            cfg.evaluation.delta_max = d;
        }
        if let Some(n) = overrides.delta_steps {
            cfg.evaluation.delta_steps = n;
        }
        if overrides.no_grids {
            cfg.evaluation.write_grids = false;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        if self.jobs == Some(0) {
            return Err(bad("jobs must be at least 1"));
        }
        self.problem_specs()?;
        self.optimization(Algorithm::A).validate().map_err(|e| bad(e.to_string()))?;
        self.evaluation()?;
        Ok(())
    }

    pub fn problem_specs(&self) -> anyhow::Result<Vec<ProblemSpec>> {
        match &self.problems {
            Some(list) => parse_problem_list(list).map_err(|e| bad(e.to_string())),
            None => Ok(ProblemSpec::defaults()),
        }
    }

    pub fn optimization(&self, algorithm: Algorithm) -> OptimizationConfig {
        let o = &self.optimizer;
        OptimizationConfig {
            restarts: o.restarts,
            keep: o.keep,
            max_iterations: o.max_iterations,
            gradient_tolerance: o.gradient_tolerance,
            delta_bound: o.delta_bound,
            t_min: o.t_min,
            t_max_per_spin: o.t_max_per_spin,
            ..OptimizationConfig::new(algorithm, self.seed)
        }
    }

    pub fn evaluation(&self) -> anyhow::Result<EvaluationConfig> {
        let e = &self.evaluation;
        if e.ops == 0 {
            return Err(bad("evaluation.ops must be at least 1"));
        }
        let grid = StrengthGrid::new(e.delta_max, e.delta_steps).map_err(|err| bad(err.to_string()))?;
        Ok(EvaluationConfig {
            dephasing_seed: self.dephasing_seed.unwrap_or(self.seed),
            ops: e.ops,
            grid,
        })
    }
}
