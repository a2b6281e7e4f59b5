//! Experiment configuration: JSON file, `--set` overrides, validation.

use std::path::{Path, PathBuf};

use oedkit::benchmark::{AdBenchmark, SeirdBenchmark};
use oedkit::criteria::{CriterionKind, EstimatorConfig, EstimatorRoute};
use oedkit::design_opt::{OptimizerOptions, PenaltyConfig};
use oedkit::nonlinear::LaplaceTrace;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    AdvectionDiffusion(AdBenchmark),
    Seird(SeirdBenchmark),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::AdvectionDiffusion(AdBenchmark::default())
    }
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::AdvectionDiffusion(_) => "advection_diffusion",
            ProblemConfig::Seird(_) => "seird",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    #[default]
    Greedy,
    Penalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearObjective {
    #[default]
    BayesRisk,
    GaussianA,
    GaussianC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    /// Linear criterion: `A`, `C` or `D`.
    pub criterion: CriterionKind,
    /// Goal region `[x0, x1, y0, y1]` averaged by the c-criterion.
    pub goal_region: [f64; 4],
    pub estimator: EstimatorConfig,
    pub penalty: PenaltyConfig,
    /// Number of sensors to keep; `None` reports the relaxed design only.
    pub budget: Option<usize>,
    pub optimizer: OptimizerOptions,
    /// Starting value of every weight.
    pub initial_weight: f64,
    /// Search used by `nonlinear-oed`.
    pub method: SearchMethod,
    /// Training-set size for nonlinear criteria.
    pub n_d: usize,
    pub nonlinear_criterion: NonlinearObjective,
    pub laplace_trace: LaplaceTrace,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            criterion: CriterionKind::A,
            goal_region: [0.5, 0.9, 0.5, 0.9],
            estimator: EstimatorConfig::default(),
            penalty: PenaltyConfig::default(),
            budget: None,
            optimizer: OptimizerOptions::default(),
            initial_weight: 0.5,
            method: SearchMethod::Greedy,
            n_d: 20,
            nonlinear_criterion: NonlinearObjective::BayesRisk,
            laplace_trace: LaplaceTrace::Dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub design: DesignConfig,
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            design: DesignConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("oedkit-out"),
        }
    }
}

/// Command-line overrides, applied after the file in this order:
/// `--set` pairs, then `--seed`, `--out-dir`, `--k`.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub k: Option<usize>,
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for pair in &overrides.set {
        apply_set(&mut value, pair)?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(k) = overrides.k {
        cfg.design.budget = Some(k);
    }
    cfg.design.estimator.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `dotted.path=value` override; the value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_set(root: &mut Value, pair: &str) -> Result<(), CliError> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set expects path=value, got `{pair}`")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("bad --set path `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        if !node.is_array() && !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| CliError::Validation(format!("`{key}` in `{path}` is not an array index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Validation(format!("index {idx} out of range in `{path}`")))?
            }
            Value::Object(map) => map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default())),
            _ => unreachable!("replaced by an object above"),
        };
        if last {
            *node = parsed.clone();
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let d = &self.design;
        d.penalty.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        d.estimator.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if !(0.0..=1.0).contains(&d.initial_weight) {
            return bad(format!("initial_weight {} outside [0, 1]", d.initial_weight));
        }
        if d.n_d == 0 {
            return bad("n_d must be >= 1".into());
        }
        if d.criterion == CriterionKind::D && d.estimator.route == EstimatorRoute::MonteCarlo {
            return bad("the Monte Carlo route estimates traces only; use another route for D".into());
        }
        let [x0, x1, y0, y1] = d.goal_region;
        if !(x0 < x1 && y0 < y1) {
            return bad("goal_region must be [x0, x1, y0, y1] with x0 < x1 and y0 < y1".into());
        }
        match &self.problem {
            ProblemConfig::AdvectionDiffusion(b) => {
                if !(b.sigma > 0.0) {
                    return bad("noise sigma must be positive".into());
                }
                b.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
            }
            ProblemConfig::Seird(b) => {
                if !(b.sigma > 0.0) {
                    return bad("noise sigma must be positive".into());
                }
                b.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
            }
        }
        Ok(())
    }
}
