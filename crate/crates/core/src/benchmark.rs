//! Canonical problem builders shared by tests, the check suite and the CLI.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};
use crate::nonlinear::{seird_prior, MapOptions, NonlinearProblem, SeirdConfig, SeirdModel, SeirdPriorConfig};
use crate::models::{AdvectionDiffusionConfig, AdvectionDiffusionModel, AdvectionDiffusionOperator, SensorArray, ToyDenseModel};
use crate::posterior::{BayesianLinearProblem, SolverOptions};
use crate::prior::{EllipticGaussianPrior, PriorConfig};
use crate::rng;
use crate::space::MassMatrix;

/// Candidate sensor locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorLayout {
    /// Tensor grid of `per_x * per_y` interior points.
    Grid { per_x: usize, per_y: usize },
    /// `count` points drawn uniformly from `[margin, L - margin]^2`.
    Random { count: usize, seed: u64, margin: f64 },
    Explicit(Vec<[f64; 2]>),
}

impl Default for SensorLayout {
    fn default() -> Self {
        SensorLayout::Random { count: 10, seed: 7, margin: 0.1 }
    }
}

impl SensorLayout {
    pub fn build(&self, model: &AdvectionDiffusionModel) -> Result<SensorArray> {
        match self {
            SensorLayout::Grid { per_x, per_y } => SensorArray::uniform_grid(model, *per_x, *per_y),
            SensorLayout::Random { count, seed, margin } => {
                let [lx, ly] = model.config().lengths;
                if !(*margin > 0.0) || 2.0 * margin >= lx.min(ly) {
                    return Err(OedError::InvalidArgument("sensor margin must be positive and fit the domain".into()));
                }
                let mut r = rng::substream(*seed, "sensor-layout", 0);
                let coords = (0..*count)
                    .map(|_| {
                        [
                            margin + (lx - 2.0 * margin) * r.random::<f64>(),
                            margin + (ly - 2.0 * margin) * r.random::<f64>(),
                        ]
                    })
                    .collect();
                SensorArray::new(model, coords)
            }
            SensorLayout::Explicit(c) => SensorArray::new(model, c.clone()),
        }
    }
}

/// Linear advection-diffusion design problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdBenchmark {
    pub model: AdvectionDiffusionConfig,
    pub sensors: SensorLayout,
    pub prior: PriorConfig,
    pub sigma: f64,
    pub solver: SolverOptions,
}

impl Default for AdBenchmark {
    fn default() -> Self {
        Self {
            model: AdvectionDiffusionConfig::default(),
            sensors: SensorLayout::default(),
            prior: PriorConfig::default(),
            sigma: 0.05,
            solver: SolverOptions::default(),
        }
    }
}

/// Built advection-diffusion problem with handles to its parts.
pub struct AdProblem {
    pub model: Arc<AdvectionDiffusionModel>,
    pub sensors: Arc<SensorArray>,
    pub problem: BayesianLinearProblem,
}

impl AdBenchmark {
    /// Default problem with `count` scattered sensors.
    pub fn with_sensors(count: usize) -> Self {
        Self {
            sensors: SensorLayout::Random { count, seed: 7, margin: 0.1 },
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<AdProblem> {
        let model = Arc::new(AdvectionDiffusionModel::new(self.model.clone())?);
        let sensors = Arc::new(self.sensors.build(&model)?);
        let c = &self.model;
        let prior = EllipticGaussianPrior::grid_2d(c.nx, c.ny, c.lengths, &self.prior)?;
        let op = AdvectionDiffusionOperator::new(model.clone(), sensors.clone());
        let problem = BayesianLinearProblem::new(Arc::new(op), Arc::new(prior), self.sigma)?.with_solver(self.solver);
        Ok(AdProblem { model, sensors, problem })
    }
}

/// Identity forward map with independent prior variances, unit mass.
pub fn toy_diagonal(variances: &[f64], sigma: f64) -> Result<BayesianLinearProblem> {
    let n = variances.len();
    let prior = EllipticGaussianPrior::diagonal(variances)?;
    let model = ToyDenseModel::new(DMatrix::identity(n, n), MassMatrix::identity(n))?;
    BayesianLinearProblem::new(Arc::new(model.operator()), Arc::new(prior), sigma)
}

/// Small dense problem: 1D elliptic prior on `n` nodes and a seeded random
/// `n_s x n` forward matrix.
pub fn toy_dense(n: usize, n_s: usize, sigma: f64, seed: u64) -> Result<BayesianLinearProblem> {
    let prior = EllipticGaussianPrior::grid_1d(n, 1.0, &PriorConfig { gamma: 0.05, delta: 1.0, mean: 0.0 })?;
    let mut r = rng::substream(seed, "toy-forward", 0);
    let f = DMatrix::from_fn(n_s, n, |_, _| r.random::<f64>() * 2.0 - 1.0);
    let model = ToyDenseModel::new(f, (**prior.mass()).clone())?;
    BayesianLinearProblem::new(Arc::new(model.operator()), Arc::new(prior), sigma)
}

/// Seeded design with entries uniform in `[0, 1]`.
pub fn random_design(n_s: usize, seed: u64, index: u64) -> DVector<f64> {
    let mut r = rng::substream(seed, "random-design", index);
    DVector::from_fn(n_s, |_, _| r.random::<f64>())
}

/// SEIRD observation-time design problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeirdBenchmark {
    pub model: SeirdConfig,
    pub prior: SeirdPriorConfig,
    pub sigma: f64,
    pub map: MapOptions,
}

impl Default for SeirdBenchmark {
    fn default() -> Self {
        Self {
            model: SeirdConfig::default(),
            prior: SeirdPriorConfig::default(),
            sigma: 5.0,
            map: MapOptions::default(),
        }
    }
}

impl SeirdBenchmark {
    pub fn build(&self) -> Result<(Arc<SeirdModel>, NonlinearProblem)> {
        let model = Arc::new(SeirdModel::new(self.model.clone())?);
        let prior = Arc::new(seird_prior(&self.model, &self.prior)?);
        let problem = NonlinearProblem::new(model.clone(), prior, self.sigma)?.with_options(self.map);
        Ok((model, problem))
    }
}
