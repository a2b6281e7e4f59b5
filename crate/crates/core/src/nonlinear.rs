//! Design for nonlinear inverse problems.
//!
//! The testbed is an SEIRD epidemic model observed through infected counts
//! at candidate times. The parameter vector is
//! `[log beta(t_0), ..., log beta(t_{nb-1}), log sigma_E, log gamma_rec, log delta_mort]`
//! where `beta(t)` interpolates the exponentiated nodes linearly on a uniform
//! grid over `[0, t_end]`.
//!
//! Criteria are sample averages over a fixed training set of prior draws and
//! noisy data: the Bayes risk of the MAP point and the Gaussianized A- and
//! c-criteria built from the Gauss-Newton Hessian at each MAP point.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::Estimate;
use crate::design_opt::DesignObjective;
use crate::error::{check_dim, OedError, Result};
use crate::linalg::{inverse_spd, pcg, CgOptions};
use crate::posterior::DesignVector;
use crate::prior::{EllipticGaussianPrior, PriorConfig};
use crate::rng;
use crate::space::{dense_assemble, m_adjoint_apply, DenseOperator, LinearOperator, MassMatrix, Space};

/// Largest tolerated fraction of failed samples in a sample average.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Forward map with a Jacobian.
pub trait ForwardModel: Send + Sync {
    fn parameter_space(&self) -> &Space;
    fn data_dim(&self) -> usize;
    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>>;
    /// Jacobian at `m` as an operator handle.
    fn linearize(&self, m: &DVector<f64>) -> Result<Arc<dyn LinearOperator>>;
}

/// A linear operator viewed as a (trivially) nonlinear forward model.
pub struct LinearForwardMap {
    op: Arc<dyn LinearOperator>,
}

impl LinearForwardMap {
    pub fn new(op: Arc<dyn LinearOperator>) -> Self {
        Self { op }
    }
}

impl ForwardModel for LinearForwardMap {
    fn parameter_space(&self) -> &Space {
        self.op.domain()
    }
    fn data_dim(&self) -> usize {
        self.op.codomain().dim()
    }
    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.op.apply(m)
    }
    fn linearize(&self, _m: &DVector<f64>) -> Result<Arc<dyn LinearOperator>> {
        Ok(self.op.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeirdConfig {
    pub n_pop: f64,
    pub t_end: f64,
    pub n_beta: usize,
    /// Largest RK4 step; segments between breakpoints use equal substeps.
    pub rk_step: f64,
    /// `(S, E, I, R, D)` at `t = 0`.
    pub initial: [f64; 5],
    pub observation_times: Vec<f64>,
}

impl Default for SeirdConfig {
    fn default() -> Self {
        Self {
            n_pop: 1000.0,
            t_end: 60.0,
            n_beta: 7,
            rk_step: 0.25,
            initial: [990.0, 5.0, 5.0, 0.0, 0.0],
            observation_times: (1..=12).map(|k| 5.0 * k as f64).collect(),
        }
    }
}

impl SeirdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(OedError::InvalidArgument(msg.to_string()));
        if !(self.n_pop > 0.0) || !(self.t_end > 0.0) || !(self.rk_step > 0.0) {
            return bad("SEIRD needs positive population, horizon and step");
        }
        if self.n_beta < 2 {
            return bad("SEIRD needs at least two transmission nodes");
        }
        if self.initial.iter().any(|x| !(*x >= 0.0)) {
            return bad("SEIRD initial state must be nonnegative");
        }
        if (self.initial.iter().sum::<f64>() - self.n_pop).abs() > 1e-9 * self.n_pop {
            return bad("SEIRD initial state must sum to the population");
        }
        if self.observation_times.is_empty()
            || self.observation_times.iter().any(|t| !(*t > 0.0 && *t <= self.t_end))
        {
            return bad("observation times must lie in (0, t_end]");
        }
        if self.observation_times.windows(2).any(|p| p[1] <= p[0]) {
            return bad("observation times must be strictly increasing");
        }
        Ok(())
    }

    fn node_spacing(&self) -> f64 {
        self.t_end / (self.n_beta - 1) as f64
    }

    /// Mass of the parameter space: lumped 1D mass on the transmission
    /// nodes, unit mass on the three rates.
    pub fn parameter_mass(&self) -> Result<MassMatrix> {
        let h = self.node_spacing();
        let mut d = vec![h; self.n_beta];
        d[0] = 0.5 * h;
        d[self.n_beta - 1] = 0.5 * h;
        d.extend_from_slice(&[1.0, 1.0, 1.0]);
        MassMatrix::new(DVector::from_vec(d))
    }
}

/// Prior over the SEIRD log-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeirdPriorConfig {
    /// Elliptic prior on the log-transmission nodes.
    pub beta: PriorConfig,
    /// Prior means of `(sigma_E, gamma_rec, delta_mort)` (not logged).
    pub rates: [f64; 3],
    /// Standard deviations of the logged rates.
    pub log_rate_std: [f64; 3],
}

impl Default for SeirdPriorConfig {
    fn default() -> Self {
        Self {
            beta: PriorConfig {
                gamma: 20.0,
                delta: 0.5,
                mean: 0.35f64.ln(),
            },
            rates: [0.2, 0.1, 0.01],
            log_rate_std: [0.2, 0.2, 0.2],
        }
    }
}

pub fn seird_prior(model: &SeirdConfig, cfg: &SeirdPriorConfig) -> Result<EllipticGaussianPrior> {
    let base = EllipticGaussianPrior::grid_1d(model.n_beta, model.t_end, &cfg.beta)?;
    let means: Vec<f64> = cfg.rates.iter().map(|r| r.ln()).collect();
    base.with_scalars(&means, &cfg.log_rate_std)
}

const NS: usize = 5;

/// SEIRD compartment model integrated with classical RK4.
#[derive(Debug, Clone)]
pub struct SeirdModel {
    config: SeirdConfig,
    space: Space,
    /// Integration breakpoints: transmission nodes and observation times.
    breakpoints: Vec<f64>,
}

struct Rates {
    beta_nodes: Vec<f64>,
    sigma_e: f64,
    gamma_rec: f64,
    delta_mort: f64,
}

impl SeirdModel {
    pub fn new(config: SeirdConfig) -> Result<Self> {
        config.validate()?;
        let space = Space::parameter(config.parameter_mass()?);
        let h = config.node_spacing();
        let mut breakpoints: Vec<f64> = (1..config.n_beta).map(|k| k as f64 * h).collect();
        breakpoints.extend(config.observation_times.iter().copied());
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * config.t_end);
        Ok(Self { config, space, breakpoints })
    }

    pub fn config(&self) -> &SeirdConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.config.n_beta + 3
    }

    /// Copy with a different RK4 step.
    pub fn with_step(&self, rk_step: f64) -> Result<Self> {
        Self::new(SeirdConfig { rk_step, ..self.config.clone() })
    }

    fn rates(&self, m: &DVector<f64>) -> Result<Rates> {
        check_dim("SEIRD parameters", self.n_params(), m.len())?;
        let nb = self.config.n_beta;
        let r = Rates {
            beta_nodes: (0..nb).map(|k| m[k].exp()).collect(),
            sigma_e: m[nb].exp(),
            gamma_rec: m[nb + 1].exp(),
            delta_mort: m[nb + 2].exp(),
        };
        if r.beta_nodes.iter().chain([&r.sigma_e, &r.gamma_rec, &r.delta_mort]).any(|x| !x.is_finite()) {
            return Err(OedError::InvalidArgument("SEIRD rates overflow".into()));
        }
        Ok(r)
    }

    /// Hat-function weights `(k, phi_k(t))` of the two active transmission nodes.
    fn hats(&self, t: f64) -> [(usize, f64); 2] {
        let h = self.config.node_spacing();
        let s = (t / h).clamp(0.0, (self.config.n_beta - 1) as f64);
        let k = (s.floor() as usize).min(self.config.n_beta - 2);
        let theta = s - k as f64;
        [(k, 1.0 - theta), (k + 1, theta)]
    }

    /// Right-hand side of the state (and, if `y` is long enough, the
    /// forward sensitivity) equations.
    fn rhs(&self, t: f64, rates: &Rates, y: &[f64], dy: &mut [f64]) {
        let n = self.config.n_pop;
        let hats = self.hats(t);
        let beta: f64 = hats.iter().map(|(k, p)| p * rates.beta_nodes[*k]).sum();
        let (s, e, i) = (y[0], y[1], y[2]);
        let (se, gr, dm) = (rates.sigma_e, rates.gamma_rec, rates.delta_mort);
        let inf = beta * s * i / n;
        dy[0] = -inf;
        dy[1] = inf - se * e;
        dy[2] = se * e - (gr + dm) * i;
        dy[3] = gr * i;
        dy[4] = dm * i;
        if y.len() == NS {
            return;
        }
        let np = self.n_params();
        let nb = self.config.n_beta;
        for p in 0..np {
            let x = &y[NS + NS * p..NS + NS * (p + 1)];
            // state Jacobian times sensitivity column
            let d_inf = beta / n * (i * x[0] + s * x[2]);
            let mut col = [
                -d_inf,
                d_inf - se * x[1],
                se * x[1] - (gr + dm) * x[2],
                gr * x[2],
                dm * x[2],
            ];
            // explicit parameter dependence
            if p < nb {
                let phi: f64 = hats.iter().filter(|(k, _)| *k == p).map(|(_, w)| *w).sum();
                let db = phi * rates.beta_nodes[p] * s * i / n;
                col[0] -= db;
                col[1] += db;
            } else if p == nb {
                col[1] -= se * e;
                col[2] += se * e;
            } else if p == nb + 1 {
                col[2] -= gr * i;
                col[3] += gr * i;
            } else {
                col[2] -= dm * i;
                col[4] += dm * i;
            }
            dy[NS + NS * p..NS + NS * (p + 1)].copy_from_slice(&col);
        }
    }

    /// Integrate to every breakpoint; returns the augmented state at each
    /// observation time.
    fn integrate(&self, m: &DVector<f64>, sensitivities: bool) -> Result<Vec<Vec<f64>>> {
        let rates = self.rates(m)?;
        let dim = if sensitivities { NS * (1 + self.n_params()) } else { NS };
        let mut y = vec![0.0; dim];
        y[..NS].copy_from_slice(&self.config.initial);
        let mut k1 = vec![0.0; dim];
        let mut k2 = vec![0.0; dim];
        let mut k3 = vec![0.0; dim];
        let mut k4 = vec![0.0; dim];
        let mut tmp = vec![0.0; dim];
        let mut out = Vec::with_capacity(self.config.observation_times.len());
        let mut obs = self.config.observation_times.iter().peekable();
        let floor = -1e-9 * self.config.n_pop;
        let mut t0 = 0.0;
        let mut step_index = 0;
        for &t1 in &self.breakpoints {
            let steps = ((t1 - t0) / self.config.rk_step).ceil().max(1.0) as usize;
            let h = (t1 - t0) / steps as f64;
            for s in 0..steps {
                let t = t0 + s as f64 * h;
                self.rhs(t, &rates, &y, &mut k1);
                for j in 0..dim {
                    tmp[j] = y[j] + 0.5 * h * k1[j];
                }
                self.rhs(t + 0.5 * h, &rates, &tmp, &mut k2);
                for j in 0..dim {
                    tmp[j] = y[j] + 0.5 * h * k2[j];
                }
                self.rhs(t + 0.5 * h, &rates, &tmp, &mut k3);
                for j in 0..dim {
                    tmp[j] = y[j] + h * k3[j];
                }
                self.rhs(t + h, &rates, &tmp, &mut k4);
                for j in 0..dim {
                    y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
                step_index += 1;
                if y.iter().any(|v| !v.is_finite()) || y[..NS].iter().any(|v| *v < floor) {
                    return Err(OedError::OdeBlowup {
                        index: step_index,
                        time: t + h,
                    });
                }
            }
            t0 = t1;
            if obs.peek().is_some_and(|&&to| (to - t1).abs() <= 1e-12 * self.config.t_end) {
                obs.next();
                out.push(y.clone());
            }
        }
        Ok(out)
    }

    /// `(S, E, I, R, D)` at every observation time.
    pub fn trajectory(&self, m: &DVector<f64>) -> Result<Vec<[f64; 5]>> {
        Ok(self
            .integrate(m, false)?
            .into_iter()
            .map(|y| [y[0], y[1], y[2], y[3], y[4]])
            .collect())
    }

    /// Infected counts at the observation times.
    pub fn seird_forward(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        let states = self.integrate(m, false)?;
        Ok(DVector::from_iterator(states.len(), states.iter().map(|y| y[2])))
    }

    /// Infected counts and their sensitivity matrix (`n_times x n_params`).
    pub fn forward_with_jacobian(&self, m: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let states = self.integrate(m, true)?;
        let np = self.n_params();
        let d = DVector::from_iterator(states.len(), states.iter().map(|y| y[2]));
        let j = DMatrix::from_fn(states.len(), np, |r, p| states[r][NS + NS * p + 2]);
        Ok((d, j))
    }

    pub fn seird_jacobian_apply(&self, m: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("SEIRD direction", self.n_params(), v.len())?;
        Ok(self.forward_with_jacobian(m)?.1 * v)
    }

    /// M-adjoint of the Jacobian: `M^{-1} J^T d`.
    pub fn seird_jacobian_adjoint(&self, m: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("SEIRD data", self.config.observation_times.len(), d.len())?;
        let j = self.forward_with_jacobian(m)?.1;
        Ok(self.space.gram_inv(&j.tr_mul(d)))
    }
}

impl ForwardModel for SeirdModel {
    fn parameter_space(&self) -> &Space {
        &self.space
    }
    fn data_dim(&self) -> usize {
        self.config.observation_times.len()
    }
    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.seird_forward(m)
    }
    fn linearize(&self, m: &DVector<f64>) -> Result<Arc<dyn LinearOperator>> {
        let j = self.forward_with_jacobian(m)?.1;
        Ok(Arc::new(DenseOperator::new(j, self.space.clone(), Space::Data(self.data_dim()))?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapOptions {
    pub max_iter: usize,
    /// Stop when `||g||_M <= grad_rtol * ||g_0||_M`.
    pub grad_rtol: f64,
    pub cg_rtol: f64,
    pub cg_max_iter: usize,
    pub armijo_c: f64,
    pub max_backtracks: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            grad_rtol: 1e-8,
            cg_rtol: 1e-10,
            cg_max_iter: 500,
            armijo_c: 1e-4,
            max_backtracks: 30,
        }
    }
}

/// Nonlinear inverse problem with Gaussian prior and noise `sigma^2 I`.
pub struct NonlinearProblem {
    forward: Arc<dyn ForwardModel>,
    prior: Arc<EllipticGaussianPrior>,
    sigma: f64,
    options: MapOptions,
}

impl NonlinearProblem {
    pub fn new(forward: Arc<dyn ForwardModel>, prior: Arc<EllipticGaussianPrior>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(OedError::InvalidArgument("noise level sigma must be positive".into()));
        }
        check_dim("forward domain vs prior", prior.dim(), forward.parameter_space().dim())?;
        match forward.parameter_space().mass() {
            Some(m) if m.diag() == prior.mass().diag() => {}
            _ => {
                return Err(OedError::InvalidArgument(
                    "forward model and prior must share the parameter space".into(),
                ))
            }
        }
        Ok(Self {
            forward,
            prior,
            sigma,
            options: MapOptions::default(),
        })
    }

    pub fn with_options(mut self, options: MapOptions) -> Self {
        self.options = options;
        self
    }

    pub fn forward(&self) -> &Arc<dyn ForwardModel> {
        &self.forward
    }

    pub fn prior(&self) -> &Arc<EllipticGaussianPrior> {
        &self.prior
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn options(&self) -> &MapOptions {
        &self.options
    }

    pub fn data_dim(&self) -> usize {
        self.forward.data_dim()
    }

    fn mass(&self) -> &MassMatrix {
        self.prior.mass()
    }

    /// Weighted cost `1/2 sigma^-2 sum w_i (f_i(m) - y_i)^2 + 1/2 ||m - m_pr||^2_{C_pr^-1}`.
    pub fn cost(&self, m: &DVector<f64>, y: &DVector<f64>, w: &DesignVector) -> Result<f64> {
        self.cost_from(m, &self.forward.evaluate(m)?, y, w)
    }

    fn gradient(&self, m: &DVector<f64>, r: &DVector<f64>, w: &DesignVector, jac: &dyn LinearOperator) -> Result<DVector<f64>> {
        let weighted = r.component_mul(w.as_vector()) / (self.sigma * self.sigma);
        Ok(m_adjoint_apply(jac, &weighted)? + self.prior.apply_precision(&(m - self.prior.mean()))?)
    }

    /// Gauss-Newton Hessian at `m` for design `w`.
    pub fn laplace(&self, m: &DVector<f64>, w: &DesignVector) -> Result<LaplacePosterior<'_>> {
        check_dim("design length", self.data_dim(), w.len())?;
        Ok(LaplacePosterior {
            problem: self,
            m_map: m.clone(),
            jacobian: self.forward.linearize(m)?,
            w: w.clone(),
        })
    }

    /// MAP point by inexact Gauss-Newton with Armijo backtracking.
    pub fn map_solve(&self, y: &DVector<f64>, w: &DesignVector, m0: Option<&DVector<f64>>) -> Result<MapResult> {
        check_dim("data length", self.data_dim(), y.len())?;
        check_dim("design length", self.data_dim(), w.len())?;
        let opts = self.options;
        let mut m = m0.cloned().unwrap_or_else(|| self.prior.mean().clone());
        let mut fm = self.forward.evaluate(&m)?;
        let mut cost = self.cost_from(&m, &fm, y, w)?;
        let mut g0_norm = None;
        for it in 0..=opts.max_iter {
            let lap = self.laplace(&m, w)?;
            let g = self.gradient(&m, &(&fm - y), w, lap.jacobian.as_ref())?;
            let g_norm = self.mass().norm(&g);
            let g0 = *g0_norm.get_or_insert(g_norm);
            if g_norm <= opts.grad_rtol * g0 || g_norm == 0.0 {
                return Ok(MapResult { m, iterations: it, grad_norm: g_norm, initial_grad_norm: g0, converged: true, cost });
            }
            if it == opts.max_iter {
                return Ok(MapResult { m, iterations: it, grad_norm: g_norm, initial_grad_norm: g0, converged: false, cost });
            }
            // Forcing term: tighten the inner solve as the gradient shrinks.
            let forcing = (g_norm / g0).sqrt().clamp(opts.cg_rtol, 0.5);
            let step = lap.solve(&(-&g), CgOptions { rtol: forcing, max_iter: opts.cg_max_iter })?;
            let slope = self.mass().dot(&g, &step);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..opts.max_backtracks {
                let trial = &m + &step * alpha;
                // A failed forward solve counts as an infinite cost.
                if let Ok(ft) = self.forward.evaluate(&trial) {
                    if let Ok(ct) = self.cost_from(&trial, &ft, y, w) {
                        let slack = 1e-13 * cost.abs();
                        if ct.is_finite() && ct <= cost + opts.armijo_c * alpha * slope + slack {
                            accepted = Some((trial, ft, ct));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            let Some((trial, ft, ct)) = accepted else {
                return Err(OedError::LineSearch {
                    iterations: it,
                    grad_norm: g_norm,
                    last_iterate: m.as_slice().to_vec(),
                });
            };
            m = trial;
            fm = ft;
            cost = ct;
        }
        unreachable!("loop returns on its last iteration")
    }

    fn cost_from(&self, m: &DVector<f64>, fm: &DVector<f64>, y: &DVector<f64>, w: &DesignVector) -> Result<f64> {
        let r = fm - y;
        let misfit: f64 = r.iter().zip(w.as_vector().iter()).map(|(r, w)| w * r * r).sum();
        let dm = m - self.prior.mean();
        let reg = self.mass().dot(&self.prior.apply_precision(&dm)?, &dm);
        Ok(0.5 * misfit / (self.sigma * self.sigma) + 0.5 * reg)
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub m: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub converged: bool,
    pub cost: f64,
}

/// Gaussian approximation at a MAP point with the Gauss-Newton Hessian
/// `H = sigma^-2 J* W J + C_pr^-1`.
pub struct LaplacePosterior<'a> {
    problem: &'a NonlinearProblem,
    m_map: DVector<f64>,
    jacobian: Arc<dyn LinearOperator>,
    w: DesignVector,
}

impl LaplacePosterior<'_> {
    pub fn m_map(&self) -> &DVector<f64> {
        &self.m_map
    }

    pub fn jacobian(&self) -> &Arc<dyn LinearOperator> {
        &self.jacobian
    }

    pub fn apply_hessian(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.problem;
        let jv = self.jacobian.apply(v)?.component_mul(self.w.as_vector()) / (p.sigma * p.sigma);
        Ok(m_adjoint_apply(self.jacobian.as_ref(), &jv)? + p.prior.apply_precision(v)?)
    }

    /// Solve `H z = b` by prior-preconditioned CG in the M inner product.
    pub fn solve(&self, b: &DVector<f64>, opts: CgOptions) -> Result<DVector<f64>> {
        let mass = self.problem.mass();
        Ok(pcg(
            |x| self.apply_hessian(x),
            |r| self.problem.prior.apply_cov(r),
            |a, b| mass.dot(a, b),
            b,
            opts,
        )?
        .x)
    }

    /// `tr(H^{-1})` by dense assembly.
    pub fn trace_dense(&self) -> Result<f64> {
        let p = self.problem;
        let j = dense_assemble(self.jacobian.as_ref())?;
        let s2 = 1.0 / (p.sigma * p.sigma);
        let wj = DMatrix::from_fn(j.nrows(), j.ncols(), |i, k| self.w.as_vector()[i] * j[(i, k)] * s2);
        let k = j.tr_mul(&wj) + p.prior.precision_matrix_euclidean()?;
        let inv = inverse_spd(&((&k + k.transpose()) * 0.5))?;
        let m = p.mass().diag();
        Ok((0..m.len()).map(|i| inv[(i, i)] * m[i]).sum())
    }

    /// Hutchinson estimate of `tr(H^{-1})`.
    pub fn trace_mc(&self, n_probes: usize, seed: u64) -> Result<Estimate> {
        let opts = CgOptions { rtol: self.problem.options.cg_rtol, max_iter: self.problem.options.cg_max_iter };
        crate::criteria::trace_estimate_mc(
            |z| self.solve(z, opts),
            self.problem.mass(),
            n_probes,
            Default::default(),
            seed,
        )
    }
}

/// Prior draws and noisy synthetic data, fixed across designs.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub seed: u64,
    pub params: Vec<DVector<f64>>,
    pub data: Vec<DVector<f64>>,
    /// Draws whose forward solve failed; they are excluded.
    pub failed: usize,
    pub requested: usize,
}

impl TrainingSet {
    /// `n_d` samples `(m_i, f(m_i) + sigma eta_i)` from labeled substreams of `seed`.
    pub fn draw(problem: &NonlinearProblem, n_d: usize, seed: u64) -> Result<Self> {
        if n_d == 0 {
            return Err(OedError::InvalidArgument("training set needs n_d >= 1".into()));
        }
        let samples: Vec<Option<(DVector<f64>, DVector<f64>)>> = (0..n_d)
            .into_par_iter()
            .map(|i| {
                let m = problem.prior.sample(rng::substream_seed(seed, "training-prior", i as u64))?;
                let mut r = rng::substream(seed, "training-noise", i as u64);
                let eta = rng::standard_normal(&mut r, problem.data_dim());
                Ok(match problem.forward.evaluate(&m) {
                    Ok(f) => Some((m, f + eta * problem.sigma)),
                    Err(e) => {
                        log::warn!("training draw {i} skipped: {e}");
                        None
                    }
                })
            })
            .collect::<Result<_>>()?;
        let failed = samples.iter().filter(|s| s.is_none()).count();
        check_failures(failed, n_d)?;
        let (params, data) = samples.into_iter().flatten().unzip();
        Ok(Self { seed, params, data, failed, requested: n_d })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(OedError::TooManyFailures { failed, total });
    }
    Ok(())
}

/// Sample average with per-sample values and failure bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct SaaResult {
    pub mean: f64,
    pub std_error: f64,
    pub values: Vec<f64>,
    pub failed: usize,
    pub total: usize,
}

impl SaaResult {
    fn from_values(outcomes: Vec<Option<f64>>, prior_failures: usize, requested: usize) -> Result<Self> {
        let failed = prior_failures + outcomes.iter().filter(|v| v.is_none()).count();
        check_failures(failed, requested)?;
        let values: Vec<f64> = outcomes.into_iter().flatten().collect();
        if values.is_empty() {
            return Err(OedError::TooManyFailures { failed, total: requested });
        }
        let est = Estimate::from_samples(&values);
        Ok(Self {
            mean: est.value,
            std_error: est.std_error.unwrap_or(f64::NAN),
            values,
            failed,
            total: requested,
        })
    }
}

fn per_sample<F>(training: &TrainingSet, f: F) -> Result<SaaResult>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let outcomes: Vec<Option<f64>> = (0..training.len())
        .into_par_iter()
        .map(|i| match f(i) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("sample {i} skipped: {e}");
                None
            }
        })
        .collect();
    SaaResult::from_values(outcomes, training.failed, training.requested)
}

/// Sample-average Bayes risk `mean_i ||m_MAP(y_i, w) - m_i||_M^2`.
pub fn bayes_risk_saa(problem: &NonlinearProblem, w: &DesignVector, training: &TrainingSet) -> Result<SaaResult> {
    per_sample(training, |i| {
        let map = problem.map_solve(&training.data[i], w, None)?;
        Ok(problem.mass().norm(&(map.m - &training.params[i])).powi(2))
    })
}

/// How `tr(H^{-1})` is evaluated in [`psi_a_gaussian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaplaceTrace {
    #[default]
    Dense,
    MonteCarlo { n_probes: usize, seed: u64 },
}

/// Sample average of `tr(H^{-1})` at the MAP point of every training datum.
pub fn psi_a_gaussian(
    problem: &NonlinearProblem,
    w: &DesignVector,
    training: &TrainingSet,
    trace: LaplaceTrace,
) -> Result<SaaResult> {
    per_sample(training, |i| {
        let map = problem.map_solve(&training.data[i], w, None)?;
        let lap = problem.laplace(&map.m, w)?;
        match trace {
            LaplaceTrace::Dense => lap.trace_dense(),
            LaplaceTrace::MonteCarlo { n_probes, seed } => Ok(lap.trace_mc(n_probes, seed)?.value),
        }
    })
}

/// Sample average of `<H^{-1} c, c>_M`.
pub fn psi_c_gaussian(
    problem: &NonlinearProblem,
    w: &DesignVector,
    training: &TrainingSet,
    c: &DVector<f64>,
) -> Result<SaaResult> {
    check_dim("c vector", problem.prior.dim(), c.len())?;
    let opts = CgOptions { rtol: problem.options.cg_rtol, max_iter: problem.options.cg_max_iter };
    per_sample(training, |i| {
        if c.iter().all(|x| *x == 0.0) {
            return Ok(0.0);
        }
        let map = problem.map_solve(&training.data[i], w, None)?;
        let z = problem.laplace(&map.m, w)?.solve(c, opts)?;
        Ok(problem.mass().dot(&z, c))
    })
}

/// Which sample-averaged criterion a [`NonlinearCriterion`] evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearCriterionKind {
    BayesRisk,
    GaussianA(LaplaceTrace),
    GaussianC(DVector<f64>),
}

/// Sample-averaged criterion over a fixed training set, as a design objective
/// (finite-difference gradient).
pub struct NonlinearCriterion<'a> {
    pub problem: &'a NonlinearProblem,
    pub training: &'a TrainingSet,
    pub kind: NonlinearCriterionKind,
}

impl NonlinearCriterion<'_> {
    pub fn evaluate(&self, w: &DesignVector) -> Result<SaaResult> {
        match &self.kind {
            NonlinearCriterionKind::BayesRisk => bayes_risk_saa(self.problem, w, self.training),
            NonlinearCriterionKind::GaussianA(t) => psi_a_gaussian(self.problem, w, self.training, *t),
            NonlinearCriterionKind::GaussianC(c) => psi_c_gaussian(self.problem, w, self.training, c),
        }
    }
}

impl DesignObjective for NonlinearCriterion<'_> {
    fn n_candidates(&self) -> usize {
        self.problem.data_dim()
    }
    fn value(&self, w: &DesignVector) -> Result<f64> {
        Ok(self.evaluate(w)?.mean)
    }
}
