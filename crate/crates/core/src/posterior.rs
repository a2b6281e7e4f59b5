//! Weight-dependent linear-Gaussian posterior.
//!
//! For a design `w` the posterior covariance is
//! `G(w) = (sigma^-2 F* W F + C_pr^-1)^-1`. It is applied either matrix-free
//! by prior-preconditioned conjugate gradients in the M inner product, or
//! through the Woodbury identity, which moves the solve into the
//! `n_s`-dimensional measurement space:
//!
//! ```text
//! G(w) = C_pr - sigma^-2 C_pr F* (I + sigma^-2 W F C_pr F*)^-1 W F C_pr
//! ```
//!
//! The measurement-space matrices `F C_pr F*` and `F C_pr^2 F*` do not
//! depend on `w` and are cached on the problem.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OedError, Result};
use crate::linalg::{pcg, symmetrize_guarded, CgOptions, CgOutcome};
use crate::prior::EllipticGaussianPrior;
use crate::space::{dense_assemble_by_rows, m_adjoint_apply, LinearOperator, Space};

/// Asymmetry tolerated in cached measurement-space matrices before symmetrization.
pub const SYMMETRY_GUARD: f64 = 1e-8;

/// Relaxed sensor weights in `[0, 1]^{n_s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector(DVector<f64>);

impl DesignVector {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if let Some(i) = w.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(OedError::InvalidArgument(format!(
                "design weight {i} = {} outside [0, 1]",
                w[i]
            )));
        }
        Ok(Self(w))
    }

    pub fn from_slice(w: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(w))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn ones(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0))
    }

    /// Binary design with the listed sensors switched on.
    pub fn from_active(n: usize, active: &[usize]) -> Result<Self> {
        let mut w = DVector::zeros(n);
        for &i in active {
            if i >= n {
                return Err(OedError::InvalidArgument(format!("sensor index {i} out of range")));
            }
            w[i] = 1.0;
        }
        Ok(Self(w))
    }

    /// Copy with entry `j` replaced, clamped to `[0, 1]`.
    pub fn with_entry(&self, j: usize, value: f64) -> Self {
        let mut w = self.0.clone();
        w[j] = value.clamp(0.0, 1.0);
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    /// Indices with weight above `tol`.
    pub fn active(&self, tol: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i] > tol).collect()
    }
}

/// How posterior covariance actions are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSolve {
    /// Prior-preconditioned conjugate gradients.
    #[default]
    Pcg,
    /// Woodbury identity with the cached measurement-space matrix.
    Woodbury,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub rtol: f64,
    pub max_iter: usize,
    pub solve: CovarianceSolve,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            max_iter: 500,
            solve: CovarianceSolve::Pcg,
        }
    }
}

impl SolverOptions {
    pub fn cg(&self) -> CgOptions {
        CgOptions {
            rtol: self.rtol,
            max_iter: self.max_iter,
        }
    }
}

/// `w`-independent measurement-space quantities.
#[derive(Debug, Clone)]
pub struct MeasurementCache {
    /// Columns `C_pr F* e_i`, an `n x n_s` matrix.
    pub prior_adjoint: DMatrix<f64>,
    /// `F C_pr F*` (symmetrized).
    pub s: DMatrix<f64>,
    /// `F C_pr^2 F*` (symmetrized).
    pub s2: DMatrix<f64>,
    /// Relative asymmetry of `F C_pr F*` before symmetrization.
    pub asymmetry: f64,
}

/// Dense oracle data; desk-scale problems only.
#[derive(Debug, Clone)]
pub struct DenseCache {
    /// Assembled forward matrix, `n_s x n`.
    pub forward: DMatrix<f64>,
    /// `M C_pr^{-1}`, symmetric.
    pub prior_precision: DMatrix<f64>,
}

/// Linear Bayesian inverse problem with noise covariance `sigma^2 I`.
pub struct BayesianLinearProblem {
    forward: Arc<dyn LinearOperator>,
    prior: Arc<EllipticGaussianPrior>,
    sigma: f64,
    solver: SolverOptions,
    measurement: OnceLock<MeasurementCache>,
    dense: OnceLock<DenseCache>,
    prior_trace: OnceLock<f64>,
    reduced_forward: Mutex<BTreeMap<usize, Arc<DMatrix<f64>>>>,
}

impl std::fmt::Debug for BayesianLinearProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BayesianLinearProblem")
            .field("forward", &self.forward.name())
            .field("n", &self.n_params())
            .field("n_s", &self.n_sensors())
            .field("sigma", &self.sigma)
            .finish()
    }
}

impl BayesianLinearProblem {
    pub fn new(
        forward: Arc<dyn LinearOperator>,
        prior: Arc<EllipticGaussianPrior>,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(OedError::InvalidArgument("noise level sigma must be positive".into()));
        }
        check_dim("forward domain vs prior", prior.dim(), forward.domain().dim())?;
        match forward.domain().mass() {
            Some(m) if m.diag() == prior.mass().diag() => {}
            _ => {
                return Err(OedError::InvalidArgument(
                    "forward map and prior must share the parameter space".into(),
                ))
            }
        }
        if !matches!(forward.codomain(), Space::Data(_)) {
            return Err(OedError::InvalidArgument("forward map must land in a data space".into()));
        }
        Ok(Self {
            forward,
            prior,
            sigma,
            solver: SolverOptions::default(),
            measurement: OnceLock::new(),
            dense: OnceLock::new(),
            prior_trace: OnceLock::new(),
            reduced_forward: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn with_solver(mut self, solver: SolverOptions) -> Self {
        self.solver = solver;
        self
    }

    pub fn forward(&self) -> &Arc<dyn LinearOperator> {
        &self.forward
    }

    pub fn prior(&self) -> &Arc<EllipticGaussianPrior> {
        &self.prior
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn solver(&self) -> &SolverOptions {
        &self.solver
    }

    pub fn n_params(&self) -> usize {
        self.prior.dim()
    }

    pub fn n_sensors(&self) -> usize {
        self.forward.codomain().dim()
    }

    pub fn parameter_space(&self) -> &Space {
        self.prior.space()
    }

    pub fn adjoint_forward(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        m_adjoint_apply(self.forward.as_ref(), d)
    }

    pub fn posterior(&self, w: &DesignVector) -> Result<LinearGaussianPosterior<'_>> {
        check_dim("design length", self.n_sensors(), w.len())?;
        Ok(LinearGaussianPosterior {
            problem: self,
            w: w.clone(),
            woodbury: OnceLock::new(),
        })
    }

    /// Measurement-space cache, built with `n_s` adjoint and `n_s` forward applies.
    pub fn measurement_cache(&self) -> Result<&MeasurementCache> {
        if let Some(c) = self.measurement.get() {
            return Ok(c);
        }
        let built = self.build_measurement_cache()?;
        let _ = self.measurement.set(built);
        Ok(self.measurement.get().expect("initialized"))
    }

    fn build_measurement_cache(&self) -> Result<MeasurementCache> {
        let ns = self.n_sensors();
        let n = self.n_params();
        let columns: Vec<(DVector<f64>, DVector<f64>)> = (0..ns)
            .into_par_iter()
            .map(|i| {
                let mut e = DVector::zeros(ns);
                e[i] = 1.0;
                let g = self.prior.apply_cov(&self.adjoint_forward(&e)?)?;
                let fg = self.forward.apply(&g)?;
                Ok((g, fg))
            })
            .collect::<Result<_>>()?;
        let mut g = DMatrix::zeros(n, ns);
        let mut s = DMatrix::zeros(ns, ns);
        for (i, (gi, si)) in columns.iter().enumerate() {
            g.set_column(i, gi);
            s.set_column(i, si);
        }
        let asymmetry = symmetrize_guarded(&mut s, SYMMETRY_GUARD)?;
        let mg = DMatrix::from_fn(n, ns, |r, c| g[(r, c)] * self.prior.mass().diag()[r]);
        let s2 = g.tr_mul(&mg);
        let s2 = (&s2 + s2.transpose()) * 0.5;
        Ok(MeasurementCache {
            prior_adjoint: g,
            s,
            s2,
            asymmetry,
        })
    }

    /// Dense oracle matrices.
    pub fn dense_cache(&self) -> Result<&DenseCache> {
        if let Some(c) = self.dense.get() {
            return Ok(c);
        }
        let forward = dense_assemble_by_rows(self.forward.as_ref())?;
        let prior_precision = self.prior.precision_matrix_euclidean()?;
        let _ = self.dense.set(DenseCache {
            forward,
            prior_precision,
        });
        Ok(self.dense.get().expect("initialized"))
    }

    /// `tr(C_pr)`, computed densely once.
    pub fn prior_trace(&self) -> Result<f64> {
        if let Some(t) = self.prior_trace.get() {
            return Ok(*t);
        }
        let t = self.prior.trace_cov_dense()?;
        let _ = self.prior_trace.set(t);
        Ok(t)
    }

    /// `F V_r Lambda_r^{1/2}` from the leading `r` prior eigenpairs; built with
    /// `r` forward applies and no adjoint applies.
    pub fn reduced_forward(&self, r: usize) -> Result<Arc<DMatrix<f64>>> {
        if r == 0 || r > self.n_params() {
            return Err(OedError::InvalidArgument(format!(
                "prior rank {r} must lie in 1..={}",
                self.n_params()
            )));
        }
        if let Some(m) = self.reduced_forward.lock().expect("cache lock").get(&r) {
            return Ok(m.clone());
        }
        let (lambda, v) = self.prior.eigen_dense()?;
        let floor = lambda[0] * 1e-14;
        if lambda[r - 1] <= floor {
            log::warn!(
                "prior rank {r} exceeds the numerically detectable rank (lambda_r = {:e})",
                lambda[r - 1]
            );
        }
        let cols: Vec<DVector<f64>> = (0..r)
            .into_par_iter()
            .map(|k| {
                let scaled = v.column(k) * lambda[k].max(0.0).sqrt();
                self.forward.apply(&scaled)
            })
            .collect::<Result<_>>()?;
        let mut ft = DMatrix::zeros(self.n_sensors(), r);
        for (k, c) in cols.iter().enumerate() {
            ft.set_column(k, c);
        }
        let ft = Arc::new(ft);
        self.reduced_forward
            .lock()
            .expect("cache lock")
            .insert(r, ft.clone());
        Ok(ft)
    }
}

/// Posterior of a [`BayesianLinearProblem`] for a fixed design.
pub struct LinearGaussianPosterior<'a> {
    problem: &'a BayesianLinearProblem,
    w: DesignVector,
    woodbury: OnceLock<Cholesky<f64, Dyn>>,
}

impl<'a> LinearGaussianPosterior<'a> {
    pub fn problem(&self) -> &'a BayesianLinearProblem {
        self.problem
    }

    pub fn design(&self) -> &DesignVector {
        &self.w
    }

    fn weights(&self) -> &DVector<f64> {
        self.w.as_vector()
    }

    /// Hessian action `sigma^-2 F* W F v + C_pr^-1 v`.
    pub fn apply_hessian(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.problem;
        let s2 = p.sigma.powi(-2);
        let fv = p.forward.apply(v)?.component_mul(self.weights()) * s2;
        Ok(p.adjoint_forward(&fv)? + p.prior.apply_precision(v)?)
    }

    fn inner(&self) -> impl Fn(&DVector<f64>, &DVector<f64>) -> f64 + '_ {
        move |a, b| self.problem.prior.mass().dot(a, b)
    }

    /// Posterior covariance action by prior-preconditioned CG, with solver statistics.
    pub fn solve_hessian(&self, v: &DVector<f64>, opts: CgOptions) -> Result<CgOutcome> {
        check_dim("posterior covariance", self.problem.n_params(), v.len())?;
        pcg(
            |x| self.apply_hessian(x),
            |r| self.problem.prior.apply_cov(r),
            self.inner(),
            v,
            opts,
        )
    }

    pub fn apply_post_cov(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.solve_hessian(v, self.problem.solver.cg())?.x)
    }

    fn woodbury_factor(&self) -> Result<&Cholesky<f64, Dyn>> {
        if let Some(c) = self.woodbury.get() {
            return Ok(c);
        }
        let cache = self.problem.measurement_cache()?;
        let root = self.weights().map(f64::sqrt);
        let s2 = self.problem.sigma.powi(-2);
        let ns = root.len();
        let inner = DMatrix::from_fn(ns, ns, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            delta + s2 * root[i] * cache.s[(i, j)] * root[j]
        });
        let chol = inner.cholesky().ok_or_else(|| {
            OedError::InvalidArgument("measurement-space system is not positive definite".into())
        })?;
        let _ = self.woodbury.set(chol);
        Ok(self.woodbury.get().expect("initialized"))
    }

    /// Posterior covariance action through the Woodbury identity.
    pub fn apply_post_cov_smw(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("posterior covariance (Woodbury)", self.problem.n_params(), v.len())?;
        let p = self.problem;
        let cache = p.measurement_cache()?;
        let prior_v = p.prior.apply_cov(v)?;
        if self.weights().iter().all(|w| *w == 0.0) {
            return Ok(prior_v);
        }
        // F C_pr v = G^T M v
        let fcv = cache.prior_adjoint.tr_mul(&p.prior.mass().apply(v));
        let root = self.weights().map(f64::sqrt);
        let z = self.woodbury_factor()?.solve(&fcv.component_mul(&root));
        let correction = &cache.prior_adjoint * z.component_mul(&root);
        Ok(prior_v - correction * p.sigma.powi(-2))
    }

    /// Posterior covariance action with the problem's configured solver.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self.problem.solver.solve {
            CovarianceSolve::Pcg => self.apply_post_cov(v),
            CovarianceSolve::Woodbury => self.apply_post_cov_smw(v),
        }
    }

    /// MAP point `G(w) (sigma^-2 F* W y + C_pr^-1 m_pr)`.
    pub fn map_point(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.problem;
        check_dim("map_point data", p.n_sensors(), y.len())?;
        let rhs = p.adjoint_forward(&(y.component_mul(self.weights()) * p.sigma.powi(-2)))?
            + p.prior.apply_precision(p.prior.mean())?;
        self.apply(&rhs)
    }

    /// Gradient (M-Riesz representer) of the quadratic MAP cost at `m`.
    pub fn cost_gradient(&self, m: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.problem;
        let r = (p.forward.apply(m)? - y).component_mul(self.weights()) * p.sigma.powi(-2);
        Ok(p.adjoint_forward(&r)? + p.prior.apply_precision(&(m - p.prior.mean()))?)
    }

    pub fn covariance_operator(&self) -> PosteriorCovarianceOperator<'_, 'a> {
        PosteriorCovarianceOperator { post: self }
    }
}

/// `G(w)` as an operator handle on the parameter space.
pub struct PosteriorCovarianceOperator<'p, 'a> {
    post: &'p LinearGaussianPosterior<'a>,
}

impl LinearOperator for PosteriorCovarianceOperator<'_, '_> {
    fn name(&self) -> &str {
        "posterior covariance"
    }
    fn domain(&self) -> &Space {
        self.post.problem.parameter_space()
    }
    fn codomain(&self) -> &Space {
        self.post.problem.parameter_space()
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.post.apply(x)
    }
    // Self-adjoint in M: G^T = M G M^{-1}.
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.post.problem.prior.mass();
        Ok(m.apply(&self.post.apply(&m.apply_inv(y))?))
    }
}
