//! A-, c- and D-optimality criteria, their estimators and design gradients.
//!
//! With `H(w) = sigma^-2 C_pr^{1/2} F* W F C_pr^{1/2}` the criteria are
//!
//! ```text
//! Phi_A(w) = tr G(w)
//! Phi_c(w) = <G(w) c, c>_M
//! Phi_D(w) = -log det(I + H(w))
//! ```
//!
//! Estimator routes:
//! * `ExactDense`: dense assembly; the oracle at desk scale.
//! * `MonteCarlo`: Hutchinson trace with probes `z = M^{-1/2} v`.
//! * `SubspaceIteration`: randomized sketch of the prior-preconditioned
//!   misfit Hessian (or of its measurement-space counterpart for D).
//! * `MeasurementSpace`: Woodbury/Sylvester identities on the cached
//!   `n_s x n_s` matrices.
//! * `AdjointFree`: rank-`r` prior eigenbasis; forward applies only.
//!
//! Gradients (with `S = F C_pr F*`, `S2 = F C_pr^2 F*`, `R = (I + sigma^-2 W S)^-1`):
//!
//! ```text
//! dPhi_A/dw_i = -sigma^-2 (R^T S2 R)_ii
//! dPhi_D/dw_i = -sigma^-2 (S R)_ii
//! dPhi_c/dw_i = -sigma^-2 (F G(w) c)_i^2
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OedError, Result};
use crate::linalg::{inverse_spd, logdet_spd, sorted_symmetric_eigen};
use crate::posterior::{BayesianLinearProblem, DesignVector};
use crate::rng::{self, ProbeKind};
use crate::space::MassMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriterionKind {
    A,
    C,
    D,
}

/// Criterion choice; `c` is present exactly for c-optimality.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionSpec {
    kind: CriterionKind,
    c: Option<DVector<f64>>,
}

impl CriterionSpec {
    pub fn a_optimal() -> Self {
        Self { kind: CriterionKind::A, c: None }
    }

    pub fn d_optimal() -> Self {
        Self { kind: CriterionKind::D, c: None }
    }

    pub fn c_optimal(c: DVector<f64>) -> Self {
        Self { kind: CriterionKind::C, c: Some(c) }
    }

    pub fn new(kind: CriterionKind, c: Option<DVector<f64>>) -> Result<Self> {
        if (kind == CriterionKind::C) != c.is_some() {
            return Err(OedError::InvalidArgument(
                "c vector must be given exactly for the c criterion".into(),
            ));
        }
        Ok(Self { kind, c })
    }

    pub fn kind(&self) -> CriterionKind {
        self.kind
    }

    pub fn c_vector(&self) -> Option<&DVector<f64>> {
        self.c.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorRoute {
    ExactDense,
    MonteCarlo,
    SubspaceIteration,
    #[default]
    MeasurementSpace,
    AdjointFree,
}

/// Operator targeted by the randomized sketch for D-optimality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SketchTarget {
    /// Prior-preconditioned misfit Hessian on the parameter space.
    #[default]
    Parameter,
    /// `sigma^-2 W^{1/2} F C_pr F* W^{1/2}` on the measurement space.
    Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub route: EstimatorRoute,
    pub n_mc: usize,
    pub probe: ProbeKind,
    pub ell: usize,
    pub q: usize,
    pub sketch_target: SketchTarget,
    pub r: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            route: EstimatorRoute::MeasurementSpace,
            n_mc: 100,
            probe: ProbeKind::Rademacher,
            ell: 20,
            q: 1,
            sketch_target: SketchTarget::Parameter,
            r: 64,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn with_route(route: EstimatorRoute) -> Self {
        Self { route, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 || self.q == 0 || self.n_mc == 0 || self.r == 0 {
            return Err(OedError::InvalidArgument(
                "estimator requires ell, q, n_mc and r all >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar estimate with an optional Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: Option<f64>,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: None, samples: 0 }
    }

    /// Sample mean and standard error of `values`.
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { value: mean, std_error: Some(se), samples: n }
    }
}

/// Output of randomized subspace iteration.
#[derive(Debug, Clone)]
pub struct SketchResult {
    /// `Q^T A Q`, symmetric.
    pub t: DMatrix<f64>,
    /// Orthonormal range basis (columns may be fewer than requested).
    pub q: DMatrix<f64>,
}

impl SketchResult {
    pub fn trace(&self) -> f64 {
        self.t.trace()
    }

    /// Eigenvalues of `T`, descending.
    pub fn spectrum(&self) -> DVector<f64> {
        sorted_symmetric_eigen(&self.t).0
    }

    /// `log det(I + T)`.
    pub fn logdet_plus_identity(&self) -> f64 {
        self.spectrum().iter().map(|l| l.max(0.0).ln_1p()).sum()
    }
}

/// Randomized subspace iteration for a symmetric positive semidefinite
/// operator on `R^n`: `Q = orth(A^q Omega)`, `T = Q^T A Q`.
///
/// Numerically dependent sketch columns are dropped with a warning, so `T`
/// may be smaller than `ell x ell`; for `A = 0` a zero `ell x ell` matrix is
/// returned.
pub fn subspace_iteration<F>(apply: F, n: usize, ell: usize, q: usize, seed: u64) -> Result<SketchResult>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if ell == 0 || ell > n || q == 0 {
        return Err(OedError::InvalidArgument(format!(
            "subspace iteration needs 1 <= ell <= n and q >= 1 (ell={ell}, n={n}, q={q})"
        )));
    }
    let apply_block = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| apply(&x.column(j).into_owned()))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_columns(&cols))
    };
    let omega = DMatrix::from_columns(
        &(0..ell)
            .map(|j| rng::standard_normal(&mut rng::substream(seed, "sketch", j as u64), n))
            .collect::<Vec<_>>(),
    );
    let mut y = apply_block(&omega)?;
    for _ in 1..q {
        // Re-orthonormalizing between powers keeps the same range.
        let basis = orthonormal_range(&y);
        if basis.ncols() == 0 {
            break;
        }
        y = apply_block(&basis)?;
    }
    let basis = orthonormal_range(&y);
    if basis.ncols() == 0 {
        return Ok(SketchResult {
            t: DMatrix::zeros(ell, ell),
            q: DMatrix::zeros(n, 0),
        });
    }
    if basis.ncols() < ell {
        log::warn!(
            "sketch is rank deficient: keeping {} of {ell} columns",
            basis.ncols()
        );
    }
    let aq = apply_block(&basis)?;
    let t = basis.tr_mul(&aq);
    let t = (&t + t.transpose()) * 0.5;
    Ok(SketchResult { t, q: basis })
}

/// Thin-QR orthonormal basis of `range(y)` with negligible directions removed.
fn orthonormal_range(y: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = y.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return DMatrix::zeros(y.nrows(), 0);
    }
    let keep: Vec<usize> = (0..diag.len()).filter(|&j| diag[j] > 1e-12 * max).collect();
    let cols: Vec<DVector<f64>> = keep.iter().map(|&j| q.column(j).into_owned()).collect();
    if cols.is_empty() {
        DMatrix::zeros(y.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Hutchinson estimate of the trace of an operator on `(R^n, <.,.>_M)` using
/// probes `z = M^{-1/2} v` and `<A z, z>_M`.
pub fn trace_estimate_mc<F>(apply: F, mass: &MassMatrix, n_probes: usize, kind: ProbeKind, seed: u64) -> Result<Estimate>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if n_probes == 0 {
        return Err(OedError::InvalidArgument("need at least one probe".into()));
    }
    let values: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::substream(seed, "trace-probe", k as u64);
            let z = mass.apply_inv_sqrt(&rng::probe(&mut r, mass.dim(), kind));
            Ok(mass.dot(&apply(&z)?, &z))
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&values))
}

/// Dense posterior pieces in Euclidean coordinates.
#[derive(Debug, Clone)]
pub struct DenseGaussianPosterior {
    /// `K = sigma^-2 F^T W F + A M^{-1} A`; `G(w) = K^{-1} M`.
    pub precision: DMatrix<f64>,
    /// `K^{-1}`, the covariance of the coefficient vector.
    pub covariance: DMatrix<f64>,
}

pub fn dense_posterior(problem: &BayesianLinearProblem, w: &DesignVector) -> Result<DenseGaussianPosterior> {
    check_dim("design length", problem.n_sensors(), w.len())?;
    let cache = problem.dense_cache()?;
    let f = &cache.forward;
    let s2 = problem.sigma().powi(-2);
    let wf = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| w.as_vector()[i] * f[(i, j)] * s2);
    let k = f.tr_mul(&wf) + &cache.prior_precision;
    let k = (&k + k.transpose()) * 0.5;
    let covariance = inverse_spd(&k)?;
    Ok(DenseGaussianPosterior { precision: k, covariance })
}

/// Pointwise posterior variance of the coefficient vector (dense, expensive).
pub fn posterior_variance_dense(problem: &BayesianLinearProblem, w: &DesignVector) -> Result<DVector<f64>> {
    Ok(dense_posterior(problem, w)?.covariance.diagonal())
}

/// Euclidean prior-preconditioned misfit Hessian action
/// `sigma^-2 L^T F^T W F L x` with `L = A^{-1} M^{1/2}`.
pub fn preconditioned_hessian_apply(
    problem: &BayesianLinearProblem,
    w: &DesignVector,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let prior = problem.prior();
    let fl = problem.forward().apply(&prior.apply_sqrt_cov(x)?)?;
    let weighted = fl.component_mul(w.as_vector()) * problem.sigma().powi(-2);
    prior.apply_sqrt_cov_transpose(&problem.forward().apply_transpose(&weighted)?)
}

/// `sigma^-2 W^{1/2} S W^{1/2}` and `I` plus it, with `S` the cached `F C_pr F*`.
fn measurement_system(problem: &BayesianLinearProblem, w: &DesignVector) -> Result<DMatrix<f64>> {
    let cache = problem.measurement_cache()?;
    let root = w.as_vector().map(f64::sqrt);
    let s2 = problem.sigma().powi(-2);
    let ns = root.len();
    Ok(DMatrix::from_fn(ns, ns, |i, j| s2 * root[i] * cache.s[(i, j)] * root[j]))
}

fn identity_plus(m: &DMatrix<f64>) -> DMatrix<f64> {
    m + DMatrix::identity(m.nrows(), m.ncols())
}

fn require_design(problem: &BayesianLinearProblem, w: &DesignVector) -> Result<()> {
    check_dim("design length", problem.n_sensors(), w.len())
}

/// A-optimality value.
pub fn phi_a(problem: &BayesianLinearProblem, w: &DesignVector, cfg: &EstimatorConfig) -> Result<f64> {
    Ok(phi_a_estimate(problem, w, cfg)?.value)
}

/// A-optimality with estimator diagnostics.
pub fn phi_a_estimate(problem: &BayesianLinearProblem, w: &DesignVector, cfg: &EstimatorConfig) -> Result<Estimate> {
    require_design(problem, w)?;
    cfg.validate()?;
    let prior = problem.prior();
    match cfg.route {
        EstimatorRoute::ExactDense => {
            let post = dense_posterior(problem, w)?;
            let m = prior.mass().diag();
            Ok(Estimate::exact(
                (0..m.len()).map(|i| post.covariance[(i, i)] * m[i]).sum(),
            ))
        }
        EstimatorRoute::MonteCarlo => {
            let post = problem.posterior(w)?;
            trace_estimate_mc(|z| post.apply(z), prior.mass(), cfg.n_mc, cfg.probe, cfg.seed)
        }
        EstimatorRoute::MeasurementSpace => {
            let cache = problem.measurement_cache()?;
            let root = w.as_vector().map(f64::sqrt);
            let chol = identity_plus(&measurement_system(problem, w)?)
                .cholesky()
                .ok_or_else(|| OedError::InvalidArgument("measurement system not SPD".into()))?;
            let ds2d = DMatrix::from_fn(root.len(), root.len(), |i, j| {
                root[i] * cache.s2[(i, j)] * root[j]
            });
            let correction = chol.solve(&ds2d).trace() * problem.sigma().powi(-2);
            Ok(Estimate::exact(problem.prior_trace()? - correction))
        }
        EstimatorRoute::SubspaceIteration => {
            let n = problem.n_params();
            let sketch = subspace_iteration(
                |x| preconditioned_hessian_apply(problem, w, x),
                n,
                cfg.ell.min(n),
                cfg.q,
                cfg.seed,
            )?;
            let (lambda, u) = sorted_symmetric_eigen(&sketch.t);
            let mut reduction = 0.0;
            for k in 0..lambda.len().min(sketch.q.ncols()) {
                let l = lambda[k].max(0.0);
                if l == 0.0 {
                    continue;
                }
                let dir = &sketch.q * u.column(k);
                let m = prior.mass();
                let s_dir = m.apply_sqrt(&prior.apply_cov_half(&m.apply_inv_sqrt(&dir))?);
                reduction += l / (1.0 + l) * s_dir.norm_squared();
            }
            Ok(Estimate::exact(problem.prior_trace()? - reduction))
        }
        EstimatorRoute::AdjointFree => {
            let r = cfg.r.min(problem.n_params());
            let ft = problem.reduced_forward(r)?;
            let (lambda, _) = prior.eigen_dense()?;
            let inner = reduced_system(problem, w, &ft);
            let inv = inverse_spd(&identity_plus(&inner))?;
            let head: f64 = (0..r).map(|k| inv[(k, k)] * lambda[k]).sum();
            let tail: f64 = lambda.iter().skip(r).sum();
            Ok(Estimate::exact(head + tail))
        }
    }
}

/// `sigma^-2 Ft^T W Ft`, the `r x r` reduced misfit Hessian.
fn reduced_system(problem: &BayesianLinearProblem, w: &DesignVector, ft: &DMatrix<f64>) -> DMatrix<f64> {
    let s2 = problem.sigma().powi(-2);
    let wf = DMatrix::from_fn(ft.nrows(), ft.ncols(), |i, j| w.as_vector()[i] * ft[(i, j)] * s2);
    let h = ft.tr_mul(&wf);
    (&h + h.transpose()) * 0.5
}

/// c-optimality `<G(w) c, c>_M`.
pub fn phi_c(problem: &BayesianLinearProblem, w: &DesignVector, c: &DVector<f64>) -> Result<f64> {
    require_design(problem, w)?;
    check_dim("c vector", problem.n_params(), c.len())?;
    if c.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    let post = problem.posterior(w)?;
    Ok(problem.prior().mass().dot(&post.apply(c)?, c))
}

/// D-optimality `-log det(I + H(w))`.
pub fn phi_d(problem: &BayesianLinearProblem, w: &DesignVector, cfg: &EstimatorConfig) -> Result<f64> {
    require_design(problem, w)?;
    cfg.validate()?;
    match cfg.route {
        EstimatorRoute::ExactDense => {
            let prior = problem.prior();
            let f = &problem.dense_cache()?.forward;
            let m = prior.mass();
            // B = F A^{-1} M^{1/2}, row by row (A is symmetric).
            let rows: Vec<DVector<f64>> = (0..f.nrows())
                .map(|i| m.apply_sqrt(&prior.solve_operator(&f.row(i).transpose())))
                .collect();
            let s2 = problem.sigma().powi(-2);
            let n = problem.n_params();
            let mut h = DMatrix::zeros(n, n);
            for (i, b) in rows.iter().enumerate() {
                let wi = w.as_vector()[i] * s2;
                if wi != 0.0 {
                    h.ger(wi, b, b, 1.0);
                }
            }
            Ok(-logdet_spd(&identity_plus(&h))?)
        }
        EstimatorRoute::MeasurementSpace => {
            Ok(-logdet_spd(&identity_plus(&measurement_system(problem, w)?))?)
        }
        EstimatorRoute::SubspaceIteration => {
            let sketch = match cfg.sketch_target {
                SketchTarget::Parameter => {
                    let n = problem.n_params();
                    subspace_iteration(
                        |x| preconditioned_hessian_apply(problem, w, x),
                        n,
                        cfg.ell.min(n),
                        cfg.q,
                        cfg.seed,
                    )?
                }
                SketchTarget::Measurement => {
                    let sys = measurement_system(problem, w)?;
                    let ns = sys.nrows();
                    subspace_iteration(|x| Ok(&sys * x), ns, cfg.ell.min(ns), cfg.q, cfg.seed)?
                }
            };
            Ok(-sketch.logdet_plus_identity())
        }
        EstimatorRoute::AdjointFree => phi_d_adjoint_free(problem, w, cfg.r),
        EstimatorRoute::MonteCarlo => Err(OedError::UnsupportedRoute {
            route: "monte_carlo",
            what: "D-optimality",
        }),
    }
}

/// D-optimality from the rank-`r` prior eigenbasis, using forward applies only.
pub fn phi_d_adjoint_free(problem: &BayesianLinearProblem, w: &DesignVector, r: usize) -> Result<f64> {
    require_design(problem, w)?;
    let ft = problem.reduced_forward(r)?;
    Ok(-logdet_spd(&identity_plus(&reduced_system(problem, w, &ft)))?)
}

/// Criterion value for `spec`; the route applies to A and D.
pub fn evaluate(
    problem: &BayesianLinearProblem,
    w: &DesignVector,
    spec: &CriterionSpec,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    match spec.kind {
        CriterionKind::A => phi_a(problem, w, cfg),
        CriterionKind::D => phi_d(problem, w, cfg),
        CriterionKind::C => phi_c(problem, w, spec.c.as_ref().expect("validated")),
    }
}

/// `R = (I + sigma^-2 W S)^{-1}` for a symmetric `S`.
fn resolvent(problem: &BayesianLinearProblem, w: &DesignVector, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s2 = problem.sigma().powi(-2);
    let ns = s.nrows();
    let sys = DMatrix::from_fn(ns, ns, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta + s2 * w.as_vector()[i] * s[(i, j)]
    });
    sys.try_inverse()
        .ok_or_else(|| OedError::InvalidArgument("measurement system is singular".into()))
}

/// Gradient of the criterion with respect to the design weights.
///
/// A: Monte Carlo route uses the same probes as [`phi_a_estimate`]; the
/// adjoint-free route differentiates its own rank-`r` approximation; all
/// other routes use the exact measurement-space formula. D: adjoint-free
/// differentiates its approximation, everything else is exact. c: exact.
pub fn grad_phi(
    problem: &BayesianLinearProblem,
    w: &DesignVector,
    spec: &CriterionSpec,
    cfg: &EstimatorConfig,
) -> Result<DVector<f64>> {
    require_design(problem, w)?;
    cfg.validate()?;
    let s2 = problem.sigma().powi(-2);
    match spec.kind {
        CriterionKind::C => {
            let c = spec.c.as_ref().expect("validated");
            check_dim("c vector", problem.n_params(), c.len())?;
            let post = problem.posterior(w)?;
            let fgc = problem.forward().apply(&post.apply(c)?)?;
            Ok(fgc.map(|x| -s2 * x * x))
        }
        CriterionKind::A if cfg.route == EstimatorRoute::MonteCarlo => {
            let post = problem.posterior(w)?;
            let mass = problem.prior().mass();
            let squares: Vec<DVector<f64>> = (0..cfg.n_mc)
                .into_par_iter()
                .map(|k| {
                    let mut r = rng::substream(cfg.seed, "trace-probe", k as u64);
                    let z = mass.apply_inv_sqrt(&rng::probe(&mut r, mass.dim(), cfg.probe));
                    Ok(problem.forward().apply(&post.apply(&z)?)?.map(|x| x * x))
                })
                .collect::<Result<_>>()?;
            let mut acc = DVector::zeros(problem.n_sensors());
            for sq in &squares {
                acc += sq;
            }
            Ok(acc * (-s2 / cfg.n_mc as f64))
        }
        CriterionKind::A if cfg.route == EstimatorRoute::AdjointFree => {
            // Reduced basis: F G F* ~ Ft (I + Hr)^{-1} Lambda (I + Hr)^{-1} Ft^T.
            let r = cfg.r.min(problem.n_params());
            let ft = problem.reduced_forward(r)?;
            let (lambda, _) = problem.prior().eigen_dense()?;
            let inv = inverse_spd(&identity_plus(&reduced_system(problem, w, &ft)))?;
            let scaled = DMatrix::from_fn(r, r, |i, j| inv[(i, j)] * lambda[j]);
            let core = &scaled * &inv;
            let x = &*ft * core;
            Ok(DVector::from_fn(problem.n_sensors(), |i, _| {
                -s2 * x.row(i).dot(&ft.row(i))
            }))
        }
        CriterionKind::A => {
            let cache = problem.measurement_cache()?;
            let r = resolvent(problem, w, &cache.s)?;
            let inner = r.transpose() * &cache.s2 * &r;
            Ok(inner.diagonal() * -s2)
        }
        CriterionKind::D => {
            let s = if cfg.route == EstimatorRoute::AdjointFree {
                let ft = problem.reduced_forward(cfg.r.min(problem.n_params()))?;
                let s = &*ft * ft.transpose();
                (&s + s.transpose()) * 0.5
            } else {
                problem.measurement_cache()?.s.clone()
            };
            let r = resolvent(problem, w, &s)?;
            Ok((s * r).diagonal() * -s2)
        }
    }
}

/// Closed-form `KL(N(mean1, cov1) || N(mean2, cov2))`.
pub fn kl_gaussian_dense(
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mean2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let k = mean1.len();
    check_dim("kl mean2", k, mean2.len())?;
    check_dim("kl cov1", k, cov1.nrows())?;
    check_dim("kl cov2", k, cov2.nrows())?;
    let chol2 = cov2
        .clone()
        .cholesky()
        .ok_or_else(|| OedError::InvalidArgument("cov2 is not positive definite".into()))?;
    let trace_term = chol2.solve(cov1).trace();
    let diff = mean2 - mean1;
    let quad = diff.dot(&chol2.solve(&diff));
    let logdet2 = 2.0 * chol2.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let logdet1 = logdet_spd(cov1)?;
    Ok(0.5 * (trace_term + quad - k as f64 + logdet2 - logdet1))
}

/// Monte Carlo estimate of the expected KL divergence from prior to
/// posterior over prior-predictive data (dense, small problems).
///
/// Sensor `i` observes with noise variance `sigma^2 / w_i`; unweighted
/// sensors carry no information and are left noise-free.
pub fn sampled_information_gain(
    problem: &BayesianLinearProblem,
    w: &DesignVector,
    n_draws: usize,
    seed: u64,
) -> Result<Estimate> {
    require_design(problem, w)?;
    if n_draws == 0 {
        return Err(OedError::InvalidArgument("need at least one draw".into()));
    }
    let prior = problem.prior();
    let dense = dense_posterior(problem, w)?;
    let ainv = inverse_spd(&prior.operator().to_dense())?;
    let m = prior.mass().to_dense();
    let prior_cov = &ainv * m * &ainv;
    let prior_cov = (&prior_cov + prior_cov.transpose()) * 0.5;
    let post = problem.posterior(w)?;
    let values: Vec<f64> = (0..n_draws)
        .into_par_iter()
        .map(|k| {
            let truth = prior.sample(rng::substream_seed(seed, "eig-prior", k as u64))?;
            let mut r = rng::substream(seed, "eig-noise", k as u64);
            let noise = rng::standard_normal(&mut r, problem.n_sensors());
            let y = problem.forward().apply(&truth)?
                + DVector::from_fn(problem.n_sensors(), |i, _| {
                    let wi = w.as_vector()[i];
                    if wi > 0.0 {
                        noise[i] * problem.sigma() / wi.sqrt()
                    } else {
                        0.0
                    }
                });
            let mean = post.map_point(&y)?;
            kl_gaussian_dense(&mean, &dense.covariance, prior.mean(), &prior_cov)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ToyDenseModel;
    use crate::prior::EllipticGaussianPrior;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn toy(vars: &[f64]) -> BayesianLinearProblem {
        let n = vars.len();
        let prior = EllipticGaussianPrior::diagonal(vars).unwrap();
        let model = ToyDenseModel::new(DMatrix::identity(n, n), MassMatrix::identity(n)).unwrap();
        BayesianLinearProblem::new(Arc::new(model.operator()), Arc::new(prior), 1.0).unwrap()
    }

    fn w(x: &[f64]) -> DesignVector {
        DesignVector::from_slice(x).unwrap()
    }

    #[test]
    fn toy_phi_a_values() {
        let p = toy(&[1.0, 1.0]);
        for route in [EstimatorRoute::ExactDense, EstimatorRoute::MeasurementSpace] {
            let cfg = EstimatorConfig::with_route(route);
            assert_relative_eq!(phi_a(&p, &w(&[1.0, 1.0]), &cfg).unwrap(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(phi_a(&p, &w(&[0.0, 0.0]), &cfg).unwrap(), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn toy_phi_c_and_d() {
        let p = toy(&[1.0, 1.0]);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        assert_relative_eq!(phi_c(&p, &w(&[1.0, 1.0]), &c).unwrap(), 1.0, epsilon = 1e-9);
        assert_eq!(phi_c(&p, &w(&[1.0, 1.0]), &DVector::zeros(2)).unwrap(), 0.0);
        for route in [EstimatorRoute::ExactDense, EstimatorRoute::MeasurementSpace] {
            let cfg = EstimatorConfig::with_route(route);
            assert_relative_eq!(phi_d(&p, &w(&[1.0, 0.0]), &cfg).unwrap(), -(2.0f64.ln()), epsilon = 1e-12);
            assert_eq!(phi_d(&p, &w(&[0.0, 0.0]), &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn toy_c_gradient_closed_form() {
        let p = toy(&[1.0, 1.0]);
        let spec = CriterionSpec::c_optimal(DVector::from_vec(vec![1.0, 0.0]));
        let g = grad_phi(&p, &w(&[0.0, 0.0]), &spec, &EstimatorConfig::default()).unwrap();
        assert_relative_eq!(g[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hutchinson_identity_is_exact() {
        let mass = MassMatrix::uniform(7, 0.3).unwrap();
        let est = trace_estimate_mc(|z| Ok(z.clone()), &mass, 50, ProbeKind::Rademacher, 3).unwrap();
        assert_relative_eq!(est.value, 7.0, epsilon = 1e-12);
        assert!(est.std_error.unwrap() < 1e-12);
    }

    #[test]
    fn sketch_rank_one_and_zero() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let a = &v * v.transpose();
        let s = subspace_iteration(|x| Ok(&a * x), 4, 2, 1, 9).unwrap();
        assert_relative_eq!(s.trace(), a.trace(), max_relative = 1e-12);
        let z = subspace_iteration(|x| Ok(x * 0.0), 4, 3, 1, 9).unwrap();
        assert_eq!(z.t.shape(), (3, 3));
        assert_eq!(z.t.amax(), 0.0);
    }

    #[test]
    fn sketch_trace_on_decaying_spectrum() {
        let n = 30;
        let diag: Vec<f64> = (0..n)
            .map(|i| match i {
                0 => 10.0,
                1 => 5.0,
                2 => 1.0,
                _ => 0.1 * 0.3f64.powi(i as i32 - 3),
            })
            .collect();
        let a = DMatrix::from_diagonal(&DVector::from_vec(diag));
        for seed in 0..10 {
            let s = subspace_iteration(|x| Ok(&a * x), n, 4, 1, seed).unwrap();
            assert!((s.trace() - a.trace()).abs() / a.trace() < 0.02);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let i = DMatrix::<f64>::identity(3, 3);
        let m = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        assert_relative_eq!(kl_gaussian_dense(&m, &i, &m, &i).unwrap(), 0.0, epsilon = 1e-14);
        let z = DVector::zeros(3);
        assert_relative_eq!(kl_gaussian_dense(&m, &i, &z, &i).unwrap(), 3.0, epsilon = 1e-12);
        assert!(kl_gaussian_dense(&m, &(i.clone() * -1.0), &z, &i).is_err());
    }

    #[test]
    fn spec_requires_c_for_c_only() {
        assert!(CriterionSpec::new(CriterionKind::C, None).is_err());
        assert!(CriterionSpec::new(CriterionKind::A, Some(DVector::zeros(2))).is_err());
        assert!(CriterionSpec::new(CriterionKind::D, None).is_ok());
    }

    #[test]
    fn monte_carlo_route_rejected_for_d() {
        let p = toy(&[1.0, 2.0]);
        let cfg = EstimatorConfig::with_route(EstimatorRoute::MonteCarlo);
        assert!(matches!(
            phi_d(&p, &w(&[0.5, 0.5]), &cfg),
            Err(OedError::UnsupportedRoute { .. })
        ));
    }
}
