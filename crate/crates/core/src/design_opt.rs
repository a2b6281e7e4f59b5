//! Sensor selection: penalized relaxed optimization over `w in [0, 1]^{n_s}`,
//! thresholding, greedy placement and exhaustive search.
//!
//! The relaxed problem is `min Phi(w) + gamma sum_i d_i w_i` on the box,
//! solved by projected gradient with Armijo backtracking. Plain L1 uses
//! `d = 1`; reweighted L1 updates `d_i = 1 / (|w_i| + eps_j)` after each
//! outer solve with `eps_j = eps * decay^j`.

use itertools::Itertools;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{evaluate, grad_phi, CriterionSpec, EstimatorConfig};
use crate::error::{check_dim, OedError, Result};
use crate::posterior::{BayesianLinearProblem, DesignVector};

/// Largest number of subsets exhaustive search will visit.
pub const EXHAUSTIVE_GUARD: u128 = 1_000_000;

/// Step for the finite-difference gradient fallback.
pub const FD_STEP: f64 = 1e-5;

/// A criterion as a function of the design weights.
pub trait DesignObjective: Sync {
    fn n_candidates(&self) -> usize;

    fn value(&self, w: &DesignVector) -> Result<f64>;

    /// Gradient; defaults to central differences (one-sided at the box faces).
    fn gradient(&self, w: &DesignVector) -> Result<DVector<f64>> {
        fd_gradient(self, w, FD_STEP)
    }
}

/// Central finite-difference gradient, one-sided where `w_i +- h` leaves `[0, 1]`.
pub fn fd_gradient<O: DesignObjective + ?Sized>(obj: &O, w: &DesignVector, h: f64) -> Result<DVector<f64>> {
    let n = w.len();
    let parts: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = w.as_vector()[i];
            let up = (wi + h).min(1.0);
            let down = (wi - h).max(0.0);
            let fu = obj.value(&w.with_entry(i, up))?;
            let fd = obj.value(&w.with_entry(i, down))?;
            Ok((fu - fd) / (up - down))
        })
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(parts))
}

/// Linear-Gaussian criterion with analytic gradients.
pub struct LinearCriterion<'a> {
    pub problem: &'a BayesianLinearProblem,
    pub spec: CriterionSpec,
    pub estimator: EstimatorConfig,
}

impl<'a> LinearCriterion<'a> {
    pub fn new(problem: &'a BayesianLinearProblem, spec: CriterionSpec, estimator: EstimatorConfig) -> Self {
        Self { problem, spec, estimator }
    }
}

impl DesignObjective for LinearCriterion<'_> {
    fn n_candidates(&self) -> usize {
        self.problem.n_sensors()
    }
    fn value(&self, w: &DesignVector) -> Result<f64> {
        evaluate(self.problem, w, &self.spec, &self.estimator)
    }
    fn gradient(&self, w: &DesignVector) -> Result<DVector<f64>> {
        grad_phi(self.problem, w, &self.spec, &self.estimator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    L1,
    #[default]
    ReweightedL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub gamma: f64,
    pub kind: PenaltyKind,
    pub epsilon: f64,
    /// Factor applied to `epsilon` after every outer iteration.
    pub epsilon_decay: f64,
    pub max_outer: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            kind: PenaltyKind::ReweightedL1,
            epsilon: 1e-3,
            epsilon_decay: 0.5,
            max_outer: 10,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(OedError::InvalidArgument("penalty gamma must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) || !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(OedError::InvalidArgument(
                "reweighting needs epsilon > 0 and decay in (0, 1]".into(),
            ));
        }
        if self.max_outer == 0 {
            return Err(OedError::InvalidArgument("max_outer must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    pub max_iter: usize,
    /// Stop when the infinity norm of the projected-gradient map is below this.
    pub tol: f64,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    /// Entries above this count as active in an unbudgeted report.
    pub active_tol: f64,
    /// Entries above this count as selected when matching a budget.
    pub significance: f64,
    pub max_bisections: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            armijo_c: 1e-4,
            max_backtracks: 50,
            active_tol: 1e-2,
            significance: 0.5,
            max_bisections: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizerReport {
    pub w_relaxed: Vec<f64>,
    pub w_binary: Option<Vec<f64>>,
    /// Penalized objective after every accepted step, across outer iterations.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub gamma: f64,
    pub active_set: Vec<usize>,
    pub phi_relaxed: f64,
    pub phi_binary: Option<f64>,
    /// Number of relaxed weights in `(0.01, 0.99)`.
    pub fractional_count: usize,
    /// Error message when a criterion evaluation aborted the run.
    pub aborted: Option<String>,
}

/// Keep the `k` largest entries at 1 and zero the rest; ties go to the lowest index.
pub fn threshold(w: &DesignVector, k: usize) -> Result<DesignVector> {
    if k > w.len() {
        return Err(OedError::InvalidArgument(format!(
            "budget {k} exceeds {} candidates",
            w.len()
        )));
    }
    let v = w.as_vector();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    DesignVector::from_active(w.len(), &order[..k])
}

fn fractional_count(w: &DesignVector) -> usize {
    w.as_vector().iter().filter(|x| **x > 0.01 && **x < 0.99).count()
}

fn project(w: &DVector<f64>) -> DesignVector {
    DesignVector::new(w.map(|x| x.clamp(0.0, 1.0))).expect("clamped")
}

struct InnerOutcome {
    w: DesignVector,
    iterations: usize,
    converged: bool,
}

/// Projected gradient with Armijo backtracking on `Phi(w) + gamma d^T w`.
fn projected_gradient<O: DesignObjective + ?Sized>(
    obj: &O,
    d: &DVector<f64>,
    gamma: f64,
    w0: DesignVector,
    opts: &OptimizerOptions,
    trace: &mut Vec<f64>,
) -> Result<InnerOutcome> {
    let penalized = |w: &DesignVector, phi: f64| phi + gamma * d.dot(w.as_vector());
    let mut w = w0;
    let mut f = penalized(&w, obj.value(&w)?);
    trace.push(f);
    let mut g = obj.gradient(&w)? + d * gamma;
    let mut alpha = 1.0 / g.amax().max(1e-300);
    for it in 0..opts.max_iter {
        let gm = (w.as_vector() - project(&(w.as_vector() - &g)).as_vector()).amax();
        if gm <= opts.tol {
            return Ok(InnerOutcome { w, iterations: it, converged: true });
        }
        let mut accepted = None;
        let mut step = alpha;
        for _ in 0..opts.max_backtracks {
            let trial = project(&(w.as_vector() - &g * step));
            let dw = trial.as_vector() - w.as_vector();
            if dw.amax() == 0.0 {
                break;
            }
            let ft = penalized(&trial, obj.value(&trial)?);
            if ft <= f + opts.armijo_c * g.dot(&dw) {
                accepted = Some((trial, ft, dw));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ft, dw)) = accepted else {
            log::debug!("line search stalled at iteration {it}");
            return Ok(InnerOutcome { w, iterations: it, converged: false });
        };
        let g_new = obj.gradient(&trial)? + d * gamma;
        // Barzilai-Borwein step for the next iteration.
        let dg = &g_new - &g;
        let sy = dw.dot(&dg);
        alpha = if sy > 0.0 { dw.norm_squared() / sy } else { step * 2.0 };
        w = trial;
        f = ft;
        g = g_new;
        trace.push(f);
    }
    Ok(InnerOutcome { w, iterations: opts.max_iter, converged: false })
}

struct RelaxedRun {
    w: DesignVector,
    iterations: usize,
    outer: usize,
    converged: bool,
}

fn relaxed_solve<O: DesignObjective + ?Sized>(
    obj: &O,
    penalty: &PenaltyConfig,
    gamma: f64,
    w0: &DesignVector,
    opts: &OptimizerOptions,
    trace: &mut Vec<f64>,
) -> Result<RelaxedRun> {
    let n = obj.n_candidates();
    let mut d = DVector::from_element(n, 1.0);
    let mut w = w0.clone();
    let mut iterations = 0;
    let mut converged = true;
    let outer_max = match penalty.kind {
        PenaltyKind::L1 => 1,
        PenaltyKind::ReweightedL1 => penalty.max_outer,
    };
    let mut eps = penalty.epsilon;
    let mut outer = 0;
    for j in 0..outer_max {
        if penalty.kind == PenaltyKind::ReweightedL1 {
            d = w.as_vector().map(|x| 1.0 / (x.abs() + eps));
            eps *= penalty.epsilon_decay;
        }
        let inner = projected_gradient(obj, &d, gamma, w.clone(), opts, trace)?;
        iterations += inner.iterations;
        converged = inner.converged;
        let change = (inner.w.as_vector() - w.as_vector()).amax();
        w = inner.w;
        outer = j + 1;
        if j > 0 && change <= opts.tol && fractional_count(&w) == 0 {
            break;
        }
    }
    Ok(RelaxedRun { w, iterations, outer, converged })
}

/// Penalized relaxed optimization, optionally matched to a budget `k`.
///
/// With a budget the penalty weight is bisected on a log scale until the
/// relaxed solution has `k` entries above `significance` (or the closest count
/// found), then thresholded to exactly `k` sensors. Criterion failures end
/// the run with `aborted` set and the best iterate so far.
pub fn optimize_weights<O: DesignObjective + ?Sized>(
    obj: &O,
    penalty: &PenaltyConfig,
    w0: &DesignVector,
    budget: Option<usize>,
    opts: &OptimizerOptions,
) -> Result<OptimizerReport> {
    penalty.validate()?;
    check_dim("initial design", obj.n_candidates(), w0.len())?;
    if let Some(k) = budget {
        if k > obj.n_candidates() {
            return Err(OedError::InvalidArgument(format!("budget {k} exceeds candidates")));
        }
    }
    let mut trace = Vec::new();
    let outcome = match budget {
        None => relaxed_solve(obj, penalty, penalty.gamma, w0, opts, &mut trace).map(|r| (r, penalty.gamma)),
        Some(k) => budget_search(obj, penalty, w0, k, opts, &mut trace),
    };
    let (run, gamma) = match outcome {
        Ok(x) => x,
        Err(e) => {
            return Ok(OptimizerReport {
                w_relaxed: w0.as_vector().as_slice().to_vec(),
                w_binary: None,
                objective_trace: trace,
                iterations: 0,
                outer_iterations: 0,
                converged: false,
                gamma: penalty.gamma,
                active_set: Vec::new(),
                phi_relaxed: f64::NAN,
                phi_binary: None,
                fractional_count: fractional_count(w0),
                aborted: Some(e.to_string()),
            })
        }
    };
    let phi_relaxed = obj.value(&run.w)?;
    let (w_binary, phi_binary, active_set) = match budget {
        Some(k) => {
            let b = threshold(&run.w, k)?;
            let phi = obj.value(&b)?;
            let active = b.active(0.5);
            (Some(b.into_vector().as_slice().to_vec()), Some(phi), active)
        }
        None => (None, None, run.w.active(opts.active_tol)),
    };
    Ok(OptimizerReport {
        fractional_count: fractional_count(&run.w),
        w_relaxed: run.w.into_vector().as_slice().to_vec(),
        w_binary,
        objective_trace: trace,
        iterations: run.iterations,
        outer_iterations: run.outer,
        converged: run.converged,
        gamma,
        active_set,
        phi_relaxed,
        phi_binary,
        aborted: None,
    })
}

fn budget_search<O: DesignObjective + ?Sized>(
    obj: &O,
    penalty: &PenaltyConfig,
    w0: &DesignVector,
    k: usize,
    opts: &OptimizerOptions,
    trace: &mut Vec<f64>,
) -> Result<(RelaxedRun, f64)> {
    let count = |w: &DesignVector| w.active(opts.significance).len();
    let mut scratch = Vec::new();
    let g0 = obj.gradient(&DesignVector::zeros(obj.n_candidates()))?;
    let mut hi = g0.amax().max(1e-12) * 2.0;
    let mut best: Option<(RelaxedRun, f64)> = None;
    let better = |c: usize, best: &Option<(RelaxedRun, f64)>| match best {
        None => true,
        Some((b, _)) => {
            let cb = count(&b.w);
            let (dc, db) = (c.abs_diff(k), cb.abs_diff(k));
            dc < db || (dc == db && c >= k && cb < k)
        }
    };
    // Grow gamma until the relaxed solution has at most k active entries.
    for _ in 0..opts.max_bisections {
        let run = relaxed_solve(obj, penalty, hi, w0, opts, &mut scratch)?;
        let c = count(&run.w);
        if better(c, &best) {
            best = Some((run, hi));
        }
        if c <= k {
            break;
        }
        hi *= 4.0;
    }
    let mut lo = hi * 1e-6;
    for _ in 0..opts.max_bisections {
        if best.as_ref().is_some_and(|(b, _)| count(&b.w) == k) {
            break;
        }
        let mid = (lo * hi).sqrt();
        let run = relaxed_solve(obj, penalty, mid, w0, opts, &mut scratch)?;
        let c = count(&run.w);
        if better(c, &best) {
            best = Some((run, mid));
        }
        if c > k {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-6 {
            break;
        }
    }
    let (_, gamma) = best.expect("at least one run");
    // Rerun the chosen gamma so the trace describes a single optimization.
    let run = relaxed_solve(obj, penalty, gamma, w0, opts, trace)?;
    Ok((run, gamma))
}

/// Result of greedy placement.
#[derive(Debug, Clone, Serialize)]
pub struct GreedyResult {
    pub design: Vec<f64>,
    /// Sensors in the order they were chosen.
    pub selected: Vec<usize>,
    /// Criterion after each step.
    pub values: Vec<f64>,
    /// Criterion with no sensors.
    pub initial: f64,
}

impl GreedyResult {
    pub fn design_vector(&self) -> DesignVector {
        DesignVector::from_slice(&self.design).expect("binary design")
    }
}

/// Greedy selection: `k` passes, each adding the sensor with the smallest
/// `Phi(w + e_j)`; ties go to the lowest index.
pub fn greedy_placement<O: DesignObjective + ?Sized>(obj: &O, k: usize) -> Result<GreedyResult> {
    let n = obj.n_candidates();
    if k > n {
        return Err(OedError::InvalidArgument(format!("budget {k} exceeds {n} candidates")));
    }
    let mut w = DesignVector::zeros(n);
    let initial = obj.value(&w)?;
    let mut selected = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for _ in 0..k {
        let remaining: Vec<usize> = (0..n).filter(|j| !selected.contains(j)).collect();
        let scores: Vec<f64> = remaining
            .par_iter()
            .map(|&j| obj.value(&w.with_entry(j, 1.0)))
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s < scores[best] {
                best = i;
            }
        }
        let j = remaining[best];
        w = w.with_entry(j, 1.0);
        selected.push(j);
        values.push(scores[best]);
    }
    Ok(GreedyResult {
        design: w.into_vector().as_slice().to_vec(),
        selected,
        values,
        initial,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExhaustiveResult {
    pub design: Vec<f64>,
    pub selected: Vec<usize>,
    pub value: f64,
    pub evaluated: usize,
}

/// Minimizer of `Phi` over all `k`-subsets; ties go to the lexicographically smallest subset.
pub fn exhaustive_search<O: DesignObjective + ?Sized>(obj: &O, k: usize) -> Result<ExhaustiveResult> {
    let n = obj.n_candidates();
    if k > n {
        return Err(OedError::InvalidArgument(format!("budget {k} exceeds {n} candidates")));
    }
    let count = binomial(n, k);
    if count > EXHAUSTIVE_GUARD {
        return Err(OedError::GuardExceeded {
            what: "exhaustive subsets",
            size: count,
            limit: EXHAUSTIVE_GUARD,
        });
    }
    let subsets: Vec<Vec<usize>> = (0..n).combinations(k).collect();
    let values: Vec<f64> = subsets
        .par_iter()
        .map(|s| obj.value(&DesignVector::from_active(n, s)?))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let selected = subsets[best].clone();
    Ok(ExhaustiveResult {
        design: DesignVector::from_active(n, &selected)?.into_vector().as_slice().to_vec(),
        selected,
        value: values[best],
        evaluated: subsets.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SupermodularityReport {
    pub checks: usize,
    pub violations: usize,
    pub max_violation: f64,
}

/// Enumerate `f(A + i) - f(A) <= f(B + i) - f(B)` for all `A <= B`, `i` not in `B`,
/// with `f(S) = Phi(1_S)`; small candidate sets only.
pub fn supermodularity_check<O: DesignObjective + ?Sized>(obj: &O, tol: f64) -> Result<SupermodularityReport> {
    let n = obj.n_candidates();
    if n > 12 {
        return Err(OedError::GuardExceeded {
            what: "supermodularity enumeration",
            size: n as u128,
            limit: 12,
        });
    }
    let masks: Vec<usize> = (0..1usize << n).collect();
    let f: Vec<f64> = masks
        .par_iter()
        .map(|&m| {
            let active: Vec<usize> = (0..n).filter(|i| m >> i & 1 == 1).collect();
            obj.value(&DesignVector::from_active(n, &active)?)
        })
        .collect::<Result<_>>()?;
    let mut checks = 0;
    let mut violations = 0;
    let mut max_violation = 0.0f64;
    for b in 0..1usize << n {
        // Enumerate subsets a of b.
        let mut a = b;
        loop {
            for i in 0..n {
                if b >> i & 1 == 0 {
                    let gain_a = f[a | 1 << i] - f[a];
                    let gain_b = f[b | 1 << i] - f[b];
                    let excess = gain_a - gain_b;
                    checks += 1;
                    if excess > tol {
                        violations += 1;
                    }
                    max_violation = max_violation.max(excess);
                }
            }
            if a == 0 {
                break;
            }
            a = (a - 1) & b;
        }
    }
    Ok(SupermodularityReport { checks, violations, max_violation })
}
