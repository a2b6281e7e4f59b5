//! Gaussian prior whose covariance is the squared inverse of a discretized
//! elliptic operator.
//!
//! With `A = delta M + gamma K` (lumped mass `M`, stiffness `K` with no-flux
//! boundaries) the elliptic operator acting on `(R^n, <.,.>_M)` is
//! `M^{-1} A`, and the prior covariance operator is its inverse squared:
//!
//! ```text
//! C_pr = (M^{-1} A)^{-2} = A^{-1} M A^{-1} M
//! ```
//!
//! which is self-adjoint in the M inner product. As a Euclidean covariance
//! matrix of sample vectors this is `C_pr M^{-1} = A^{-1} M A^{-1} = L L^T`
//! with the factor `L = A^{-1} M^{1/2}`. The M-self-adjoint square root is
//! `C_pr^{1/2} = A^{-1} M`.
//!
//! No-flux boundaries inflate the pointwise variance near the boundary; the
//! effect is left uncorrected.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OedError, Result};
use crate::linalg::{inverse_spd, sorted_symmetric_eigen, BandedLu, BandedMatrix};
use crate::rng;
use crate::space::{LinearOperator, MassMatrix, Space, DENSE_GUARD};

/// Hyperparameters of the elliptic prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Stiffness weight; larger means longer correlation length.
    pub gamma: f64,
    /// Mass weight; sets the pointwise variance together with `gamma`.
    pub delta: f64,
    /// Constant prior mean.
    pub mean: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            delta: 1.0,
            mean: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EllipticGaussianPrior {
    operator: BandedMatrix,
    lu: BandedLu,
    space: Space,
    mean: DVector<f64>,
    gamma: Option<f64>,
    delta: Option<f64>,
}

impl EllipticGaussianPrior {
    /// Prior from an explicit symmetric positive definite operator `A`.
    pub fn from_operator(operator: BandedMatrix, mass: MassMatrix, mean: DVector<f64>) -> Result<Self> {
        check_dim("prior operator", mass.dim(), operator.dim())?;
        check_dim("prior mean", mass.dim(), mean.len())?;
        let scale = (0..operator.dim()).map(|i| operator.get(i, i).abs()).fold(0.0, f64::max);
        if operator.asymmetry() > 1e-12 * scale {
            return Err(OedError::InvalidArgument("prior operator must be symmetric".into()));
        }
        let lu = operator.factorize()?;
        // Positive pivots of an unpivoted LU of a symmetric matrix certify
        // positive definiteness.
        if (0..operator.dim()).any(|i| lu.pivot(i) <= 0.0) {
            return Err(OedError::InvalidArgument("prior operator is not positive definite".into()));
        }
        Ok(Self {
            operator,
            lu,
            space: Space::parameter(mass),
            mean,
            gamma: None,
            delta: None,
        })
    }

    /// Prior on a uniform cell-centered 2D grid.
    pub fn grid_2d(nx: usize, ny: usize, lengths: [f64; 2], config: &PriorConfig) -> Result<Self> {
        check_hyper(config)?;
        let dx = lengths[0] / nx as f64;
        let dy = lengths[1] / ny as f64;
        let n = nx * ny;
        let idx = |i: usize, j: usize| i + nx * j;
        let mut a = BandedMatrix::zeros(n, nx, nx);
        let mut couple = |p: usize, q: usize, c: f64| {
            let c = config.gamma * c;
            a.add(p, p, c);
            a.add(q, q, c);
            a.add(p, q, -c);
            a.add(q, p, -c);
        };
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx {
                    couple(idx(i, j), idx(i + 1, j), dy / dx);
                }
                if j + 1 < ny {
                    couple(idx(i, j), idx(i, j + 1), dx / dy);
                }
            }
        }
        for p in 0..n {
            a.add(p, p, config.delta * dx * dy);
        }
        let mass = MassMatrix::uniform(n, dx * dy)?;
        let mut prior = Self::from_operator(a, mass, DVector::from_element(n, config.mean))?;
        prior.gamma = Some(config.gamma);
        prior.delta = Some(config.delta);
        Ok(prior)
    }

    /// Prior on `n_nodes` equispaced nodes of `[0, length]` (lumped linear elements).
    pub fn grid_1d(n_nodes: usize, length: f64, config: &PriorConfig) -> Result<Self> {
        check_hyper(config)?;
        if n_nodes < 2 || !(length > 0.0) {
            return Err(OedError::InvalidArgument("1D prior needs >= 2 nodes and positive length".into()));
        }
        let h = length / (n_nodes - 1) as f64;
        let mut mass = DVector::from_element(n_nodes, h);
        mass[0] = 0.5 * h;
        mass[n_nodes - 1] = 0.5 * h;
        let mut a = BandedMatrix::zeros(n_nodes, 1, 1);
        for e in 0..n_nodes - 1 {
            let c = config.gamma / h;
            a.add(e, e, c);
            a.add(e + 1, e + 1, c);
            a.add(e, e + 1, -c);
            a.add(e + 1, e, -c);
        }
        for i in 0..n_nodes {
            a.add(i, i, config.delta * mass[i]);
        }
        let mut prior =
            Self::from_operator(a, MassMatrix::new(mass)?, DVector::from_element(n_nodes, config.mean))?;
        prior.gamma = Some(config.gamma);
        prior.delta = Some(config.delta);
        Ok(prior)
    }

    /// Append independent scalar components with the given means and
    /// standard deviations (unit mass each).
    pub fn with_scalars(&self, means: &[f64], stds: &[f64]) -> Result<Self> {
        if means.len() != stds.len() {
            return Err(OedError::InvalidArgument("scalar means and stds differ in length".into()));
        }
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(OedError::InvalidArgument("scalar standard deviations must be positive".into()));
        }
        let n0 = self.dim();
        let n = n0 + means.len();
        let (lo, up) = self.operator.bandwidths();
        let mut a = BandedMatrix::zeros(n, lo, up);
        for i in 0..n0 {
            for j in i.saturating_sub(lo)..=(i + up).min(n0 - 1) {
                let v = self.operator.get(i, j);
                if v != 0.0 {
                    a.add(i, j, v);
                }
            }
        }
        // C = a^{-1} * 1 * a^{-1} * 1 = s^2
        for (k, s) in stds.iter().enumerate() {
            a.add(n0 + k, n0 + k, 1.0 / s);
        }
        let mass = self.mass().stack(&MassMatrix::identity(means.len()));
        let mut mean = self.mean.as_slice().to_vec();
        mean.extend_from_slice(means);
        let mut prior = Self::from_operator(a, mass, DVector::from_vec(mean))?;
        prior.gamma = self.gamma;
        prior.delta = self.delta;
        Ok(prior)
    }

    /// Independent components with the given variances, unit mass, zero mean.
    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        if variances.is_empty() || variances.iter().any(|v| !(*v > 0.0)) {
            return Err(OedError::InvalidArgument("variances must be positive".into()));
        }
        let n = variances.len();
        let mut a = BandedMatrix::zeros(n, 0, 0);
        for (i, v) in variances.iter().enumerate() {
            a.add(i, i, 1.0 / v.sqrt());
        }
        Self::from_operator(a, MassMatrix::identity(n), DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        check_dim("prior mean", self.dim(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn mass(&self) -> &Arc<MassMatrix> {
        self.space.mass().expect("prior lives on a parameter space")
    }

    pub fn hyperparameters(&self) -> (Option<f64>, Option<f64>) {
        (self.gamma, self.delta)
    }

    pub fn operator(&self) -> &BandedMatrix {
        &self.operator
    }

    /// `A^{-1} v`.
    pub fn solve_operator(&self, v: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(v)
    }

    /// `C_pr v = A^{-1} M A^{-1} M v`.
    pub fn apply_cov(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_cov", self.dim(), v.len())?;
        let m = self.mass();
        Ok(self.lu.solve(&m.apply(&self.lu.solve(&m.apply(v)))))
    }

    /// `C_pr^{-1} v = M^{-1} A M^{-1} A v`; no solves.
    pub fn apply_precision(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_precision", self.dim(), v.len())?;
        let m = self.mass();
        Ok(m.apply_inv(&self.operator.matvec(&m.apply_inv(&self.operator.matvec(v)))))
    }

    /// Euclidean factor `L x = A^{-1} M^{1/2} x` with `L L^T = A^{-1} M A^{-1}`.
    pub fn apply_sqrt_cov(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_sqrt_cov", self.dim(), x.len())?;
        Ok(self.lu.solve(&self.mass().apply_sqrt(x)))
    }

    /// `L^T y = M^{1/2} A^{-1} y`.
    pub fn apply_sqrt_cov_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_sqrt_cov_transpose", self.dim(), y.len())?;
        Ok(self.mass().apply_sqrt(&self.lu.solve_transpose(y)))
    }

    /// M-self-adjoint square root `C_pr^{1/2} v = A^{-1} M v`.
    pub fn apply_cov_half(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_cov_half", self.dim(), v.len())?;
        Ok(self.lu.solve(&self.mass().apply(v)))
    }

    /// `m_pr + L x` with `x` standard normal drawn from the seed's stream.
    pub fn sample(&self, seed: u64) -> Result<DVector<f64>> {
        let mut r = rng::substream(seed, "prior-sample", 0);
        let x = rng::standard_normal(&mut r, self.dim());
        Ok(&self.mean + self.apply_sqrt_cov(&x)?)
    }

    pub fn covariance_operator(self: &Arc<Self>) -> PriorCovarianceOperator {
        PriorCovarianceOperator { prior: self.clone() }
    }

    fn guard(&self) -> Result<()> {
        if self.dim() > DENSE_GUARD {
            return Err(OedError::GuardExceeded {
                what: "prior dimension",
                size: self.dim() as u128,
                limit: DENSE_GUARD as u128,
            });
        }
        Ok(())
    }

    /// Dense `M^{1/2} A^{-1} M^{1/2}`, the symmetric form of `C_pr^{1/2}`.
    pub fn symmetric_half_dense(&self) -> Result<DMatrix<f64>> {
        self.guard()?;
        let ainv = inverse_spd(&self.operator.to_dense())?;
        let s = self.mass().diag().map(f64::sqrt);
        let b = DMatrix::from_fn(self.dim(), self.dim(), |i, j| s[i] * ainv[(i, j)] * s[j]);
        Ok((&b + b.transpose()) * 0.5)
    }

    /// Euclidean posterior-style precision block `M C_pr^{-1} = A M^{-1} A`, dense.
    pub fn precision_matrix_euclidean(&self) -> Result<DMatrix<f64>> {
        self.guard()?;
        let a = self.operator.to_dense();
        let minv = self.mass().diag().map(|d| 1.0 / d);
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, j| minv[i] * a[(i, j)]);
        let p = &a * scaled;
        Ok((&p + p.transpose()) * 0.5)
    }

    /// `tr(C_pr)`, computed densely as `||M^{1/2} A^{-1} M^{1/2}||_F^2`.
    pub fn trace_cov_dense(&self) -> Result<f64> {
        Ok(self.symmetric_half_dense()?.norm_squared())
    }

    /// Leading eigenpairs of `C_pr`: eigenvalues descending and M-orthonormal
    /// eigenvectors as columns.
    pub fn eigen_dense(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let b = self.symmetric_half_dense()?;
        let (mu, u) = sorted_symmetric_eigen(&b);
        let lambda = mu.map(|x| x * x);
        let s = self.mass().diag().map(f64::sqrt);
        let v = DMatrix::from_fn(u.nrows(), u.ncols(), |i, k| u[(i, k)] / s[i]);
        Ok((lambda, v))
    }
}

fn check_hyper(config: &PriorConfig) -> Result<()> {
    if !(config.gamma >= 0.0) || !(config.delta > 0.0) {
        return Err(OedError::InvalidArgument(
            "prior requires gamma >= 0 and delta > 0".into(),
        ));
    }
    if !config.mean.is_finite() {
        return Err(OedError::InvalidArgument("prior mean must be finite".into()));
    }
    Ok(())
}

/// Handle for `C_pr` as an endomorphism of the parameter space.
pub struct PriorCovarianceOperator {
    prior: Arc<EllipticGaussianPrior>,
}

impl LinearOperator for PriorCovarianceOperator {
    fn name(&self) -> &str {
        "prior covariance"
    }
    fn domain(&self) -> &Space {
        self.prior.space()
    }
    fn codomain(&self) -> &Space {
        self.prior.space()
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.prior.apply_cov(x)
    }
    // (A^{-1} M A^{-1} M)^T = M A^{-1} M A^{-1}
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("prior covariance transpose", self.prior.dim(), y.len())?;
        let m = self.prior.mass();
        let t = self.prior.lu.solve_transpose(y);
        Ok(m.apply(&self.prior.lu.solve_transpose(&m.apply(&t))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{dense_assemble, verify_adjoint};
    use approx::assert_relative_eq;

    fn grid_prior(nx: usize) -> Arc<EllipticGaussianPrior> {
        Arc::new(EllipticGaussianPrior::grid_2d(nx, nx, [1.0, 1.0], &PriorConfig::default()).unwrap())
    }

    fn random(n: usize, k: u64) -> DVector<f64> {
        let mut r = rng::substream(17, "prior-test", k);
        rng::standard_normal(&mut r, n)
    }

    #[test]
    fn mass_only_operator_gives_identity_covariance() {
        let prior = EllipticGaussianPrior::from_operator(
            BandedMatrix::identity(4),
            MassMatrix::identity(4),
            DVector::zeros(4),
        )
        .unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_relative_eq!(prior.apply_cov(&v).unwrap(), v.clone(), epsilon = 1e-15);
        assert_relative_eq!(prior.apply_precision(&v).unwrap(), v, epsilon = 1e-15);
        // gamma = 0, delta = 1 on a grid: A = M, so C = M^{-1}... = I as well.
        let g = EllipticGaussianPrior::grid_2d(
            4,
            4,
            [1.0, 1.0],
            &PriorConfig { gamma: 0.0, delta: 1.0, mean: 0.0 },
        )
        .unwrap();
        let w = random(16, 0);
        assert_relative_eq!(g.apply_cov(&w).unwrap(), w, epsilon = 1e-12);
    }

    #[test]
    fn precision_inverts_covariance() {
        let prior = grid_prior(8);
        for k in 0..5 {
            let v = random(64, k);
            let back = prior.apply_precision(&prior.apply_cov(&v).unwrap()).unwrap();
            assert_relative_eq!(back, v, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn covariance_matches_dense_oracle() {
        let prior = grid_prior(8);
        let a = prior.operator().to_dense();
        let m = prior.mass().to_dense();
        let ainv = a.clone().try_inverse().unwrap();
        let cov = &ainv * &m * &ainv * &m;
        let prec = &a * m.clone().try_inverse().unwrap() * &a;
        let minv = m.clone().try_inverse().unwrap();
        for k in 0..3 {
            let v = random(64, 10 + k);
            let c = prior.apply_cov(&v).unwrap();
            assert!((&c - &cov * &v).amax() <= 1e-10 * c.amax().max(1.0));
            let p = prior.apply_precision(&v).unwrap();
            assert!((&p - &minv * &prec * &v).amax() <= 1e-10 * p.amax());
        }
    }

    #[test]
    fn square_root_factors() {
        let prior = grid_prior(8);
        assert_eq!(prior.apply_sqrt_cov(&DVector::zeros(64)).unwrap(), DVector::zeros(64));
        let mut l = DMatrix::zeros(64, 64);
        let mut c_half = DMatrix::zeros(64, 64);
        for j in 0..64 {
            let mut e = DVector::zeros(64);
            e[j] = 1.0;
            l.set_column(j, &prior.apply_sqrt_cov(&e).unwrap());
            c_half.set_column(j, &prior.apply_cov_half(&e).unwrap());
        }
        let a = prior.operator().to_dense();
        let ainv = a.try_inverse().unwrap();
        let m = prior.mass().to_dense();
        let euclid = &ainv * &m * &ainv;
        assert!((&l * l.transpose() - &euclid).amax() <= 1e-10 * euclid.amax());
        let cov = dense_assemble(&prior.covariance_operator()).unwrap();
        assert!((&c_half * &c_half - &cov).amax() <= 1e-10 * cov.amax());
        // L^T is the transpose of L.
        let y = random(64, 30);
        assert_relative_eq!(
            prior.apply_sqrt_cov_transpose(&y).unwrap(),
            l.transpose() * y,
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_is_self_adjoint_and_positive() {
        let prior = grid_prior(8);
        let op = prior.covariance_operator();
        assert!(verify_adjoint(&op, 20, 4).unwrap() <= 1e-10);
        for k in 0..100 {
            let v = random(64, 100 + k);
            assert!(prior.mass().dot(&prior.apply_cov(&v).unwrap(), &v) > 0.0);
        }
    }

    #[test]
    fn trace_matches_eigenvalue_sum() {
        let prior = grid_prior(8);
        let cov = dense_assemble(&prior.covariance_operator()).unwrap();
        let tr = cov.trace();
        let (lambda, v) = prior.eigen_dense().unwrap();
        assert_relative_eq!(prior.trace_cov_dense().unwrap(), tr, max_relative = 1e-8);
        assert_relative_eq!(lambda.sum(), tr, max_relative = 1e-8);
        // Eigenvectors are M-orthonormal eigenvectors of C_pr.
        let first = v.column(0).into_owned();
        assert_relative_eq!(prior.mass().norm(&first), 1.0, epsilon = 1e-10);
        let cv = prior.apply_cov(&first).unwrap();
        assert!((cv - &first * lambda[0]).amax() <= 1e-10 * lambda[0] * first.amax());
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let prior = Arc::new(
            EllipticGaussianPrior::grid_2d(4, 4, [1.0, 1.0], &PriorConfig { mean: 0.7, ..Default::default() })
                .unwrap(),
        );
        assert_eq!(prior.sample(5).unwrap(), prior.sample(5).unwrap());
        assert_ne!(prior.sample(5).unwrap(), prior.sample(6).unwrap());

        let n_draws = 10_000;
        let cov = dense_assemble(&prior.covariance_operator()).unwrap();
        let euclid = &cov * prior.mass().to_dense().try_inverse().unwrap();
        let draws: Vec<DVector<f64>> = (0..n_draws).map(|s| prior.sample(s as u64).unwrap()).collect();
        let mean = draws.iter().fold(DVector::zeros(16), |acc, d| acc + d) / n_draws as f64;
        for i in 0..16 {
            let se = (euclid[(i, i)] / n_draws as f64).sqrt();
            assert!((mean[i] - 0.7).abs() <= 3.0 * se, "component {i}");
        }

        // Var <c, m>_M = <C c, c>_M.
        let c = DVector::from_fn(16, |i, _| (i as f64 * 0.7).cos());
        let vals: Vec<f64> = draws.iter().map(|d| prior.mass().dot(&c, &(d - prior.mean()))).collect();
        let var = vals.iter().map(|x| x * x).sum::<f64>() / n_draws as f64;
        let fourth = vals.iter().map(|x| x.powi(4)).sum::<f64>() / n_draws as f64;
        let se = ((fourth - var * var) / n_draws as f64).sqrt();
        let expected = prior.mass().dot(&prior.apply_cov(&c).unwrap(), &c);
        assert!((var - expected).abs() <= 3.0 * se, "{var} vs {expected} (se {se})");
    }

    #[test]
    fn sample_covariance_matches_dense_covariance() {
        let prior = Arc::new(EllipticGaussianPrior::grid_2d(4, 4, [1.0, 1.0], &PriorConfig::default()).unwrap());
        let n_draws = 20_000;
        let mut acc = DMatrix::zeros(16, 16);
        for s in 0..n_draws {
            let d = prior.sample(1_000_000 + s as u64).unwrap();
            acc += &d * d.transpose();
        }
        acc /= n_draws as f64;
        let a = prior.operator().to_dense().try_inverse().unwrap();
        let euclid = &a * prior.mass().to_dense() * &a;
        let rel = (&acc - &euclid).norm() / euclid.norm();
        assert!(rel <= 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn stacked_scalars_have_requested_variance() {
        let base = EllipticGaussianPrior::grid_1d(5, 1.0, &PriorConfig::default()).unwrap();
        let stacked = base.with_scalars(&[1.0, -2.0], &[0.5, 2.0]).unwrap();
        assert_eq!(stacked.dim(), 7);
        let mut e = DVector::zeros(7);
        e[5] = 1.0;
        assert_relative_eq!(stacked.apply_cov(&e).unwrap()[5], 0.25, epsilon = 1e-14);
        e[5] = 0.0;
        e[6] = 1.0;
        assert_relative_eq!(stacked.apply_cov(&e).unwrap()[6], 4.0, epsilon = 1e-14);
        assert!(verify_adjoint(&Arc::new(stacked).covariance_operator(), 20, 1).unwrap() <= 1e-10);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let bad = PriorConfig { gamma: -1.0, ..Default::default() };
        assert!(EllipticGaussianPrior::grid_2d(4, 4, [1.0, 1.0], &bad).is_err());
        let bad = PriorConfig { delta: 0.0, ..Default::default() };
        assert!(EllipticGaussianPrior::grid_1d(4, 1.0, &bad).is_err());
    }
}
