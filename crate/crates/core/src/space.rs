//! Discretized parameter and data spaces, matrix-free operator handles and
//! the mass-weighted adjoint calculus.
//!
//! The parameter space is `R^n` with the inner product `<u, v>_M = u^T M v`,
//! where `M` is a lumped (diagonal) mass matrix. Data spaces carry the
//! Euclidean inner product. Operator handles only declare the plain matrix
//! transpose; adjoints are always derived through [`m_adjoint_apply`], which
//! inserts the Gram matrices of the two spaces:
//!
//! ```text
//! A* = G_domain^{-1} A^T G_codomain
//! ```
//!
//! so an endomorphism of the parameter space gets `M^{-1} A^T M` and a map
//! into a data space gets `M^{-1} F^T`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, OedError, Result};
use crate::rng;

/// Largest dimension for which dense oracles may be assembled.
pub const DENSE_GUARD: usize = 5000;

/// Lumped (diagonal) mass matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    diag: DVector<f64>,
}

impl MassMatrix {
    pub fn new(diag: DVector<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(OedError::InvalidArgument("mass matrix must be non-empty".into()));
        }
        if let Some(bad) = diag.iter().position(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(OedError::InvalidArgument(format!(
                "mass entry {bad} is not a positive finite number"
            )));
        }
        Ok(Self { diag })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            diag: DVector::from_element(n, 1.0),
        }
    }

    /// `weight * I`, the lumped mass of a uniform grid with cell measure `weight`.
    pub fn uniform(n: usize, weight: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, weight))
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.diag)
    }

    pub fn apply_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_div(&self.diag)
    }

    pub fn apply_sqrt(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i] * self.diag[i].sqrt())
    }

    pub fn apply_inv_sqrt(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i] / self.diag[i].sqrt())
    }

    /// Unchecked `sum_i u_i M_ii v_i`.
    pub(crate) fn dot(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.iter()
            .zip(self.diag.iter())
            .zip(v.iter())
            .map(|((a, m), b)| a * m * b)
            .sum()
    }

    pub fn norm(&self, u: &DVector<f64>) -> f64 {
        self.dot(u, u).sqrt()
    }

    /// Block-diagonal concatenation.
    pub fn stack(&self, other: &MassMatrix) -> MassMatrix {
        let mut diag = self.diag.as_slice().to_vec();
        diag.extend_from_slice(other.diag.as_slice());
        MassMatrix {
            diag: DVector::from_vec(diag),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag)
    }
}

/// The mass-weighted inner product `sum_i u_i M_ii v_i`.
pub fn m_inner(u: &DVector<f64>, v: &DVector<f64>, mass: &MassMatrix) -> Result<f64> {
    check_dim("m_inner (u)", mass.dim(), u.len())?;
    check_dim("m_inner (v)", mass.dim(), v.len())?;
    Ok(mass.dot(u, v))
}

/// Tag of a vector space together with its inner product.
#[derive(Debug, Clone)]
pub enum Space {
    /// Discretized parameter space `(R^n, <.,.>_M)`.
    Parameter(Arc<MassMatrix>),
    /// Euclidean data space `R^d`.
    Data(usize),
}

impl Space {
    pub fn parameter(mass: MassMatrix) -> Self {
        Space::Parameter(Arc::new(mass))
    }

    pub fn dim(&self) -> usize {
        match self {
            Space::Parameter(m) => m.dim(),
            Space::Data(d) => *d,
        }
    }

    pub fn mass(&self) -> Option<&Arc<MassMatrix>> {
        match self {
            Space::Parameter(m) => Some(m),
            Space::Data(_) => None,
        }
    }

    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        match self {
            Space::Parameter(m) => m.dot(u, v),
            Space::Data(_) => u.dot(v),
        }
    }

    pub fn norm(&self, u: &DVector<f64>) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// Apply the Gram matrix of the inner product.
    pub fn gram(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Space::Parameter(m) => m.apply(v),
            Space::Data(_) => v.clone(),
        }
    }

    pub fn gram_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Space::Parameter(m) => m.apply_inv(v),
            Space::Data(_) => v.clone(),
        }
    }
}

/// A matrix-free linear map between tagged spaces.
///
/// Implementations expose the plain matrix action and, when available, the
/// plain matrix transpose. They must be immutable and safe to apply from
/// several threads at once.
pub trait LinearOperator: Send + Sync {
    fn name(&self) -> &str {
        "operator"
    }

    fn domain(&self) -> &Space;

    fn codomain(&self) -> &Space;

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn apply_transpose(&self, _y: &DVector<f64>) -> Result<DVector<f64>> {
        Err(OedError::MissingTranspose(self.name().to_string()))
    }
}

/// Adjoint action with respect to the inner products of the tagged spaces.
pub fn m_adjoint_apply(op: &dyn LinearOperator, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("m_adjoint_apply", op.codomain().dim(), y.len())?;
    let weighted = op.codomain().gram(y);
    let t = op.apply_transpose(&weighted)?;
    check_dim("m_adjoint_apply (transpose output)", op.domain().dim(), t.len())?;
    Ok(op.domain().gram_inv(&t))
}

/// Largest normalized violation of `<A u, y> = <u, A* y>` over random pairs.
pub fn verify_adjoint(op: &dyn LinearOperator, trials: usize, seed: u64) -> Result<f64> {
    let trials = trials.max(1);
    let mut worst = 0.0f64;
    for k in 0..trials {
        let mut r = rng::substream(seed, "adjoint-test", k as u64);
        let u = rng::standard_normal(&mut r, op.domain().dim());
        let y = rng::standard_normal(&mut r, op.codomain().dim());
        let lhs = op.codomain().inner(&op.apply(&u)?, &y);
        let rhs = op.domain().inner(&u, &m_adjoint_apply(op, &y)?);
        let scale = op.domain().norm(&u) * op.codomain().norm(&y) + f64::EPSILON;
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Dense matrix whose column `j` is `A e_j`. Test-oracle use only.
pub fn dense_assemble(op: &dyn LinearOperator) -> Result<DMatrix<f64>> {
    let n = op.domain().dim();
    guard_dense(n)?;
    let m = op.codomain().dim();
    let mut out = DMatrix::zeros(m, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        check_dim("dense_assemble", m, col.len())?;
        out.set_column(j, &col);
        e[j] = 0.0;
    }
    Ok(out)
}

/// Dense matrix assembled row by row from transpose actions; cheaper than
/// [`dense_assemble`] when the codomain is small.
pub fn dense_assemble_by_rows(op: &dyn LinearOperator) -> Result<DMatrix<f64>> {
    let m = op.codomain().dim();
    let n = op.domain().dim();
    guard_dense(n)?;
    let mut out = DMatrix::zeros(m, n);
    let mut e = DVector::zeros(m);
    for i in 0..m {
        e[i] = 1.0;
        let row = op.apply_transpose(&e)?;
        check_dim("dense_assemble_by_rows", n, row.len())?;
        out.set_row(i, &row.transpose());
        e[i] = 0.0;
    }
    Ok(out)
}

fn guard_dense(n: usize) -> Result<()> {
    if n > DENSE_GUARD {
        return Err(OedError::GuardExceeded {
            what: "dense dimension",
            size: n as u128,
            limit: DENSE_GUARD as u128,
        });
    }
    Ok(())
}

/// Identity map on a space.
#[derive(Debug, Clone)]
pub struct IdentityOperator {
    space: Space,
}

impl IdentityOperator {
    pub fn new(space: Space) -> Self {
        Self { space }
    }
}

impl LinearOperator for IdentityOperator {
    fn name(&self) -> &str {
        "identity"
    }
    fn domain(&self) -> &Space {
        &self.space
    }
    fn codomain(&self) -> &Space {
        &self.space
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("identity", self.space.dim(), x.len())?;
        Ok(x.clone())
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply(y)
    }
}

/// Explicit matrix between tagged spaces.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    domain: Space,
    codomain: Space,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>, domain: Space, codomain: Space) -> Result<Self> {
        check_dim("dense operator rows", codomain.dim(), matrix.nrows())?;
        check_dim("dense operator columns", domain.dim(), matrix.ncols())?;
        Ok(Self {
            matrix,
            domain,
            codomain,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn name(&self) -> &str {
        "dense"
    }
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn codomain(&self) -> &Space {
        &self.codomain
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dense apply", self.matrix.ncols(), x.len())?;
        Ok(&self.matrix * x)
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dense transpose", self.matrix.nrows(), y.len())?;
        Ok(self.matrix.tr_mul(y))
    }
}

/// `outer ∘ inner`.
pub struct ComposedOperator {
    outer: Arc<dyn LinearOperator>,
    inner: Arc<dyn LinearOperator>,
}

impl ComposedOperator {
    pub fn new(outer: Arc<dyn LinearOperator>, inner: Arc<dyn LinearOperator>) -> Result<Self> {
        check_dim("composition", outer.domain().dim(), inner.codomain().dim())?;
        Ok(Self { outer, inner })
    }
}

impl LinearOperator for ComposedOperator {
    fn name(&self) -> &str {
        "composition"
    }
    fn domain(&self) -> &Space {
        self.inner.domain()
    }
    fn codomain(&self) -> &Space {
        self.outer.codomain()
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.outer.apply(&self.inner.apply(x)?)
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.apply_transpose(&self.outer.apply_transpose(y)?)
    }
}

/// The adjoint `A*` of a handle, itself a handle from `A`'s codomain to its domain.
pub struct AdjointOperator {
    inner: Arc<dyn LinearOperator>,
}

impl AdjointOperator {
    pub fn new(inner: Arc<dyn LinearOperator>) -> Self {
        Self { inner }
    }
}

impl LinearOperator for AdjointOperator {
    fn name(&self) -> &str {
        "adjoint"
    }
    fn domain(&self) -> &Space {
        self.inner.codomain()
    }
    fn codomain(&self) -> &Space {
        self.inner.domain()
    }
    fn apply(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        m_adjoint_apply(self.inner.as_ref(), y)
    }
    // (G_d^{-1} A^T G_c)^T = G_c A G_d^{-1}
    fn apply_transpose(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("adjoint transpose", self.inner.domain().dim(), x.len())?;
        let ax = self.inner.apply(&self.inner.domain().gram_inv(x))?;
        Ok(self.inner.codomain().gram(&ax))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn param(diag: &[f64]) -> Space {
        Space::parameter(MassMatrix::new(DVector::from_column_slice(diag)).unwrap())
    }

    /// An operator whose transpose is deliberately used as the adjoint
    /// without M weighting.
    struct UnweightedAdjoint(DenseOperator);

    impl LinearOperator for UnweightedAdjoint {
        fn domain(&self) -> &Space {
            self.0.domain()
        }
        fn codomain(&self) -> &Space {
            self.0.codomain()
        }
        fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
            self.0.apply(x)
        }
        // Pre-compensates the Gram weighting so m_adjoint_apply returns A^T y.
        fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
            let m = self.0.domain().mass().unwrap();
            let plain = self.0.apply_transpose(&self.0.codomain().gram_inv(y))?;
            Ok(m.apply(&plain))
        }
    }

    #[test]
    fn mass_rejects_nonpositive_entries() {
        assert!(MassMatrix::new(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(MassMatrix::new(DVector::from_vec(vec![1.0, -2.0])).is_err());
        assert!(MassMatrix::new(DVector::from_vec(vec![])).is_err());
    }

    #[test]
    fn m_inner_examples() {
        let id = MassMatrix::identity(2);
        let ones = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(m_inner(&ones, &ones, &id).unwrap(), 2.0);
        let m = MassMatrix::new(DVector::from_vec(vec![3.0, 7.0])).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(m_inner(&e1, &e2, &m).unwrap(), 0.0);
        let half = MassMatrix::uniform(2, 0.5).unwrap();
        let u = DVector::from_vec(vec![2.0, 3.0]);
        // 2*0.5*1 + 3*0.5*1
        assert_relative_eq!(m_inner(&u, &ones, &half).unwrap(), 2.5);
        assert!(m_inner(&u, &DVector::zeros(3), &half).is_err());
    }

    #[test]
    fn adjoint_of_identity_is_identity() {
        let space = param(&[2.0, 5.0]);
        let id = IdentityOperator::new(space);
        let y = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(m_adjoint_apply(&id, &y).unwrap(), y);
        assert!(verify_adjoint(&id, 10, 1).unwrap() <= 1e-14);
    }

    #[test]
    fn adjoint_with_identity_mass_is_transpose() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let op = DenseOperator::new(a.clone(), param(&[1.0, 1.0, 1.0]), Space::Data(2)).unwrap();
        let y = DVector::from_vec(vec![0.7, -0.2]);
        assert_relative_eq!(m_adjoint_apply(&op, &y).unwrap(), a.transpose() * y, epsilon = 1e-15);
    }

    #[test]
    fn adjoint_with_weighted_mass() {
        // M = diag(2,1), A = [[0,1],[0,0]]: A* y = M^{-1} A^T M y.
        let space = param(&[2.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let op = DenseOperator::new(a, space.clone(), space).unwrap();
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let got = m_adjoint_apply(&op, &y).unwrap();
        assert_relative_eq!(got, DVector::from_vec(vec![0.0, 2.0]), epsilon = 1e-15);
    }

    #[test]
    fn missing_transpose_is_an_error() {
        struct NoTranspose(Space);
        impl LinearOperator for NoTranspose {
            fn domain(&self) -> &Space {
                &self.0
            }
            fn codomain(&self) -> &Space {
                &self.0
            }
            fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(x.clone())
            }
        }
        let op = NoTranspose(Space::Data(2));
        assert!(matches!(
            m_adjoint_apply(&op, &DVector::zeros(2)),
            Err(OedError::MissingTranspose(_))
        ));
    }

    #[test]
    fn verify_adjoint_separates_correct_and_wrong_adjoints() {
        let diag: Vec<f64> = (0..5).map(|i| 0.5 + i as f64).collect();
        let space = param(&diag);
        let mut r = rng::substream(5, "test", 0);
        let a = DMatrix::from_fn(5, 5, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
        let good = DenseOperator::new(a.clone(), space.clone(), space.clone()).unwrap();
        assert!(verify_adjoint(&good, 20, 3).unwrap() <= 1e-12);
        let bad = UnweightedAdjoint(good.clone());
        assert!(verify_adjoint(&bad, 20, 3).unwrap() > 1e-3);
    }

    #[test]
    fn dense_assemble_identity_and_composition() {
        let space = param(&[1.0, 2.0, 3.0]);
        let id = IdentityOperator::new(space.clone());
        assert_eq!(dense_assemble(&id).unwrap(), DMatrix::identity(3, 3));

        let a = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let b = DMatrix::from_fn(3, 3, |i, j| ((i + 2 * j) % 5) as f64);
        let opa: Arc<dyn LinearOperator> =
            Arc::new(DenseOperator::new(a.clone(), space.clone(), space.clone()).unwrap());
        let opb: Arc<dyn LinearOperator> =
            Arc::new(DenseOperator::new(b.clone(), space.clone(), space.clone()).unwrap());
        let comp = ComposedOperator::new(opa, opb).unwrap();
        assert_relative_eq!(dense_assemble(&comp).unwrap(), &a * &b, epsilon = 1e-14);
        assert!(verify_adjoint(&comp, 10, 2).unwrap() <= 1e-12);
    }

    #[test]
    fn dense_adjoint_is_mass_conjugated_transpose() {
        let diag = [0.3, 1.7, 2.2, 0.9];
        let space = param(&diag);
        let a = DMatrix::from_fn(4, 4, |i, j| ((i + 1) * (j + 2)) as f64 % 3.0 - 1.0);
        let op: Arc<dyn LinearOperator> =
            Arc::new(DenseOperator::new(a.clone(), space.clone(), space).unwrap());
        let adj = AdjointOperator::new(op);
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(&diag));
        let expected = m.clone().try_inverse().unwrap() * a.transpose() * m;
        assert_relative_eq!(dense_assemble(&adj).unwrap(), expected, epsilon = 1e-12);
        assert!(verify_adjoint(&adj, 20, 9).unwrap() <= 1e-12);
    }

    #[test]
    fn dense_guard_rejects_huge_domains() {
        let id = IdentityOperator::new(Space::Data(DENSE_GUARD + 1));
        assert!(matches!(dense_assemble(&id), Err(OedError::GuardExceeded { .. })));
    }

    proptest! {
        #[test]
        fn m_inner_is_symmetric_bilinear_and_positive(
            m in prop::collection::vec(0.01f64..10.0, 4),
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            z in prop::collection::vec(-5.0f64..5.0, 4),
            a in -3.0f64..3.0,
        ) {
            let mass = MassMatrix::new(DVector::from_vec(m)).unwrap();
            let (u, v, z) = (DVector::from_vec(u), DVector::from_vec(v), DVector::from_vec(z));
            let uv = m_inner(&u, &v, &mass).unwrap();
            prop_assert!((uv - m_inner(&v, &u, &mass).unwrap()).abs() <= 1e-12 * (1.0 + uv.abs()));
            let lhs = m_inner(&(&u * a + &z), &v, &mass).unwrap();
            let rhs = a * uv + m_inner(&z, &v, &mass).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            if u.norm() > 1e-8 {
                prop_assert!(m_inner(&u, &u, &mass).unwrap() > 0.0);
            }
        }
    }
}
