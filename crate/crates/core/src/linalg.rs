//! Banded factorizations, preconditioned conjugate gradients, and small
//! dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{OedError, Result};

/// Square matrix stored by diagonals within a fixed bandwidth.
///
/// Row `i` keeps entries for columns `i - lower ..= i + upper`.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self {
            n,
            lower,
            upper,
            data: vec![0.0; n * (lower + upper + 1)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, 0, 0);
        for i in 0..n {
            m.add(i, i, 1.0);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.lower, self.upper)
    }

    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.lower >= i && j <= i + self.upper
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        i * self.width() + (j + self.lower - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i < self.n && j < self.n && self.in_band(i, j) {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    /// Accumulate `value` into entry `(i, j)`.
    ///
    /// Panics when the entry lies outside the band; that is a construction
    /// bug in the caller.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(
            i < self.n && j < self.n && self.in_band(i, j),
            "entry ({i}, {j}) outside band"
        );
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// `self + alpha * other`, widening the band as needed.
    pub fn add_scaled(&self, alpha: f64, other: &BandedMatrix) -> BandedMatrix {
        assert_eq!(self.n, other.n);
        let lower = self.lower.max(other.lower);
        let upper = self.upper.max(other.upper);
        let mut out = BandedMatrix::zeros(self.n, lower, upper);
        for i in 0..self.n {
            let lo = i.saturating_sub(lower);
            let hi = (i + upper).min(self.n - 1);
            for j in lo..=hi {
                let v = self.get(i, j) + alpha * other.get(i, j);
                if v != 0.0 {
                    out.add(i, j, v);
                }
            }
        }
        out
    }

    fn row_range(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        i.saturating_sub(self.lower)..=(i + self.upper).min(self.n - 1)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n);
        DVector::from_fn(self.n, |i, _| {
            self.row_range(i).map(|j| self.data[self.slot(i, j)] * x[j]).sum()
        })
    }

    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for j in self.row_range(i) {
                y[j] += self.data[self.slot(i, j)] * xi;
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Largest |a_ij - a_ji| over the band.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in self.row_range(i) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// LU factorization without pivoting. Safe for the diagonally dominant
    /// and symmetric positive definite systems assembled in this crate.
    pub fn factorize(&self) -> Result<BandedLu> {
        let mut lu = self.clone();
        let n = self.n;
        for k in 0..n {
            let pivot = lu.get(k, k);
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(OedError::Factorization { row: k });
            }
            let last_row = (k + lu.lower).min(n - 1);
            let last_col = (k + lu.upper).min(n - 1);
            for i in k + 1..=last_row {
                let s = lu.slot(i, k);
                let l = lu.data[s] / pivot;
                lu.data[s] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=last_col {
                    let ukj = lu.data[lu.slot(k, j)];
                    let sij = lu.slot(i, j);
                    lu.data[sij] -= l * ukj;
                }
            }
        }
        Ok(BandedLu { lu })
    }
}

/// Packed `L U` factors of a [`BandedMatrix`] (unit lower `L`).
#[derive(Debug, Clone)]
pub struct BandedLu {
    lu: BandedMatrix,
}

impl BandedLu {
    pub fn dim(&self) -> usize {
        self.lu.n
    }

    /// Diagonal entry `U_ii`.
    pub fn pivot(&self, i: usize) -> f64 {
        self.lu.get(i, i)
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let a = &self.lu;
        let n = a.n;
        let mut x = b.clone();
        for i in 0..n {
            let lo = i.saturating_sub(a.lower);
            let mut s = x[i];
            for j in lo..i {
                s -= a.data[a.slot(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + a.upper).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= a.data[a.slot(i, j)] * x[j];
            }
            x[i] = s / a.data[a.slot(i, i)];
        }
        x
    }

    /// Solve `A^T x = b` with the same factors: `U^T z = b`, then `L^T x = z`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let a = &self.lu;
        let n = a.n;
        let mut x = b.clone();
        for i in 0..n {
            x[i] /= a.data[a.slot(i, i)];
            let xi = x[i];
            let hi = (i + a.upper).min(n - 1);
            for j in i + 1..=hi {
                x[j] -= a.data[a.slot(i, j)] * xi;
            }
        }
        for i in (0..n).rev() {
            let xi = x[i];
            let lo = i.saturating_sub(a.lower);
            for j in lo..i {
                x[j] -= a.data[a.slot(i, j)] * xi;
            }
        }
        x
    }
}

/// Termination data of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            max_iter: 1000,
        }
    }
}

/// Preconditioned conjugate gradients in a weighted inner product.
///
/// `apply` and `precond` must both be self-adjoint (and positive) with
/// respect to `inner`. The residual is measured in the norm induced by
/// `inner`, relative to the right-hand side.
pub fn pcg<A, P, I>(
    apply: A,
    precond: P,
    inner: I,
    b: &DVector<f64>,
    opts: CgOptions,
) -> Result<CgOutcome>
where
    A: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    P: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    I: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let n = b.len();
    let b_norm = inner(b, b).max(0.0).sqrt();
    let mut x = DVector::zeros(n);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = b.clone();
    let mut z = precond(&r)?;
    let mut p = z.clone();
    let mut rz = inner(&r, &z);
    let mut rel = 1.0;
    for it in 0..opts.max_iter {
        let ap = apply(&p)?;
        let curvature = inner(&p, &ap);
        if curvature <= 0.0 || !curvature.is_finite() {
            return Err(OedError::NotPositiveDefinite {
                iteration: it,
                curvature,
            });
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        rel = inner(&r, &r).max(0.0).sqrt() / b_norm;
        if rel <= opts.rtol {
            return Ok(CgOutcome {
                x,
                iterations: it + 1,
                relative_residual: rel,
            });
        }
        z = precond(&r)?;
        let rz_new = inner(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Err(OedError::NotConverged {
        iterations: opts.max_iter,
        residual: rel,
    })
}

/// Symmetrize `s` in place, failing when the relative asymmetry exceeds `guard`.
pub fn symmetrize_guarded(s: &mut DMatrix<f64>, guard: f64) -> Result<f64> {
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (&*s - s.transpose()).amax() / scale;
    if asym > guard {
        return Err(OedError::NonSymmetric { asymmetry: asym });
    }
    let sym = (&*s + s.transpose()) * 0.5;
    *s = sym;
    Ok(asym)
}

/// `log det` of a symmetric positive definite matrix via Cholesky.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| OedError::InvalidArgument("matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn inverse_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| OedError::InvalidArgument("matrix is not positive definite".into()))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let vectors = DMatrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, lower: usize, upper: usize, seed: u64) -> BandedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = BandedMatrix::zeros(n, lower, upper);
        for i in 0..n {
            let lo = i.saturating_sub(lower);
            let hi = (i + upper).min(n - 1);
            let mut row_sum = 0.0;
            for j in lo..=hi {
                if j != i {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    a.add(i, j, v);
                    row_sum += v.abs();
                }
            }
            a.add(i, i, row_sum + 1.0);
        }
        a
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        let a = random_banded(30, 4, 3, 11);
        let lu = a.factorize().unwrap();
        let b = DVector::from_fn(30, |i, _| (i as f64).sin());
        let x = lu.solve(&b);
        assert_relative_eq!(a.matvec(&x), b.clone(), epsilon = 1e-12);
        let xt = lu.solve_transpose(&b);
        assert_relative_eq!(a.matvec_transpose(&xt), b.clone(), epsilon = 1e-12);
        let dense = a.to_dense();
        assert_relative_eq!(&dense * &x, b, epsilon = 1e-12);
    }

    #[test]
    fn zero_pivot_is_reported() {
        let a = BandedMatrix::zeros(3, 1, 1);
        assert!(matches!(a.factorize(), Err(OedError::Factorization { row: 0 })));
    }

    #[test]
    fn pcg_solves_weighted_system() {
        // A = M^{-1} S with S SPD is self-adjoint in the M inner product.
        let n = 12;
        let s = random_banded(n, 1, 1, 3);
        let sd = s.to_dense();
        let sd = (&sd + sd.transpose()) * 0.5 + DMatrix::identity(n, n) * 3.0;
        let mass = DVector::from_fn(n, |i, _| 0.5 + i as f64 * 0.1);
        let apply = |v: &DVector<f64>| Ok((&sd * v).component_div(&mass));
        let inner = |a: &DVector<f64>, b: &DVector<f64>| a.component_mul(&mass).dot(b);
        let b = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        let out = pcg(apply, |r: &DVector<f64>| Ok(r.clone()), inner, &b, CgOptions::default()).unwrap();
        assert!(out.relative_residual <= 1e-10);
        assert_relative_eq!((&sd * &out.x).component_div(&mass), b, epsilon = 1e-8);
    }

    #[test]
    fn pcg_reports_non_convergence() {
        let n = 20;
        let diag = DVector::from_fn(n, |i, _| 10f64.powi(i as i32 % 8));
        let apply = |v: &DVector<f64>| Ok(v.component_mul(&diag));
        let b = DVector::from_element(n, 1.0);
        let err = pcg(
            apply,
            |r: &DVector<f64>| Ok(r.clone()),
            |a: &DVector<f64>, b: &DVector<f64>| a.dot(b),
            &b,
            CgOptions { rtol: 1e-14, max_iter: 2 },
        )
        .unwrap_err();
        assert!(matches!(err, OedError::NotConverged { iterations: 2, .. }));
    }

    #[test]
    fn logdet_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 4.0]));
        assert_relative_eq!(logdet_spd(&a).unwrap(), 24f64.ln(), epsilon = 1e-14);
    }
}
