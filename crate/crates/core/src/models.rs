//! Built-in linear parameter-to-observable maps.
//!
//! [`AdvectionDiffusionModel`] transports an initial concentration field on a
//! uniform cell-centered grid with finite volumes: five-point diffusion,
//! first-order upwind advection, implicit Euler in time. The parameter is the
//! initial field and observations are point values of the final state,
//! interpolated bilinearly at the sensor locations.
//!
//! Boundary treatment, face by face:
//! * diffusive flux is zero on every boundary face (ghost-cell reflection);
//! * the left edge (`x = 0`) carries no advective flux at all;
//! * every other boundary face lets mass leave with the upwind cell value
//!   when the velocity points outward and admits nothing when it points in.
//!
//! Corner cells have two boundary faces and simply get both treatments; no
//! special corner stencil is used.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OedError, Result};
use crate::linalg::{BandedLu, BandedMatrix};
use crate::space::{LinearOperator, MassMatrix, Space};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvectionDiffusionConfig {
    pub nx: usize,
    pub ny: usize,
    pub lengths: [f64; 2],
    pub kappa: f64,
    pub velocity: [f64; 2],
    pub t_final: f64,
    pub n_steps: usize,
}

impl Default for AdvectionDiffusionConfig {
    fn default() -> Self {
        Self {
            nx: 16,
            ny: 16,
            lengths: [1.0, 1.0],
            kappa: 0.02,
            velocity: [0.5, 0.25],
            t_final: 0.4,
            n_steps: 20,
        }
    }
}

impl AdvectionDiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(OedError::InvalidArgument(msg.to_string()));
        if self.nx < 4 || self.ny < 4 {
            return bad("grid must be at least 4x4");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1");
        }
        if !(self.t_final > 0.0) {
            return bad("t_final must be positive");
        }
        if !(self.lengths[0] > 0.0 && self.lengths[1] > 0.0) {
            return bad("domain lengths must be positive");
        }
        if !self.velocity.iter().all(|v| v.is_finite()) {
            return bad("velocity must be finite");
        }
        Ok(())
    }
}

/// Time-dependent advection-diffusion transport of an initial field.
#[derive(Debug, Clone)]
pub struct AdvectionDiffusionModel {
    config: AdvectionDiffusionConfig,
    dx: f64,
    dy: f64,
    space: Space,
    lu: BandedLu,
}

impl AdvectionDiffusionModel {
    pub fn new(config: AdvectionDiffusionConfig) -> Result<Self> {
        config.validate()?;
        let dx = config.lengths[0] / config.nx as f64;
        let dy = config.lengths[1] / config.ny as f64;
        let n = config.nx * config.ny;
        let rate = assemble_rate(&config, dx, dy);
        let dt = config.t_final / config.n_steps as f64;
        let system = BandedMatrix::identity(n).add_scaled(-dt, &rate);
        let lu = system.factorize()?;
        let space = Space::parameter(MassMatrix::uniform(n, dx * dy)?);
        Ok(Self {
            config,
            dx,
            dy,
            space,
            lu,
        })
    }

    pub fn config(&self) -> &AdvectionDiffusionConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.nx * self.config.ny
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.dx, self.dy)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.config.nx * j
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 2] {
        let i = idx % self.config.nx;
        let j = idx / self.config.nx;
        [(i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy]
    }

    pub fn parameter_space(&self) -> &Space {
        &self.space
    }

    pub fn mass(&self) -> &Arc<MassMatrix> {
        self.space.mass().expect("parameter space")
    }

    /// State `u(T)` for initial condition `m`.
    pub fn final_state(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("advection-diffusion state", self.n(), m.len())?;
        let mut u = m.clone();
        for step in 0..self.config.n_steps {
            u = self.lu.solve(&u);
            if !u.iter().all(|x| x.is_finite()) {
                return Err(OedError::TimeStepBreakdown { step });
            }
        }
        Ok(u)
    }

    /// Transpose of the state propagator, `(S^{-N})^T p`, as the backward
    /// recursion of the discrete scheme.
    pub fn final_state_transpose(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("advection-diffusion adjoint state", self.n(), p.len())?;
        let mut lambda = p.clone();
        for k in 0..self.config.n_steps {
            lambda = self.lu.solve_transpose(&lambda);
            if !lambda.iter().all(|x| x.is_finite()) {
                return Err(OedError::TimeStepBreakdown {
                    step: self.config.n_steps - 1 - k,
                });
            }
        }
        Ok(lambda)
    }

    pub fn forward_apply(&self, sensors: &SensorArray, m: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(sensors.extract(&self.final_state(m)?))
    }

    /// Plain transpose `F^T d`.
    pub fn transpose_apply(&self, sensors: &SensorArray, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("advection-diffusion data", sensors.len(), d.len())?;
        self.final_state_transpose(&sensors.extract_transpose(d, self.n()))
    }

    /// Adjoint `F* d = M^{-1} F^T d`.
    pub fn adjoint_apply(&self, sensors: &SensorArray, d: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.mass().apply_inv(&self.transpose_apply(sensors, d)?))
    }

    /// Riesz representer `c` of the goal `p(m) = integral of u(T) over a box`,
    /// so that `p(m) = <c, m>_M`.
    pub fn region_average_gradient(&self, region: [f64; 4]) -> Result<DVector<f64>> {
        let [x0, x1, y0, y1] = region;
        let indicator = DVector::from_fn(self.n(), |idx, _| {
            let [x, y] = self.cell_center(idx);
            if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
                1.0
            } else {
                0.0
            }
        });
        if indicator.sum() == 0.0 {
            return Err(OedError::InvalidArgument("goal region contains no cells".into()));
        }
        let weighted = self.mass().apply(&indicator);
        Ok(self.mass().apply_inv(&self.final_state_transpose(&weighted)?))
    }
}

/// Rate matrix `R` of the semi-discrete system `du/dt = R u`.
fn assemble_rate(cfg: &AdvectionDiffusionConfig, dx: f64, dy: f64) -> BandedMatrix {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let n = nx * ny;
    let idx = |i: usize, j: usize| i + nx * j;
    let mut r = BandedMatrix::zeros(n, nx, nx);
    let [vx, vy] = cfg.velocity;
    let (kx, ky) = (cfg.kappa / (dx * dx), cfg.kappa / (dy * dy));

    // Interior faces. `flux(a -> b)` with upwinding contributes
    // -f/h to cell a and +f/h to cell b.
    let mut face = |a: usize, b: usize, k: f64, v: f64, h: f64| {
        r.add(a, a, -k);
        r.add(a, b, k);
        r.add(b, b, -k);
        r.add(b, a, k);
        if v > 0.0 {
            r.add(a, a, -v / h);
            r.add(b, a, v / h);
        } else if v < 0.0 {
            r.add(a, b, v / h);
            r.add(b, b, -v / h);
        }
    };
    for j in 0..ny {
        for i in 0..nx - 1 {
            face(idx(i, j), idx(i + 1, j), kx, vx, dx);
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            face(idx(i, j), idx(i, j + 1), ky, vy, dy);
        }
    }

    // Boundary outflow; the left edge is closed.
    for j in 0..ny {
        if vx > 0.0 {
            r.add(idx(nx - 1, j), idx(nx - 1, j), -vx / dx);
        }
    }
    for i in 0..nx {
        if vy < 0.0 {
            r.add(idx(i, 0), idx(i, 0), vy / dy);
        }
        if vy > 0.0 {
            r.add(idx(i, ny - 1), idx(i, ny - 1), -vy / dy);
        }
    }
    r
}

/// Candidate sensor locations with their bilinear extraction stencils.
#[derive(Debug, Clone)]
pub struct SensorArray {
    coords: Vec<[f64; 2]>,
    stencils: Vec<[(usize, f64); 4]>,
}

impl SensorArray {
    pub fn new(model: &AdvectionDiffusionModel, coords: Vec<[f64; 2]>) -> Result<Self> {
        let cfg = model.config();
        let [lx, ly] = cfg.lengths;
        let (dx, dy) = model.spacing();
        let mut stencils = Vec::with_capacity(coords.len());
        for (k, &[x, y]) in coords.iter().enumerate() {
            if !(x > 0.0 && x < lx && y > 0.0 && y < ly) {
                return Err(OedError::InvalidArgument(format!(
                    "sensor {k} at ({x}, {y}) is not strictly inside the domain"
                )));
            }
            let (i0, tx) = locate(x / dx - 0.5, cfg.nx);
            let (j0, ty) = locate(y / dy - 0.5, cfg.ny);
            stencils.push([
                (model.index(i0, j0), (1.0 - tx) * (1.0 - ty)),
                (model.index(i0 + 1, j0), tx * (1.0 - ty)),
                (model.index(i0, j0 + 1), (1.0 - tx) * ty),
                (model.index(i0 + 1, j0 + 1), tx * ty),
            ]);
        }
        Ok(Self { coords, stencils })
    }

    /// `per_x * per_y` sensors at the centers of a uniform partition of the domain.
    pub fn uniform_grid(model: &AdvectionDiffusionModel, per_x: usize, per_y: usize) -> Result<Self> {
        let [lx, ly] = model.config().lengths;
        let mut coords = Vec::with_capacity(per_x * per_y);
        for j in 0..per_y {
            for i in 0..per_x {
                coords.push([
                    (i as f64 + 0.5) / per_x as f64 * lx,
                    (j as f64 + 0.5) / per_y as f64 * ly,
                ]);
            }
        }
        Self::new(model, coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn stencil(&self, k: usize) -> &[(usize, f64); 4] {
        &self.stencils[k]
    }

    pub fn extract(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |k, _| {
            self.stencils[k].iter().map(|&(i, w)| w * u[i]).sum()
        })
    }

    pub fn extract_transpose(&self, d: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (stencil, dk) in self.stencils.iter().zip(d.iter()) {
            for &(i, w) in stencil {
                out[i] += w * dk;
            }
        }
        out
    }
}

/// Lower stencil index and fractional offset along one axis, clamped so
/// that points between the boundary and the first cell center reuse the
/// outermost cells.
fn locate(f: f64, cells: usize) -> (usize, f64) {
    let i0 = (f.floor().max(0.0) as usize).min(cells - 2);
    let t = (f - i0 as f64).clamp(0.0, 1.0);
    (i0, t)
}

/// Parameter-to-observable handle `F: (R^n, M) -> R^{n_s}`.
pub struct AdvectionDiffusionOperator {
    model: Arc<AdvectionDiffusionModel>,
    sensors: Arc<SensorArray>,
    codomain: Space,
}

impl AdvectionDiffusionOperator {
    pub fn new(model: Arc<AdvectionDiffusionModel>, sensors: Arc<SensorArray>) -> Self {
        let codomain = Space::Data(sensors.len());
        Self {
            model,
            sensors,
            codomain,
        }
    }

    pub fn model(&self) -> &Arc<AdvectionDiffusionModel> {
        &self.model
    }

    pub fn sensors(&self) -> &Arc<SensorArray> {
        &self.sensors
    }
}

impl LinearOperator for AdvectionDiffusionOperator {
    fn name(&self) -> &str {
        "advection-diffusion"
    }
    fn domain(&self) -> &Space {
        self.model.parameter_space()
    }
    fn codomain(&self) -> &Space {
        &self.codomain
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.model.forward_apply(&self.sensors, x)
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.model.transpose_apply(&self.sensors, y)
    }
}

/// Explicit dense observation map, used for oracles and small examples.
#[derive(Debug, Clone)]
pub struct ToyDenseModel {
    matrix: DMatrix<f64>,
    mass: Arc<MassMatrix>,
}

impl ToyDenseModel {
    pub fn new(matrix: DMatrix<f64>, mass: MassMatrix) -> Result<Self> {
        check_dim("toy model columns", mass.dim(), matrix.ncols())?;
        Ok(Self {
            matrix,
            mass: Arc::new(mass),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn mass(&self) -> &Arc<MassMatrix> {
        &self.mass
    }

    pub fn toy_forward(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("toy forward", self.matrix.ncols(), v.len())?;
        Ok(&self.matrix * v)
    }

    pub fn toy_adjoint(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("toy adjoint", self.matrix.nrows(), d.len())?;
        Ok(self.mass.apply_inv(&self.matrix.tr_mul(d)))
    }

    pub fn operator(&self) -> ToyOperator {
        ToyOperator {
            model: self.clone(),
            domain: Space::Parameter(self.mass.clone()),
            codomain: Space::Data(self.matrix.nrows()),
        }
    }
}

pub struct ToyOperator {
    model: ToyDenseModel,
    domain: Space,
    codomain: Space,
}

impl LinearOperator for ToyOperator {
    fn name(&self) -> &str {
        "toy"
    }
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn codomain(&self) -> &Space {
        &self.codomain
    }
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.model.toy_forward(x)
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("toy transpose", self.model.matrix.nrows(), y.len())?;
        Ok(self.model.matrix.tr_mul(y))
    }
}
