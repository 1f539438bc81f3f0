//! Constraint-set geometry under the metric induced by a mass matrix.
//!
//! Positions, tangent vectors and covectors are all stored as [`Vector`];
//! which one a value is matters for inner products. Tangent vectors pair
//! through `M(u)`, covectors (forces, impulsions, `dphi`) through `M(u)^-1`.
//!
//! The admissible set is `K = {u : phi(u) >= 0}` with a smooth boundary on
//! which `dphi` does not vanish.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Matrix, Vector};

/// Boundary membership tolerance on `|phi|`.
pub const PHI_TOL: f64 = 1e-9;
/// Residual tolerance for the projection Newton solvers (scaled by `1 + |x|`).
pub const NEWTON_TOL: f64 = 1e-12;
/// Newton iteration cap for projections.
pub const MAX_NEWTON: usize = 40;
/// Relative symmetry tolerance for mass matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

const GEODESIC_RK_STEPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("mass matrix is not symmetric positive definite at u = {at:?}")]
    MetricDegenerate { at: Vec<f64> },
    #[error("constraint gradient vanishes at x = {at:?}")]
    DegenerateBoundary { at: Vec<f64> },
    #[error("point {at:?} is not on the boundary (phi = {phi:e})")]
    NotOnBoundary { at: Vec<f64>, phi: f64 },
    #[error(
        "projection did not converge after {iterations} iterations \
         (residual {residual:e}, last iterate {last_iterate:?})"
    )]
    ProjectionFailure {
        last_iterate: Vec<f64>,
        residual: f64,
        iterations: usize,
    },
    #[error("restitution coefficient {0} outside [0, 1]")]
    InvalidRestitution(f64),
    #[error("interior witness {at:?} has phi = {phi:e}, expected a strictly positive value")]
    NoInteriorWitness { at: Vec<f64>, phi: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
type PartialFn = Arc<dyn Fn(&Vector, usize) -> Matrix + Send + Sync>;

fn fd_step(u: &Vector) -> f64 {
    1e-5 * (1.0 + u.norm())
}

/// The constraint function `phi` together with its first and second derivatives.
#[derive(Clone)]
pub struct ConstraintSpec {
    dim: usize,
    phi: ScalarFn,
    grad: VectorFn,
    hessian: Option<MatrixFn>,
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("dim", &self.dim)
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl ConstraintSpec {
    pub fn new<P, G>(dim: usize, phi: P, grad: G) -> Self
    where
        P: Fn(&Vector) -> f64 + Send + Sync + 'static,
        G: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        Self {
            dim,
            phi: Arc::new(phi),
            grad: Arc::new(grad),
            hessian: None,
        }
    }

    /// Supply an analytic Hessian; otherwise central differences of the gradient are used.
    pub fn with_hessian<H>(mut self, hessian: H) -> Self
    where
        H: Fn(&Vector) -> Matrix + Send + Sync + 'static,
    {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    /// Half-space `normal . u >= offset`.
    pub fn half_space(normal: Vector, offset: f64) -> Self {
        let dim = normal.len();
        let n_phi = normal.clone();
        let n_grad = normal;
        Self::new(dim, move |u| n_phi.dot(u) - offset, move |_| n_grad.clone())
            .with_hessian(move |_| Matrix::zeros(dim, dim))
    }

    /// Closed ball `|u - center|^2 <= radius^2`, written as `phi = r^2 - |u - c|^2`.
    pub fn ball(center: Vector, radius: f64) -> Self {
        let dim = center.len();
        let c_phi = center.clone();
        let c_grad = center;
        Self::new(
            dim,
            move |u| radius * radius - (u - &c_phi).norm_squared(),
            move |u| (u - &c_grad) * -2.0,
        )
        .with_hessian(move |_| Matrix::identity(dim, dim) * -2.0)
    }

    /// Planar ellipse interior `1 - (x/a)^2 - (y/b)^2 >= 0`.
    pub fn ellipse(a: f64, b: f64) -> Self {
        Self::new(
            2,
            move |u| 1.0 - (u[0] / a).powi(2) - (u[1] / b).powi(2),
            move |u| Vector::from_vec(vec![-2.0 * u[0] / (a * a), -2.0 * u[1] / (b * b)]),
        )
        .with_hessian(move |_| {
            Matrix::from_diagonal(&Vector::from_vec(vec![-2.0 / (a * a), -2.0 / (b * b)]))
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self, u: &Vector) -> f64 {
        (self.phi)(u)
    }

    pub fn grad(&self, u: &Vector) -> Vector {
        (self.grad)(u)
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    pub fn hessian(&self, u: &Vector) -> Matrix {
        match &self.hessian {
            Some(h) => h(u),
            None => self.hessian_fd(u),
        }
    }

    /// Central-difference Hessian from the gradient, symmetrised.
    pub fn hessian_fd(&self, u: &Vector) -> Matrix {
        let d = self.dim;
        let step = fd_step(u);
        let mut h = Matrix::zeros(d, d);
        for j in 0..d {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += step;
            dn[j] -= step;
            let col = (self.grad(&up) - self.grad(&dn)) / (2.0 * step);
            h.set_column(j, &col);
        }
        (&h + h.transpose()) * 0.5
    }

    pub fn contains(&self, u: &Vector) -> bool {
        self.phi(u) >= 0.0
    }

    /// Registration check: the witness must lie strictly inside `K`.
    pub fn check_interior_witness(&self, witness: &Vector) -> Result<()> {
        self.check_dim(witness)?;
        let phi = self.phi(witness);
        if phi > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::NoInteriorWitness {
                at: witness.as_slice().to_vec(),
                phi,
            })
        }
    }

    pub(crate) fn check_dim(&self, u: &Vector) -> Result<()> {
        if u.len() == self.dim {
            Ok(())
        } else {
            Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                got: u.len(),
            })
        }
    }

    fn nonzero_grad(&self, x: &Vector) -> Result<Vector> {
        let g = self.grad(x);
        if g.iter().all(|c| *c == 0.0) || !g.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::DegenerateBoundary {
                at: x.as_slice().to_vec(),
            });
        }
        Ok(g)
    }
}

/// A field of symmetric positive-definite mass matrices `u -> M(u)`.
#[derive(Clone)]
pub struct MetricField {
    dim: usize,
    mass: MatrixFn,
    partial: Option<PartialFn>,
    constant: bool,
}

impl fmt::Debug for MetricField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricField")
            .field("dim", &self.dim)
            .field("constant", &self.constant)
            .field("analytic_derivative", &self.partial.is_some())
            .finish()
    }
}

impl MetricField {
    pub fn new<F>(dim: usize, mass: F) -> Self
    where
        F: Fn(&Vector) -> Matrix + Send + Sync + 'static,
    {
        Self {
            dim,
            mass: Arc::new(mass),
            partial: None,
            constant: false,
        }
    }

    pub fn constant(mass: Matrix) -> Self {
        let dim = mass.nrows();
        Self {
            dim,
            mass: Arc::new(move |_| mass.clone()),
            partial: Some(Arc::new(move |_, _| Matrix::zeros(dim, dim))),
            constant: true,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(Matrix::identity(dim, dim))
    }

    /// Analytic partial derivative `dM/du_k`.
    pub fn with_partial<F>(mut self, partial: F) -> Self
    where
        F: Fn(&Vector, usize) -> Matrix + Send + Sync + 'static,
    {
        self.partial = Some(Arc::new(partial));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    /// Raw matrix without validation.
    pub fn mass_unchecked(&self, u: &Vector) -> Matrix {
        (self.mass)(u)
    }

    /// Validated mass matrix at `u`, factored for inner products.
    pub fn at(&self, u: &Vector) -> Result<LocalMetric> {
        let mass = (self.mass)(u);
        LocalMetric::new(mass).ok_or_else(|| GeometryError::MetricDegenerate {
            at: u.as_slice().to_vec(),
        })
    }

    pub fn mass(&self, u: &Vector) -> Result<Matrix> {
        self.at(u).map(|m| m.mass)
    }

    /// `dM/du_k` at `u`, analytic if provided, otherwise central differences.
    pub fn mass_partial(&self, u: &Vector, k: usize) -> Matrix {
        match &self.partial {
            Some(p) => p(u, k),
            None => {
                let step = fd_step(u);
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k] += step;
                dn[k] -= step;
                ((self.mass)(&up) - (self.mass)(&dn)) / (2.0 * step)
            }
        }
    }

    /// Directional derivative `sum_k v_k dM/du_k`.
    pub fn mass_directional(&self, u: &Vector, v: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        for k in 0..self.dim {
            if v[k] != 0.0 {
                out += self.mass_partial(u, k) * v[k];
            }
        }
        out
    }
}

/// A mass matrix evaluated and Cholesky-factored at one point.
#[derive(Debug, Clone)]
pub struct LocalMetric {
    mass: Matrix,
    lower: Matrix,
    chol: Cholesky<f64, Dyn>,
}

impl LocalMetric {
    /// `None` when the matrix is not symmetric to [`SYMMETRY_TOL`] or not positive definite.
    pub fn new(mass: Matrix) -> Option<Self> {
        if !mass.is_square() || !mass.iter().all(|v| v.is_finite()) {
            return None;
        }
        let scale = 1.0 + mass.amax();
        if (&mass - mass.transpose()).amax() > SYMMETRY_TOL * scale {
            return None;
        }
        let chol = Cholesky::new(mass.clone())?;
        let lower = chol.l();
        Some(Self { mass, lower, chol })
    }

    pub fn mass(&self) -> &Matrix {
        &self.mass
    }

    /// Tangent vector to covector: `M x`.
    pub fn lower_index(&self, x: &Vector) -> Vector {
        &self.mass * x
    }

    /// Covector to tangent vector: `M^-1 xi`.
    pub fn raise_index(&self, xi: &Vector) -> Vector {
        self.chol.solve(xi)
    }

    pub fn tangent_inner(&self, x: &Vector, y: &Vector) -> f64 {
        let lx = self.lower.tr_mul(x);
        let ly = self.lower.tr_mul(y);
        lx.dot(&ly)
    }

    pub fn cotangent_inner(&self, xi: &Vector, eta: &Vector) -> f64 {
        let a = self.whiten(xi);
        let b = self.whiten(eta);
        a.dot(&b)
    }

    pub fn tangent_norm(&self, x: &Vector) -> f64 {
        self.lower.tr_mul(x).norm()
    }

    pub fn cotangent_norm(&self, xi: &Vector) -> f64 {
        self.whiten(xi).norm()
    }

    fn whiten(&self, xi: &Vector) -> Vector {
        self.lower
            .solve_lower_triangular(xi)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// `xi^T M(u)^-1 eta`.
pub fn cotangent_inner(metric: &MetricField, u: &Vector, xi: &Vector, eta: &Vector) -> Result<f64> {
    Ok(metric.at(u)?.cotangent_inner(xi, eta))
}

/// `x^T M(u) y`.
pub fn tangent_inner(metric: &MetricField, u: &Vector, x: &Vector, y: &Vector) -> Result<f64> {
    Ok(metric.at(u)?.tangent_inner(x, y))
}

/// Kinetic energy `1/2 <p, p>*_u`.
pub fn energy(metric: &MetricField, u: &Vector, p: &Vector) -> Result<f64> {
    let local = metric.at(u)?;
    Ok(0.5 * local.cotangent_inner(p, p))
}

/// A boundary position with its interior unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPoint {
    pub position: Vector,
    pub inward_normal: Vector,
}

/// Interior unit normal `N = M^-1 dphi / |dphi|*` at a boundary point.
pub fn inward_normal(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
) -> Result<BoundaryPoint> {
    cs.check_dim(x)?;
    let phi = cs.phi(x);
    if phi.abs() > PHI_TOL {
        return Err(GeometryError::NotOnBoundary {
            at: x.as_slice().to_vec(),
            phi,
        });
    }
    let local = metric.at(x)?;
    let n = normal_direction(cs, &local, x)?;
    Ok(BoundaryPoint {
        position: x.clone(),
        inward_normal: n,
    })
}

fn normal_direction(cs: &ConstraintSpec, local: &LocalMetric, x: &Vector) -> Result<Vector> {
    let g = cs.nonzero_grad(x)?;
    let raised = local.raise_index(&g);
    let norm = local.cotangent_norm(&g);
    Ok(raised / norm)
}

/// How the nearest boundary point is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// Minimise `(y - x)^T M(x) (y - x)` on the boundary by Newton on the KKT system.
    #[default]
    FrozenMetric,
    /// Shoot geodesics from the boundary along the outward normal until they reach `x`.
    Geodesic,
}

/// Nearest point of the boundary to `x`.
pub fn project_boundary(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
    mode: ProjectionMode,
) -> Result<BoundaryPoint> {
    cs.check_dim(x)?;
    let frozen = project_frozen(cs, metric, x)?;
    let position = match mode {
        ProjectionMode::FrozenMetric => frozen,
        ProjectionMode::Geodesic => {
            if metric.is_constant() {
                frozen
            } else {
                project_geodesic(cs, metric, x, frozen)?
            }
        }
    };
    let local = metric.at(&position)?;
    let inward_normal = normal_direction(cs, &local, &position)?;
    Ok(BoundaryPoint {
        position,
        inward_normal,
    })
}

/// Identity on `K`, boundary projection outside.
pub fn project_k(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
    mode: ProjectionMode,
) -> Result<Vector> {
    cs.check_dim(x)?;
    if cs.phi(x) >= 0.0 {
        Ok(x.clone())
    } else {
        project_boundary(cs, metric, x, mode).map(|b| b.position)
    }
}

fn projection_failure(y: &Vector, residual: f64, iterations: usize) -> GeometryError {
    GeometryError::ProjectionFailure {
        last_iterate: y.as_slice().to_vec(),
        residual,
        iterations,
    }
}

fn project_frozen(cs: &ConstraintSpec, metric: &MetricField, x: &Vector) -> Result<Vector> {
    let d = cs.dim();
    let local = metric.at(x)?;
    let a = local.mass().clone();
    let tol = NEWTON_TOL * (1.0 + x.amax());

    // Linearised start: y = x + lambda M^-1 g with phi(x) + lambda g^T M^-1 g = 0.
    let g0 = cs.nonzero_grad(x)?;
    let lambda0 = -cs.phi(x) / local.cotangent_inner(&g0, &g0);
    let mut y = x + local.raise_index(&g0) * lambda0;
    let mut lambda = lambda0;

    let residual = |y: &Vector, lambda: f64| -> (Vector, f64, f64) {
        let g = cs.grad(y);
        let r1 = &a * (y - x) - &g * lambda;
        let r2 = cs.phi(y);
        let norm = r1.amax().max(r2.abs());
        (r1, r2, norm)
    };

    let (mut r1, mut r2, mut res) = residual(&y, lambda);
    for iter in 0..MAX_NEWTON {
        if res.is_finite() && res <= tol && r2.abs() <= PHI_TOL {
            return Ok(y);
        }
        if !res.is_finite() {
            return Err(projection_failure(&y, res, iter));
        }
        let g = cs.nonzero_grad(&y)?;
        let h = cs.hessian(&y);
        let mut jac = Matrix::zeros(d + 1, d + 1);
        jac.view_mut((0, 0), (d, d)).copy_from(&(&a - h * lambda));
        for i in 0..d {
            jac[(i, d)] = -g[i];
            jac[(d, i)] = g[i];
        }
        let mut rhs = Vector::zeros(d + 1);
        for i in 0..d {
            rhs[i] = -r1[i];
        }
        rhs[d] = -r2;
        let delta = match jac.lu().solve(&rhs) {
            Some(delta) if delta.iter().all(|v| v.is_finite()) => delta,
            _ => return Err(projection_failure(&y, res, iter)),
        };
        let dy = delta.rows(0, d).into_owned();
        let dl = delta[d];

        // Backtrack on the residual norm; accept the full step when nothing improves.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let y_try = &y + &dy * alpha;
            let l_try = lambda + dl * alpha;
            let (t1, t2, n) = residual(&y_try, l_try);
            if n.is_finite() && n < res {
                accepted = Some((y_try, l_try, t1, t2, n));
                break;
            }
            alpha *= 0.5;
        }
        let (y_new, l_new, t1, t2, n) = accepted.unwrap_or_else(|| {
            let y_try = &y + &dy;
            let l_try = lambda + dl;
            let (t1, t2, n) = residual(&y_try, l_try);
            (y_try, l_try, t1, t2, n)
        });
        y = y_new;
        lambda = l_new;
        r1 = t1;
        r2 = t2;
        res = n;
    }
    if res.is_finite() && res <= tol && r2.abs() <= PHI_TOL {
        Ok(y)
    } else {
        Err(projection_failure(&y, res, MAX_NEWTON))
    }
}

/// Geodesic acceleration `-Gamma(v, v)` for the metric `M`.
fn geodesic_acceleration(metric: &MetricField, u: &Vector, v: &Vector) -> Result<Vector> {
    let d = metric.dim();
    let local = metric.at(u)?;
    let directional = metric.mass_directional(u, v);
    let mut c = &directional * v;
    for l in 0..d {
        let pl = metric.mass_partial(u, l);
        c[l] -= 0.5 * v.dot(&(&pl * v));
    }
    Ok(-local.raise_index(&c))
}

/// Endpoint at unit time of the geodesic with initial data `(start, velocity)`, RK4.
pub fn geodesic_endpoint(
    metric: &MetricField,
    start: &Vector,
    velocity: &Vector,
) -> Result<Vector> {
    let dt = 1.0 / GEODESIC_RK_STEPS as f64;
    let mut u = start.clone();
    let mut v = velocity.clone();
    for _ in 0..GEODESIC_RK_STEPS {
        let k1u = v.clone();
        let k1v = geodesic_acceleration(metric, &u, &v)?;
        let u2 = &u + &k1u * (dt / 2.0);
        let v2 = &v + &k1v * (dt / 2.0);
        let k2v = geodesic_acceleration(metric, &u2, &v2)?;
        let u3 = &u + &v2 * (dt / 2.0);
        let v3 = &v + &k2v * (dt / 2.0);
        let k3v = geodesic_acceleration(metric, &u3, &v3)?;
        let u4 = &u + &v3 * dt;
        let v4 = &v + &k3v * dt;
        let k4v = geodesic_acceleration(metric, &u4, &v4)?;
        u += (k1u + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
        v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
    }
    Ok(u)
}

/// Shooting residual: `(gamma(1) - x, phi(y))` for boundary guess `y` and signed length `s`.
fn shooting_residual(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
    q: &Vector,
) -> Result<Vector> {
    let d = cs.dim();
    let y = q.rows(0, d).into_owned();
    let s = q[d];
    let local = metric.at(&y)?;
    let n = normal_direction(cs, &local, &y)?;
    let end = geodesic_endpoint(metric, &y, &(n * -s))?;
    let mut r = Vector::zeros(d + 1);
    r.rows_mut(0, d).copy_from(&(end - x));
    r[d] = cs.phi(&y);
    Ok(r)
}

fn project_geodesic(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
    start: Vector,
) -> Result<Vector> {
    let d = cs.dim();
    let tol = NEWTON_TOL * (1.0 + x.amax());
    let local = metric.at(&start)?;
    let mut s = local.tangent_norm(&(x - &start));
    if cs.phi(x) > 0.0 {
        s = -s;
    }
    let mut q = Vector::zeros(d + 1);
    q.rows_mut(0, d).copy_from(&start);
    q[d] = s;

    let mut r = shooting_residual(cs, metric, x, &q)?;
    for iter in 0..MAX_NEWTON {
        let res = r.amax();
        if res <= tol {
            return Ok(q.rows(0, d).into_owned());
        }
        if !res.is_finite() {
            return Err(projection_failure(&q.rows(0, d).into_owned(), res, iter));
        }
        let step = 1e-7 * (1.0 + q.amax());
        let mut jac = Matrix::zeros(d + 1, d + 1);
        for j in 0..=d {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += step;
            qm[j] -= step;
            let col = (shooting_residual(cs, metric, x, &qp)?
                - shooting_residual(cs, metric, x, &qm)?)
                / (2.0 * step);
            jac.set_column(j, &col);
        }
        let delta = match jac.lu().solve(&(-&r)) {
            Some(delta) if delta.iter().all(|v| v.is_finite()) => delta,
            _ => return Err(projection_failure(&q.rows(0, d).into_owned(), res, iter)),
        };
        q += delta;
        r = shooting_residual(cs, metric, x, &q)?;
    }
    let res = r.amax();
    if res <= tol {
        Ok(q.rows(0, d).into_owned())
    } else {
        Err(projection_failure(
            &q.rows(0, d).into_owned(),
            res,
            MAX_NEWTON,
        ))
    }
}

/// Squared distance from `x` to `y` measured with the metric frozen at `x`.
pub fn frozen_distance(metric: &MetricField, x: &Vector, y: &Vector) -> Result<f64> {
    Ok(metric.at(x)?.tangent_norm(&(y - x)))
}

/// Riemannian length of the straight segment from `a` to `b` (Gauss-Legendre, 5 nodes per panel).
pub fn segment_length(metric: &MetricField, a: &Vector, b: &Vector, panels: usize) -> Result<f64> {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let panels = panels.max(1);
    let dir = b - a;
    let width = 1.0 / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * width;
        for (node, weight) in NODES.iter().zip(WEIGHTS) {
            let s = mid + 0.5 * width * node;
            let u = a + &dir * s;
            total += 0.5 * width * weight * metric.at(&u)?.tangent_norm(&dir);
        }
    }
    Ok(total)
}

/// Normal and tangential parts of a covector at a boundary point.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseParts {
    /// Component along `dphi(x)`.
    pub normal: Vector,
    /// Component cotangent-orthogonal to `dphi(x)`.
    pub tangential: Vector,
    /// Signed coefficient `c` with `normal = c dphi(x)`.
    pub normal_coefficient: f64,
}

/// Split `p = p_N + p_T` with `p_N` in `span{dphi(x)}` and `<p_T, dphi(x)>* = 0`.
pub fn decompose_impulse(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
    p: &Vector,
) -> Result<ImpulseParts> {
    cs.check_dim(x)?;
    let local = metric.at(x)?;
    let g = cs.nonzero_grad(x)?;
    Ok(split_on(&local, &g, p))
}

fn split_on(local: &LocalMetric, g: &Vector, p: &Vector) -> ImpulseParts {
    let c = local.cotangent_inner(g, p) / local.cotangent_inner(g, g);
    let normal = g * c;
    let tangential = p - &normal;
    ImpulseParts {
        normal,
        tangential,
        normal_coefficient: c,
    }
}

/// Result of applying the restitution law to an impulsion.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactOutcome {
    pub p_plus: Vector,
    /// `false` when `p_minus` was not incoming and was returned unchanged.
    pub impacting: bool,
}

/// Newton restitution: reverse the normal part of `p_minus` scaled by `e`, keep the tangential part.
pub fn impact_map(
    cs: &ConstraintSpec,
    metric: &MetricField,
    x: &Vector,
    p_minus: &Vector,
    e: f64,
) -> Result<ImpactOutcome> {
    if !(0.0..=1.0).contains(&e) {
        return Err(GeometryError::InvalidRestitution(e));
    }
    cs.check_dim(x)?;
    let local = metric.at(x)?;
    let g = cs.nonzero_grad(x)?;
    let along = local.cotangent_inner(&g, p_minus);
    if along > 0.0 {
        return Ok(ImpactOutcome {
            p_plus: p_minus.clone(),
            impacting: false,
        });
    }
    let coefficient = (1.0 + e) * along / local.cotangent_inner(&g, &g);
    Ok(ImpactOutcome {
        p_plus: p_minus - g * coefficient,
        impacting: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn m2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
        Matrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    fn wall() -> ConstraintSpec {
        ConstraintSpec::half_space(v(&[0.0, 1.0]), 0.0)
    }

    fn disk() -> ConstraintSpec {
        ConstraintSpec::ball(v(&[0.0, 0.0]), 1.0)
    }

    #[test]
    fn cotangent_inner_euclidean_and_diagonal() {
        let id = MetricField::identity(2);
        let r = cotangent_inner(&id, &v(&[0.0, 0.0]), &v(&[3.0, 4.0]), &v(&[3.0, 4.0])).unwrap();
        assert_abs_diff_eq!(r, 25.0, epsilon = 1e-14);
        let diag = MetricField::constant(m2(4.0, 0.0, 0.0, 1.0));
        let r = cotangent_inner(&diag, &v(&[0.0, 0.0]), &v(&[2.0, 0.0]), &v(&[2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn cotangent_inner_against_explicit_inverse() {
        // [[2,1],[1,2]]^-1 = 1/3 [[2,-1],[-1,2]]
        let metric = MetricField::constant(m2(2.0, 1.0, 1.0, 2.0));
        let xi = v(&[1.0, 1.0]);
        let inv = m2(2.0, -1.0, -1.0, 2.0) / 3.0;
        let expected = xi.dot(&(inv * &xi));
        let r = cotangent_inner(&metric, &v(&[0.0, 0.0]), &xi, &xi).unwrap();
        assert_abs_diff_eq!(r, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(r, 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn cotangent_norm_of_lowered_vector_is_tangent_norm() {
        let metric = MetricField::constant(m2(3.0, 0.5, 0.5, 1.5));
        let local = metric.at(&v(&[0.0, 0.0])).unwrap();
        let vel = v(&[0.7, -1.3]);
        let p = local.lower_index(&vel);
        assert_abs_diff_eq!(
            local.cotangent_norm(&p),
            local.tangent_norm(&vel),
            epsilon = 1e-10
        );
    }

    #[test]
    fn degenerate_metric_is_reported() {
        let metric = MetricField::constant(m2(1.0, 2.0, 2.0, 1.0));
        let err = cotangent_inner(&metric, &v(&[0.5, 0.0]), &v(&[1.0, 0.0]), &v(&[1.0, 0.0]))
            .unwrap_err();
        assert_eq!(err, GeometryError::MetricDegenerate { at: vec![0.5, 0.0] });
        let asym = MetricField::constant(m2(1.0, 0.1, 0.0, 1.0));
        assert!(asym.at(&v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn normals() {
        let half_line = ConstraintSpec::half_space(v(&[1.0]), 0.0);
        let b = inward_normal(&half_line, &MetricField::identity(1), &v(&[0.0])).unwrap();
        assert_abs_diff_eq!(b.inward_normal[0], 1.0);

        let b = inward_normal(&disk(), &MetricField::identity(2), &v(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(b.inward_normal, v(&[-1.0, 0.0]), epsilon = 1e-14);

        // M = diag(4,1): M^-1 dphi = (-1/2, 0), |.|_x = sqrt(4 * 1/4) = 1 so N = (-1/2, 0).
        let metric = MetricField::constant(m2(4.0, 0.0, 0.0, 1.0));
        let b = inward_normal(&disk(), &metric, &v(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(b.inward_normal, v(&[-0.5, 0.0]), epsilon = 1e-14);
        let local = metric.at(&v(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(local.tangent_norm(&b.inward_normal), 1.0, epsilon = 1e-12);
        // tangent direction at (1,0) is (0,1)
        assert_abs_diff_eq!(local.tangent_inner(&v(&[0.0, 1.0]), &b.inward_normal), 0.0);
        assert!(disk().phi(&(v(&[1.0, 0.0]) + &b.inward_normal * 1e-4)) > 0.0);
    }

    #[test]
    fn normal_errors() {
        let flat = ConstraintSpec::new(2, |u| u[1], |_| v(&[0.0, 0.0]));
        assert!(matches!(
            inward_normal(&flat, &MetricField::identity(2), &v(&[0.0, 0.0])),
            Err(GeometryError::DegenerateBoundary { .. })
        ));
        assert!(matches!(
            inward_normal(&disk(), &MetricField::identity(2), &v(&[0.5, 0.0])),
            Err(GeometryError::NotOnBoundary { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let half_line = ConstraintSpec::half_space(v(&[1.0]), 0.0);
        let id1 = MetricField::identity(1);
        let b =
            project_boundary(&half_line, &id1, &v(&[-0.3]), ProjectionMode::FrozenMetric).unwrap();
        assert_abs_diff_eq!(b.position[0], 0.0, epsilon = 1e-15);
        let y = project_k(&half_line, &id1, &v(&[-1.0]), ProjectionMode::FrozenMetric).unwrap();
        assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-15);

        let id2 = MetricField::identity(2);
        let b =
            project_boundary(&disk(), &id2, &v(&[2.0, 0.0]), ProjectionMode::FrozenMetric).unwrap();
        assert_abs_diff_eq!(b.position, v(&[1.0, 0.0]), epsilon = 1e-12);

        let y = project_k(
            &wall(),
            &id2,
            &v(&[3.0, -2.0]),
            ProjectionMode::FrozenMetric,
        )
        .unwrap();
        assert_abs_diff_eq!(y, v(&[3.0, 0.0]), epsilon = 1e-15);

        let inside = v(&[0.1, 0.2]);
        assert!(disk().phi(&inside) > 0.0);
        let y = project_k(&disk(), &id2, &inside, ProjectionMode::FrozenMetric).unwrap();
        assert_eq!(y, inside);
    }

    #[test]
    fn ellipse_projection_matches_boundary_sampling() {
        let (a, b) = (2.0, 1.0);
        let cs = ConstraintSpec::ellipse(a, b);
        let id = MetricField::identity(2);
        let x = v(&[1.7, 1.1]);
        let y = project_boundary(&cs, &id, &x, ProjectionMode::FrozenMetric)
            .unwrap()
            .position;

        // Dense boundary grid, then golden-section refinement around the best sample.
        let dist = |theta: f64| {
            ((a * theta.cos() - x[0]).powi(2) + (b * theta.sin() - x[1]).powi(2)).sqrt()
        };
        let n = 200_000;
        let (mut best, mut best_d) = (0.0, f64::INFINITY);
        for i in 0..n {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            let d = dist(th);
            if d < best_d {
                best_d = d;
                best = th;
            }
        }
        let (mut lo, mut hi) = (best - 1e-4, best + 1e-4);
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = hi - gr * (hi - lo);
            let d = lo + gr * (hi - lo);
            if dist(c) < dist(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        let th = 0.5 * (lo + hi);
        assert_abs_diff_eq!(y, v(&[a * th.cos(), b * th.sin()]), epsilon = 1e-6);
    }

    #[test]
    fn geodesic_mode_agrees_with_frozen_for_constant_metric() {
        let metric = MetricField::constant(m2(2.0, 0.3, 0.3, 1.0));
        let x = v(&[1.3, 0.4]);
        let f = project_boundary(&disk(), &metric, &x, ProjectionMode::FrozenMetric).unwrap();
        let g = project_boundary(&disk(), &metric, &x, ProjectionMode::Geodesic).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn geodesic_projection_on_variable_metric() {
        let metric = MetricField::new(2, |u| m2(1.0 + u[0] * u[0], 0.0, 0.0, 1.0));
        let x = v(&[0.8, -0.05]);
        let frozen = project_boundary(&wall(), &metric, &x, ProjectionMode::FrozenMetric).unwrap();
        let geo = project_boundary(&wall(), &metric, &x, ProjectionMode::Geodesic).unwrap();
        assert!(wall().phi(&geo.position).abs() <= PHI_TOL);
        // The geodesic from the foot along -N reaches x.
        let local = metric.at(&geo.position).unwrap();
        let s = local.tangent_norm(&(&x - &geo.position));
        let end = geodesic_endpoint(&metric, &geo.position, &(&geo.inward_normal * -s)).unwrap();
        assert_abs_diff_eq!(end, x.clone(), epsilon = 1e-8);
        // The two modes differ at second order in the distance.
        let gap = (&geo.position - &frozen.position).norm();
        assert!(gap <= 10.0 * 0.05 * 0.05, "gap {gap}");
    }

    #[test]
    fn finite_difference_hessian_matches_analytic() {
        let cs = ConstraintSpec::ellipse(2.0, 1.0);
        let u = v(&[0.3, -0.7]);
        assert_abs_diff_eq!(cs.hessian(&u), cs.hessian_fd(&u), epsilon = 1e-6);
    }

    #[test]
    fn decompose_examples() {
        let id = MetricField::identity(2);
        let x = v(&[0.0, 0.0]);
        let parts = decompose_impulse(&wall(), &id, &x, &v(&[1.0, -2.0])).unwrap();
        assert_abs_diff_eq!(parts.normal, v(&[0.0, -2.0]), epsilon = 1e-15);
        assert_abs_diff_eq!(parts.tangential, v(&[1.0, 0.0]), epsilon = 1e-15);

        let parts = decompose_impulse(&wall(), &id, &x, &v(&[0.0, 3.0])).unwrap();
        assert_abs_diff_eq!(parts.tangential, v(&[0.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn decompose_against_linear_solve() {
        // p = a g + t with g^T M^-1 t = 0, unknowns (t1, t2, a).
        let mass = m2(2.0, 1.0, 1.0, 2.0);
        let metric = MetricField::constant(mass.clone());
        let g = v(&[0.0, 1.0]);
        let p = v(&[1.0, -2.0]);
        let minv = mass.try_inverse().unwrap();
        let w = minv.transpose() * &g;
        let sys = Matrix::from_row_slice(3, 3, &[1.0, 0.0, g[0], 0.0, 1.0, g[1], w[0], w[1], 0.0]);
        let sol = sys.lu().solve(&v(&[p[0], p[1], 0.0])).unwrap();
        let parts = decompose_impulse(&wall(), &metric, &v(&[0.0, 0.0]), &p).unwrap();
        assert_abs_diff_eq!(parts.tangential, v(&[sol[0], sol[1]]), epsilon = 1e-12);
        assert_abs_diff_eq!(parts.normal, &g * sol[2], epsilon = 1e-12);
        let local = metric.at(&v(&[0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(
            local.cotangent_inner(&parts.tangential, &g),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn impact_examples() {
        let half_line = ConstraintSpec::half_space(v(&[1.0]), 0.0);
        let id1 = MetricField::identity(1);
        let out = impact_map(&half_line, &id1, &v(&[0.0]), &v(&[-3.0]), 0.5).unwrap();
        assert!(out.impacting);
        assert_abs_diff_eq!(out.p_plus[0], 1.5);

        let id = MetricField::identity(2);
        let x = v(&[0.0, 0.0]);
        let out = impact_map(&wall(), &id, &x, &v(&[1.0, -2.0]), 1.0).unwrap();
        assert_abs_diff_eq!(out.p_plus, v(&[1.0, 2.0]));
        let out = impact_map(&wall(), &id, &x, &v(&[1.0, -2.0]), 0.0).unwrap();
        assert_abs_diff_eq!(out.p_plus, v(&[1.0, 0.0]));

        let out = impact_map(&wall(), &id, &x, &v(&[1.0, 2.0]), 0.5).unwrap();
        assert!(!out.impacting);
        assert_eq!(out.p_plus, v(&[1.0, 2.0]));

        assert_eq!(
            impact_map(&wall(), &id, &x, &v(&[1.0, -2.0]), 1.5),
            Err(GeometryError::InvalidRestitution(1.5))
        );
    }
}
