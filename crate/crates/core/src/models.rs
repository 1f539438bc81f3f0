//! Named benchmark problems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ConstraintSpec, GeometryError, MetricField};
use crate::oracle::ClosedFormBall;
use crate::scheme::{ForceModel, InitialData, SchemeError};
use crate::{Matrix, Vector};

/// Gravity used by the benchmarks unless overridden (m/s^2).
pub const DEFAULT_GRAVITY: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A constraint, metric, force and initial state wired into one problem.
#[derive(Debug, Clone)]
pub struct ModelDescriptor {
    pub name: &'static str,
    pub dim: usize,
    pub constraint: ConstraintSpec,
    pub metric: MetricField,
    pub force: ForceModel,
    pub initial: InitialData,
    pub restitution: f64,
    pub closed_form: Option<ClosedFormBall>,
    interior_witness: Vector,
}

impl ModelDescriptor {
    pub fn has_closed_form(&self) -> bool {
        self.closed_form.is_some()
    }

    /// Interior witness, SPD metric near the start and admissible initial data.
    fn validated(self) -> Result<Self> {
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(GeometryError::InvalidRestitution(self.restitution).into());
        }
        for len in [
            self.constraint.dim(),
            self.metric.dim(),
            self.initial.u0.len(),
            self.initial.p0.len(),
        ] {
            if len != self.dim {
                return Err(GeometryError::DimensionMismatch {
                    expected: self.dim,
                    got: len,
                }
                .into());
            }
        }
        self.constraint
            .check_interior_witness(&self.interior_witness)?;
        for k in 0..self.dim {
            for offset in [-1.0, 1.0] {
                let mut u = self.initial.u0.clone();
                u[k] += offset;
                self.metric.at(&u)?;
            }
        }
        self.metric.at(&self.initial.u0)?;
        self.initial
            .check_admissible(&self.constraint, &self.metric)?;
        Ok(self)
    }
}

/// Ball on the half-line `u >= 0`, unit mass, constant gravity.
pub fn bouncing_ball(u0: f64, v0: f64, g: f64, e: f64) -> Result<ModelDescriptor> {
    if u0.is_nan() || u0 < 0.0 {
        return Err(ModelError::Parameter(format!(
            "drop height u0 = {u0} must be >= 0"
        )));
    }
    if g.is_nan() || g <= 0.0 {
        return Err(ModelError::Parameter(format!(
            "gravity g = {g} must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&e) {
        return Err(GeometryError::InvalidRestitution(e).into());
    }
    ModelDescriptor {
        name: "bouncing-ball",
        dim: 1,
        constraint: ConstraintSpec::half_space(Vector::from_element(1, 1.0), 0.0),
        metric: MetricField::identity(1),
        force: ForceModel::constant(Vector::from_element(1, -g)),
        initial: InitialData::new(
            0.0,
            Vector::from_element(1, u0),
            Vector::from_element(1, v0),
        ),
        restitution: e,
        closed_form: Some(ClosedFormBall::new(u0, v0, g, e)),
        interior_witness: Vector::from_element(1, u0.max(1.0)),
    }
    .validated()
}

/// Free particle in the disk of the given radius, launched from the centre.
pub fn disk_billiard(radius: f64, speed: f64, angle: f64, e: f64) -> Result<ModelDescriptor> {
    disk_billiard_from([0.0, 0.0], radius, speed, angle, e)
}

/// Free particle in the disk, launched from a strictly interior `start`.
pub fn disk_billiard_from(
    start: [f64; 2],
    radius: f64,
    speed: f64,
    angle: f64,
    e: f64,
) -> Result<ModelDescriptor> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(ModelError::Parameter(format!(
            "radius = {radius} must be positive"
        )));
    }
    let u0 = Vector::from_column_slice(&start);
    if u0.norm() >= radius {
        return Err(ModelError::Parameter(format!(
            "start {start:?} must lie strictly inside the disk of radius {radius}"
        )));
    }
    let v0 = Vector::from_vec(vec![speed * angle.cos(), speed * angle.sin()]);
    ModelDescriptor {
        name: "disk-billiard",
        dim: 2,
        constraint: ConstraintSpec::ball(Vector::zeros(2), radius),
        metric: MetricField::identity(2),
        force: ForceModel::zero(2),
        initial: InitialData::new(0.0, u0, v0),
        restitution: e,
        closed_form: None,
        interior_witness: Vector::zeros(2),
    }
    .validated()
}

/// Parameters of [`variable_mass_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariableMassParams {
    pub g: f64,
    /// Viscous term `-damping * p` added to gravity.
    pub damping: f64,
    pub u0: [f64; 2],
    pub v0: [f64; 2],
}

impl Default for VariableMassParams {
    fn default() -> Self {
        Self {
            g: DEFAULT_GRAVITY,
            damping: 0.0,
            u0: [0.0, 1.0],
            v0: [1.0, 0.0],
        }
    }
}

/// Mass matrix `diag(1 + u1^2, 1)` of the variable-mass model.
pub fn variable_mass_metric() -> MetricField {
    MetricField::new(2, |u| {
        Matrix::from_diagonal(&Vector::from_vec(vec![1.0 + u[0] * u[0], 1.0]))
    })
    .with_partial(|u, k| {
        let mut m = Matrix::zeros(2, 2);
        if k == 0 {
            m[(0, 0)] = 2.0 * u[0];
        }
        m
    })
}

/// Floor `u2 >= 0` with position-dependent mass `diag(1 + u1^2, 1)` and gravity along `-u2`.
pub fn variable_mass(e: f64) -> Result<ModelDescriptor> {
    variable_mass_with(VariableMassParams::default(), e)
}

pub fn variable_mass_with(params: VariableMassParams, e: f64) -> Result<ModelDescriptor> {
    let metric = variable_mass_metric();
    let VariableMassParams { g, damping, u0, v0 } = params;
    if damping.is_nan() || damping < 0.0 {
        return Err(ModelError::Parameter(format!(
            "damping = {damping} must be >= 0"
        )));
    }
    let gravity = Vector::from_vec(vec![0.0, -g]);
    let force = if damping == 0.0 {
        ForceModel::constant(gravity)
    } else {
        ForceModel::new(move |_, _, p| &gravity - p * damping, true)
    };
    let initial = InitialData::from_velocity(
        &metric,
        0.0,
        Vector::from_column_slice(&u0),
        &Vector::from_column_slice(&v0),
    )?;
    ModelDescriptor {
        name: "variable-mass",
        dim: 2,
        constraint: ConstraintSpec::half_space(Vector::from_vec(vec![0.0, 1.0]), 0.0),
        metric,
        force,
        initial,
        restitution: e,
        closed_form: None,
        interior_witness: Vector::from_vec(vec![0.0, 1.0]),
    }
    .validated()
}

/// Parameters of [`wall`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallParams {
    pub g: f64,
    pub u0: [f64; 2],
    pub v0: [f64; 2],
}

impl Default for WallParams {
    fn default() -> Self {
        Self {
            g: 0.0,
            u0: [0.0, 0.5],
            v0: [1.0, -2.0],
        }
    }
}

/// Planar half-plane `u2 >= 0`, identity mass, optional gravity along `-u2`.
pub fn wall(params: WallParams, e: f64) -> Result<ModelDescriptor> {
    let WallParams { g, u0, v0 } = params;
    ModelDescriptor {
        name: "wall",
        dim: 2,
        constraint: ConstraintSpec::half_space(Vector::from_vec(vec![0.0, 1.0]), 0.0),
        metric: MetricField::identity(2),
        force: ForceModel::constant(Vector::from_vec(vec![0.0, -g])),
        initial: InitialData::new(
            0.0,
            Vector::from_column_slice(&u0),
            Vector::from_column_slice(&v0),
        ),
        restitution: e,
        closed_form: None,
        interior_witness: Vector::from_vec(vec![0.0, 1.0]),
    }
    .validated()
}

/// Model selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ModelSpec {
    BouncingBall(BallParams),
    DiskBilliard(BilliardParams),
    VariableMass(VariableMassParams),
    Wall(WallParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallParams {
    pub u0: f64,
    pub v0: f64,
    pub g: f64,
}

impl Default for BallParams {
    fn default() -> Self {
        Self {
            u0: 1.0,
            v0: 0.0,
            g: DEFAULT_GRAVITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilliardParams {
    pub radius: f64,
    pub speed: f64,
    pub angle: f64,
    pub start: [f64; 2],
}

impl Default for BilliardParams {
    fn default() -> Self {
        Self {
            radius: 1.0,
            speed: 1.0,
            angle: 0.0,
            start: [0.0, 0.0],
        }
    }
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::BouncingBall(_) => "bouncing-ball",
            ModelSpec::DiskBilliard(_) => "disk-billiard",
            ModelSpec::VariableMass(_) => "variable-mass",
            ModelSpec::Wall(_) => "wall",
        }
    }

    /// Build the descriptor with restitution `e`.
    pub fn build(&self, e: f64) -> Result<ModelDescriptor> {
        match *self {
            ModelSpec::BouncingBall(BallParams { u0, v0, g }) => bouncing_ball(u0, v0, g, e),
            ModelSpec::DiskBilliard(BilliardParams {
                radius,
                speed,
                angle,
                start,
            }) => disk_billiard_from(start, radius, speed, angle, e),
            ModelSpec::VariableMass(params) => variable_mass_with(params, e),
            ModelSpec::Wall(params) => wall(params, e),
        }
    }
}

/// Registered model names with a one-line description.
pub fn catalog() -> &'static [(&'static str, &'static str)] {
    &[
        (
            "bouncing-ball",
            "d=1, phi(u)=u, M=1, f=-g; closed form available (params: u0, v0, g)",
        ),
        (
            "disk-billiard",
            "d=2, phi=R^2-|u|^2, M=I, f=0 (params: radius, speed, angle, start)",
        ),
        (
            "variable-mass",
            "d=2, phi=u2, M=diag(1+u1^2, 1), f=(0,-g)-damping*p (params: g, damping, u0, v0)",
        ),
        ("wall", "d=2, phi=u2, M=I, f=(0,-g) (params: g, u0, v0)"),
    ]
}
