//! Implicit projection time stepper.
//!
//! Given `U^{m-1}` and `U^m`, the next position is
//!
//! ```text
//! W^m     = (2 U^m - (1 - e) U^{m-1} + h^2 F^m) / (1 + e)
//! Z^m     = P_K(W^m)
//! U^{m+1} = -e U^{m-1} + (1 + e) Z^m
//! F^m     = F(t_m, U^m, U^{m-1}, (U^{m+1} - U^{m-1}) / 2h, h)
//! ```
//!
//! `F^m` depends on the unknown `U^{m+1}` through the centred velocity, so each
//! step is a fixed point in the discrete velocity `V^m = (U^{m+1} - U^m) / h`,
//! solved by Picard iteration seeded with `V^{m-1}`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, ConstraintSpec, GeometryError, MetricField, ProjectionMode, PHI_TOL};
use crate::Vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemeError {
    #[error("invalid scheme configuration: {0}")]
    Config(String),
    #[error("inadmissible initial data: {0}")]
    Inadmissible(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(
        "step {step}: fixed point did not converge in {iterations} iterations \
         (last increment {last_increment:e}, contraction estimate {contraction:.3}); \
         try a smaller time step"
    )]
    StepFailure {
        step: usize,
        iterations: usize,
        last_increment: f64,
        contraction: f64,
    },
    #[error("step {step}: {source}")]
    StepGeometry {
        step: usize,
        #[source]
        source: GeometryError,
    },
}

pub type Result<T> = std::result::Result<T, SchemeError>;

type ForceFn = Arc<dyn Fn(f64, &Vector, &Vector) -> Vector + Send + Sync>;
type DiscreteFn = Arc<dyn Fn(f64, &Vector, &Vector, &Vector, f64) -> Vector + Send + Sync>;

/// Whether the discrete acceleration is derived from the continuous force.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyMode {
    AutoDerived,
    Custom,
}

/// The generalized force `f(t, u, p)` and its discrete acceleration `F(t, u, u_prev, v, h)`.
#[derive(Clone)]
pub struct ForceModel {
    force: ForceFn,
    discrete: Option<DiscreteFn>,
    velocity_dependent: bool,
}

impl fmt::Debug for ForceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForceModel")
            .field("consistency_mode", &self.consistency_mode())
            .field("velocity_dependent", &self.velocity_dependent)
            .finish()
    }
}

impl ForceModel {
    /// `velocity_dependent = false` promises that neither `f` nor `F` reads its
    /// impulsion/velocity argument; the step fixed point is then solved in one pass.
    pub fn new<F>(force: F, velocity_dependent: bool) -> Self
    where
        F: Fn(f64, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    {
        Self {
            force: Arc::new(force),
            discrete: None,
            velocity_dependent,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(move |_, _, _| Vector::zeros(dim), false)
    }

    pub fn constant(value: Vector) -> Self {
        Self::new(move |_, _, _| value.clone(), false)
    }

    /// Replace the derived discrete acceleration by a custom one.
    pub fn with_discrete<F>(mut self, discrete: F) -> Self
    where
        F: Fn(f64, &Vector, &Vector, &Vector, f64) -> Vector + Send + Sync + 'static,
    {
        self.discrete = Some(Arc::new(discrete));
        self
    }

    pub fn consistency_mode(&self) -> ConsistencyMode {
        if self.discrete.is_some() {
            ConsistencyMode::Custom
        } else {
            ConsistencyMode::AutoDerived
        }
    }

    pub fn is_velocity_dependent(&self) -> bool {
        self.velocity_dependent
    }

    pub fn force(&self, t: f64, u: &Vector, p: &Vector) -> Vector {
        (self.force)(t, u, p)
    }

    /// Continuous acceleration `M(u)^-1 f(t, u, M(u) v)`.
    pub fn acceleration(
        &self,
        metric: &MetricField,
        t: f64,
        u: &Vector,
        v: &Vector,
    ) -> Result<Vector> {
        let local = metric.at(u)?;
        let p = local.lower_index(v);
        Ok(local.raise_index(&self.force(t, u, &p)))
    }

    /// Discrete acceleration `F(t, u, u_prev, v, h)`.
    pub fn discrete(
        &self,
        metric: &MetricField,
        t: f64,
        u: &Vector,
        u_prev: &Vector,
        v: &Vector,
        h: f64,
    ) -> Result<Vector> {
        match &self.discrete {
            Some(f) => Ok(f(t, u, u_prev, v, h)),
            None => self.acceleration(metric, t, u, v),
        }
    }

    /// Largest deviation `|F(t,u,u,v,0) - M^-1 f(t,u,Mv)|` over the given samples.
    pub fn consistency_defect(
        &self,
        metric: &MetricField,
        samples: &[(f64, Vector, Vector)],
    ) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (t, u, v) in samples {
            let lhs = self.discrete(metric, *t, u, u, v, 0.0)?;
            let rhs = self.acceleration(metric, *t, u, v)?;
            worst = worst.max((lhs - rhs).amax());
        }
        Ok(worst)
    }
}

/// Choice of the start-up correction `z(h)` in `U^1 = u0 + h M^-1 p0 + h z(h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZInit {
    /// `z(h) = (h/2) M(u0)^-1 f(t0, u0, p0)`.
    #[default]
    HalfStepForce,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub h: f64,
    pub e: f64,
    pub t0: f64,
    pub t_end: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub projection_mode: ProjectionMode,
    pub z_init: ZInit,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            e: 0.5,
            t0: 0.0,
            t_end: 1.0,
            fp_tol: 1e-10,
            fp_max_iter: 50,
            projection_mode: ProjectionMode::FrozenMetric,
            z_init: ZInit::HalfStepForce,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SchemeError::Config(msg));
        if !(self.h.is_finite() && self.h > 0.0) {
            return bad(format!("h = {} must be positive", self.h));
        }
        if !(0.0..=1.0).contains(&self.e) {
            return bad(format!("restitution e = {} must lie in [0, 1]", self.e));
        }
        if !(self.fp_tol > 0.0 && self.fp_tol <= 1e-6) {
            return bad(format!("fp_tol = {:e} must lie in (0, 1e-6]", self.fp_tol));
        }
        if self.fp_max_iter == 0 {
            return bad("fp_max_iter must be at least 1".into());
        }
        if !(self.t0.is_finite() && self.t_end.is_finite()) || self.t_end < self.t0 {
            return bad(format!(
                "horizon [{}, {}] is empty or not finite",
                self.t0, self.t_end
            ));
        }
        Ok(())
    }

    /// Number of grid intervals `floor((t_end - t0) / h)`, robust to representation error.
    pub fn step_count(&self) -> usize {
        let ratio = (self.t_end - self.t0) / self.h;
        (ratio * (1.0 + 1e-12)).floor().max(0.0) as usize
    }

    /// `t_m = t0 + m h`.
    pub fn time(&self, m: usize) -> f64 {
        self.t0 + m as f64 * self.h
    }
}

/// Initial time, position and impulsion.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub t0: f64,
    pub u0: Vector,
    pub p0: Vector,
}

impl InitialData {
    pub fn new(t0: f64, u0: Vector, p0: Vector) -> Self {
        Self { t0, u0, p0 }
    }

    /// Build from an initial velocity, lowering it with `M(u0)`.
    pub fn from_velocity(metric: &MetricField, t0: f64, u0: Vector, v0: &Vector) -> Result<Self> {
        let p0 = metric.at(&u0)?.lower_index(v0);
        Ok(Self { t0, u0, p0 })
    }

    /// `u0` in `K`; on the boundary the impulsion must not point outward.
    pub fn check_admissible(&self, cs: &ConstraintSpec, metric: &MetricField) -> Result<()> {
        if self.u0.len() != cs.dim() || self.p0.len() != cs.dim() {
            return Err(SchemeError::Inadmissible(format!(
                "dimension {} / {} does not match constraint dimension {}",
                self.u0.len(),
                self.p0.len(),
                cs.dim()
            )));
        }
        let phi = cs.phi(&self.u0);
        if phi < -PHI_TOL {
            return Err(SchemeError::Inadmissible(format!(
                "u0 outside K: phi(u0) = {phi:e} < 0"
            )));
        }
        if phi <= PHI_TOL {
            let g = cs.grad(&self.u0);
            let along = geometry::cotangent_inner(metric, &self.u0, &self.p0, &g)?;
            if along < -1e-12 {
                return Err(SchemeError::Inadmissible(format!(
                    "u0 on the boundary with incoming impulsion: <p0, dphi(u0)>* = {along:e} < 0"
                )));
            }
        }
        Ok(())
    }
}

/// The rolling pair `(U^{m-1}, U^m)` plus the last discrete velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeState {
    pub m: usize,
    pub t: f64,
    pub u_prev: Vector,
    pub u_curr: Vector,
    /// `V^{m-1} = (U^m - U^{m-1}) / h`.
    pub v_prev: Vector,
}

/// Per-step record of the projection step that produced `U^{m+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub m: usize,
    pub w: Vector,
    pub z: Vector,
    /// `V^m`.
    pub v: Vector,
    /// `M(Z) (1 + e)(Z - W) / h`, a covector.
    pub reaction_impulse: Vector,
    /// Cotangent norm of the reaction impulse at `Z`.
    pub reaction_norm: f64,
    pub fp_iters: usize,
    /// `W` fell outside `K`.
    pub active: bool,
}

/// `U^0 = u0`, `U^1 = u0 + h M^-1 p0 + h z(h)`.
pub fn init_first_steps(
    data: &InitialData,
    cfg: &SchemeConfig,
    force: &ForceModel,
    metric: &MetricField,
    cs: &ConstraintSpec,
) -> Result<SchemeState> {
    cfg.validate()?;
    data.check_admissible(cs, metric)?;
    let h = cfg.h;
    let local = metric.at(&data.u0)?;
    let v0 = local.raise_index(&data.p0);
    let z = match cfg.z_init {
        ZInit::Zero => Vector::zeros(data.u0.len()),
        ZInit::HalfStepForce => {
            local.raise_index(&force.force(data.t0, &data.u0, &data.p0)) * (h / 2.0)
        }
    };
    let u1 = &data.u0 + (v0 + z) * h;
    let v_prev = (&u1 - &data.u0) / h;
    Ok(SchemeState {
        m: 1,
        t: data.t0 + h,
        u_prev: data.u0.clone(),
        u_curr: u1,
        v_prev,
    })
}

/// Advance from `(U^{m-1}, U^m)` to `(U^m, U^{m+1})`.
pub fn step(
    state: &SchemeState,
    cfg: &SchemeConfig,
    force: &ForceModel,
    metric: &MetricField,
    cs: &ConstraintSpec,
) -> Result<(SchemeState, StepDiagnostics)> {
    let h = cfg.h;
    let e = cfg.e;
    let m = state.m;
    let t_m = cfg.time(m);
    let on_step = |source: GeometryError| SchemeError::StepGeometry { step: m, source };

    let mut v = state.v_prev.clone();
    let mut last_increment = f64::INFINITY;
    let mut contraction = f64::NAN;

    for iter in 1..=cfg.fp_max_iter {
        let centred = (&v + &state.v_prev) * 0.5;
        let accel = force
            .discrete(metric, t_m, &state.u_curr, &state.u_prev, &centred, h)
            .map_err(|err| match err {
                SchemeError::Geometry(g) => on_step(g),
                other => other,
            })?;
        let w = (&state.u_curr * 2.0 - &state.u_prev * (1.0 - e) + &accel * (h * h)) / (1.0 + e);
        let active = cs.phi(&w) < 0.0;
        let (z, u_next) = if active {
            let z = geometry::project_k(cs, metric, &w, cfg.projection_mode).map_err(on_step)?;
            let u_next = &state.u_prev * -e + &z * (1.0 + e);
            (z, u_next)
        } else {
            // P_K(W) = W, so the update collapses to the explicit central difference.
            let u_next = &state.u_curr * 2.0 - &state.u_prev + &accel * (h * h);
            (w.clone(), u_next)
        };
        let v_new = (&u_next - &state.u_curr) / h;
        if !v_new.iter().all(|c| c.is_finite()) {
            return Err(SchemeError::StepFailure {
                step: m,
                iterations: iter,
                last_increment: f64::INFINITY,
                contraction,
            });
        }

        let increment = (&v_new - &v).norm();
        let converged =
            !force.is_velocity_dependent() || increment <= cfg.fp_tol * (1.0 + v_new.norm());
        if iter > 1 && last_increment > 0.0 {
            contraction = increment / last_increment;
        }
        last_increment = increment;

        if converged {
            let (reaction_impulse, reaction_norm) = if active {
                let local = metric.at(&z).map_err(on_step)?;
                let r = local.lower_index(&((&z - &w) * ((1.0 + e) / h)));
                let norm = local.cotangent_norm(&r);
                (r, norm)
            } else {
                (Vector::zeros(w.len()), 0.0)
            };
            let next = SchemeState {
                m: m + 1,
                t: cfg.time(m + 1),
                u_prev: state.u_curr.clone(),
                u_curr: u_next,
                v_prev: v_new.clone(),
            };
            let diag = StepDiagnostics {
                m,
                w,
                z,
                v: v_new,
                reaction_impulse,
                reaction_norm,
                fp_iters: iter,
                active,
            };
            return Ok((next, diag));
        }
        v = v_new;
    }
    Err(SchemeError::StepFailure {
        step: m,
        iterations: cfg.fp_max_iter,
        last_increment,
        contraction,
    })
}

/// One row of a scheme trajectory: `t_m`, `U^m`, `V^m` and the step that produced `U^{m+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub m: usize,
    pub t: f64,
    pub u: Vector,
    pub v: Vector,
    /// `None` for `m = 0`, whose successor comes from the start-up formula.
    pub step: Option<StepDiagnostics>,
}

impl Sample {
    pub fn is_active(&self) -> bool {
        self.step.as_ref().is_some_and(|s| s.active)
    }
}

/// A step failure recorded on a partial trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub step: usize,
    pub error: SchemeError,
}

/// Scheme output over `[t0, t0 + n h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub e: f64,
    pub t0: f64,
    pub dim: usize,
    pub samples: Vec<Sample>,
    /// `(t_n, U^n)`, the position following the last sample.
    pub last_position: Option<(f64, Vector)>,
    pub failure: Option<FailureRecord>,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    /// All computed positions `(t_m, U^m)`, including the one after the last sample.
    pub fn positions(&self) -> impl Iterator<Item = (f64, &Vector)> + '_ {
        self.samples
            .iter()
            .map(|s| (s.t, &s.u))
            .chain(self.last_position.iter().map(|(t, u)| (*t, u)))
    }

    pub fn active_steps(&self) -> usize {
        self.samples.iter().filter(|s| s.is_active()).count()
    }
}

/// Integrate `n = floor((t_end - t0) / h)` samples; step failures truncate the trajectory.
pub fn run(
    data: &InitialData,
    cfg: &SchemeConfig,
    force: &ForceModel,
    metric: &MetricField,
    cs: &ConstraintSpec,
) -> Result<Trajectory> {
    cfg.validate()?;
    if (data.t0 - cfg.t0).abs() > 0.0 {
        return Err(SchemeError::Config(format!(
            "initial time {} differs from scheme t0 {}",
            data.t0, cfg.t0
        )));
    }
    data.check_admissible(cs, metric)?;
    let n = cfg.step_count();
    let mut traj = Trajectory {
        h: cfg.h,
        e: cfg.e,
        t0: cfg.t0,
        dim: cs.dim(),
        samples: Vec::with_capacity(n),
        last_position: None,
        failure: None,
    };
    if n == 0 {
        return Ok(traj);
    }
    let mut state = init_first_steps(data, cfg, force, metric, cs)?;
    traj.samples.push(Sample {
        m: 0,
        t: cfg.time(0),
        u: state.u_prev.clone(),
        v: state.v_prev.clone(),
        step: None,
    });
    for _ in 1..n {
        match step(&state, cfg, force, metric, cs) {
            Ok((next, diag)) => {
                traj.samples.push(Sample {
                    m: state.m,
                    t: cfg.time(state.m),
                    u: state.u_curr.clone(),
                    v: diag.v.clone(),
                    step: Some(diag),
                });
                state = next;
            }
            Err(error) => {
                traj.failure = Some(FailureRecord {
                    step: state.m,
                    error,
                });
                traj.last_position = Some((cfg.time(state.m), state.u_curr));
                return Ok(traj);
            }
        }
    }
    traj.last_position = Some((cfg.time(state.m), state.u_curr));
    Ok(traj)
}

/// Largest Euclidean distance from `U^m` to `K` along a trajectory.
pub fn max_feasibility_drift(traj: &Trajectory, cs: &ConstraintSpec) -> Result<f64> {
    let euclid = MetricField::identity(cs.dim());
    let mut worst: f64 = 0.0;
    for (_, u) in traj.positions() {
        if cs.phi(u) < 0.0 {
            let y = geometry::project_k(cs, &euclid, u, ProjectionMode::FrozenMetric)?;
            worst = worst.max((u - y).norm());
        }
    }
    Ok(worst)
}

/// One step of the scalar recurrence `y+ = -e y- + (2y - (1-e) y-)^+ + h^2 lambda`.
pub fn lemma_monodim_step(y_prev: f64, y_curr: f64, lambda: f64, e: f64, h: f64) -> f64 {
    -e * y_prev + (2.0 * y_curr - (1.0 - e) * y_prev).max(0.0) + h * h * lambda
}

/// The scalar recurrence iterated over a forcing sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MonodimSequence {
    pub e: f64,
    pub h: f64,
    /// `y^0, y^1, ...`
    pub y: Vec<f64>,
    /// `lambda^1, lambda^2, ...` indexed so that `lambda[m]` drives `y^{m+1}`; `lambda[0]` is unused.
    pub lambda: Vec<f64>,
}

impl MonodimSequence {
    pub fn generate(y0: f64, y1: f64, lambda: &[f64], e: f64, h: f64) -> Self {
        let mut y = Vec::with_capacity(lambda.len() + 1);
        y.push(y0);
        y.push(y1);
        let mut lam = Vec::with_capacity(lambda.len() + 1);
        lam.push(0.0);
        for &l in lambda {
            let n = y.len();
            let next = lemma_monodim_step(y[n - 2], y[n - 1], l, e, h);
            y.push(next);
            lam.push(l);
        }
        Self {
            e,
            h,
            y,
            lambda: lam,
        }
    }

    /// `eta^m = (y^{m+1} - y^m) / h`.
    pub fn velocity(&self, m: usize) -> f64 {
        (self.y[m + 1] - self.y[m]) / self.h
    }

    /// First index `m >= 2` violating
    /// `|eta^m| <= max(|eta^{m-1}|, e |eta^{m-2}|) + h |lambda^m| + h |lambda^{m-1}|`.
    pub fn check_velocity_bound(&self, slack: f64) -> std::result::Result<(), LemmaViolation> {
        for m in 2..self.y.len() - 1 {
            let lhs = self.velocity(m).abs();
            let rhs = self
                .velocity(m - 1)
                .abs()
                .max(self.e * self.velocity(m - 2).abs())
                + self.h * self.lambda[m].abs()
                + self.h * self.lambda[m - 1].abs();
            if lhs > rhs + slack * (1.0 + rhs) {
                return Err(LemmaViolation {
                    index: m,
                    lhs,
                    rhs,
                    e: self.e,
                    h: self.h,
                    y: self.y[m - 2..=m + 1].to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaViolation {
    pub index: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub e: f64,
    pub h: f64,
    /// `y^{m-2} .. y^{m+1}` around the violation.
    pub y: Vec<f64>,
}

impl fmt::Display for LemmaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "index {}: |eta| = {:.17e} > bound {:.17e} (e = {}, h = {}, y = {:?})",
            self.index, self.lhs, self.rhs, self.e, self.h, self.y
        )
    }
}

/// Outcome of a randomized run of the velocity-bound check.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub cases: usize,
    pub steps: usize,
    pub failures: usize,
    pub first_counterexample: Option<(usize, LemmaViolation)>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Largest forcing magnitude drawn by [`lemma_suite`].
pub const LEMMA_LAMBDA_MAX: f64 = 10.0;
/// Relative roundoff slack for the velocity bound.
pub const LEMMA_SLACK: f64 = 1e-12;

/// Draw `cases` random recurrences of `steps` steps and check the velocity bound on each.
///
/// Every fourth case pins `e` to 0 or 1 and every third starts on the
/// boundary with `y^0 = 0`, so the clamped branch is exercised often.
pub fn lemma_suite(cases: usize, steps: usize, seed: u64) -> LemmaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LemmaReport {
        cases,
        steps,
        failures: 0,
        first_counterexample: None,
    };
    for case in 0..cases {
        let e = match case % 4 {
            0 => f64::from(u8::from(rng.gen_bool(0.5))),
            _ => rng.gen_range(0.0..=1.0),
        };
        let h = 10f64.powf(rng.gen_range(-3.0..-1.0));
        let y0 = if case % 3 == 0 {
            0.0
        } else {
            rng.gen_range(-1.0..1.0)
        };
        let y1 = rng.gen_range(-1.0..1.0);
        let lambda_max = rng.gen_range(0.0..LEMMA_LAMBDA_MAX);
        let lambda: Vec<f64> = (0..steps)
            .map(|_| rng.gen_range(-lambda_max..=lambda_max))
            .collect();
        let seq = MonodimSequence::generate(y0, y1, &lambda, e, h);
        if let Err(violation) = seq.check_velocity_bound(LEMMA_SLACK) {
            report.failures += 1;
            if report.first_counterexample.is_none() {
                report.first_counterexample = Some((case, violation));
            }
        }
    }
    report
}
