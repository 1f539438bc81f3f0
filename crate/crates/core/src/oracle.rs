//! Reference solutions: an event-driven integrator and the closed-form bouncing ball.
//!
//! The event-driven integrator advances the smooth dynamics `M(u) u'' = f`
//! with fixed-step RK4, locates each crossing of `phi = 0` by bisection and
//! applies [`geometry::impact_map`]. It cannot get past an accumulation of
//! impacts; it stops with [`OracleStatus::ZenoStop`] or
//! [`OracleStatus::ZenoOverflow`] instead.

use thiserror::Error;

use crate::geometry::{self, ConstraintSpec, GeometryError, MetricField, ProjectionMode};
use crate::scheme::{ForceModel, InitialData, SchemeError};
use crate::Vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid event-driven configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EventDrivenConfig {
    /// Smooth-phase RK4 step (s).
    pub rk_step: f64,
    /// Bisection stops once `|phi|` at the bracketing point is below this.
    pub event_tol: f64,
    pub max_events: usize,
    /// Post-impact normal speed below which motion is declared stuck on the boundary.
    pub zeno_guard: f64,
}

impl Default for EventDrivenConfig {
    fn default() -> Self {
        Self {
            rk_step: 1e-3,
            event_tol: 1e-12,
            max_events: 20,
            zeno_guard: 1e-7,
        }
    }
}

impl EventDrivenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rk_step > 0.0 && self.rk_step.is_finite()) {
            return Err(OracleError::Config(format!(
                "rk_step = {} must be positive",
                self.rk_step
            )));
        }
        if self.event_tol.is_nan() || self.event_tol <= 0.0 {
            return Err(OracleError::Config(format!(
                "event_tol = {} must be positive",
                self.event_tol
            )));
        }
        if self.zeno_guard.is_nan() || self.zeno_guard < 0.0 {
            return Err(OracleError::Config(format!(
                "zeno_guard = {} must be nonnegative",
                self.zeno_guard
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleStatus {
    Completed,
    /// Post-impact normal speed fell below the guard at time `t`; the state was put on the boundary.
    ZenoStop {
        t: f64,
    },
    /// More than `max_events` impacts before the horizon; halted at time `t`.
    ZenoOverflow {
        t: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub t: f64,
    pub u: Vector,
    pub v: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleImpact {
    pub t: f64,
    pub x: Vector,
    pub p_minus: Vector,
    pub p_plus: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrajectory {
    /// Samples at every RK4 step; impacts contribute a pre- and post-impact sample at the same time.
    pub samples: Vec<OracleSample>,
    pub impacts: Vec<OracleImpact>,
    /// Boundary touches with normal speed below the guard, not treated as impacts.
    pub grazes: Vec<f64>,
    pub status: OracleStatus,
}

impl OracleTrajectory {
    pub fn impact_times(&self) -> Vec<f64> {
        self.impacts.iter().map(|i| i.t).collect()
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    /// Cubic Hermite interpolation of the position; `None` outside the integrated window.
    pub fn position_at(&self, t: f64) -> Option<Vector> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t < first.t || t > last.t {
            return None;
        }
        if t == last.t {
            return Some(last.u.clone());
        }
        // last sample with s.t <= t, then the next one strictly later
        let idx = self.samples.partition_point(|s| s.t <= t).saturating_sub(1);
        let a = &self.samples[idx];
        let b = self.samples[idx + 1..].iter().find(|s| s.t > a.t)?;
        let dt = b.t - a.t;
        let s = (t - a.t) / dt;
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        Some(&a.u * h00 + &a.v * (h10 * dt) + &b.u * h01 + &b.v * (h11 * dt))
    }
}

struct Smooth<'a> {
    force: &'a ForceModel,
    metric: &'a MetricField,
}

impl Smooth<'_> {
    fn accel(&self, t: f64, u: &Vector, v: &Vector) -> Result<Vector> {
        Ok(self.force.acceleration(self.metric, t, u, v)?)
    }

    fn rk4(&self, t: f64, u: &Vector, v: &Vector, dt: f64) -> Result<(Vector, Vector)> {
        let a1 = self.accel(t, u, v)?;
        let u2 = u + v * (dt / 2.0);
        let v2 = v + &a1 * (dt / 2.0);
        let a2 = self.accel(t + dt / 2.0, &u2, &v2)?;
        let u3 = u + &v2 * (dt / 2.0);
        let v3 = v + &a2 * (dt / 2.0);
        let a3 = self.accel(t + dt / 2.0, &u3, &v3)?;
        let u4 = u + &v3 * dt;
        let v4 = v + &a3 * dt;
        let a4 = self.accel(t + dt, &u4, &v4)?;
        let u_new = u + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
        let v_new = v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
        Ok((u_new, v_new))
    }
}

/// RK4 between impacts, bisection on `phi` for event location, restitution at each event.
pub fn integrate_event_driven(
    data: &InitialData,
    force: &ForceModel,
    metric: &MetricField,
    cs: &ConstraintSpec,
    e: f64,
    cfg: &EventDrivenConfig,
    t_end: f64,
) -> Result<OracleTrajectory> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&e) {
        return Err(GeometryError::InvalidRestitution(e).into());
    }
    data.check_admissible(cs, metric)?;
    let smooth = Smooth { force, metric };

    let mut t = data.t0;
    let mut u = data.u0.clone();
    let mut v = metric.at(&u)?.raise_index(&data.p0);
    let mut out = OracleTrajectory {
        samples: vec![OracleSample {
            t,
            u: u.clone(),
            v: v.clone(),
        }],
        impacts: Vec::new(),
        grazes: Vec::new(),
        status: OracleStatus::Completed,
    };
    let time_eps = 4.0 * f64::EPSILON * (1.0 + t_end.abs());
    let mut stalled = false;

    while t < t_end - time_eps {
        let dt = cfg.rk_step.min(t_end - t);
        let (u1, v1) = smooth.rk4(t, &u, &v, dt)?;
        if cs.phi(&u1) >= 0.0 {
            t += dt;
            u = u1;
            v = v1;
            stalled = false;
            out.samples.push(OracleSample {
                t,
                u: u.clone(),
                v: v.clone(),
            });
            continue;
        }

        // Bracket [lo, hi] with phi(lo) >= 0 > phi(hi).
        let (mut lo, mut hi) = (0.0, dt);
        let (mut u_lo, mut v_lo) = (u.clone(), v.clone());
        for _ in 0..200 {
            let located = lo > 0.0 && cs.phi(&u_lo).abs() <= cfg.event_tol;
            if located || hi - lo <= f64::EPSILON * (1.0 + t.abs()) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (um, vm) = smooth.rk4(t, &u, &v, mid)?;
            if cs.phi(&um) >= 0.0 {
                lo = mid;
                u_lo = um;
                v_lo = vm;
            } else {
                hi = mid;
            }
        }
        let t_event = t + lo;
        if lo == 0.0 {
            if stalled {
                // No forward progress twice in a row: the motion is trapped on the boundary.
                settle_on_boundary(cs, metric, &mut u, &mut v)?;
                out.samples.push(OracleSample {
                    t,
                    u: u.clone(),
                    v: v.clone(),
                });
                out.status = OracleStatus::ZenoStop { t };
                return Ok(out);
            }
            stalled = true;
        } else {
            stalled = false;
        }

        let local = metric.at(&u_lo)?;
        let g = cs.grad(&u_lo);
        let p_minus = local.lower_index(&v_lo);
        let normal_speed = local.cotangent_inner(&g, &p_minus) / local.cotangent_norm(&g);
        out.samples.push(OracleSample {
            t: t_event,
            u: u_lo.clone(),
            v: v_lo.clone(),
        });

        if normal_speed > -cfg.zeno_guard {
            out.grazes.push(t_event);
            settle_on_boundary(cs, metric, &mut u_lo, &mut v_lo)?;
            out.samples.push(OracleSample {
                t: t_event,
                u: u_lo,
                v: v_lo,
            });
            out.status = OracleStatus::ZenoStop { t: t_event };
            return Ok(out);
        }

        if out.impacts.len() >= cfg.max_events {
            out.status = OracleStatus::ZenoOverflow { t: t_event };
            return Ok(out);
        }
        let outcome = geometry::impact_map(cs, metric, &u_lo, &p_minus, e)?;
        let v_plus = local.raise_index(&outcome.p_plus);
        out.impacts.push(OracleImpact {
            t: t_event,
            x: u_lo.clone(),
            p_minus,
            p_plus: outcome.p_plus.clone(),
        });
        let post_speed = local.cotangent_inner(&g, &outcome.p_plus) / local.cotangent_norm(&g);
        t = t_event;
        u = u_lo;
        v = v_plus;
        if post_speed < cfg.zeno_guard {
            settle_on_boundary(cs, metric, &mut u, &mut v)?;
            out.samples.push(OracleSample {
                t,
                u: u.clone(),
                v: v.clone(),
            });
            out.status = OracleStatus::ZenoStop { t };
            return Ok(out);
        }
        out.samples.push(OracleSample {
            t,
            u: u.clone(),
            v: v.clone(),
        });
    }
    Ok(out)
}

/// Put `u` on the boundary and drop the normal part of the velocity.
fn settle_on_boundary(
    cs: &ConstraintSpec,
    metric: &MetricField,
    u: &mut Vector,
    v: &mut Vector,
) -> Result<()> {
    let x = geometry::project_boundary(cs, metric, u, ProjectionMode::FrozenMetric)?.position;
    let local = metric.at(&x)?;
    let p = local.lower_index(v);
    let parts = geometry::decompose_impulse(cs, metric, &x, &p)?;
    *v = local.raise_index(&parts.tangential);
    *u = x;
    Ok(())
}

/// Ball on the half-line `u >= 0` under constant gravity with restitution `e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormBall {
    pub u0: f64,
    pub v0: f64,
    pub g: f64,
    pub e: f64,
}

impl ClosedFormBall {
    /// Panics if `g <= 0`, `u0 < 0` or `e` is outside `[0, 1]`.
    pub fn new(u0: f64, v0: f64, g: f64, e: f64) -> Self {
        assert!(g > 0.0, "closed form needs positive gravity");
        assert!(u0 >= 0.0, "drop height must be nonnegative");
        assert!((0.0..=1.0).contains(&e), "restitution outside [0, 1]");
        Self { u0, v0, g, e }
    }

    /// Speed at the first impact.
    pub fn impact_speed(&self) -> f64 {
        (self.v0 * self.v0 + 2.0 * self.g * self.u0).sqrt()
    }

    pub fn first_impact_time(&self) -> f64 {
        (self.v0 + self.impact_speed()) / self.g
    }

    /// Accumulation time of the impact cascade; `None` for `e = 1` (no accumulation).
    pub fn zeno_time(&self) -> Option<f64> {
        if self.e >= 1.0 {
            return None;
        }
        let t1 = self.first_impact_time();
        Some(t1 + 2.0 * self.e * self.impact_speed() / (self.g * (1.0 - self.e)))
    }

    /// First `n` impact times.
    pub fn impact_times(&self, n: usize) -> Vec<f64> {
        let mut times = Vec::with_capacity(n);
        let mut t = self.first_impact_time();
        let mut speed = self.e * self.impact_speed();
        for k in 0..n {
            if k > 0 {
                if speed <= 0.0 {
                    break;
                }
                t += 2.0 * speed / self.g;
                speed *= self.e;
            }
            times.push(t);
        }
        times
    }

    /// Position and velocity at time `t` (right-continuous at impacts).
    pub fn state_at(&self, t: f64) -> (f64, f64) {
        let g = self.g;
        let t1 = self.first_impact_time();
        if t < t1 {
            return (self.u0 + self.v0 * t - 0.5 * g * t * t, self.v0 - g * t);
        }
        let s1 = self.impact_speed();
        if self.e >= 1.0 {
            let period = 2.0 * s1 / g;
            if period == 0.0 {
                return (0.0, 0.0);
            }
            let tau = (t - t1).rem_euclid(period);
            return (s1 * tau - 0.5 * g * tau * tau, s1 - g * tau);
        }
        if let Some(tz) = self.zeno_time() {
            if t >= tz {
                return (0.0, 0.0);
            }
        }
        let mut start = t1;
        let mut speed = self.e * s1;
        while speed > 0.0 {
            let flight = 2.0 * speed / g;
            if t < start + flight {
                let tau = t - start;
                return (speed * tau - 0.5 * g * tau * tau, speed - g * tau);
            }
            start += flight;
            speed *= self.e;
        }
        (0.0, 0.0)
    }
}

/// Convenience wrapper around [`ClosedFormBall::state_at`].
pub fn closed_form_ball(model: &ClosedFormBall, t: f64) -> (f64, f64) {
    model.state_at(t)
}
