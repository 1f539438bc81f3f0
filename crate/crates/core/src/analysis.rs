//! Post-processing of scheme trajectories.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, ConstraintSpec, GeometryError, MetricField};
use crate::scheme::{self, ForceModel, InitialData, SchemeConfig, SchemeError, Trajectory};
use crate::Vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("invalid refinement sweep: {0}")]
    InvalidSweep(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Active steps separated by at most this many inactive steps belong to one impact.
pub const CLUSTER_GAP: usize = 2;
/// Normal impulsion below this fraction of `|p_minus|*` counts as a graze.
pub const GRAZE_RATIO: f64 = 1e-8;

/// A maximal run of active steps, by sample index (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cluster {
    pub first: usize,
    pub last: usize,
}

/// Closed clusters and, separately, a cluster still open at the end of the trajectory.
pub fn impact_clusters(traj: &Trajectory) -> (Vec<Cluster>, Option<Cluster>) {
    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, s) in traj.samples.iter().enumerate() {
        if !s.is_active() {
            continue;
        }
        match clusters.last_mut() {
            Some(c) if i - c.last <= CLUSTER_GAP + 1 => c.last = i,
            _ => clusters.push(Cluster { first: i, last: i }),
        }
    }
    let n = traj.samples.len();
    let open = match clusters.last() {
        Some(c) if n - 1 - c.last <= CLUSTER_GAP => clusters.pop(),
        _ => None,
    };
    (clusters, open)
}

/// One impact reconstructed from a cluster of active steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactEvent {
    /// Time of the first active step.
    pub t: f64,
    /// Boundary point `Z` of the first active step.
    pub x: Vector,
    pub p_minus: Vector,
    pub p_plus: Vector,
    /// `-(normal p_plus)/(normal p_minus)`; `None` for grazes.
    pub measured_e: Option<f64>,
    /// `|p_T(plus) - p_T(minus)|*` at `x`.
    pub tangential_error: f64,
    /// `E(x, p_plus) - E(x, p_minus)`.
    pub energy_jump: f64,
    pub cluster: Cluster,
}

impl ImpactEvent {
    pub fn is_graze(&self) -> bool {
        self.measured_e.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactReport {
    pub events: Vec<ImpactEvent>,
    /// Set when the trajectory ends inside a cluster; that cluster has no event.
    pub open_cluster: Option<Cluster>,
}

impl ImpactReport {
    pub fn warnings(&self) -> Vec<String> {
        self.open_cluster
            .iter()
            .map(|c| {
                format!(
                    "open impact cluster at samples {}..={} touches the end of the trajectory; omitted",
                    c.first, c.last
                )
            })
            .collect()
    }

    /// Measured restitution coefficients of non-grazing events.
    pub fn restitution_estimates(&self) -> Vec<f64> {
        self.events.iter().filter_map(|e| e.measured_e).collect()
    }
}

/// Cluster active steps into impacts and measure restitution and tangential conservation.
pub fn detect_impacts(
    traj: &Trajectory,
    cs: &ConstraintSpec,
    metric: &MetricField,
) -> Result<ImpactReport> {
    let (clusters, open_cluster) = impact_clusters(traj);
    let mut events = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let first = &traj.samples[cluster.first];
        let step = first
            .step
            .as_ref()
            .expect("active samples carry step diagnostics");
        let x = step.z.clone();
        let local = metric.at(&x)?;
        let before = &traj.samples[cluster.first - 1].v;
        let after = &traj.samples[cluster.last].v;
        let p_minus = local.lower_index(before);
        let p_plus = local.lower_index(after);
        let minus = geometry::decompose_impulse(cs, metric, &x, &p_minus)?;
        let plus = geometry::decompose_impulse(cs, metric, &x, &p_plus)?;
        let normal_minus = local.cotangent_norm(&minus.normal);
        let measured_e =
            if normal_minus < GRAZE_RATIO * local.cotangent_norm(&p_minus) || normal_minus == 0.0 {
                None
            } else {
                Some(-plus.normal_coefficient / minus.normal_coefficient)
            };
        let tangential_error = local.cotangent_norm(&(&plus.tangential - &minus.tangential));
        let energy_jump = 0.5
            * (local.cotangent_inner(&p_plus, &p_plus) - local.cotangent_inner(&p_minus, &p_minus));
        events.push(ImpactEvent {
            t: first.t,
            x,
            p_minus,
            p_plus,
            measured_e,
            tangential_error,
            energy_jump,
            cluster,
        });
    }
    Ok(ImpactReport {
        events,
        open_cluster,
    })
}

/// `sum_m |V^m - V^{m-1}|` with Euclidean norms.
pub fn total_variation_velocity(traj: &Trajectory) -> f64 {
    traj.samples
        .windows(2)
        .map(|w| (&w[1].v - &w[0].v).norm())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyViolation {
    pub cluster: Cluster,
    pub before: f64,
    pub after: f64,
}

/// Kinetic energy `E = 1/2 <p, p>*` along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Impact clusters across which `E` rose by more than the tolerance.
    pub violations: Vec<EnergyViolation>,
}

/// `E_m = 1/2 V^m . M(U^m) V^m`, flagging clusters where it increases by more than `energy_tol`.
pub fn energy_trace(
    traj: &Trajectory,
    metric: &MetricField,
    energy_tol: f64,
) -> Result<EnergyTrace> {
    let mut times = Vec::with_capacity(traj.samples.len());
    let mut values = Vec::with_capacity(traj.samples.len());
    for s in &traj.samples {
        let local = metric.at(&s.u)?;
        times.push(s.t);
        values.push(0.5 * local.tangent_inner(&s.v, &s.v));
    }
    let (clusters, _) = impact_clusters(traj);
    let violations = clusters
        .into_iter()
        .filter_map(|cluster| {
            let before = values[cluster.first - 1];
            let after = values[cluster.last];
            (after - before > energy_tol).then_some(EnergyViolation {
                cluster,
                before,
                after,
            })
        })
        .collect();
    Ok(EnergyTrace {
        times,
        values,
        violations,
    })
}

/// Where the reference solution of a convergence study comes from.
#[derive(Clone)]
pub enum Reference {
    /// An exact or high-accuracy position map, with its first impact time when known.
    Oracle {
        position: Arc<dyn Fn(f64) -> Vector + Send + Sync>,
        first_impact: Option<f64>,
    },
    /// A scheme run at `h_min / refinement`.
    FinestGrid { refinement: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    Oracle,
    FinestGrid,
}

impl Reference {
    pub fn kind(&self) -> ReferenceKind {
        match self {
            Reference::Oracle { .. } => ReferenceKind::Oracle,
            Reference::FinestGrid { .. } => ReferenceKind::FinestGrid,
        }
    }
}

/// A model plus scheme settings; `h` and `t_end` of `scheme` are overridden per run.
#[derive(Debug, Clone)]
pub struct ConvergenceProblem {
    pub cs: ConstraintSpec,
    pub metric: MetricField,
    pub force: ForceModel,
    pub data: InitialData,
    pub scheme: SchemeConfig,
    /// Errors are measured on `[t0, horizon]`.
    pub horizon: f64,
}

impl ConvergenceProblem {
    fn run(&self, h: f64) -> Result<Trajectory> {
        let cfg = SchemeConfig {
            h,
            t_end: self.horizon,
            ..self.scheme.clone()
        };
        Ok(scheme::run(
            &self.data,
            &cfg,
            &self.force,
            &self.metric,
            &self.cs,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub h: f64,
    pub sup_err: Option<f64>,
    pub impact_time_err: Option<f64>,
    pub measured_e_err: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Median of `log2(err_i / err_{i+1})` over consecutive successful pairs.
    pub observed_order: Option<f64>,
    pub reference: ReferenceKind,
}

impl ConvergenceReport {
    pub fn h_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.h).collect()
    }

    /// Sup-norm errors, `NaN` for failed runs.
    pub fn sup_position_errors(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.sup_err.unwrap_or(f64::NAN))
            .collect()
    }

    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }
}

fn check_sweep(h_list: &[f64]) -> Result<()> {
    if h_list.len() < 3 {
        return Err(AnalysisError::InvalidSweep(format!(
            "need at least 3 step sizes, got {}",
            h_list.len()
        )));
    }
    for pair in h_list.windows(2) {
        let ratio = pair[0] / pair[1];
        if pair[1].is_nan() || pair[1] <= 0.0 || (ratio - 2.0).abs() > 1e-9 {
            return Err(AnalysisError::InvalidSweep(format!(
                "step sizes must halve: {} -> {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

struct RunSummary {
    positions: Vec<(f64, Vector)>,
    first_impact: Option<f64>,
    first_e: Option<f64>,
    failure: Option<String>,
}

fn summarise(problem: &ConvergenceProblem, h: f64) -> RunSummary {
    let traj = match problem.run(h) {
        Ok(traj) => traj,
        Err(err) => {
            return RunSummary {
                positions: Vec::new(),
                first_impact: None,
                first_e: None,
                failure: Some(err.to_string()),
            }
        }
    };
    let failure = traj
        .failure
        .as_ref()
        .map(|f| format!("step {}: {}", f.step, f.error));
    let (first_impact, first_e) = match detect_impacts(&traj, &problem.cs, &problem.metric) {
        Ok(report) => {
            let first = report.events.iter().find(|e| !e.is_graze());
            (first.map(|e| e.t), first.and_then(|e| e.measured_e))
        }
        Err(_) => (None, None),
    };
    RunSummary {
        positions: traj.positions().map(|(t, u)| (t, u.clone())).collect(),
        first_impact,
        first_e,
        failure,
    }
}

/// Sup-norm position error of each `h` against the reference, and the observed order.
///
/// Runs for different step sizes are independent and execute on the current rayon pool.
pub fn convergence_study(
    problem: &ConvergenceProblem,
    h_list: &[f64],
    reference: &Reference,
) -> Result<ConvergenceReport> {
    check_sweep(h_list)?;
    let h_min = h_list[h_list.len() - 1];
    let e = problem.scheme.e;

    let mut jobs: Vec<f64> = h_list.to_vec();
    if let Reference::FinestGrid { refinement } = reference {
        if *refinement < 1 {
            return Err(AnalysisError::InvalidSweep(
                "refinement must be at least 1".into(),
            ));
        }
        jobs.push(h_min / *refinement as f64);
    }
    let mut summaries: Vec<RunSummary> = jobs.par_iter().map(|&h| summarise(problem, h)).collect();
    let fine = match reference {
        Reference::FinestGrid { .. } => summaries.pop(),
        Reference::Oracle { .. } => None,
    };
    if let Some(fine) = &fine {
        if let Some(msg) = &fine.failure {
            return Err(AnalysisError::InvalidSweep(format!(
                "reference run failed: {msg}"
            )));
        }
    }
    let ref_first_impact = match reference {
        Reference::Oracle { first_impact, .. } => *first_impact,
        Reference::FinestGrid { .. } => fine.as_ref().and_then(|f| f.first_impact),
    };

    let rows: Vec<ConvergenceRow> = h_list
        .iter()
        .zip(&summaries)
        .map(|(&h, run)| {
            let sup_err = if run.failure.is_some() {
                None
            } else {
                let errs = match (reference, &fine) {
                    (Reference::Oracle { position, .. }, _) => run
                        .positions
                        .iter()
                        .map(|(t, u)| (u - position(*t)).norm())
                        .fold(0.0, f64::max),
                    (Reference::FinestGrid { refinement }, Some(fine)) => {
                        let ratio = (h / h_min).round() as usize * refinement;
                        run.positions
                            .iter()
                            .enumerate()
                            .filter_map(|(m, (_, u))| {
                                fine.positions.get(m * ratio).map(|(_, r)| (u - r).norm())
                            })
                            .fold(0.0, f64::max)
                    }
                    _ => f64::NAN,
                };
                Some(errs)
            };
            ConvergenceRow {
                h,
                sup_err,
                impact_time_err: run
                    .first_impact
                    .zip(ref_first_impact)
                    .map(|(a, b)| (a - b).abs()),
                measured_e_err: run.first_e.map(|m| (m - e).abs()),
                failure: run.failure.clone(),
            }
        })
        .collect();

    let orders: Vec<f64> = rows
        .windows(2)
        .filter_map(|w| match (w[0].sup_err, w[1].sup_err) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some((a / b).log2()),
            _ => None,
        })
        .collect();
    Ok(ConvergenceReport {
        rows,
        observed_order: median(orders),
        reference: reference.kind(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{Sample, StepDiagnostics};
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn synthetic(active: &[bool]) -> Trajectory {
        let samples = active
            .iter()
            .enumerate()
            .map(|(m, &a)| Sample {
                m,
                t: m as f64,
                u: v(&[1.0]),
                v: v(&[m as f64]),
                step: (m > 0).then(|| StepDiagnostics {
                    m,
                    w: v(&[0.0]),
                    z: v(&[0.0]),
                    v: v(&[m as f64]),
                    reaction_impulse: v(&[0.0]),
                    reaction_norm: 0.0,
                    fp_iters: 1,
                    active: a,
                }),
            })
            .collect();
        Trajectory {
            h: 1.0,
            e: 0.5,
            t0: 0.0,
            dim: 1,
            samples,
            last_position: None,
            failure: None,
        }
    }

    #[test]
    fn clustering_joins_short_gaps_and_detects_open_end() {
        let f = false;
        let t = true;
        let traj = synthetic(&[f, f, t, f, f, t, f, f, f, t, f, f, f, f, t, f]);
        let (closed, open) = impact_clusters(&traj);
        assert_eq!(
            closed,
            vec![Cluster { first: 2, last: 5 }, Cluster { first: 9, last: 9 }]
        );
        assert_eq!(
            open,
            Some(Cluster {
                first: 14,
                last: 14
            })
        );
    }

    #[test]
    fn interior_trajectory_has_no_impacts() {
        let traj = synthetic(&[false; 10]);
        let cs = ConstraintSpec::half_space(v(&[1.0]), 0.0);
        let report = detect_impacts(&traj, &cs, &MetricField::identity(1)).unwrap();
        assert!(report.events.is_empty());
        assert!(report.warnings().is_empty());
    }

    #[test]
    fn total_variation_sums_velocity_jumps() {
        let traj = synthetic(&[false; 5]);
        assert_abs_diff_eq!(total_variation_velocity(&traj), 4.0);
        assert_eq!(total_variation_velocity(&synthetic(&[false])), 0.0);
    }

    #[test]
    fn energy_of_unit_metric() {
        let metric = MetricField::identity(2);
        let e = geometry::energy(&metric, &v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap();
        assert_abs_diff_eq!(e, 12.5);
    }

    #[test]
    fn sweep_validation() {
        assert!(check_sweep(&[1e-3, 5e-4]).is_err());
        assert!(check_sweep(&[1e-3, 1e-3, 5e-4]).is_err());
        assert!(check_sweep(&[4e-4, 2e-4, 1e-4]).is_ok());
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![1.0, 2.0]), Some(1.5));
    }
}
