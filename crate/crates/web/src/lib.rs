//! Browser bindings for the demo page in `www/`.
//!
//! Each export returns a flat `Float64Array`; the layouts are documented per function.

use std::sync::Arc;

use impactsim::analysis::{convergence_study, ConvergenceProblem, Reference};
use impactsim::models;
use impactsim::scheme::{self, SchemeConfig};
use impactsim::Vector;
use wasm_bindgen::prelude::*;

const MAX_STEPS: f64 = 2e6;

fn scheme_config(h: f64, e: f64, t_end: f64) -> Result<SchemeConfig, String> {
    if h.is_nan() || h <= 0.0 || t_end / h > MAX_STEPS {
        return Err(format!("h = {h} gives too many steps for t_end = {t_end}"));
    }
    Ok(SchemeConfig {
        h,
        e,
        t_end,
        ..SchemeConfig::default()
    })
}

/// Dropped ball, at rest from height `u0` with g = 10.
/// Layout: `[t, u_scheme, u_exact]` per step.
pub fn ball_series(u0: f64, e: f64, h: f64, t_end: f64) -> Result<Vec<f64>, String> {
    let model = models::bouncing_ball(u0, 0.0, models::DEFAULT_GRAVITY, e)
        .map_err(|err| err.to_string())?;
    let cfg = scheme_config(h, e, t_end)?;
    let traj = scheme::run(
        &model.initial,
        &cfg,
        &model.force,
        &model.metric,
        &model.constraint,
    )
    .map_err(|err| err.to_string())?;
    let exact = model.closed_form.expect("ball has a closed form");
    Ok(traj
        .positions()
        .flat_map(|(t, u)| [t, u[0], exact.state_at(t).0])
        .collect())
}

/// Unit-speed particle in the unit disk launched from `(0.3, 0)` at `angle`.
/// Layout: `[x, y]` for every `stride`-th position.
pub fn billiard_series(
    angle: f64,
    e: f64,
    h: f64,
    t_end: f64,
    stride: usize,
) -> Result<Vec<f64>, String> {
    let model = models::disk_billiard_from([0.3, 0.0], 1.0, 1.0, angle, e)
        .map_err(|err| err.to_string())?;
    let cfg = scheme_config(h, e, t_end)?;
    let traj = scheme::run(
        &model.initial,
        &cfg,
        &model.force,
        &model.metric,
        &model.constraint,
    )
    .map_err(|err| err.to_string())?;
    Ok(traj
        .positions()
        .step_by(stride.max(1))
        .flat_map(|(_, u)| [u[0], u[1]])
        .collect())
}

/// Sup error of the dropped ball on `[0, 1.2]` for `h, h/2, h/4, h/8`.
/// Layout: `[h_0, err_0, ..., h_3, err_3, observed_order]`.
pub fn ball_sweep(e: f64, h: f64) -> Result<Vec<f64>, String> {
    let model = models::bouncing_ball(1.0, 0.0, models::DEFAULT_GRAVITY, e)
        .map_err(|err| err.to_string())?;
    let horizon = 1.2;
    let problem = ConvergenceProblem {
        cs: model.constraint.clone(),
        metric: model.metric.clone(),
        force: model.force.clone(),
        data: model.initial.clone(),
        scheme: scheme_config(h, e, horizon)?,
        horizon,
    };
    let exact = model.closed_form.expect("ball has a closed form");
    let reference = Reference::Oracle {
        position: Arc::new(move |t| Vector::from_element(1, exact.state_at(t).0)),
        first_impact: Some(exact.first_impact_time()),
    };
    let hs: Vec<f64> = (0..4).map(|k| h / f64::powi(2.0, k)).collect();
    let report = convergence_study(&problem, &hs, &reference).map_err(|err| err.to_string())?;
    let mut out: Vec<f64> = report
        .rows
        .iter()
        .flat_map(|r| [r.h, r.sup_err.unwrap_or(f64::NAN)])
        .collect();
    out.push(report.observed_order.unwrap_or(f64::NAN));
    Ok(out)
}

#[wasm_bindgen(js_name = ballVsClosedForm)]
pub fn ball_vs_closed_form(u0: f64, e: f64, h: f64, t_end: f64) -> Result<Vec<f64>, JsError> {
    ball_series(u0, e, h, t_end).map_err(|msg| JsError::new(&msg))
}

#[wasm_bindgen(js_name = billiardPath)]
pub fn billiard_path(
    angle: f64,
    e: f64,
    h: f64,
    t_end: f64,
    stride: usize,
) -> Result<Vec<f64>, JsError> {
    billiard_series(angle, e, h, t_end, stride).map_err(|msg| JsError::new(&msg))
}

#[wasm_bindgen(js_name = convergenceSweep)]
pub fn convergence_sweep(e: f64, h: f64) -> Result<Vec<f64>, JsError> {
    ball_sweep(e, h).map_err(|msg| JsError::new(&msg))
}
