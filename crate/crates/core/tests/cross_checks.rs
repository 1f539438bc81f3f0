use impactsim::models::{self, ModelDescriptor, VariableMassParams, WallParams};
use impactsim::oracle::{integrate_event_driven, EventDrivenConfig, OracleStatus};
use impactsim::scheme::{self, SchemeConfig, Trajectory};

fn simulate(model: &ModelDescriptor, h: f64, t_end: f64) -> Trajectory {
    let cfg = SchemeConfig {
        h,
        e: model.restitution,
        t_end,
        ..SchemeConfig::default()
    };
    scheme::run(
        &model.initial,
        &cfg,
        &model.force,
        &model.metric,
        &model.constraint,
    )
    .unwrap()
}

#[test]
fn closed_form_and_event_driven_agree_before_accumulation() {
    for (u0, v0, e) in [
        (1.0, 0.0, 0.5),
        (0.3, 2.0, 0.8),
        (2.0, -1.0, 0.0),
        (0.5, 1.0, 1.0),
    ] {
        let model = models::bouncing_ball(u0, v0, 10.0, e).unwrap();
        let exact = model.closed_form.unwrap();
        let oracle = integrate_event_driven(
            &model.initial,
            &model.force,
            &model.metric,
            &model.constraint,
            e,
            &EventDrivenConfig::default(),
            3.0,
        )
        .unwrap();
        let stop = match oracle.status {
            OracleStatus::Completed => oracle.end_time(),
            OracleStatus::ZenoStop { t } | OracleStatus::ZenoOverflow { t } => t,
        };
        let stop = exact.zeno_time().map_or(stop, |z| stop.min(z - 1e-3));
        let mut t = 0.0;
        while t < stop {
            let u = oracle.position_at(t).unwrap()[0];
            assert!(
                (u - exact.state_at(t).0).abs() < 1e-6,
                "u0={u0} v0={v0} e={e} t={t}: {u} vs {}",
                exact.state_at(t).0
            );
            t += 1e-3;
        }
        let times = exact.impact_times(oracle.impacts.len().min(8));
        for (a, b) in times.iter().zip(oracle.impact_times()) {
            assert!((a - b).abs() < 1e-9, "impact {a} vs {b}");
        }
    }
}

fn oblique_models() -> Vec<ModelDescriptor> {
    vec![
        models::variable_mass_with(
            VariableMassParams {
                u0: [0.5, 0.4],
                v0: [1.5, -1.0],
                ..VariableMassParams::default()
            },
            0.5,
        )
        .unwrap(),
        models::disk_billiard_from([0.2, -0.1], 1.0, 2.0, 0.4, 0.7).unwrap(),
        models::wall(
            WallParams {
                g: 10.0,
                ..WallParams::default()
            },
            0.3,
        )
        .unwrap(),
    ]
}

#[test]
fn reaction_is_a_nonnegative_multiple_of_the_gradient() {
    let h = 1e-3;
    for model in oblique_models() {
        let traj = simulate(&model, h, 2.0);
        assert!(traj.is_complete());
        let mut checked = 0;
        for d in traj
            .samples
            .iter()
            .filter_map(|s| s.step.as_ref())
            .filter(|d| d.active)
        {
            let local = model.metric.at(&d.z).unwrap();
            let g = model.constraint.grad(&d.z);
            let r = &d.reaction_impulse;
            let along = local.cotangent_inner(r, &g);
            let r_norm = local.cotangent_norm(r);
            let g_norm = local.cotangent_norm(&g);
            assert!(
                along >= -1e-12 * r_norm * g_norm,
                "{}: negative reaction",
                model.name
            );
            if r_norm > 0.0 {
                let cos = (along / (r_norm * g_norm)).clamp(-1.0, 1.0);
                assert!(
                    cos.acos() <= 10.0 * h,
                    "{}: reaction off the normal by {}",
                    model.name,
                    cos.acos()
                );
            }
            checked += 1;
        }
        assert!(checked > 0, "{} never touched the boundary", model.name);
    }
}

#[test]
fn distance_to_k_is_bounded_by_speed_times_step() {
    for h in [1e-2, 1e-3] {
        for model in oblique_models()
            .into_iter()
            .chain([models::bouncing_ball(1.0, 0.0, 10.0, 0.5).unwrap()])
        {
            let traj = simulate(&model, h, 2.0);
            let vmax = traj.samples.iter().map(|s| s.v.norm()).fold(0.0, f64::max);
            let drift = scheme::max_feasibility_drift(&traj, &model.constraint).unwrap();
            assert!(
                drift <= (vmax + 1.0) * h,
                "{} h={h}: {drift} > {}",
                model.name,
                (vmax + 1.0) * h
            );
        }
    }
}
