use std::fs::File;

use impactsim::analysis::detect_impacts;
use impactsim::io::{self, TrajectoryRow, TrajectoryTable};
use impactsim::models;
use impactsim::scheme::{self, SchemeConfig};
use proptest::prelude::*;

fn any_float() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>(),
        Just(f64::NAN),
        Just(-0.0),
        Just(f64::INFINITY),
        Just(f64::MIN_POSITIVE),
    ]
}

fn row(dim: usize) -> impl Strategy<Value = TrajectoryRow> {
    (
        any_float(),
        prop::collection::vec(any_float(), dim),
        prop::collection::vec(any_float(), dim),
        any_float(),
        any_float(),
        any_float(),
        any::<bool>(),
        0usize..100,
    )
        .prop_map(
            |(t, u, v, phi, energy, reaction_norm, active, fp_iters)| TrajectoryRow {
                t,
                u,
                v,
                phi,
                energy,
                reaction_norm,
                active,
                fp_iters,
            },
        )
}

fn table() -> impl Strategy<Value = TrajectoryTable> {
    (1usize..4).prop_flat_map(|dim| {
        prop::collection::vec(row(dim), 0..20).prop_map(move |rows| TrajectoryTable { dim, rows })
    })
}

proptest! {
    #[test]
    fn tables_survive_a_file(t in table()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        t.write_csv(File::create(&path).unwrap()).unwrap();
        let back = TrajectoryTable::read_csv(File::open(&path).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&t), "{:?} != {:?}", back, t);
    }
}

#[test]
fn impacts_file_marks_grazes_and_has_one_line_per_event() {
    let model = models::bouncing_ball(1.0, 0.0, 10.0, 0.5).unwrap();
    let cfg = SchemeConfig {
        h: 1e-3,
        t_end: 1.0,
        ..SchemeConfig::default()
    };
    let traj = scheme::run(
        &model.initial,
        &cfg,
        &model.force,
        &model.metric,
        &model.constraint,
    )
    .unwrap();
    let report = detect_impacts(&traj, &model.constraint, &model.metric).unwrap();
    let mut buf = Vec::new();
    io::write_impacts_csv(&report, 1, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("t,x_1,measured_e,tangential_error,energy_jump")
    );
    assert_eq!(lines.count(), report.events.len());
    assert!(!report.events.is_empty());
}
