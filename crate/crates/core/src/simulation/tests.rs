use nalgebra::DVector;

use super::*;
use crate::dynamics::total_energy;
use crate::model::load_model;

fn fixture(name: &str) -> KinematicModel {
    load_model(format!("{}/tests/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn frictionless(model: &KinematicModel) -> Vec<FrictionParams> {
    vec![FrictionParams::default(); model.dofs()]
}

fn leg_scenario(extra: &str) -> Scenario {
    let text = format!(
        r#"{{
  "name": "leg",
  "model": "unused.json",
  "duration": 0.01,
  "seed": 3,
  "initial": {{"positions": {{"hip": 0.2, "knee": 0.4}}}},
  "reference": {{"kind": "hold"}},
  "controller": {{
    "law": {{"kind": "pd_gravity", "kp": 40.0, "kd": 2.0}},
    "low_level": {{"kp": 0.5, "ki": 5.0, "integral_limit": 2.0, "current_limit": 30.0}}
  }},
  "estimator": {{"contact_frames": ["thigh_contact"]}},
  "estimator_choice": "both"{extra}
}}"#
    );
    Scenario::from_json(&text).unwrap()
}

#[test]
fn zero_command_without_gravity_stays_at_rest() {
    let mut model = fixture("two_link_leg");
    model.gravity = Vec3::zeros();
    let plant = Plant::new(&model, RigidTransform::identity(), frictionless(&model), &[]).unwrap();
    let mut st = plant.state(dv(&[0.3, -0.7]), DVector::zeros(2));
    let zero = DVector::zeros(2);
    for k in 0..1000 {
        st = plant.step(&st, &zero, k as f64 * 1e-3, 1e-3).unwrap();
    }
    assert_eq!(st.s, dv(&[0.3, -0.7]));
    assert_eq!(st.s_dot, DVector::zeros(2));
}

#[test]
fn pendulum_energy_is_conserved() {
    let model = fixture("pendulum");
    let plant = Plant::new(&model, RigidTransform::identity(), frictionless(&model), &[]).unwrap();
    let mut st = plant.state(dv(&[0.9]), dv(&[0.0]));
    let e0 = total_energy(plant.tree(), &st).unwrap();
    // m·g·l_c sets the energy scale
    let scale = 2.0 * 9.81 * 0.5;
    let zero = DVector::zeros(1);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..100_000 {
        st = plant.step(&st, &zero, k as f64 * h, h).unwrap();
        if k % 1000 == 0 {
            worst = worst.max((total_energy(plant.tree(), &st).unwrap() - e0).abs());
        }
    }
    worst = worst.max((total_energy(plant.tree(), &st).unwrap() - e0).abs());
    assert!(worst / scale < 1e-6, "relative drift {}", worst / scale);
}

#[test]
fn gravity_balancing_current_holds_position() {
    let model = fixture("pendulum");
    let plant = Plant::new(&model, RigidTransform::identity(), frictionless(&model), &[]).unwrap();
    let theta: f64 = 0.5;
    // hinge axis −y: positive angles lift the rod, gravity torque is
    // −m·g·l_c·cos θ about the hinge
    let g = -2.0 * 9.81 * 0.5 * theta.cos();
    let current = dv(&[-g / (100.0 * 0.1)]);
    let mut st = plant.state(dv(&[theta]), dv(&[0.0]));
    let h = 1e-4;
    for k in 0..50_000 {
        st = plant.step(&st, &current, k as f64 * h, h).unwrap();
        assert!((st.s[0] - theta).abs() < 1e-4, "drifted to {} at step {k}", st.s[0]);
    }
}

#[test]
fn plant_step_rejects_bad_length() {
    let model = fixture("pendulum");
    let plant = Plant::new(&model, RigidTransform::identity(), frictionless(&model), &[]).unwrap();
    let st = plant.state(dv(&[0.0]), dv(&[0.0]));
    assert!(plant.step(&st, &DVector::zeros(1), 0.0, 0.0).is_err());
    assert!(Plant::new(&model, RigidTransform::identity(), vec![], &[]).is_err());
}

#[test]
fn joint_torque_subtracts_friction() {
    let model = fixture("pendulum");
    let f = FrictionParams::new(1.0, 2.0, 0.5).unwrap();
    let plant = Plant::new(&model, RigidTransform::identity(), vec![f], &[]).unwrap();
    let tau = plant.joint_torque(&dv(&[0.3]), &dv(&[0.4]));
    assert!((tau[0] - (100.0 * 0.1 * 0.3 - f.torque(0.4))).abs() < 1e-14);
}

#[test]
fn noiseless_readings_match_closed_form() {
    let model = fixture("pendulum");
    let synth = SensorSynth::new(&model).unwrap();
    let (theta, omega, alpha): (f64, f64, f64) = (0.4, 1.3, 0.7);
    let st = RobotState {
        s: dv(&[theta]),
        s_dot: dv(&[omega]),
        ..RobotState::at_rest(1)
    };
    let mut nu_dot = DVector::zeros(7);
    nu_dot[6] = alpha;
    let (u, y) = synthesize_measurements(&synth, &st, &nu_dot, &dv(&[2.5]), &[], &SensorNoiseSpec::noiseless(), 1, 0).unwrap();
    assert_eq!(u.s, st.s);
    assert!((y.s_dot[0] - omega).abs() < 1e-10);
    assert!((y.current[0] - 2.5).abs() < 1e-10);
    // tip at x = 1 on a rod turning about −y
    let g = 9.81;
    let acc = Vec3::new(-omega * omega + g * theta.sin(), 0.0, alpha + g * theta.cos());
    assert!((y.accelerometer[0] - acc).norm() < 1e-10, "{:?}", y.accelerometer[0]);
    assert!((y.gyroscope[0] - Vec3::new(0.0, -omega, 0.0)).norm() < 1e-10);
    assert!(y.ft.is_empty());
}

#[test]
fn noise_has_configured_spread() {
    let model = fixture("pendulum");
    let synth = SensorSynth::new(&model).unwrap();
    let st = RobotState {
        s: dv(&[0.2]),
        s_dot: dv(&[0.5]),
        ..RobotState::at_rest(1)
    };
    let nu_dot = DVector::zeros(7);
    let noise = SensorNoiseSpec {
        encoder: 0.01,
        current: 0.2,
        gyroscope: 0.05,
        ..SensorNoiseSpec::noiseless()
    };
    let n = 100_000;
    let (mut enc, mut cur, mut gyr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let (_, y) = synthesize_measurements(&synth, &st, &nu_dot, &dv(&[1.0]), &[], &noise, 42, k as u64).unwrap();
        enc.push(y.s_dot[0] - 0.5);
        cur.push(y.current[0] - 1.0);
        gyr.push(y.gyroscope[0].z);
    }
    let sd = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    for (got, want) in [(sd(&enc), 0.01), (sd(&cur), 0.2), (sd(&gyr), 0.05)] {
        assert!((got / want - 1.0).abs() < 0.02, "std {got} vs {want}");
    }
}

#[test]
fn bias_shifts_readings() {
    let model = fixture("pendulum");
    let synth = SensorSynth::new(&model).unwrap();
    let st = RobotState::at_rest(1);
    let noise = SensorNoiseSpec {
        bias: Some(SensorBias {
            encoder: 0.1,
            current: -0.2,
            ..SensorBias::default()
        }),
        ..SensorNoiseSpec::noiseless()
    };
    let (_, y) = synthesize_measurements(&synth, &st, &DVector::zeros(7), &dv(&[0.0]), &[], &noise, 0, 0).unwrap();
    assert_eq!(y.s_dot[0], 0.1);
    assert_eq!(y.current[0], -0.2);
}

#[test]
fn fixed_seed_gives_identical_measurements() {
    let model = fixture("two_link_leg");
    let synth = SensorSynth::new(&model).unwrap();
    let st = RobotState {
        s: dv(&[0.1, 0.5]),
        s_dot: dv(&[0.2, -0.3]),
        ..RobotState::at_rest(2)
    };
    let nd = DVector::zeros(8);
    let i = dv(&[0.4, 0.1]);
    let noise = SensorNoiseSpec::default();
    let a = synthesize_measurements(&synth, &st, &nd, &i, &[], &noise, 9, 17).unwrap().1;
    let b = synthesize_measurements(&synth, &st, &nd, &i, &[], &noise, 9, 17).unwrap().1;
    let c = synthesize_measurements(&synth, &st, &nd, &i, &[], &noise, 9, 18).unwrap().1;
    let d = synthesize_measurements(&synth, &st, &nd, &i, &[], &noise, 10, 17).unwrap().1;
    assert_eq!(a, b);
    assert_ne!(a.s_dot, c.s_dot);
    assert_ne!(a.s_dot, d.s_dot);
}

#[test]
fn ft_reading_carries_child_side_load() {
    let model = fixture("leg_with_ft");
    let synth = SensorSynth::new(&model).unwrap();
    assert_eq!(synth.sensors().ft.len(), 1);
    let n = model.dofs();
    let st = RobotState::at_rest(n);
    let (_, y) = synthesize_measurements(&synth, &st, &DVector::zeros(6 + n), &DVector::zeros(n), &[], &SensorNoiseSpec::noiseless(), 0, 0).unwrap();
    // at rest the sensor supports the weight of everything below it
    let f = y.ft[0].to_vector();
    let below: f64 = {
        let subs = crate::model::split_at_ft_sensors(&model).unwrap();
        let child = subs.iter().find(|s| !s.owns_base).unwrap();
        child.links.iter().map(|&l| model.links[l].mass).sum()
    };
    assert!((linear(&f).norm() - below * 9.81).abs() < 1e-9, "{f}");
}

fn row(t: f64, a: &[f64], b: &[f64], contact: bool) -> LogRow {
    let z = DVector::zeros(a.len());
    LogRow {
        t,
        s: z.clone(),
        s_dot: z.clone(),
        s_dot_meas: z.clone(),
        current_meas: z.clone(),
        tau_true: dv(a),
        tau_applied: z.clone(),
        tau_hat: dv(b),
        tau_des: z.clone(),
        tau_ext: z.clone(),
        current: z,
        clamped: vec![false; a.len()],
        contact,
        task_error: None,
        innovation: [0.0; 5],
    }
}

fn log_of(rows: Vec<LogRow>) -> RunLog {
    RunLog {
        scenario: "t".into(),
        estimator: EstimatorKind::Ukf,
        joints: vec!["a".into(), "b".into()],
        dt: 1e-3,
        rows,
        contact_windows: vec![],
        abort: None,
    }
}

#[test]
fn rmse_of_identical_series_is_zero() {
    let log = log_of((0..10).map(|k| row(k as f64, &[k as f64, 1.0], &[k as f64, 1.0], false)).collect());
    let r = compute_rmse(&log, Signal::TauHat, Signal::TauTrue, Window::All).unwrap();
    assert_eq!(r, DVector::zeros(2));
}

#[test]
fn rmse_of_constant_offset_is_the_offset() {
    let log = log_of((0..50).map(|k| row(k as f64, &[k as f64, -2.0], &[k as f64 + 0.25, -2.0 - 1.5], false)).collect());
    let r = compute_rmse(&log, Signal::TauHat, Signal::TauTrue, Window::All).unwrap();
    assert!((r[0] - 0.25).abs() < 1e-12 && (r[1] - 1.5).abs() < 1e-12, "{r}");
}

#[test]
fn rmse_matches_direct_sum_and_respects_windows() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<LogRow> = (0..200)
        .map(|k| {
            let a = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let b = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            row(k as f64 * 0.01, &a, &b, k % 3 == 0)
        })
        .collect();
    let direct = |keep: &dyn Fn(&LogRow) -> bool, j: usize| {
        let sel: Vec<&LogRow> = rows.iter().filter(|r| keep(r)).collect();
        (sel.iter().map(|r| (r.tau_hat[j] - r.tau_true[j]).powi(2)).sum::<f64>() / sel.len() as f64).sqrt()
    };
    let log = log_of(rows.clone());
    let all = compute_rmse(&log, Signal::TauHat, Signal::TauTrue, Window::All).unwrap();
    let con = compute_rmse(&log, Signal::TauHat, Signal::TauTrue, Window::Contact).unwrap();
    let late = compute_rmse(&log, Signal::TauHat, Signal::TauTrue, Window::After(1.0)).unwrap();
    for j in 0..2 {
        assert!((all[j] - direct(&|_| true, j)).abs() < 1e-12);
        assert!((con[j] - direct(&|r| r.contact, j)).abs() < 1e-12);
        assert!((late[j] - direct(&|r| r.t >= 1.0, j)).abs() < 1e-12);
    }
    let none = compute_rmse(&log, Signal::TauHat, Signal::TauTrue, Window::After(1e9)).unwrap();
    assert_eq!(none, DVector::zeros(2));
}

#[test]
fn rmse_rejects_mismatched_lengths() {
    assert!(matches!(
        rmse(&[dv(&[1.0])], &[]),
        Err(SimulationError::Length { left: 1, right: 0 })
    ));
    assert!(rmse(&[dv(&[1.0])], &[dv(&[1.0, 2.0])]).is_err());
}

#[test]
fn contact_profiles_have_expected_shape() {
    let ev = |profile| ContactEvent {
        frame: "x".into(),
        start: 1.0,
        end: 3.0,
        profile,
        wrench: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        measured_by_ft: false,
    };
    let ramp = ev(Profile::Ramp { rise: 0.5 });
    for (t, want) in [(0.9, 0.0), (1.25, 0.5), (2.0, 1.0), (2.75, 0.5), (3.0, 0.0)] {
        assert!((ramp.scale(t) - want).abs() < 1e-12, "ramp at {t}");
    }
    let sine = ev(Profile::HalfSine);
    assert!((sine.scale(2.0) - 1.0).abs() < 1e-12);
    assert!((sine.scale(1.5) - (0.25 * std::f64::consts::PI).sin()).abs() < 1e-12);
    let flat = ev(Profile::Constant);
    assert_eq!(flat.scale(1.0), 1.0);
    assert!(!flat.is_active(3.0));
    assert!(flat.is_active(1.0));
}

#[test]
fn contact_wrench_is_rotated_into_frame() {
    let model = fixture("two_link_leg");
    let event = ContactEvent {
        frame: "thigh_contact".into(),
        start: 0.0,
        end: 1.0,
        profile: Profile::Constant,
        wrench: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        measured_by_ft: false,
    };
    let plant = Plant::new(&model, RigidTransform::identity(), frictionless(&model), &[event]).unwrap();
    let theta: f64 = 0.3;
    let st = plant.state(dv(&[theta, 0.0]), DVector::zeros(2));
    let w = plant.contact_wrenches(&st, 0.5, false).unwrap();
    assert_eq!(w.len(), 1);
    // thigh turned by θ about +y, so world x reads (cos θ, 0, sin θ) locally
    let f = linear(&w[0].1.to_vector());
    assert!((f - Vec3::new(10.0 * theta.cos(), 0.0, 10.0 * theta.sin())).norm() < 1e-12, "{f}");
    assert!(plant.contact_wrenches(&st, 1.0, false).unwrap().is_empty());
}

#[test]
fn minimal_run_produces_one_row_per_tick() {
    let model = fixture("two_link_leg");
    let sc = leg_scenario("");
    let logs = run_with_model(&sc, &model).unwrap();
    assert_eq!(logs.len(), 2);
    for log in &logs {
        assert!(log.abort.is_none(), "{:?}", log.abort);
        assert_eq!(log.rows.len(), 10);
        assert_eq!(log.joints, vec!["hip", "knee"]);
        assert!(log.rows.iter().all(|r| r.tau_hat.iter().all(|v| v.is_finite())));
        let csv = log.to_csv_string();
        assert_eq!(csv.lines().count(), 11);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), log.header().len());
    }
    assert_eq!(logs[0].estimator, EstimatorKind::Ukf);
    assert_eq!(logs[1].estimator, EstimatorKind::Rnea);
}

#[test]
fn recorded_dataset_lines_up_with_log() {
    let model = fixture("two_link_leg");
    let sc = leg_scenario("");
    let exp = Experiment::new(&sc, &model).unwrap();
    let (log, data) = exp.record(EstimatorKind::Ukf).unwrap();
    assert_eq!(data.inputs.len(), log.rows.len());
    assert_eq!(data.measurements.len(), log.rows.len());
    for (r, t) in log.rows.iter().zip(&data.truth) {
        assert_eq!(&r.tau_true, t);
    }
    assert_eq!(exp.run(EstimatorKind::Ukf).unwrap().rows, log.rows);
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let model = fixture("two_link_leg");
    let a = run_with_model(&leg_scenario(""), &model).unwrap();
    let b = run_with_model(&leg_scenario(""), &model).unwrap();
    assert_eq!(a[0].to_csv_string(), b[0].to_csv_string());
    let mut other = leg_scenario("");
    other.seed = 4;
    let c = run_with_model(&other, &model).unwrap();
    assert_ne!(a[0].to_csv_string(), c[0].to_csv_string());
}

#[test]
fn scenario_round_trips_through_json() {
    let sc = leg_scenario(
        r#", "contacts": [{"frame": "thigh_contact", "start": 0.0, "end": 0.005, "profile": {"kind": "half_sine"},
           "wrench": [5.0, 0.0, 0.0, 0.0, 0.0, 0.0], "measured_by_ft": false}]"#,
    );
    assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let model = fixture("two_link_leg");
    let bad = |f: &dyn Fn(&mut Scenario)| {
        let mut sc = leg_scenario("");
        f(&mut sc);
        matches!(Experiment::new(&sc, &model), Err(SimulationError::Config(_)))
    };
    assert!(bad(&|s| s.duration = 0.0));
    assert!(bad(&|s| s.duration = f64::NAN));
    assert!(bad(&|s| s.rates.hlc_hz = 300.0));
    assert!(bad(&|s| s.rates.plant_dt = 3e-4));
    assert!(bad(&|s| {
        s.initial.positions.insert("elbow".into(), 0.0);
    }));
    assert!(bad(&|s| s.controller.zero_torque.push("elbow".into())));
    assert!(bad(&|s| s.controller.low_level.current_limit = -1.0));
    assert!(bad(&|s| s.noise.encoder = -0.1));
    assert!(bad(&|s| s.contacts.push(ContactEvent {
        frame: "thigh_contact".into(),
        start: 0.0,
        end: 0.005,
        profile: Profile::Constant,
        wrench: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        // nothing in this model can see it
        measured_by_ft: true,
    })));
    assert!(bad(&|s| s.contacts.push(ContactEvent {
        frame: "nowhere".into(),
        start: 0.0,
        end: 0.005,
        profile: Profile::Constant,
        wrench: [0.0; 6],
        measured_by_ft: false,
    })));
    assert!(bad(&|s| s.contacts.push(ContactEvent {
        frame: "thigh_contact".into(),
        start: 0.0,
        end: 1.0,
        profile: Profile::Constant,
        wrench: [0.0; 6],
        measured_by_ft: false,
    })));
}

#[test]
fn unknown_fields_are_rejected() {
    let text = leg_scenario("").to_json().replacen("\"seed\"", "\"sede\": 1, \"seed\"", 1);
    assert!(Scenario::from_json(&text).is_err());
}

#[test]
fn random_pushes_are_seeded_and_fit_their_slots() {
    let model = fixture("two_link_leg");
    let mut sc = leg_scenario("");
    sc.duration = 10.0;
    sc.random_pushes = Some(RandomPushes {
        frames: vec!["thigh_contact".into(), "shank_contact".into()],
        count: 5,
        start: 0.5,
        end: 9.5,
        min_duration: 0.4,
        max_duration: 1.2,
        min_force: 10.0,
        max_force: 30.0,
        axes: [true, false, true],
    });
    sc.validate(&model).unwrap();
    let a = sc.contact_events(&model).unwrap();
    assert_eq!(a, sc.contact_events(&model).unwrap());
    assert_eq!(a.len(), 5);
    let slot = 9.0 / 5.0;
    for (k, e) in a.iter().enumerate() {
        let lo = 0.5 + k as f64 * slot;
        assert!(e.start >= lo && e.end <= lo + slot + 1e-12, "push {k} at [{}, {})", e.start, e.end);
        let d = e.end - e.start;
        assert!((0.4..=1.2).contains(&d));
        let f = Vec3::new(e.wrench[0], e.wrench[1], e.wrench[2]);
        assert!((10.0..=30.0 + 1e-9).contains(&f.norm()));
        assert_eq!(e.wrench[1], 0.0);
        assert!(!e.measured_by_ft);
        assert_eq!(e.profile, Profile::HalfSine);
    }
    sc.seed += 1;
    assert_ne!(a, sc.contact_events(&model).unwrap());
}

#[test]
fn estimator_choice_parses() {
    assert_eq!("both".parse::<EstimatorChoice>().unwrap().kinds().len(), 2);
    assert_eq!("rnea_baseline".parse::<EstimatorChoice>().unwrap(), EstimatorChoice::Rnea);
    assert!("kalman".parse::<EstimatorChoice>().is_err());
}
