use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dynamics::spatial::{rotation_exp, Vec3};
use crate::model::parse_model;

const LEG: &str = include_str!("../../tests/fixtures/two_link_leg.json");

fn leg() -> RigidBodyTree {
    RigidBodyTree::from_model(&parse_model(LEG).unwrap()).unwrap()
}

fn state(s: [f64; 2], s_dot: [f64; 2]) -> RobotState {
    RobotState {
        s: DVector::from_row_slice(&s),
        s_dot: DVector::from_row_slice(&s_dot),
        ..RobotState::at_rest(2)
    }
}

fn task_at(tree: &RigidBodyTree, st: &RobotState, frame: &str) -> CartesianTask {
    let pose = frame_pose(tree, st, tree.frame_id(frame).unwrap()).unwrap();
    CartesianTask {
        frame: frame.into(),
        position: pose.translation,
        rotation: pose.rotation,
        linear_velocity: Vec3::zeros(),
        angular_velocity: Vec3::zeros(),
        linear_acceleration: Vec3::zeros(),
        angular_acceleration: Vec3::zeros(),
        kp_linear: 0.0,
        kd_linear: 0.0,
        kp_angular: 0.0,
        kd_angular: 0.0,
        weight: 1.0,
        axis_weights: [1.0; 6],
    }
}

fn joint_task(s_des: [f64; 2], weight: f64) -> JointRegularizationTask {
    JointRegularizationTask::hold(DVector::from_row_slice(&s_des), 100.0, 20.0, weight)
}

#[test]
fn on_target_at_rest_residual_is_zero() {
    let tree = leg();
    let st = state([0.3, -0.6], [0.0, 0.0]);
    let task = task_at(&tree, &st, "shank_contact");
    let res = cartesian_residual(&tree, &st, &task).unwrap();
    assert!(res.offset.amax() < 1e-12);
}

#[test]
fn position_offset_with_only_kp() {
    let tree = leg();
    let st = state([0.3, -0.6], [0.0, 0.0]);
    let mut task = task_at(&tree, &st, "shank_contact");
    task.position.x += 0.02;
    task.kp_linear = 50.0;
    let t = cartesian_targets(&tree, &st, &task).unwrap();
    assert_relative_eq!(t, Vec6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-12);
}

#[test]
fn rotation_error_about_z_maps_to_angle_times_axis() {
    let tree = leg();
    let st = state([0.4, -0.9], [0.0, 0.0]);
    for theta in [0.1f64, 1.2, 2.9] {
        let mut task = task_at(&tree, &st, "thigh_contact");
        let rz = Mat3::new(theta.cos(), -theta.sin(), 0.0, theta.sin(), theta.cos(), 0.0, 0.0, 0.0, 1.0);
        task.rotation = rz * task.rotation;
        task.kp_angular = 7.0;
        let t = cartesian_targets(&tree, &st, &task).unwrap();
        assert_relative_eq!(angular(&t), Vec3::new(0.0, 0.0, 7.0 * theta), epsilon = 1e-9);
        assert!(linear(&t).norm() < 1e-12);
    }
}

/// The affine map must reproduce the second derivative of the frame origin
/// along a path with constant joint acceleration.
#[test]
fn residual_matches_finite_difference_of_frame_motion() {
    let tree = leg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let id = tree.frame_id("shank_contact").unwrap();
    for _ in 0..10 {
        let s = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let sd = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let sdd = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
        let at = |t: f64| {
            let st = RobotState {
                s: &s + &sd * t + &sdd * (0.5 * t * t),
                ..RobotState::at_rest(2)
            };
            frame_pose(&tree, &st, id).unwrap()
        };
        let h = 1e-4;
        let (pm, p0, pp) = (at(-h), at(0.0), at(h));
        let p_ddot = (pp.translation - 2.0 * p0.translation + pm.translation) / (h * h);
        let r_dot_plus = (pp.rotation - pm.rotation) / (2.0 * h);
        let st = RobotState {
            s: s.clone(),
            s_dot: sd.clone(),
            ..RobotState::at_rest(2)
        };
        let omega_skew = r_dot_plus * p0.rotation.transpose();
        let omega = Vec3::new(omega_skew[(2, 1)], omega_skew[(0, 2)], omega_skew[(1, 0)]);
        let task = task_at(&tree, &st, "shank_contact");
        let res = cartesian_residual(&tree, &st, &task).unwrap();
        let mut nu_dot = DVector::zeros(8);
        nu_dot.rows_mut(6, 2).copy_from(&sdd);
        let target = cartesian_targets(&tree, &st, &task).unwrap();
        let acc = DVector::from_column_slice(target.as_slice()) - res.evaluate(&nu_dot);
        assert_relative_eq!(Vec3::new(acc[0], acc[1], acc[2]), p_ddot, epsilon = 1e-5);
        let twist = frame_velocity(&tree, &st, id).unwrap();
        assert_relative_eq!(p0.rotation * angular(&twist), omega, epsilon = 1e-6);
    }
}

#[test]
fn joint_target_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = |rng: &mut ChaCha8Rng| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let st = state([rng.random(), rng.random()], [rng.random(), rng.random()]);
    let task = JointRegularizationTask {
        s_des: v(&mut rng),
        s_dot_des: v(&mut rng),
        s_ddot_des: v(&mut rng),
        kp: v(&mut rng).map(|x| x.abs() + 1.0),
        kd: v(&mut rng).map(|x| x.abs() + 1.0),
        weight: 1.0,
    };
    let got = joint_acceleration_target(&st, &task).unwrap();
    for i in 0..2 {
        let want = task.s_ddot_des[i] + task.kd[i] * (task.s_dot_des[i] - st.s_dot[i]) + task.kp[i] * (task.s_des[i] - st.s[i]);
        assert!((got[i] - want).abs() < 1e-12);
    }
    let res = joint_regularization_residual(&st, &task).unwrap();
    let mut nu_dot = DVector::zeros(8);
    nu_dot[6] = got[0];
    nu_dot[7] = got[1];
    assert!(res.evaluate(&nu_dot).amax() < 1e-12);
}

#[test]
fn joint_task_alone_yields_inverse_dynamics() {
    let tree = leg();
    let st = state([0.2, -0.5], [0.7, -1.1]);
    let task = joint_task([0.5, -0.2], 1.0);
    let tau = solve_hlc(&tree, &st, &HlcTasks { cartesian: vec![], joint: Some(task.clone()) }, &HlcOptions::default()).unwrap();
    let sdd = joint_acceleration_target(&st, &task).unwrap();
    let m = mass_matrix(&tree, &st).unwrap();
    let h = bias_forces(&tree, &st).unwrap();
    let want = m.view((6, 6), (2, 2)) * &sdd + h.rows(6, 2);
    assert_relative_eq!(tau, want, epsilon = 1e-8);
}

#[test]
fn zero_gains_at_rest_yield_gravity_compensation() {
    let tree = leg();
    let st = state([0.3, -0.8], [0.0, 0.0]);
    let task = JointRegularizationTask {
        s_des: DVector::from_row_slice(&[1.0, 1.0]),
        s_dot_des: DVector::zeros(2),
        s_ddot_des: DVector::zeros(2),
        kp: DVector::from_element(2, 1e-300),
        kd: DVector::from_element(2, 1e-300),
        weight: 1.0,
    };
    let tau = solve_hlc(&tree, &st, &HlcTasks { cartesian: vec![], joint: Some(task) }, &HlcOptions::default()).unwrap();
    let g = rnea(&tree, &st, &DVector::zeros(8), &[]).unwrap().joint;
    assert_relative_eq!(tau, g, epsilon = 1e-9);
    assert_relative_eq!(gravity_compensation(&tree, &st).unwrap(), g, epsilon = 1e-12);
}

#[test]
fn zero_weight_task_is_irrelevant() {
    let tree = leg();
    let st = state([0.2, -0.5], [0.3, 0.1]);
    let joint = joint_task([0.5, -0.2], 1.0);
    let alone = solve_hlc(&tree, &st, &HlcTasks { cartesian: vec![], joint: Some(joint.clone()) }, &HlcOptions::default()).unwrap();
    let mut cart = task_at(&tree, &st, "shank_contact");
    cart.position.x += 0.1;
    cart.kp_linear = 400.0;
    cart.weight = 0.0;
    let both = solve_hlc(&tree, &st, &HlcTasks { cartesian: vec![cart], joint: Some(joint) }, &HlcOptions::default()).unwrap();
    assert_relative_eq!(alone, both, epsilon = 1e-9);
}

#[test]
fn common_weight_scaling_leaves_argmin_unchanged() {
    let tree = leg();
    let st = state([0.2, -0.5], [0.3, 0.1]);
    let mut cart = task_at(&tree, &st, "shank_contact");
    cart.position.x += 0.05;
    cart.kp_linear = 100.0;
    cart.kd_linear = 20.0;
    cart.axis_weights = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let tasks = |scale: f64| HlcTasks {
        cartesian: vec![CartesianTask { weight: 10.0 * scale, ..cart.clone() }],
        joint: Some(joint_task([0.0, -0.4], 0.01 * scale)),
    };
    let a = solve_hlc(&tree, &st, &tasks(1.0), &HlcOptions::default()).unwrap();
    let b = solve_hlc(&tree, &st, &tasks(37.0), &HlcOptions::default()).unwrap();
    assert_relative_eq!(a, b, epsilon = 1e-9);
}

#[test]
fn solution_satisfies_dynamics() {
    let tree = leg();
    let st = state([0.6, -1.0], [1.5, -0.4]);
    let mut cart = task_at(&tree, &st, "shank_contact");
    cart.position.z += 0.05;
    cart.kp_linear = 300.0;
    cart.kp_angular = 30.0;
    let tasks = HlcTasks {
        cartesian: vec![cart],
        joint: Some(joint_task([0.0, 0.0], 0.1)),
    };
    let qp = build_hlc(&tree, &st, &tasks, &HlcOptions::default()).unwrap();
    let z = qp.solve().unwrap();
    assert!((&qp.eq_matrix * &z - &qp.eq_rhs).amax() < 1e-8);
    let nu_dot = z.rows(0, 8).into_owned();
    let tau = z.rows(8, 2).into_owned();
    let id = rnea(&tree, &st, &nu_dot, &[]).unwrap();
    assert_relative_eq!(id.joint, tau, epsilon = 1e-8);
}

#[test]
fn rigid_contact_holds_frame_still() {
    let tree = leg();
    let st = state([0.3, -0.7], [0.0, 0.0]);
    let options = HlcOptions {
        rigid_contacts: vec!["shank_contact".into()],
        ..HlcOptions::default()
    };
    let tasks = HlcTasks {
        cartesian: vec![],
        joint: Some(joint_task([0.0, 0.0], 1.0)),
    };
    let qp = build_hlc(&tree, &st, &tasks, &options).unwrap();
    let z = qp.solve().unwrap();
    let id = tree.frame_id("shank_contact").unwrap();
    let jac = frame_jacobian(&tree, &st, id).unwrap();
    let acc = &jac * z.rows(0, 8);
    assert!(acc.amax() < 1e-8);
}

#[test]
fn duplicated_contact_rows_are_dropped() {
    let tree = leg();
    let st = state([0.3, -0.7], [0.0, 0.0]);
    let options = HlcOptions {
        rigid_contacts: vec!["shank_contact".into(), "shank_contact".into()],
        ..HlcOptions::default()
    };
    let tasks = HlcTasks {
        cartesian: vec![],
        joint: Some(joint_task([0.0, 0.0], 1.0)),
    };
    let tau = solve_hlc(&tree, &st, &tasks, &options).unwrap();
    assert!(tau.iter().all(|t| t.is_finite()));
}

#[test]
fn inconsistent_constraints_are_infeasible() {
    let qp = QpProblem {
        hessian: DMatrix::identity(2, 2),
        gradient: DVector::zeros(2),
        eq_matrix: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
        eq_rhs: DVector::from_row_slice(&[1.0, 3.0]),
    };
    assert!(matches!(qp.solve(), Err(ControlError::Infeasible { .. })));
}

#[test]
fn flat_cost_is_reported_unbounded() {
    let qp = QpProblem {
        hessian: DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.0])),
        gradient: DVector::from_row_slice(&[0.0, 1.0]),
        eq_matrix: DMatrix::zeros(0, 2),
        eq_rhs: DVector::zeros(0),
    };
    match qp.solve() {
        Err(ControlError::Unbounded { direction_norm, curvature }) => {
            assert!((direction_norm - 1.0).abs() < 1e-12);
            assert!(curvature.abs() < 1e-12);
        }
        other => panic!("expected unbounded, got {other:?}"),
    }
}

#[test]
fn missing_tasks_and_bad_frames_are_errors() {
    let tree = leg();
    let st = state([0.0, 0.0], [0.0, 0.0]);
    assert!(matches!(solve_hlc(&tree, &st, &HlcTasks::default(), &HlcOptions::default()), Err(ControlError::NoTask)));
    let mut task = task_at(&tree, &st, "shank_contact");
    task.frame = "nowhere".into();
    assert!(matches!(cartesian_residual(&tree, &st, &task), Err(ControlError::Dynamics(_))));
    task.frame = "shank_contact".into();
    task.rotation = rotation_exp(&Vec3::new(0.0, 0.0, 0.3)) * 1.1;
    assert!(matches!(cartesian_residual(&tree, &st, &task), Err(ControlError::InvalidTask(_))));
}

#[test]
fn pd_gravity_adds_pd_to_static_torque() {
    let tree = leg();
    let st = state([0.3, -0.8], [0.5, 0.0]);
    let g = gravity_compensation(&tree, &st).unwrap();
    let s_ref = DVector::from_row_slice(&[0.4, -0.8]);
    let tau = pd_gravity(&tree, &st, &s_ref, &DVector::zeros(2), &DVector::from_element(2, 10.0), &DVector::from_element(2, 2.0)).unwrap();
    assert_relative_eq!(tau[0], g[0] + 10.0 * 0.1 - 2.0 * 0.5, epsilon = 1e-12);
    assert_relative_eq!(tau[1], g[1], epsilon = 1e-12);
}

fn drive(friction: FrictionParams) -> JointDrive {
    JointDrive {
        gear_ratio: 100.0,
        torque_constant: 0.05,
        friction,
    }
}

fn one(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

#[test]
fn matched_estimate_gives_pure_feedforward() {
    let gains = LowLevelGains::uniform(1, 2.0, 5.0, 1.0, 10.0);
    let out = low_level_step(&one(3.0), &one(3.0), &one(0.0), &[drive(FrictionParams::new(2.0, 3.0, 0.3).unwrap())], &gains, 1e-3, &one(0.0)).unwrap();
    assert_relative_eq!(out.current[0], 3.0 / 5.0, epsilon = 1e-15);
    assert!(!out.clamped[0]);
}

#[test]
fn velocity_adds_friction_compensation() {
    let gains = LowLevelGains::uniform(1, 2.0, 5.0, 1.0, 10.0);
    let p = FrictionParams::new(2.0, 3.0, 0.3).unwrap();
    let still = low_level_step(&one(3.0), &one(2.5), &one(0.0), &[drive(p)], &gains, 1e-3, &one(0.01)).unwrap();
    let moving = low_level_step(&one(3.0), &one(2.5), &one(0.4), &[drive(p)], &gains, 1e-3, &one(0.01)).unwrap();
    let want = (2.0 * (3.0 * 0.4f64).tanh() + 0.3 * 0.4) / 5.0;
    assert!((moving.current[0] - still.current[0] - want).abs() < 1e-14);
}

#[test]
fn constant_error_integrates_as_discrete_sum() {
    let ki = 4.0;
    let gains = LowLevelGains::uniform(1, 0.0, ki, 100.0, 1e3);
    let (dt, e, steps) = (1e-3, 0.7, 500);
    let mut integral = one(0.0);
    let mut out = None;
    for _ in 0..steps {
        let o = low_level_step(&one(e), &one(0.0), &one(0.0), &[drive(FrictionParams::default())], &gains, dt, &integral).unwrap();
        integral = o.integral.clone();
        out = Some(o);
    }
    let current = out.unwrap().current[0];
    let t = steps as f64 * dt;
    assert!((current * 5.0 - e - ki * e * t).abs() < 1e-9);
}

#[test]
fn integral_clamps_at_limit() {
    let gains = LowLevelGains::uniform(1, 0.0, 1.0, 0.05, 1e3);
    let mut integral = one(0.0);
    for _ in 0..1000 {
        integral = low_level_step(&one(1.0), &one(0.0), &one(0.0), &[drive(FrictionParams::default())], &gains, 1e-3, &integral)
            .unwrap()
            .integral;
    }
    assert_relative_eq!(integral[0], 0.05, epsilon = 1e-15);
}

#[test]
fn saturation_is_flagged_and_freezes_integral() {
    let gains = LowLevelGains::uniform(2, 1.0, 1.0, 10.0, 2.0);
    let drives = [drive(FrictionParams::default()); 2];
    let integral = DVector::from_row_slice(&[0.2, 0.2]);
    let out = low_level_step(
        &DVector::from_row_slice(&[50.0, 1.0]),
        &DVector::from_row_slice(&[0.0, 0.0]),
        &DVector::zeros(2),
        &drives,
        &gains,
        1e-3,
        &integral,
    )
    .unwrap();
    assert_eq!(out.clamped, vec![true, false]);
    assert_eq!(out.current[0], 2.0);
    assert_eq!(out.integral[0], 0.2);
    assert_relative_eq!(out.integral[1], 0.201, epsilon = 1e-15);
    for v in out.current.iter() {
        assert!(v.abs() <= 2.0);
    }
}

#[test]
fn non_positive_step_is_rejected() {
    let gains = LowLevelGains::uniform(1, 1.0, 1.0, 1.0, 1.0);
    assert!(low_level_step(&one(0.0), &one(0.0), &one(0.0), &[drive(FrictionParams::default())], &gains, 0.0, &one(0.0)).is_err());
}
