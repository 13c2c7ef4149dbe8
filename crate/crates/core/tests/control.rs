use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spreader::calibration::{CalibrationModel, ControlConstraints, Side};
use spreader::controllers::{
    gradient, greedy_step, mpc_step, optimize_schedule, predict_cost, ControlSchedule,
    ControllerKind, HorizonContext, SpreaderControls,
};
use spreader::field::{accumulate, cost, FieldGrid, FieldMap};
use spreader::kinematics::{DriveCommand, DrivePlan, Integrator, TractorState};
use spreader::optimizer::{OptimizerSettings, Termination};
use spreader::simulation::{self, Scenario};
use spreader::spread::{
    total_deposit, DepositScaling, DepositionModelKind, PoseGeometry, SpreadModel, TriangleSupport,
};

/// Pose that puts the point `target` at distance `r` on bearing `theta`
/// (from the reverse heading) for heading `phi`.
fn pose_seeing(target: (f64, f64), r: f64, theta: f64, phi: f64) -> TractorState {
    // Bearing is measured clockwise-positive from the reverse heading.
    let dir = phi + std::f64::consts::PI - theta;
    TractorState::new(target.0 - r * dir.cos(), target.1 - r * dir.sin(), phi)
}

fn single_cell(prescription: f64, applied: f64) -> (FieldGrid, FieldMap, FieldMap) {
    let grid = FieldGrid::new(6.0, 1).unwrap();
    (grid, FieldMap::filled(1, prescription), FieldMap::filled(1, applied))
}

#[test]
fn single_cell_prediction_is_scalar_arithmetic() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, a) = single_cell(30.0, 4.0);
    let pose = pose_seeing((3.0, 3.0), 15.0, cal.psi(600.0), 0.3);
    let geom = [PoseGeometry::new(&grid, pose, DepositScaling::Conservative)];
    let u = SpreaderControls::symmetric(45.0, 600.0);
    let ctx = HorizonContext {
        poses: &geom,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev: u,
    };
    let q = total_deposit(
        &pose,
        &cal.pattern(600.0, 45.0, Side::Left),
        &cal.pattern(600.0, 45.0, Side::Right),
        &grid,
        SpreadModel::FULL_NORMAL,
        DepositScaling::Conservative,
    )
    .sum();
    let expected = (30.0 - 4.0 - q) * (30.0 - 4.0 - q);
    let got = predict_cost(&ControlSchedule::constant(u, 1), &ctx).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected, "{got} vs {expected}");
}

#[test]
fn single_cell_deficit_is_filled() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, a) = single_cell(30.0, 0.0);
    let pose = pose_seeing((3.0, 3.0), 15.0, cal.psi(600.0), 0.3);
    let geom = [PoseGeometry::new(&grid, pose, DepositScaling::Conservative)];
    let prev = SpreaderControls::symmetric(40.0, 600.0);
    let ctx = HorizonContext {
        poses: &geom,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev,
    };
    let (schedule, report) =
        optimize_schedule(&ControlSchedule::constant(prev, 1), &ctx, &OptimizerSettings::default()).unwrap();
    let u = schedule.steps[0];
    let q = total_deposit(
        &pose,
        &cal.pattern(u.rpm_left, u.d_left, Side::Left),
        &cal.pattern(u.rpm_right, u.d_right, Side::Right),
        &grid,
        SpreadModel::FULL_NORMAL,
        DepositScaling::Conservative,
    )
    .sum();
    assert!((q - 30.0).abs() < 1e-3, "deposit {q}, report {report:?}");
}

#[test]
fn two_step_shortfall_saturates_rate_limits() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, a) = single_cell(1e6, 0.0);
    let pose = pose_seeing((3.0, 3.0), 15.0, 0.0, 1.1);
    let geom = PoseGeometry::new(&grid, pose, DepositScaling::Conservative);
    let poses = [geom.clone(), geom];
    let prev = SpreaderControls::symmetric(0.0, 600.0);
    let ctx = HorizonContext {
        poses: &poses,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev,
    };
    let (schedule, _) =
        optimize_schedule(&ControlSchedule::constant(prev, 2), &ctx, &OptimizerSettings::default()).unwrap();
    let (c, _) = constraints.component_rate();
    let [first, second] = [schedule.steps[0], schedule.steps[1]];
    for (got, want) in [
        (first.d_left, c),
        (first.d_right, c),
        (second.d_left, 2.0 * c),
        (second.d_right, 2.0 * c),
    ] {
        assert!((got - want).abs() < 1e-9, "{schedule:?}");
    }
    assert!(first.d_left.hypot(first.d_right) <= constraints.d_rate_max);
    schedule.check_feasible(&prev, &constraints).unwrap();
}

#[test]
fn stationary_start_is_returned_unchanged() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let grid = FieldGrid::new(60.0, 20).unwrap();
    let p = FieldMap::filled(20, 20.0);
    let a = FieldMap::filled(20, 50.0);
    let geom = [PoseGeometry::new(&grid, TractorState::new(30.0, 30.0, 0.0), DepositScaling::Literal)];
    let prev = SpreaderControls::symmetric(0.0, 600.0);
    let ctx = HorizonContext {
        poses: &geom,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev,
    };
    let initial = ControlSchedule::constant(prev, 1);
    let (schedule, report) = optimize_schedule(&initial, &ctx, &OptimizerSettings::default()).unwrap();
    assert_eq!(schedule, initial);
    assert_eq!(report.termination, Termination::GradientTolerance);
}

fn open_field(n: usize) -> (FieldGrid, FieldMap, FieldMap) {
    let grid = FieldGrid::new(150.0, n).unwrap();
    (grid, FieldMap::filled(n, 20.0), FieldMap::zeros(n))
}

#[test]
fn adding_fertilizer_to_a_bare_field_lowers_cost() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, a) = open_field(45);
    let geom = [PoseGeometry::new(&grid, TractorState::new(60.0, 75.0, 0.0), DepositScaling::Literal)];
    let prev = SpreaderControls::symmetric(0.0, 600.0);
    let ctx = HorizonContext {
        poses: &geom,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev,
    };
    let g = gradient(&ControlSchedule::constant(prev, 1), &ctx).unwrap();
    assert!(g[0] < 0.0 && g[1] < 0.0, "{g:?}");
    assert_eq!(g[2], 0.0);
    assert_eq!(g[3], 0.0);
}

#[test]
fn greedy_is_symmetric_on_a_symmetric_field() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, a) = open_field(90);
    let geom = [PoseGeometry::new(&grid, TractorState::new(40.0, 75.0, 0.0), DepositScaling::Literal)];
    let prev = SpreaderControls::symmetric(45.0, 600.0);
    let ctx = HorizonContext {
        poses: &geom,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev,
    };
    let (u, _) = greedy_step(&ctx, &OptimizerSettings::default()).unwrap();
    assert!(((u.d_left - prev.d_left) - (u.d_right - prev.d_right)).abs() <= 1e-6, "{u:?}");
    assert!(((u.rpm_left - prev.rpm_left) - (u.rpm_right - prev.rpm_right)).abs() <= 1e-3, "{u:?}");
}

fn small_scenario(controller: ControllerKind) -> Scenario {
    let grid = FieldGrid::new(90.0, 36).unwrap();
    Scenario {
        prescription: FieldMap::filled(36, 20.0),
        grid,
        plan: DrivePlan {
            start: TractorState::new(20.0, 45.0, 0.0),
            segments: vec![
                DriveCommand::new(8.0, 0.0, 3.0),
                DriveCommand::new(4.0, -0.2, 3.0),
            ],
        },
        dt: 1.0,
        initial_controls: SpreaderControls::symmetric(45.0, 600.0),
        controller,
        horizon: 3,
        scaling: DepositScaling::Literal,
        triangle_support: TriangleSupport::Literal,
        integrator: Integrator::Euler,
    }
}

#[test]
fn one_step_mpc_equals_greedy_bitwise() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let settings = OptimizerSettings::default();
    let greedy = simulation::run(&small_scenario(ControllerKind::Greedy), &cal, &constraints, &settings).unwrap();
    let mut mpc_scenario = small_scenario(ControllerKind::MpcFull);
    mpc_scenario.horizon = 1;
    let mpc = simulation::run(&mpc_scenario, &cal, &constraints, &settings).unwrap();
    assert_eq!(greedy.final_map, mpc.final_map);
    for (g, m) in greedy.steps.iter().zip(&mpc.steps) {
        assert_eq!(g.controls, m.controls);
        assert_eq!(g.cost.to_bits(), m.cost.to_bits());
    }

    let (grid, p, a) = open_field(30);
    let geom = [PoseGeometry::new(&grid, TractorState::new(50.0, 60.0, 0.2), DepositScaling::Literal)];
    let ctx = HorizonContext {
        poses: &geom,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev: SpreaderControls::symmetric(45.0, 600.0),
    };
    let (ug, _) = greedy_step(&ctx, &settings).unwrap();
    let (um, _, _) = mpc_step(&ctx, None, &settings).unwrap();
    assert_eq!(ug, um);
}

#[test]
fn optimization_never_increases_predicted_cost() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, _) = open_field(45);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for model in [SpreadModel::FULL_NORMAL, SpreadModel::TRIANGLE] {
        for _ in 0..4 {
            let a = FieldMap::from_vec(45, (0..45 * 45).map(|_| rng.gen_range(0.0..25.0)).collect()).unwrap();
            let poses: Vec<_> = (0..3)
                .map(|k| {
                    let pose = TractorState::new(40.0 + 8.0 * k as f64, rng.gen_range(50.0..100.0), 0.1);
                    PoseGeometry::new(&grid, pose, DepositScaling::Literal)
                })
                .collect();
            let prev = SpreaderControls {
                d_left: rng.gen_range(0.0..200.0),
                d_right: rng.gen_range(0.0..200.0),
                rpm_left: rng.gen_range(300.0..900.0),
                rpm_right: rng.gen_range(300.0..900.0),
            };
            let ctx = HorizonContext {
                poses: &poses,
                applied: &a,
                prescribed: &p,
                model,
                cal: &cal,
                constraints: &constraints,
                prev,
            };
            let initial = ControlSchedule::constant(prev, 3);
            let before = predict_cost(&initial, &ctx).unwrap();
            let (schedule, _) = optimize_schedule(&initial, &ctx, &OptimizerSettings::default()).unwrap();
            let after = predict_cost(&schedule, &ctx).unwrap();
            assert!(after <= before + 1e-9, "{after} > {before}");
        }
    }
}

#[test]
fn optimization_is_deterministic_across_thread_counts() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let (grid, p, a) = open_field(90);
    let poses: Vec<_> = (0..5)
        .map(|k| PoseGeometry::new(&grid, TractorState::new(40.0 + 10.0 * k as f64, 80.0, 0.0), DepositScaling::Literal))
        .collect();
    let prev = SpreaderControls::symmetric(45.0, 600.0);
    let ctx = HorizonContext {
        poses: &poses,
        applied: &a,
        prescribed: &p,
        model: SpreadModel::FULL_NORMAL,
        cal: &cal,
        constraints: &constraints,
        prev,
    };
    let settings = OptimizerSettings {
        multi_start: 2,
        seed: 9,
        ..OptimizerSettings::default()
    };
    let solve = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| optimize_schedule(&ControlSchedule::constant(prev, 5), &ctx, &settings).unwrap())
    };
    let (one, r1) = solve(1);
    let (four, r4) = solve(4);
    assert_eq!(one, four);
    assert_eq!(r1.cost.to_bits(), r4.cost.to_bits());

    let (single, rs) =
        optimize_schedule(&ControlSchedule::constant(prev, 5), &ctx, &OptimizerSettings::default()).unwrap();
    assert!(r1.cost <= rs.cost);
    single.check_feasible(&prev, &constraints).unwrap();
}

#[test]
fn plant_always_uses_the_full_model() {
    let cal = CalibrationModel::default();
    let rec = simulation::run(
        &small_scenario(ControllerKind::MpcTriangle),
        &cal,
        &ControlConstraints::default(),
        &OptimizerSettings::default(),
    )
    .unwrap();
    assert_eq!(rec.steps.len(), 6);
    assert!(rec.steps.iter().all(|s| s.plant_model == DepositionModelKind::FullNormal));
}

#[test]
fn runs_are_reproducible_and_trace_matches_final_map() {
    let cal = CalibrationModel::default();
    let constraints = ControlConstraints::default();
    let settings = OptimizerSettings::default();
    let scenario = small_scenario(ControllerKind::MpcFull);
    let a = simulation::run(&scenario, &cal, &constraints, &settings).unwrap();
    let b = simulation::run(&scenario, &cal, &constraints, &settings).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("A.csv");
    a.final_map.write_csv(&path).unwrap();
    let back = FieldMap::read_csv(&path).unwrap();
    let recomputed = cost(&back, &scenario.prescription).unwrap();
    let last = a.steps.last().unwrap().cost;
    assert!((recomputed - last).abs() <= 1e-9 * last);
}

#[test]
fn fixed_controls_reproduce_one_pass_accumulation() {
    let cal = CalibrationModel::default();
    let scenario = Scenario::default_field_run();
    let poses = scenario.trajectory().unwrap();
    let u = SpreaderControls {
        d_left: 50.0,
        d_right: 40.0,
        rpm_left: 650.0,
        rpm_right: 550.0,
    };
    let controls = vec![u; poses.len() - 1];
    let rec = simulation::run_open_loop(&scenario, &cal, &ControlConstraints::default(), &controls).unwrap();
    assert_eq!(rec.steps.len(), 62);

    let left = cal.pattern(u.rpm_left, u.d_left, Side::Left);
    let right = cal.pattern(u.rpm_right, u.d_right, Side::Right);
    let mut oracle = FieldMap::zeros(90);
    for pose in &poses[1..] {
        let q = total_deposit(pose, &left, &right, &scenario.grid, SpreadModel::FULL_NORMAL, DepositScaling::Literal);
        oracle = accumulate(&oracle, &q).unwrap();
    }
    for (x, y) in oracle.values().iter().zip(rec.final_map.values()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}
