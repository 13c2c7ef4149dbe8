//! Closed-loop experiment: drive the plan, ask the controller for settings at
//! every step, deposit with the full normal plant and record the trace.

use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationModel, ControlConstraints, Side};
use crate::controllers::{Controller, ControllerKind, SpreaderControls};
use crate::error::{Result, SpreaderError};
use crate::field::{squared_deviation, AmountMap, FieldGrid, FieldMap, PrescriptionMap};
use crate::kinematics::{trajectory_with, DrivePlan, Integrator, TractorState};
use crate::optimizer::{OptimizerSettings, Termination};
use crate::spread::{
    DepositScaling, DepositionModelKind, PoseGeometry, SpreadModel, TriangleSupport,
};

/// Deposition model used by the plant; never depends on the controller.
pub const PLANT_MODEL: SpreadModel = SpreadModel::FULL_NORMAL;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: FieldGrid,
    pub prescription: PrescriptionMap,
    pub plan: DrivePlan,
    /// Time step [s].
    pub dt: f64,
    pub initial_controls: SpreaderControls,
    pub controller: ControllerKind,
    /// Prediction horizon [steps].
    pub horizon: usize,
    pub scaling: DepositScaling,
    pub triangle_support: TriangleSupport,
    pub integrator: Integrator,
}

impl Scenario {
    /// The default experiment: 150 m field at 90x90 cells, uniform 20 g
    /// prescription, S-shaped three-tramline plan starting at (50, 100).
    pub fn default_field_run() -> Self {
        let grid = FieldGrid::new(150.0, 90).expect("valid grid");
        Self {
            prescription: FieldMap::filled(90, 20.0),
            grid,
            plan: DrivePlan::s_shaped(TractorState::new(50.0, 100.0, 0.0)),
            dt: 1.0,
            initial_controls: SpreaderControls::symmetric(45.0, 600.0),
            controller: ControllerKind::MpcFull,
            horizon: 5,
            scaling: DepositScaling::Literal,
            triangle_support: TriangleSupport::Literal,
            integrator: Integrator::Euler,
        }
    }

    pub fn with_controller(&self, controller: ControllerKind) -> Self {
        Self {
            controller,
            ..self.clone()
        }
    }

    pub fn validate(&self, constraints: &ControlConstraints) -> Result<()> {
        self.grid.validate()?;
        if self.prescription.n() != self.grid.n_cells {
            return Err(SpreaderError::Shape {
                expected: self.grid.n_cells,
                got: self.prescription.n(),
            });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SpreaderError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(SpreaderError::Config("horizon must be at least 1".into()));
        }
        if !self.plan.start.is_finite() {
            return Err(SpreaderError::InvalidState(format!("{:?}", self.plan.start)));
        }
        for seg in &self.plan.segments {
            seg.validate()?;
        }
        self.plan.steps_per_segment(self.dt)?;
        if !constraints.in_box(&self.initial_controls) {
            return Err(SpreaderError::Config(format!(
                "initial controls {:?} outside the control bounds",
                self.initial_controls
            )));
        }
        Ok(())
    }

    /// Poses at t_0 ... t_n.
    pub fn trajectory(&self) -> Result<Vec<TractorState>> {
        trajectory_with(&self.plan, self.dt, self.integrator)
    }

    /// Geometry of the poses at which steps 1..=n deposit.
    pub fn step_geometries(&self) -> Result<Vec<PoseGeometry>> {
        let poses = self.trajectory()?;
        Ok(poses
            .iter()
            .skip(1)
            .map(|p| PoseGeometry::new(&self.grid, *p, self.scaling))
            .collect())
    }

    fn same_base(&self, other: &Scenario) -> bool {
        self.grid == other.grid
            && self.prescription == other.prescription
            && self.plan == other.plan
            && self.dt == other.dt
            && self.initial_controls == other.initial_controls
            && self.scaling == other.scaling
            && self.integrator == other.integrator
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    /// Time at the end of the step [s].
    pub t: f64,
    pub pose: TractorState,
    pub controls: SpreaderControls,
    /// Grams deposited in the field by this step.
    pub deposit_mass: f64,
    /// Cost of the accumulated map after this step [g^2].
    pub cost: f64,
    /// Model the plant deposited with.
    pub plant_model: DepositionModelKind,
    pub optimizer_iterations: usize,
    pub termination: Termination,
    /// Wall-clock of the controller call [s].
    pub controller_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub controller: ControllerKind,
    pub steps: Vec<StepRecord>,
    pub final_map: AmountMap,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Sum of controller wall-clock over all steps [s].
    pub controller_seconds: f64,
}

impl RunRecord {
    /// Trace without wall-clock fields, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.controller_seconds = 0.0;
        for s in &mut r.steps {
            s.controller_seconds = 0.0;
        }
        r
    }
}

/// Failure inside a run, carrying everything recorded before it.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: RunRecord,
    pub error: SpreaderError,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} run failed after {} steps: {}",
            self.partial.controller,
            self.partial.steps.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {}

/// Runs the closed loop with the scenario's controller.
pub fn run(
    scenario: &Scenario,
    cal: &CalibrationModel,
    constraints: &ControlConstraints,
    settings: &OptimizerSettings,
) -> std::result::Result<RunRecord, RunFailure> {
    let mut controller = Controller::new(
        scenario.controller,
        scenario.horizon,
        scenario.triangle_support,
        settings.clone(),
    );
    let kind = scenario.controller;
    run_with(scenario, cal, constraints, kind, |poses, applied, prev| {
        controller.decide(poses, applied, &scenario.prescription, prev, cal, constraints)
            .map(|(u, report)| (u, report.iterations, report.termination))
    })
}

/// Runs the plan open-loop with a fixed sequence of controls.
pub fn run_open_loop(
    scenario: &Scenario,
    cal: &CalibrationModel,
    constraints: &ControlConstraints,
    controls: &[SpreaderControls],
) -> std::result::Result<RunRecord, RunFailure> {
    let mut k = 0;
    run_with(scenario, cal, constraints, scenario.controller, |_, _, _| {
        let u = controls.get(k).copied().ok_or_else(|| {
            SpreaderError::Config(format!("only {} controls for a longer plan", controls.len()))
        })?;
        k += 1;
        Ok((u, 0, Termination::MaxIterations))
    })
}

fn run_with<F>(
    scenario: &Scenario,
    cal: &CalibrationModel,
    constraints: &ControlConstraints,
    kind: ControllerKind,
    mut decide: F,
) -> std::result::Result<RunRecord, RunFailure>
where
    F: FnMut(&[PoseGeometry], &AmountMap, SpreaderControls) -> Result<(SpreaderControls, usize, Termination)>,
{
    let n = scenario.grid.n_cells;
    let mut record = RunRecord {
        controller: kind,
        steps: vec![],
        final_map: FieldMap::zeros(n),
        initial_cost: 0.0,
        final_cost: 0.0,
        controller_seconds: 0.0,
    };
    let fail = |record: RunRecord, error| RunFailure {
        partial: record,
        error,
    };
    if let Err(e) = scenario.validate(constraints) {
        return Err(fail(record, e));
    }
    let geoms = match scenario.step_geometries() {
        Ok(g) => g,
        Err(e) => return Err(fail(record, e)),
    };
    let initial_cost = squared_deviation(record.final_map.values(), scenario.prescription.values());
    record.initial_cost = initial_cost;
    record.final_cost = initial_cost;
    info!(
        "{kind}: {} steps, horizon {}, initial cost {initial_cost:.6e}",
        geoms.len(),
        kind.effective_horizon(scenario.horizon)
    );

    let mut prev = scenario.initial_controls;
    for (idx, geom) in geoms.iter().enumerate() {
        let k = idx + 1;
        let started = Instant::now();
        let decided = decide(&geoms[idx..], &record.final_map, prev);
        let seconds = started.elapsed().as_secs_f64();
        record.controller_seconds += seconds;
        let (u, iterations, termination) = match decided {
            Ok(v) => v,
            Err(e) => return Err(fail(record, e)),
        };
        if !constraints.is_feasible(&u, &prev) {
            let e = SpreaderError::InfeasibleSchedule {
                step: idx,
                reason: format!("controller emitted {u:?} after {prev:?}"),
            };
            return Err(fail(record, e));
        }
        let left = cal.pattern(u.rpm_left, u.d_left, Side::Left);
        let right = cal.pattern(u.rpm_right, u.d_right, Side::Right);
        if let Err(e) = left.validate().and_then(|_| right.validate()) {
            return Err(fail(record, e));
        }
        let before: f64 = record.final_map.sum();
        geom.deposit_into(&PLANT_MODEL, &left, &right, record.final_map.values_mut());
        let deposit_mass = record.final_map.sum() - before;
        let cost = squared_deviation(record.final_map.values(), scenario.prescription.values());
        if !cost.is_finite() {
            let e = SpreaderError::Numerical {
                iterations,
                reason: format!("non-finite cost after step {k}"),
            };
            return Err(fail(record, e));
        }
        debug!(
            "{kind} k={k} D=({:.3},{:.3}) rpm=({:.2},{:.2}) cost={cost:.6e} iters={iterations} {seconds:.3}s",
            u.d_left, u.d_right, u.rpm_left, u.rpm_right
        );
        record.steps.push(StepRecord {
            k,
            t: k as f64 * scenario.dt,
            pose: geom.pose,
            controls: u,
            deposit_mass,
            cost,
            plant_model: PLANT_MODEL.kind,
            optimizer_iterations: iterations,
            termination,
            controller_seconds: seconds,
        });
        record.final_cost = cost;
        prev = u;
    }
    info!(
        "{kind}: final cost {:.6e}, controller time {:.3}s",
        record.final_cost, record.controller_seconds
    );
    Ok(record)
}

/// Outcome of one variant in a comparison.
#[derive(Debug)]
pub struct VariantOutcome {
    pub controller: ControllerKind,
    pub result: std::result::Result<RunRecord, RunFailure>,
}

#[derive(Debug)]
pub struct Comparison {
    pub variants: Vec<VariantOutcome>,
}

impl Comparison {
    /// Successful controllers ordered by final cost, lowest first.
    pub fn ranking(&self) -> Vec<(ControllerKind, f64)> {
        let mut r: Vec<(ControllerKind, f64)> = self
            .variants
            .iter()
            .filter_map(|v| v.result.as_ref().ok().map(|rec| (v.controller, rec.final_cost)))
            .collect();
        r.sort_by(|a, b| a.1.total_cmp(&b.1));
        r
    }

    pub fn record(&self, kind: ControllerKind) -> Option<&RunRecord> {
        self.variants
            .iter()
            .find(|v| v.controller == kind)
            .and_then(|v| v.result.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.variants.iter().filter(|v| v.result.is_err()).count()
    }
}

/// Runs scenario variants that differ only in the controller. A failing
/// variant is recorded and the others still run.
pub fn compare(
    scenarios: &[Scenario],
    cal: &CalibrationModel,
    constraints: &ControlConstraints,
    settings: &OptimizerSettings,
) -> Result<Comparison> {
    let Some(base) = scenarios.first() else {
        return Err(SpreaderError::Config("no scenarios to compare".into()));
    };
    if let Some(i) = scenarios.iter().position(|s| !base.same_base(s)) {
        return Err(SpreaderError::Config(format!(
            "scenario {i} differs from scenario 0 in more than the controller"
        )));
    }
    let mut variants = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let result = run(s, cal, constraints, settings);
        if let Err(f) = &result {
            warn!("{f}");
        }
        variants.push(VariantOutcome {
            controller: s.controller,
            result,
        });
    }
    Ok(Comparison { variants })
}

/// Steps whose whole pattern (center distance plus three spreads, both discs)
/// stays inside the field.
pub fn interior_steps(record: &RunRecord, grid: &FieldGrid, cal: &CalibrationModel) -> Vec<usize> {
    let (x0, y0) = grid.origin;
    let side = grid.side_length;
    record
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let reach = [s.controls.rpm_left, s.controls.rpm_right]
                .iter()
                .map(|&rpm| cal.center_distance(rpm) + 3.0 * cal.sigma_d(rpm))
                .fold(0.0, f64::max);
            let p = s.pose;
            p.x - reach >= x0 && p.x + reach <= x0 + side && p.y - reach >= y0 && p.y + reach <= y0 + side
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::DriveCommand;

    fn small_scenario() -> Scenario {
        let grid = FieldGrid::new(80.0, 24).unwrap();
        Scenario {
            prescription: FieldMap::filled(24, 20.0),
            grid,
            plan: DrivePlan {
                start: TractorState::new(20.0, 40.0, 0.0),
                segments: vec![DriveCommand::new(10.0, 0.0, 4.0)],
            },
            dt: 1.0,
            initial_controls: SpreaderControls::symmetric(45.0, 600.0),
            controller: ControllerKind::Greedy,
            horizon: 2,
            scaling: DepositScaling::Literal,
            triangle_support: TriangleSupport::Literal,
            integrator: Integrator::Euler,
        }
    }

    #[test]
    fn zero_duration_plan_gives_empty_trace() {
        let mut s = small_scenario();
        s.plan.segments.clear();
        let cal = CalibrationModel::default();
        let rec = run(&s, &cal, &ControlConstraints::default(), &OptimizerSettings::default()).unwrap();
        assert!(rec.steps.is_empty());
        let zero = FieldMap::zeros(24);
        assert_eq!(rec.final_cost, crate::field::cost(&zero, &s.prescription).unwrap());
    }

    #[test]
    fn trace_has_one_entry_per_step() {
        let s = small_scenario();
        let cal = CalibrationModel::default();
        let rec = run(&s, &cal, &ControlConstraints::default(), &OptimizerSettings::default()).unwrap();
        assert_eq!(rec.steps.len(), 4);
        assert_eq!(rec.steps[3].t, 4.0);
        assert!(rec.steps.iter().all(|s| s.plant_model == DepositionModelKind::FullNormal));
        let again = crate::field::cost(&rec.final_map, &s.prescription).unwrap();
        assert_eq!(rec.steps.last().unwrap().cost, again);
    }

    #[test]
    fn open_loop_matches_manual_accumulation() {
        let s = small_scenario();
        let cal = CalibrationModel::default();
        let u = SpreaderControls::symmetric(45.0, 600.0);
        let rec = run_open_loop(&s, &cal, &ControlConstraints::default(), &[u; 4]).unwrap();
        let mut a = FieldMap::zeros(24);
        for p in s.trajectory().unwrap().iter().skip(1) {
            let dep = crate::spread::total_deposit(
                p,
                &cal.pattern(600.0, 45.0, Side::Left),
                &cal.pattern(600.0, 45.0, Side::Right),
                &s.grid,
                SpreadModel::FULL_NORMAL,
                DepositScaling::Literal,
            );
            a = crate::field::accumulate(&a, &dep).unwrap();
        }
        for (x, y) in a.values().iter().zip(rec.final_map.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn open_loop_too_few_controls_keeps_partial_record() {
        let s = small_scenario();
        let cal = CalibrationModel::default();
        let u = SpreaderControls::symmetric(45.0, 600.0);
        let err = run_open_loop(&s, &cal, &ControlConstraints::default(), &[u; 2]).unwrap_err();
        assert_eq!(err.partial.steps.len(), 2);
    }

    #[test]
    fn compare_rejects_mismatched_bases() {
        let a = small_scenario();
        let mut b = small_scenario();
        b.dt = 2.0;
        let cal = CalibrationModel::default();
        let r = compare(&[a, b], &cal, &ControlConstraints::default(), &OptimizerSettings::default());
        assert!(matches!(r, Err(SpreaderError::Config(_))));
    }

    #[test]
    fn self_comparison_is_trivial() {
        let a = small_scenario();
        let cal = CalibrationModel::default();
        let c = compare(
            &[a.clone(), a],
            &cal,
            &ControlConstraints::default(),
            &OptimizerSettings::default(),
        )
        .unwrap();
        let r = c.ranking();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].1, r[1].1);
    }
}
