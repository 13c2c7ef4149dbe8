//! Spreader-setting controllers: a per-step greedy optimizer and receding-horizon
//! MPC with either the triangle or the full normal prediction model.
//!
//! All three share one constrained least-squares problem: choose the settings
//! for the next `H` steps so that the predicted applied map after those steps
//! is as close as possible to the prescription. The tractor poses over the
//! horizon come from the fixed drive plan.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationModel, ControlConstraints, Side};
use crate::error::{Result, SpreaderError};
use crate::field::{squared_deviation, AmountMap, PrescriptionMap};
use crate::optimizer::{minimize, ConstrainedProblem, OptimizeReport, OptimizerSettings};
use crate::spread::{PoseGeometry, SpreadModel, TriangleSupport};

/// Controls per step in the flattened decision vector.
pub const CONTROLS_PER_STEP: usize = 4;

/// Cells per chunk for the parallel Jacobian reduction; fixed so that the
/// summation order does not depend on the thread count.
const REDUCTION_CHUNK: usize = 256;

/// Mass flow and disc speed of both discs for one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreaderControls {
    /// Left mass flow [g/step].
    pub d_left: f64,
    /// Right mass flow [g/step].
    pub d_right: f64,
    /// Left disc speed [1/min].
    pub rpm_left: f64,
    /// Right disc speed [1/min].
    pub rpm_right: f64,
}

impl SpreaderControls {
    pub const fn symmetric(mass_flow: f64, rpm: f64) -> Self {
        Self {
            d_left: mass_flow,
            d_right: mass_flow,
            rpm_left: rpm,
            rpm_right: rpm,
        }
    }

    pub fn to_array(&self) -> [f64; CONTROLS_PER_STEP] {
        [self.d_left, self.d_right, self.rpm_left, self.rpm_right]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            d_left: v[0],
            d_right: v[1],
            rpm_left: v[2],
            rpm_right: v[3],
        }
    }
}

/// Settings for consecutive steps of a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub steps: Vec<SpreaderControls>,
}

impl ControlSchedule {
    pub fn constant(u: SpreaderControls, horizon: usize) -> Self {
        Self {
            steps: vec![u; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|u| u.to_array()).collect()
    }

    pub fn from_flat(x: &[f64]) -> Self {
        Self {
            steps: x
                .chunks_exact(CONTROLS_PER_STEP)
                .map(SpreaderControls::from_slice)
                .collect(),
        }
    }

    /// Drops the first step and repeats the last, then fits the result to
    /// `horizon` steps.
    pub fn shifted(&self, horizon: usize) -> Self {
        let Some(&last) = self.steps.last() else {
            return Self { steps: vec![] };
        };
        let mut steps: Vec<SpreaderControls> = self.steps.iter().skip(1).copied().collect();
        steps.resize(horizon, last);
        Self { steps }
    }

    /// Checks boxes and exact 2-norm rate limits, starting from `prev`.
    pub fn check_feasible(
        &self,
        prev: &SpreaderControls,
        constraints: &ControlConstraints,
    ) -> Result<()> {
        let mut before = *prev;
        for (step, u) in self.steps.iter().enumerate() {
            if !constraints.in_box(u) {
                return Err(SpreaderError::InfeasibleSchedule {
                    step,
                    reason: format!("{u:?} outside the box constraints"),
                });
            }
            if !constraints.rate_ok(u, &before) {
                return Err(SpreaderError::InfeasibleSchedule {
                    step,
                    reason: format!("change from {before:?} to {u:?} exceeds the rate limits"),
                });
            }
            before = *u;
        }
        Ok(())
    }
}

/// Everything the horizon problem needs besides the schedule itself.
#[derive(Debug, Clone, Copy)]
pub struct HorizonContext<'a> {
    /// Precomputed geometry of the tractor pose at each horizon step.
    pub poses: &'a [PoseGeometry],
    pub applied: &'a AmountMap,
    pub prescribed: &'a PrescriptionMap,
    /// Prediction model used over the horizon.
    pub model: SpreadModel,
    pub cal: &'a CalibrationModel,
    pub constraints: &'a ControlConstraints,
    /// Control applied in the step before the horizon.
    pub prev: SpreaderControls,
}

impl<'a> HorizonContext<'a> {
    pub fn horizon(&self) -> usize {
        self.poses.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.applied.values().len();
        if self.prescribed.n() != self.applied.n() {
            return Err(SpreaderError::Shape {
                expected: self.applied.n(),
                got: self.prescribed.n(),
            });
        }
        if let Some(bad) = self.poses.iter().find(|p| p.len() != n) {
            return Err(SpreaderError::Config(format!(
                "pose geometry has {} cells, field has {n}",
                bad.len()
            )));
        }
        Ok(())
    }

    /// Applied map after the predicted deposits of `x`.
    fn predicted_map(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = self.applied.values().to_vec();
        for (pose, u) in self.poses.iter().zip(x.chunks_exact(CONTROLS_PER_STEP)) {
            let left = self.cal.pattern(u[2], u[0], Side::Left);
            let right = self.cal.pattern(u[3], u[1], Side::Right);
            pose.deposit_into(&self.model, &left, &right, &mut acc);
        }
        acc
    }

    /// Predicted terminal cost, no feasibility check.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        squared_deviation(&self.predicted_map(x), self.prescribed.values())
    }

    /// Gradient of the predicted cost and its Gauss-Newton matrix.
    pub fn linearize(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let h = self.horizon();
        let n = CONTROLS_PER_STEP * h;
        let predicted = self.predicted_map(x);
        let residual: Vec<f64> = self
            .prescribed
            .values()
            .iter()
            .zip(&predicted)
            .map(|(p, a)| p - a)
            .collect();

        struct StepTerms {
            left: crate::spread::PatternParams,
            right: crate::spread::PatternParams,
            sens_left: crate::calibration::PatternSensitivity,
            sens_right: crate::calibration::PatternSensitivity,
        }
        let steps: Vec<StepTerms> = x
            .chunks_exact(CONTROLS_PER_STEP)
            .map(|u| StepTerms {
                left: self.cal.pattern(u[2], u[0], Side::Left),
                right: self.cal.pattern(u[3], u[1], Side::Right),
                sens_left: self.cal.sensitivity(u[2], Side::Left),
                sens_right: self.cal.sensitivity(u[3], Side::Right),
            })
            .collect();

        let model = self.model;
        let poses = self.poses;
        let partials: Vec<(Vec<f64>, Vec<f64>)> = residual
            .par_chunks(REDUCTION_CHUNK)
            .enumerate()
            .map(|(chunk, res)| {
                let mut grad = vec![0.0; n];
                let mut gn = vec![0.0; n * n];
                let mut row = vec![0.0; n];
                for (offset, &r) in res.iter().enumerate() {
                    let c = chunk * REDUCTION_CHUNK + offset;
                    let mut any = false;
                    for (k, (pose, st)) in poses.iter().zip(&steps).enumerate() {
                        let (dist, theta, w) = pose.cell(c);
                        let pl = model.density_partials(
                            dist - st.left.center_distance,
                            theta - st.left.psi,
                            &st.left,
                        );
                        let pr = model.density_partials(
                            dist - st.right.center_distance,
                            theta - st.right.psi,
                            &st.right,
                        );
                        let rpm_term = |p: &crate::spread::DensityPartials,
                                        s: &crate::calibration::PatternSensitivity| {
                            p.center_distance * s.center_distance
                                + p.sigma_d * s.sigma_d
                                + p.psi * s.psi
                                + p.sigma_psi * s.sigma_psi
                        };
                        let base = CONTROLS_PER_STEP * k;
                        row[base] = w * pl.per_mass_flow;
                        row[base + 1] = w * pr.per_mass_flow;
                        row[base + 2] = w * rpm_term(&pl, &st.sens_left);
                        row[base + 3] = w * rpm_term(&pr, &st.sens_right);
                        any |= row[base..base + CONTROLS_PER_STEP].iter().any(|v| *v != 0.0);
                    }
                    if !any {
                        continue;
                    }
                    for i in 0..n {
                        let ji = row[i];
                        if ji == 0.0 {
                            continue;
                        }
                        grad[i] -= 2.0 * r * ji;
                        let gi = &mut gn[i * n..(i + 1) * n];
                        for (g, &jj) in gi.iter_mut().zip(&row) {
                            *g += 2.0 * ji * jj;
                        }
                    }
                }
                (grad, gn)
            })
            .collect();

        let mut grad = DVector::zeros(n);
        let mut gn = DMatrix::zeros(n, n);
        for (g, m) in &partials {
            for i in 0..n {
                grad[i] += g[i];
                for j in 0..n {
                    gn[(i, j)] += m[i * n + j];
                }
            }
        }
        (grad, gn)
    }

    fn component_bounds(&self, k: usize) -> (f64, f64, f64) {
        let (rate_d, rate_rpm) = self.constraints.component_rate();
        let c = self.constraints;
        if k < 2 {
            (c.d_min, c.d_max, rate_d)
        } else {
            (c.rpm_min, c.rpm_max, rate_rpm)
        }
    }
}

impl ConstrainedProblem for HorizonContext<'_> {
    fn dim(&self) -> usize {
        CONTROLS_PER_STEP * self.horizon()
    }

    fn cost(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x))
    }

    fn linearize(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok(HorizonContext::linearize(self, x))
    }

    /// Sequential clamp: each step into its box and the componentwise rate
    /// window around the (already clamped) previous step.
    fn project(&self, x: &mut [f64]) {
        let mut before = self.prev.to_array();
        for step in x.chunks_exact_mut(CONTROLS_PER_STEP) {
            for k in 0..CONTROLS_PER_STEP {
                let (lo, hi, rate) = self.component_bounds(k);
                let v = if step[k].is_nan() { before[k] } else { step[k] };
                step[k] = v.clamp(lo.max(before[k] - rate), hi.min(before[k] + rate));
            }
            before.copy_from_slice(step);
        }
    }

    fn local_bounds(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for i in 0..n {
            let k = i % CONTROLS_PER_STEP;
            let (blo, bhi, rate) = self.component_bounds(k);
            let before = if i < CONTROLS_PER_STEP {
                self.prev.to_array()[k]
            } else {
                x[i - CONTROLS_PER_STEP]
            };
            let mut l = blo.max(before - rate);
            let mut h = bhi.min(before + rate);
            if i + CONTROLS_PER_STEP < n {
                let after = x[i + CONTROLS_PER_STEP];
                l = l.max(after - rate);
                h = h.min(after + rate);
            }
            lo[i] = l;
            hi[i] = h;
        }
        (lo, hi)
    }

    fn scales(&self) -> Vec<f64> {
        let (rate_d, rate_rpm) = self.constraints.component_rate();
        (0..self.dim())
            .map(|i| {
                if i % CONTROLS_PER_STEP < 2 {
                    rate_d
                } else {
                    rate_rpm
                }
            })
            .collect()
    }
}

/// Predicted cost of a feasible schedule after its `H` deposits [g^2].
pub fn predict_cost(schedule: &ControlSchedule, ctx: &HorizonContext) -> Result<f64> {
    ctx.check_shapes()?;
    check_length(schedule, ctx)?;
    schedule.check_feasible(&ctx.prev, ctx.constraints)?;
    Ok(ctx.evaluate(&schedule.flatten()))
}

/// Analytic partial derivatives of the predicted cost with respect to every
/// schedule entry, ordered as [D_l, D_r, rpm_l, rpm_r] per step.
pub fn gradient(schedule: &ControlSchedule, ctx: &HorizonContext) -> Result<Vec<f64>> {
    ctx.check_shapes()?;
    check_length(schedule, ctx)?;
    Ok(ctx.linearize(&schedule.flatten()).0.as_slice().to_vec())
}

fn check_length(schedule: &ControlSchedule, ctx: &HorizonContext) -> Result<()> {
    if schedule.horizon() != ctx.horizon() {
        return Err(SpreaderError::Config(format!(
            "schedule has {} steps but {} horizon poses were given",
            schedule.horizon(),
            ctx.horizon()
        )));
    }
    Ok(())
}

/// Random feasible schedule: each step uniform in its window.
fn random_schedule(ctx: &HorizonContext, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; ctx.dim()];
    let mut before = ctx.prev.to_array();
    for step in x.chunks_exact_mut(CONTROLS_PER_STEP) {
        for k in 0..CONTROLS_PER_STEP {
            let (lo, hi, rate) = ctx.component_bounds(k);
            let (a, b) = (lo.max(before[k] - rate), hi.min(before[k] + rate));
            step[k] = if b > a { rng.gen_range(a..=b) } else { a };
        }
        before.copy_from_slice(step);
    }
    x
}

/// Minimizes the predicted cost over feasible schedules starting at `initial`.
pub fn optimize_schedule(
    initial: &ControlSchedule,
    ctx: &HorizonContext,
    settings: &OptimizerSettings,
) -> Result<(ControlSchedule, OptimizeReport)> {
    ctx.check_shapes()?;
    check_length(initial, ctx)?;
    initial.check_feasible(&ctx.prev, ctx.constraints)?;
    let mut best = minimize(ctx, &initial.flatten(), settings)?;
    if settings.multi_start > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        for _ in 0..settings.multi_start {
            let start = random_schedule(ctx, &mut rng);
            let candidate = minimize(ctx, &start, settings)?;
            if candidate.cost < best.cost {
                best = OptimizeReport {
                    initial_cost: best.initial_cost,
                    ..candidate
                };
            }
        }
    }
    let schedule = ControlSchedule::from_flat(&best.x);
    schedule.check_feasible(&ctx.prev, ctx.constraints)?;
    Ok((schedule, best))
}

/// Settings for the current step using only the current pose.
pub fn greedy_step(
    ctx: &HorizonContext,
    settings: &OptimizerSettings,
) -> Result<(SpreaderControls, OptimizeReport)> {
    let one = HorizonContext {
        poses: &ctx.poses[..ctx.poses.len().min(1)],
        model: SpreadModel::FULL_NORMAL,
        ..*ctx
    };
    let (schedule, report) =
        optimize_schedule(&ControlSchedule::constant(ctx.prev, one.horizon()), &one, settings)?;
    Ok((schedule.steps[0], report))
}

/// One receding-horizon step: optimize over all poses in `ctx` and return the
/// first control together with the full schedule for warm-starting.
pub fn mpc_step(
    ctx: &HorizonContext,
    warm_start: Option<&ControlSchedule>,
    settings: &OptimizerSettings,
) -> Result<(SpreaderControls, ControlSchedule, OptimizeReport)> {
    let h = ctx.horizon();
    let initial = match warm_start {
        Some(prev_solution) if prev_solution.horizon() > 0 => {
            let shifted = prev_solution.shifted(h);
            if shifted.check_feasible(&ctx.prev, ctx.constraints).is_ok() {
                shifted
            } else {
                ControlSchedule::constant(ctx.prev, h)
            }
        }
        _ => ControlSchedule::constant(ctx.prev, h),
    };
    let (schedule, report) = optimize_schedule(&initial, ctx, settings)?;
    Ok((schedule.steps[0], schedule, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Greedy,
    MpcTriangle,
    MpcFull,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::Greedy,
        ControllerKind::MpcTriangle,
        ControllerKind::MpcFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Greedy => "greedy",
            ControllerKind::MpcTriangle => "mpc-triangle",
            ControllerKind::MpcFull => "mpc-full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Horizon actually used; greedy is one step by definition.
    pub fn effective_horizon(self, requested: usize) -> usize {
        match self {
            ControllerKind::Greedy => 1,
            _ => requested,
        }
    }

    pub fn prediction_model(self, triangle_support: TriangleSupport) -> SpreadModel {
        match self {
            ControllerKind::MpcTriangle => SpreadModel {
                kind: crate::spread::DepositionModelKind::Triangle,
                triangle_support,
            },
            _ => SpreadModel::FULL_NORMAL,
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stateful controller: keeps the last MPC solution for warm starts.
#[derive(Debug, Clone)]
pub struct Controller {
    pub kind: ControllerKind,
    pub horizon: usize,
    pub model: SpreadModel,
    pub settings: OptimizerSettings,
    warm: Option<ControlSchedule>,
}

impl Controller {
    pub fn new(
        kind: ControllerKind,
        horizon: usize,
        triangle_support: TriangleSupport,
        settings: OptimizerSettings,
    ) -> Self {
        Self {
            kind,
            horizon: kind.effective_horizon(horizon.max(1)),
            model: kind.prediction_model(triangle_support),
            settings,
            warm: None,
        }
    }

    /// Settings for the step whose pose is `poses[0]`; `poses` holds the
    /// remaining plan, of which at most `horizon` entries are used.
    pub fn decide(
        &mut self,
        poses: &[PoseGeometry],
        applied: &AmountMap,
        prescribed: &PrescriptionMap,
        prev: SpreaderControls,
        cal: &CalibrationModel,
        constraints: &ControlConstraints,
    ) -> Result<(SpreaderControls, OptimizeReport)> {
        if poses.is_empty() {
            return Err(SpreaderError::Config("no pose to control".into()));
        }
        let ctx = HorizonContext {
            poses: &poses[..poses.len().min(self.horizon)],
            applied,
            prescribed,
            model: self.model,
            cal,
            constraints,
            prev,
        };
        match self.kind {
            ControllerKind::Greedy => greedy_step(&ctx, &self.settings),
            ControllerKind::MpcTriangle | ControllerKind::MpcFull => {
                let (u, schedule, report) = mpc_step(&ctx, self.warm.as_ref(), &self.settings)?;
                self.warm = Some(schedule);
                Ok((u, report))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldGrid, FieldMap};
    use crate::kinematics::TractorState;
    use crate::spread::DepositScaling;

    fn setup(
        n: usize,
        poses: &[TractorState],
        scaling: DepositScaling,
    ) -> (FieldGrid, Vec<PoseGeometry>) {
        let grid = FieldGrid::new(60.0, n).unwrap();
        let geoms = poses
            .iter()
            .map(|p| PoseGeometry::new(&grid, *p, scaling))
            .collect();
        (grid, geoms)
    }

    #[test]
    fn shifted_schedule_repeats_last() {
        let s = ControlSchedule {
            steps: vec![
                SpreaderControls::symmetric(1.0, 300.0),
                SpreaderControls::symmetric(2.0, 310.0),
                SpreaderControls::symmetric(3.0, 320.0),
            ],
        };
        let sh = s.shifted(3);
        assert_eq!(sh.steps[0].d_left, 2.0);
        assert_eq!(sh.steps[1].d_left, 3.0);
        assert_eq!(sh.steps[2].d_left, 3.0);
        assert_eq!(s.shifted(1).horizon(), 1);
    }

    #[test]
    fn zero_flow_prediction_keeps_current_cost() {
        let (grid, poses) = setup(20, &[TractorState::new(30.0, 30.0, 0.0)], DepositScaling::Literal);
        let applied = FieldMap::filled(20, 3.0);
        let prescribed = FieldMap::filled(20, 20.0);
        let cal = CalibrationModel::default();
        let constraints = ControlConstraints::default();
        let prev = SpreaderControls::symmetric(0.0, 600.0);
        let ctx = HorizonContext {
            poses: &poses,
            applied: &applied,
            prescribed: &prescribed,
            model: SpreadModel::FULL_NORMAL,
            cal: &cal,
            constraints: &constraints,
            prev,
        };
        let c = predict_cost(&ControlSchedule::constant(prev, 1), &ctx).unwrap();
        assert_eq!(c, crate::field::cost(&applied, &prescribed).unwrap());
        assert_eq!(grid.len(), 400);
    }

    #[test]
    fn infeasible_schedule_rejected() {
        let (_, poses) = setup(10, &[TractorState::new(30.0, 30.0, 0.0)], DepositScaling::Literal);
        let applied = FieldMap::zeros(10);
        let prescribed = FieldMap::filled(10, 20.0);
        let cal = CalibrationModel::default();
        let constraints = ControlConstraints::default();
        let prev = SpreaderControls::symmetric(45.0, 600.0);
        let ctx = HorizonContext {
            poses: &poses,
            applied: &applied,
            prescribed: &prescribed,
            model: SpreadModel::FULL_NORMAL,
            cal: &cal,
            constraints: &constraints,
            prev,
        };
        let jump = ControlSchedule::constant(SpreaderControls::symmetric(45.0, 700.0), 1);
        assert!(matches!(
            predict_cost(&jump, &ctx),
            Err(SpreaderError::InfeasibleSchedule { step: 0, .. })
        ));
        let wrong_len = ControlSchedule::constant(prev, 2);
        assert!(predict_cost(&wrong_len, &ctx).is_err());
    }

    #[test]
    fn met_prescription_drives_flow_down() {
        let (_, poses) = setup(30, &[TractorState::new(30.0, 30.0, 0.0)], DepositScaling::Literal);
        let prescribed = FieldMap::filled(30, 20.0);
        let applied = prescribed.clone();
        let cal = CalibrationModel::default();
        let constraints = ControlConstraints::default();
        let prev = SpreaderControls::symmetric(45.0, 600.0);
        let ctx = HorizonContext {
            poses: &poses,
            applied: &applied,
            prescribed: &prescribed,
            model: SpreadModel::FULL_NORMAL,
            cal: &cal,
            constraints: &constraints,
            prev,
        };
        let (u, _) = greedy_step(&ctx, &OptimizerSettings::default()).unwrap();
        let (rate_d, _) = constraints.component_rate();
        assert!((u.d_left - (45.0 - rate_d)).abs() < 1e-9, "{u:?}");
        assert!((u.d_right - (45.0 - rate_d)).abs() < 1e-9, "{u:?}");
    }

    #[test]
    fn controller_kind_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(ControllerKind::parse(k.name()), Some(k));
        }
        assert_eq!(ControllerKind::parse("mpc"), None);
        assert_eq!(ControllerKind::Greedy.effective_horizon(5), 1);
        assert_eq!(ControllerKind::MpcFull.effective_horizon(5), 5);
    }
}
