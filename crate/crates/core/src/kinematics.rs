//! Unicycle kinematics for the tractor: pose integration over a fixed drive plan.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpreaderError};

/// Pose of the tractor on the field. Heading accumulates without wrapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TractorState {
    /// Position east [m].
    pub x: f64,
    /// Position north [m].
    pub y: f64,
    /// Heading [rad], measured counter-clockwise from +x.
    pub phi: f64,
}

impl TractorState {
    pub const fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.phi.is_finite()
    }
}

/// Constant forward speed and turning rate held for `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveCommand {
    /// Forward speed [m/s].
    pub u1: f64,
    /// Turning rate [rad/s], positive = counter-clockwise (left).
    pub u2: f64,
    /// Segment length [s].
    pub duration: f64,
}

impl DriveCommand {
    pub const fn new(u1: f64, u2: f64, duration: f64) -> Self {
        Self { u1, u2, duration }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u1.is_finite() && self.u2.is_finite() && self.duration.is_finite()) {
            return Err(SpreaderError::InvalidState(format!(
                "non-finite drive command {self:?}"
            )));
        }
        if self.u1 < 0.0 {
            return Err(SpreaderError::Config(format!(
                "drive command speed must be >= 0, got {}",
                self.u1
            )));
        }
        if self.duration <= 0.0 {
            return Err(SpreaderError::Config(format!(
                "drive command duration must be > 0, got {}",
                self.duration
            )));
        }
        Ok(())
    }
}

/// Ordered drive segments from a start pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivePlan {
    pub start: TractorState,
    pub segments: Vec<DriveCommand>,
}

impl DrivePlan {
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Number of `dt` steps in each segment, or a configuration error if a
    /// segment is not an integer multiple of `dt`.
    pub fn steps_per_segment(&self, dt: f64) -> Result<Vec<usize>> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SpreaderError::Config(format!("dt must be > 0, got {dt}")));
        }
        self.segments
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                seg.validate()?;
                let ratio = seg.duration / dt;
                let steps = ratio.round();
                if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
                    return Err(SpreaderError::Config(format!(
                        "segment {i} duration {} is not a multiple of dt {dt}",
                        seg.duration
                    )));
                }
                Ok(steps as usize)
            })
            .collect()
    }

    /// The three-tramline S-shaped drive: straight, right turn, straight, left turn, straight.
    pub fn s_shaped(start: TractorState) -> Self {
        use std::f64::consts::PI;
        Self {
            start,
            segments: vec![
                DriveCommand::new(10.0, 0.0, 10.0),
                DriveCommand::new(4.0, -PI / 16.0, 16.0),
                DriveCommand::new(10.0, 0.0, 10.0),
                DriveCommand::new(4.0, PI / 16.0, 16.0),
                DriveCommand::new(10.0, 0.0, 10.0),
            ],
        }
    }
}

/// Integration scheme used to advance the pose over one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// Forward Euler, heading taken at the start of the step.
    #[default]
    Euler,
    /// Closed-form constant-curvature arc.
    ExactArc,
}

/// Forward-Euler pose update.
pub fn step(state: TractorState, cmd: &DriveCommand, dt: f64) -> Result<TractorState> {
    step_with(state, cmd, dt, Integrator::Euler)
}

pub fn step_with(
    state: TractorState,
    cmd: &DriveCommand,
    dt: f64,
    integrator: Integrator,
) -> Result<TractorState> {
    if !state.is_finite() || !cmd.u1.is_finite() || !cmd.u2.is_finite() || !dt.is_finite() {
        return Err(SpreaderError::InvalidState(format!(
            "non-finite input: state {state:?}, command ({}, {}), dt {dt}",
            cmd.u1, cmd.u2
        )));
    }
    if dt <= 0.0 {
        return Err(SpreaderError::InvalidState(format!("dt must be > 0, got {dt}")));
    }
    let next = match integrator {
        Integrator::Euler => TractorState {
            x: state.x + state.phi.cos() * cmd.u1 * dt,
            y: state.y + state.phi.sin() * cmd.u1 * dt,
            phi: state.phi + cmd.u2 * dt,
        },
        Integrator::ExactArc => {
            let dphi = cmd.u2 * dt;
            let phi = state.phi + dphi;
            if dphi.abs() < 1e-12 {
                TractorState {
                    x: state.x + state.phi.cos() * cmd.u1 * dt,
                    y: state.y + state.phi.sin() * cmd.u1 * dt,
                    phi,
                }
            } else {
                let radius = cmd.u1 / cmd.u2;
                TractorState {
                    x: state.x + radius * (phi.sin() - state.phi.sin()),
                    y: state.y - radius * (phi.cos() - state.phi.cos()),
                    phi,
                }
            }
        }
    };
    Ok(next)
}

/// Poses at t0, t0+dt, ..., T (inclusive).
pub fn trajectory(plan: &DrivePlan, dt: f64) -> Result<Vec<TractorState>> {
    trajectory_with(plan, dt, Integrator::Euler)
}

pub fn trajectory_with(
    plan: &DrivePlan,
    dt: f64,
    integrator: Integrator,
) -> Result<Vec<TractorState>> {
    if !plan.start.is_finite() {
        return Err(SpreaderError::InvalidState(format!(
            "non-finite start pose {:?}",
            plan.start
        )));
    }
    let counts = plan.steps_per_segment(dt)?;
    let total: usize = counts.iter().sum();
    let mut states = Vec::with_capacity(total + 1);
    let mut current = plan.start;
    states.push(current);
    for (seg, &count) in plan.segments.iter().zip(&counts) {
        for _ in 0..count {
            current = step_with(current, seg, dt, integrator)?;
            states.push(current);
        }
    }
    Ok(states)
}
