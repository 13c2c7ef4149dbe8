//! Scenario and calibration files (TOML) and their resolution into the
//! domain types.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationModel, ControlConstraints};
use crate::controllers::{ControllerKind, SpreaderControls};
use crate::error::{Result, SpreaderError};
use crate::field::{FieldGrid, FieldMap};
use crate::kinematics::{DriveCommand, DrivePlan, Integrator, TractorState};
use crate::optimizer::OptimizerSettings;
use crate::simulation::Scenario;
use crate::spread::{DepositScaling, TriangleSupport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    /// Side length of the square field [m].
    pub side_length: f64,
    /// Cells per side.
    pub cells: usize,
    #[serde(default)]
    pub origin: [f64; 2],
    /// Uniform prescription [g per cell].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prescription: Option<f64>,
    /// Headerless CSV prescription, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prescription_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    /// Forward speed [m/s].
    pub speed: f64,
    /// Turning rate [rad/s].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_rate: Option<f64>,
    /// Turning rate as a multiple of pi [rad/s].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_rate_over_pi: Option<f64>,
    /// [s]
    pub duration: f64,
}

impl SegmentSpec {
    fn command(&self, index: usize) -> Result<DriveCommand> {
        let u2 = match (self.turn_rate, self.turn_rate_over_pi) {
            (Some(_), Some(_)) => {
                return Err(SpreaderError::Config(format!(
                    "plan.segments[{index}]: give turn_rate or turn_rate_over_pi, not both"
                )))
            }
            (Some(w), None) => w,
            (None, Some(k)) => k * std::f64::consts::PI,
            (None, None) => 0.0,
        };
        Ok(DriveCommand::new(self.speed, u2, self.duration))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub start: TractorState,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub segments: Vec<SegmentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Time step [s].
    pub dt: f64,
    pub controller: ControllerKind,
    /// Prediction horizon [steps].
    pub horizon: usize,
    #[serde(default)]
    pub scaling: DepositScaling,
    #[serde(default)]
    pub triangle_support: TriangleSupport,
    pub initial_controls: SpreaderControls,
    /// Worker threads, 0 = one per core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub verbose: bool,
}

/// Contents of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub field: FieldSection,
    pub plan: PlanSection,
    pub run: RunSection,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    /// d(rpm), highest degree first.
    pub center_distance: [f64; 2],
    pub sigma_d: [f64; 3],
    /// Right-disc angle; the left disc is mirrored.
    pub psi: [f64; 3],
    pub sigma_psi: [f64; 3],
}

/// Contents of a calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub coefficients: CoefficientSection,
    pub constraints: ControlConstraints,
}

impl CalibrationFile {
    pub fn model(&self) -> CalibrationModel {
        let c = &self.coefficients;
        CalibrationModel {
            d_coeffs: c.center_distance,
            sigma_d_coeffs: c.sigma_d,
            psi_coeffs: c.psi,
            sigma_psi_coeffs: c.sigma_psi,
        }
    }

    pub fn from_parts(model: &CalibrationModel, constraints: ControlConstraints) -> Self {
        Self {
            coefficients: CoefficientSection {
                center_distance: model.d_coeffs,
                sigma_d: model.sigma_d_coeffs,
                psi: model.psi_coeffs,
                sigma_psi: model.sigma_psi_coeffs,
            },
            constraints,
        }
    }

    /// Constraints first, then the pattern polynomials over the RPM range.
    pub fn validate(&self) -> Result<()> {
        let c = &self.constraints;
        c.validate()?;
        self.model().validate_range(c.rpm_min, c.rpm_max)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| SpreaderError::io(path, e))
}

pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<ScenarioFile> {
    let path = path.as_ref();
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| SpreaderError::parse(path, e.to_string()))
}

pub fn load_calibration_file(path: impl AsRef<Path>) -> Result<CalibrationFile> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let file: CalibrationFile =
        toml::from_str(&text).map_err(|e| SpreaderError::parse(path, e.to_string()))?;
    file.validate()?;
    Ok(file)
}

/// Command-line values that take precedence over the scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub controller: Option<ControllerKind>,
    pub horizon: Option<usize>,
    pub scaling: Option<DepositScaling>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub multi_start: Option<usize>,
    pub max_iterations: Option<usize>,
    pub verbose: bool,
}

impl ScenarioFile {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = o.controller {
            self.run.controller = c;
        }
        if let Some(h) = o.horizon {
            self.run.horizon = h;
        }
        if let Some(s) = o.scaling {
            self.run.scaling = s;
        }
        if let Some(t) = o.threads {
            self.run.threads = t;
        }
        if let Some(s) = o.seed {
            self.optimizer.seed = s;
        }
        if let Some(k) = o.multi_start {
            self.optimizer.multi_start = k;
        }
        if let Some(m) = o.max_iterations {
            self.optimizer.max_iterations = m;
        }
        self.run.verbose |= o.verbose;
    }

    /// Builds the scenario; `base_dir` resolves a relative prescription CSV.
    pub fn resolve(&self, base_dir: &Path) -> Result<Scenario> {
        let f = &self.field;
        let grid = FieldGrid::with_origin(f.side_length, f.cells, (f.origin[0], f.origin[1]))?;
        let prescription = match (f.prescription, &f.prescription_csv) {
            (Some(_), Some(_)) => {
                return Err(SpreaderError::Config(
                    "field: give prescription or prescription_csv, not both".into(),
                ))
            }
            (None, None) => {
                return Err(SpreaderError::Config(
                    "field: prescription or prescription_csv is required".into(),
                ))
            }
            (Some(v), None) => {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(SpreaderError::Config(format!(
                        "field.prescription must be finite and >= 0, got {v}"
                    )));
                }
                FieldMap::filled(f.cells, v)
            }
            (None, Some(p)) => {
                let p = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let map = FieldMap::read_csv(&p)?;
                if map.n() != f.cells {
                    return Err(SpreaderError::Shape {
                        expected: f.cells,
                        got: map.n(),
                    });
                }
                map
            }
        };
        let segments = self
            .plan
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| s.command(i))
            .collect::<Result<Vec<_>>>()?;
        self.optimizer.validate()?;
        Ok(Scenario {
            grid,
            prescription,
            plan: DrivePlan {
                start: self.plan.start,
                segments,
            },
            dt: self.run.dt,
            initial_controls: self.run.initial_controls,
            controller: self.run.controller,
            horizon: self.run.horizon,
            scaling: self.run.scaling,
            triangle_support: self.run.triangle_support,
            integrator: self.plan.integrator,
        })
    }
}

/// Fully resolved configuration, echoed into every summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub scenario: ScenarioFile,
    pub calibration: CalibrationFile,
}

impl EffectiveConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SpreaderError::Internal(e.to_string()))
    }

    /// SHA-256 of the TOML rendering, hex encoded.
    pub fn settings_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// A loaded, validated scenario/calibration pair.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub effective: EffectiveConfig,
    pub scenario: Scenario,
    pub calibration: CalibrationModel,
    pub constraints: ControlConstraints,
    pub settings: OptimizerSettings,
}

pub fn load(scenario_path: &Path, calibration_path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let mut file = load_scenario_file(scenario_path)?;
    file.apply(overrides);
    let calibration = load_calibration_file(calibration_path)?;
    let base_dir = scenario_path.parent().unwrap_or_else(|| Path::new("."));
    let scenario = file.resolve(base_dir)?;
    scenario.validate(&calibration.constraints)?;
    let model = calibration.model();
    let constraints = calibration.constraints;
    let settings = file.optimizer.clone();
    Ok(LoadedConfig {
        effective: EffectiveConfig {
            scenario: file,
            calibration,
        },
        scenario,
        calibration: model,
        constraints,
        settings,
    })
}
