//! Disc-speed calibration and the machine constraint envelope.
//!
//! The lobe distance `d` is linear in RPM; `sigma_d`, `psi` and `sigma_psi`
//! are quadratic. Coefficients are machine and fertilizer specific, so the
//! shipped defaults are only a plausible synthetic machine.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controllers::SpreaderControls;
use crate::error::{Result, SpreaderError};
use crate::spread::PatternParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Polynomial coefficients, highest degree first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// (c1, c0) of d(rpm) = c1 rpm + c0.
    pub d_coeffs: [f64; 2],
    /// (a2, a1, a0) of sigma_d(rpm).
    pub sigma_d_coeffs: [f64; 3],
    /// (b2, b1, b0) of psi(rpm) for the right disc.
    pub psi_coeffs: [f64; 3],
    /// (e2, e1, e0) of sigma_psi(rpm).
    pub sigma_psi_coeffs: [f64; 3],
}

impl Default for CalibrationModel {
    fn default() -> Self {
        Self {
            d_coeffs: [0.02, 3.0],
            sigma_d_coeffs: [0.0, 1.0 / 300.0, 0.0],
            psi_coeffs: [1e-7, 0.0, FRAC_PI_4],
            sigma_psi_coeffs: [1e-8, 0.0, 0.3],
        }
    }
}

/// Derivatives of the pattern geometry with respect to RPM.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PatternSensitivity {
    pub center_distance: f64,
    pub sigma_d: f64,
    pub psi: f64,
    pub sigma_psi: f64,
}

fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

fn poly_derivative(coeffs: &[f64], x: f64) -> f64 {
    let deg = coeffs.len() - 1;
    coeffs[..deg]
        .iter()
        .enumerate()
        .fold(0.0, |acc, (k, &c)| acc * x + c * (deg - k) as f64)
}

impl CalibrationModel {
    pub fn center_distance(&self, rpm: f64) -> f64 {
        poly_eval(&self.d_coeffs, rpm)
    }

    pub fn sigma_d(&self, rpm: f64) -> f64 {
        poly_eval(&self.sigma_d_coeffs, rpm)
    }

    /// Right-disc lobe bearing; the left disc uses the negation.
    pub fn psi(&self, rpm: f64) -> f64 {
        poly_eval(&self.psi_coeffs, rpm)
    }

    pub fn sigma_psi(&self, rpm: f64) -> f64 {
        poly_eval(&self.sigma_psi_coeffs, rpm)
    }

    /// Pattern parameters for one disc, without domain validation.
    pub fn pattern(&self, rpm: f64, mass_flow: f64, side: Side) -> PatternParams {
        let psi = self.psi(rpm);
        PatternParams {
            mass_flow,
            center_distance: self.center_distance(rpm),
            sigma_d: self.sigma_d(rpm),
            psi: match side {
                Side::Right => psi,
                Side::Left => -psi,
            },
            sigma_psi: self.sigma_psi(rpm),
        }
    }

    pub fn sensitivity(&self, rpm: f64, side: Side) -> PatternSensitivity {
        let dpsi = poly_derivative(&self.psi_coeffs, rpm);
        PatternSensitivity {
            center_distance: poly_derivative(&self.d_coeffs, rpm),
            sigma_d: poly_derivative(&self.sigma_d_coeffs, rpm),
            psi: match side {
                Side::Right => dpsi,
                Side::Left => -dpsi,
            },
            sigma_psi: poly_derivative(&self.sigma_psi_coeffs, rpm),
        }
    }

    fn check_at(&self, rpm: f64) -> Result<()> {
        let domain = |reason: String| SpreaderError::CalibrationDomain { rpm, reason };
        let d = self.center_distance(rpm);
        let sd = self.sigma_d(rpm);
        let psi = self.psi(rpm);
        let sp = self.sigma_psi(rpm);
        if !(d > 0.0 && d.is_finite()) {
            return Err(domain(format!("d = {d} must be > 0")));
        }
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(domain(format!("sigma_d = {sd} must be > 0")));
        }
        if !(sp > 0.0 && sp.is_finite()) {
            return Err(domain(format!("sigma_psi = {sp} must be > 0")));
        }
        if !(psi.abs() > 0.0 && psi.abs() < PI) {
            return Err(domain(format!("|psi| = {} must be in (0, pi)", psi.abs())));
        }
        Ok(())
    }

    /// Checks the parameter invariants on every integer RPM of the range
    /// and at both ends.
    pub fn validate_range(&self, rpm_min: f64, rpm_max: f64) -> Result<()> {
        let coeffs = self
            .d_coeffs
            .iter()
            .chain(&self.sigma_d_coeffs)
            .chain(&self.psi_coeffs)
            .chain(&self.sigma_psi_coeffs);
        if coeffs.clone().any(|c| !c.is_finite()) {
            return Err(SpreaderError::Config(
                "calibration coefficients must be finite".into(),
            ));
        }
        self.check_at(rpm_min)?;
        let mut rpm = rpm_min.ceil();
        while rpm <= rpm_max {
            self.check_at(rpm)?;
            rpm += 1.0;
        }
        self.check_at(rpm_max)
    }
}

/// Pattern parameters for one disc at the given settings.
pub fn pattern_from_controls(
    rpm: f64,
    mass_flow: f64,
    cal: &CalibrationModel,
    side: Side,
) -> Result<PatternParams> {
    if !(mass_flow >= 0.0 && mass_flow.is_finite()) {
        return Err(SpreaderError::CalibrationDomain {
            rpm,
            reason: format!("mass flow {mass_flow} must be >= 0"),
        });
    }
    cal.check_at(rpm)?;
    let p = cal.pattern(rpm, mass_flow, side);
    p.validate()
        .map_err(|e| SpreaderError::CalibrationDomain {
            rpm,
            reason: e.to_string(),
        })?;
    Ok(p)
}

/// Box and rate limits on the spreader settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConstraints {
    pub d_min: f64,
    pub d_max: f64,
    pub rpm_min: f64,
    pub rpm_max: f64,
    /// Bound on the 2-norm of the (left, right) mass-flow change per step.
    pub d_rate_max: f64,
    /// Bound on the 2-norm of the (left, right) RPM change per step.
    pub rpm_rate_max: f64,
}

impl Default for ControlConstraints {
    fn default() -> Self {
        Self {
            d_min: 0.0,
            d_max: 200.0,
            rpm_min: 300.0,
            rpm_max: 900.0,
            d_rate_max: 20.0,
            rpm_rate_max: 100.0,
        }
    }
}

/// Shrink applied to rate/sqrt(2) so a componentwise box never rounds past
/// the 2-norm bound.
const RATE_BOX_SHRINK: f64 = 1.0 - 1e-9;

impl ControlConstraints {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_min,
            self.d_max,
            self.rpm_min,
            self.rpm_max,
            self.d_rate_max,
            self.rpm_rate_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SpreaderError::Config("constraints must be finite".into()));
        }
        if self.d_min > self.d_max {
            return Err(SpreaderError::Config(format!(
                "constraint d_min ({}) > d_max ({})",
                self.d_min, self.d_max
            )));
        }
        if self.d_min < 0.0 {
            return Err(SpreaderError::Config(format!(
                "constraint d_min ({}) must be >= 0",
                self.d_min
            )));
        }
        if self.rpm_min > self.rpm_max {
            return Err(SpreaderError::Config(format!(
                "constraint rpm_min ({}) > rpm_max ({})",
                self.rpm_min, self.rpm_max
            )));
        }
        if self.rpm_min <= 0.0 {
            return Err(SpreaderError::Config(format!(
                "constraint rpm_min ({}) must be > 0",
                self.rpm_min
            )));
        }
        if self.d_rate_max <= 0.0 {
            return Err(SpreaderError::Config(format!(
                "constraint d_rate_max ({}) must be > 0",
                self.d_rate_max
            )));
        }
        if self.rpm_rate_max <= 0.0 {
            return Err(SpreaderError::Config(format!(
                "constraint rpm_rate_max ({}) must be > 0",
                self.rpm_rate_max
            )));
        }
        Ok(())
    }

    /// Componentwise per-step change limit used inside the optimizer,
    /// for (mass flow, rpm).
    pub fn component_rate(&self) -> (f64, f64) {
        (
            self.d_rate_max * FRAC_1_SQRT_2 * RATE_BOX_SHRINK,
            self.rpm_rate_max * FRAC_1_SQRT_2 * RATE_BOX_SHRINK,
        )
    }

    pub fn in_box(&self, u: &SpreaderControls) -> bool {
        let d_ok = |v: f64| v >= self.d_min && v <= self.d_max;
        let r_ok = |v: f64| v >= self.rpm_min && v <= self.rpm_max;
        d_ok(u.d_left) && d_ok(u.d_right) && r_ok(u.rpm_left) && r_ok(u.rpm_right)
    }

    /// Exact 2-norm rate check between consecutive controls.
    pub fn rate_ok(&self, u: &SpreaderControls, prev: &SpreaderControls) -> bool {
        (u.d_left - prev.d_left).hypot(u.d_right - prev.d_right) <= self.d_rate_max
            && (u.rpm_left - prev.rpm_left).hypot(u.rpm_right - prev.rpm_right)
                <= self.rpm_rate_max
    }

    pub fn is_feasible(&self, u: &SpreaderControls, prev: &SpreaderControls) -> bool {
        self.in_box(u) && self.rate_ok(u, prev)
    }
}

/// Moves `u` into the feasible set around `prev`: each component is clipped to
/// its box and rate window, then each (left, right) pair change is shrunk
/// radially toward `prev` if its 2-norm exceeds the rate limit. Feasible
/// inputs are returned unchanged.
pub fn clamp_controls(
    u: &SpreaderControls,
    prev: &SpreaderControls,
    c: &ControlConstraints,
) -> Result<SpreaderControls> {
    fn pair(
        (ul, ur): (f64, f64),
        (pl, pr): (f64, f64),
        lo: f64,
        hi: f64,
        rate: f64,
    ) -> Result<(f64, f64)> {
        let window = |u: f64, p: f64| -> Result<f64> {
            let (a, b) = (lo.max(p - rate), hi.min(p + rate));
            if a > b {
                return Err(SpreaderError::Internal(format!(
                    "empty feasible interval [{a}, {b}] around {p}"
                )));
            }
            Ok(u.clamp(a, b))
        };
        let (mut l, mut r) = (window(ul, pl)?, window(ur, pr)?);
        let norm = (l - pl).hypot(r - pr);
        if norm > rate {
            let s = rate / norm * RATE_BOX_SHRINK;
            l = (pl + s * (l - pl)).clamp(lo, hi);
            r = (pr + s * (r - pr)).clamp(lo, hi);
        }
        Ok((l, r))
    }
    if !c.in_box(prev) {
        return Err(SpreaderError::Internal(format!(
            "previous controls {prev:?} violate the box constraints"
        )));
    }
    let (d_left, d_right) = pair(
        (u.d_left, u.d_right),
        (prev.d_left, prev.d_right),
        c.d_min,
        c.d_max,
        c.d_rate_max,
    )?;
    let (rpm_left, rpm_right) = pair(
        (u.rpm_left, u.rpm_right),
        (prev.rpm_left, prev.rpm_right),
        c.rpm_min,
        c.rpm_max,
        c.rpm_rate_max,
    )?;
    Ok(SpreaderControls {
        d_left,
        d_right,
        rpm_left,
        rpm_right,
    })
}

/// One row of a spreading chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartSample {
    pub rpm: f64,
    pub d: f64,
    pub sigma_d: f64,
    pub psi: f64,
    pub sigma_psi: f64,
}

/// Least-squares polynomial fit of one chart column.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// Highest degree first.
    pub coeffs: Vec<f64>,
    /// Standard errors of `coeffs` (NaN when there are no residual degrees of freedom).
    pub std_errors: Vec<f64>,
    pub residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub model: CalibrationModel,
    pub d: PolyFit,
    pub sigma_d: PolyFit,
    pub psi: PolyFit,
    pub sigma_psi: PolyFit,
}

/// Polynomial least squares of the given degree, solved by SVD on a
/// Vandermonde matrix in the scaled abscissa x / max|x|.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    let m = xs.len();
    let p = degree + 1;
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < p {
        return Err(SpreaderError::Fit(format!(
            "degree-{degree} fit needs at least {p} distinct rpm values, got {}",
            distinct.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(SpreaderError::Fit("non-finite chart value".into()));
    }
    let scale = xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let design = DMatrix::from_fn(m, p, |i, j| (xs[i] / scale).powi((degree - j) as i32));
    let rhs = DVector::from_column_slice(ys);
    let svd = design.clone().svd(true, true);
    let scaled = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| SpreaderError::Fit(e.to_string()))?;
    let residual = &rhs - &design * &scaled;
    let rss = residual.norm_squared();
    let dof = m as f64 - p as f64;
    let sigma2 = if dof > 0.0 { rss / dof } else { f64::NAN };
    let gram_inv = (design.transpose() * &design)
        .try_inverse()
        .ok_or_else(|| SpreaderError::Fit("rank-deficient design".into()))?;
    let coeffs: Vec<f64> = (0..p)
        .map(|j| scaled[j] / scale.powi((degree - j) as i32))
        .collect();
    let std_errors = (0..p)
        .map(|j| (sigma2 * gram_inv[(j, j)]).sqrt() / scale.powi((degree - j) as i32))
        .collect();
    Ok(PolyFit {
        coeffs,
        std_errors,
        residual_rms: (rss / m as f64).sqrt(),
    })
}

/// Fits the calibration polynomials to a spreading chart. `psi` values are
/// taken as right-disc bearings.
pub fn fit_calibration(chart: &[ChartSample]) -> Result<CalibrationFit> {
    let rpm: Vec<f64> = chart.iter().map(|s| s.rpm).collect();
    let col = |f: fn(&ChartSample) -> f64| chart.iter().map(f).collect::<Vec<f64>>();
    let d = fit_polynomial(&rpm, &col(|s| s.d), 1)?;
    let sigma_d = fit_polynomial(&rpm, &col(|s| s.sigma_d), 2)?;
    let psi = fit_polynomial(&rpm, &col(|s| s.psi), 2)?;
    let sigma_psi = fit_polynomial(&rpm, &col(|s| s.sigma_psi), 2)?;
    let arr3 = |f: &PolyFit| [f.coeffs[0], f.coeffs[1], f.coeffs[2]];
    Ok(CalibrationFit {
        model: CalibrationModel {
            d_coeffs: [d.coeffs[0], d.coeffs[1]],
            sigma_d_coeffs: arr3(&sigma_d),
            psi_coeffs: arr3(&psi),
            sigma_psi_coeffs: arr3(&sigma_psi),
        },
        d,
        sigma_d,
        psi,
        sigma_psi,
    })
}
