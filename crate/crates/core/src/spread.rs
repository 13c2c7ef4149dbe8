//! Crescent spread pattern of a twin-disc spreader.
//!
//! Each disc deposits a lobe described by a radial distribution around the
//! ring of radius `d` behind the tractor and an angular distribution around
//! the bearing `psi`, measured from the reverse heading. Bearings to the
//! driver's right are positive, so right lobes have `psi > 0` and left lobes
//! `psi < 0`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpreaderError};
use crate::field::{AmountMap, FieldGrid, FieldMap};
use crate::kinematics::TractorState;

/// Below this tractor-to-cell distance the bearing is undefined.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Per-disc spread-pattern parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    /// Mass flow D [g per step].
    pub mass_flow: f64,
    /// Distance d from the tractor to the lobe center [m].
    pub center_distance: f64,
    /// Radial standard deviation [m].
    pub sigma_d: f64,
    /// Lobe center bearing from the reverse heading [rad].
    pub psi: f64,
    /// Angular standard deviation [rad].
    pub sigma_psi: f64,
}

impl PatternParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mass_flow >= 0.0
            && self.center_distance > 0.0
            && self.sigma_d > 0.0
            && self.sigma_psi > 0.0
            && self.psi > -PI
            && self.psi < PI
            && self.mass_flow.is_finite()
            && self.center_distance.is_finite()
            && self.sigma_d.is_finite()
            && self.sigma_psi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SpreaderError::InvalidState(format!(
                "pattern parameters out of domain: {self:?}"
            )))
        }
    }

    /// Same lobe on the opposite side (psi negated).
    pub fn mirrored(&self) -> Self {
        Self {
            psi: -self.psi,
            ..*self
        }
    }
}

/// Position of a cell relative to the tractor and a pattern lobe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeGeometry {
    /// Distance to the tractor minus d [m].
    pub radial_offset: f64,
    /// Signed bearing from the reverse heading [rad].
    pub theta: f64,
    /// Orientation discriminant [m].
    pub cross: f64,
    /// theta - psi [rad], not wrapped.
    pub angular_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepositionModelKind {
    /// Product of two Gaussian factors.
    #[default]
    FullNormal,
    /// Piecewise-linear surrogate with the same peak value.
    Triangle,
}

/// Support of the triangle factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriangleSupport {
    /// Zero crossing at |X| = 1 m and |Y| = 1 rad regardless of sigma.
    #[default]
    Literal,
    /// Half-width sqrt(2 pi) sigma, so each factor integrates to one.
    SigmaScaled,
}

/// How a (distance, angle) density becomes grams in a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepositScaling {
    /// Cell value is the density at the cell center.
    #[default]
    Literal,
    /// Density times cell area over the cell-to-tractor distance; the per-step
    /// deposit then sums to D_l + D_r for interior patterns.
    Conservative,
}

/// Deposition density model: the distribution family plus triangle support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpreadModel {
    pub kind: DepositionModelKind,
    #[serde(default)]
    pub triangle_support: TriangleSupport,
}

impl SpreadModel {
    pub const FULL_NORMAL: Self = Self {
        kind: DepositionModelKind::FullNormal,
        triangle_support: TriangleSupport::Literal,
    };
    pub const TRIANGLE: Self = Self {
        kind: DepositionModelKind::Triangle,
        triangle_support: TriangleSupport::Literal,
    };

    pub fn new(kind: DepositionModelKind, triangle_support: TriangleSupport) -> Self {
        Self {
            kind,
            triangle_support,
        }
    }

    pub fn density(&self, radial_offset: f64, angular_offset: f64, p: &PatternParams) -> f64 {
        match (self.kind, self.triangle_support) {
            (DepositionModelKind::FullNormal, _) => {
                deposition_density_normal(radial_offset, angular_offset, p)
            }
            (DepositionModelKind::Triangle, TriangleSupport::Literal) => {
                deposition_density_triangle(radial_offset, angular_offset, p)
            }
            (DepositionModelKind::Triangle, TriangleSupport::SigmaScaled) => {
                deposition_density_triangle_scaled(radial_offset, angular_offset, p)
            }
        }
    }

    /// Density at a cell and its partial derivatives with respect to the
    /// pattern parameters.
    pub fn density_partials(
        &self,
        radial_offset: f64,
        angular_offset: f64,
        p: &PatternParams,
    ) -> DensityPartials {
        let (fx, dfx, dfs_d) = self.radial_factor(radial_offset, p.sigma_d);
        let (gy, dgy, dgs_psi) = self.angular_factor(angular_offset, p.sigma_psi);
        let unit = fx * gy;
        let d = p.mass_flow;
        DensityPartials {
            value: d * unit,
            per_mass_flow: unit,
            // X = r - d and Y = theta - psi
            center_distance: -d * dfx * gy,
            sigma_d: d * dfs_d * gy,
            psi: -d * fx * dgy,
            sigma_psi: d * fx * dgs_psi,
        }
    }

    /// Radial factor and its derivatives in X and sigma_d.
    fn radial_factor(&self, x: f64, sigma: f64) -> (f64, f64, f64) {
        match (self.kind, self.triangle_support) {
            (DepositionModelKind::FullNormal, _) => gaussian_factor(x, sigma),
            (DepositionModelKind::Triangle, TriangleSupport::Literal) => {
                triangle_factor_literal(x, sigma)
            }
            (DepositionModelKind::Triangle, TriangleSupport::SigmaScaled) => {
                triangle_factor_scaled(x, sigma)
            }
        }
    }

    fn angular_factor(&self, y: f64, sigma: f64) -> (f64, f64, f64) {
        self.radial_factor(y, sigma)
    }
}

/// Density value and partials with respect to (D, d, sigma_d, psi, sigma_psi).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DensityPartials {
    pub value: f64,
    pub per_mass_flow: f64,
    pub center_distance: f64,
    pub sigma_d: f64,
    pub psi: f64,
    pub sigma_psi: f64,
}

/// exp(-x^2 / 2 s^2) / (sqrt(2 pi) s) with d/dx and d/ds.
#[inline]
fn gaussian_factor(x: f64, s: f64) -> (f64, f64, f64) {
    let z = x / s;
    let f = (-0.5 * z * z).exp() / (SQRT_2PI * s);
    (f, -f * z / s, f * (z * z - 1.0) / s)
}

#[inline]
fn triangle_factor_literal(x: f64, s: f64) -> (f64, f64, f64) {
    let ax = x.abs();
    if ax >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let scale = 1.0 / (SQRT_2PI * s);
    let f = (1.0 - ax) * scale;
    (f, -x.signum() * scale * f64::from(x != 0.0), -f / s)
}

#[inline]
fn triangle_factor_scaled(x: f64, s: f64) -> (f64, f64, f64) {
    let w = SQRT_2PI * s;
    let ax = x.abs();
    if ax >= w {
        return (0.0, 0.0, 0.0);
    }
    let f = (1.0 - ax / w) / w;
    let dfdw = -1.0 / (w * w) + 2.0 * ax / (w * w * w);
    (f, -x.signum() * f64::from(x != 0.0) / (w * w), dfdw * SQRT_2PI)
}

/// Distance from the tractor to the cell minus `d`.
pub fn radial_offset(cell: (f64, f64), tractor: (f64, f64), d: f64) -> f64 {
    (tractor.0 - cell.0).hypot(tractor.1 - cell.1) - d
}

/// Signed bearing of the cell from the reverse heading, and the orientation
/// discriminant. `None` when the cell coincides with the tractor.
///
/// The bearing is `sign(cross) * acos(dot / dist)`, evaluated as
/// `atan2(cross, dot)`, which keeps full precision near 0 and pi.
pub fn bearing(cell: (f64, f64), tractor: (f64, f64), phi: f64) -> Option<(f64, f64)> {
    let (da, db) = (cell.0 - tractor.0, cell.1 - tractor.1);
    if da.hypot(db) < DEGENERATE_DISTANCE {
        return None;
    }
    let (sin_rev, cos_rev) = (phi + PI).sin_cos();
    let dot = cos_rev * da + sin_rev * db;
    let cross = db * cos_rev - da * sin_rev;
    let theta = cross.atan2(dot);
    // atan2 returns +pi for a cell straight ahead with cross = -0.0 and -pi
    // with cross = -0.0; only a strictly negative cross flips the sign
    let theta = if cross < 0.0 { -theta.abs() } else { theta.abs() };
    Some((theta, cross))
}

/// Full relative geometry of a cell for one lobe.
pub fn relative_geometry(
    cell: (f64, f64),
    tractor: &TractorState,
    p: &PatternParams,
) -> RelativeGeometry {
    let pos = (tractor.x, tractor.y);
    let (theta, cross, radial_offset) = match bearing(cell, pos, tractor.phi) {
        Some((theta, cross)) => (theta, cross, radial_offset(cell, pos, p.center_distance)),
        None => (0.0, 0.0, -p.center_distance),
    };
    RelativeGeometry {
        radial_offset,
        theta,
        cross,
        angular_offset: theta - p.psi,
    }
}

/// Gaussian deposition density [g/(m rad)].
pub fn deposition_density_normal(radial_offset: f64, angular_offset: f64, p: &PatternParams) -> f64 {
    let zx = radial_offset / p.sigma_d;
    let zy = angular_offset / p.sigma_psi;
    p.mass_flow / (2.0 * PI * p.sigma_d * p.sigma_psi)
        * (-0.5 * zx * zx).exp()
        * (-0.5 * zy * zy).exp()
}

/// Triangle deposition density, zero outside |X| < 1 m and |Y| < 1 rad.
pub fn deposition_density_triangle(
    radial_offset: f64,
    angular_offset: f64,
    p: &PatternParams,
) -> f64 {
    p.mass_flow
        * triangle_factor_literal(radial_offset, p.sigma_d).0
        * triangle_factor_literal(angular_offset, p.sigma_psi).0
}

/// Triangle density with sigma-proportional support.
pub fn deposition_density_triangle_scaled(
    radial_offset: f64,
    angular_offset: f64,
    p: &PatternParams,
) -> f64 {
    p.mass_flow
        * triangle_factor_scaled(radial_offset, p.sigma_d).0
        * triangle_factor_scaled(angular_offset, p.sigma_psi).0
}

/// Tractor-relative polar coordinates of every cell center, plus the
/// density-to-grams weight for the chosen scaling. Independent of the
/// spreader settings, so one instance serves every evaluation at a pose.
#[derive(Debug, Clone)]
pub struct PoseGeometry {
    pub pose: TractorState,
    distance: Vec<f64>,
    theta: Vec<f64>,
    weight: Vec<f64>,
}

impl PoseGeometry {
    pub fn new(grid: &FieldGrid, pose: TractorState, scaling: DepositScaling) -> Self {
        let n = grid.len();
        let mut distance = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        let half_cell = 0.5 * grid.cell_size();
        let area = grid.cell_area();
        let pos = (pose.x, pose.y);
        for cell in grid.cell_centers() {
            let r = (cell.0 - pos.0).hypot(cell.1 - pos.1);
            let (th, _) = bearing(cell, pos, pose.phi).unwrap_or((0.0, 0.0));
            distance.push(if r < DEGENERATE_DISTANCE { 0.0 } else { r });
            theta.push(th);
            weight.push(match scaling {
                DepositScaling::Literal => 1.0,
                DepositScaling::Conservative => area / r.max(half_cell),
            });
        }
        Self {
            pose,
            distance,
            theta,
            weight,
        }
    }

    pub fn len(&self) -> usize {
        self.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance.is_empty()
    }

    /// Cell `c`: (distance, bearing, weight).
    #[inline]
    pub fn cell(&self, c: usize) -> (f64, f64, f64) {
        (self.distance[c], self.theta[c], self.weight[c])
    }

    /// Grams deposited in cell `c` by one lobe.
    #[inline]
    pub fn lobe_value(&self, model: &SpreadModel, c: usize, p: &PatternParams) -> f64 {
        let (r, th, w) = self.cell(c);
        w * model.density(r - p.center_distance, th - p.psi, p)
    }

    /// Adds both lobes into `out` (one slot per cell).
    pub fn deposit_into(
        &self,
        model: &SpreadModel,
        left: &PatternParams,
        right: &PatternParams,
        out: &mut [f64],
    ) {
        out.par_iter_mut().enumerate().for_each(|(c, slot)| {
            *slot += self.lobe_value(model, c, left) + self.lobe_value(model, c, right);
        });
    }

    pub fn deposit(
        &self,
        model: &SpreadModel,
        left: &PatternParams,
        right: &PatternParams,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.deposit_into(model, left, right, &mut out);
        out
    }
}

/// Per-cell deposit of both discs at one tractor pose.
pub fn total_deposit(
    tractor: &TractorState,
    left: &PatternParams,
    right: &PatternParams,
    grid: &FieldGrid,
    model: SpreadModel,
    scaling: DepositScaling,
) -> AmountMap {
    let geom = PoseGeometry::new(grid, *tractor, scaling);
    let values = geom.deposit(&model, left, right);
    FieldMap::from_vec(grid.n_cells, values).expect("deposits are finite and non-negative")
}
