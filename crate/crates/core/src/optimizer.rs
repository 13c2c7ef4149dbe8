//! Projected Gauss-Newton / gradient descent for least-squares objectives
//! over a feasible set with a cheap projection.

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpreaderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    /// Levenberg-Marquardt steps on the free variables, projected.
    #[default]
    GaussNewton,
    /// Scaled steepest descent with backtracking, projected.
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSource {
    #[default]
    Analytic,
    /// Central differences with step `finite_diff_epsilon * max(|x|, 1)`.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Stop when the scaled projected gradient falls below this [g^2].
    pub gradient_tolerance: f64,
    /// Stop when the scaled step falls below this.
    pub step_tolerance: f64,
    pub finite_diff_epsilon: f64,
    pub method: SearchMethod,
    pub gradient: GradientSource,
    /// Extra random feasible starting points (0 = off).
    pub multi_start: usize,
    pub seed: u64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            gradient_tolerance: 1e-2,
            step_tolerance: 1e-4,
            finite_diff_epsilon: 1e-5,
            method: SearchMethod::GaussNewton,
            gradient: GradientSource::Analytic,
            multi_start: 0,
            seed: 0,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SpreaderError::Config(format!(
                    "optimizer.{name} must be > 0, got {v}"
                )))
            }
        };
        if self.max_iterations == 0 {
            return Err(SpreaderError::Config(
                "optimizer.max_iterations must be > 0".into(),
            ));
        }
        positive("gradient_tolerance", self.gradient_tolerance)?;
        positive("step_tolerance", self.step_tolerance)?;
        positive("finite_diff_epsilon", self.finite_diff_epsilon)
    }
}

/// A least-squares objective over a feasible set described by per-variable
/// windows that may depend on the other variables.
pub trait ConstrainedProblem {
    fn dim(&self) -> usize;

    fn cost(&self, x: &[f64]) -> Result<f64>;

    /// Gradient and the Gauss-Newton approximation of the Hessian.
    fn linearize(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;

    /// Maps any point onto the feasible set; feasible points are fixed.
    fn project(&self, x: &mut [f64]);

    /// Feasible window of each variable with all other variables held fixed.
    fn local_bounds(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>);

    /// Natural unit of each variable, used for step sizes and tolerances.
    fn scales(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    NoDescent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub x: Vec<f64>,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Central-difference gradient, evaluated without projection.
pub fn finite_difference_gradient<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = epsilon * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let hi = problem.cost(&probe)?;
            probe[i] = x[i] - h;
            let lo = problem.cost(&probe)?;
            probe[i] = x[i];
            Ok((hi - lo) / (2.0 * h))
        })
        .collect()
}

fn projected_gradient_norm(g: &[f64], x: &[f64], lo: &[f64], hi: &[f64], scales: &[f64]) -> f64 {
    (0..g.len())
        .map(|i| {
            let blocked = (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0);
            if blocked {
                0.0
            } else {
                (g[i] * scales[i]).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn scaled_step(a: &[f64], b: &[f64], scales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scales)
        .map(|((a, b), s)| ((a - b) / s).abs())
        .fold(0.0, f64::max)
}

fn check_finite(value: f64, iterations: usize, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SpreaderError::Numerical {
            iterations,
            reason: format!("non-finite {what}: {value}"),
        })
    }
}

/// Minimizes the problem from a starting point. The returned point is
/// feasible and never costs more than the projected start.
pub fn minimize<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    start: &[f64],
    settings: &OptimizerSettings,
) -> Result<OptimizeReport> {
    let n = problem.dim();
    let scales = problem.scales();
    let mut x = start.to_vec();
    problem.project(&mut x);
    let mut f = check_finite(problem.cost(&x)?, 0, "initial cost")?;
    let initial_cost = f;
    let mut lambda = 1e-4;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        let (mut g, hess) = problem.linearize(&x)?;
        if settings.gradient == GradientSource::FiniteDifference {
            g = DVector::from_vec(finite_difference_gradient(
                problem,
                &x,
                settings.finite_diff_epsilon,
            )?);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SpreaderError::Numerical {
                iterations,
                reason: format!("non-finite gradient at cost {f}"),
            });
        }
        let (lo, hi) = problem.local_bounds(&x);
        let pg = projected_gradient_norm(g.as_slice(), &x, &lo, &hi, &scales);
        debug!("iter {iterations}: cost {f:.6e} |pg| {pg:.3e} lambda {lambda:.1e}");
        if pg <= settings.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        iterations += 1;

        let mut accepted: Option<(Vec<f64>, f64)> = None;

        if settings.method == SearchMethod::GaussNewton {
            let free: Vec<usize> = (0..n)
                .filter(|&i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
                .collect();
            let max_diag = free.iter().map(|&i| hess[(i, i)]).fold(0.0, f64::max);
            for _ in 0..6 {
                let m = free.len();
                let mut a = DMatrix::zeros(m, m);
                let mut b = DVector::zeros(m);
                for (r, &i) in free.iter().enumerate() {
                    b[r] = -g[i];
                    for (c, &j) in free.iter().enumerate() {
                        a[(r, c)] = hess[(i, j)];
                    }
                    let diag = hess[(i, i)].max(1e-12 * max_diag).max(f64::MIN_POSITIVE);
                    a[(r, r)] += lambda * diag;
                }
                let Some(p) = a.cholesky().map(|ch| ch.solve(&b)) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut trial = x.clone();
                for (r, &i) in free.iter().enumerate() {
                    trial[i] += p[r];
                }
                problem.project(&mut trial);
                let ft = problem.cost(&trial)?;
                trace!("  lm lambda {lambda:.1e}: cost {ft:.6e}");
                if ft.is_finite() && ft < f {
                    accepted = Some((trial, ft));
                    lambda = (lambda / 3.0).max(1e-9);
                    break;
                }
                lambda *= 10.0;
            }
            lambda = lambda.min(1e6);
        }

        if accepted.is_none() {
            // scaled steepest descent, first trial moves at most one scale unit
            let gs = g
                .iter()
                .zip(&scales)
                .map(|(g, s)| (g * s).abs())
                .fold(0.0, f64::max);
            let mut alpha = 1.0 / gs.max(f64::MIN_POSITIVE);
            for _ in 0..40 {
                let mut trial: Vec<f64> = (0..n)
                    .map(|i| x[i] - alpha * scales[i] * scales[i] * g[i])
                    .collect();
                problem.project(&mut trial);
                let decrease: f64 = (0..n).map(|i| g[i] * (x[i] - trial[i])).sum();
                let ft = problem.cost(&trial)?;
                if ft.is_finite() && ft < f && f - ft >= 1e-4 * decrease {
                    accepted = Some((trial, ft));
                    break;
                }
                alpha *= 0.5;
            }
        }

        match accepted {
            Some((trial, ft)) => {
                let step = scaled_step(&trial, &x, &scales);
                debug!("  accepted cost {ft:.6e} step {step:.3e}");
                x = trial;
                f = check_finite(ft, iterations, "cost")?;
                if step <= settings.step_tolerance {
                    termination = Termination::StepTolerance;
                    break;
                }
            }
            None => {
                termination = Termination::NoDescent;
                break;
            }
        }
    }

    Ok(OptimizeReport {
        x,
        initial_cost,
        cost: f,
        iterations,
        termination,
    })
}
