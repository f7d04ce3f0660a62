//! Largest admissible perturbation strength: the fixed point
//! `f(δ_max) = δ_max` of `f(δ) = 1/‖T_δ‖`, found from a log-spaced grid by
//! a power-law fit or, when that fits poorly, a natural cubic spline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{brent, fit_line, flag_outliers, local_residuals, CubicSpline, LineFit};
use crate::problem::PerturbationProblem;
use crate::scalar::Real;
use crate::transfer::TransferOptions;

/// Local residuals (decades) below this are treated as round-off.
pub const OUTLIER_FLOOR: f64 = 1e-6;
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaMaxConfig {
    pub log10_start: f64,
    pub log10_stop: f64,
    pub count: usize,
    /// Power-law fit is used when `R²` reaches this.
    pub r2_threshold: f64,
    /// A power-law `δ_max` whose verified residual exceeds this is replaced
    /// by the spline root.
    pub residual_tolerance: f64,
}

impl Default for DeltaMaxConfig {
    fn default() -> Self {
        Self {
            log10_start: -6.0,
            log10_stop: 0.0,
            count: 50,
            r2_threshold: 0.995,
            residual_tolerance: 1e-2,
        }
    }
}

impl DeltaMaxConfig {
    pub fn deltas<T: Real>(&self) -> Vec<T> {
        log_grid(self.log10_start, self.log10_stop, self.count)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log10_stop > self.log10_start) || self.count < 2 {
            return Err(Error::Config("grid needs log10_stop > log10_start and count >= 2".into()));
        }
        if self.count < MIN_FIT_POINTS {
            return Err(Error::Config(format!("grid count must be >= {MIN_FIT_POINTS}")));
        }
        Ok(())
    }
}

pub fn log_grid<T: Real>(log10_start: f64, log10_stop: f64, count: usize) -> Vec<T> {
    if count == 1 {
        return vec![T::lit(10f64.powf(log10_start))];
    }
    let step = (log10_stop - log10_start) / (count - 1) as f64;
    (0..count)
        .map(|i| T::lit(10f64.powf(log10_start + step * i as f64)))
        .collect()
}

/// One evaluated grid point.
#[derive(Clone, Debug, Serialize)]
pub struct GridPoint<T> {
    pub delta: T,
    pub norm: Option<T>,
    pub omega_crit: Option<T>,
    pub outlier: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaGrid<T> {
    pub points: Vec<GridPoint<T>>,
}

impl<T: Real> DeltaGrid<T> {
    /// `(log10 δ, log10 f(δ))` over points that evaluated and are not outliers.
    pub fn fit_data(&self) -> (Vec<T>, Vec<T>) {
        self.points
            .iter()
            .filter(|p| !p.outlier)
            .filter_map(|p| p.norm.map(|n| (p.delta.log10(), -n.log10())))
            .unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    PowerLaw,
    Spline,
}

/// Fit summary. `a`, `b`, `r2` are always the least-squares line
/// `log10 f = a·log10 δ + b`, also when the spline branch was used.
#[derive(Clone, Debug, Serialize)]
pub struct FitSummary<T> {
    #[serde(rename = "type")]
    pub kind: FitKind,
    pub a: T,
    pub b: T,
    pub r2: T,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaMaxResult<T> {
    pub delta_max: Option<T>,
    pub fit: Option<FitSummary<T>>,
    pub grid: Vec<GridPoint<T>>,
    /// `|f(δ_max) − δ_max|/δ_max` from a direct re-evaluation.
    pub fp_residual: Option<T>,
    /// Fit residuals `y − (a·x + b)` over the fitted points.
    pub residuals: Vec<T>,
    pub removed_outliers: Vec<usize>,
    /// No dissipation: `‖T_δ‖` is unbounded at resonances.
    pub closed_system: bool,
    /// The power-law candidate failed verification and the spline root was used.
    pub power_law_rejected: bool,
}

/// Outcome of fitting `(x, y) = (log10 δ, log10 f)`.
#[derive(Clone, Debug)]
pub struct FixedPoint<T> {
    pub delta_max: Option<T>,
    pub kind: FitKind,
    pub line: LineFit<T>,
    pub residuals: Vec<T>,
}

/// Power-law closed form `10^{−b/(a−1)}`.
pub fn power_law_fixed_point<T: Real>(line: &LineFit<T>) -> Result<T> {
    let denom = line.a - T::one();
    if denom.abs() <= T::lit(1e-12) {
        return Err(Error::DegenerateSlope);
    }
    Ok(T::lit(10.0).powf(-line.b / denom))
}

/// Root of `spline(x) − x` at the first downward sign change, scanning
/// from small `δ`. `None` when `f` stays on one side of the identity.
pub fn spline_fixed_point<T: Real>(spline: &CubicSpline<T>) -> Result<Option<T>> {
    let g = |x: T| spline.eval(x) - x;
    let (xs, _) = spline.knots();
    const SUBDIV: usize = 8;
    let mut prev_x = xs[0];
    let mut prev_g = g(prev_x);
    if prev_g == T::zero() {
        return Ok(Some(T::lit(10.0).powf(prev_x)));
    }
    for w in xs.windows(2) {
        for k in 1..=SUBDIV {
            let x = w[0] + (w[1] - w[0]) * T::lit(k as f64 / SUBDIV as f64);
            let gx = g(x);
            if (prev_g > T::zero()) != (gx > T::zero()) {
                let root = brent(g, prev_x, x, T::lit(1e-12), 200)?;
                return Ok(Some(T::lit(10.0).powf(root)));
            }
            prev_x = x;
            prev_g = gx;
        }
    }
    Ok(None)
}

/// Chooses the fit branch and solves for the fixed point.
pub fn fit_and_solve<T: Real>(x: &[T], y: &[T], r2_threshold: T) -> Result<FixedPoint<T>> {
    solve(x, y, r2_threshold, false)
}

fn solve<T: Real>(x: &[T], y: &[T], r2_threshold: T, force_spline: bool) -> Result<FixedPoint<T>> {
    if x.len() < MIN_FIT_POINTS || y.len() != x.len() {
        return Err(Error::InsufficientData {
            got: x.len().min(y.len()),
            need: MIN_FIT_POINTS,
        });
    }
    let line = fit_line(x, y)?;
    let residuals = x.iter().zip(y).map(|(&xi, &yi)| yi - line.a * xi - line.b).collect();
    if !force_spline && line.r2 >= r2_threshold {
        let delta_max = power_law_fixed_point(&line)?;
        return Ok(FixedPoint {
            delta_max: Some(delta_max),
            kind: FitKind::PowerLaw,
            line,
            residuals,
        });
    }
    let spline = CubicSpline::natural(x, y)?;
    Ok(FixedPoint {
        delta_max: spline_fixed_point(&spline)?,
        kind: FitKind::Spline,
        line,
        residuals,
    })
}

/// Evaluates the grid, removes outliers, fits, and verifies `δ_max` by
/// recomputing `‖T_δ‖` there.
pub fn delta_max<T: Real>(problem: &PerturbationProblem<T>, config: &DeltaMaxConfig) -> Result<DeltaMaxResult<T>> {
    config.validate()?;
    let deltas: Vec<T> = config.deltas();
    if problem.is_closed() {
        return Ok(DeltaMaxResult {
            delta_max: None,
            fit: None,
            grid: deltas
                .iter()
                .map(|&delta| GridPoint {
                    delta,
                    norm: None,
                    omega_crit: None,
                    outlier: false,
                    error: None,
                })
                .collect(),
            fp_residual: None,
            residuals: Vec::new(),
            removed_outliers: Vec::new(),
            closed_system: true,
            power_law_rejected: false,
        });
    }

    let evaluations = problem.transfer_norms(&deltas, TransferOptions::default());
    let mut points: Vec<GridPoint<T>> = deltas
        .iter()
        .zip(evaluations)
        .map(|(&delta, e)| match e {
            Ok(ev) => GridPoint {
                delta,
                norm: Some(ev.norm),
                omega_crit: Some(ev.omega_crit),
                outlier: false,
                error: None,
            },
            Err(err) => GridPoint {
                delta,
                norm: None,
                omega_crit: None,
                outlier: false,
                error: Some(err.to_string()),
            },
        })
        .collect();

    let valid: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.norm.map_or(false, |n| n > T::zero() && n.is_finite()))
        .map(|(i, _)| i)
        .collect();
    let mut removed = Vec::new();
    if valid.len() >= 5 {
        let x: Vec<T> = valid.iter().map(|&i| points[i].delta.log10()).collect();
        let y: Vec<T> = valid.iter().map(|&i| -points[i].norm.unwrap().log10()).collect();
        let residuals = local_residuals(&x, &y);
        for (k, flag) in flag_outliers(&residuals, T::lit(OUTLIER_FLOOR))?.into_iter().enumerate() {
            if flag {
                points[valid[k]].outlier = true;
                removed.push(valid[k]);
            }
        }
    }
    let grid = DeltaGrid { points };
    let (x, y) = grid.fit_data();
    let threshold = T::lit(config.r2_threshold);
    let mut fixed = solve(&x, &y, threshold, false)?;

    let mut power_law_rejected = false;
    let mut fp_residual = None;
    if let Some(dm) = fixed.delta_max {
        let residual = verify(problem, dm)?;
        if fixed.kind == FitKind::PowerLaw && residual > T::lit(config.residual_tolerance) {
            power_law_rejected = true;
            fixed = solve(&x, &y, threshold, true)?;
            fp_residual = match fixed.delta_max {
                Some(dm) => Some(verify(problem, dm)?),
                None => None,
            };
        } else {
            fp_residual = Some(residual);
        }
    }

    Ok(DeltaMaxResult {
        delta_max: fixed.delta_max,
        fit: Some(FitSummary {
            kind: fixed.kind,
            a: fixed.line.a,
            b: fixed.line.b,
            r2: fixed.line.r2,
        }),
        grid: grid.points,
        fp_residual,
        residuals: fixed.residuals,
        removed_outliers: removed,
        closed_system: false,
        power_law_rejected,
    })
}

/// `|f(δ) − δ|/δ` with `f(δ) = 1/‖T_δ‖` computed directly.
pub fn verify<T: Real>(problem: &PerturbationProblem<T>, delta: T) -> Result<T> {
    let norm = problem.transfer_norm_at(delta)?.norm;
    Ok(((T::one() / norm) - delta).abs() / delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_x() -> Vec<f64> {
        (0..50).map(|i| -6.0 + 6.0 * i as f64 / 49.0).collect()
    }

    #[test]
    fn power_law_closed_form() {
        let x = grid_x();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v - 1.0).collect();
        let fp = fit_and_solve(&x, &y, 0.995).unwrap();
        assert_eq!(fp.kind, FitKind::PowerLaw);
        assert!((fp.delta_max.unwrap() - 1e-2).abs() < 1e-14);
    }

    #[test]
    fn unit_slope_is_degenerate() {
        let x = grid_x();
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!(matches!(fit_and_solve(&x, &y, 0.995), Err(Error::DegenerateSlope)));
    }

    #[test]
    fn too_few_points() {
        let x = vec![-3.0, -2.0, -1.0];
        let y = vec![1.0, 0.5, 0.0];
        assert!(matches!(fit_and_solve(&x, &y, 0.995), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn plateau_then_power_law_uses_spline() {
        // y = 1.2 for x < −3, then y = −x − 1.8: kink at x = −3
        let x = grid_x();
        let y: Vec<f64> = x.iter().map(|&v| if v < -3.0 { 1.2 } else { -v - 1.8 }).collect();
        let fp = fit_and_solve(&x, &y, 0.995).unwrap();
        assert_eq!(fp.kind, FitKind::Spline);
        let root = fp.delta_max.unwrap().log10();

        // Independent oracle: plain bisection on the interpolant.
        let s = CubicSpline::natural(&x, &y).unwrap();
        let g = |t: f64| s.eval(t) - t;
        let (mut lo, mut hi) = (-3.0f64, 0.0f64);
        assert!(g(lo) > 0.0 && g(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((root - 0.5 * (lo + hi)).abs() < 1e-9);
        assert!((root + 0.9).abs() < 1e-3);
    }

    #[test]
    fn no_crossing_in_range() {
        let x = grid_x();
        let y: Vec<f64> = x.iter().map(|&v| 3.0 + 0.1 * (v * 3.0).sin()).collect();
        let fp = fit_and_solve(&x, &y, 0.995).unwrap();
        assert_eq!(fp.kind, FitKind::Spline);
        assert!(fp.delta_max.is_none());
    }

    #[test]
    fn spline_and_power_law_agree_on_clean_data() {
        let x = grid_x();
        let y: Vec<f64> = x.iter().map(|v| -0.98 * v - 2.3).collect();
        let pl = solve(&x, &y, 0.995, false).unwrap();
        let sp = solve(&x, &y, 0.995, true).unwrap();
        let (a, b) = (pl.delta_max.unwrap(), sp.delta_max.unwrap());
        assert!(((a - b) / a).abs() < 1e-9);
    }

    #[test]
    fn grid_spacing() {
        let g: Vec<f64> = DeltaMaxConfig::default().deltas();
        assert_eq!(g.len(), 50);
        assert!((g[0] - 1e-6).abs() < 1e-20);
        assert!((g[49] - 1.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
