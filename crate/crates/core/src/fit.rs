//! Curve-fitting primitives for the fixed-point search: robust outlier
//! flags, least-squares lines, natural cubic splines and a bracketing
//! Brent root finder.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `1/(√2·erfc⁻¹(3/2))`: scales the MAD to a normal standard deviation.
pub const MAD_SCALE: f64 = 1.482_602_218_505_602;

fn median<T: Real>(values: &[T]) -> T {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// Flags entries more than three scaled MADs from the median.
pub fn remove_outliers<T: Real>(y: &[T]) -> Result<Vec<bool>> {
    flag_outliers(y, T::zero())
}

/// As [`remove_outliers`], but deviations at or below `floor` are never flagged.
pub fn flag_outliers<T: Real>(y: &[T], floor: T) -> Result<Vec<bool>> {
    if y.len() < 5 {
        return Err(Error::InsufficientData { got: y.len(), need: 5 });
    }
    let med = median(y);
    let deviations: Vec<T> = y.iter().map(|&v| (v - med).abs()).collect();
    let scaled_mad = T::lit(MAD_SCALE) * median(&deviations);
    let limit = (T::lit(3.0) * scaled_mad).max(floor);
    Ok(deviations.iter().map(|&d| d > limit).collect())
}

/// Deviation of each `y_i` from the line through its two nearest
/// neighbours (one-sided at the ends). Zero on straight segments, so a
/// piecewise-smooth curve only shows its isolated glitches.
pub fn local_residuals<T: Real>(x: &[T], y: &[T]) -> Vec<T> {
    let n = x.len();
    if n < 3 {
        return vec![T::zero(); n];
    }
    let through = |i: usize, j: usize, at: usize| y[i] + (y[j] - y[i]) * (x[at] - x[i]) / (x[j] - x[i]);
    (0..n)
        .map(|i| {
            let line = match i {
                0 => through(1, 2, 0),
                _ if i == n - 1 => through(n - 3, n - 2, i),
                _ => through(i - 1, i + 1, i),
            };
            y[i] - line
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit<T> {
    /// Slope.
    pub a: T,
    /// Intercept.
    pub b: T,
    pub r2: T,
}

pub fn fit_line<T: Real>(x: &[T], y: &[T]) -> Result<LineFit<T>> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::InsufficientData { got: n.min(y.len()), need: 2 });
    }
    let nf = T::lit(n as f64);
    let mx = x.iter().fold(T::zero(), |s, &v| s + v) / nf;
    let my = y.iter().fold(T::zero(), |s, &v| s + v) / nf;
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my) * (yi - my);
    }
    if sxx == T::zero() {
        return Err(Error::DegenerateSample("all x values equal".into()));
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res = x
        .iter()
        .zip(y)
        .fold(T::zero(), |s, (&xi, &yi)| s + (yi - a * xi - b) * (yi - a * xi - b));
    let r2 = if syy == T::zero() { T::one() } else { T::one() - ss_res / syy };
    Ok(LineFit { a, b, r2 })
}

/// Natural cubic spline through `(x_i, y_i)` with strictly increasing `x`.
#[derive(Clone, Debug)]
pub struct CubicSpline<T> {
    x: Vec<T>,
    y: Vec<T>,
    /// Second derivatives at the knots.
    m: Vec<T>,
}

impl<T: Real> CubicSpline<T> {
    pub fn natural(x: &[T], y: &[T]) -> Result<Self> {
        let n = x.len();
        if n < 3 || y.len() != n {
            return Err(Error::InsufficientData { got: n.min(y.len()), need: 3 });
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::DegenerateSample("spline knots must increase strictly".into()));
        }
        let two = T::lit(2.0);
        let six = T::lit(6.0);
        let h: Vec<T> = x.windows(2).map(|w| w[1] - w[0]).collect();
        // Tridiagonal system for interior second derivatives (Thomas algorithm).
        let inner = n - 2;
        let mut diag = vec![T::zero(); inner];
        let mut upper = vec![T::zero(); inner];
        let mut rhs = vec![T::zero(); inner];
        for i in 0..inner {
            diag[i] = two * (h[i] + h[i + 1]);
            upper[i] = h[i + 1];
            rhs[i] = six * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
        }
        for i in 1..inner {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] = rhs[i] - w * rhs[i - 1];
        }
        let mut m = vec![T::zero(); n];
        for i in (0..inner).rev() {
            let next = if i + 1 < inner { m[i + 2] } else { T::zero() };
            m[i + 1] = (rhs[i] - upper[i] * next) / diag[i];
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn knots(&self) -> (&[T], &[T]) {
        (&self.x, &self.y)
    }

    pub fn domain(&self) -> (T, T) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn eval(&self, t: T) -> T {
        let n = self.x.len();
        let i = match self.x.iter().position(|&xi| xi > t) {
            Some(0) => 0,
            Some(p) => p - 1,
            None => n - 2,
        }
        .min(n - 2);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let six = T::lit(6.0);
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / six
    }
}

/// Brent's method on a bracket with `f(lo)·f(hi) ≤ 0`: bisection, secant and
/// inverse quadratic interpolation. Stops at `|f| ≤ tol` or bracket width
/// `≤ tol`.
pub fn brent<T: Real, F: Fn(T) -> T>(f: F, lo: T, hi: T, tol: T, max_iter: usize) -> Result<T> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == T::zero() {
        return Ok(a);
    }
    if fb == T::zero() {
        return Ok(b);
    }
    if fa * fb > T::zero() {
        return Err(Error::DegenerateSample("root not bracketed".into()));
    }
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let half = T::lit(0.5);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb * fc > T::zero() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = two * T::eps() * b.abs() + half * tol;
        let xm = half * (c - b);
        if xm.abs() <= tol1 || fb.abs() <= tol || (c - b).abs() <= tol {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                // secant
                p = two * xm * s;
                q = T::one() - s;
            } else {
                // inverse quadratic interpolation
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (two * xm * qa * (qa - r) - (b - a) * (r - T::one()));
                q = (qa - T::one()) * (r - T::one()) * (s - T::one());
            }
            if p > T::zero() {
                q = -q;
            }
            p = p.abs();
            let min1 = three * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if two * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        if d.abs() > tol1 {
            b += d;
        } else {
            b += if xm > T::zero() { tol1 } else { -tol1 };
        }
        fb = f(b);
    }
    Err(Error::NoConvergence)
}
