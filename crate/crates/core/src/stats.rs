//! Summary statistics: Lilliefors normality test, Pearson correlation and
//! log–log scaling fits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::statistics::{Data, Max, Min, OrderStatistics};

use crate::error::{Error, Result};
use crate::fit::fit_line;

pub const LILLIEFORS_MIN_SAMPLE: usize = 20;
pub const LILLIEFORS_SIMULATIONS: usize = 10_000;

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Kolmogorov–Smirnov distance to the normal with the sample's own mean
/// and standard deviation.
pub fn lilliefors_statistic(sample: &[f64]) -> Result<f64> {
    let (mean, sd) = mean_std(sample);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateSample("zero variance".into()));
    }
    let normal = Normal::new(mean, sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = normal.cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    }))
}

/// Monte Carlo null distribution of the Lilliefors statistic for one sample size.
#[derive(Clone, Debug)]
pub struct LillieforsNull {
    n: usize,
    sorted: Vec<f64>,
}

impl LillieforsNull {
    pub fn new(n: usize, simulations: usize, seed: u64) -> Result<Self> {
        if n < LILLIEFORS_MIN_SAMPLE {
            return Err(Error::InsufficientData {
                got: n,
                need: LILLIEFORS_MIN_SAMPLE,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = vec![0.0; n];
        let mut sorted = Vec::with_capacity(simulations);
        for _ in 0..simulations {
            for v in buf.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            sorted.push(lilliefors_statistic(&buf)?);
        }
        sorted.sort_by(f64::total_cmp);
        Ok(Self { n, sorted })
    }

    /// `(1 + #{D_sim ≥ D}) / (1 + M)`.
    pub fn p_value(&self, sample: &[f64]) -> Result<f64> {
        if sample.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: sample.len(),
            });
        }
        let d = lilliefors_statistic(sample)?;
        let below = self.sorted.partition_point(|&s| s < d);
        Ok((1 + self.sorted.len() - below) as f64 / (1 + self.sorted.len()) as f64)
    }
}

pub fn lilliefors_test(sample: &[f64], seed: u64) -> Result<f64> {
    LillieforsNull::new(sample.len(), LILLIEFORS_SIMULATIONS, seed)?.p_value(sample)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData { got: x.len(), need: 3 });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSample("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ScalingFit {
    pub exponent: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub r2: f64,
}

/// Least squares of `log10 y` on `log10 x` with a 95% t-interval on the slope.
pub fn scaling_fit(x: &[f64], y: &[f64]) -> Result<ScalingFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData { got: x.len(), need: 3 });
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateSample("scaling fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.log10()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateSample("zero-variance abscissa".into()));
    }
    let line = fit_line(&lx, &ly)?;
    let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - line.a * a - line.b).powi(2)).sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(ScalingFit {
        exponent: line.a,
        intercept: line.b,
        ci_low: line.a - t * se,
        ci_high: line.a + t * se,
        r2: line.r2,
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Distribution5 {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary; non-finite entries are skipped.
pub fn five_number(values: &[f64]) -> Option<Distribution5> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let mut data = Data::new(v);
    Some(Distribution5 {
        count: data.len(),
        min: data.min(),
        q1: data.lower_quartile(),
        median: data.median(),
        q3: data.upper_quartile(),
        max: data.max(),
    })
}
