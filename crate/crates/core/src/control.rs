//! Energy-landscape controllers: static diagonal biases `D` and a readout
//! time `t_f` maximizing closed-system transfer fidelity.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin_model::{NetworkSpec, Topology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub d: Vec<f64>,
    pub tf: f64,
    pub f0: f64,
    /// 1-based input node.
    #[serde(rename = "in")]
    pub in_node: usize,
    /// 1-based output node.
    #[serde(rename = "out")]
    pub out_node: usize,
    /// Seed of the restart that produced this controller.
    pub seed: u64,
    #[serde(skip)]
    pub iterations: usize,
}

impl Controller {
    pub fn spec(&self, topology: Topology, coupling: f64) -> NetworkSpec<f64> {
        NetworkSpec {
            topology,
            n: self.d.len(),
            coupling,
            controls: self.d.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlOptions {
    pub t_window: (f64, f64),
    pub restarts: usize,
    pub threshold: f64,
    pub keep: usize,
    pub max_iterations: usize,
    /// Initial biases are drawn uniformly from `[-d_range, d_range]`.
    pub d_range: f64,
    pub dedup_distance: f64,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            t_window: (1.0, 30.0),
            restarts: 100,
            threshold: 0.99,
            keep: 20,
            max_iterations: 4000,
            d_range: 3.0,
            dedup_distance: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControlSearch {
    pub controllers: Vec<Controller>,
    pub best_f0: f64,
    pub diagnostic: Option<String>,
}

/// `|⟨out| e^{−iHt} |in⟩|²` for 0-based nodes.
pub fn closed_fidelity(h: &DMatrix<f64>, in_node: usize, out_node: usize, t: f64) -> f64 {
    let eig = SymmetricEigen::new(h.clone());
    let amp = (0..h.nrows()).fold(Complex::new(0.0, 0.0), |acc, k| {
        let w = eig.eigenvectors[(out_node, k)] * eig.eigenvectors[(in_node, k)];
        acc + Complex::from_polar(w, -eig.eigenvalues[k] * t)
    });
    amp.norm_sqr()
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Nelder–Mead simplex minimization with standard coefficients
/// (reflection 1, expansion 2, contraction ½, shrink ½).
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: &[f64], tol: f64, max_iter: usize) -> Minimum {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step[i];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let spread = values[n] - values[0];
        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= tol && size <= tol.sqrt() {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < fr.min(values[n]) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        for i in 1..=n {
            simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
            values[i] = f(&simplex[i]);
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Restart `r` draws its start point from `ChaCha8(seed + r)`. Biases are
/// returned with zero mean since a uniform shift only adds a global phase.
pub fn optimize(
    template: &NetworkSpec<f64>,
    in_node: usize,
    out_node: usize,
    options: &ControlOptions,
    seed: u64,
) -> Result<ControlSearch> {
    template.validate()?;
    let n = template.n;
    for node in [in_node, out_node] {
        if node == 0 || node > n {
            return Err(Error::IndexOutOfRange {
                kind: "node",
                index: node,
                n,
            });
        }
    }
    let (t_lo, t_hi) = options.t_window;
    if !(t_lo > 0.0 && t_hi >= t_lo) {
        return Err(Error::Config(format!("invalid t_window [{t_lo}, {t_hi}]")));
    }
    let base = NetworkSpec {
        controls: vec![0.0; n],
        ..template.clone()
    }
    .matrix()?;
    let (i, o) = (in_node - 1, out_node - 1);
    let objective = |x: &[f64]| -> f64 {
        let t = x[n];
        let clamped = t.clamp(t_lo, t_hi);
        let mut h = base.clone();
        for k in 0..n {
            h[(k, k)] += x[k];
        }
        1.0 - closed_fidelity(&h, i, o, clamped) + (t - clamped).powi(2)
    };

    let mut step = vec![0.5; n];
    step.push(0.5);
    let mut candidates: Vec<Controller> = (0..options.restarts)
        .into_par_iter()
        .map(|r| {
            let restart_seed = seed.wrapping_add(r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed);
            let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-options.d_range..=options.d_range)).collect();
            x.push(rng.random_range(t_lo..=t_hi));
            let mut iterations = 0;
            let mut value = f64::INFINITY;
            // restart the simplex from the incumbent until it stops improving
            for _ in 0..4 {
                let m = nelder_mead(objective, &x, &step, 1e-14, options.max_iterations);
                iterations += m.iterations;
                let improved = m.value < value - 1e-13;
                x = m.x;
                value = m.value;
                if !improved {
                    break;
                }
            }
            let mean = x[..n].iter().sum::<f64>() / n as f64;
            let d: Vec<f64> = x[..n].iter().map(|v| v - mean).collect();
            let tf = x[n].clamp(t_lo, t_hi);
            let mut h = base.clone();
            for k in 0..n {
                h[(k, k)] += d[k];
            }
            Controller {
                f0: closed_fidelity(&h, i, o, tf),
                d,
                tf,
                in_node,
                out_node,
                seed: restart_seed,
                iterations,
            }
        })
        .collect();

    let best_f0 = candidates.iter().map(|c| c.f0).fold(0.0, f64::max);
    candidates.retain(|c| c.f0 >= options.threshold);
    candidates.sort_by(|a, b| b.f0.total_cmp(&a.f0).then_with(|| lexicographic(&a.d, &b.d)));
    let mut controllers: Vec<Controller> = Vec::new();
    for c in candidates {
        if controllers.len() >= options.keep {
            break;
        }
        if controllers.iter().all(|k| distance(&k.d, &c.d) >= options.dedup_distance) {
            controllers.push(c);
        }
    }
    let diagnostic = controllers.is_empty().then(|| {
        format!(
            "no controller reached F0 >= {} in {} restarts (best {best_f0:.6})",
            options.threshold, options.restarts
        )
    });
    Ok(ControlSearch {
        controllers,
        best_f0,
        diagnostic,
    })
}
