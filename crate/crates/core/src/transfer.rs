//! Transfer function `T_δ(iω) = δ·(iωI − A)⁺·S(δ)` and its norm over the
//! eigenfrequencies of the perturbed Hamiltonian.

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{eigenvalues, pseudo_inverse, spectral_norm, to_complex, CMatrix};
use crate::bloch::HermitianBasis;
use crate::scalar::Real;
use crate::spin_model::Hamiltonian;

/// Frequencies are merged when closer than this.
pub const FREQUENCY_DEDUP_TOL: f64 = 1e-9;

/// Sorted, deduplicated eigenfrequencies `{0} ∪ {|λ_m − λ_n|}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyCandidates<T> {
    pub omegas: Vec<T>,
}

impl<T: Real> FrequencyCandidates<T> {
    fn from_raw(mut raw: Vec<T>) -> Self {
        raw.push(T::zero());
        raw.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let tol = T::lit(FREQUENCY_DEDUP_TOL);
        let mut omegas: Vec<T> = Vec::with_capacity(raw.len());
        for w in raw {
            match omegas.last() {
                Some(&last) if w - last < tol => {}
                _ => omegas.push(w),
            }
        }
        Self { omegas }
    }

    /// Union with another candidate set.
    pub fn union(&self, other: &Self) -> Self {
        let mut raw = self.omegas.clone();
        raw.extend(other.omegas.iter().copied());
        Self::from_raw(raw)
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    /// Positive entries only.
    pub fn positive(&self) -> Vec<T> {
        self.omegas.iter().copied().filter(|&w| w > T::zero()).collect()
    }
}

pub fn candidate_frequencies<T: Real>(h: &Hamiltonian<T>) -> FrequencyCandidates<T> {
    let ev = h.eigenvalues();
    let n = ev.len();
    let raw = (0..n)
        .flat_map(|m| (m + 1..n).map(move |l| (ev[l] - ev[m]).abs()))
        .collect();
    FrequencyCandidates::from_raw(raw)
}

/// Orthogonal projector (in Bloch coordinates) onto the trace invariants
/// `tr(ρ·Π_c)`, `Π_c` the spectral projectors of `h`.
pub fn trace_invariants<T: Real>(h: &Hamiltonian<T>, basis: &HermitianBasis<T>) -> DMatrix<T> {
    let dim = basis.len();
    let mut p = DMatrix::zeros(dim, dim);
    for c in 0..h.clusters().len() {
        let r = basis.coordinates(&to_complex(&h.projector(c)));
        p += &r * r.transpose() / r.norm_squared();
    }
    p
}

/// Effective inverse of `iωI − A` with the trace invariants eliminated:
/// `(iω(I − P) − A)⁺` for the projector `P` from [`trace_invariants`].
/// Directions of `A`'s kernel outside `P` are dropped at `ω = 0` only.
pub fn effective_resolvent<T: Real>(a: &DMatrix<T>, invariants: &DMatrix<T>, omega: T) -> CMatrix<T> {
    let n = a.nrows();
    let q = DMatrix::<T>::identity(n, n) - invariants;
    let m = q.map(|x| Complex::new(T::zero(), x * omega)) - to_complex(a);
    pseudo_inverse(&m)
}

/// `‖T_δ(iω)‖₂` for one frequency.
pub fn transfer_norm_at<T: Real>(a: &DMatrix<T>, invariants: &DMatrix<T>, s: &DMatrix<T>, delta: T, omega: T) -> T {
    let resolvent = effective_resolvent(a, invariants, omega);
    let t = resolvent * to_complex(&(s * delta));
    spectral_norm(&t)
}

#[derive(Clone, Debug, Serialize)]
pub struct FrequencyNorm<T> {
    pub omega: T,
    pub norm: T,
}

/// Norm of `T_δ` over a candidate set.
#[derive(Clone, Debug, Serialize)]
pub struct TransferEvaluation<T> {
    pub delta: T,
    /// `max_ω ‖T_δ(iω)‖₂`.
    pub norm: T,
    /// Frequency attaining the maximum (lowest one on ties).
    pub omega_crit: T,
    pub table: Vec<FrequencyNorm<T>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TransferOptions {
    /// Golden-section refinement in a ±1% window around the best candidate.
    pub refine: bool,
}

pub fn transfer_norm<T: Real>(
    a: &DMatrix<T>,
    invariants: &DMatrix<T>,
    s: &DMatrix<T>,
    delta: T,
    candidates: &FrequencyCandidates<T>,
    options: TransferOptions,
) -> TransferEvaluation<T> {
    let table: Vec<FrequencyNorm<T>> = candidates
        .omegas
        .iter()
        .map(|&omega| FrequencyNorm {
            omega,
            norm: transfer_norm_at(a, invariants, s, delta, omega),
        })
        .collect();
    let mut best = FrequencyNorm {
        omega: T::zero(),
        norm: T::zero(),
    };
    for row in &table {
        if row.norm > best.norm {
            best = row.clone();
        }
    }
    if options.refine && best.omega > T::zero() {
        let (omega, norm) = golden_max(
            |w| transfer_norm_at(a, invariants, s, delta, w),
            best.omega * T::lit(0.99),
            best.omega * T::lit(1.01),
            40,
        );
        if norm > best.norm {
            best = FrequencyNorm { omega, norm };
        }
    }
    TransferEvaluation {
        delta,
        norm: best.norm,
        omega_crit: best.omega,
        table,
    }
}

fn golden_max<T: Real, F: Fn(T) -> T>(f: F, mut lo: T, mut hi: T, iters: usize) -> (T, T) {
    let ratio = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut x1 = hi - (hi - lo) * ratio;
    let mut x2 = lo + (hi - lo) * ratio;
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + (hi - lo) * ratio;
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - (hi - lo) * ratio;
            f1 = f(x1);
        }
    }
    if f1 > f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Eigenvalues of a generator sorted by imaginary part, then real part.
pub fn poles<T: Real>(a: &DMatrix<T>) -> Result<Vec<Complex<T>>> {
    let mut ev = eigenvalues(a)?;
    ev.sort_by(|x, y| {
        x.im.partial_cmp(&y.im)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.re.partial_cmp(&y.re).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(ev)
}
