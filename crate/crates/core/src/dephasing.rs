//! Pure-dephasing processes attached to the eigenspaces of a Hamiltonian.
//!
//! A process stores unit-rate coefficients `c[k][n]` for `K` channels over the
//! `N` nominal levels (ascending eigenvalue order). Pairwise dephasing rates
//! are `Γ[m][n] = (γ/2)·Σ_k (c[k][m] − c[k][n])²`, normalized so that the
//! largest rate equals `γ`.
//!
//! When the Hamiltonian is perturbed, each perturbed eigenvector is traced
//! back to a nominal eigenspace ([`match_branches`], [`trace_branches`]) and
//! inherits that eigenspace's coefficient, so the perturbed operators still
//! commute with the perturbed Hamiltonian while the rates stay fixed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_cost_assignment, symmetric_eigen};
use crate::scalar::Real;
use crate::spin_model::{perturb, Hamiltonian, PerturbationStructure};

/// Candidates drawn before sampling gives up.
pub const SAMPLING_CAP: u64 = 1_000_000;

/// Minimum squared overlap for a branch to count as continued.
pub const AMBIGUITY_THRESHOLD: f64 = 0.5;

/// Continuation steps are subdivided until every step overlap reaches this.
const STEP_OVERLAP_TARGET: f64 = 0.9;

const MAX_SUBDIVISION_DEPTH: u32 = 40;

/// Index offset between consecutive seeds in the Halton sequence.
const SEED_STRIDE: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "ProcessRecord",
    into = "ProcessRecord",
    bound(serialize = "T: Real", deserialize = "T: Real")
)]
pub struct DephasingProcess<T: Real> {
    coeffs: DMatrix<T>,
    gamma: T,
}

/// On-disk form of a process: `{"n", "k", "gamma", "coeffs"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub n: usize,
    pub k: usize,
    pub gamma: f64,
    pub coeffs: Vec<Vec<f64>>,
}

impl<T: Real> From<DephasingProcess<T>> for ProcessRecord {
    fn from(p: DephasingProcess<T>) -> Self {
        ProcessRecord {
            n: p.n(),
            k: p.k(),
            gamma: p.gamma.as_f64(),
            coeffs: p
                .coeffs
                .row_iter()
                .map(|r| r.iter().map(|c| c.as_f64()).collect())
                .collect(),
        }
    }
}

impl<T: Real> TryFrom<ProcessRecord> for DephasingProcess<T> {
    type Error = Error;

    fn try_from(r: ProcessRecord) -> Result<Self> {
        if r.coeffs.len() != r.k || r.coeffs.iter().any(|row| row.len() != r.n) {
            return Err(Error::InvalidProcess(format!(
                "coeffs shape does not match k = {}, n = {}",
                r.k, r.n
            )));
        }
        let flat: Vec<T> = r.coeffs.iter().flatten().map(|&c| T::lit(c)).collect();
        DephasingProcess::new(DMatrix::from_row_slice(r.k, r.n, &flat), T::lit(r.gamma))
    }
}

impl<T: Real> DephasingProcess<T> {
    /// Builds a process from raw coefficients (`K × N`), rescaling them so the
    /// largest pairwise rate equals `gamma`.
    pub fn new(coeffs: DMatrix<T>, gamma: T) -> Result<Self> {
        let n = coeffs.ncols();
        if n < 2 {
            return Err(Error::InvalidProcess(format!("N = {n} < 2")));
        }
        if coeffs.nrows() == 0 || coeffs.nrows() > n - 1 {
            return Err(Error::InvalidProcess(format!(
                "K = {} channels for N = {n}",
                coeffs.nrows()
            )));
        }
        if gamma < T::zero() || !gamma.is_finite() {
            return Err(Error::InvalidProcess("gamma must be finite and >= 0".into()));
        }
        let max_rate = max_unit_rate(&coeffs);
        if max_rate <= T::zero() {
            return Err(Error::InvalidProcess(
                "all levels share one coefficient; no dephasing".into(),
            ));
        }
        let coeffs = coeffs / max_rate.sqrt();
        Ok(Self { coeffs, gamma })
    }

    pub fn n(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn k(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    /// Unit-rate coefficients, one row per channel.
    pub fn coeffs(&self) -> &DMatrix<T> {
        &self.coeffs
    }

    pub fn with_gamma(&self, gamma: T) -> Self {
        Self {
            coeffs: self.coeffs.clone(),
            gamma,
        }
    }

    /// Pairwise rates `Γ[m][n]`.
    pub fn rates(&self) -> DMatrix<T> {
        pairwise_rates(&self.coeffs, self.gamma)
    }

    /// Attaches the process to the eigenspaces of `h`: levels inside one
    /// degenerate cluster are collapsed onto the cluster mean of their
    /// coefficients, then rates are renormalized.
    pub fn bind(&self, h: &Hamiltonian<T>) -> Result<Self> {
        if h.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: h.n(),
                got: self.n(),
            });
        }
        let mut coeffs = self.coeffs.clone();
        for cluster in h.clusters() {
            if cluster.len() < 2 {
                continue;
            }
            let size = T::lit(cluster.len() as f64);
            for k in 0..self.k() {
                let mean = cluster
                    .iter()
                    .fold(T::zero(), |acc, &i| acc + self.coeffs[(k, i)])
                    / size;
                for &i in cluster {
                    coeffs[(k, i)] = mean;
                }
            }
        }
        Self::new(coeffs, self.gamma)
    }

    /// Coefficients per perturbed level, inherited through `assignment`
    /// (`K × N`). Expects a process bound to the nominal Hamiltonian.
    pub fn inherited_coeffs(&self, nominal: &Hamiltonian<T>, assignment: &BranchAssignment<T>) -> DMatrix<T> {
        let n = self.n();
        DMatrix::from_fn(self.k(), n, |k, j| {
            let cluster = assignment.cluster_of[j];
            self.coeffs[(k, nominal.clusters()[cluster][0])]
        })
    }
}

fn max_unit_rate<T: Real>(coeffs: &DMatrix<T>) -> T {
    let rates = pairwise_rates(coeffs, T::one());
    rates.iter().fold(T::zero(), |acc, &r| acc.max(r))
}

/// `Γ[m][n] = (γ/2)·Σ_k (c[k][m] − c[k][n])²` for arbitrary coefficients.
pub fn pairwise_rates<T: Real>(coeffs: &DMatrix<T>, gamma: T) -> DMatrix<T> {
    let n = coeffs.ncols();
    let half = T::lit(0.5);
    DMatrix::from_fn(n, n, |m, l| {
        let mut s = T::zero();
        for k in 0..coeffs.nrows() {
            let d = coeffs[(k, m)] - coeffs[(k, l)];
            s += d * d;
        }
        half * gamma * s
    })
}

/// Point coordinates (`N × K`, one row per level) whose squared Euclidean
/// distances reproduce `rates`, or `None` when `rates` is not a squared
/// Euclidean distance matrix.
///
/// Acceptance: `−½·J·Γ·J` is positive semidefinite up to `−1e−10·trace`.
pub fn embed_rates<T: Real>(rates: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = rates.nrows();
    if n < 2 || rates.ncols() != n {
        return None;
    }
    for i in 0..n {
        if rates[(i, i)] != T::zero() {
            return None;
        }
        for j in 0..n {
            if rates[(i, j)] < T::zero() || rates[(i, j)] != rates[(j, i)] {
                return None;
            }
        }
    }
    let inv_n = T::one() / T::lit(n as f64);
    let centering = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one() - inv_n
        } else {
            -inv_n
        }
    });
    let gram = &centering * rates * &centering * T::lit(-0.5);
    let trace = gram.trace();
    if trace <= T::zero() {
        return None;
    }
    let (vals, vecs) = symmetric_eigen(&gram);
    let floor = T::lit(1e-10) * trace;
    if vals.iter().any(|&l| l < -floor) {
        return None;
    }
    let keep: Vec<usize> = (0..n).rev().filter(|&i| vals[i] > floor).collect();
    let keep = &keep[..keep.len().min(n - 1)];
    Some(DMatrix::from_fn(n, keep.len(), |row, col| {
        let i = keep[col];
        vecs[(row, i)] * vals[i].sqrt()
    }))
}

/// Process whose rates are proportional to an embeddable rate matrix.
pub fn process_from_rates<T: Real>(rates: &DMatrix<T>, gamma: T) -> Option<DephasingProcess<T>> {
    let coords = embed_rates(rates)?;
    DephasingProcess::new(coords.transpose(), gamma).ok()
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut scale = inv_base;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * scale;
        index /= base;
        scale *= inv_base;
    }
    value
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= candidate).all(|&p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Halton point with the given index in `[0,1)^dim`.
pub fn halton_point(index: u64, dim: usize) -> Vec<f64> {
    first_primes(dim)
        .into_iter()
        .map(|b| radical_inverse(index, b))
        .collect()
}

/// Draws `count` physical dephasing processes on `n` levels.
///
/// Candidate rate matrices come from a Halton sequence over the
/// `N(N−1)/2` pairwise rates in `[0,1]`; the seed selects the starting
/// index. Candidates that are not squared Euclidean distance matrices are
/// rejected.
pub fn sample_processes<T: Real>(
    n: usize,
    count: usize,
    seed: u64,
    gamma: T,
) -> Result<Vec<DephasingProcess<T>>> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!("N = {n} < 2")));
    }
    if count == 0 {
        return Err(Error::InvalidProcess("count must be >= 1".into()));
    }
    if !(gamma > T::zero()) {
        return Err(Error::InvalidProcess("gamma must be > 0".into()));
    }
    let dim = n * (n - 1) / 2;
    let bases = first_primes(dim);
    let start = 1 + seed.wrapping_mul(SEED_STRIDE);
    let mut out = Vec::with_capacity(count);
    let mut rates = DMatrix::<T>::zeros(n, n);
    for tried in 0..SAMPLING_CAP {
        let index = start.wrapping_add(tried);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                let u = T::lit(radical_inverse(index, bases[p]));
                rates[(i, j)] = u;
                rates[(j, i)] = u;
                p += 1;
            }
        }
        if let Some(process) = process_from_rates(&rates, gamma) {
            out.push(process);
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    Err(Error::SamplingExhausted {
        tried: SAMPLING_CAP,
    })
}

/// Map from perturbed eigenvector index to nominal eigenvalue cluster.
#[derive(Clone, Debug)]
pub struct BranchAssignment<T: Real> {
    /// `cluster_of[j]` is the nominal cluster of perturbed eigenvector `j`.
    pub cluster_of: Vec<usize>,
    /// Squared projections of perturbed eigenvectors onto nominal
    /// eigenspaces (`clusters × N`).
    pub overlaps: DMatrix<T>,
    /// Smallest overlap along the assignment (for continued branches, the
    /// smallest overlap over all continuation steps).
    pub min_overlap: T,
}

fn cluster_overlaps<T: Real>(reference: &Hamiltonian<T>, perturbed: &Hamiltonian<T>) -> DMatrix<T> {
    let n = reference.n();
    let proj = reference.eigenvectors().transpose() * perturbed.eigenvectors();
    DMatrix::from_fn(reference.clusters().len(), n, |c, j| {
        reference.clusters()[c]
            .iter()
            .fold(T::zero(), |acc, &i| acc + proj[(i, j)] * proj[(i, j)])
    })
}

/// Assigns perturbed vectors to `reference` clusters respecting multiplicities.
/// Returns (cluster per perturbed index, reference member per perturbed
/// index, minimum assigned overlap, overlap matrix).
fn assign<T: Real>(
    reference: &Hamiltonian<T>,
    perturbed: &Hamiltonian<T>,
) -> (Vec<usize>, Vec<usize>, T, DMatrix<T>) {
    let n = reference.n();
    let overlaps = cluster_overlaps(reference, perturbed);
    // One slot per reference level; slot i belongs to the cluster of level i.
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|slot| {
            let c = reference.cluster_of(slot);
            (0..n).map(|j| -overlaps[(c, j)].as_f64()).collect()
        })
        .collect();
    let slot_to_j = min_cost_assignment(&cost);
    let mut cluster = vec![0; n];
    let mut member = vec![0; n];
    let mut min_overlap = T::one();
    for (slot, &j) in slot_to_j.iter().enumerate() {
        let c = reference.cluster_of(slot);
        cluster[j] = c;
        member[j] = slot;
        min_overlap = min_overlap.min(overlaps[(c, j)]);
    }
    (cluster, member, min_overlap, overlaps)
}

/// Assigns each perturbed eigenvector to the nominal cluster it projects
/// onto most strongly, with per-cluster counts equal to the multiplicities.
pub fn match_branches<T: Real>(
    nominal: &Hamiltonian<T>,
    perturbed: &Hamiltonian<T>,
) -> Result<BranchAssignment<T>> {
    if nominal.n() != perturbed.n() {
        return Err(Error::DimensionMismatch {
            expected: nominal.n(),
            got: perturbed.n(),
        });
    }
    let (cluster_of, _, min_overlap, overlaps) = assign(nominal, perturbed);
    if min_overlap < T::lit(AMBIGUITY_THRESHOLD) {
        return Err(Error::BranchAmbiguity {
            min_overlap: min_overlap.as_f64(),
        });
    }
    Ok(BranchAssignment {
        cluster_of,
        overlaps,
        min_overlap,
    })
}

/// One point on a continued branch path.
#[derive(Clone, Debug)]
pub struct BranchPoint<T: Real> {
    pub delta: T,
    pub hamiltonian: Hamiltonian<T>,
    pub assignment: BranchAssignment<T>,
}

struct PathState<T: Real> {
    delta: T,
    hamiltonian: Hamiltonian<T>,
    /// Nominal cluster per eigenvector index of `hamiltonian`.
    labels: Vec<usize>,
    min_overlap: T,
}

fn step<T: Real>(from: &PathState<T>, to: Hamiltonian<T>, delta: T) -> (PathState<T>, T) {
    let (_, member, step_min, _) = assign(&from.hamiltonian, &to);
    let labels = member.iter().map(|&i| from.labels[i]).collect();
    (
        PathState {
            delta,
            hamiltonian: to,
            labels,
            min_overlap: from.min_overlap.min(step_min),
        },
        step_min,
    )
}

fn advance<T: Real>(
    state: &PathState<T>,
    nominal: &Hamiltonian<T>,
    structure: &PerturbationStructure<T>,
    target: T,
    depth: u32,
) -> Result<PathState<T>> {
    let h = perturb(nominal, structure, target)?;
    let (next, step_min) = step(state, h, target);
    if step_min >= T::lit(STEP_OVERLAP_TARGET) {
        return Ok(next);
    }
    if depth >= MAX_SUBDIVISION_DEPTH {
        if step_min >= T::lit(AMBIGUITY_THRESHOLD) {
            return Ok(next);
        }
        return Err(Error::BranchAmbiguity {
            min_overlap: step_min.as_f64(),
        });
    }
    let mid = (state.delta + target) * T::lit(0.5);
    let halfway = advance(state, nominal, structure, mid, depth + 1)?;
    advance(&halfway, nominal, structure, target, depth + 1)
}

/// Continues the nominal eigenbranches of `H + δS` from `δ = 0` to every
/// requested `δ`, subdividing steps until consecutive eigenvectors overlap
/// strongly. Each entry is the result for the corresponding input `δ`;
/// a failure at one `δ` does not stop the walk.
pub fn trace_branches<T: Real>(
    nominal: &Hamiltonian<T>,
    structure: &PerturbationStructure<T>,
    deltas: &[T],
) -> Vec<Result<BranchPoint<T>>> {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].partial_cmp(&deltas[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out: Vec<Option<Result<BranchPoint<T>>>> = (0..deltas.len()).map(|_| None).collect();
    let mut state = PathState {
        delta: T::zero(),
        hamiltonian: nominal.clone(),
        labels: (0..nominal.n()).map(|i| nominal.cluster_of(i)).collect(),
        min_overlap: T::one(),
    };
    for idx in order {
        let delta = deltas[idx];
        let result = if delta < T::zero() || !delta.is_finite() {
            Err(Error::InvalidSpec(format!("delta = {delta} must be finite and >= 0")))
        } else {
            advance(&state, nominal, structure, delta, 0).map(|next| {
                let point = BranchPoint {
                    delta,
                    assignment: BranchAssignment {
                        cluster_of: next.labels.clone(),
                        overlaps: cluster_overlaps(nominal, &next.hamiltonian),
                        min_overlap: next.min_overlap,
                    },
                    hamiltonian: next.hamiltonian.clone(),
                };
                state = next;
                point
            })
        };
        out[idx] = Some(result);
    }
    out.into_iter().map(|r| r.expect("every delta visited")).collect()
}

/// Continued branch at a single `δ`.
pub fn trace_branch<T: Real>(
    nominal: &Hamiltonian<T>,
    structure: &PerturbationStructure<T>,
    delta: T,
) -> Result<BranchPoint<T>> {
    trace_branches(nominal, structure, &[delta])
        .pop()
        .expect("one delta in, one result out")
}

/// Perturbed dephasing operators `Ṽ_k = Σ_j c[k][cluster(j)]·ṽ_j·ṽ_jᵀ`.
///
/// `process` must be bound to `nominal` (see [`DephasingProcess::bind`]).
pub fn perturbed_dephasing_ops<T: Real>(
    process: &DephasingProcess<T>,
    nominal: &Hamiltonian<T>,
    perturbed: &Hamiltonian<T>,
    assignment: &BranchAssignment<T>,
) -> Result<Vec<DMatrix<T>>> {
    let n = perturbed.n();
    if process.n() != n || nominal.n() != n || assignment.cluster_of.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: process.n(),
        });
    }
    let coeffs = process.inherited_coeffs(nominal, assignment);
    let vecs = perturbed.eigenvectors();
    Ok((0..process.k())
        .map(|k| {
            let mut v = DMatrix::zeros(n, n);
            for j in 0..n {
                let col = vecs.column(j);
                v += (&col * col.transpose()) * coeffs[(k, j)];
            }
            v
        })
        .collect())
}

/// Nominal operators `V_k = Σ_n c[k][n]·Π_n`.
pub fn nominal_dephasing_ops<T: Real>(
    process: &DephasingProcess<T>,
    nominal: &Hamiltonian<T>,
) -> Result<Vec<DMatrix<T>>> {
    let identity = BranchAssignment {
        cluster_of: (0..nominal.n()).map(|i| nominal.cluster_of(i)).collect(),
        overlaps: cluster_overlaps(nominal, nominal),
        min_overlap: T::one(),
    };
    perturbed_dephasing_ops(process, nominal, nominal, &identity)
}
