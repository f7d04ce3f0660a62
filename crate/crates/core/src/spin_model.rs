//! XX-coupled chains and rings in the single-excitation subspace.
//!
//! Hamiltonians are the `N × N` matrices `coupling · adjacency + diag(D)`,
//! where the adjacency is a path (chain) or a cycle (ring). Indices in
//! [`PerturbationKind`] are 1-based to match the usual site labels.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Chain,
    Ring,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Chain => f.write_str("chain"),
            Topology::Ring => f.write_str("ring"),
        }
    }
}

/// Topology, size, uniform coupling and diagonal controls of a spin network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec<T> {
    pub topology: Topology,
    pub n: usize,
    pub coupling: T,
    pub controls: Vec<T>,
}

impl<T: Real> NetworkSpec<T> {
    /// Uniformly coupled network without controls.
    pub fn uncontrolled(topology: Topology, n: usize) -> Self {
        Self {
            topology,
            n,
            coupling: T::one(),
            controls: vec![T::zero(); n],
        }
    }

    pub fn with_controls(mut self, controls: Vec<T>) -> Self {
        self.controls = controls;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidSpec(format!("N = {} < 2", self.n)));
        }
        if self.controls.len() != self.n {
            return Err(Error::InvalidSpec(format!(
                "{} controls for N = {}",
                self.controls.len(),
                self.n
            )));
        }
        if !self.coupling.is_finite() || self.controls.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidSpec("non-finite coupling or control".into()));
        }
        Ok(())
    }

    /// The bare matrix `coupling · adjacency + diag(D)`.
    pub fn matrix(&self) -> Result<DMatrix<T>> {
        self.validate()?;
        let n = self.n;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            h[(i, i + 1)] += self.coupling;
            h[(i + 1, i)] += self.coupling;
        }
        // N = 2 ring would double the single bond; closure only exists for N ≥ 3.
        if self.topology == Topology::Ring && n > 2 {
            h[(0, n - 1)] += self.coupling;
            h[(n - 1, 0)] += self.coupling;
        }
        for (i, &d) in self.controls.iter().enumerate() {
            h[(i, i)] += d;
        }
        Ok(h)
    }
}

/// Which single coupling or site energy a structured perturbation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbationKind {
    /// Bond between sites `n` and `n + 1`, `1 ≤ n ≤ N − 1`.
    Coupling(usize),
    /// Bond between sites `N` and `1` of a ring.
    RingClosure,
    /// Energy of site `n`, `1 ≤ n ≤ N`.
    Diagonal(usize),
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationKind::Coupling(n) => write!(f, "coupling:{n}"),
            PerturbationKind::RingClosure => f.write_str("ring_closure"),
            PerturbationKind::Diagonal(n) => write!(f, "diagonal:{n}"),
        }
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "ring_closure" {
            return Ok(PerturbationKind::RingClosure);
        }
        let (kind, idx) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("unknown perturbation `{s}`")))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad perturbation index in `{s}`")))?;
        match kind.trim() {
            "coupling" => Ok(PerturbationKind::Coupling(idx)),
            "diagonal" => Ok(PerturbationKind::Diagonal(idx)),
            _ => Err(Error::Config(format!("unknown perturbation `{s}`"))),
        }
    }
}

impl Serialize for PerturbationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PerturbationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 0/1 symmetric structure matrix for one perturbation kind.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationStructure<T> {
    pub kind: PerturbationKind,
    pub matrix: DMatrix<T>,
}

pub fn build_perturbation<T: Real>(
    spec: &NetworkSpec<T>,
    kind: PerturbationKind,
) -> Result<PerturbationStructure<T>> {
    spec.validate()?;
    let n = spec.n;
    let mut m = DMatrix::zeros(n, n);
    match kind {
        PerturbationKind::Coupling(i) => {
            if i < 1 || i > n - 1 {
                return Err(Error::IndexOutOfRange {
                    kind: "coupling",
                    index: i,
                    n,
                });
            }
            m[(i - 1, i)] = T::one();
            m[(i, i - 1)] = T::one();
        }
        PerturbationKind::RingClosure => {
            if spec.topology != Topology::Ring {
                return Err(Error::TopologyMismatch(kind.to_string()));
            }
            if n < 3 {
                return Err(Error::IndexOutOfRange {
                    kind: "ring_closure",
                    index: n,
                    n,
                });
            }
            m[(n - 1, 0)] = T::one();
            m[(0, n - 1)] = T::one();
        }
        PerturbationKind::Diagonal(i) => {
            if i < 1 || i > n {
                return Err(Error::IndexOutOfRange {
                    kind: "diagonal",
                    index: i,
                    n,
                });
            }
            m[(i - 1, i - 1)] = T::one();
        }
    }
    Ok(PerturbationStructure { kind, matrix: m })
}

/// All elementary perturbations of a network: couplings, the ring closure
/// (rings only) and diagonal entries.
pub fn all_perturbations(topology: Topology, n: usize) -> Vec<PerturbationKind> {
    let mut kinds: Vec<_> = (1..n).map(PerturbationKind::Coupling).collect();
    if topology == Topology::Ring && n > 2 {
        kinds.push(PerturbationKind::RingClosure);
    }
    kinds.extend((1..=n).map(PerturbationKind::Diagonal));
    kinds
}

/// Real symmetric Hamiltonian with its ascending eigendecomposition and
/// the grouping of (numerically) degenerate eigenvalues into clusters.
#[derive(Clone, Debug)]
pub struct Hamiltonian<T: Real> {
    matrix: DMatrix<T>,
    eigenvalues: DVector<T>,
    eigenvectors: DMatrix<T>,
    clusters: Vec<Vec<usize>>,
    cluster_of: Vec<usize>,
    tolerance: T,
}

impl<T: Real> Hamiltonian<T> {
    pub fn from_matrix(matrix: DMatrix<T>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: matrix.ncols(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidSpec("empty Hamiltonian".into()));
        }
        let scale = matrix.iter().fold(T::one(), |acc, x| acc.max(x.abs()));
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > T::lit(1e-12) * scale {
            return Err(Error::InvalidSpec("Hamiltonian is not symmetric".into()));
        }
        let (eigenvalues, eigenvectors) = symmetric_eigen(&matrix);
        let spectral_norm = eigenvalues.iter().fold(T::zero(), |acc, l| acc.max(l.abs()));
        let rel = T::lit(1e-9).max(T::lit(64.0) * T::eps());
        let tolerance = rel * T::one().max(spectral_norm);

        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            match clusters.last_mut() {
                Some(last) if eigenvalues[i] - eigenvalues[*last.last().unwrap()] < tolerance => {
                    last.push(i)
                }
                _ => clusters.push(vec![i]),
            }
        }
        let mut cluster_of = vec![0; n];
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                cluster_of[i] = c;
            }
        }
        Ok(Self {
            matrix,
            eigenvalues,
            eigenvectors,
            clusters,
            cluster_of,
            tolerance,
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, matching [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<T> {
        &self.eigenvectors
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn cluster_of(&self, index: usize) -> usize {
        self.cluster_of[index]
    }

    pub fn degeneracy_tolerance(&self) -> T {
        self.tolerance
    }

    /// Spectral norm `max |λ|`.
    pub fn norm(&self) -> T {
        self.eigenvalues
            .iter()
            .fold(T::zero(), |acc, l| acc.max(l.abs()))
    }

    /// Orthogonal projector onto the eigenspace of a cluster.
    pub fn projector(&self, cluster: usize) -> DMatrix<T> {
        let n = self.n();
        let mut p = DMatrix::zeros(n, n);
        for &i in &self.clusters[cluster] {
            let v = self.eigenvectors.column(i);
            p += &v * v.transpose();
        }
        p
    }
}

pub fn build_hamiltonian<T: Real>(spec: &NetworkSpec<T>) -> Result<Hamiltonian<T>> {
    Hamiltonian::from_matrix(spec.matrix()?)
}

/// `H + δ·S`, re-diagonalized. `δ = 0` returns the input unchanged.
pub fn perturb<T: Real>(
    h: &Hamiltonian<T>,
    s: &PerturbationStructure<T>,
    delta: T,
) -> Result<Hamiltonian<T>> {
    if s.matrix.nrows() != h.n() || s.matrix.ncols() != h.n() {
        return Err(Error::DimensionMismatch {
            expected: h.n(),
            got: s.matrix.nrows(),
        });
    }
    if delta == T::zero() {
        return Ok(h.clone());
    }
    Hamiltonian::from_matrix(h.matrix() + &s.matrix * delta)
}
