//! Real Bloch (adjoint) representation of the dephasing master equation.
//!
//! States and superoperators are expanded over an orthonormal basis of
//! Hermitian `N × N` matrices, giving a real `N² × N²` generator `A` with
//! `dr/dt = A·r`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use sha2::{Digest, Sha256};

use crate::dephasing::{nominal_dephasing_ops, perturbed_dephasing_ops, BranchPoint, DephasingProcess};
use crate::error::{Error, Result};
use crate::linalg::{to_complex, CMatrix};
use crate::scalar::Real;
use crate::spin_model::{Hamiltonian, PerturbationStructure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisElement {
    Identity,
    /// `(e_mn + e_nm)/√2`, `m < n` (0-based).
    Symmetric(usize, usize),
    /// `−i(e_mn − e_nm)/√2`, `m < n` (0-based).
    Antisymmetric(usize, usize),
    /// `(Σ_{j≤l} e_jj − l·e_{l+1,l+1})/√(l(l+1))`, `1 ≤ l ≤ N − 1`.
    Diagonal(usize),
}

/// Orthonormal Hermitian basis ordered as identity, symmetric pairs,
/// antisymmetric pairs, diagonal traceless elements.
#[derive(Clone, Debug)]
pub struct HermitianBasis<T: Real> {
    n: usize,
    labels: Vec<BasisElement>,
    /// Nonzero entries `(row, col, value)` of each element.
    entries: Vec<Vec<(usize, usize, Complex<T>)>>,
}

impl<T: Real> HermitianBasis<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidSpec("basis dimension must be >= 1".into()));
        }
        let mut labels = vec![BasisElement::Identity];
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|m| (m + 1..n).map(move |l| (m, l)))
            .collect();
        labels.extend(pairs.iter().map(|&(m, l)| BasisElement::Symmetric(m, l)));
        labels.extend(pairs.iter().map(|&(m, l)| BasisElement::Antisymmetric(m, l)));
        labels.extend((1..n).map(BasisElement::Diagonal));

        let zero = T::zero();
        let r2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let entries = labels
            .iter()
            .map(|label| match *label {
                BasisElement::Identity => {
                    let v = T::one() / T::lit(n as f64).sqrt();
                    (0..n).map(|i| (i, i, Complex::new(v, zero))).collect()
                }
                BasisElement::Symmetric(m, l) => {
                    vec![(m, l, Complex::new(r2, zero)), (l, m, Complex::new(r2, zero))]
                }
                BasisElement::Antisymmetric(m, l) => {
                    vec![(m, l, Complex::new(zero, -r2)), (l, m, Complex::new(zero, r2))]
                }
                BasisElement::Diagonal(d) => {
                    let norm = T::one() / T::lit((d * (d + 1)) as f64).sqrt();
                    let mut e: Vec<_> = (0..d).map(|j| (j, j, Complex::new(norm, zero))).collect();
                    e.push((d, d, Complex::new(-T::lit(d as f64) * norm, zero)));
                    e
                }
            })
            .collect();
        Ok(Self { n, labels, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of basis elements, `N²`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[BasisElement] {
        &self.labels
    }

    /// Dense matrix of element `a`.
    pub fn element(&self, a: usize) -> CMatrix<T> {
        let mut m = CMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries[a] {
            m[(i, j)] = v;
        }
        m
    }

    /// `Tr(σ_a · X)`.
    pub fn trace_with(&self, a: usize, x: &CMatrix<T>) -> Complex<T> {
        self.entries[a]
            .iter()
            .fold(Complex::new(T::zero(), T::zero()), |acc, &(i, j, v)| acc + v * x[(j, i)])
    }

    /// Real coordinates `r_a = Re Tr(σ_a · X)` of a Hermitian matrix.
    pub fn coordinates(&self, x: &CMatrix<T>) -> DVector<T> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|a| self.trace_with(a, x).re))
    }

    /// `Σ_a r_a σ_a`.
    pub fn reconstruct(&self, r: &DVector<T>) -> CMatrix<T> {
        let mut m = CMatrix::zeros(self.n, self.n);
        for (a, e) in self.entries.iter().enumerate() {
            let c = Complex::new(r[a], T::zero());
            for &(i, j, v) in e {
                m[(i, j)] += v * c;
            }
        }
        m
    }

    /// Real matrix of a linear map on Hermitian matrices: column `b` holds
    /// the coordinates of `map(σ_b)`.
    pub fn superoperator<F>(&self, map: F) -> DMatrix<T>
    where
        F: Fn(&CMatrix<T>) -> CMatrix<T>,
    {
        let d = self.len();
        let mut out = DMatrix::zeros(d, d);
        for b in 0..d {
            let image = map(&self.element(b));
            out.set_column(b, &self.coordinates(&image));
        }
        out
    }
}

pub fn build_basis<T: Real>(n: usize) -> Result<HermitianBasis<T>> {
    HermitianBasis::new(n)
}

fn check_dim<T: Real>(basis: &HermitianBasis<T>, m: &DMatrix<T>) -> Result<()> {
    if m.nrows() != basis.n() || m.ncols() != basis.n() {
        return Err(Error::DimensionMismatch {
            expected: basis.n(),
            got: m.nrows(),
        });
    }
    Ok(())
}

/// `(A_H)_ab = Tr(σ_a · (−i)[H, σ_b])`; real antisymmetric.
pub fn hamiltonian_generator<T: Real>(h: &DMatrix<T>, basis: &HermitianBasis<T>) -> Result<DMatrix<T>> {
    check_dim(basis, h)?;
    let hc = to_complex(h);
    let minus_i = Complex::new(T::zero(), -T::one());
    Ok(basis.superoperator(|s| (&hc * s - s * &hc) * minus_i))
}

/// `γ·Σ_k Tr(σ_a · (V_k σ_b V_k − ½{V_k², σ_b}))`; real symmetric, ≤ 0.
pub fn dephasing_generator<T: Real>(
    ops: &[DMatrix<T>],
    gamma: T,
    basis: &HermitianBasis<T>,
) -> Result<DMatrix<T>> {
    for v in ops {
        check_dim(basis, v)?;
    }
    let vs: Vec<(CMatrix<T>, CMatrix<T>)> = ops
        .iter()
        .map(|v| {
            let vc = to_complex(v);
            let v2 = &vc * &vc;
            (vc, v2)
        })
        .collect();
    let half = Complex::new(T::lit(0.5), T::zero());
    let g = Complex::new(gamma, T::zero());
    Ok(basis.superoperator(|s| {
        let mut out = CMatrix::zeros(s.nrows(), s.ncols());
        for (v, v2) in &vs {
            out += v * s * v - (v2 * s + s * v2) * half;
        }
        out * g
    }))
}

fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_matrix<T: Real>(m: &DMatrix<T>) -> String {
    let bytes: Vec<u8> = m.iter().flat_map(|x| x.as_f64().to_le_bytes()).collect();
    short_hash(&bytes)
}

/// Where a generator came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance<T> {
    pub hamiltonian_hash: String,
    pub process_hash: String,
    pub delta: T,
}

/// Real `N² × N²` dynamics matrix of the (possibly perturbed) system.
#[derive(Clone, Debug)]
pub struct BlochGenerator<T: Real> {
    pub matrix: DMatrix<T>,
    pub provenance: Provenance<T>,
}

/// `S(δ) = (Ã(δ) − A)/δ`.
#[derive(Clone, Debug)]
pub struct StructuredPerturbationBloch<T: Real> {
    pub matrix: DMatrix<T>,
    pub delta: T,
}

fn generator_for<T: Real>(
    h: &Hamiltonian<T>,
    ops: &[DMatrix<T>],
    process: &DephasingProcess<T>,
    delta: T,
    basis: &HermitianBasis<T>,
) -> Result<BlochGenerator<T>> {
    let a = hamiltonian_generator(h.matrix(), basis)? + dephasing_generator(ops, process.gamma(), basis)?;
    Ok(BlochGenerator {
        matrix: a,
        provenance: Provenance {
            hamiltonian_hash: hash_matrix(h.matrix()),
            process_hash: hash_matrix(process.coeffs()),
            delta,
        },
    })
}

/// Nominal generator `A = A_H + Σ_k A_{V_k}`; `process` must be bound to `h`.
pub fn nominal_generator<T: Real>(
    h: &Hamiltonian<T>,
    process: &DephasingProcess<T>,
    basis: &HermitianBasis<T>,
) -> Result<BlochGenerator<T>> {
    let ops = nominal_dephasing_ops(process, h)?;
    generator_for(h, &ops, process, T::zero(), basis)
}

/// Perturbed generator `Ã` at a continued branch point.
pub fn perturbed_generator<T: Real>(
    nominal: &Hamiltonian<T>,
    process: &DephasingProcess<T>,
    point: &BranchPoint<T>,
    basis: &HermitianBasis<T>,
) -> Result<BlochGenerator<T>> {
    let ops = perturbed_dephasing_ops(process, nominal, &point.hamiltonian, &point.assignment)?;
    generator_for(&point.hamiltonian, &ops, process, point.delta, basis)
}

/// `S(δ)` from a nominal and a perturbed generator.
pub fn structured_perturbation<T: Real>(
    nominal: &BlochGenerator<T>,
    perturbed: &BlochGenerator<T>,
) -> Result<StructuredPerturbationBloch<T>> {
    let delta = perturbed.provenance.delta;
    if delta == T::zero() {
        return Err(Error::ZeroDelta);
    }
    Ok(StructuredPerturbationBloch {
        matrix: (&perturbed.matrix - &nominal.matrix) / delta,
        delta,
    })
}

/// Builds `Ã(δ)` and `S(δ)` for `H + δ·S_structure`, following the nominal
/// eigenbranches from `δ = 0`. `process` must be bound to `h`.
pub fn assemble<T: Real>(
    h: &Hamiltonian<T>,
    process: &DephasingProcess<T>,
    structure: &PerturbationStructure<T>,
    delta: T,
    basis: &HermitianBasis<T>,
) -> Result<(BlochGenerator<T>, StructuredPerturbationBloch<T>)> {
    if delta == T::zero() {
        return Err(Error::ZeroDelta);
    }
    let nominal = nominal_generator(h, process, basis)?;
    let point = crate::dephasing::trace_branch(h, structure, delta)?;
    let perturbed = perturbed_generator(h, process, &point, basis)?;
    let s = structured_perturbation(&nominal, &perturbed)?;
    Ok((perturbed, s))
}

/// Writes a real matrix as CSV, one row per line, full precision.
pub fn write_matrix_csv<T: Real, W: Write>(m: &DMatrix<T>, mut out: W) -> std::io::Result<()> {
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|x| format!("{:e}", x.as_f64())).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dephasing::sample_processes;
    use crate::linalg::eigenvalues;
    use crate::spin_model::{build_hamiltonian, build_perturbation, NetworkSpec, PerturbationKind, Topology};

    #[test]
    fn basis_is_orthonormal_hermitian() {
        for n in 1..=5 {
            let b = build_basis::<f64>(n).unwrap();
            assert_eq!(b.len(), n * n);
            for a in 0..b.len() {
                let ea = b.element(a);
                assert!((&ea - ea.adjoint()).norm() < 1e-15);
                for c in 0..b.len() {
                    let g = (&ea * b.element(c)).trace();
                    let want = if a == c { 1.0 } else { 0.0 };
                    assert!((g.re - want).abs() < 1e-14 && g.im.abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn pauli_basis_for_two_levels() {
        let b = build_basis::<f64>(2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let x = b.element(1);
        let y = b.element(2);
        let z = b.element(3);
        assert!((x[(0, 1)].re - r).abs() < 1e-15);
        assert!((y[(0, 1)] - Complex::new(0.0, -r)).norm() < 1e-15);
        assert!((z[(0, 0)].re - r).abs() < 1e-15 && (z[(1, 1)].re + r).abs() < 1e-15);
    }

    #[test]
    fn three_level_diagonals() {
        let b = build_basis::<f64>(3).unwrap();
        let z1 = b.element(7);
        let z2 = b.element(8);
        let s2 = 2f64.sqrt();
        let s6 = 6f64.sqrt();
        let want1 = [1.0 / s2, -1.0 / s2, 0.0];
        let want2 = [1.0 / s6, 1.0 / s6, -2.0 / s6];
        for i in 0..3 {
            assert!((z1[(i, i)].re - want1[i]).abs() < 1e-15);
            assert!((z2[(i, i)].re - want2[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_hamiltonian_generates_nothing() {
        let b = build_basis::<f64>(3).unwrap();
        let a = hamiltonian_generator(&DMatrix::identity(3, 3), &b).unwrap();
        assert_eq!(a.amax(), 0.0);
    }

    #[test]
    fn two_level_precession() {
        let omega = 1.7;
        let b = build_basis::<f64>(2).unwrap();
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![omega / 2.0, -omega / 2.0]));
        let a = hamiltonian_generator(&h, &b).unwrap();
        assert!((&a + a.transpose()).amax() < 1e-12);
        let mut ev = eigenvalues(&a).unwrap();
        ev.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
        let want = [Complex::new(0.0, -omega), Complex::new(0.0, 0.0), Complex::new(0.0, 0.0), Complex::new(0.0, omega)];
        for (g, w) in ev.iter().zip(want) {
            assert!((g - w).norm() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn two_level_dephasing_rate() {
        let (c1, c2, gamma) = (0.3, 1.1, 0.4);
        let b = build_basis::<f64>(2).unwrap();
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![c1, c2]));
        let d = dephasing_generator(&[v], gamma, &b).unwrap();
        assert!((&d - d.transpose()).amax() < 1e-12);
        let mut ev: Vec<f64> = d.symmetric_eigenvalues().iter().cloned().collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rate = gamma * (c1 - c2) * (c1 - c2) / 2.0;
        let want = [-rate, -rate, 0.0, 0.0];
        for (g, w) in ev.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let flat = dephasing_generator(&[DMatrix::identity(2, 2) * 0.7], 1.0, &b).unwrap();
        assert!(flat.amax() < 1e-15);
    }

    #[test]
    fn generator_structure() {
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 4);
        let h = build_hamiltonian(&spec).unwrap();
        let b = build_basis(4).unwrap();
        let p = sample_processes(4, 1, 0, 0.05).unwrap().remove(0).bind(&h).unwrap();
        let a = nominal_generator(&h, &p, &b).unwrap().matrix;
        assert!(a.row(0).amax() < 1e-14);
        assert!(a.column(0).amax() < 1e-14);
        let ev = eigenvalues(&a).unwrap();
        assert!(ev.iter().all(|z| z.re <= 1e-10));
        assert!(ev.iter().filter(|z| z.norm() <= 1e-10).count() >= 4);
        let sym = (&a + a.transpose()) * 0.5;
        assert!(sym.symmetric_eigenvalues().max() < 1e-12);
    }

    #[test]
    fn closed_system_is_linear_in_delta() {
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 3);
        let h = build_hamiltonian(&spec).unwrap();
        let b = build_basis(3).unwrap();
        let s = build_perturbation(&spec, PerturbationKind::Coupling(1)).unwrap();
        let p = sample_processes(3, 1, 0, 1.0).unwrap().remove(0).bind(&h).unwrap().with_gamma(0.0);
        let a_s = hamiltonian_generator(&s.matrix, &b).unwrap();
        for delta in [1e-4, 1e-2, 0.5] {
            let (_, sd) = assemble(&h, &p, &s, delta, &b).unwrap();
            assert!((&sd.matrix - &a_s).amax() < 1e-10);
        }
    }

    #[test]
    fn commuting_perturbation_leaves_dephasing_unchanged() {
        let h = Hamiltonian::from_matrix(DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]))).unwrap();
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 2);
        let s = build_perturbation(&spec, PerturbationKind::Diagonal(1)).unwrap();
        let b = build_basis(2).unwrap();
        let p = DephasingProcess::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), 0.3).unwrap();
        let a_s = hamiltonian_generator(&s.matrix, &b).unwrap();
        for delta in [1e-3, 0.1, 0.4] {
            let (_, sd) = assemble(&h, &p, &s, delta, &b).unwrap();
            assert!((&sd.matrix - &a_s).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_delta_rejected() {
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 2);
        let h = build_hamiltonian(&spec).unwrap();
        let s = build_perturbation(&spec, PerturbationKind::Coupling(1)).unwrap();
        let b = build_basis(2).unwrap();
        let p = sample_processes(2, 1, 0, 0.1).unwrap().remove(0).bind(&h).unwrap();
        assert!(matches!(assemble(&h, &p, &s, 0.0, &b), Err(Error::ZeroDelta)));
    }

    #[test]
    fn reconstruction_identity() {
        let b = build_basis::<f64>(3).unwrap();
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 3);
        let h = build_hamiltonian(&spec).unwrap();
        let st = build_perturbation(&spec, PerturbationKind::Coupling(2)).unwrap();
        let p = sample_processes(3, 1, 0, 0.2).unwrap().remove(0).bind(&h).unwrap();
        let nominal = nominal_generator(&h, &p, &b).unwrap();
        let (pert, sd) = assemble(&h, &p, &st, 0.05, &b).unwrap();
        assert!((&nominal.matrix + &sd.matrix * 0.05 - &pert.matrix).amax() < 1e-14);
    }

    #[test]
    fn csv_dump() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.0, 2.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1e0,-5e-1\n0e0,2e0\n");
    }
}
