//! Time evolution in the Bloch representation and transfer fidelity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;
use serde::Serialize;

use crate::bloch::HermitianBasis;
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::Real;

/// Tolerance on trace and hermiticity when encoding a density matrix.
const STATE_TOL: f64 = 1e-10;
/// Smallest eigenvalue accepted for a density matrix.
const PSD_TOL: f64 = 1e-8;

/// Real coordinates of a density matrix over a Hermitian basis.
#[derive(Clone, Debug, PartialEq)]
pub struct BlochState<T: Real> {
    pub r: DVector<T>,
}

impl<T: Real> BlochState<T> {
    /// Inner product `Tr(ρ_a ρ_b)`.
    pub fn overlap(&self, other: &Self) -> T {
        self.r.dot(&other.r)
    }
}

/// Localized single-excitation state `e_ii` (0-based site).
pub fn site_state<T: Real>(n: usize, site: usize) -> CMatrix<T> {
    let mut rho = CMatrix::zeros(n, n);
    rho[(site, site)] = Complex::new(T::one(), T::zero());
    rho
}

pub fn min_eigenvalue<T: Real>(rho: &CMatrix<T>) -> T {
    let eig = SymmetricEigen::new(rho.clone());
    eig.eigenvalues.iter().copied().fold(T::max_value().unwrap_or(T::one()), |a, b| a.min(b))
}

pub fn encode<T: Real>(rho: &CMatrix<T>, basis: &HermitianBasis<T>) -> Result<BlochState<T>> {
    let n = basis.n();
    if rho.nrows() != n || rho.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rho.nrows(),
        });
    }
    if (rho - rho.adjoint()).iter().any(|z| nalgebra::ComplexField::modulus(*z) > T::lit(STATE_TOL)) {
        return Err(Error::InvalidSpec("density matrix is not Hermitian".into()));
    }
    let trace = rho.trace();
    if (trace.re - T::one()).abs() > T::lit(STATE_TOL) || trace.im.abs() > T::lit(STATE_TOL) {
        return Err(Error::NonUnitTrace(trace.re.as_f64()));
    }
    if min_eigenvalue(rho) < -T::lit(PSD_TOL) {
        return Err(Error::InvalidSpec("density matrix is not positive semidefinite".into()));
    }
    Ok(BlochState {
        r: basis.coordinates(rho),
    })
}

pub fn decode<T: Real>(state: &BlochState<T>, basis: &HermitianBasis<T>) -> CMatrix<T> {
    basis.reconstruct(&state.r)
}

/// `exp(A·t)·r0` by scaling and squaring with a Padé approximant.
pub fn propagate<T: Real>(generator: &DMatrix<T>, r0: &BlochState<T>, t: T) -> BlochState<T> {
    if t == T::zero() {
        return r0.clone();
    }
    let propagator = (generator * t).exp();
    BlochState { r: propagator * &r0.r }
}

#[derive(Clone, Debug, Serialize)]
pub struct FidelityResult<T> {
    pub fidelity: T,
    /// `1 − F`.
    pub error: T,
    pub tf: T,
}

/// `F = Tr(ρ_out·ρ(t_f))` with `ρ(0) = ρ_in`.
pub fn fidelity<T: Real>(
    generator: &DMatrix<T>,
    basis: &HermitianBasis<T>,
    rho_in: &CMatrix<T>,
    rho_out: &CMatrix<T>,
    tf: T,
) -> Result<FidelityResult<T>> {
    let r_in = encode(rho_in, basis)?;
    let r_out = encode(rho_out, basis)?;
    let f = r_out.overlap(&propagate(generator, &r_in, tf));
    Ok(FidelityResult {
        fidelity: f,
        error: T::one() - f,
        tf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{build_basis, hamiltonian_generator, nominal_generator, perturbed_generator};
    use crate::dephasing::{sample_processes, trace_branch};
    use crate::spin_model::{build_hamiltonian, build_perturbation, NetworkSpec, PerturbationKind, Topology};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pure(n: usize, rng: &mut ChaCha8Rng) -> CMatrix<f64> {
        let v = DVector::from_fn(n, |_, _| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let v = v.normalize();
        &v * v.adjoint()
    }

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> CMatrix<f64> {
        let m = CMatrix::from_fn(n, n, |_, _| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        (&m + m.adjoint()) * Complex::new(0.5, 0.0)
    }

    #[test]
    fn maximally_mixed_encodes_to_identity_axis() {
        let n = 4;
        let b = build_basis::<f64>(n).unwrap();
        let rho = CMatrix::identity(n, n) * Complex::new(0.25, 0.0);
        let s = encode(&rho, &b).unwrap();
        assert!((s.r[0] - 0.5).abs() < 1e-15);
        assert!(s.r.rows(1, 15).amax() < 1e-15);
    }

    #[test]
    fn site_state_has_identity_and_diagonal_components_only() {
        let b = build_basis::<f64>(4).unwrap();
        let s = encode(&site_state(4, 0), &b).unwrap();
        for (a, label) in b.labels().iter().enumerate() {
            match label {
                crate::bloch::BasisElement::Identity | crate::bloch::BasisElement::Diagonal(_) => {}
                _ => assert_eq!(s.r[a], 0.0),
            }
        }
        assert!((s.r[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn encode_decode_roundtrip_and_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_basis::<f64>(5).unwrap();
        for _ in 0..10 {
            let rho = random_pure(5, &mut rng);
            let s = encode(&rho, &b).unwrap();
            assert!((decode(&s, &b) - &rho).norm() < 1e-13);
            let x = random_hermitian(5, &mut rng);
            let y = random_hermitian(5, &mut rng);
            let tr = (&x * &y).trace().re;
            assert!((tr - b.coordinates(&x).dot(&b.coordinates(&y))).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_trace() {
        let b = build_basis::<f64>(2).unwrap();
        let rho = CMatrix::identity(2, 2);
        assert!(matches!(encode(&rho, &b), Err(Error::NonUnitTrace(_))));
    }

    #[test]
    fn rabi_transfer_two_sites() {
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 2);
        let h = build_hamiltonian(&spec).unwrap();
        let b = build_basis(2).unwrap();
        let a = hamiltonian_generator(h.matrix(), &b).unwrap();
        let t = std::f64::consts::FRAC_PI_2;
        let f = fidelity(&a, &b, &site_state(2, 0), &site_state(2, 1), t).unwrap();
        assert!((f.fidelity - 1.0).abs() < 1e-12);
        let r = propagate(&a, &encode(&site_state(2, 0), &b).unwrap(), 0.0);
        assert_eq!(r, encode(&site_state(2, 0), &b).unwrap());
        let same = fidelity(&a, &b, &site_state(2, 0), &site_state(2, 0), 0.0).unwrap();
        assert!((same.fidelity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn strong_dephasing_relaxes_to_energy_populations() {
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Chain, 3);
        let h = build_hamiltonian(&spec).unwrap();
        let b = build_basis(3).unwrap();
        let p = sample_processes(3, 1, 0, 2.0).unwrap().remove(0).bind(&h).unwrap();
        let a = nominal_generator(&h, &p, &b).unwrap().matrix;
        let rho_in = site_state::<f64>(3, 0);
        let rho_out = site_state::<f64>(3, 2);
        // steady state: ρ_in dephased in the H eigenbasis
        let v = h.eigenvectors();
        let mut rho_ss = CMatrix::<f64>::zeros(3, 3);
        for k in 0..3 {
            let col = v.column(k).map(|x| Complex::new(x, 0.0));
            let pop = (col.adjoint() * &rho_in * &col)[(0, 0)];
            rho_ss += &col * col.adjoint() * pop;
        }
        let expect = (&rho_out * &rho_ss).trace().re;
        let f = fidelity(&a, &b, &rho_in, &rho_out, 200.0).unwrap();
        assert!((f.fidelity - expect).abs() < 1e-10);
        assert!(f.fidelity < 1.0);
    }

    #[test]
    fn propagation_matches_coherence_oracle() {
        let spec = NetworkSpec::<f64>::uncontrolled(Topology::Ring, 4);
        let h = build_hamiltonian(&spec).unwrap();
        let s = build_perturbation(&spec, PerturbationKind::Coupling(2)).unwrap();
        let b = build_basis(4).unwrap();
        let p = sample_processes(4, 1, 9, 0.3).unwrap().remove(0).bind(&h).unwrap();
        let point = trace_branch(&h, &s, 0.2).unwrap();
        let a = perturbed_generator(&h, &p, &point, &b).unwrap().matrix;
        let coeffs = p.inherited_coeffs(&h, &point.assignment);
        let rates = crate::dephasing::pairwise_rates(&coeffs, p.gamma());
        let lam = point.hamiltonian.eigenvalues();
        let v = point.hamiltonian.eigenvectors().map(|x| Complex::new(x, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rho0 = random_pure(4, &mut rng);
        let r0 = encode(&rho0, &b).unwrap();
        for t in [0.1, 1.0, 10.0] {
            let rt = decode(&propagate(&a, &r0, t), &b);
            // analytic: ρ_mn(t) = ρ_mn(0)·exp((−iω_mn − Γ_mn)t) in the eigenbasis
            let rho_e = v.adjoint() * &rho0 * &v;
            let evolved = CMatrix::from_fn(4, 4, |m, n| {
                let w = lam[m] - lam[n];
                rho_e[(m, n)] * (Complex::new(-rates[(m, n)], -w) * t).exp()
            });
            let analytic = &v * evolved * v.adjoint();
            assert!((&rt - &analytic).norm() < 1e-8, "t = {t}");
            assert!((rt.trace().re - 1.0).abs() < 1e-10);
            assert!(min_eigenvalue(&rt) >= -1e-8);
        }
    }
}
