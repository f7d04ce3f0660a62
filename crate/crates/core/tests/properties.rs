use dephrob::bloch::{build_basis, hamiltonian_generator, perturbed_generator, structured_perturbation};
use dephrob::control::closed_fidelity;
use dephrob::dephasing::{pairwise_rates, perturbed_dephasing_ops, sample_processes, trace_branch, DephasingProcess};
use dephrob::dynamics::{decode, encode, min_eigenvalue, propagate, site_state};
use dephrob::fit::remove_outliers;
use dephrob::linalg::{eigenvalues, CMatrix};
use dephrob::problem::PerturbationProblem;
use dephrob::spin_model::{
    all_perturbations, build_hamiltonian, build_perturbation, perturb, Hamiltonian, NetworkSpec, Topology,
};
use dephrob::stats::pearson;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use proptest::prelude::*;

fn topology() -> impl Strategy<Value = Topology> {
    prop_oneof![Just(Topology::Chain), Just(Topology::Ring)]
}

struct Case {
    spec: NetworkSpec<f64>,
    h: Hamiltonian<f64>,
    process: DephasingProcess<f64>,
    structure: dephrob::spin_model::PerturbationStructure<f64>,
}

fn case(topology: Topology, n: usize, process: usize, structure: usize, gamma: f64) -> Case {
    let spec = NetworkSpec::<f64>::uncontrolled(topology, n);
    let h = build_hamiltonian(&spec).unwrap();
    let kinds = all_perturbations(topology, n);
    let structure = build_perturbation(&spec, kinds[structure % kinds.len()]).unwrap();
    let process = sample_processes(n, process + 1, 3, gamma).unwrap().remove(process).bind(&h).unwrap();
    Case {
        spec,
        h,
        process,
        structure,
    }
}

fn commutator_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * b - b * a).norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hamiltonian_is_symmetric_and_perturbation_is_linear(
        topo in topology(), n in 3usize..7, s in 0usize..20, delta in -1.0f64..1.0
    ) {
        let spec = NetworkSpec::<f64>::uncontrolled(topo, n);
        let h = build_hamiltonian(&spec).unwrap();
        let kinds = all_perturbations(topo, n);
        let st = build_perturbation(&spec, kinds[s % kinds.len()]).unwrap();
        let ht = perturb(&h, &st, delta).unwrap();
        prop_assert!((ht.matrix() - ht.matrix().transpose()).amax() == 0.0);
        prop_assert!((ht.matrix() - h.matrix() - &st.matrix * delta).amax() < 1e-15);
    }

    #[test]
    fn ring_spectrum_is_rotation_invariant(n in 3usize..8, shift in 1usize..7, d in prop::collection::vec(-2.0f64..2.0, 8)) {
        let controls: Vec<f64> = d[..n].to_vec();
        let rotated: Vec<f64> = (0..n).map(|k| controls[(k + n - shift % n) % n]).collect();
        let a = build_hamiltonian(&NetworkSpec::<f64>::uncontrolled(Topology::Ring, n).with_controls(controls)).unwrap();
        let b = build_hamiltonian(&NetworkSpec::<f64>::uncontrolled(Topology::Ring, n).with_controls(rotated)).unwrap();
        prop_assert!((a.eigenvalues() - b.eigenvalues()).amax() < 1e-12);
    }

    #[test]
    fn sampled_rates_are_physical(n in 2usize..6, idx in 0usize..30, gamma in 1e-3f64..1.0) {
        let p = sample_processes::<f64>(n, idx + 1, 5, gamma).unwrap().remove(idx);
        prop_assert!(p.k() <= n - 1);
        let rates = p.rates();
        let max = rates.amax();
        prop_assert!((max - gamma).abs() <= 1e-12 * gamma);
        for i in 0..n {
            prop_assert_eq!(rates[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!(rates[(i, j)] >= 0.0);
                prop_assert!((rates[(i, j)] - rates[(j, i)]).abs() < 1e-15);
            }
        }
        // squared distances: −½·J·Γ·J is positive semidefinite
        let j = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let gram = (&j * &rates * &j) * -0.5;
        let min = gram.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-10 * gram.trace().abs().max(1e-300));
    }

    #[test]
    fn perturbed_dephasing_commutes_and_keeps_coefficients(
        topo in topology(), n in 3usize..6, idx in 0usize..10, s in 0usize..20, delta in 1e-3f64..1.0
    ) {
        let c = case(topo, n, idx, s, 0.1);
        let point = trace_branch(&c.h, &c.structure, delta).unwrap();
        let ops = perturbed_dephasing_ops(&c.process, &c.h, &point.hamiltonian, &point.assignment).unwrap();
        let ht = point.hamiltonian.matrix();
        for (k, v) in ops.iter().enumerate() {
            prop_assert!(commutator_norm(ht, v) <= 1e-10 * point.hamiltonian.norm().max(1.0) * v.norm().max(1.0));
            let mut got: Vec<f64> = v.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = c.process.coeffs().row(k).iter().copied().collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dephasing_operators_are_continuous(
        topo in topology(), n in 3usize..6, idx in 0usize..10, s in 0usize..20, delta in 1e-3f64..0.5
    ) {
        let c = case(topo, n, idx, s, 0.1);
        let ops_at = |d: f64| {
            let p = trace_branch(&c.h, &c.structure, d).unwrap();
            perturbed_dephasing_ops(&c.process, &c.h, &p.hamiltonian, &p.assignment).unwrap()
        };
        let base = ops_at(delta);
        let mut previous = f64::INFINITY;
        for step in [1e-3, 1e-5, 1e-7] {
            let next = ops_at(delta + step);
            let diff = base.iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(diff <= previous + 1e-12);
            previous = diff;
        }
        prop_assert!(previous < 1e-4);
    }

    #[test]
    fn generator_invariants(topo in topology(), n in 2usize..6, idx in 0usize..10, s in 0usize..20, delta in 1e-3f64..1.0) {
        let c = case(topo, n, idx, s, 0.2);
        let problem = PerturbationProblem::new(c.h.clone(), c.structure.clone(), &c.process).unwrap();
        let point = problem.perturbed_at(delta).unwrap();
        for a in [&problem.nominal().matrix, &point.generator.matrix] {
            prop_assert!(a.row(0).amax() < 1e-13);
            prop_assert!(a.column(0).amax() < 1e-13);
            let eig = eigenvalues(a).unwrap();
            prop_assert!(eig.iter().all(|z| z.re <= 1e-10));
            prop_assert!(eig.iter().filter(|z| z.norm() <= 1e-10).count() >= n);
        }
        let s = structured_perturbation(problem.nominal(), &point.generator).unwrap();
        prop_assert!((&problem.nominal().matrix + &s.matrix * delta - &point.generator.matrix).amax() < 1e-12);
        let _ = c.spec;
    }

    #[test]
    fn inner_product_identity(n in 2usize..6, seed in 0u64..1000) {
        let basis = build_basis::<f64>(n).unwrap();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut herm = || {
            let m = CMatrix::<f64>::from_fn(n, n, |_, _| Complex::new(next(), next()));
            (&m + m.adjoint()) * Complex::new(0.5, 0.0)
        };
        let x = herm();
        let y = herm();
        let lhs = (&x * &y).trace().re;
        prop_assert!((lhs - basis.coordinates(&x).dot(&basis.coordinates(&y))).abs() < 1e-12);
    }

    #[test]
    fn propagation_stays_physical(
        topo in topology(), n in 3usize..6, idx in 0usize..10, s in 0usize..20,
        gamma in prop_oneof![Just(0.0), Just(1e-3), Just(1e-2), Just(1e-1)],
        delta in prop_oneof![Just(1e-3), Just(1e-2), Just(1e-1)],
        t in 0.0f64..20.0
    ) {
        let c = case(topo, n, idx, s, 1.0);
        let process = c.process.with_gamma(gamma);
        let basis = build_basis::<f64>(n).unwrap();
        let point = trace_branch(&c.h, &c.structure, delta).unwrap();
        let a = perturbed_generator(&c.h, &process, &point, &basis).unwrap().matrix;
        let r0 = encode(&site_state(n, 0), &basis).unwrap();
        let r = propagate(&a, &r0, t);
        prop_assert!((r.r[0] - 1.0 / (n as f64).sqrt()).abs() < 1e-12);
        let rho = decode(&r, &basis);
        prop_assert!(min_eigenvalue(&rho) >= -1e-8);
        prop_assert!((&rho - rho.adjoint()).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn closed_fidelity_is_relabeling_invariant(n in 3usize..7, shift in 1usize..6, t in 0.5f64..30.0, d in prop::collection::vec(-3.0f64..3.0, 7)) {
        let controls: Vec<f64> = d[..n].to_vec();
        let shift = shift % n;
        let rotated: Vec<f64> = (0..n).map(|k| controls[(k + n - shift) % n]).collect();
        let h = NetworkSpec::<f64>::uncontrolled(Topology::Ring, n).with_controls(controls).matrix().unwrap();
        let hr = NetworkSpec::<f64>::uncontrolled(Topology::Ring, n).with_controls(rotated).matrix().unwrap();
        let f = closed_fidelity(&h, 0, 2 % n, t);
        let fr = closed_fidelity(&hr, shift, (2 + shift) % n, t);
        prop_assert!((f - fr).abs() < 1e-10);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&f));
        // against the Bloch propagation
        let basis = build_basis::<f64>(n).unwrap();
        let a = hamiltonian_generator(&h, &basis).unwrap();
        let r = propagate(&a, &encode(&site_state(n, 0), &basis).unwrap(), t);
        let out = encode(&site_state(n, 2 % n), &basis).unwrap();
        prop_assert!((out.overlap(&r) - f).abs() < 1e-9);
    }

    #[test]
    fn coefficient_rates_are_invariant_under_delta(
        topo in topology(), n in 3usize..6, idx in 0usize..10, s in 0usize..20, delta in 1e-3f64..1.0
    ) {
        let c = case(topo, n, idx, s, 0.3);
        let point = trace_branch(&c.h, &c.structure, delta).unwrap();
        let inherited = c.process.inherited_coeffs(&c.h, &point.assignment);
        let sorted = |m: &DMatrix<f64>| {
            let mut v: Vec<f64> = pairwise_rates(m, 0.3).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v
        };
        prop_assert_eq!(sorted(&inherited), sorted(c.process.coeffs()));
    }

    #[test]
    fn outlier_flags_ignore_constant_data(v in -5.0f64..5.0, len in 5usize..40) {
        prop_assert!(remove_outliers(&vec![v; len]).unwrap().iter().all(|f| !f));
    }

    #[test]
    fn pearson_is_bounded(x in prop::collection::vec(-1e3f64..1e3, 3..30), y in prop::collection::vec(-1e3f64..1e3, 3..30)) {
        let n = x.len().min(y.len());
        if let Ok(r) = pearson(&x[..n], &y[..n]) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn zero_state_encodes_to_trace_axis() {
    let basis = build_basis::<f64>(3).unwrap();
    let r = encode(&(CMatrix::<f64>::identity(3, 3) * Complex::new(1.0 / 3.0, 0.0)), &basis).unwrap();
    let mut expect = DVector::zeros(9);
    expect[0] = 1.0 / 3f64.sqrt();
    assert!((r.r - expect).amax() < 1e-15);
}
