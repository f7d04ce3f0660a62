//! A nominal network with one dephasing process and one structured
//! perturbation: the unit every sweep, pole scan and `δ_max` search runs on.

use nalgebra::DMatrix;
use num_complex::Complex;
use rayon::prelude::*;

use crate::bloch::{build_basis, nominal_generator, perturbed_generator, BlochGenerator, HermitianBasis};
use crate::dephasing::{trace_branches, BranchPoint, DephasingProcess};
use crate::error::Result;
use crate::scalar::Real;
use crate::spin_model::{Hamiltonian, PerturbationStructure};
use crate::transfer::{candidate_frequencies, poles, trace_invariants, transfer_norm, FrequencyCandidates, TransferEvaluation, TransferOptions};

#[derive(Clone, Debug)]
pub struct PerturbationProblem<T: Real> {
    hamiltonian: Hamiltonian<T>,
    structure: PerturbationStructure<T>,
    process: DephasingProcess<T>,
    basis: HermitianBasis<T>,
    nominal: BlochGenerator<T>,
    nominal_candidates: FrequencyCandidates<T>,
    invariants: DMatrix<T>,
}

/// Perturbed system at one `δ`.
#[derive(Clone, Debug)]
pub struct PerturbedPoint<T: Real> {
    pub branch: BranchPoint<T>,
    pub generator: BlochGenerator<T>,
}

impl<T: Real> PerturbationProblem<T> {
    /// Binds `process` to the eigenspaces of `hamiltonian` and builds the
    /// nominal generator.
    pub fn new(
        hamiltonian: Hamiltonian<T>,
        structure: PerturbationStructure<T>,
        process: &DephasingProcess<T>,
    ) -> Result<Self> {
        let process = process.bind(&hamiltonian)?;
        let basis = build_basis(hamiltonian.n())?;
        let nominal = nominal_generator(&hamiltonian, &process, &basis)?;
        let nominal_candidates = candidate_frequencies(&hamiltonian);
        let invariants = trace_invariants(&hamiltonian, &basis);
        Ok(Self {
            hamiltonian,
            structure,
            process,
            basis,
            nominal,
            nominal_candidates,
            invariants,
        })
    }

    pub fn hamiltonian(&self) -> &Hamiltonian<T> {
        &self.hamiltonian
    }

    pub fn structure(&self) -> &PerturbationStructure<T> {
        &self.structure
    }

    /// The process as bound to the nominal Hamiltonian.
    pub fn process(&self) -> &DephasingProcess<T> {
        &self.process
    }

    pub fn basis(&self) -> &HermitianBasis<T> {
        &self.basis
    }

    pub fn nominal(&self) -> &BlochGenerator<T> {
        &self.nominal
    }

    /// Projector onto the trace invariants eliminated from the resolvent.
    pub fn invariants(&self) -> &DMatrix<T> {
        &self.invariants
    }

    pub fn is_closed(&self) -> bool {
        self.process.gamma() == T::zero()
    }

    /// Perturbed systems at each `δ` (branches continued from `δ = 0`).
    pub fn perturbed(&self, deltas: &[T]) -> Vec<Result<PerturbedPoint<T>>> {
        let branches = trace_branches(&self.hamiltonian, &self.structure, deltas);
        branches
            .into_par_iter()
            .map(|b| {
                let branch = b?;
                let generator = perturbed_generator(&self.hamiltonian, &self.process, &branch, &self.basis)?;
                Ok(PerturbedPoint { branch, generator })
            })
            .collect()
    }

    pub fn perturbed_at(&self, delta: T) -> Result<PerturbedPoint<T>> {
        self.perturbed(&[delta]).pop().expect("one delta in, one result out")
    }

    /// Candidate frequencies of `H̃` united with the nominal ones.
    pub fn candidates(&self, point: &PerturbedPoint<T>) -> FrequencyCandidates<T> {
        candidate_frequencies(&point.branch.hamiltonian).union(&self.nominal_candidates)
    }

    /// `δ·S(δ) = Ã(δ) − A`.
    pub fn scaled_perturbation(&self, point: &PerturbedPoint<T>) -> DMatrix<T> {
        &point.generator.matrix - &self.nominal.matrix
    }

    fn evaluate_point(&self, point: &PerturbedPoint<T>, options: TransferOptions) -> TransferEvaluation<T> {
        let delta = point.branch.delta;
        let ds = self.scaled_perturbation(point);
        // T = δ·R·S(δ) = R·(Ã − A); pass δ = 1 with the unscaled difference.
        let mut eval = transfer_norm(&self.nominal.matrix, &self.invariants, &ds, T::one(), &self.candidates(point), options);
        eval.delta = delta;
        eval
    }

    /// `‖T_δ‖` over the candidate frequencies for each `δ > 0`.
    pub fn transfer_norms(&self, deltas: &[T], options: TransferOptions) -> Vec<Result<TransferEvaluation<T>>> {
        let points = self.perturbed(deltas);
        points
            .into_par_iter()
            .map(|p| {
                let p = p?;
                if p.branch.delta == T::zero() {
                    return Err(crate::error::Error::ZeroDelta);
                }
                Ok(self.evaluate_point(&p, options))
            })
            .collect()
    }

    pub fn transfer_norm_at(&self, delta: T) -> Result<TransferEvaluation<T>> {
        self.transfer_norms(&[delta], TransferOptions::default())
            .pop()
            .expect("one delta in, one result out")
    }

    /// `‖T_δ(iω)‖` on an arbitrary frequency list.
    pub fn transfer_norm_on(&self, delta: T, omegas: &[T]) -> Result<Vec<T>> {
        let point = self.perturbed_at(delta)?;
        let ds = self.scaled_perturbation(&point);
        Ok(omegas
            .par_iter()
            .map(|&w| crate::transfer::transfer_norm_at(&self.nominal.matrix, &self.invariants, &ds, T::one(), w))
            .collect())
    }

    /// Poles of `Ã(δ)` for each `δ ≥ 0`.
    pub fn poles(&self, deltas: &[T]) -> Vec<Result<Vec<Complex<T>>>> {
        self.perturbed(deltas)
            .into_par_iter()
            .map(|p| poles(&p?.generator.matrix))
            .collect()
    }
}
