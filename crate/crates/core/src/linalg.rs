//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type CMatrix<T> = DMatrix<Complex<T>>;

/// Eigendecomposition of a real symmetric matrix with eigenvalues ascending.
pub fn symmetric_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// All eigenvalues of a general real square matrix, via the real Schur form.
pub fn eigenvalues<T: Real>(m: &DMatrix<T>) -> Result<Vec<Complex<T>>> {
    let schur = Schur::try_new(m.clone(), T::eps(), 0).ok_or(Error::NoConvergence)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest singular value of a complex matrix.
pub fn spectral_norm<T: Real>(m: &CMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    let sv = m.clone().singular_values();
    sv.iter().copied().fold(T::zero(), |acc, s| acc.max(s))
}

/// Moore–Penrose pseudoinverse of a complex matrix.
///
/// Singular values at or below `dim · ε · σ_max` are treated as zero.
pub fn pseudo_inverse<T: Real>(m: &CMatrix<T>) -> CMatrix<T> {
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma_max = svd
        .singular_values
        .iter()
        .copied()
        .fold(T::zero(), |acc, s| acc.max(s));
    let dim = T::lit(rows.max(cols) as f64);
    let cutoff = dim * T::eps() * sigma_max;

    let mut out = CMatrix::<T>::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == T::zero() {
            continue;
        }
        let inv = Complex::new(T::one() / s, T::zero());
        // out += v_k · (1/s_k) · u_kᴴ
        for i in 0..cols {
            let vi = v_t[(k, i)].conj() * inv;
            for j in 0..rows {
                out[(i, j)] += vi * u[(j, k)].conj();
            }
        }
    }
    out
}

pub fn to_complex<T: Real>(m: &DMatrix<T>) -> CMatrix<T> {
    m.map(|x| Complex::new(x, T::zero()))
}

/// Frobenius norm of a real matrix.
pub fn frobenius<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Solves the square linear assignment problem `min Σ cost[i][p(i)]`.
///
/// Returns `p` with `p[row] = column`. Potentials-based Hungarian method, O(n³).
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut seed = 17u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64) / (1u64 << 31) as f64
        };
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
                let p = min_cost_assignment(&cost);
                let got: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                let best = permutations(n)
                    .iter()
                    .map(|q| q.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((got - best).abs() < 1e-12, "n={n}: {got} vs {best}");
            }
        }
    }

    #[test]
    fn symmetric_eigen_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, -1.0, 0.5, 0.0, 0.5, 3.0]);
        let (vals, vecs) = symmetric_eigen(&m);
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rec - m).norm() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_satisfies_penrose_conditions() {
        // rank-2 complex 3x3
        let a = CMatrix::<f64>::from_row_slice(
            3,
            2,
            &[
                Complex::new(1.0, 0.5),
                Complex::new(0.0, 1.0),
                Complex::new(2.0, 0.0),
                Complex::new(1.0, -1.0),
                Complex::new(0.0, 0.0),
                Complex::new(3.0, 0.2),
            ],
        );
        let m = &a * a.adjoint();
        let p = pseudo_inverse(&m);
        assert!((&m * &p * &m - &m).norm() < 1e-12);
        assert!((&p * &m * &p - &p).norm() < 1e-12);
        assert!(((&m * &p).adjoint() - &m * &p).norm() < 1e-12);
        assert!(((&p * &m).adjoint() - &p * &m).norm() < 1e-12);
    }

    #[test]
    fn eigenvalues_of_rotation() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        let mut ev = eigenvalues(&m).unwrap();
        ev.sort_by(|a, b| a.im.partial_cmp(&b.im).unwrap());
        assert!((ev[0] - Complex::new(0.0, -2.0)).norm() < 1e-12);
        assert!((ev[1] - Complex::new(0.0, 2.0)).norm() < 1e-12);
    }
}
