//! Singular value decomposition via one-sided Jacobi, and the nuclear norm
//! with a subgradient.
//!
//! The attack only needs `Σσ` and `U·Vᵀ`, both of which one-sided Jacobi
//! delivers with high relative accuracy at the small shapes used here
//! (stacked hidden states and frame features, at most a few hundred rows).

use alloc::vec;
use alloc::vec::Vec;

use super::{Matrix, NumericsError};
use crate::math;

const MAX_SWEEPS: usize = 64;
// Pairwise convergence: |w_i·w_j|² ≤ TOL²·‖w_i‖²‖w_j‖².
const TOL_SQ: f64 = 4.0 * (f64::EPSILON * f64::EPSILON);
const TINY: f64 = 1e-300;

/// Result of [`svd`]: `M = U · diag(σ) · Vᵀ` with `σ` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors, `m × k` with `k = min(m, n)`. Columns whose
    /// singular value is numerically zero are zero columns.
    pub u: Matrix,
    /// Singular values, nonnegative, descending.
    pub singular_values: Vec<f64>,
    /// Right singular vectors transposed, `k × n`.
    pub v_t: Matrix,
}

/// Nuclear norm `Σσ` and one subgradient element `U·Vᵀ`.
#[derive(Debug, Clone)]
pub struct NuclearNorm {
    pub value: f64,
    /// `U·Vᵀ` restricted to singular vectors with `σ > 1e-10·σ_max`.
    pub subgradient: Matrix,
}

/// Decompose a finite matrix. Errors on non-finite input or if the Jacobi
/// sweeps fail to converge within the iteration bound.
pub fn svd(m: &Matrix) -> Result<Svd, NumericsError> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite(alloc::string::String::from(
            "svd input",
        )));
    }
    if m.rows() >= m.cols() {
        decompose_tall(m)
    } else {
        // A = V_B Σ U_Bᵀ where Aᵀ = U_B Σ V_Bᵀ.
        let flipped = decompose_tall(&m.transpose())?;
        Ok(Svd {
            u: flipped.v_t.transpose(),
            singular_values: flipped.singular_values,
            v_t: flipped.u.transpose(),
        })
    }
}

/// One-sided Jacobi on a matrix with `rows ≥ cols`.
fn decompose_tall(a: &Matrix) -> Result<Svd, NumericsError> {
    let m = a.rows();
    let n = a.cols();
    // Work on columns: w[j] is the j-th column of the rotated matrix.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= MAX_SWEEPS {
            return Err(NumericsError::SvdNoConvergence { sweeps });
        }
        sweeps += 1;
        converged = true;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let aa: f64 = w[i].iter().map(|x| x * x).sum();
                let bb: f64 = w[j].iter().map(|x| x * x).sum();
                let d: f64 = w[i].iter().zip(&w[j]).map(|(x, y)| x * y).sum();
                if d * d <= TOL_SQ * aa * bb || d * d <= TINY {
                    continue;
                }
                converged = false;
                let zeta = (bb - aa) / (2.0 * d);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + math::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + math::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_pair(&mut w, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
    }

    // Singular values are the column norms; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w
        .iter()
        .map(|col| math::sqrt(col.iter().map(|x| x * x).sum()))
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = Matrix::zeros(m, n);
    let mut v_t = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    for (out_idx, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > scale * 1e-300 && s > 0.0 {
            for r in 0..m {
                u.set(r, out_idx, w[src][r] / s);
            }
        }
        for r in 0..n {
            v_t.set(out_idx, r, v[src][r]);
        }
    }
    Ok(Svd {
        u,
        singular_values: sigma,
        v_t,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    for r in 0..cols[i].len() {
        let x = cols[i][r];
        let y = cols[j][r];
        cols[i][r] = c * x - s * y;
        cols[j][r] = s * x + c * y;
    }
}

/// Nuclear norm `Σσ` together with the `U·Vᵀ` subgradient over the
/// numerically nonzero singular block.
pub fn nuclear_norm(m: &Matrix) -> Result<NuclearNorm, NumericsError> {
    let decomp = svd(m)?;
    let value: f64 = decomp.singular_values.iter().sum();
    let sigma_max = decomp.singular_values.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * sigma_max;
    let mut sub = Matrix::zeros(m.rows(), m.cols());
    for (idx, &s) in decomp.singular_values.iter().enumerate() {
        if s <= tol {
            continue;
        }
        for r in 0..m.rows() {
            let u_r = decomp.u.get(r, idx);
            for c in 0..m.cols() {
                let cur = sub.get(r, c);
                sub.set(r, c, cur + u_r * decomp.v_t.get(idx, c));
            }
        }
    }
    Ok(NuclearNorm {
        value,
        subgradient: sub,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    /// Test-only oracle: cyclic Jacobi eigensolver for symmetric matrices.
    /// Independent of the one-sided SVD above.
    fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
        assert_eq!(a.rows(), a.cols());
        let n = a.rows();
        let mut m = a.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += m.get(i, j) * m.get(i, j);
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = m.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m.get(k, p);
                        let mkq = m.get(k, q);
                        m.set(k, p, c * mkp - s * mkq);
                        m.set(k, q, s * mkp + c * mkq);
                    }
                    for k in 0..n {
                        let mpk = m.get(p, k);
                        let mqk = m.get(q, k);
                        m.set(p, k, c * mpk - s * mqk);
                        m.set(q, k, s * mpk + c * mqk);
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eig
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd(&Matrix::identity(3)).unwrap();
        for &v in &s.singular_values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_singular_values() {
        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let s = svd(&m).unwrap();
        assert!((s.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((s.singular_values[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn squared_singular_values_match_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_matrix(&mut rng, 5, 4);
        let gram = m.matmul(&m, true, false);
        let eig = symmetric_eigenvalues(&gram);
        let s = svd(&m).unwrap();
        for (sv, ev) in s.singular_values.iter().zip(&eig) {
            assert!(
                (sv * sv - ev).abs() < 1e-8,
                "sigma^2 {} vs eigenvalue {}",
                sv * sv,
                ev
            );
        }
    }

    #[test]
    fn reconstruction_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(r, c) in &[(4usize, 4usize), (6, 3), (3, 7), (1, 5), (8, 8)] {
            let m = random_matrix(&mut rng, r, c);
            let s = svd(&m).unwrap();
            // U · diag(σ) · Vᵀ
            let k = s.singular_values.len();
            let mut us = Matrix::zeros(r, k);
            for i in 0..r {
                for j in 0..k {
                    us.set(i, j, s.u.get(i, j) * s.singular_values[j]);
                }
            }
            let recon = us.matmul(&s.v_t, false, false);
            let err = recon.sub(&m).frobenius_norm() / m.frobenius_norm();
            assert!(err < 1e-10, "reconstruction error {err}");
            // σ nonnegative descending
            for w in s.singular_values.windows(2) {
                assert!(w[0] >= w[1] && w[1] >= 0.0);
            }
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m.data_mut()[3] = f64::NAN;
        assert!(svd(&m).is_err());
    }

    #[test]
    fn nuclear_norm_of_identity_is_n() {
        let n = nuclear_norm(&Matrix::identity(5)).unwrap();
        assert!((n.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn nuclear_norm_of_stacked_identical_rows() {
        // N identical rows g: single singular value sqrt(N)·‖g‖₂.
        let g = vec![0.5, -1.0, 2.0, 0.25];
        let rows: Vec<Vec<f64>> = (0..6).map(|_| g.clone()).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let norm_g: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = nuclear_norm(&m).unwrap();
        assert!((n.value - (6.0f64).sqrt() * norm_g).abs() < 1e-9);
    }

    #[test]
    fn nuclear_norm_matches_gram_oracle() {
        // Oracle: Σ sqrt(eig(MᵀM)) from the independent eigensolver.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let m = random_matrix(&mut rng, 6, 3);
        let gram = m.matmul(&m, true, false);
        let oracle: f64 = symmetric_eigenvalues(&gram)
            .iter()
            .map(|&e| e.max(0.0).sqrt())
            .sum();
        let n = nuclear_norm(&m).unwrap();
        assert!((n.value - oracle).abs() < 1e-9);
    }

    #[test]
    fn nuclear_subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_matrix(&mut rng, 4, 3);
        let flat: Vec<f64> = m.data().to_vec();
        let f = |x: &[f64]| {
            nuclear_norm(&Matrix::from_vec(4, 3, x.to_vec()).unwrap())
                .unwrap()
                .value
        };
        let fd = finite_diff_grad(f, &flat, 1e-6);
        let sub = nuclear_norm(&m).unwrap().subgradient;
        for (i, (&a, &b)) in sub.data().iter().zip(&fd).enumerate() {
            assert!(
                (a - b).abs() < 1e-5,
                "entry {i}: subgradient {a} vs fd {b}"
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_matrix() -> impl Strategy<Value = Matrix> {
            (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-3.0f64..3.0, r * c)
                    .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn nuclear_bounds(m in arb_matrix()) {
                let n = nuclear_norm(&m).unwrap();
                let s = svd(&m).unwrap();
                let sigma_max = s.singular_values[0];
                let rank = s
                    .singular_values
                    .iter()
                    .filter(|&&v| v > 1e-10 * sigma_max.max(1e-300))
                    .count()
                    .max(1);
                prop_assert!(n.value >= sigma_max - 1e-9);
                prop_assert!(n.value <= (rank as f64).sqrt() * m.frobenius_norm() + 1e-9);
            }

            #[test]
            fn nuclear_unitary_invariance(m in arb_matrix(), seed in 0u64..1000) {
                // Random orthogonal Q from a product of Givens rotations.
                let r = m.rows();
                let mut q = Matrix::identity(r);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..2 * r {
                    if r < 2 { break; }
                    let i = rng.gen_range(0..r);
                    let mut j = rng.gen_range(0..r);
                    if i == j { j = (j + 1) % r; }
                    let theta: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
                    let (s, c) = (theta.sin(), theta.cos());
                    for k in 0..r {
                        let a = q.get(i, k);
                        let b = q.get(j, k);
                        q.set(i, k, c * a - s * b);
                        q.set(j, k, s * a + c * b);
                    }
                }
                let rotated = q.matmul(&m, false, false);
                let n1 = nuclear_norm(&m).unwrap().value;
                let n2 = nuclear_norm(&rotated).unwrap().value;
                prop_assert!((n1 - n2).abs() < 1e-8, "{n1} vs {n2}");
            }

            #[test]
            fn row_permutation_invariance(m in arb_matrix()) {
                let mut rows: Vec<Vec<f64>> =
                    (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
                rows.reverse();
                let permuted = Matrix::from_rows(&rows).unwrap();
                let n1 = nuclear_norm(&m).unwrap().value;
                let n2 = nuclear_norm(&permuted).unwrap().value;
                prop_assert!((n1 - n2).abs() < 1e-9);
            }
        }
    }
}
