//! Dense matrix/vector kernel shared by every other module.
//!
//! Softmax, entropy, KL divergence to the uniform distribution, SVD and the
//! nuclear norm with its subgradient, and a central-difference gradient
//! oracle. Everything is plain `f64`, row-major, single-threaded, and pure.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

mod svd;

pub use svd::{nuclear_norm, svd, NuclearNorm, Svd};

/// Error raised by the numeric kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// An input contained NaN or ±∞.
    NonFinite(String),
    /// Shapes do not agree for the requested operation.
    ShapeMismatch(String),
    /// A vector does not satisfy the probability-distribution invariants.
    InvalidDistribution(String),
    /// The SVD sweep did not converge within the iteration bound.
    SvdNoConvergence { sweeps: usize },
}

impl core::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NumericsError::NonFinite(what) => write!(f, "non-finite input: {what}"),
            NumericsError::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            NumericsError::InvalidDistribution(what) => write!(f, "invalid distribution: {what}"),
            NumericsError::SvdNoConvergence { sweeps } => {
                write!(f, "SVD did not converge after {sweeps} Jacobi sweeps")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NumericsError {}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a flat row-major buffer, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite(format!("{rows}x{cols} matrix")));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from a flat buffer without the finiteness scan.
    ///
    /// Used on hot paths where the inputs are already known finite.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stack row vectors (each of equal length) into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::ShapeMismatch(String::from(
                    "ragged rows in from_rows",
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `op(A) · op(B)` where each operand is optionally transposed.
    ///
    /// Every output entry accumulates over the inner index in ascending
    /// order, so a 1×k row times this routine agrees bit-for-bit with the
    /// same dot product computed anywhere else in the crate.
    pub fn matmul(&self, other: &Matrix, trans_a: bool, trans_b: bool) -> Matrix {
        let (m, k_a) = if trans_a {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k_b, n) = if trans_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        assert_eq!(k_a, k_b, "matmul inner dimensions differ");
        let k_len = k_a;
        let mut out = Matrix::zeros(m, n);
        match (trans_a, trans_b) {
            (false, false) => {
                // ikj loop: per-(i,j) accumulation still runs k ascending.
                for i in 0..m {
                    let a_row = &self.data[i * k_len..(i + 1) * k_len];
                    let out_row = &mut out.data[i * n..(i + 1) * n];
                    for (k, &a_ik) in a_row.iter().enumerate() {
                        let b_row = &other.data[k * n..(k + 1) * n];
                        for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                            *o += a_ik * b_kj;
                        }
                    }
                }
            }
            (false, true) => {
                for i in 0..m {
                    let a_row = &self.data[i * k_len..(i + 1) * k_len];
                    for j in 0..n {
                        let b_row = &other.data[j * k_len..(j + 1) * k_len];
                        let mut acc = 0.0;
                        for (a, b) in a_row.iter().zip(b_row) {
                            acc += a * b;
                        }
                        out.data[i * n + j] = acc;
                    }
                }
            }
            (true, false) => {
                for k in 0..k_len {
                    let a_row = &self.data[k * m..(k + 1) * m];
                    let b_row = &other.data[k * n..(k + 1) * n];
                    for i in 0..m {
                        let a_ki = a_row[i];
                        let out_row = &mut out.data[i * n..(i + 1) * n];
                        for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                            *o += a_ki * b_kj;
                        }
                    }
                }
            }
            (true, true) => {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for k in 0..k_len {
                            acc += self.data[k * m + i] * other.data[j * k_len + k];
                        }
                        out.data[i * n + j] = acc;
                    }
                }
            }
        }
        out
    }
}

/// Probability distribution over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validate and wrap a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if probs.is_empty() {
            return Err(NumericsError::InvalidDistribution(String::from(
                "empty distribution",
            )));
        }
        if !probs.iter().all(|p| p.is_finite()) {
            return Err(NumericsError::NonFinite(String::from("distribution")));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(NumericsError::InvalidDistribution(String::from(
                "negative probability",
            )));
        }
        let sum: f64 = probs.iter().sum();
        if math::abs(sum - 1.0) > 1e-9 {
            return Err(NumericsError::InvalidDistribution(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Distribution { probs })
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Self {
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }
}

/// Shift-stabilized softmax over a logit vector.
pub fn softmax(logits: &[f64]) -> Result<Distribution, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::InvalidDistribution(String::from(
            "empty logits",
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(NumericsError::NonFinite(String::from("softmax logits")));
    }
    Ok(Distribution {
        probs: softmax_slice(logits),
    })
}

/// Softmax kernel used by both the model forward passes and the tape.
///
/// Kept as a single slice routine so incremental decoding and full-sequence
/// replay reduce to exactly the same float operations.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| math::exp(v - max)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &Distribution) -> f64 {
    entropy_slice(&p.probs)
}

pub(crate) fn entropy_slice(probs: &[f64]) -> f64 {
    -probs.iter().map(|&x| xlogx(x)).sum::<f64>()
}

/// `x ln x` extended continuously by 0 at `x = 0`.
#[inline]
pub(crate) fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * math::ln(x)
    }
}

/// KL divergence from `p` to the uniform distribution, in nats.
///
/// Computed through the identity `D_KL(p, U) = ln V − H(p)`, which avoids
/// per-bin `ln(p_i · V)` terms near zero probabilities.
pub fn kl_to_uniform(p: &Distribution) -> f64 {
    let v = p.len() as f64;
    let kl = math::ln(v) - entropy(p);
    // The identity can go a hair negative in the last ulp for near-uniform p.
    kl.max(0.0)
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        math::abs(a - b) <= tol
    }

    #[test]
    fn softmax_symmetric_input() {
        let d = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for &p in d.probs() {
            assert!(close(p, 0.25, 1e-15));
        }
    }

    #[test]
    fn softmax_analytic_two_way() {
        let d = softmax(&[math::ln(2.0), 0.0]).unwrap();
        assert!(close(d.prob(0), 2.0 / 3.0, 1e-15));
        assert!(close(d.prob(1), 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_matches_naive_formula() {
        // Oracle: the unshifted definition exp(x_i)/sum exp(x_j), valid at
        // small magnitudes where overflow cannot occur.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let naive_sum: f64 = logits.iter().map(|&v| math::exp(v)).sum();
        let d = softmax(&logits).unwrap();
        for (i, &l) in logits.iter().enumerate() {
            assert!(close(d.prob(i), math::exp(l) / naive_sum, 1e-12));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[1.0, f64::NAN]),
            Err(NumericsError::NonFinite(_))
        ));
        assert!(matches!(
            softmax(&[1.0, f64::INFINITY]),
            Err(NumericsError::NonFinite(_))
        ));
    }

    #[test]
    fn entropy_uniform_and_onehot() {
        assert!(close(entropy(&Distribution::uniform(64)), math::ln(64.0), 1e-12));
        let onehot = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&onehot), 0.0);
    }

    #[test]
    fn entropy_analytic_half_quarter_quarter() {
        let p = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!(close(entropy(&p), 1.5 * math::ln(2.0), 1e-12));
    }

    #[test]
    fn kl_uniform_is_zero_and_onehot_is_lnv() {
        assert!(close(kl_to_uniform(&Distribution::uniform(16)), 0.0, 1e-12));
        let mut probs = vec![0.0; 64];
        probs[5] = 1.0;
        let onehot = Distribution::new(probs).unwrap();
        assert!(close(kl_to_uniform(&onehot), math::ln(64.0), 1e-12));
    }

    #[test]
    fn kl_matches_direct_sum_oracle() {
        // Oracle: D_KL(p, U) = sum_i p_i ln(p_i V), summed directly.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let direct: f64 = probs.iter().map(|&p| p * math::ln(p * 8.0)).sum();
            let p = Distribution::new(probs).unwrap();
            assert!(close(kl_to_uniform(&p), direct, 1e-12));
        }
    }

    #[test]
    fn finite_diff_on_squared_norm() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4);
        assert!(close(g[0], 2.0, 1e-6));
        assert!(close(g[1], 4.0, 1e-6));
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_| 42.0, &[1.0, -3.0, 0.5], 1e-4);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_matches_analytic_kl_softmax_gradient() {
        // d/dz_j KL(softmax(z), U) = p_j (ln p_j + H(p)).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = |z: &[f64]| kl_to_uniform(&softmax(z).unwrap());
        let fd = finite_diff_grad(f, &logits, 1e-5);
        let p = softmax(&logits).unwrap();
        let h = entropy(&p);
        for (j, &g) in fd.iter().enumerate() {
            let analytic = p.prob(j) * (math::ln(p.prob(j)) + h);
            assert!(
                math::abs(g - analytic) <= 1e-6 * math::abs(analytic).max(1.0),
                "coord {j}: fd {g} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let plain = a.matmul(&b, false, false);
        let via_ta = a.transpose().matmul(&b, true, false);
        let via_tb = a.matmul(&b.transpose(), false, true);
        let via_tt = a.transpose().matmul(&b.transpose(), true, true);
        for m in [&via_ta, &via_tb, &via_tt] {
            for (x, y) in plain.data().iter().zip(m.data()) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn distribution_rejects_bad_vectors() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..64)) {
                let d = softmax(&v).unwrap();
                let sum: f64 = d.probs().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }

            #[test]
            fn softmax_shift_invariant(
                v in proptest::collection::vec(-20.0f64..20.0, 2..32),
                c in -50.0f64..50.0,
            ) {
                let d = softmax(&v).unwrap();
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let d2 = softmax(&shifted).unwrap();
                for (a, b) in d.probs().iter().zip(d2.probs()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn kl_nonnegative_and_zero_iff_uniform(
                raw in proptest::collection::vec(0.001f64..1.0, 2..32),
            ) {
                let sum: f64 = raw.iter().sum();
                let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
                let n = probs.len() as f64;
                let p = Distribution::new(probs.clone()).unwrap();
                let kl = kl_to_uniform(&p);
                prop_assert!(kl >= 0.0);
                let max_dev = probs
                    .iter()
                    .map(|&x| (x - 1.0 / n).abs())
                    .fold(0.0, f64::max);
                if kl == 0.0 {
                    prop_assert!(max_dev < 1e-9);
                }
                if max_dev < 1e-12 {
                    prop_assert!(kl < 1e-9);
                }
            }
        }
    }
}
