//! Dense `f64` matrices and vectors, a pivoted linear solve, and the seeded
//! RNG every other module draws from.
//!
//! Row-major storage throughout. Constructors reject non-finite entries so a
//! NaN can only appear downstream of arithmetic, never at rest in a model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular or near-singular (pivot {pivot:e} below threshold {threshold:e} at column {col})")]
    Singular {
        col: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("matrix is not lower triangular: nonzero entry {value} at ({row}, {col})")]
    NotLowerTriangular { row: usize, col: usize, value: f64 },
    #[error("non-finite entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Pivot magnitudes below this reject the solve as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

// ─── Matrix ──────────────────────────────────────────────────────────────

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested row literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::DimensionMismatch(format!(
                    "ragged rows: expected {c} columns, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    /// Shape-checked but not finiteness-checked; for computed results that
    /// must flow to the caller even when arithmetic has overflowed (the
    /// trainer turns those into a diagnostic instead of a construction
    /// error).
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// Largest absolute entry difference to another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| math::max(acc, math::abs(a - b)))
    }
}

/// Standard matrix product; `a.cols` must equal `b.rows`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Solves `a * X = rhs` by LU factorization with partial pivoting.
///
/// Rejects non-square systems and pivots below [`PIVOT_THRESHOLD`].
pub fn solve_linear(a: &Matrix, rhs: &Matrix) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "coefficient matrix must be square, got {}x{}",
            a.rows, a.cols
        )));
    }
    if rhs.rows != a.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs has {} rows, expected {}",
            rhs.rows, a.rows
        )));
    }
    let n = a.rows;
    let m = rhs.cols;
    let mut lu = a.data.clone();
    let mut x = rhs.data.clone();

    for col in 0..n {
        // Partial pivot: largest magnitude on or below the diagonal.
        let mut pivot_row = col;
        let mut pivot_mag = math::abs(lu[col * n + col]);
        for r in col + 1..n {
            let mag = math::abs(lu[r * n + col]);
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = r;
            }
        }
        if pivot_mag < PIVOT_THRESHOLD {
            return Err(LinalgError::Singular {
                col,
                pivot: pivot_mag,
                threshold: PIVOT_THRESHOLD,
            });
        }
        if pivot_row != col {
            for c in 0..n {
                lu.swap(col * n + c, pivot_row * n + c);
            }
            for c in 0..m {
                x.swap(col * m + c, pivot_row * m + c);
            }
        }
        let pivot = lu[col * n + col];
        for r in col + 1..n {
            let factor = lu[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            lu[r * n + col] = 0.0;
            for c in col + 1..n {
                lu[r * n + c] -= factor * lu[col * n + c];
            }
            for c in 0..m {
                x[r * m + c] -= factor * x[col * m + c];
            }
        }
    }

    // Back substitution.
    for col in (0..n).rev() {
        let pivot = lu[col * n + col];
        for c in 0..m {
            let mut sum = x[col * m + c];
            for k in col + 1..n {
                sum -= lu[col * n + k] * x[k * m + c];
            }
            x[col * m + c] = sum / pivot;
        }
    }
    Matrix::from_vec(n, m, x)
        .map_err(|_| LinalgError::Invalid("solve produced non-finite values".into()))
}

/// Eigenvalues of a lower-triangular matrix, i.e. its diagonal.
///
/// Entries above the diagonal must be exactly zero; anything else is a
/// contract violation, not a rounding concern.
pub fn lower_triangular_eigenvalues(a: &Matrix) -> Result<Vector, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    for row in 0..a.rows {
        for col in row + 1..a.cols {
            let value = a.get(row, col);
            if value != 0.0 {
                return Err(LinalgError::NotLowerTriangular { row, col, value });
            }
        }
    }
    Vector::new(a.diagonal())
}

// ─── Vector ──────────────────────────────────────────────────────────────

/// Dense `f64` vector with finite entries at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }
}

// ─── Seeded RNG ──────────────────────────────────────────────────────────

/// Deterministic RNG: a SplitMix64 stream.
///
/// The algorithm is fixed on purpose. Identical seeds yield identical draw
/// sequences on every platform, which is what makes "same seed, same model"
/// a testable contract rather than a hope. Gaussians come from Box-Muller
/// over `libm`, so they are bit-stable too.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next 64 bits of the SplitMix64 sequence.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in the half-open unit interval, 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller; one of the pair is discarded).
    pub fn next_gaussian(&mut self) -> f64 {
        // Shift into (0, 1] so the log never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }
}

/// `n` independent draws with mean 0 and standard deviation `scale`.
pub fn seeded_gaussian(rng: &mut SeededRng, n: usize, scale: f64) -> Vector {
    debug_assert!(scale >= 0.0, "gaussian scale must be nonnegative");
    let data = (0..n).map(|_| scale * rng.next_gaussian()).collect();
    Vector { data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let m = mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let out = matmul(&Matrix::identity(3), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[0.0], &[1.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(
            matmul(&a, &b),
            Err(LinalgError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = SeededRng::new(7);
        for _ in 0..20 {
            let dims = [
                2 + (rng.next_u64() % 6) as usize,
                2 + (rng.next_u64() % 6) as usize,
                2 + (rng.next_u64() % 6) as usize,
                2 + (rng.next_u64() % 6) as usize,
            ];
            let rand_mat = |rng: &mut SeededRng, r: usize, c: usize| {
                Matrix::from_vec(r, c, (0..r * c).map(|_| rng.next_gaussian()).collect()).unwrap()
            };
            let a = rand_mat(&mut rng, dims[0], dims[1]);
            let b = rand_mat(&mut rng, dims[1], dims[2]);
            let c = rand_mat(&mut rng, dims[2], dims[3]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) <= 1e-9);
        }
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let rhs = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = solve_linear(&Matrix::identity(2), &rhs).unwrap();
        assert_eq!(out, rhs);
    }

    #[test]
    fn solve_scalar_case() {
        let a = mat(&[&[2.0]]);
        let rhs = mat(&[&[6.0]]);
        let out = solve_linear(&a, &rhs).unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn solve_rejects_singular() {
        let a = Matrix::zeros(3, 3);
        let rhs = Matrix::zeros(3, 1);
        assert!(matches!(
            solve_linear(&a, &rhs),
            Err(LinalgError::Singular { .. })
        ));
    }

    #[test]
    fn solve_recovers_x_for_well_conditioned_systems() {
        // Diagonally dominant matrices keep the condition estimate modest.
        let mut rng = SeededRng::new(11);
        for n in [2usize, 5, 16, 64] {
            let mut a = Matrix::zeros(n, n);
            for r in 0..n {
                let mut rowsum = 0.0;
                for c in 0..n {
                    let v = rng.next_gaussian();
                    a.set(r, c, v);
                    rowsum += math::abs(v);
                }
                a.set(r, r, a.get(r, r) + rowsum + 1.0);
            }
            let x =
                Matrix::from_vec(n, 2, (0..n * 2).map(|_| rng.next_gaussian()).collect()).unwrap();
            let rhs = matmul(&a, &x).unwrap();
            let solved = solve_linear(&a, &rhs).unwrap();
            assert!(
                solved.max_abs_diff(&x) <= 1e-9,
                "n={n}: max abs error {}",
                solved.max_abs_diff(&x)
            );
        }
    }

    #[test]
    fn solve_residual_is_small_relative() {
        let mut rng = SeededRng::new(3);
        let n = 24;
        let mut a = Matrix::zeros(n, n);
        for r in 0..n {
            let mut rowsum = 0.0;
            for c in 0..n {
                let v = rng.next_gaussian();
                a.set(r, c, v);
                rowsum += math::abs(v);
            }
            a.set(r, r, a.get(r, r) + rowsum);
        }
        let rhs = Matrix::from_vec(n, 1, (0..n).map(|_| rng.next_gaussian()).collect()).unwrap();
        let x = solve_linear(&a, &rhs).unwrap();
        let residual = matmul(&a, &x).unwrap().max_abs_diff(&rhs);
        let scale = rhs
            .data()
            .iter()
            .fold(0.0, |m, v| math::max(m, math::abs(*v)));
        assert!(
            residual / scale <= 1e-10,
            "relative residual {}",
            residual / scale
        );
    }

    #[test]
    fn triangular_eigenvalues_of_identity_are_ones() {
        let v = lower_triangular_eigenvalues(&Matrix::identity(4)).unwrap();
        assert_eq!(v.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn triangular_eigenvalues_rejects_upper_triangular() {
        let a = mat(&[&[1.0, 2.0], &[0.0, 3.0]]);
        assert!(matches!(
            lower_triangular_eigenvalues(&a),
            Err(LinalgError::NotLowerTriangular { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn seeded_gaussian_zero_scale_is_all_zeros() {
        let mut rng = SeededRng::new(42);
        let v = seeded_gaussian(&mut rng, 100, 0.0);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn seeded_gaussian_is_deterministic() {
        let a = seeded_gaussian(&mut SeededRng::new(123), 64, 1.5);
        let b = seeded_gaussian(&mut SeededRng::new(123), 64, 1.5);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn seeded_gaussian_sample_std_near_scale() {
        let mut rng = SeededRng::new(2024);
        let n = 100_000;
        let v = seeded_gaussian(&mut rng, n, 1.0);
        let mean: f64 = v.data().iter().sum::<f64>() / n as f64;
        let var: f64 = v
            .data()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let std = math::sqrt(var);
        assert!((0.98..=1.02).contains(&std), "sample std {std}");
    }
}
