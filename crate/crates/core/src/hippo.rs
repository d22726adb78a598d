//! HiPPO state matrices, bilinear discretization, the linear recurrence, and
//! online Legendre reconstruction of the input history.
//!
//! Two variants of the state matrix are built side by side:
//!
//! * [`HippoVariant::UnscaledLegs`] - diagonal `-(2i+1)` with a uniform `-1`
//!   below it. Its input map `B` is all-ones: the matrix formula on its own
//!   leaves `B` undefined, and all-ones is the simplest choice that keeps the
//!   recurrence well-posed. Treat that pairing as a convention, not a derived
//!   fact; it has no published reconstruction basis, so decoding is refused
//!   for this variant.
//! * [`HippoVariant::StandardLegs`] - the published scaled-Legendre operator
//!   with sqrt-scaled entries, which is the variant that supports
//!   reconstruction.
//!
//! Dynamics are time-invariant with a fixed step: `x' = A_bar x + B_bar u`.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HippoError {
    #[error("state count must be at least 1")]
    EmptyState,
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
    #[error("reconstruction is only defined for the standard LegS variant")]
    UnsupportedVariant,
    #[error("state has recorded no steps; nothing to reconstruct")]
    EmptyHistory,
    #[error("state length {state} does not match core state count {core}")]
    StateLengthMismatch { state: usize, core: usize },
    #[error("discrete eigenvalue {value} at index {index} escapes the unit disk")]
    Unstable { index: usize, value: f64 },
}

/// Which state-matrix formulation a core uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HippoVariant {
    UnscaledLegs,
    StandardLegs,
}

/// Builds the continuous-time pair `(A, B)` for a variant, 0-based indices.
///
/// UnscaledLegs: `A[i][i] = -(2i+1)`, `A[i][j] = -1` for `i > j`, `B[i] = 1`.
/// StandardLegs: `A[i][i] = -(i+1)`, `A[i][j] = -sqrt(2i+1)*sqrt(2j+1)` for
/// `i > j`, `B[i] = sqrt(2i+1)`.
pub fn hippo_matrix(
    n_states: usize,
    variant: HippoVariant,
) -> Result<(Matrix, Vector), HippoError> {
    if n_states == 0 {
        return Err(HippoError::EmptyState);
    }
    let mut a = Matrix::zeros(n_states, n_states);
    let mut b = vec![0.0; n_states];
    for i in 0..n_states {
        match variant {
            HippoVariant::UnscaledLegs => {
                a.set(i, i, -((2 * i + 1) as f64));
                for j in 0..i {
                    a.set(i, j, -1.0);
                }
                b[i] = 1.0;
            }
            HippoVariant::StandardLegs => {
                let si = math::sqrt((2 * i + 1) as f64);
                a.set(i, i, -((i + 1) as f64));
                for j in 0..i {
                    a.set(i, j, -si * math::sqrt((2 * j + 1) as f64));
                }
                b[i] = si;
            }
        }
    }
    Ok((a, Vector::new(b)?))
}

/// Bilinear (Tustin) discretization:
/// `A_bar = (I - dt/2 A)^-1 (I + dt/2 A)`, `B_bar = (I - dt/2 A)^-1 dt B`.
///
/// The inverse is realized as a linear solve. `(I - dt/2 A)` cannot be
/// singular for either HiPPO variant with `dt > 0`, but the solve still
/// guards the pivot.
pub fn discretize_bilinear(
    a: &Matrix,
    b: &Vector,
    dt: f64,
) -> Result<(Matrix, Vector), HippoError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(HippoError::InvalidStep(dt));
    }
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(HippoError::Linalg(LinalgError::DimensionMismatch(
            alloc::format!("A is {}x{}, B has length {}", a.rows(), a.cols(), b.len()),
        )));
    }
    let half = dt / 2.0;
    let mut left = Matrix::zeros(n, n);
    let mut right = Matrix::zeros(n, n + 1);
    for i in 0..n {
        for j in 0..n {
            let aij = a.get(i, j);
            let id = if i == j { 1.0 } else { 0.0 };
            left.set(i, j, id - half * aij);
            right.set(i, j, id + half * aij);
        }
        right.set(i, n, dt * b.get(i));
    }
    // One solve covers both products: columns 0..n give A_bar, column n gives B_bar.
    let solved = linalg::solve_linear(&left, &right)?;
    let lower_triangular = (0..n).all(|i| (i + 1..n).all(|j| a.get(i, j) == 0.0));
    let mut a_bar = Matrix::zeros(n, n);
    let mut b_bar = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            // The bilinear map preserves lower-triangularity exactly; any
            // fill above the diagonal is pivoting roundoff, so the
            // structural zeros are restored rather than left as ~1e-17 dust.
            if lower_triangular && j > i {
                continue;
            }
            a_bar.set(i, j, solved.get(i, j));
        }
        b_bar[i] = solved.get(i, n);
    }
    Ok((a_bar, Vector::new(b_bar)?))
}

/// A discretized state-space core: the continuous pair it was built from,
/// the step size, and the discrete pair the recurrence runs on.
///
/// Immutable after construction; share freely.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmCore {
    n_states: usize,
    variant: HippoVariant,
    a_continuous: Matrix,
    b_continuous: Vector,
    dt: f64,
    a_discrete: Matrix,
    b_discrete: Vector,
}

impl SsmCore {
    pub fn new(n_states: usize, variant: HippoVariant, dt: f64) -> Result<Self, HippoError> {
        let (a, b) = hippo_matrix(n_states, variant)?;
        let (a_bar, b_bar) = discretize_bilinear(&a, &b, dt)?;
        // A_bar inherits lower-triangularity, so its eigenvalues sit on the
        // diagonal; all must be inside the unit disk.
        for (index, &value) in a_bar.diagonal().iter().enumerate() {
            if math::abs(value) >= 1.0 {
                return Err(HippoError::Unstable { index, value });
            }
        }
        Ok(Self {
            n_states,
            variant,
            a_continuous: a,
            b_continuous: b,
            dt,
            a_discrete: a_bar,
            b_discrete: b_bar,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn variant(&self) -> HippoVariant {
        self.variant
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a_continuous(&self) -> &Matrix {
        &self.a_continuous
    }

    pub fn b_continuous(&self) -> &Vector {
        &self.b_continuous
    }

    pub fn a_discrete(&self) -> &Matrix {
        &self.a_discrete
    }

    pub fn b_discrete(&self) -> &Vector {
        &self.b_discrete
    }

    /// One recurrence step: `x' = A_bar x + B_bar u`.
    pub fn step(&self, state: &SsmState, u: f64) -> SsmState {
        assert_eq!(
            state.x.len(),
            self.n_states,
            "state length does not match core"
        );
        let n = self.n_states;
        let mut next = vec![0.0; n];
        let a = self.a_discrete.data();
        let x = state.x.data();
        for i in 0..n {
            let mut acc = self.b_discrete.get(i) * u;
            let row = &a[i * n..(i + 1) * n];
            for (av, xv) in row.iter().zip(x) {
                acc += av * xv;
            }
            next[i] = acc;
        }
        SsmState {
            x: Vector::new(next).expect("finite step result"),
            steps_taken: state.steps_taken + 1,
        }
    }

    /// Runs [`SsmCore::step`] over a whole input sequence; element `t` is the
    /// state after `t + 1` steps from `x0`.
    pub fn scan(&self, inputs: &[f64], x0: &SsmState) -> Vec<SsmState> {
        let mut out = Vec::with_capacity(inputs.len());
        let mut state = x0.clone();
        for &u in inputs {
            state = self.step(&state, u);
            out.push(state.clone());
        }
        out
    }

    /// Reconstructs the input history from the state coefficients.
    ///
    /// Returns `n_points` samples of the decoded signal at uniformly spaced
    /// times over the elapsed window `[0, steps_taken * dt]`. Decoding
    /// evaluates `sum_k x_k * sqrt(2k+1) * P_k(2 * exp(s - T) - 1)`: the
    /// normalized Legendre basis rescaled onto the window through the
    /// exponential warp. That is the basis the fixed-step recurrence is
    /// actually orthonormal against (a linear rescale decodes a different
    /// operator and degrades as states are added). History older than a few
    /// time constants is exponentially attenuated and cannot be recovered.
    pub fn reconstruct_legendre(
        &self,
        state: &SsmState,
        n_points: usize,
    ) -> Result<Vec<f64>, HippoError> {
        if self.variant != HippoVariant::StandardLegs {
            return Err(HippoError::UnsupportedVariant);
        }
        if state.steps_taken == 0 {
            return Err(HippoError::EmptyHistory);
        }
        if state.x.len() != self.n_states {
            return Err(HippoError::StateLengthMismatch {
                state: state.x.len(),
                core: self.n_states,
            });
        }
        let horizon = state.steps_taken as f64 * self.dt;
        let samples = sample_times(horizon, n_points);
        Ok(samples
            .iter()
            .map(|&s| self.decode_at(state, s, horizon))
            .collect())
    }

    fn decode_at(&self, state: &SsmState, s: f64, horizon: f64) -> f64 {
        let z = 2.0 * math::exp(s - horizon) - 1.0;
        let n = self.n_states;
        let x = state.x.data();
        // Three-term Legendre recurrence, accumulated on the fly.
        let mut p_prev = 1.0;
        let mut acc = x[0] * p_prev;
        if n == 1 {
            return acc;
        }
        let mut p = z;
        acc += x[1] * math::sqrt(3.0) * p;
        for k in 2..n {
            let kf = k as f64;
            let p_next = ((2.0 * kf - 1.0) * z * p - (kf - 1.0) * p_prev) / kf;
            p_prev = p;
            p = p_next;
            acc += x[k] * math::sqrt(2.0 * kf + 1.0) * p;
        }
        acc
    }
}

/// Uniform sample times over `[0, horizon]`, endpoints included.
fn sample_times(horizon: f64, n_points: usize) -> Vec<f64> {
    match n_points {
        0 => Vec::new(),
        1 => vec![horizon],
        _ => (0..n_points)
            .map(|i| horizon * i as f64 / (n_points - 1) as f64)
            .collect(),
    }
}

/// Recurrence state: coefficient vector plus how many steps produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    x: Vector,
    steps_taken: usize,
}

impl SsmState {
    pub fn zero(n_states: usize) -> Self {
        Self {
            x: Vector::zeros(n_states),
            steps_taken: 0,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        self.x.data()
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }
}
