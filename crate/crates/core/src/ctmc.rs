//! Continuous-time Markov chains: generator validation, exact path sampling,
//! transition probabilities and complete-data likelihoods.
//!
//! States are indexed from zero. A [`RateMatrix`] carries an explicit edge
//! mask so that structural zeros (disallowed transitions) are distinguishable
//! from rates that merely happen to be zero.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matexp::{self, MatexpError};

/// Relative tolerance for the zero row-sum invariant.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtmcError {
    #[error("rate matrix must be square and non-empty (got {rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("edge mask is {rows}x{cols}, expected {dim}x{dim}")]
    MaskShape { rows: usize, cols: usize, dim: usize },
    #[error("non-finite rate at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeRate { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, diagonal inconsistent with off-diagonal rates")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("nonzero rate {value} on masked edge ({row}, {col})")]
    EdgeViolation { row: usize, col: usize, value: f64 },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("state {state} out of range for a {dim}-state chain")]
    StateOutOfRange { state: usize, dim: usize },
    #[error("trajectory uses transition ({from}, {to}) whose rate is zero")]
    ZeroRateTransition { from: usize, to: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Matexp(#[from] MatexpError),
}

/// CTMC generator `Q` together with the set of allowed transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    rates: DMatrix<f64>,
    edges: DMatrix<bool>,
}

impl RateMatrix {
    /// Validates a raw generator against an edge mask.
    ///
    /// When `edges` is `None` every off-diagonal transition is allowed. A
    /// diagonal given as all zeros is filled in with the negated row sums.
    pub fn validate(raw: &DMatrix<f64>, edges: Option<&DMatrix<bool>>) -> Result<Self, CtmcError> {
        let (rows, cols) = raw.shape();
        if rows != cols || rows == 0 {
            return Err(CtmcError::NotSquare { rows, cols });
        }
        let dim = rows;
        let edges = match edges {
            Some(mask) => {
                if mask.shape() != (dim, dim) {
                    return Err(CtmcError::MaskShape { rows: mask.nrows(), cols: mask.ncols(), dim });
                }
                let mut mask = mask.clone();
                mask.fill_diagonal(false);
                mask
            }
            None => DMatrix::from_fn(dim, dim, |i, j| i != j),
        };

        let mut rates = raw.clone();
        let mut max_abs = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let v = rates[(i, j)];
                if !v.is_finite() {
                    return Err(CtmcError::NonFinite { row: i, col: j });
                }
                max_abs = max_abs.max(v.abs());
                if i == j {
                    continue;
                }
                if v < 0.0 {
                    return Err(CtmcError::NegativeRate { row: i, col: j, value: v });
                }
                if !edges[(i, j)] && v != 0.0 {
                    return Err(CtmcError::EdgeViolation { row: i, col: j, value: v });
                }
            }
        }

        let zero_diagonal = (0..dim).all(|i| rates[(i, i)] == 0.0);
        for i in 0..dim {
            let off: f64 = (0..dim).filter(|&j| j != i).map(|j| rates[(i, j)]).sum();
            if zero_diagonal {
                rates[(i, i)] = -off;
            } else {
                let sum = off + rates[(i, i)];
                if sum.abs() > ROW_SUM_TOL * max_abs {
                    return Err(CtmcError::RowSumViolation { row: i, sum });
                }
                rates[(i, i)] = -off;
            }
        }
        Ok(Self { rates, edges })
    }

    /// Builds a generator from off-diagonal rates, ignoring whatever is on the
    /// supplied diagonal.
    pub fn from_off_diagonal(raw: &DMatrix<f64>, edges: Option<&DMatrix<bool>>) -> Result<Self, CtmcError> {
        let mut m = raw.clone();
        m.fill_diagonal(0.0);
        Self::validate(&m, edges)
    }

    /// The `dim`-state chain with no transitions.
    pub fn zeros(dim: usize) -> Self {
        Self {
            rates: DMatrix::zeros(dim, dim),
            edges: DMatrix::from_fn(dim, dim, |i, j| i != j),
        }
    }

    pub fn dim(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn edges(&self) -> &DMatrix<bool> {
        &self.edges
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    pub fn is_edge(&self, from: usize, to: usize) -> bool {
        self.edges[(from, to)]
    }

    /// All allowed transitions in row-major order.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let n = self.dim();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.edges[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Holding-time parameters `q_i = -Q_ii`.
    pub fn holding_params(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| -self.rates[(i, i)]).collect()
    }

    pub fn max_holding(&self) -> f64 {
        self.holding_params().into_iter().fold(0.0, f64::max)
    }

    /// Embedded jump chain `v_ij = q_ij / q_i`; absorbing rows are all zero.
    pub fn jump_probs(&self) -> DMatrix<f64> {
        let n = self.dim();
        let q = self.holding_params();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j || q[i] <= 0.0 {
                0.0
            } else {
                self.rates[(i, j)] / q[i]
            }
        })
    }

    /// `P(t) = exp(Q t)`.
    pub fn transition_matrix(&self, t: f64) -> Result<DMatrix<f64>, CtmcError> {
        if t < 0.0 || t.is_nan() {
            return Err(CtmcError::NegativeTime(t));
        }
        Ok(matexp::expm(&(&self.rates * t))?)
    }

    /// Off-diagonal rates over allowed edges, row-major.
    pub fn free_rates(&self) -> Vec<f64> {
        self.edge_list().into_iter().map(|(i, j)| self.rates[(i, j)]).collect()
    }

    fn check_state(&self, state: usize) -> Result<(), CtmcError> {
        if state >= self.dim() {
            Err(CtmcError::StateOutOfRange { state, dim: self.dim() })
        } else {
            Ok(())
        }
    }

    /// Exact (Gillespie) simulation from `start` over `[0, total_time]`.
    pub fn sample_trajectory(&self, start: usize, total_time: f64, seed: u64) -> Result<Trajectory, CtmcError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_trajectory_with(start, total_time, &mut rng)
    }

    pub fn sample_trajectory_with<R: Rng + ?Sized>(
        &self,
        start: usize,
        total_time: f64,
        rng: &mut R,
    ) -> Result<Trajectory, CtmcError> {
        self.check_state(start)?;
        if !(total_time > 0.0) {
            return Err(CtmcError::InvalidTrajectory(format!("total time must be positive, got {total_time}")));
        }
        let q = self.holding_params();
        let mut states = vec![start];
        let mut dwell = Vec::new();
        let mut elapsed = 0.0;
        let mut current = start;
        loop {
            if q[current] <= 0.0 {
                dwell.push(total_time - elapsed);
                break;
            }
            let u: f64 = rng.random();
            let hold = -(1.0 - u).ln() / q[current];
            if elapsed + hold >= total_time {
                dwell.push(total_time - elapsed);
                break;
            }
            elapsed += hold;
            dwell.push(hold);
            current = self.draw_next(current, q[current], rng);
            states.push(current);
        }
        Ok(Trajectory { states, dwell_times: dwell })
    }

    fn draw_next<R: Rng + ?Sized>(&self, from: usize, q_from: f64, rng: &mut R) -> usize {
        let target = rng.random::<f64>() * q_from;
        let mut acc = 0.0;
        let mut last = from;
        for j in 0..self.dim() {
            if j == from {
                continue;
            }
            let r = self.rates[(from, j)];
            if r <= 0.0 {
                continue;
            }
            acc += r;
            last = j;
            if target < acc {
                return j;
            }
        }
        last
    }

    /// Complete-data log-likelihood `sum n_ij log q_ij - sum q_i tau_i`.
    pub fn complete_log_likelihood(&self, traj: &Trajectory) -> Result<f64, CtmcError> {
        traj.check(self)?;
        let stats = traj.sufficient_stats(self.dim());
        let q = self.holding_params();
        let mut ll = 0.0;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                let n = stats.counts[(i, j)];
                if i == j || n == 0.0 {
                    continue;
                }
                let r = self.rates[(i, j)];
                if r <= 0.0 {
                    return Err(CtmcError::ZeroRateTransition { from: i, to: j });
                }
                ll += n * r.ln();
            }
            ll -= q[i] * stats.durations[i];
        }
        Ok(ll)
    }
}

/// Transition counts `n_ij` and total sojourn times `tau_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub counts: DMatrix<f64>,
    pub durations: Vec<f64>,
}

/// A fully observed realization: visited states and how long each lasted.
///
/// `dwell_times[k]` belongs to `states[k]`; the final entry is the residual
/// time spent in the last state before the observation window closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub dwell_times: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, dwell_times: Vec<f64>) -> Result<Self, CtmcError> {
        let t = Self { states, dwell_times };
        t.check_shape()?;
        Ok(t)
    }

    fn check_shape(&self) -> Result<(), CtmcError> {
        if self.states.is_empty() || self.states.len() != self.dwell_times.len() {
            return Err(CtmcError::InvalidTrajectory(format!(
                "{} states but {} dwell times",
                self.states.len(),
                self.dwell_times.len()
            )));
        }
        for (k, w) in self.states.windows(2).enumerate() {
            if w[0] == w[1] {
                return Err(CtmcError::InvalidTrajectory(format!("repeated state at position {}", k + 1)));
            }
        }
        if self.dwell_times.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(CtmcError::InvalidTrajectory("dwell times must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Checks shape plus consistency with the edges of `q`.
    pub fn check(&self, q: &RateMatrix) -> Result<(), CtmcError> {
        self.check_shape()?;
        for &s in &self.states {
            q.check_state(s)?;
        }
        for w in self.states.windows(2) {
            if !q.is_edge(w[0], w[1]) {
                return Err(CtmcError::ZeroRateTransition { from: w[0], to: w[1] });
            }
        }
        Ok(())
    }

    pub fn total_time(&self) -> f64 {
        self.dwell_times.iter().sum()
    }

    /// State occupied at time `t` (measured from the trajectory start).
    /// Times past the end map to the final state.
    pub fn state_at(&self, t: f64) -> usize {
        let mut boundary = 0.0;
        for (k, d) in self.dwell_times.iter().enumerate() {
            boundary += d;
            if t < boundary {
                return self.states[k];
            }
        }
        *self.states.last().expect("non-empty trajectory")
    }

    pub fn sufficient_stats(&self, dim: usize) -> SufficientStats {
        let mut counts = DMatrix::zeros(dim, dim);
        let mut durations = vec![0.0; dim];
        for w in self.states.windows(2) {
            counts[(w[0], w[1])] += 1.0;
        }
        for (s, d) in self.states.iter().zip(&self.dwell_times) {
            durations[*s] += d;
        }
        SufficientStats { counts, durations }
    }
}
