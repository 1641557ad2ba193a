//! End-state conditioned expectations.
//!
//! For an interval of length `t` and end states `(k, l)` these are the
//! expected number of `i → j` jumps and the expected time spent in `i`,
//! conditioned on `s(0) = k`, `s(t) = l`. EM never needs them per pair; it
//! needs `Σ_{kl} w_kl · E[·|k,l,t]` for pair weights `w`, which is what the
//! accumulating functions compute.
//!
//! Three interchangeable methods are provided:
//!
//! * [`esce_expm`]: Van Loan block exponentials, one per state and per edge.
//! * [`esce_unif`]: uniformization series with `R = Q/q̂ + I`.
//! * [`esce_eigen`]: spectral form with the symmetric `Ψ(t)` kernel and the
//!   `B = UᵀFVᵀ` product shared by every state and edge.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::RateMatrix;
use crate::matexp::{self, EigenDecomposition, MatexpError, ILL_CONDITIONED};

/// Transition probabilities below this are treated as zero.
pub const MIN_PROBABILITY: f64 = 1e-300;
/// Default cap on the uniformization truncation point.
pub const DEFAULT_TRUNCATION_CAP: u64 = 1_000_000;
/// Tolerance on the imaginary part of eigen-based aggregates.
pub const IMAG_TOL: f64 = 1e-8;
/// Negative round-off above `-NEGATIVE_TOL · scale` is clamped to zero.
pub const NEGATIVE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EsceError {
    #[error("pair ({k}, {l}) has positive weight but P_kl(t) = {p:e}")]
    DegenerateTransition { k: usize, l: usize, p: f64 },
    #[error("uniformization truncation point {m} exceeds cap {cap}")]
    TruncationOverflow { m: u64, cap: u64 },
    #[error("eigen method unstable: {0}")]
    EigenUnstable(String),
    #[error("expectation {value:e} is negative beyond round-off")]
    NegativeExpectation { value: f64 },
    #[error("invalid pair weights: {0}")]
    InvalidWeights(String),
    #[error("interval must be positive and finite, got {0}")]
    InvalidInterval(f64),
    #[error(transparent)]
    Matexp(#[from] MatexpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EsceMethod {
    Expm,
    Unif,
    Eigen,
}

impl std::str::FromStr for EsceMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "expm" => Ok(Self::Expm),
            "unif" => Ok(Self::Unif),
            "eigen" => Ok(Self::Eigen),
            other => Err(format!("unknown method '{other}' (expected expm, unif or eigen)")),
        }
    }
}

impl std::fmt::Display for EsceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Expm => "expm",
            Self::Unif => "unif",
            Self::Eigen => "eigen",
        })
    }
}

/// End-state pair weights for one interval.
///
/// Soft weights sum to one, hard weights are one-hot, and pooled weights are
/// sums of either over intervals of identical length (total mass = count).
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    weights: DMatrix<f64>,
    interval: f64,
}

impl PairWeights {
    fn check_interval(interval: f64) -> Result<(), EsceError> {
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(EsceError::InvalidInterval(interval));
        }
        Ok(())
    }

    fn check_entries(w: &DMatrix<f64>) -> Result<(), EsceError> {
        if w.nrows() != w.ncols() {
            return Err(EsceError::InvalidWeights(format!("{}x{} matrix", w.nrows(), w.ncols())));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(EsceError::InvalidWeights("entries must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn soft(weights: DMatrix<f64>, interval: f64) -> Result<Self, EsceError> {
        Self::check_interval(interval)?;
        Self::check_entries(&weights)?;
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EsceError::InvalidWeights(format!("soft weights sum to {total}")));
        }
        Ok(Self { weights, interval })
    }

    pub fn hard(dim: usize, k: usize, l: usize, interval: f64) -> Result<Self, EsceError> {
        Self::check_interval(interval)?;
        if k >= dim || l >= dim {
            return Err(EsceError::InvalidWeights(format!("pair ({k}, {l}) out of range for dim {dim}")));
        }
        let mut weights = DMatrix::zeros(dim, dim);
        weights[(k, l)] = 1.0;
        Ok(Self { weights, interval })
    }

    /// Arbitrary non-negative mass, e.g. several intervals summed.
    pub fn pooled(weights: DMatrix<f64>, interval: f64) -> Result<Self, EsceError> {
        Self::check_interval(interval)?;
        Self::check_entries(&weights)?;
        Ok(Self { weights, interval })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn total(&self) -> f64 {
        self.weights.sum()
    }

    /// The only nonzero pair, if there is exactly one.
    pub fn single_pair(&self) -> Option<(usize, usize)> {
        let mut found = None;
        for k in 0..self.dim() {
            for l in 0..self.dim() {
                if self.weights[(k, l)] != 0.0 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((k, l));
                }
            }
        }
        found
    }

    /// `F_kl = w_kl / P_kl(t)`; zero-weight pairs are skipped.
    fn scaled_by(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>, EsceError> {
        let n = self.dim();
        let mut f = DMatrix::zeros(n, n);
        for k in 0..n {
            for l in 0..n {
                let w = self.weights[(k, l)];
                if w == 0.0 {
                    continue;
                }
                let pkl = p[(k, l)];
                if !(pkl >= MIN_PROBABILITY) {
                    return Err(EsceError::DegenerateTransition { k, l, p: pkl });
                }
                f[(k, l)] = w / pkl;
            }
        }
        Ok(f)
    }
}

/// Running sums of expected transition counts and durations.
#[derive(Debug, Clone, PartialEq)]
pub struct EsceAccumulator {
    pub expected_transitions: DMatrix<f64>,
    pub expected_durations: DVector<f64>,
    /// Total interval time fed in, weighted by pair mass; sets the clamp scale.
    pub weighted_time: f64,
}

impl EsceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            expected_transitions: DMatrix::zeros(dim, dim),
            expected_durations: DVector::zeros(dim),
            weighted_time: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.expected_durations.len()
    }

    pub fn merge(&mut self, other: &EsceAccumulator) {
        self.expected_transitions += &other.expected_transitions;
        self.expected_durations += &other.expected_durations;
        self.weighted_time += other.weighted_time;
    }

    /// Zero out round-off negatives; larger negatives are an error.
    pub fn clamp(&mut self) -> Result<(), EsceError> {
        let tol = NEGATIVE_TOL * self.weighted_time.max(1.0);
        for x in self.expected_transitions.iter_mut().chain(self.expected_durations.iter_mut()) {
            if *x < 0.0 {
                if *x < -tol {
                    return Err(EsceError::NegativeExpectation { value: *x });
                }
                *x = 0.0;
            }
        }
        Ok(())
    }
}

/// `⌈4 + 6√(q̂t) + q̂t⌉`.
pub fn truncation_point(q_hat: f64, t: f64) -> u64 {
    let x = q_hat * t;
    (4.0 + 6.0 * x.sqrt() + x).ceil() as u64
}

/// Poisson probabilities `Pois(m; mu)` for `m = 0..=m_max`, built in log space.
pub fn poisson_pmf(mu: f64, m_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m_max + 1);
    if mu == 0.0 {
        out.push(1.0);
        out.resize(m_max + 1, 0.0);
        return out;
    }
    let ln_mu = mu.ln();
    let mut log_p = -mu;
    out.push(log_p.exp());
    for m in 1..=m_max {
        log_p += ln_mu - (m as f64).ln();
        out.push(log_p.exp());
    }
    out
}

fn check_dims(q: &RateMatrix, w: &PairWeights, acc: &EsceAccumulator) -> Result<(), EsceError> {
    let n = q.dim();
    if w.dim() != n || acc.dim() != n {
        return Err(EsceError::Matexp(MatexpError::DimensionMismatch { expected: n, rows: w.dim(), cols: acc.dim() }));
    }
    Ok(())
}

fn unit_pair(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, n);
    b[(i, j)] = 1.0;
    b
}

fn weighted_sum(f: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    f.component_mul(m).sum()
}

/// Van Loan based accumulation.
pub fn esce_expm(q: &RateMatrix, w: &PairWeights, acc: &mut EsceAccumulator) -> Result<(), EsceError> {
    check_dims(q, w, acc)?;
    let n = q.dim();
    let t = w.interval();
    let p = matexp::expm(&(q.rates() * t))?;
    let f = w.scaled_by(&p)?;
    if f.iter().all(|x| *x == 0.0) {
        return Ok(());
    }
    for i in 0..n {
        let d = matexp::vanloan_integral(q.rates(), &unit_pair(n, i, i), t)?;
        acc.expected_durations[i] += weighted_sum(&f, &d);
    }
    for (i, j) in q.edge_list() {
        let rate = q.rate(i, j);
        if rate == 0.0 {
            continue;
        }
        let m = matexp::vanloan_integral(q.rates(), &unit_pair(n, i, j), t)?;
        acc.expected_transitions[(i, j)] += rate * weighted_sum(&f, &m);
    }
    acc.weighted_time += w.total() * t;
    Ok(())
}

/// Powers `R^0..R^M` of the uniformized jump matrix `R = Q/q̂ + I`.
#[derive(Debug, Clone)]
pub struct RPowers {
    q_hat: f64,
    powers: Vec<DMatrix<f64>>,
    cap: u64,
}

impl RPowers {
    /// Precompute enough powers for intervals up to `max_interval`.
    pub fn new(q: &RateMatrix, max_interval: f64, cap: u64) -> Result<Self, EsceError> {
        let q_hat = q.max_holding();
        let mut out = Self { q_hat, powers: Vec::new(), cap };
        let n = q.dim();
        out.powers.push(DMatrix::identity(n, n));
        if q_hat > 0.0 {
            let m = truncation_point(q_hat, max_interval);
            if m > cap {
                return Err(EsceError::TruncationOverflow { m, cap });
            }
            let r = out.jump_matrix(q);
            for _ in 0..m {
                let next = out.powers.last().unwrap() * &r;
                out.powers.push(next);
            }
        }
        Ok(out)
    }

    fn jump_matrix(&self, q: &RateMatrix) -> DMatrix<f64> {
        let n = q.dim();
        q.rates() / self.q_hat + DMatrix::identity(n, n)
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    pub fn power(&self, m: usize) -> &DMatrix<f64> {
        &self.powers[m]
    }

    /// Extend the table so it holds `R^m_needed`.
    fn ensure(&mut self, q: &RateMatrix, m_needed: u64) -> Result<(), EsceError> {
        if m_needed > self.cap {
            return Err(EsceError::TruncationOverflow { m: m_needed, cap: self.cap });
        }
        if self.powers.len() as u64 > m_needed {
            return Ok(());
        }
        let r = self.jump_matrix(q);
        while (self.powers.len() as u64) <= m_needed {
            let next = self.powers.last().unwrap() * &r;
            self.powers.push(next);
        }
        Ok(())
    }

    /// `P(t) ≈ Σ_m Pois(m; q̂t) R^m`, truncated at the usual point.
    pub fn transition_matrix(&mut self, q: &RateMatrix, t: f64) -> Result<DMatrix<f64>, EsceError> {
        let n = q.dim();
        if self.q_hat == 0.0 {
            return Ok(DMatrix::identity(n, n));
        }
        let m = truncation_point(self.q_hat, t);
        self.ensure(q, m)?;
        let pois = poisson_pmf(self.q_hat * t, m as usize);
        let mut p = DMatrix::zeros(n, n);
        for (mm, &c) in pois.iter().enumerate() {
            p += &self.powers[mm] * c;
        }
        Ok(p)
    }
}

/// Uniformization based accumulation.
///
/// With `q̂ = 0` nothing moves, so durations are just `t` on the diagonal of
/// the weights. A single nonzero weight takes the vector-only `O(M²)` path.
pub fn esce_unif(q: &RateMatrix, w: &PairWeights, acc: &mut EsceAccumulator, powers: &mut RPowers) -> Result<(), EsceError> {
    check_dims(q, w, acc)?;
    let n = q.dim();
    let t = w.interval();
    if powers.q_hat == 0.0 {
        for k in 0..n {
            for l in 0..n {
                let wt = w.weights()[(k, l)];
                if wt > 0.0 && k != l {
                    return Err(EsceError::DegenerateTransition { k, l, p: 0.0 });
                }
            }
            acc.expected_durations[k] += w.weights()[(k, k)] * t;
        }
        acc.weighted_time += w.total() * t;
        return Ok(());
    }
    let m = truncation_point(powers.q_hat, t);
    powers.ensure(q, m)?;
    let m = m as usize;
    let pois = poisson_pmf(powers.q_hat * t, m);
    let r = powers.power(1).clone();

    let mut p = DMatrix::zeros(n, n);
    for (mm, &c) in pois.iter().enumerate() {
        p += powers.power(mm) * c;
    }

    if let Some((k, l)) = w.single_pair() {
        let wt = w.weights()[(k, l)];
        let pkl = p[(k, l)];
        if !(pkl >= MIN_PROBABILITY) {
            return Err(EsceError::DegenerateTransition { k, l, p: pkl });
        }
        let rows: Vec<DVector<f64>> = (0..=m).map(|i| powers.power(i).row(k).transpose()).collect();
        let cols: Vec<DVector<f64>> = (0..=m).map(|i| powers.power(i).column(l).into_owned()).collect();
        let (dur, trans) = unif_series(q, &r, &pois, t, &rows, &cols);
        let scale = wt / pkl;
        acc.expected_durations += dur * scale;
        acc.expected_transitions += trans * scale;
        acc.weighted_time += wt * t;
        return Ok(());
    }

    let f = w.scaled_by(&p)?;
    if f.iter().all(|x| *x == 0.0) {
        return Ok(());
    }
    // x_n(i)_l = Σ_k F_kl (R^n)_ki, i.e. rows of (FᵀR^n)ᵀ; y_p(j)_l = (R^p)_jl.
    let ft = f.transpose();
    let xs: Vec<DMatrix<f64>> = (0..=m).map(|i| (&ft * powers.power(i)).transpose()).collect();
    for i in 0..n {
        let mut total = 0.0;
        for mm in 0..=m {
            let mut inner = 0.0;
            for nn in 0..=mm {
                inner += xs[nn].row(i).dot(&powers.power(mm - nn).row(i));
            }
            total += t / (mm as f64 + 1.0) * pois[mm] * inner;
        }
        acc.expected_durations[i] += total;
    }
    for (i, j) in q.edge_list() {
        if r[(i, j)] == 0.0 {
            continue;
        }
        let mut total = 0.0;
        for mm in 1..=m {
            let mut inner = 0.0;
            for nn in 1..=mm {
                inner += xs[nn - 1].row(i).dot(&powers.power(mm - nn).row(j));
            }
            total += pois[mm] * inner;
        }
        acc.expected_transitions[(i, j)] += r[(i, j)] * total;
    }
    acc.weighted_time += w.total() * t;
    Ok(())
}

/// Unnormalised single-pair series given `e_kᵀR^n` (`rows`) and `R^n e_l`
/// (`cols`). Returns `(P_kl·E[τ_·], P_kl·E[n_··])`.
fn unif_series(
    q: &RateMatrix,
    r: &DMatrix<f64>,
    pois: &[f64],
    t: f64,
    rows: &[DVector<f64>],
    cols: &[DVector<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = q.dim();
    let m = pois.len() - 1;
    let mut dur = DVector::zeros(n);
    let mut trans = DMatrix::zeros(n, n);
    for mm in 0..=m {
        let c = t / (mm as f64 + 1.0) * pois[mm];
        for nn in 0..=mm {
            dur.axpy(c, &rows[nn].component_mul(&cols[mm - nn]), 1.0);
        }
    }
    for (i, j) in q.edge_list() {
        let rij = r[(i, j)];
        if rij == 0.0 {
            continue;
        }
        let mut total = 0.0;
        for mm in 1..=m {
            let mut inner = 0.0;
            for nn in 1..=mm {
                inner += rows[nn - 1][i] * cols[mm - nn][j];
            }
            total += pois[mm] * inner;
        }
        trans[(i, j)] = rij * total;
    }
    (dur, trans)
}

/// Single end-state pair by uniformization without a power table: only the
/// vectors `e_kᵀR^n` and `R^n e_l` are formed, so memory is `O(M·n)`.
/// Returns conditional durations and transition counts.
pub fn unif_single_pair(q: &RateMatrix, k: usize, l: usize, t: f64, cap: u64) -> Result<(DVector<f64>, DMatrix<f64>), EsceError> {
    let n = q.dim();
    let q_hat = q.max_holding();
    if !(t > 0.0 && t.is_finite()) {
        return Err(EsceError::InvalidInterval(t));
    }
    if q_hat == 0.0 {
        if k != l {
            return Err(EsceError::DegenerateTransition { k, l, p: 0.0 });
        }
        let mut dur = DVector::zeros(n);
        dur[k] = t;
        return Ok((dur, DMatrix::zeros(n, n)));
    }
    let m = truncation_point(q_hat, t);
    if m > cap {
        return Err(EsceError::TruncationOverflow { m, cap });
    }
    let m = m as usize;
    let r = q.rates() / q_hat + DMatrix::identity(n, n);
    let rt = r.transpose();
    let mut rows = Vec::with_capacity(m + 1);
    let mut cols = Vec::with_capacity(m + 1);
    let mut row = DVector::zeros(n);
    row[k] = 1.0;
    let mut col = DVector::zeros(n);
    col[l] = 1.0;
    for _ in 0..=m {
        let next_row = &rt * &row;
        let next_col = &r * &col;
        rows.push(std::mem::replace(&mut row, next_row));
        cols.push(std::mem::replace(&mut col, next_col));
    }
    let pois = poisson_pmf(q_hat * t, m);
    let pkl: f64 = pois.iter().zip(&rows).map(|(c, v)| c * v[l]).sum();
    if !(pkl >= MIN_PROBABILITY) {
        return Err(EsceError::DegenerateTransition { k, l, p: pkl });
    }
    let (dur, trans) = unif_series(q, &r, &pois, t, &rows, &cols);
    Ok((dur / pkl, trans / pkl))
}

/// `Ψ_pq = ∫₀ᵗ e^{xλ_p} e^{(t−x)λ_q} dx`.
pub fn psi_entry(lp: Complex64, lq: Complex64, t: f64) -> Complex64 {
    let gap_tol = 1e-9 * lp.norm().max(1.0);
    if (lp - lq).norm() < gap_tol {
        return (lp * t).exp() * t;
    }
    let a = lp * t;
    let b = lq * t;
    let h = (a - b) * 0.5;
    if h.norm() > 1.0 {
        return (a.exp() - b.exp()) / (lp - lq);
    }
    // t·e^{(a+b)/2}·sinh(h)/h, series for sinh(h)/h on |h| ≤ 1.
    let h2 = h * h;
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    for k in 1..30 {
        term = term * h2 / ((2 * k) as f64 * (2 * k + 1) as f64);
        sum += term;
        if term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    ((a + b) * 0.5).exp() * sum * t
}

pub fn psi_matrix(eigenvalues: &DVector<Complex64>, t: f64) -> DMatrix<Complex64> {
    let n = eigenvalues.len();
    DMatrix::from_fn(n, n, |p, q| psi_entry(eigenvalues[p], eigenvalues[q], t))
}

fn check_eigen(decomp: &EigenDecomposition) -> Result<(), EsceError> {
    if !(decomp.condition <= ILL_CONDITIONED) {
        return Err(EsceError::EigenUnstable(format!("condition number {:e}", decomp.condition)));
    }
    Ok(())
}

fn real_part(z: Complex64, what: &str) -> Result<f64, EsceError> {
    if !z.im.is_finite() || !z.re.is_finite() || z.im.abs() > IMAG_TOL * z.re.abs().max(1.0) {
        return Err(EsceError::EigenUnstable(format!("{what} has imaginary residue {:e}", z.im)));
    }
    Ok(z.re)
}

/// Spectral transition matrix `Re(U e^{Λt} V)`.
pub fn eigen_transition_matrix(decomp: &EigenDecomposition, t: f64) -> DMatrix<f64> {
    decomp.exp(t)
}

/// Eigen based accumulation: one `B = UᵀFVᵀ` per interval, then a Hadamard
/// sum per state and per edge.
pub fn esce_eigen(decomp: &EigenDecomposition, q: &RateMatrix, w: &PairWeights, acc: &mut EsceAccumulator) -> Result<(), EsceError> {
    check_dims(q, w, acc)?;
    check_eigen(decomp)?;
    let n = q.dim();
    let t = w.interval();
    let u = &decomp.right_vectors;
    let v = &decomp.inverse_vectors;
    let p = eigen_transition_matrix(decomp, t);
    let f = w.scaled_by(&p)?;
    if f.iter().all(|x| *x == 0.0) {
        return Ok(());
    }
    let fc = f.map(|x| Complex64::new(x, 0.0));
    let b = u.transpose() * fc * v.transpose();
    let psi = psi_matrix(&decomp.eigenvalues, t);
    let pb = psi.component_mul(&b);

    let hadamard = |i: usize, j: usize| -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for pp in 0..n {
            let vpi = v[(pp, i)];
            for qq in 0..n {
                s += vpi * u[(j, qq)] * pb[(pp, qq)];
            }
        }
        s
    };

    let mut durations = vec![0.0; n];
    for (i, d) in durations.iter_mut().enumerate() {
        *d = real_part(hadamard(i, i), "duration")?;
    }
    let mut transitions = Vec::new();
    for (i, j) in q.edge_list() {
        let rate = q.rate(i, j);
        if rate == 0.0 {
            continue;
        }
        transitions.push((i, j, rate * real_part(hadamard(i, j), "transition count")?));
    }
    let scale = NEGATIVE_TOL * (w.total() * t).max(1.0);
    if durations.iter().any(|d| *d < -scale) || transitions.iter().any(|(_, _, x)| *x < -scale) {
        return Err(EsceError::EigenUnstable("negative expectation from spectral form".into()));
    }
    for (i, d) in durations.into_iter().enumerate() {
        acc.expected_durations[i] += d;
    }
    for (i, j, x) in transitions {
        acc.expected_transitions[(i, j)] += x;
    }
    acc.weighted_time += w.total() * t;
    Ok(())
}

/// Per-iteration state shared by every interval: the power table for
/// uniformization or the eigendecomposition for the spectral method.
#[derive(Debug, Clone)]
pub enum EsceContext {
    Expm,
    Unif(RPowers),
    Eigen(EigenDecomposition),
}

impl EsceContext {
    pub fn prepare(q: &RateMatrix, method: EsceMethod, max_interval: f64) -> Result<Self, EsceError> {
        match method {
            EsceMethod::Expm => Ok(Self::Expm),
            EsceMethod::Unif => Ok(Self::Unif(RPowers::new(q, max_interval, DEFAULT_TRUNCATION_CAP)?)),
            EsceMethod::Eigen => {
                let d = matexp::eig(q.rates(), true)?;
                check_eigen(&d)?;
                Ok(Self::Eigen(d))
            }
        }
    }

    pub fn method(&self) -> EsceMethod {
        match self {
            Self::Expm => EsceMethod::Expm,
            Self::Unif(_) => EsceMethod::Unif,
            Self::Eigen(_) => EsceMethod::Eigen,
        }
    }

    pub fn accumulate(&mut self, q: &RateMatrix, w: &PairWeights, acc: &mut EsceAccumulator) -> Result<(), EsceError> {
        match self {
            Self::Expm => esce_expm(q, w, acc),
            Self::Unif(p) => esce_unif(q, w, acc, p),
            Self::Eigen(d) => esce_eigen(d, q, w, acc),
        }
    }
}

/// `E[τ_i | s(0)=k, s(t)=l]` for every `i`, skipping transition counts.
pub fn conditional_durations(q: &RateMatrix, k: usize, l: usize, t: f64, method: EsceMethod) -> Result<DVector<f64>, EsceError> {
    let n = q.dim();
    if !(t > 0.0 && t.is_finite()) {
        return Err(EsceError::InvalidInterval(t));
    }
    if k >= n || l >= n {
        return Err(EsceError::InvalidWeights(format!("pair ({k}, {l}) out of range for dim {n}")));
    }
    match method {
        EsceMethod::Expm => {
            let p = matexp::expm(&(q.rates() * t))?;
            let pkl = p[(k, l)];
            if !(pkl >= MIN_PROBABILITY) {
                return Err(EsceError::DegenerateTransition { k, l, p: pkl });
            }
            let mut out = DVector::zeros(n);
            for i in 0..n {
                out[i] = matexp::vanloan_integral(q.rates(), &unit_pair(n, i, i), t)?[(k, l)] / pkl;
            }
            Ok(out)
        }
        EsceMethod::Unif => Ok(unif_single_pair(q, k, l, t, DEFAULT_TRUNCATION_CAP)?.0),
        EsceMethod::Eigen => {
            let d = matexp::eig(q.rates(), true)?;
            check_eigen(&d)?;
            let u = &d.right_vectors;
            let v = &d.inverse_vectors;
            let pkl = eigen_transition_matrix(&d, t)[(k, l)];
            if !(pkl >= MIN_PROBABILITY) {
                return Err(EsceError::DegenerateTransition { k, l, p: pkl });
            }
            let psi = psi_matrix(&d.eigenvalues, t);
            // left_p = U_kp, right_q = V_ql.
            let mut out = DVector::zeros(n);
            for i in 0..n {
                let mut s = Complex64::new(0.0, 0.0);
                for pp in 0..n {
                    let lp = u[(k, pp)] * v[(pp, i)];
                    for qq in 0..n {
                        s += lp * psi[(pp, qq)] * u[(i, qq)] * v[(qq, l)];
                    }
                }
                let x = real_part(s / pkl, "duration")?;
                if x < -NEGATIVE_TOL * t.max(1.0) {
                    return Err(EsceError::EigenUnstable(format!("negative duration {x:e}")));
                }
                out[i] = x.max(0.0);
            }
            Ok(out)
        }
    }
}

/// All conditional expectations for one interval length.
///
/// `durations[i][(k, l)] = E[τ_i | k, l, t]` and
/// `transitions[(i, j)][(k, l)] = E[n_ij | k, l, t]` (stored at `i·dim + j`).
/// Unreachable pairs hold `NaN`.
#[derive(Debug, Clone)]
pub struct EndStateTable {
    pub dim: usize,
    pub t: f64,
    pub durations: Vec<DMatrix<f64>>,
    pub transitions: Vec<DMatrix<f64>>,
}

impl EndStateTable {
    pub fn duration(&self, i: usize, k: usize, l: usize) -> f64 {
        self.durations[i][(k, l)]
    }

    pub fn transition(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.transitions[i * self.dim + j][(k, l)]
    }

    pub fn reachable(&self, k: usize, l: usize) -> bool {
        !self.durations[0][(k, l)].is_nan()
    }
}

/// Evaluate the table by running the chosen method on every reachable
/// one-hot weight.
pub fn end_state_expectations(q: &RateMatrix, t: f64, method: EsceMethod) -> Result<EndStateTable, EsceError> {
    let n = q.dim();
    let p = matexp::expm(&(q.rates() * t))?;
    let mut ctx = EsceContext::prepare(q, method, t)?;
    let mut durations = vec![DMatrix::from_element(n, n, f64::NAN); n];
    let mut transitions = vec![DMatrix::from_element(n, n, f64::NAN); n * n];
    for k in 0..n {
        for l in 0..n {
            if p[(k, l)] < 1e-200 {
                continue;
            }
            let w = PairWeights::hard(n, k, l, t)?;
            let mut acc = EsceAccumulator::new(n);
            ctx.accumulate(q, &w, &mut acc)?;
            for i in 0..n {
                durations[i][(k, l)] = acc.expected_durations[i];
                for j in 0..n {
                    transitions[i * n + j][(k, l)] = acc.expected_transitions[(i, j)];
                }
            }
        }
    }
    Ok(EndStateTable { dim: n, t, durations, transitions })
}
