//! State-trajectory decoding.
//!
//! Given end states `(a, b)` and a duration `T`, [`ssa_search`] finds the
//! most probable state sequence with dwell times marginalised out, the dwell
//! routines give expected time in each position of a fixed sequence, and
//! [`viterbi_ssae`] strings these together across observation intervals. The
//! Perkins routines give the joint maximum-likelihood alternative.
//!
//! A fixed sequence `G = (s_1..s_n)` is analysed through its auxiliary chain:
//! position `i` has holding rate `q_{s_i}` and can only move to `i + 1`.
//! `(e^{Q̂t})_{1,n}` is the probability of having made exactly `n − 1` jumps
//! along `G` by time `t`.

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cthmm::{self, CthmmError, CthmmModel, ObservationSequence};
use crate::ctmc::{CtmcError, RateMatrix};
use crate::ddouble::Dd;
use crate::esce::{self, poisson_pmf, truncation_point, EsceError, EsceMethod};
use crate::matexp::{self, MatexpError};

/// Rates closer than `DISTINCT_TOL · max q` count as repeated.
pub const DISTINCT_TOL: f64 = 1e-6;
/// Probabilities in `[-PROB_CLAMP, 0)` are round-off and read as zero.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("rates are not pairwise distinct")]
    RatesNotDistinct,
    #[error("state {end} is unreachable from {start}")]
    Unreachable { start: usize, end: usize },
    #[error("search budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("infeasible path: {0}")]
    InfeasiblePath(String),
    #[error("maximum-likelihood trajectories do not exist: cycle {cycle:?} has product v·q >= 1")]
    IllDefined { cycle: Vec<usize> },
    #[error("invalid time {0}")]
    InvalidTime(f64),
    #[error("no feasible path between decoded states {start} and {end} over interval {interval}")]
    IntervalUnreachable { start: usize, end: usize, interval: f64 },
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Matexp(#[from] MatexpError),
    #[error(transparent)]
    Esce(#[from] EsceError),
    #[error(transparent)]
    Cthmm(#[from] CthmmError),
}

fn check_time(t: f64) -> Result<(), DecodeError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(DecodeError::InvalidTime(t));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    if (-PROB_CLAMP..0.0).contains(&p) {
        0.0
    } else {
        p.min(1.0)
    }
}

/// Pairwise gaps all exceed `DISTINCT_TOL · max q`.
pub fn rates_distinct(q_path: &[f64]) -> bool {
    let max = q_path.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let tol = DISTINCT_TOL * max;
    for i in 0..q_path.len() {
        for j in (i + 1)..q_path.len() {
            if (q_path[i] - q_path[j]).abs() <= tol {
                return false;
            }
        }
    }
    true
}

/// Checks that `g` is non-empty, in range, and every step is a positive-rate edge.
pub fn check_path(g: &[usize], q: &RateMatrix) -> Result<(), DecodeError> {
    if g.is_empty() {
        return Err(DecodeError::InfeasiblePath("empty path".into()));
    }
    for &s in g {
        if s >= q.dim() {
            return Err(CtmcError::StateOutOfRange { state: s, dim: q.dim() }.into());
        }
    }
    for w in g.windows(2) {
        if w[0] == w[1] || !q.is_edge(w[0], w[1]) || q.rate(w[0], w[1]) <= 0.0 {
            return Err(DecodeError::InfeasiblePath(format!("no transition {} -> {}", w[0], w[1])));
        }
    }
    Ok(())
}

/// Bidiagonal generator of a fixed state sequence plus an absorbing sink.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryChain {
    pub q_path: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

impl AuxiliaryChain {
    pub fn from_rates(q_path: &[f64]) -> Self {
        let n = q_path.len();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        for (i, &q) in q_path.iter().enumerate() {
            m[(i, i)] = -q;
            m[(i, i + 1)] = q;
        }
        Self { q_path: q_path.to_vec(), matrix: m }
    }

    pub fn len(&self) -> usize {
        self.q_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_path.is_empty()
    }

    /// As a validated generator with only the bidiagonal edges allowed.
    pub fn rate_matrix(&self) -> Result<RateMatrix, CtmcError> {
        let n = self.len() + 1;
        let mask = DMatrix::from_fn(n, n, |i, j| j == i + 1);
        RateMatrix::validate(&self.matrix, Some(&mask))
    }
}

pub fn auxiliary_matrix(g: &[usize], q: &RateMatrix) -> Result<AuxiliaryChain, DecodeError> {
    check_path(g, q)?;
    let h = q.holding_params();
    Ok(AuxiliaryChain::from_rates(&g.iter().map(|&s| h[s]).collect::<Vec<_>>()))
}

/// Partial-fraction weights `A_i = ∏_{j<n} q_j / ∏_{j≠i} (q_j − q_i)`.
fn first_passage_weights(q_path: &[Dd]) -> Vec<Dd> {
    let n = q_path.len();
    let mut num = Dd::ONE;
    for q in &q_path[..n - 1] {
        num = num * *q;
    }
    (0..n)
        .map(|i| {
            let mut den = Dd::ONE;
            for j in 0..n {
                if j != i {
                    den = den * (q_path[j] - q_path[i]);
                }
            }
            num / den
        })
        .collect()
}

/// `(e^{Q̂t})_{1,n}` by partial fractions (hypoexponential law), evaluated
/// in double-double.
pub fn closed_form_first_passage(q_path: &[f64], t: f64) -> Result<f64, DecodeError> {
    check_time(t)?;
    if q_path.is_empty() {
        return Err(DecodeError::InfeasiblePath("empty path".into()));
    }
    if !rates_distinct(q_path) {
        return Err(DecodeError::RatesNotDistinct);
    }
    let qd: Vec<Dd> = q_path.iter().map(|&q| Dd::new(q)).collect();
    let weights = first_passage_weights(&qd);
    let mut sum = Dd::ZERO;
    for (w, q) in weights.iter().zip(&qd) {
        sum = sum + *w * (-*q * Dd::new(t)).exp();
    }
    Ok(clamp_prob(sum.to_f64()))
}

/// `(e^{Q̂t})_{1,n}` by a Padé matrix exponential. Handles repeated rates.
pub fn first_passage_expm(chain: &AuxiliaryChain, t: f64) -> Result<f64, DecodeError> {
    check_time(t)?;
    let n = chain.len();
    if n == 0 {
        return Err(DecodeError::InfeasiblePath("empty path".into()));
    }
    let e = matexp::expm(&(&chain.matrix * t))?;
    Ok(clamp_prob(e[(0, n - 1)]))
}

fn first_passage(q_path: &[f64], t: f64) -> Result<f64, DecodeError> {
    if rates_distinct(q_path) {
        closed_form_first_passage(q_path, t)
    } else {
        first_passage_expm(&AuxiliaryChain::from_rates(q_path), t)
    }
}

fn log_v_product(g: &[usize], q: &RateMatrix) -> f64 {
    let h = q.holding_params();
    g.windows(2).map(|w| (q.rate(w[0], w[1]) / h[w[0]]).ln()).sum()
}

/// `P_t(G) = ∏ v_{s_i s_{i+1}} · (e^{Q̂t})_{1,n}`.
pub fn path_probability(g: &[usize], q: &RateMatrix, t: f64) -> Result<f64, DecodeError> {
    let chain = auxiliary_matrix(g, q)?;
    let fp = first_passage(&chain.q_path, t)?;
    Ok(clamp_prob(log_v_product(g, q).exp() * fp))
}

/// Row vector `e_1ᵀ e^{Q̂Δ}` propagation by uniformization. Every term is
/// non-negative, so tiny probabilities keep full relative accuracy.
fn propagate(row: &[f64], q_path: &[f64], q_bar: f64, dt: f64) -> Vec<f64> {
    let n = q_path.len();
    if q_bar == 0.0 || dt == 0.0 {
        return row.to_vec();
    }
    let m_max = truncation_point(q_bar, dt) as usize + n;
    let pois = poisson_pmf(q_bar * dt, m_max);
    let stay: Vec<f64> = q_path.iter().map(|q| 1.0 - q / q_bar).collect();
    let go: Vec<f64> = q_path.iter().map(|q| q / q_bar).collect();
    let mut v = row.to_vec();
    let mut out: Vec<f64> = v.iter().map(|x| x * pois[0]).collect();
    for p in pois.iter().skip(1) {
        for j in (0..n).rev() {
            v[j] = v[j] * stay[j] + if j > 0 { v[j - 1] * go[j - 1] } else { 0.0 };
        }
        for j in 0..n {
            out[j] += p * v[j];
        }
    }
    out
}

/// Evenly spaced grid `0 = g_0 < … < g_{m−1} = T`.
pub fn uniform_grid(t: f64, points: usize) -> Vec<f64> {
    let m = points.max(2);
    (0..m).map(|i| if i == m - 1 { t } else { t * i as f64 / (m - 1) as f64 }).collect()
}

/// `P_t(G)` at every grid point (any strictly increasing grid starting at 0).
pub fn path_prob_grid(g: &[usize], q: &RateMatrix, grid: &[f64]) -> Result<Vec<f64>, DecodeError> {
    if grid.is_empty() || grid[0] != 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DecodeError::InvalidTime(grid.first().copied().unwrap_or(f64::NAN)));
    }
    let chain = auxiliary_matrix(g, q)?;
    let v = log_v_product(g, q).exp();
    Ok(prefix_grid(&chain.q_path, grid).into_iter().map(|f| clamp_prob(v * f)).collect())
}

/// First-passage values `f_G(g)` over the grid by stepping the row vector.
fn prefix_grid(q_path: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = q_path.len();
    let q_bar = q_path.iter().fold(0.0f64, |a, b| a.max(*b));
    let mut row = vec![0.0; n];
    row[0] = 1.0;
    let mut out = Vec::with_capacity(grid.len());
    let mut prev = 0.0;
    for &g in grid {
        row = propagate(&row, q_path, q_bar, g - prev);
        prev = g;
        out.push(row[n - 1]);
    }
    out
}

/// A state sequence with its probability sampled on the search grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCandidate {
    pub states: Vec<usize>,
    pub prob_grid: Vec<f64>,
    pub log_v_product: f64,
}

impl PathCandidate {
    pub fn end(&self) -> usize {
        *self.states.last().unwrap()
    }

    /// Strictly above `other` at every grid point after 0. The right end is
    /// included because it is where the winner is ranked.
    pub fn dominates(&self, other: &PathCandidate) -> bool {
        let m = self.prob_grid.len();
        m > 1 && (1..m).all(|i| self.prob_grid[i] > other.prob_grid[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsaConfig {
    /// Grid size over `[0, T]`, endpoints included.
    pub grid_points: usize,
    pub max_path_len: usize,
    pub max_frontier: usize,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self { grid_points: 101, max_path_len: 64, max_frontier: 100_000 }
    }
}

fn reachable(q: &RateMatrix, start: usize, end: usize) -> bool {
    let n = q.dim();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(s) = queue.pop_front() {
        if s == end {
            return true;
        }
        for j in 0..n {
            if !seen[j] && j != s && q.rate(s, j) > 0.0 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    false
}

struct SearchState {
    holding: Vec<f64>,
    grid: Vec<f64>,
}

impl SearchState {
    fn extend(&self, parent: &PathCandidate, next: usize, q: &RateMatrix) -> PathCandidate {
        let mut states = parent.states.clone();
        let from = parent.end();
        states.push(next);
        let q_path: Vec<f64> = states.iter().map(|&s| self.holding[s]).collect();
        let log_v = parent.log_v_product + (q.rate(from, next) / self.holding[from]).ln();
        let v = log_v.exp();
        let prob_grid = prefix_grid(&q_path, &self.grid).into_iter().map(|f| clamp_prob(v * f)).collect();
        PathCandidate { states, prob_grid, log_v_product: log_v }
    }
}

/// Result of [`ssa_search`]: the winner plus every surviving candidate.
#[derive(Debug, Clone)]
pub struct SsaResult {
    pub best: PathCandidate,
    /// `P_T` of the winner.
    pub probability: f64,
    pub survivors: Vec<PathCandidate>,
    pub levels: usize,
}

/// Dominance-pruned breadth-first search for the most probable state
/// sequence from `start` to `end` within total time `t`.
///
/// Each level extends every frontier path by one jump. A new path is dropped
/// when another path with the same last state is strictly more probable at
/// every grid point in `(0, T]`; extensions of a dominated path stay dominated,
/// so nothing reachable from it is lost.
pub fn ssa_search(q: &RateMatrix, start: usize, end: usize, t: f64, config: &SsaConfig) -> Result<SsaResult, DecodeError> {
    check_time(t)?;
    if t == 0.0 {
        return Err(DecodeError::InvalidTime(t));
    }
    for s in [start, end] {
        if s >= q.dim() {
            return Err(CtmcError::StateOutOfRange { state: s, dim: q.dim() }.into());
        }
    }
    if !reachable(q, start, end) {
        return Err(DecodeError::Unreachable { start, end });
    }
    let ctx = SearchState { holding: q.holding_params(), grid: uniform_grid(t, config.grid_points) };
    let root = PathCandidate {
        states: vec![start],
        prob_grid: ctx.grid.iter().map(|g| (-ctx.holding[start] * g).exp()).collect(),
        log_v_product: 0.0,
    };
    let n = q.dim();
    let mut archive: Vec<Vec<PathCandidate>> = vec![Vec::new(); n];
    archive[start].push(root.clone());
    let mut frontier = vec![root];
    let mut levels = 0;
    while !frontier.is_empty() {
        if levels >= config.max_path_len {
            return Err(DecodeError::BudgetExceeded(format!("paths still growing at {levels} jumps")));
        }
        levels += 1;
        let mut fresh: Vec<Vec<PathCandidate>> = vec![Vec::new(); n];
        let mut count = 0;
        for c in &frontier {
            let from = c.end();
            for j in 0..n {
                if j == from || q.rate(from, j) <= 0.0 {
                    continue;
                }
                fresh[j].push(ctx.extend(c, j, q));
                count += 1;
            }
        }
        if count > config.max_frontier {
            return Err(DecodeError::BudgetExceeded(format!("{count} candidates at level {levels}")));
        }
        let mut next = Vec::new();
        for (s, group) in fresh.into_iter().enumerate() {
            let keep: Vec<bool> = group
                .iter()
                .enumerate()
                .map(|(a, cand)| {
                    !archive[s].iter().any(|o| o.dominates(cand)) && !group.iter().enumerate().any(|(b, o)| a != b && o.dominates(cand))
                })
                .collect();
            let survivors: Vec<PathCandidate> = group.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect();
            archive[s].retain(|old| !survivors.iter().any(|c| c.dominates(old)));
            archive[s].extend(survivors.iter().cloned());
            next.extend(survivors);
        }
        next.sort_by(|a, b| a.states.cmp(&b.states));
        frontier = next;
    }

    let mut best: Option<(f64, PathCandidate)> = None;
    for c in &archive[end] {
        let p = path_probability(&c.states, q, t)?;
        let better = match &best {
            None => true,
            Some((bp, bc)) => p > *bp || (p == *bp && c.states < bc.states),
        };
        if better {
            best = Some((p, c.clone()));
        }
    }
    let (probability, best) = best.ok_or(DecodeError::Unreachable { start, end })?;
    let survivors = archive.into_iter().flatten().collect();
    Ok(SsaResult { best, probability, survivors, levels })
}

/// Coefficients of the dwell closed form: `a[k][i]` for `i ≤ k` and
/// `b[k][j]` for `j ≥ k` (0-based), from the product recursions.
#[derive(Debug, Clone)]
pub struct DwellCoefficients {
    pub a: Vec<Vec<Dd>>,
    pub b: Vec<Vec<Dd>>,
}

impl DwellCoefficients {
    pub fn a(&self, k: usize, i: usize) -> f64 {
        self.a[k][i].to_f64()
    }

    pub fn b(&self, k: usize, j: usize) -> f64 {
        self.b[k][j].to_f64()
    }
}

/// `a_{k,i} = a_{k−1,i} q_{k−1}/(q_k − q_i)` and
/// `b_{k,j} = b_{k+1,j} q_k/(q_k − q_j)`, with the diagonal terms
/// `a_{k,k}`, `b_{k,k}` formed from their defining products.
pub fn dwell_coefficients(q_path: &[f64]) -> Result<DwellCoefficients, DecodeError> {
    if q_path.is_empty() {
        return Err(DecodeError::InfeasiblePath("empty path".into()));
    }
    if !rates_distinct(q_path) {
        return Err(DecodeError::RatesNotDistinct);
    }
    let n = q_path.len();
    let q: Vec<Dd> = q_path.iter().map(|&x| Dd::new(x)).collect();
    let mut a = vec![vec![Dd::ZERO; n]; n];
    for k in 0..n {
        for i in 0..k {
            a[k][i] = a[k - 1][i] * q[k - 1] / (q[k] - q[i]);
        }
        let mut v = Dd::ONE;
        for m in 0..k {
            v = v * q[m] / (q[m] - q[k]);
        }
        a[k][k] = v;
    }
    let mut b = vec![vec![Dd::ZERO; n]; n];
    for k in (0..n).rev() {
        for j in (k + 1)..n {
            b[k][j] = b[k + 1][j] * q[k] / (q[k] - q[j]);
        }
        let mut v = Dd::ONE;
        for m in (k + 1)..n {
            v = v * q[m - 1] / (q[m] - q[k]);
        }
        b[k][k] = v;
    }
    Ok(DwellCoefficients { a, b })
}

/// Expected time in each position of a fixed distinct-rate sequence,
/// conditioned on being in the last position at time `t`.
pub fn expected_dwell_closed_form(q_path: &[f64], t: f64) -> Result<Vec<f64>, DecodeError> {
    check_time(t)?;
    if t == 0.0 {
        return Err(DecodeError::InvalidTime(t));
    }
    let n = q_path.len();
    if n == 1 {
        return Ok(vec![t]);
    }
    let coef = dwell_coefficients(q_path)?;
    let q: Vec<Dd> = q_path.iter().map(|&x| Dd::new(x)).collect();
    let td = Dd::new(t);
    let e: Vec<Dd> = q.iter().map(|qi| (-*qi * td).exp()).collect();
    let denom = {
        let w = first_passage_weights(&q);
        w.iter().zip(&e).fold(Dd::ZERO, |s, (wi, ei)| s + *wi * *ei)
    };
    if !(denom.to_f64() > 0.0) {
        return Err(EsceError::DegenerateTransition { k: 0, l: n - 1, p: denom.to_f64() }.into());
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut num = td * coef.a[k][k] * coef.b[k][k] * e[k];
        for i in 0..=k {
            for j in k..n {
                if i == j {
                    continue;
                }
                let diff = (e[i] - e[j]) / (q[j] - q[i]);
                num = num + coef.a[k][i] * coef.b[k][j] * diff;
            }
        }
        out.push((num / denom).to_f64());
    }
    Ok(out)
}

/// Which route produced a dwell vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellRoute {
    ClosedForm,
    Esce(EsceMethod),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwellEstimate {
    pub dwell: Vec<f64>,
    pub route: DwellRoute,
}

/// Expected dwell times along the auxiliary chain by an ESCE method. The
/// eigen route falls back to Expm when the chain is defective or badly
/// conditioned (always the case for repeated rates).
pub fn dwell_on_chain(chain: &AuxiliaryChain, t: f64, method: EsceMethod) -> Result<DwellEstimate, DecodeError> {
    check_time(t)?;
    if t == 0.0 {
        return Err(DecodeError::InvalidTime(t));
    }
    let n = chain.len();
    let rm = chain.rate_matrix()?;
    let run = |m| esce::conditional_durations(&rm, 0, n - 1, t, m);
    let (d, used) = match run(method) {
        Err(EsceError::EigenUnstable(_)) if method == EsceMethod::Eigen => (run(EsceMethod::Expm)?, EsceMethod::Expm),
        other => (other?, method),
    };
    Ok(DwellEstimate { dwell: d.iter().take(n).copied().collect(), route: DwellRoute::Esce(used) })
}

pub fn expected_dwell_esce(g: &[usize], q: &RateMatrix, t: f64, method: EsceMethod) -> Result<DwellEstimate, DecodeError> {
    dwell_on_chain(&auxiliary_matrix(g, q)?, t, method)
}

/// Closed form when rates are distinct, otherwise the given ESCE method.
pub fn expected_dwell(g: &[usize], q: &RateMatrix, t: f64, fallback: EsceMethod) -> Result<DwellEstimate, DecodeError> {
    let chain = auxiliary_matrix(g, q)?;
    if rates_distinct(&chain.q_path) {
        return Ok(DwellEstimate { dwell: expected_dwell_closed_form(&chain.q_path, t)?, route: DwellRoute::ClosedForm });
    }
    dwell_on_chain(&chain, t, fallback)
}

/// Decoded piecewise-constant trajectory starting at `start_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedTrajectory {
    pub start_time: f64,
    pub states: Vec<usize>,
    pub dwell_times: Vec<f64>,
}

impl DecodedTrajectory {
    pub fn total_time(&self) -> f64 {
        self.dwell_times.iter().sum()
    }

    /// State at absolute time `t`; times past the end map to the last state.
    pub fn state_at(&self, t: f64) -> usize {
        let mut boundary = self.start_time;
        for (s, d) in self.states.iter().zip(&self.dwell_times) {
            boundary += d;
            if t < boundary {
                return *s;
            }
        }
        *self.states.last().unwrap()
    }

    fn push(&mut self, state: usize, dwell: f64) {
        if self.states.last() == Some(&state) {
            *self.dwell_times.last_mut().unwrap() += dwell;
        } else {
            self.states.push(state);
            self.dwell_times.push(dwell);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub ssa: SsaConfig,
    /// Dwell route for paths with repeated rates.
    pub dwell_method: EsceMethod,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { ssa: SsaConfig::default(), dwell_method: EsceMethod::Expm }
    }
}

/// Inner path and dwell times for one (start, end, interval) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalDecode {
    pub states: Vec<usize>,
    pub dwell: Vec<f64>,
}

pub fn decode_interval(q: &RateMatrix, start: usize, end: usize, tau: f64, config: &DecodeConfig) -> Result<IntervalDecode, DecodeError> {
    let res = ssa_search(q, start, end, tau, &config.ssa).map_err(|e| match e {
        DecodeError::Unreachable { .. } => DecodeError::IntervalUnreachable { start, end, interval: tau },
        other => other,
    })?;
    let dwell = expected_dwell(&res.best.states, q, tau, config.dwell_method)?.dwell;
    Ok(IntervalDecode { states: res.best.states, dwell })
}

/// Memo of interval decodes keyed by `(start, end, τ bits)`.
pub type IntervalCache = HashMap<(usize, usize, u64), IntervalDecode>;

/// Viterbi at the observations, SSA inside each interval, expected dwell
/// times along each inner path; adjacent equal states are merged.
pub fn viterbi_ssae(model: &CthmmModel, seq: &ObservationSequence, config: &DecodeConfig) -> Result<DecodedTrajectory, DecodeError> {
    let mut cache = IntervalCache::new();
    viterbi_ssae_cached(model, seq, config, &mut cache)
}

pub fn viterbi_ssae_cached(
    model: &CthmmModel,
    seq: &ObservationSequence,
    config: &DecodeConfig,
    cache: &mut IntervalCache,
) -> Result<DecodedTrajectory, DecodeError> {
    let (states, _) = cthmm::viterbi(model, seq)?;
    let keys: Vec<(usize, usize, u64)> =
        states.windows(2).zip(seq.intervals()).map(|(w, tau)| (w[0], w[1], tau.to_bits())).collect();
    let mut missing: Vec<(usize, usize, u64)> = keys.iter().filter(|k| !cache.contains_key(k)).copied().collect();
    missing.sort_unstable();
    missing.dedup();
    let solved: Vec<Result<IntervalDecode, DecodeError>> = missing
        .par_iter()
        .map(|&(a, b, bits)| decode_interval(&model.rates, a, b, f64::from_bits(bits), config))
        .collect();
    for (k, r) in missing.into_iter().zip(solved) {
        cache.insert(k, r?);
    }
    let mut out = DecodedTrajectory { start_time: seq.times[0], states: vec![states[0]], dwell_times: vec![0.0] };
    for k in &keys {
        let part = &cache[k];
        for (s, d) in part.states.iter().zip(&part.dwell) {
            out.push(*s, *d);
        }
    }
    Ok(out)
}

/// Well-definedness of maximum-likelihood trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct PerkinsCheck {
    pub well_defined: bool,
    /// Closed cycle `(c_1, …, c_m, c_1)` starting at its smallest state.
    pub witness: Option<Vec<usize>>,
}

/// No cycle may have `∏ v·q ≥ 1`, i.e. `Σ ln q_ij ≥ 0` around the cycle.
/// Found by Bellman–Ford on weights `−ln q_ij − ε`, so zero-weight cycles
/// count as ill-defined.
pub fn perkins_well_defined(q: &RateMatrix) -> PerkinsCheck {
    const EPS: f64 = 1e-12;
    let n = q.dim();
    let edges: Vec<(usize, usize, f64)> = q
        .edge_list()
        .into_iter()
        .filter(|&(i, j)| q.rate(i, j) > 0.0)
        .map(|(i, j)| (i, j, -q.rate(i, j).ln() - EPS))
        .collect();
    let mut dist = vec![0.0f64; n];
    let mut pred = vec![usize::MAX; n];
    let mut last_relaxed = None;
    for _ in 0..n {
        last_relaxed = None;
        for &(i, j, w) in &edges {
            if dist[i] + w < dist[j] {
                dist[j] = dist[i] + w;
                pred[j] = i;
                last_relaxed = Some(j);
            }
        }
        if last_relaxed.is_none() {
            break;
        }
    }
    let Some(mut x) = last_relaxed else {
        return PerkinsCheck { well_defined: true, witness: None };
    };
    for _ in 0..n {
        x = pred[x];
    }
    let mut cycle = vec![x];
    let mut y = pred[x];
    while y != x {
        cycle.push(y);
        y = pred[y];
    }
    cycle.reverse();
    let pos = cycle.iter().enumerate().min_by_key(|(_, s)| **s).map(|(i, _)| i).unwrap();
    cycle.rotate_left(pos);
    cycle.push(cycle[0]);
    PerkinsCheck { well_defined: false, witness: Some(cycle) }
}

/// All time on the slowest state of `g` (first occurrence on ties).
pub fn perkins_ml_dwell(g: &[usize], q: &RateMatrix, t: f64) -> Result<Vec<f64>, DecodeError> {
    check_path(g, q)?;
    check_time(t)?;
    let h = q.holding_params();
    let mut slowest = 0;
    for (i, &s) in g.iter().enumerate() {
        if h[s] < h[g[slowest]] {
            slowest = i;
        }
    }
    let mut out = vec![0.0; g.len()];
    out[slowest] = t;
    Ok(out)
}

/// `Σ_{i<n} ln q_{s_i s_{i+1}} − Σ_i q_{s_i} τ_i`: log-density of a fully
/// specified trajectory whose last dwell is censored at the window end.
pub fn trajectory_log_likelihood(g: &[usize], dwell: &[f64], q: &RateMatrix) -> Result<f64, DecodeError> {
    check_path(g, q)?;
    if dwell.len() != g.len() {
        return Err(DecodeError::InfeasiblePath(format!("{} states but {} dwell times", g.len(), dwell.len())));
    }
    let h = q.holding_params();
    let jumps: f64 = g.windows(2).map(|w| q.rate(w[0], w[1]).ln()).sum();
    let hold: f64 = g.iter().zip(dwell).map(|(s, d)| h[*s] * d).sum();
    Ok(jumps - hold)
}

/// Maximum over sequences of `Σ ln q_edges − t · min q` with at most
/// `max_jumps` jumps from `start` to `end`.
///
/// Dynamic program over (jumps, current state, index of the path minimum
/// among the distinct holding rates).
pub fn perkins_ml_path(q: &RateMatrix, start: usize, end: usize, t: f64, max_jumps: usize) -> Result<(Vec<usize>, f64), DecodeError> {
    check_time(t)?;
    let n = q.dim();
    for s in [start, end] {
        if s >= n {
            return Err(CtmcError::StateOutOfRange { state: s, dim: n }.into());
        }
    }
    let check = perkins_well_defined(q);
    if !check.well_defined {
        return Err(DecodeError::IllDefined { cycle: check.witness.unwrap_or_default() });
    }
    let h = q.holding_params();
    let mut levels: Vec<f64> = h.clone();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    let level_of = |x: f64| levels.iter().position(|l| *l == x).unwrap();
    let m = levels.len();
    let idx = |s: usize, lv: usize| s * m + lv;

    // score[k][state·m + level]; back[k] holds the predecessor cell.
    let mut score = vec![vec![f64::NEG_INFINITY; n * m]; max_jumps + 1];
    let mut back = vec![vec![usize::MAX; n * m]; max_jumps + 1];
    score[0][idx(start, level_of(h[start]))] = 0.0;
    for k in 1..=max_jumps {
        for s in 0..n {
            for lv in 0..m {
                let cur = score[k - 1][idx(s, lv)];
                if cur == f64::NEG_INFINITY {
                    continue;
                }
                for j in 0..n {
                    if j == s || q.rate(s, j) <= 0.0 {
                        continue;
                    }
                    let nl = lv.min(level_of(h[j]));
                    let cand = cur + q.rate(s, j).ln();
                    let cell = idx(j, nl);
                    if cand > score[k][cell] {
                        score[k][cell] = cand;
                        back[k][cell] = idx(s, lv);
                    }
                }
            }
        }
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for (k, row) in score.iter().enumerate() {
        for lv in 0..m {
            let v = row[idx(end, lv)];
            if v == f64::NEG_INFINITY {
                continue;
            }
            let total = v - t * levels[lv];
            if best.is_none_or(|(b, _, _)| total > b) {
                best = Some((total, k, lv));
            }
        }
    }
    let (total, k, lv) = best.ok_or(DecodeError::Unreachable { start, end })?;
    let mut cell = idx(end, lv);
    let mut path = vec![end];
    for kk in (1..=k).rev() {
        cell = back[kk][cell];
        path.push(cell / m);
    }
    path.reverse();
    Ok((path, total))
}

/// Time-weighted fraction of `[t_0, t_end]` on which two piecewise-constant
/// trajectories disagree, evaluated exactly at the union of breakpoints.
pub fn mismatch_fraction(decoded: &DecodedTrajectory, truth_at: impl Fn(f64) -> usize, truth_breaks: &[f64], t_end: f64) -> f64 {
    let t0 = decoded.start_time;
    let mut cuts: Vec<f64> = vec![t0, t_end];
    let mut b = t0;
    for d in &decoded.dwell_times {
        b += d;
        if b > t0 && b < t_end {
            cuts.push(b);
        }
    }
    cuts.extend(truth_breaks.iter().copied().filter(|x| *x > t0 && *x < t_end));
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut wrong = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if decoded.state_at(mid) != truth_at(mid) {
            wrong += w[1] - w[0];
        }
    }
    wrong / (t_end - t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> RateMatrix {
        RateMatrix::validate(&DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5]), None).unwrap()
    }

    fn random_q(n: usize, rng: &mut ChaCha8Rng) -> RateMatrix {
        let raw = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(0.1..2.0) });
        RateMatrix::validate(&raw, None).unwrap()
    }

    fn all_paths(n: usize, start: usize, end: usize, max_jumps: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![vec![start]];
        while let Some(p) = stack.pop() {
            if *p.last().unwrap() == end {
                out.push(p.clone());
            }
            if p.len() <= max_jumps {
                for j in 0..n {
                    if j != *p.last().unwrap() {
                        let mut e = p.clone();
                        e.push(j);
                        stack.push(e);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn first_passage_examples() {
        assert!((closed_form_first_passage(&[2.0], 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let v = closed_form_first_passage(&[1.0, 0.5], 2.0).unwrap();
        assert!((v - 2.0 * ((-1.0f64).exp() - (-2.0f64).exp())).abs() < 1e-14);
        let rep = first_passage_expm(&AuxiliaryChain::from_rates(&[1.0, 1.0]), 1.0).unwrap();
        assert!((rep - (-1.0f64).exp()).abs() < 1e-14);
        assert_eq!(first_passage_expm(&AuxiliaryChain::from_rates(&[1.0, 2.0]), 0.0).unwrap(), 0.0);
        assert!(matches!(closed_form_first_passage(&[1.0, 1.0], 1.0), Err(DecodeError::RatesNotDistinct)));
    }

    #[test]
    fn closed_form_matches_expm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(2..=10);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
            if !rates_distinct(&q) {
                continue;
            }
            for t in [0.1, 1.0, 10.0] {
                let a = closed_form_first_passage(&q, t).unwrap();
                let b = first_passage_expm(&AuxiliaryChain::from_rates(&q), t).unwrap();
                assert!((a - b).abs() < 1e-9, "n={n} t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn auxiliary_examples() {
        let c = auxiliary_matrix(&[0, 1], &toy()).unwrap();
        assert_eq!(c.matrix, DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 0.0, -0.5, 0.5, 0.0, 0.0, 0.0]));
        assert_eq!(auxiliary_matrix(&[0, 1, 0], &toy()).unwrap().q_path, vec![1.0, 0.5, 1.0]);
        for i in 0..3 {
            assert_eq!(c.matrix.row(i).sum(), 0.0);
        }
        assert!(auxiliary_matrix(&[0, 0], &toy()).is_err());
    }

    #[test]
    fn path_probability_examples() {
        let q = toy();
        assert!((path_probability(&[1], &q, 3.0).unwrap() - (-1.5f64).exp()).abs() < 1e-15);
        let v = path_probability(&[0, 1], &q, 2.0).unwrap();
        assert!((v - 0.465_088_32).abs() < 1e-8);
    }

    #[test]
    fn paths_sum_below_transition_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_q(3, &mut rng);
        let p = q.transition_matrix(1.0).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                let s: f64 = all_paths(3, k, l, 6).iter().map(|g| path_probability(g, &q, 1.0).unwrap()).sum();
                assert!(s <= p[(k, l)] + 1e-6);
                assert!(s > 0.95 * p[(k, l)]);
            }
        }
    }

    #[test]
    fn grid_matches_pointwise_and_ode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_q(3, &mut rng);
        let g = vec![0, 2, 1, 2];
        let grid = uniform_grid(2.0, 201);
        let vals = path_prob_grid(&g, &q, &grid).unwrap();
        assert_eq!(vals[0], 0.0);
        for (x, v) in grid.iter().zip(&vals).step_by(25) {
            assert!((path_probability(&g, &q, *x).unwrap() - v).abs() < 1e-12);
        }
        let prefix = path_prob_grid(&g[..3], &q, &grid).unwrap();
        let h = q.holding_params();
        let dg = grid[1] - grid[0];
        for i in 1..grid.len() - 1 {
            let fd = (vals[i + 1] - vals[i - 1]) / (2.0 * dg);
            let rhs = q.rate(1, 2) * prefix[i] - h[2] * vals[i];
            assert!((fd - rhs).abs() < 5.0 * dg * dg, "i={i}");
        }
        let single = path_prob_grid(&[1], &q, &grid).unwrap();
        assert!((single[50] - (-h[1] * grid[50]).exp()).abs() < 1e-15);
    }

    #[test]
    fn toy_ssa_path() {
        let res = ssa_search(&toy(), 0, 1, 12.0, &SsaConfig::default()).unwrap();
        assert_eq!(res.best.states, vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn tiny_horizon_stays() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_q(3, &mut rng);
        for k in 0..3 {
            assert_eq!(ssa_search(&q, k, k, 1e-3, &SsaConfig::default()).unwrap().best.states, vec![k]);
        }
    }

    #[test]
    fn ssa_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let q = random_q(3, &mut rng);
            for (k, l) in [(0, 2), (1, 1), (2, 0)] {
                let res = ssa_search(&q, k, l, 1.0, &SsaConfig::default()).unwrap();
                let mut best = (f64::NEG_INFINITY, vec![]);
                for g in all_paths(3, k, l, 8) {
                    let p = path_probability(&g, &q, 1.0).unwrap();
                    if p > best.0 || (p == best.0 && g < best.1) {
                        best = (p, g);
                    }
                }
                assert_eq!(res.best.states, best.1);
                for other in &res.survivors {
                    if other.end() == l && other.states != res.best.states {
                        assert!(!other.dominates(&res.best));
                    }
                }
            }
        }
    }

    #[test]
    fn ssa_errors() {
        let raw = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]);
        let q = RateMatrix::validate(&raw, None).unwrap();
        assert!(matches!(ssa_search(&q, 1, 0, 1.0, &SsaConfig::default()), Err(DecodeError::Unreachable { .. })));
        let cfg = SsaConfig { max_path_len: 2, ..Default::default() };
        assert!(matches!(ssa_search(&toy(), 0, 1, 12.0, &cfg), Err(DecodeError::BudgetExceeded(_))));
    }

    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn dwell_closed_form_matches_quadrature() {
        // Position k: ∫ P_{1k}(u) P_{kn}(t−u) du / P_{1n}(t) with the
        // two sub-chains exponentiated independently.
        let q = [1.0, 3.0];
        let t = 2.0;
        let full = AuxiliaryChain::from_rates(&q);
        let got = expected_dwell_closed_form(&q, t).unwrap();
        let p1n = matexp::expm(&(&full.matrix * t)).unwrap()[(0, 1)];
        for (k, g) in got.iter().enumerate() {
            let mut s = 0.0;
            for (x, w) in gauss_legendre(64) {
                let u = 0.5 * t * (x + 1.0);
                let a = matexp::expm(&(&full.matrix * u)).unwrap()[(0, k)];
                let b = matexp::expm(&(&full.matrix * (t - u))).unwrap()[(k, 1)];
                s += 0.5 * t * w * a * b;
            }
            assert!((g - s / p1n).abs() < 1e-8, "k={k}: {g} vs {}", s / p1n);
        }
        assert!((got.iter().sum::<f64>() - t).abs() < 1e-12);
    }

    #[test]
    fn recursions_match_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..=12);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let c = dwell_coefficients(&q).unwrap();
            for k in 0..n {
                for i in 0..=k {
                    let num: f64 = q[..k].iter().product();
                    let den: f64 = (0..=k).filter(|&m| m != i).map(|m| q[m] - q[i]).product();
                    let direct = num / den;
                    assert!((c.a(k, i) - direct).abs() <= 1e-10 * direct.abs().max(1e-300));
                }
                for j in k..n {
                    let num: f64 = q[k..n - 1].iter().product();
                    let den: f64 = (k..n).filter(|&m| m != j).map(|m| q[m] - q[j]).product();
                    let direct = num / den;
                    assert!((c.b(k, j) - direct).abs() <= 1e-10 * direct.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn dwell_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let n = rng.random_range(1..=8);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let t: f64 = q.iter().map(|x| 1.0 / x).sum();
            let cf = expected_dwell_closed_form(&q, t).unwrap();
            assert!((cf.iter().sum::<f64>() - t).abs() < 1e-9 * t);
            let chain = AuxiliaryChain::from_rates(&q);
            for m in [EsceMethod::Expm, EsceMethod::Unif, EsceMethod::Eigen] {
                let d = dwell_on_chain(&chain, t, m).unwrap();
                for (a, b) in cf.iter().zip(&d.dwell) {
                    assert!((a - b).abs() < 1e-6, "{m}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn repeated_rates_fall_back() {
        let q = toy();
        let g = [0, 1, 0, 1, 0, 1, 0, 1];
        let d = expected_dwell(&g, &q, 12.0, EsceMethod::Eigen).unwrap();
        assert_eq!(d.route, DwellRoute::Esce(EsceMethod::Expm));
        assert!((d.dwell.iter().sum::<f64>() - 12.0).abs() < 1e-6);
        let u = expected_dwell_esce(&g, &q, 12.0, EsceMethod::Unif).unwrap();
        for (a, b) in d.dwell.iter().zip(&u.dwell) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(expected_dwell(&[1], &q, 3.0, EsceMethod::Expm).unwrap().dwell, vec![3.0]);
    }

    #[test]
    fn perkins_examples() {
        assert!(perkins_well_defined(&toy()).well_defined);
        let q = RateMatrix::validate(&DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 1.0, -1.0]), None).unwrap();
        let c = perkins_well_defined(&q);
        assert!(!c.well_defined);
        assert_eq!(c.witness, Some(vec![0, 1, 0]));
        assert!(perkins_well_defined(&RateMatrix::zeros(1)).well_defined);
        // Product exactly one is classified ill-defined.
        let q = RateMatrix::validate(&DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 0.5, -0.5]), None).unwrap();
        assert!(!perkins_well_defined(&q).well_defined);

        assert_eq!(perkins_ml_dwell(&[0, 1], &toy(), 2.0).unwrap(), vec![0.0, 2.0]);
        assert_eq!(perkins_ml_dwell(&[1], &toy(), 2.0).unwrap(), vec![2.0]);
        assert_eq!(perkins_ml_dwell(&[1, 0, 1], &toy(), 2.0).unwrap(), vec![2.0, 0.0, 0.0]);

        let (p, ll) = perkins_ml_path(&toy(), 1, 1, 3.0, 0).unwrap();
        assert_eq!(p, vec![1]);
        assert!((ll + 1.5).abs() < 1e-15);
    }

    #[test]
    fn perkins_path_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tested = 0;
        while tested < 5 {
            let q = random_q(3, &mut rng);
            if !perkins_well_defined(&q).well_defined {
                continue;
            }
            tested += 1;
            let h = q.holding_params();
            for (s, e) in [(0, 2), (1, 1)] {
                for k in 0..=5 {
                    if all_paths(3, s, e, k).is_empty() {
                        assert!(matches!(perkins_ml_path(&q, s, e, 1.5, k), Err(DecodeError::Unreachable { .. })));
                        continue;
                    }
                    let (path, ll) = perkins_ml_path(&q, s, e, 1.5, k).unwrap();
                    let score = |g: &[usize]| {
                        let jumps: f64 = g.windows(2).map(|w| q.rate(w[0], w[1]).ln()).sum();
                        jumps - 1.5 * g.iter().map(|x| h[*x]).fold(f64::INFINITY, f64::min)
                    };
                    let best = all_paths(3, s, e, k).iter().map(|g| score(g)).fold(f64::NEG_INFINITY, f64::max);
                    assert!((ll - best).abs() < 1e-12);
                    assert!((score(&path) - ll).abs() < 1e-12);
                    assert!(path.len() <= k + 1);
                }
            }
        }
    }

    #[test]
    fn ml_dwell_beats_perturbation() {
        let q = toy();
        let g = [0, 1, 0];
        let d = perkins_ml_dwell(&g, &q, 4.0).unwrap();
        let base = trajectory_log_likelihood(&g, &d, &q).unwrap();
        for other in [0, 2] {
            let mut p = d.clone();
            p[1] -= 1e-3;
            p[other] += 1e-3;
            assert!(trajectory_log_likelihood(&g, &p, &q).unwrap() < base);
        }
    }

    #[test]
    fn decoded_trajectory_merges() {
        let mut d = DecodedTrajectory { start_time: 1.0, states: vec![0], dwell_times: vec![0.0] };
        d.push(0, 0.5);
        d.push(1, 0.25);
        d.push(1, 0.25);
        assert_eq!(d.states, vec![0, 1]);
        assert_eq!(d.dwell_times, vec![0.5, 0.5]);
        assert_eq!(d.state_at(1.6), 1);
        let truth = |t: f64| if t < 1.75 { 0 } else { 1 };
        let f = mismatch_fraction(&d, truth, &[1.75], 2.0);
        assert!((f - 0.25).abs() < 1e-12);
    }
}
