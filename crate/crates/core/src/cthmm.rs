//! Continuous-time HMM: model, inference on the equivalent discrete
//! time-inhomogeneous HMM, and the EM outer loop.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{CtmcError, RateMatrix, Trajectory};
use crate::esce::{EsceAccumulator, EsceContext, EsceError, EsceMethod, PairWeights};
use crate::matexp::{self, MatexpError};

/// Smallest standard deviation produced by emission re-estimation.
pub const MIN_STD: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum CthmmError {
    #[error("no usable data: {0}")]
    NoData(String),
    #[error("all state paths have zero probability (sequence '{0}')")]
    ZeroLikelihood(String),
    #[error("log-likelihood decreased at iteration {iteration}: {previous} -> {current}")]
    NonIncreasingLikelihood { iteration: usize, previous: f64, current: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid observation sequence: {0}")]
    InvalidSequence(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Esce(#[from] EsceError),
    #[error(transparent)]
    Matexp(#[from] MatexpError),
}

/// Diagonal-covariance Gaussian emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, CthmmError> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(CthmmError::InvalidModel(format!("mean has {} entries, std has {}", mean.len(), std.len())));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CthmmError::InvalidModel("emission parameters must be finite with std > 0".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn scalar(mean: f64, std: f64) -> Result<Self, CthmmError> {
        Self::new(vec![mean], vec![std])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, o: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, m), sd) in o.iter().zip(&self.mean).zip(&self.std) {
            let z = (x - m) / sd;
            s += -0.5 * LN_2PI - sd.ln() - 0.5 * z * z;
        }
        s
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| Normal::new(*m, *s).expect("validated std").sample(rng))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CthmmModel {
    pub rates: RateMatrix,
    pub emissions: Vec<Gaussian>,
    pub initial: Vec<f64>,
}

impl CthmmModel {
    pub fn new(rates: RateMatrix, emissions: Vec<Gaussian>, initial: Vec<f64>) -> Result<Self, CthmmError> {
        let n = rates.dim();
        if emissions.len() != n || initial.len() != n {
            return Err(CthmmError::InvalidModel(format!(
                "{n} states but {} emissions and {} initial probabilities",
                emissions.len(),
                initial.len()
            )));
        }
        let d = emissions[0].dim();
        if emissions.iter().any(|e| e.dim() != d) {
            return Err(CthmmError::InvalidModel("emissions differ in dimension".into()));
        }
        for e in &emissions {
            Gaussian::new(e.mean.clone(), e.std.clone())?;
        }
        if initial.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CthmmError::InvalidModel("initial probabilities must be non-negative".into()));
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CthmmError::InvalidModel(format!("initial probabilities sum to {total}")));
        }
        Ok(Self { rates, emissions, initial })
    }

    /// Uniform initial distribution.
    pub fn with_uniform_initial(rates: RateMatrix, emissions: Vec<Gaussian>) -> Result<Self, CthmmError> {
        let n = rates.dim();
        Self::new(rates, emissions, vec![1.0 / n as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.rates.dim()
    }

    pub fn observation_dim(&self) -> usize {
        self.emissions[0].dim()
    }

    fn log_emissions(&self, o: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.emissions.iter().map(|e| e.log_density(o)))
    }

    fn check_sequence(&self, seq: &ObservationSequence) -> Result<(), CthmmError> {
        if seq.values.iter().any(|v| v.len() != self.observation_dim()) {
            return Err(CthmmError::InvalidSequence(format!(
                "sequence '{}' has measurements of the wrong dimension (expected {})",
                seq.subject_id,
                self.observation_dim()
            )));
        }
        Ok(())
    }
}

/// Noisy measurements at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ObservationSequence {
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, CthmmError> {
        let subject_id = subject_id.into();
        if times.is_empty() || times.len() != values.len() {
            return Err(CthmmError::InvalidSequence(format!(
                "'{subject_id}': {} times but {} measurements",
                times.len(),
                values.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CthmmError::InvalidSequence(format!("'{subject_id}': times must be finite and strictly increasing")));
        }
        let d = values[0].len();
        if d == 0 || values.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
            return Err(CthmmError::InvalidSequence(format!("'{subject_id}': measurements must be finite and equal-length")));
        }
        Ok(Self { subject_id, times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn intervals(&self) -> impl Iterator<Item = f64> + '_ {
        self.times.windows(2).map(|w| w[1] - w[0])
    }

    pub fn span(&self) -> f64 {
        self.times.last().unwrap() - self.times[0]
    }
}

/// Sample measurements of a trajectory (which starts at `times[0]`).
pub fn observe_trajectory<R: Rng + ?Sized>(
    model: &CthmmModel,
    traj: &Trajectory,
    times: &[f64],
    subject_id: &str,
    rng: &mut R,
) -> Result<(ObservationSequence, Vec<usize>), CthmmError> {
    let t0 = times.first().copied().unwrap_or(0.0);
    let states: Vec<usize> = times.iter().map(|t| traj.state_at(t - t0)).collect();
    let values = states.iter().map(|&s| model.emissions[s].sample(rng)).collect();
    Ok((ObservationSequence::new(subject_id, times.to_vec(), values)?, states))
}

/// Draw a subject: initial state from `π`, a trajectory, and measurements.
pub fn simulate_subject(
    model: &CthmmModel,
    times: &[f64],
    subject_id: &str,
    seed: u64,
) -> Result<(ObservationSequence, Trajectory), CthmmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut start = model.dim() - 1;
    for (i, p) in model.initial.iter().enumerate() {
        acc += p;
        if u < acc {
            start = i;
            break;
        }
    }
    let span = times.last().unwrap() - times[0];
    let traj = model.rates.sample_trajectory_with(start, span.max(f64::MIN_POSITIVE), &mut rng)?;
    let (seq, _) = observe_trajectory(model, &traj, times, subject_id, &mut rng)?;
    Ok((seq, traj))
}

fn interval_key(tau: f64) -> u64 {
    tau.to_bits()
}

/// `P(τ)` for every distinct interval length, keyed by its bit pattern.
#[derive(Debug, Clone, Default)]
pub struct IntervalTransitions {
    map: BTreeMap<u64, DMatrix<f64>>,
}

impl IntervalTransitions {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, tau: f64) -> Option<&DMatrix<f64>> {
        self.map.get(&interval_key(tau))
    }

    pub fn intervals(&self) -> impl Iterator<Item = f64> + '_ {
        self.map.keys().map(|k| f64::from_bits(*k))
    }
}

pub fn interval_transitions(model: &CthmmModel, sequences: &[ObservationSequence]) -> Result<IntervalTransitions, CthmmError> {
    let mut keys: Vec<u64> = sequences.iter().flat_map(|s| s.intervals().map(interval_key)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mats: Vec<Result<DMatrix<f64>, MatexpError>> =
        keys.par_iter().map(|k| matexp::expm(&(model.rates.rates() * f64::from_bits(*k)))).collect();
    let mut map = BTreeMap::new();
    for (k, m) in keys.into_iter().zip(mats) {
        map.insert(k, m?);
    }
    Ok(IntervalTransitions { map })
}

/// Posterior quantities from one forward-backward pass.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// `p(s(t_v)=k, s(t_{v+1})=l | O)` per interval.
    pub pair_weights: Vec<PairWeights>,
    /// `p(s(t_v)=k | O)` per observation.
    pub state_probs: Vec<DVector<f64>>,
    pub log_likelihood: f64,
}

pub fn forward_backward(model: &CthmmModel, seq: &ObservationSequence) -> Result<Posterior, CthmmError> {
    let cache = interval_transitions(model, std::slice::from_ref(seq))?;
    forward_backward_with(model, seq, &cache)
}

fn lookup<'a>(cache: &'a IntervalTransitions, tau: f64) -> Result<&'a DMatrix<f64>, CthmmError> {
    cache.get(tau).ok_or_else(|| CthmmError::InvalidSequence(format!("interval {tau} missing from transition cache")))
}

/// Scaled forward-backward; the log-likelihood is accumulated in log space
/// with a per-observation max shift on the emission densities.
pub fn forward_backward_with(model: &CthmmModel, seq: &ObservationSequence, cache: &IntervalTransitions) -> Result<Posterior, CthmmError> {
    model.check_sequence(seq)?;
    let n = model.dim();
    let v_len = seq.len();
    let zero = || CthmmError::ZeroLikelihood(seq.subject_id.clone());

    let mut b = Vec::with_capacity(v_len);
    let mut shifts = Vec::with_capacity(v_len);
    for o in &seq.values {
        let le = model.log_emissions(o);
        let m = le.max();
        if !m.is_finite() {
            return Err(zero());
        }
        b.push(le.map(|x| (x - m).exp()));
        shifts.push(m);
    }
    let trans: Vec<&DMatrix<f64>> = seq.intervals().map(|tau| lookup(cache, tau)).collect::<Result<_, _>>()?;

    let mut alpha = Vec::with_capacity(v_len);
    let mut scale = Vec::with_capacity(v_len);
    let mut a0 = DVector::from_iterator(n, model.initial.iter().copied()).component_mul(&b[0]);
    let c0 = a0.sum();
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(zero());
    }
    a0 /= c0;
    let mut log_likelihood = c0.ln() + shifts[0];
    alpha.push(a0);
    scale.push(c0);
    for v in 1..v_len {
        let mut a = (trans[v - 1].transpose() * &alpha[v - 1]).component_mul(&b[v]);
        let c = a.sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(zero());
        }
        a /= c;
        log_likelihood += c.ln() + shifts[v];
        alpha.push(a);
        scale.push(c);
    }

    let mut beta = vec![DVector::from_element(n, 1.0); v_len];
    for v in (0..v_len.saturating_sub(1)).rev() {
        let next = beta[v + 1].component_mul(&b[v + 1]) / scale[v + 1];
        beta[v] = trans[v] * next;
    }

    let state_probs: Vec<DVector<f64>> = alpha
        .iter()
        .zip(&beta)
        .map(|(a, bt)| {
            let g = a.component_mul(bt);
            let s = g.sum();
            g / s
        })
        .collect();

    let mut pair_weights = Vec::with_capacity(v_len.saturating_sub(1));
    for (v, tau) in seq.intervals().enumerate() {
        let right = beta[v + 1].component_mul(&b[v + 1]) / scale[v + 1];
        let p = trans[v];
        let mut xi = DMatrix::from_fn(n, n, |k, l| alpha[v][k] * p[(k, l)] * right[l]);
        let s = xi.sum();
        if !(s > 0.0) {
            return Err(zero());
        }
        xi /= s;
        pair_weights.push(PairWeights::soft(xi, tau)?);
    }
    Ok(Posterior { pair_weights, state_probs, log_likelihood })
}

pub fn viterbi(model: &CthmmModel, seq: &ObservationSequence) -> Result<(Vec<usize>, f64), CthmmError> {
    let cache = interval_transitions(model, std::slice::from_ref(seq))?;
    viterbi_with(model, seq, &cache)
}

/// MAP state sequence at the observation times. Ties go to the lowest index.
pub fn viterbi_with(model: &CthmmModel, seq: &ObservationSequence, cache: &IntervalTransitions) -> Result<(Vec<usize>, f64), CthmmError> {
    model.check_sequence(seq)?;
    let n = model.dim();
    let v_len = seq.len();
    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let mut delta: Vec<f64> = (0..n).map(|k| ln(model.initial[k]) + model.emissions[k].log_density(&seq.values[0])).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(v_len);
    for (v, tau) in seq.intervals().enumerate() {
        let p = lookup(cache, tau)?;
        let o = &seq.values[v + 1];
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0usize; n];
        for l in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for (k, d) in delta.iter().enumerate() {
                let s = d + ln(p[(k, l)]);
                if s > best {
                    best = s;
                    best_k = k;
                }
            }
            next[l] = best + model.emissions[l].log_density(o);
            arg[l] = best_k;
        }
        back.push(arg);
        delta = next;
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (k, d) in delta.iter().enumerate() {
        if *d > best {
            best = *d;
            last = k;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(CthmmError::ZeroLikelihood(seq.subject_id.clone()));
    }
    let mut states = vec![last; v_len];
    for v in (1..v_len).rev() {
        states[v - 1] = back[v - 1][states[v]];
    }
    Ok((states, best))
}

/// Total data log-likelihood over all sequences.
pub fn log_likelihood(model: &CthmmModel, sequences: &[ObservationSequence]) -> Result<f64, CthmmError> {
    let cache = interval_transitions(model, sequences)?;
    let parts: Vec<Result<f64, CthmmError>> =
        sequences.par_iter().map(|s| forward_backward_with(model, s, &cache).map(|p| p.log_likelihood)).collect();
    parts.into_iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    Soft,
    Hard,
}

impl std::str::FromStr for EmMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown mode '{other}' (expected soft or hard)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Equal rates on every edge, each scaled by `1 + noise·U(0,1)`.
    UniformPerturbed { noise: f64 },
    Explicit(RateMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EMConfig {
    pub method: EsceMethod,
    pub mode: EmMode,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub init: InitStrategy,
    pub seed: u64,
    pub rate_floor: f64,
    pub eigen_fallback: bool,
    pub freeze_emissions: bool,
    pub freeze_initial: bool,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            method: EsceMethod::Eigen,
            mode: EmMode::Soft,
            max_iters: 500,
            rel_tol: 1e-6,
            init: InitStrategy::UniformPerturbed { noise: 0.1 },
            seed: 0,
            rate_floor: 1e-10,
            eigen_fallback: true,
            freeze_emissions: false,
            freeze_initial: false,
        }
    }
}

impl EMConfig {
    fn check(&self) -> Result<(), CthmmError> {
        if !(self.rel_tol > 0.0) {
            return Err(CthmmError::InvalidModel(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if !(self.rate_floor >= 0.0) {
            return Err(CthmmError::InvalidModel(format!("rate_floor must be non-negative, got {}", self.rate_floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EMReport {
    /// Log-likelihood of the model entering each iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub method_switches: Vec<(usize, String)>,
    /// Rate matrix produced by each M-step.
    pub rates_trace: Vec<RateMatrix>,
    pub final_model: CthmmModel,
}

/// Result of one EM iteration.
#[derive(Debug, Clone)]
pub struct EmStep {
    pub model: CthmmModel,
    /// Log-likelihood of the input model.
    pub log_likelihood: f64,
    /// Set when the eigen method was abandoned for this iteration.
    pub fallback: Option<String>,
    pub expectations: EsceAccumulator,
}

struct SequenceStats {
    log_likelihood: f64,
    pooled: BTreeMap<u64, DMatrix<f64>>,
    occupancy: Vec<f64>,
    first: Vec<f64>,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
}

fn sequence_stats(model: &CthmmModel, seq: &ObservationSequence, cache: &IntervalTransitions, mode: EmMode) -> Result<SequenceStats, CthmmError> {
    let n = model.dim();
    let d = model.observation_dim();
    let post = forward_backward_with(model, seq, cache)?;
    let (weights, probs): (Vec<(f64, DMatrix<f64>)>, Vec<DVector<f64>>) = match mode {
        EmMode::Soft => (
            post.pair_weights.iter().map(|w| (w.interval(), w.weights().clone())).collect(),
            post.state_probs.clone(),
        ),
        EmMode::Hard => {
            let (states, _) = viterbi_with(model, seq, cache)?;
            let w = states
                .windows(2)
                .zip(seq.intervals())
                .map(|(s, tau)| {
                    let mut m = DMatrix::zeros(n, n);
                    m[(s[0], s[1])] = 1.0;
                    (tau, m)
                })
                .collect();
            let p = states
                .iter()
                .map(|&s| {
                    let mut e = DVector::zeros(n);
                    e[s] = 1.0;
                    e
                })
                .collect();
            (w, p)
        }
    };
    let mut pooled: BTreeMap<u64, DMatrix<f64>> = BTreeMap::new();
    for (tau, w) in weights {
        *pooled.entry(interval_key(tau)).or_insert_with(|| DMatrix::zeros(n, n)) += w;
    }
    let mut occupancy = vec![0.0; n];
    let mut sum = vec![vec![0.0; d]; n];
    let mut sum_sq = vec![vec![0.0; d]; n];
    for (g, o) in probs.iter().zip(&seq.values) {
        for k in 0..n {
            let w = g[k];
            if w == 0.0 {
                continue;
            }
            occupancy[k] += w;
            for (c, x) in o.iter().enumerate() {
                sum[k][c] += w * x;
                sum_sq[k][c] += w * x * x;
            }
        }
    }
    Ok(SequenceStats {
        log_likelihood: post.log_likelihood,
        pooled,
        occupancy,
        first: probs[0].iter().copied().collect(),
        sum,
        sum_sq,
    })
}

fn run_esce(model: &CthmmModel, pooled: &BTreeMap<u64, DMatrix<f64>>, method: EsceMethod) -> Result<EsceAccumulator, EsceError> {
    let n = model.dim();
    let max_interval = pooled.keys().map(|k| f64::from_bits(*k)).fold(0.0, f64::max);
    let mut ctx = EsceContext::prepare(&model.rates, method, max_interval)?;
    let mut acc = EsceAccumulator::new(n);
    for (k, w) in pooled {
        let w = PairWeights::pooled(w.clone(), f64::from_bits(*k))?;
        ctx.accumulate(&model.rates, &w, &mut acc)?;
    }
    acc.clamp()?;
    Ok(acc)
}

fn m_step_rates(model: &CthmmModel, acc: &EsceAccumulator, rate_floor: f64) -> Result<RateMatrix, CthmmError> {
    let n = model.dim();
    let q = &model.rates;
    let total_time = acc.expected_durations.sum().max(f64::MIN_POSITIVE);
    let mut raw = DMatrix::zeros(n, n);
    for i in 0..n {
        let tau = acc.expected_durations[i];
        let visited = tau > 1e-12 * total_time;
        for j in 0..n {
            if i == j || !q.is_edge(i, j) {
                continue;
            }
            raw[(i, j)] = if visited { (acc.expected_transitions[(i, j)] / tau).max(rate_floor) } else { q.rate(i, j) };
        }
    }
    Ok(RateMatrix::from_off_diagonal(&raw, Some(q.edges()))?)
}

/// One EM iteration: E-step over all sequences (in parallel), ESCE on
/// pooled intervals, M-step.
pub fn em_step(model: &CthmmModel, sequences: &[ObservationSequence], config: &EMConfig) -> Result<EmStep, CthmmError> {
    if sequences.is_empty() {
        return Err(CthmmError::NoData("no sequences".into()));
    }
    let n = model.dim();
    let d = model.observation_dim();
    let cache = interval_transitions(model, sequences)?;
    let stats: Vec<Result<SequenceStats, CthmmError>> =
        sequences.par_iter().map(|s| sequence_stats(model, s, &cache, config.mode)).collect();

    let mut log_likelihood = 0.0;
    let mut pooled: BTreeMap<u64, DMatrix<f64>> = BTreeMap::new();
    let mut occupancy = vec![0.0; n];
    let mut first = vec![0.0; n];
    let mut sum = vec![vec![0.0; d]; n];
    let mut sum_sq = vec![vec![0.0; d]; n];
    for s in stats {
        let s = s?;
        log_likelihood += s.log_likelihood;
        for (k, w) in s.pooled {
            *pooled.entry(k).or_insert_with(|| DMatrix::zeros(n, n)) += w;
        }
        for k in 0..n {
            occupancy[k] += s.occupancy[k];
            first[k] += s.first[k];
            for c in 0..d {
                sum[k][c] += s.sum[k][c];
                sum_sq[k][c] += s.sum_sq[k][c];
            }
        }
    }

    let mut fallback = None;
    let acc = if pooled.is_empty() {
        EsceAccumulator::new(n)
    } else {
        match run_esce(model, &pooled, config.method) {
            Ok(acc) => acc,
            Err(EsceError::EigenUnstable(reason)) if config.eigen_fallback && config.method == EsceMethod::Eigen => {
                fallback = Some(reason);
                run_esce(model, &pooled, EsceMethod::Expm)?
            }
            Err(e) => return Err(e.into()),
        }
    };

    let rates = if pooled.is_empty() { model.rates.clone() } else { m_step_rates(model, &acc, config.rate_floor)? };

    let emissions = if config.freeze_emissions {
        model.emissions.clone()
    } else {
        (0..n)
            .map(|k| {
                let w = occupancy[k];
                if w <= 1e-12 {
                    return model.emissions[k].clone();
                }
                let mean: Vec<f64> = sum[k].iter().map(|s| s / w).collect();
                let std: Vec<f64> = (0..d).map(|c| (sum_sq[k][c] / w - mean[c] * mean[c]).max(0.0).sqrt().max(MIN_STD)).collect();
                Gaussian { mean, std }
            })
            .collect()
    };

    let initial = if config.freeze_initial {
        model.initial.clone()
    } else {
        let total: f64 = first.iter().sum();
        first.iter().map(|x| x / total).collect()
    };

    Ok(EmStep { model: CthmmModel::new(rates, emissions, initial)?, log_likelihood, fallback, expectations: acc })
}

/// Initial rate matrix on the template's edges. The base rate per state is
/// `1 / (mean interval · out-degree)`, so each state's total leaving rate is
/// one jump per average observation interval.
pub fn initial_rates(template: &RateMatrix, sequences: &[ObservationSequence], init: &InitStrategy, seed: u64) -> Result<RateMatrix, CthmmError> {
    match init {
        InitStrategy::Explicit(q) => {
            if q.dim() != template.dim() {
                return Err(CthmmError::InvalidModel("explicit initial rates have the wrong dimension".into()));
            }
            Ok(q.clone())
        }
        InitStrategy::UniformPerturbed { noise } => {
            let taus: Vec<f64> = sequences.iter().flat_map(|s| s.intervals()).collect();
            if taus.is_empty() {
                return Err(CthmmError::NoData("no observation intervals".into()));
            }
            let mean_tau = taus.iter().sum::<f64>() / taus.len() as f64;
            let n = template.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut raw = DMatrix::zeros(n, n);
            for i in 0..n {
                let out = (0..n).filter(|&j| template.is_edge(i, j)).count();
                if out == 0 {
                    continue;
                }
                let base = 1.0 / (mean_tau * out as f64);
                for j in 0..n {
                    if template.is_edge(i, j) {
                        let u: f64 = rng.random();
                        raw[(i, j)] = base * (1.0 + noise * u);
                    }
                }
            }
            Ok(RateMatrix::from_off_diagonal(&raw, Some(template.edges()))?)
        }
    }
}

/// Fit rates (and, unless frozen, emissions and `π`) by EM.
///
/// `template` supplies the edge structure, the starting emissions (state
/// centres) and the starting `π`; its rates are replaced according to
/// `config.init`.
pub fn fit(template: &CthmmModel, sequences: &[ObservationSequence], config: &EMConfig) -> Result<EMReport, CthmmError> {
    config.check()?;
    let usable: Vec<ObservationSequence> = sequences.iter().filter(|s| s.len() >= 2).cloned().collect();
    if usable.is_empty() {
        return Err(CthmmError::NoData("need at least one sequence with two or more observations".into()));
    }
    let rates = initial_rates(&template.rates, &usable, &config.init, config.seed)?;
    let mut model = CthmmModel::new(rates, template.emissions.clone(), template.initial.clone())?;
    let mut trace = Vec::new();
    let mut switches = Vec::new();
    let mut rates_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let step = em_step(&model, &usable, config)?;
        if let Some(reason) = step.fallback {
            switches.push((iterations, format!("eigen -> expm: {reason}")));
        }
        if let (Some(&prev), EmMode::Soft) = (trace.last(), config.mode) {
            if prev - step.log_likelihood > 1e-6 {
                return Err(CthmmError::NonIncreasingLikelihood { iteration: iterations, previous: prev, current: step.log_likelihood });
            }
        }
        let prev = trace.last().copied();
        trace.push(step.log_likelihood);
        rates_trace.push(step.model.rates.clone());
        model = step.model;
        iterations += 1;
        if let Some(prev) = prev {
            let ll = *trace.last().unwrap();
            if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.rel_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(EMReport { log_likelihood_trace: trace, iterations, converged, method_switches: switches, rates_trace, final_model: model })
}

/// Most probable state after `horizon` time units, lowest index on ties.
pub fn predict_state(model: &CthmmModel, current: usize, horizon: f64) -> Result<usize, CthmmError> {
    let p = model.rates.transition_matrix(horizon)?;
    if current >= model.dim() {
        return Err(CtmcError::StateOutOfRange { state: current, dim: model.dim() }.into());
    }
    let mut best = 0;
    for j in 1..model.dim() {
        if p[(current, j)] > p[(current, best)] {
            best = j;
        }
    }
    Ok(best)
}

/// `‖q̂ − q‖₂ / ‖q‖₂` over the free (edge) rates.
pub fn relative_rate_error(estimate: &RateMatrix, truth: &RateMatrix) -> f64 {
    let a = estimate.free_rates();
    let b = truth.free_rates();
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}
