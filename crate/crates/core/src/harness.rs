//! Simulation experiments and their reports.
//!
//! Every experiment is a pure function of its [`ExperimentSpec`]; runs are
//! seeded from `spec.seed + run` and execute in parallel. Report rows carry
//! the seed, a SHA-256 of the [`ExperimentSpec`] and the library version.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cthmm::{self, CthmmError, CthmmModel, EMConfig, EmMode, Gaussian, ObservationSequence};
use crate::ctmc::{CtmcError, RateMatrix, Trajectory};
use crate::decode::{self, AuxiliaryChain, DecodeConfig, DecodeError, SsaConfig};
use crate::esce::{self, EsceMethod};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Cthmm(#[from] CthmmError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Esce(#[from] esce::EsceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Learn5State,
    Decode5State,
    Toy2State,
    DwellRuntime,
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learn5" | "learn_5state" => Ok(Self::Learn5State),
            "decode5" | "decode_5state" => Ok(Self::Decode5State),
            "toy" | "toy_2state" => Ok(Self::Toy2State),
            "dwell" | "dwell_runtime" => Ok(Self::DwellRuntime),
            other => Err(HarnessError::InvalidSpec(format!("unknown experiment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub noise_sigma: f64,
    /// Decoding: observation interval is `τ_s / max q` (or `τ_s · max q`
    /// when `interval_literal`).
    pub sampling_factor: f64,
    pub runs: usize,
    pub seed: u64,
    pub method: EsceMethod,
    pub mode: EmMode,
    /// Total observations per run, summed over chains.
    pub observations: usize,
    pub interval_literal: bool,
    pub max_iters: usize,
    /// Dwell runtime: path lengths.
    pub path_lengths: Vec<usize>,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        let observations = match kind {
            ExperimentKind::Decode5State => 1_000,
            _ => 10_000,
        };
        Self {
            kind,
            noise_sigma: 0.25,
            sampling_factor: 0.5,
            runs: 5,
            seed: 0,
            method: EsceMethod::Eigen,
            mode: EmMode::Soft,
            observations,
            interval_literal: false,
            max_iters: 500,
            path_lengths: vec![20, 30, 40],
        }
    }

    /// Restores the 10⁵-observation protocol.
    pub fn full_scale(mut self) -> Self {
        self.observations = 100_000;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::InvalidSpec("runs must be at least 1".into()));
        }
        let needs_noise = matches!(self.kind, ExperimentKind::Learn5State | ExperimentKind::Decode5State);
        if needs_noise && !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!("noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        if self.kind == ExperimentKind::Decode5State && !(self.sampling_factor > 0.0 && self.sampling_factor.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!("sampling_factor must be positive, got {}", self.sampling_factor)));
        }
        if needs_noise && self.observations < 2 {
            return Err(HarnessError::InvalidSpec("need at least two observations".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single run.
    pub std: f64,
    pub per_run: Vec<f64>,
}

impl MetricReport {
    pub fn from_runs(name: impl Into<String>, per_run: Vec<f64>) -> Self {
        let n = per_run.len() as f64;
        let mean = per_run.iter().sum::<f64>() / n;
        let std = if per_run.len() > 1 { (per_run.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { metric_name: name.into(), mean, std, per_run }
    }
}

/// Flat CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub metric: String,
    pub run: usize,
    pub seed: u64,
    pub value: f64,
    pub sigma: f64,
    pub sampling_factor: f64,
    pub mode: String,
    pub method: String,
    pub spec_hash: String,
    pub version: String,
}

pub fn report_rows(spec: &ExperimentSpec, metrics: &[MetricReport]) -> Vec<ReportRow> {
    let hash = spec.hash();
    let mode = match spec.mode {
        EmMode::Soft => "soft",
        EmMode::Hard => "hard",
    };
    metrics
        .iter()
        .flat_map(|m| {
            let hash = hash.clone();
            m.per_run.iter().enumerate().map(move |(run, v)| ReportRow {
                experiment: format!("{:?}", spec.kind),
                metric: m.metric_name.clone(),
                run,
                seed: spec.run_seed(run),
                value: *v,
                sigma: spec.noise_sigma,
                sampling_factor: spec.sampling_factor,
                mode: mode.into(),
                method: spec.method.to_string(),
                spec_hash: hash.clone(),
                version: VERSION.into(),
            })
        })
        .collect()
}

/// JSON summary of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    pub version: String,
    pub metrics: Vec<MetricReport>,
}

impl Summary {
    pub fn new(spec: &ExperimentSpec, metrics: Vec<MetricReport>) -> Self {
        Self { spec: spec.clone(), spec_hash: spec.hash(), version: VERSION.into(), metrics }
    }
}

/// Random 5-state complete digraph with its emission means.
#[derive(Debug, Clone, PartialEq)]
pub struct FiveState {
    pub rates: RateMatrix,
    /// Emission mean of index `i` is `i + 1`.
    pub means: Vec<f64>,
}

impl FiveState {
    pub fn emissions(&self, sigma: f64) -> Result<Vec<Gaussian>, CthmmError> {
        self.means.iter().map(|m| Gaussian::scalar(*m, sigma)).collect()
    }

    pub fn model(&self, sigma: f64) -> Result<CthmmModel, CthmmError> {
        CthmmModel::with_uniform_initial(self.rates.clone(), self.emissions(sigma)?)
    }
}

/// `q_i ~ U[1, 5]`, `q_ij ~ U[0, 1]` rescaled so each row's off-diagonal
/// sum is `q_i`.
pub fn gen_5state(seed: u64) -> Result<FiveState, CtmcError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 5;
    let mut raw = DMatrix::zeros(n, n);
    for i in 0..n {
        let qi: f64 = rng.random_range(1.0..=5.0);
        let w: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
        let s: f64 = w.iter().sum();
        for j in 0..n {
            raw[(i, j)] = w[j] / s * qi;
        }
    }
    let rates = RateMatrix::validate(&raw, None)?;
    Ok(FiveState { rates, means: (1..=n).map(|i| i as f64).collect() })
}

/// One simulated chain with its observations and the true states there.
#[derive(Debug, Clone)]
pub struct SimulatedChain {
    pub sequence: ObservationSequence,
    pub trajectory: Trajectory,
    pub observed_states: Vec<usize>,
}

/// Chains of length `chain_duration` observed every `interval`, until
/// `total_obs` observations exist (the last chain is shortened).
pub fn simulate_chains<R: Rng>(
    model: &CthmmModel,
    chain_duration: f64,
    interval: f64,
    total_obs: usize,
    rng: &mut R,
) -> Result<Vec<SimulatedChain>, CthmmError> {
    let per_chain = ((chain_duration / interval).floor() as usize + 1).max(2);
    let mut out = Vec::new();
    let mut left = total_obs;
    while left >= 2 {
        let m = per_chain.min(left);
        left -= m;
        let times: Vec<f64> = (0..m).map(|i| i as f64 * interval).collect();
        let start = sample_index(&model.initial, rng);
        let traj = model.rates.sample_trajectory_with(start, times[m - 1], rng)?;
        let id = format!("chain{}", out.len());
        let (sequence, observed_states) = cthmm::observe_trajectory(model, &traj, &times, &id, rng)?;
        out.push(SimulatedChain { sequence, trajectory: traj, observed_states });
    }
    Ok(out)
}

fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Details of one learning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnRun {
    pub seed: u64,
    pub relative_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood_trace: Vec<f64>,
    pub method_switches: Vec<(usize, String)>,
    /// Every M-step output re-validated as a rate matrix.
    pub all_rates_valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningOutcome {
    pub report: MetricReport,
    pub runs: Vec<LearnRun>,
}

/// Per run: chains of duration `100 / min q`, observed every `0.5 / max q`,
/// fit from a perturbed uniform start with emissions frozen at truth;
/// metric is `‖q̂ − q‖ / ‖q‖`.
pub fn run_learning_experiment(spec: &ExperimentSpec) -> Result<LearningOutcome, HarnessError> {
    spec.validate()?;
    let runs: Vec<Result<LearnRun, HarnessError>> = (0..spec.runs).into_par_iter().map(|r| learn_once(spec, spec.run_seed(r))).collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = MetricReport::from_runs("relative_rate_error", runs.iter().map(|r| r.relative_error).collect());
    Ok(LearningOutcome { report, runs })
}

fn learn_once(spec: &ExperimentSpec, seed: u64) -> Result<LearnRun, HarnessError> {
    let truth = gen_5state(seed)?;
    let model = truth.model(spec.noise_sigma)?;
    let h = truth.rates.holding_params();
    let min_q = h.iter().copied().fold(f64::INFINITY, f64::min);
    let max_q = truth.rates.max_holding();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1ea7);
    let chains = simulate_chains(&model, 100.0 / min_q, 0.5 / max_q, spec.observations, &mut rng)?;
    let seqs: Vec<ObservationSequence> = chains.into_iter().map(|c| c.sequence).collect();
    let config = EMConfig {
        method: spec.method,
        mode: spec.mode,
        max_iters: spec.max_iters,
        seed,
        freeze_emissions: true,
        ..EMConfig::default()
    };
    let rep = cthmm::fit(&model, &seqs, &config)?;
    let all_rates_valid = rep.rates_trace.iter().all(|q| RateMatrix::validate(q.rates(), Some(q.edges())).is_ok());
    Ok(LearnRun {
        seed,
        relative_error: cthmm::relative_rate_error(&rep.final_model.rates, &truth.rates),
        iterations: rep.iterations,
        converged: rep.converged,
        log_likelihood_trace: rep.log_likelihood_trace,
        method_switches: rep.method_switches,
        all_rates_valid,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodingOutcome {
    pub continuous_error: MetricReport,
    pub observation_error: MetricReport,
}

/// Observation interval for the decoding protocol.
pub fn decoding_interval(spec: &ExperimentSpec, max_q: f64) -> f64 {
    if spec.interval_literal {
        spec.sampling_factor * max_q
    } else {
        spec.sampling_factor / max_q
    }
}

/// Per run: simulate with the true model, decode every chain with
/// Viterbi-SSAE and compare with the true trajectories.
pub fn run_decoding_experiment(spec: &ExperimentSpec) -> Result<DecodingOutcome, HarnessError> {
    spec.validate()?;
    let runs: Vec<Result<(f64, f64), HarnessError>> = (0..spec.runs).into_par_iter().map(|r| decode_once(spec, spec.run_seed(r))).collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(DecodingOutcome {
        continuous_error: MetricReport::from_runs("continuous_error", runs.iter().map(|r| r.0).collect()),
        observation_error: MetricReport::from_runs("observation_error", runs.iter().map(|r| r.1).collect()),
    })
}

fn decode_once(spec: &ExperimentSpec, seed: u64) -> Result<(f64, f64), HarnessError> {
    let truth = gen_5state(seed)?;
    let model = truth.model(spec.noise_sigma)?;
    let h = truth.rates.holding_params();
    let min_q = h.iter().copied().fold(f64::INFINITY, f64::min);
    let interval = decoding_interval(spec, truth.rates.max_holding());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0_de00);
    let chains = simulate_chains(&model, (100.0 / min_q).max(interval), interval, spec.observations, &mut rng)?;
    let config = DecodeConfig::default();
    let mut cache = decode::IntervalCache::new();
    let (mut wrong_time, mut total_time, mut wrong_obs, mut total_obs) = (0.0, 0.0, 0usize, 0usize);
    for c in &chains {
        let decoded = decode::viterbi_ssae_cached(&model, &c.sequence, &config, &mut cache)?;
        let t0 = c.sequence.times[0];
        let span = c.sequence.span();
        let mut breaks = Vec::new();
        let mut b = t0;
        for d in &c.trajectory.dwell_times {
            b += d;
            breaks.push(b);
        }
        let frac = decode::mismatch_fraction(&decoded, |t| c.trajectory.state_at(t - t0), &breaks, t0 + span);
        wrong_time += frac * span;
        total_time += span;
        for (t, s) in c.sequence.times.iter().zip(&c.observed_states) {
            wrong_obs += usize::from(decoded.state_at(*t) != *s);
            total_obs += 1;
        }
    }
    Ok((wrong_time / total_time, wrong_obs as f64 / total_obs as f64))
}

/// Two-state example: `q_12 = 1`, `q_21 = 0.5`, from index 0 to index 1
/// over `T = 12`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyReport {
    pub path: Vec<usize>,
    pub probability: f64,
    pub dwell_by_method: Vec<(EsceMethod, Vec<f64>)>,
    pub expected_path: Vec<usize>,
    pub path_matches: bool,
    pub seconds: f64,
}

pub const TOY_T: f64 = 12.0;

pub fn toy_rates() -> RateMatrix {
    RateMatrix::validate(&DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5]), None).expect("valid toy matrix")
}

/// The seed is unused beyond the report; the toy problem is deterministic.
pub fn run_toy(_seed: u64) -> Result<ToyReport, HarnessError> {
    let start = Instant::now();
    let q = toy_rates();
    let res = decode::ssa_search(&q, 0, 1, TOY_T, &SsaConfig::default())?;
    let mut dwell_by_method = Vec::new();
    for m in [EsceMethod::Expm, EsceMethod::Unif, EsceMethod::Eigen] {
        dwell_by_method.push((m, decode::expected_dwell(&res.best.states, &q, TOY_T, m)?.dwell));
    }
    let expected_path = vec![0, 1, 0, 1, 0, 1, 0, 1];
    Ok(ToyReport {
        path_matches: res.best.states == expected_path,
        path: res.best.states,
        probability: res.probability,
        dwell_by_method,
        expected_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Timing of one dwell method at one path length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DwellTiming {
    pub n: usize,
    pub method: String,
    pub mean_seconds: f64,
    pub successes: usize,
    pub failures: usize,
    /// Largest entrywise gap to the closed form over successful runs.
    pub max_abs_diff: f64,
    /// Largest `|Σ dwell − t|` over successful runs.
    pub max_sum_error: f64,
    /// Distinct failure messages joined with `"; "`.
    pub failure_reasons: String,
}

/// Truncation cap for the uniformization runs; paths with a tiny rate make
/// `q̂t` enormous and are recorded as failures instead of running for hours.
pub const RUNTIME_UNIF_CAP: u64 = 50_000;

/// Random distinct rates `q_i ~ U(0, 1]` and `t = Σ 1/q_i`.
pub fn random_dwell_path<R: Rng>(n: usize, rng: &mut R) -> (Vec<f64>, f64) {
    loop {
        let q: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
        if decode::rates_distinct(&q) {
            let t = q.iter().map(|x| 1.0 / x).sum();
            return (q, t);
        }
    }
}

pub fn run_dwell_runtime(spec: &ExperimentSpec) -> Result<Vec<DwellTiming>, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for &n in &spec.path_lengths {
        let paths: Vec<(Vec<f64>, f64)> = (0..spec.runs).map(|_| random_dwell_path(n, &mut rng)).collect();
        let mut closed = Vec::new();
        let timing = |name: &str, f: &dyn Fn(&[f64], f64) -> Result<Vec<f64>, String>, reference: Option<&Vec<Vec<f64>>>| {
            let mut secs = 0.0;
            let mut row = DwellTiming {
                n,
                method: name.into(),
                mean_seconds: 0.0,
                successes: 0,
                failures: 0,
                max_abs_diff: 0.0,
                max_sum_error: 0.0,
                failure_reasons: String::new(),
            };
            let mut reasons: Vec<String> = Vec::new();
            let mut results = Vec::new();
            for (idx, (q, t)) in paths.iter().enumerate() {
                let clock = Instant::now();
                let r = f(q, *t);
                secs += clock.elapsed().as_secs_f64();
                match r {
                    Ok(d) => {
                        row.successes += 1;
                        row.max_sum_error = row.max_sum_error.max((d.iter().sum::<f64>() - t).abs());
                        if let Some(refs) = reference {
                            let gap = d.iter().zip(&refs[idx]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                            row.max_abs_diff = row.max_abs_diff.max(gap);
                        }
                        results.push(d);
                    }
                    Err(e) => {
                        row.failures += 1;
                        if !reasons.contains(&e) {
                            reasons.push(e);
                        }
                        results.push(Vec::new());
                    }
                }
            }
            row.mean_seconds = secs / paths.len() as f64;
            row.failure_reasons = reasons.join("; ");
            (row, results)
        };
        let (row, res) = timing("closed_form", &|q, t| decode::expected_dwell_closed_form(q, t).map_err(|e| e.to_string()), None);
        closed.extend(res);
        out.push(row);
        for m in [EsceMethod::Expm, EsceMethod::Unif, EsceMethod::Eigen] {
            let f = move |q: &[f64], t: f64| -> Result<Vec<f64>, String> {
                let chain = AuxiliaryChain::from_rates(q);
                let rm = chain.rate_matrix().map_err(|e| e.to_string())?;
                let n = q.len();
                let d = match m {
                    EsceMethod::Unif => esce::unif_single_pair(&rm, 0, n - 1, t, RUNTIME_UNIF_CAP).map(|r| r.0),
                    _ => esce::conditional_durations(&rm, 0, n - 1, t, m),
                }
                .map_err(|e| e.to_string())?;
                Ok(d.iter().take(n).copied().collect())
            };
            let (row, _) = timing(&m.to_string(), &f, Some(&closed));
            out.push(row);
        }
    }
    Ok(out)
}
