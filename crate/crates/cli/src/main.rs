use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cthmm_core::cthmm::{self, CthmmModel, EMConfig, EmMode, Gaussian, ObservationSequence};
use cthmm_core::ctmc::RateMatrix;
use cthmm_core::decode::{self, DecodeConfig};
use cthmm_core::esce::EsceMethod;
use cthmm_core::harness::{self, ExperimentKind, ExperimentSpec, MetricReport, Summary};
use cthmm_core::io;
use cthmm_core::nalgebra::DMatrix;

/// Continuous-time hidden Markov models: learning, decoding and experiments.
///
/// States are 0-based everywhere unless `--one-based` is given.
#[derive(Parser)]
#[command(name = "cthmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit rates (and emissions unless frozen) by EM.
    Learn(LearnArgs),
    /// Viterbi-SSAE decoding of every subject in a data file.
    Decode(DecodeArgs),
    /// Probability that a fixed state sequence is exactly the path taken by time t.
    PathProb(PathArgs),
    /// Expected dwell time in each position of a fixed state sequence.
    Dwell(DwellArgs),
    /// Run a simulation experiment.
    Bench(BenchArgs),
    /// Simulate subjects from a model.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    /// Starting model (structure, emissions, π). Without it a complete
    /// digraph on `--states` states with quantile emissions is used.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, default_value = "eigen")]
    method: EsceMethod,
    #[arg(long, default_value = "soft")]
    mode: EmMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long)]
    freeze_emissions: bool,
    #[arg(long)]
    freeze_initial: bool,
    /// Write the EM report (trace, switches) here as JSON.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dwell method for inner paths with repeated holding rates.
    #[arg(long, default_value = "expm")]
    method: EsceMethod,
    #[arg(long, default_value_t = 101)]
    grid_points: usize,
}

#[derive(Args)]
struct PathArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated states.
    #[arg(long)]
    path: String,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    one_based: bool,
}

#[derive(Args)]
struct DwellArgs {
    #[command(flatten)]
    path: PathArgs,
    /// `closed`, `expm`, `unif`, `eigen`, or `auto` (closed form when the
    /// holding rates are distinct, Expm otherwise).
    #[arg(long, default_value = "auto")]
    method: String,
}

#[derive(Args)]
struct BenchArgs {
    /// learn5, decode5, toy or dwell.
    #[arg(long)]
    experiment: ExperimentKind,
    /// Comma-separated noise levels.
    #[arg(long, default_value = "0.25")]
    sigma: String,
    /// Comma-separated sampling factors τ_s (decoding).
    #[arg(long, default_value = "0.5")]
    tau_s: String,
    #[arg(long, default_value = "soft")]
    mode: EmMode,
    #[arg(long, default_value = "eigen")]
    method: EsceMethod,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; a JSON summary is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// 10⁵ observations per run instead of the desk-scale default.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    observations: Option<usize>,
    /// Observation interval τ_s · max q instead of τ_s / max q.
    #[arg(long)]
    interval_literal: bool,
    /// Exit with status 2 when an acceptance threshold is violated.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    subjects: usize,
    #[arg(long)]
    horizon: f64,
    #[arg(long)]
    obs_interval: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the true trajectories (subject_id, segment, state, dwell).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means a `--check` threshold failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Learn(a) => learn(a).map(|_| true),
        Command::Decode(a) => decode_cmd(a).map(|_| true),
        Command::PathProb(a) => {
            let model = io::read_model(&a.model)?;
            let g = parse_path(&a.path, a.one_based)?;
            println!("{}", decode::path_probability(&g, &model.rates, a.t)?);
            Ok(true)
        }
        Command::Dwell(a) => dwell(a).map(|_| true),
        Command::Bench(a) => bench(a),
        Command::Simulate(a) => simulate(a).map(|_| true),
    }
}

fn read_data(path: &Path) -> Result<Vec<ObservationSequence>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(io::read_observations(f)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn parse_path(text: &str, one_based: bool) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let s: usize = part.trim().parse().with_context(|| format!("bad state '{part}'"))?;
        if one_based {
            if s == 0 {
                bail!("state 0 with --one-based");
            }
            out.push(s - 1);
        } else {
            out.push(s);
        }
    }
    Ok(out)
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',').map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number '{p}'"))).collect()
}

/// Complete digraph with unit rates; emission means at the state-count
/// quantiles of the data, common std per dimension.
fn default_template(seqs: &[ObservationSequence], n: usize) -> Result<CthmmModel> {
    if n < 2 {
        bail!("--states must be at least 2");
    }
    let d = seqs.first().context("no observations")?.values[0].len();
    let mut means = vec![vec![0.0; d]; n];
    let mut stds = vec![0.0; d];
    for dim in 0..d {
        let mut xs: Vec<f64> = seqs.iter().flat_map(|s| s.values.iter().map(move |v| v[dim])).collect();
        xs.sort_by(f64::total_cmp);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        stds[dim] = var.sqrt().max(1e-6);
        for (i, m) in means.iter_mut().enumerate() {
            let pos = ((i as f64 + 0.5) / n as f64 * xs.len() as f64) as usize;
            m[dim] = xs[pos.min(xs.len() - 1)];
        }
    }
    let raw = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    let rates = RateMatrix::validate(&raw, None)?;
    let emissions = means.into_iter().map(|m| Gaussian::new(m, stds.clone())).collect::<Result<Vec<_>, _>>()?;
    Ok(CthmmModel::with_uniform_initial(rates, emissions)?)
}

fn learn(a: LearnArgs) -> Result<()> {
    let seqs = read_data(&a.data)?;
    let template = match (&a.init, a.states) {
        (Some(p), _) => io::read_model(p)?,
        (None, Some(n)) => default_template(&seqs, n)?,
        (None, None) => bail!("give --init <model.json> or --states <n>"),
    };
    let config = EMConfig {
        method: a.method,
        mode: a.mode,
        max_iters: a.max_iters,
        rel_tol: a.tol,
        seed: a.seed,
        freeze_emissions: a.freeze_emissions,
        freeze_initial: a.freeze_initial,
        ..EMConfig::default()
    };
    let rep = cthmm::fit(&template, &seqs, &config)?;
    io::write_model(&a.model_out, &rep.final_model)?;
    eprintln!(
        "{} iterations, converged: {}, log-likelihood {:.6}",
        rep.iterations,
        rep.converged,
        rep.log_likelihood_trace.last().copied().unwrap_or(f64::NAN)
    );
    for (it, why) in &rep.method_switches {
        eprintln!("iteration {it}: {why}");
    }
    if let Some(p) = a.report_out {
        let json = serde_json::json!({
            "iterations": rep.iterations,
            "converged": rep.converged,
            "log_likelihood_trace": rep.log_likelihood_trace,
            "method_switches": rep.method_switches,
        });
        std::fs::write(&p, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let model = io::read_model(&a.model)?;
    let seqs = read_data(&a.data)?;
    let mut config = DecodeConfig { dwell_method: a.method, ..DecodeConfig::default() };
    config.ssa.grid_points = a.grid_points;
    let mut cache = decode::IntervalCache::new();
    let mut rows = Vec::new();
    for s in &seqs {
        let d = decode::viterbi_ssae_cached(&model, s, &config, &mut cache).with_context(|| format!("subject {}", s.subject_id))?;
        for (segment, (state, dwell)) in d.states.iter().zip(&d.dwell_times).enumerate() {
            rows.push(io::SegmentRow { subject_id: s.subject_id.clone(), segment, state: *state, dwell: *dwell });
        }
    }
    io::write_segments(create(&a.out)?, &rows)?;
    Ok(())
}

fn dwell(a: DwellArgs) -> Result<()> {
    let model = io::read_model(&a.path.model)?;
    let g = parse_path(&a.path.path, a.path.one_based)?;
    let q = &model.rates;
    let t = a.path.t;
    let d = match a.method.as_str() {
        "closed" => {
            let chain = decode::auxiliary_matrix(&g, q)?;
            decode::expected_dwell_closed_form(&chain.q_path, t)?
        }
        "auto" => decode::expected_dwell(&g, q, t, EsceMethod::Expm)?.dwell,
        m => decode::expected_dwell_esce(&g, q, t, m.parse().map_err(anyhow::Error::msg)?)?.dwell,
    };
    println!("{}", d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    Ok(())
}

fn write_outputs<T: serde::Serialize>(out: Option<&Path>, rows: &[T], summary: &impl serde::Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    match out {
        Some(p) => {
            io::write_rows(create(p)?, rows)?;
            std::fs::write(p.with_extension("json"), json)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<bool> {
    let mut base = ExperimentSpec::new(a.experiment);
    if a.full_scale {
        base = base.full_scale();
    }
    if let Some(n) = a.observations {
        base.observations = n;
    }
    base.runs = a.runs;
    base.seed = a.seed;
    base.method = a.method;
    base.mode = a.mode;
    base.interval_literal = a.interval_literal;
    let sigmas = parse_list(&a.sigma)?;
    let taus = parse_list(&a.tau_s)?;
    let mut ok = true;
    match a.experiment {
        ExperimentKind::Learn5State => {
            let mut rows = Vec::new();
            let mut summaries = Vec::new();
            for &sigma in &sigmas {
                let mut spec = base.clone();
                spec.noise_sigma = sigma;
                let out = harness::run_learning_experiment(&spec)?;
                print_metric(&format!("σ={sigma} {:?}", spec.mode), &out.report);
                if a.check {
                    ok &= check_learning(&spec, &out)?;
                }
                rows.extend(harness::report_rows(&spec, std::slice::from_ref(&out.report)));
                summaries.push(Summary::new(&spec, vec![out.report]));
            }
            write_outputs(a.out.as_deref(), &rows, &summaries)?;
        }
        ExperimentKind::Decode5State => {
            let mut rows = Vec::new();
            let mut summaries = Vec::new();
            for &sigma in &sigmas {
                let mut previous = f64::NEG_INFINITY;
                for &tau in &taus {
                    let mut spec = base.clone();
                    spec.noise_sigma = sigma;
                    spec.sampling_factor = tau;
                    let out = harness::run_decoding_experiment(&spec)?;
                    print_metric(&format!("σ={sigma} τs={tau} continuous"), &out.continuous_error);
                    print_metric(&format!("σ={sigma} τs={tau} observation"), &out.observation_error);
                    if a.check {
                        let cell_ok = out.observation_error.mean < out.continuous_error.mean && out.continuous_error.mean > previous;
                        if !cell_ok {
                            eprintln!("check failed at σ={sigma} τs={tau}");
                        }
                        ok &= cell_ok;
                    }
                    previous = out.continuous_error.mean;
                    let metrics = vec![out.continuous_error, out.observation_error];
                    rows.extend(harness::report_rows(&spec, &metrics));
                    summaries.push(Summary::new(&spec, metrics));
                }
            }
            write_outputs(a.out.as_deref(), &rows, &summaries)?;
        }
        ExperimentKind::Toy2State => {
            let rep = harness::run_toy(a.seed)?;
            println!("path {:?}  P = {:.6}", rep.path, rep.probability);
            for (m, d) in &rep.dwell_by_method {
                println!("{m:>6}: {}", d.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" "));
            }
            if a.check {
                let target = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
                let dwell_ok = rep.dwell_by_method.iter().all(|(_, d)| d.iter().zip(&target).all(|(x, y)| (x - y).abs() < 1e-4));
                if !dwell_ok {
                    eprintln!("check failed: dwell vector differs from the integer target by more than 1e-4");
                }
                ok &= rep.path_matches && dwell_ok;
            }
            let summary = serde_json::json!({ "report": rep, "spec_hash": base.hash(), "seed": a.seed, "version": harness::VERSION });
            let rows: Vec<io::SegmentRow> = rep
                .path
                .iter()
                .zip(&rep.dwell_by_method[0].1)
                .enumerate()
                .map(|(i, (s, d))| io::SegmentRow { subject_id: "toy".into(), segment: i, state: *s, dwell: *d })
                .collect();
            write_outputs(a.out.as_deref(), &rows, &summary)?;
        }
        ExperimentKind::DwellRuntime => {
            let rows = harness::run_dwell_runtime(&base)?;
            for r in &rows {
                println!(
                    "n={:>3} {:>12} {:.3e}s  ok {} failed {}  max gap {:.2e}",
                    r.n, r.method, r.mean_seconds, r.successes, r.failures, r.max_abs_diff
                );
            }
            if a.check {
                for &n in &base.path_lengths {
                    let at = |m: &str| rows.iter().find(|r| r.n == n && r.method == m);
                    if let (Some(c), Some(e)) = (at("closed_form"), at("expm")) {
                        ok &= c.mean_seconds < e.mean_seconds;
                    }
                }
                ok &= rows.iter().all(|r| r.successes == 0 || (r.max_abs_diff < 1e-5 && r.max_sum_error < 1e-5));
            }
            let summary = serde_json::json!({ "rows": rows, "spec_hash": base.hash(), "seed": a.seed, "version": harness::VERSION });
            write_outputs(a.out.as_deref(), &rows, &summary)?;
        }
    }
    Ok(ok)
}

fn print_metric(label: &str, m: &MetricReport) {
    println!("{label}: {} = {:.4} ± {:.4}", m.metric_name, m.mean, m.std);
}

/// σ = 1/4 soft: every run below 0.10. σ ≥ 3/8: soft beats hard run by run
/// (the other mode is run here for the comparison).
fn check_learning(spec: &ExperimentSpec, out: &harness::LearningOutcome) -> Result<bool> {
    let monotone = spec.mode == EmMode::Hard
        || out.runs.iter().all(|r| r.log_likelihood_trace.windows(2).all(|w| w[1] >= w[0] - 1e-7));
    let valid = out.runs.iter().all(|r| r.all_rates_valid);
    let ordering = if spec.noise_sigma < 0.375 {
        spec.mode == EmMode::Hard || out.report.per_run.iter().all(|e| *e < 0.10)
    } else {
        let mut other = spec.clone();
        other.mode = if spec.mode == EmMode::Soft { EmMode::Hard } else { EmMode::Soft };
        let alt = harness::run_learning_experiment(&other)?;
        let (soft, hard) = if spec.mode == EmMode::Soft { (&out.report, &alt.report) } else { (&alt.report, &out.report) };
        soft.per_run.iter().zip(&hard.per_run).all(|(s, h)| s < h)
    };
    if !(monotone && valid && ordering) {
        eprintln!("check failed at σ={}: monotone {monotone}, valid {valid}, ordering {ordering}", spec.noise_sigma);
    }
    Ok(monotone && valid && ordering)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let model = io::read_model(&a.model)?;
    if !(a.obs_interval > 0.0 && a.horizon >= a.obs_interval) {
        bail!("need 0 < --obs-interval <= --horizon");
    }
    let m = (a.horizon / a.obs_interval).floor() as usize + 1;
    let times: Vec<f64> = (0..m).map(|i| i as f64 * a.obs_interval).collect();
    let mut seqs = Vec::with_capacity(a.subjects);
    let mut truth = Vec::new();
    for s in 0..a.subjects {
        let id = format!("s{s}");
        let (seq, traj) = cthmm::simulate_subject(&model, &times, &id, a.seed.wrapping_add(s as u64))?;
        for (segment, (state, dwell)) in traj.states.iter().zip(&traj.dwell_times).enumerate() {
            truth.push(io::SegmentRow { subject_id: id.clone(), segment, state: *state, dwell: *dwell });
        }
        seqs.push(seq);
    }
    io::write_observations(create(&a.out)?, &seqs)?;
    if let Some(p) = a.truth_out {
        io::write_segments(create(&p)?, &truth)?;
    }
    Ok(())
}
