use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use asyncloc::bound::{hcrb, BoundResult, DEFAULT_MC_SAMPLES};
use asyncloc::estimate::{default_init, estimate_network, PriorSpec, Termination};
use asyncloc::experiment::{
    load_scenario, run_experiment, ExperimentKind, ExperimentSpec, DEFAULT_FAILURE_THRESHOLD,
    DEFAULT_MISMATCH_FACTOR, DEFAULT_SIGMA_SWEEP_NS,
};
use asyncloc::model::{check_sequence, ObservationSet};
use asyncloc::scenario::{Role, Scenario};
use asyncloc::simulate::{
    check_no_collision, observation_structure, sample_truth, substream, synthesize_with,
    validate_no_collision, StreamPurpose,
};
use asyncloc::Error;

const NOMINAL_TEMPLATE: &str = include_str!("../scenarios/nominal.toml");
const MULTI_AUX_TEMPLATE: &str = include_str!("../scenarios/multi_auxiliary.toml");

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "asyncloc", version, about = "Passive self-localization in asynchronous networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded Monte Carlo experiment and write CSV files.
    Run(RunArgs),
    /// Estimate positions and delays from one observation file.
    Estimate(EstimateArgs),
    /// Compute the hybrid Cramér-Rao bound of a scenario.
    Bound(BoundArgs),
    /// Synthesize one observation file from a scenario.
    Simulate(SimulateArgs),
    /// Print a scenario template.
    GenScenario(GenArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// ellipses | rmse_vs_sigma | rmse_vs_sigma_delta | delay_rmse |
    /// multi_auxiliary | convergence_hist | prior_mismatch
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Abort when a truth draw violates the anti-collision constraint.
    #[arg(long)]
    strict_collision: bool,
    /// Regularize the normal matrix with a small relative ridge.
    #[arg(long)]
    ridge: bool,
    /// Timing-noise sweep in ns (comma-separated) for the sweep kinds.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Draws used for the expected Fisher information.
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    bound_samples: usize,
    /// Ratio of assumed to true anchor prior std (prior_mismatch).
    #[arg(long, default_value_t = DEFAULT_MISMATCH_FACTOR)]
    mismatch_factor: f64,
    /// Non-convergence rate above which the run exits with status 3.
    #[arg(long, default_value_t = DEFAULT_FAILURE_THRESHOLD)]
    failure_threshold: f64,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// TOML file with `intervals` (s) and optionally `sequence`.
    #[arg(long)]
    observations: PathBuf,
    #[arg(long)]
    ridge: bool,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BoundArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    bound_samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trial index of the substream to draw from.
    #[arg(long, default_value_t = 0)]
    trial: u64,
    #[arg(long)]
    strict_collision: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Template {
    Nominal,
    MultiAuxiliary,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "nominal")]
    template: Template,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Observation file: the measured intervals and, optionally, the sequence
/// that produced them. `truth` is informational and written by `simulate`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence: Option<Vec<usize>>,
    intervals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct NodeReport {
    id: usize,
    role: Role,
    position: Vec<f64>,
}

#[derive(Serialize)]
struct EstimateReport {
    converged: bool,
    termination: Termination,
    outer_iterations: usize,
    inner_iterations: usize,
    sigma_hat_s: f64,
    cost: f64,
    nodes: Vec<NodeReport>,
    delays_s: Vec<f64>,
}

#[derive(Serialize)]
struct NodeBound {
    id: usize,
    role: Role,
    covariance: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct BoundReport {
    mc_samples: usize,
    seed: u64,
    rmse_theta_u_m: f64,
    rmse_delta_s: f64,
    sigma2_variance_bound: f64,
    nodes: Vec<NodeBound>,
    delay_covariance: Vec<Vec<f64>>,
}

enum Failure {
    Error(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::MissingTruth(_)
        | Error::InvalidSequence(_)
        | Error::DimensionMismatch { .. } => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_RUNTIME,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let kind: ExperimentKind = a.kind.parse()?;
    let mut spec = ExperimentSpec::new(&a.scenario, kind, &a.out);
    spec.trials = a.trials;
    spec.seed = a.seed;
    spec.strict_collision = a.strict_collision;
    spec.ridge = a.ridge;
    spec.sweep_ns = a.sweep.unwrap_or_else(|| DEFAULT_SIGMA_SWEEP_NS.to_vec());
    spec.bound_samples = a.bound_samples;
    spec.mismatch_factor = a.mismatch_factor;
    spec.failure_threshold = a.failure_threshold;
    let summary = run_experiment(&spec)?;
    let collisions: usize = summary.points.iter().map(|(_, p)| p.stats.collisions).sum();
    if collisions > 0 {
        eprintln!("warning: {collisions} truth draws violate the anti-collision constraint");
    }
    for (label, p) in &summary.points {
        for (i, e) in p.stats.errors.iter().take(3) {
            eprintln!("warning: {label}: trial {i}: {e}");
        }
    }
    for rec in &summary.outputs {
        println!("wrote {}", spec.out_dir.join(&rec.file).display());
    }
    if summary.exceeds(spec.failure_threshold) {
        return Err(Failure::Threshold(format!(
            "non-convergence rate {:.3} exceeds threshold {}",
            summary.worst_failure_rate, spec.failure_threshold
        )));
    }
    Ok(())
}

fn read_observations(path: &Path) -> Result<ObservationFile, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn cmd_estimate(a: EstimateArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&a.scenario)?;
    if a.ridge {
        scenario.estimator.ridge = true;
    }
    let file = read_observations(&a.observations)?;
    let sequence = file.sequence.unwrap_or_else(|| scenario.transmission_sequence());
    check_sequence(&sequence, scenario.num_nodes()).map_err(|e| Error::Config(e.to_string()))?;
    let m = sequence.len() - 1;
    if file.intervals.len() != m {
        return Err(Error::Config(format!(
            "{}: {} intervals for a sequence of length {} (expected {m})",
            a.observations.display(),
            file.intervals.len(),
            sequence.len()
        ))
        .into());
    }
    let obs = ObservationSet::new(
        scenario.layout(),
        scenario.propagation_speed,
        sequence,
        DVector::from_vec(file.intervals),
    )?;
    let prior = PriorSpec::from_scenario(&scenario);
    let init = default_init(&scenario, &prior);
    let r = estimate_network(&obs, &prior, &init, &scenario.estimator)?;
    let state = r.state(scenario.layout())?;
    let report = EstimateReport {
        converged: r.converged,
        termination: r.termination,
        outer_iterations: r.outer_iters,
        inner_iterations: r.inner_iters_total,
        sigma_hat_s: r.sigma2_hat.sqrt(),
        cost: r.final_cost,
        nodes: scenario
            .nodes
            .iter()
            .map(|n| NodeReport {
                id: n.id,
                role: n.role,
                position: state.position(n.id).to_vec(),
            })
            .collect(),
        delays_s: state.delays().to_vec(),
    };
    emit(&to_json(&report), a.out.as_deref())?;
    if !r.converged {
        return Err(Failure::Threshold(format!(
            "estimator stopped without converging ({:?} after {} outer iterations)",
            r.termination, r.outer_iters
        )));
    }
    Ok(())
}

fn bound_report(scenario: &Scenario, b: &BoundResult, seed: u64) -> BoundReport {
    BoundReport {
        mc_samples: b.mc_samples,
        seed,
        rmse_theta_u_m: b.position_rmse(&scenario.unknown_position_nodes()),
        rmse_delta_s: b.delay_rmse(),
        sigma2_variance_bound: b.sigma2_var_bound,
        nodes: scenario
            .nodes
            .iter()
            .map(|n| NodeBound {
                id: n.id,
                role: n.role,
                covariance: rows(b.position_block(n.id)),
            })
            .collect(),
        delay_covariance: rows(&b.delay_block),
    }
}

fn cmd_bound(a: BoundArgs) -> Result<(), Failure> {
    let scenario = load_scenario(&a.scenario)?;
    if a.bound_samples == 0 {
        return Err(Error::Config("bound samples must be at least 1".into()).into());
    }
    let structure = observation_structure(&scenario)?;
    let mut rng = substream(a.seed, StreamPurpose::BoundSample, 0);
    let b = hcrb(&scenario, &structure, a.bound_samples, &mut rng)?;
    emit(&to_json(&bound_report(&scenario, &b, a.seed)), a.out.as_deref())?;
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let scenario = load_scenario(&a.scenario)?;
    let structure = observation_structure(&scenario)?;
    let mut rng = substream(a.seed, StreamPurpose::Trial, a.trial);
    let truth = sample_truth(&scenario, &mut rng)?;
    if a.strict_collision {
        check_no_collision(&truth, &scenario)?;
    } else if !validate_no_collision(&truth, &scenario) {
        eprintln!("warning: truth draw violates the anti-collision constraint");
    }
    let obs = synthesize_with(&truth, &structure, &mut rng)?;
    let file = ObservationFile {
        sequence: Some(obs.sequence.clone()),
        intervals: obs.y.iter().copied().collect(),
        truth: Some(truth.state.as_vector().iter().copied().collect()),
    };
    let text = toml::to_string(&file).map_err(|e| Error::Io(e.to_string()))?;
    emit(&text, a.out.as_deref())?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let text = match a.template {
        Template::Nominal => NOMINAL_TEMPLATE,
        Template::MultiAuxiliary => MULTI_AUX_TEMPLATE,
    };
    emit(text, a.out.as_deref())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::GenScenario(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
