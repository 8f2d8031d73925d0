//! Monte Carlo campaigns: truth draw → synthesis → MAP estimate, repeated
//! over seeded trials, compared against the hybrid bound and written out
//! as CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::bound::{error_ellipse, hcrb, rmse_metric, BoundResult, Ellipse, DEFAULT_MC_SAMPLES};
use crate::error::{Error, Result};
use crate::estimate::{default_init, estimate_network, EstimatorConfig, PriorSpec, Termination};
use crate::model::StateVector;
use crate::scenario::{Role, Scenario};
use crate::simulate::{
    check_no_collision, observation_structure, sample_truth, substream, synthesize_with,
    validate_no_collision, StreamPurpose,
};

/// Confidence level of the reported ellipses.
pub const ELLIPSE_CONFIDENCE: f64 = 0.99;

/// Timing-noise sweep for the RMSE figures (ns).
pub const DEFAULT_SIGMA_SWEEP_NS: [f64; 7] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

/// Anchor prior std pair for the position-RMSE sweep (m).
pub const ANCHOR_STD_PAIR: [f64; 2] = [0.03, 0.2];

/// Delay prior std pair for the delay sweeps (s).
pub const DELAY_STD_PAIR: [f64; 2] = [1e-9, 100e-9];

/// Anchor prior std used with the delay sweeps (m).
pub const DELAY_SWEEP_ANCHOR_STD: f64 = 0.03;

pub const DEFAULT_MISMATCH_FACTOR: f64 = 10.0;

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.1;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ellipses,
    RmseVsSigma,
    RmseVsSigmaDelta,
    DelayRmse,
    MultiAuxiliary,
    ConvergenceHist,
    PriorMismatch,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Ellipses,
        ExperimentKind::RmseVsSigma,
        ExperimentKind::RmseVsSigmaDelta,
        ExperimentKind::DelayRmse,
        ExperimentKind::MultiAuxiliary,
        ExperimentKind::ConvergenceHist,
        ExperimentKind::PriorMismatch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Ellipses => "ellipses",
            ExperimentKind::RmseVsSigma => "rmse_vs_sigma",
            ExperimentKind::RmseVsSigmaDelta => "rmse_vs_sigma_delta",
            ExperimentKind::DelayRmse => "delay_rmse",
            ExperimentKind::MultiAuxiliary => "multi_auxiliary",
            ExperimentKind::ConvergenceHist => "convergence_hist",
            ExperimentKind::PriorMismatch => "prior_mismatch",
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name())
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown experiment kind {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub scenario_path: PathBuf,
    pub kind: ExperimentKind,
    /// Timing-noise sweep (ns); only used by the sweep kinds.
    pub sweep_ns: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub strict_collision: bool,
    pub ridge: bool,
    pub bound_samples: usize,
    pub mismatch_factor: f64,
    pub failure_threshold: f64,
}

impl ExperimentSpec {
    pub fn new(scenario_path: impl Into<PathBuf>, kind: ExperimentKind, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario_path: scenario_path.into(),
            kind,
            sweep_ns: DEFAULT_SIGMA_SWEEP_NS.to_vec(),
            trials: 1000,
            seed: 1,
            out_dir: out_dir.into(),
            strict_collision: false,
            ridge: false,
            bound_samples: DEFAULT_MC_SAMPLES,
            mismatch_factor: DEFAULT_MISMATCH_FACTOR,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.bound_samples == 0 {
            return Err(Error::Config("bound samples must be at least 1".into()));
        }
        if self.sweep_ns.is_empty() || self.sweep_ns.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("sweep values must be positive".into()));
        }
        if !(self.mismatch_factor.is_finite() && self.mismatch_factor > 0.0) {
            return Err(Error::Config("mismatch factor must be positive".into()));
        }
        Ok(())
    }
}

/// Reads and validates a scenario file. Every failure is a
/// [`Error::Config`] naming the file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Scenario::from_toml(&text).map_err(|e| {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        Error::Config(format!("{}: {msg}", path.display()))
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CampaignOptions {
    pub trials: usize,
    pub seed: u64,
    pub bound_samples: usize,
    pub strict_collision: bool,
}

impl CampaignOptions {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            bound_samples: DEFAULT_MC_SAMPLES,
            strict_collision: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub index: usize,
    pub truth: StateVector,
    pub estimate: Option<StateVector>,
    pub sigma2_hat: Option<f64>,
    pub converged: bool,
    pub termination: Option<Termination>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub collision_free: bool,
    pub error: Option<String>,
}

/// Runs one seeded trial; estimation errors are recorded, not returned.
pub fn run_trial(
    scenario: &Scenario,
    structure: &crate::model::ObservationSet,
    prior: &PriorSpec,
    init: &StateVector,
    estimator: &EstimatorConfig,
    seed: u64,
    index: usize,
    strict_collision: bool,
) -> Result<TrialOutcome> {
    let mut rng = substream(seed, StreamPurpose::Trial, index as u64);
    let truth = sample_truth(scenario, &mut rng)?;
    let collision_free = validate_no_collision(&truth, scenario);
    if strict_collision {
        check_no_collision(&truth, scenario)?;
    }
    let mut out = TrialOutcome {
        index,
        truth: truth.state.clone(),
        estimate: None,
        sigma2_hat: None,
        converged: false,
        termination: None,
        outer_iters: 0,
        inner_iters: 0,
        collision_free,
        error: None,
    };
    let result = synthesize_with(&truth, structure, &mut rng)
        .and_then(|obs| estimate_network(&obs, prior, init, estimator));
    match result {
        Ok(r) => {
            out.estimate = Some(r.state(scenario.layout())?);
            out.sigma2_hat = Some(r.sigma2_hat);
            out.converged = r.converged;
            out.termination = Some(r.termination);
            out.outer_iters = r.outer_iters;
            out.inner_iters = r.inner_iters_total;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    Ok(out)
}

/// Aggregated estimator statistics of a campaign.
#[derive(Debug, Clone)]
pub struct CampaignStats {
    pub trials: usize,
    /// Trials that produced an estimate (converged or not).
    pub estimated: usize,
    pub converged: usize,
    pub collisions: usize,
    /// Per-node position MSE matrices, indexed by `id - 1`.
    pub position_mse: Vec<DMatrix<f64>>,
    /// Per-node mean position error, indexed by `id - 1`.
    pub position_bias: Vec<DVector<f64>>,
    pub delay_mse: DMatrix<f64>,
    /// Outer iterations of each converged trial, in trial order.
    pub outer_iterations: Vec<usize>,
    pub sigma_hat: Vec<f64>,
    pub errors: Vec<(usize, String)>,
}

impl CampaignStats {
    pub fn from_outcomes(scenario: &Scenario, outcomes: &[TrialOutcome]) -> Self {
        let layout = scenario.layout();
        let d = layout.dim;
        let n = layout.nodes;
        let mut position_mse = vec![DMatrix::zeros(d, d); n];
        let mut position_bias = vec![DVector::zeros(d); n];
        let mut delay_mse = DMatrix::zeros(n - 1, n - 1);
        let mut estimated = 0;
        let mut converged = 0;
        let mut outer_iterations = Vec::new();
        let mut sigma_hat = Vec::new();
        let mut errors = Vec::new();
        for o in outcomes {
            if let Some(e) = &o.error {
                errors.push((o.index, e.clone()));
            }
            let Some(est) = &o.estimate else { continue };
            estimated += 1;
            if o.converged {
                converged += 1;
                outer_iterations.push(o.outer_iters);
            }
            if let Some(s2) = o.sigma2_hat {
                sigma_hat.push(s2.sqrt());
            }
            for id in 1..=n {
                let e = DVector::from_iterator(
                    d,
                    est.position(id).iter().zip(o.truth.position(id)).map(|(a, b)| a - b),
                );
                position_mse[id - 1] += &e * e.transpose();
                position_bias[id - 1] += e;
            }
            let de = DVector::from_iterator(
                n - 1,
                est.delays().iter().zip(o.truth.delays()).map(|(a, b)| a - b),
            );
            delay_mse += &de * de.transpose();
        }
        if estimated > 0 {
            let k = estimated as f64;
            position_mse.iter_mut().for_each(|m| *m /= k);
            position_bias.iter_mut().for_each(|m| *m /= k);
            delay_mse /= k;
        }
        Self {
            trials: outcomes.len(),
            estimated,
            converged,
            collisions: outcomes.iter().filter(|o| !o.collision_free).count(),
            position_mse,
            position_bias,
            delay_mse,
            outer_iterations,
            sigma_hat,
            errors,
        }
    }

    pub fn position_rmse(&self, ids: &[usize]) -> f64 {
        let tr: f64 = ids.iter().map(|&id| self.position_mse[id - 1].trace()).sum();
        tr.sqrt() / ids.len() as f64
    }

    pub fn delay_rmse(&self) -> f64 {
        rmse_metric(&self.delay_mse, self.delay_mse.nrows())
    }

    pub fn convergence_rate(&self) -> f64 {
        self.converged as f64 / self.trials as f64
    }

    pub fn failure_rate(&self) -> f64 {
        1.0 - self.convergence_rate()
    }

    pub fn mean_outer_iterations(&self) -> f64 {
        if self.outer_iterations.is_empty() {
            return f64::NAN;
        }
        self.outer_iterations.iter().sum::<usize>() as f64 / self.outer_iterations.len() as f64
    }

    pub fn median_sigma_hat(&self) -> f64 {
        let mut v = self.sigma_hat.clone();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    }

    /// Histogram of outer iteration counts of converged trials.
    pub fn iteration_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &k in &self.outer_iterations {
            *h.entry(k).or_insert(0) += 1;
        }
        h
    }
}

/// Estimator statistics and the matching bound for one configuration.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub stats: CampaignStats,
    /// `None` for noiseless scenarios, where the Fisher information is
    /// unbounded.
    pub bound: Option<BoundResult>,
    pub outcomes: Vec<TrialOutcome>,
}

impl PointResult {
    pub fn rmse_theta_u(&self, scenario: &Scenario) -> f64 {
        self.stats.position_rmse(&scenario.unknown_position_nodes())
    }

    pub fn hcrb_theta_u(&self, scenario: &Scenario) -> Option<f64> {
        self.bound
            .as_ref()
            .map(|b| b.position_rmse(&scenario.unknown_position_nodes()))
    }

    pub fn hcrb_delta(&self) -> Option<f64> {
        self.bound.as_ref().map(|b| b.delay_rmse())
    }
}

/// Runs `trials` independent pipelines in parallel and computes the bound.
/// Results depend only on the scenario and the options, not on scheduling.
pub fn run_point(scenario: &Scenario, opts: &CampaignOptions) -> Result<PointResult> {
    scenario.validate()?;
    let structure = observation_structure(scenario)?;
    let prior = PriorSpec::from_scenario(scenario);
    let init = default_init(scenario, &prior);
    let estimator = scenario.estimator;
    let outcomes = (0..opts.trials)
        .into_par_iter()
        .map(|i| {
            run_trial(
                scenario,
                &structure,
                &prior,
                &init,
                &estimator,
                opts.seed,
                i,
                opts.strict_collision,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = CampaignStats::from_outcomes(scenario, &outcomes);
    let bound = if scenario.noise_std > 0.0 {
        let mut rng = substream(opts.seed, StreamPurpose::BoundSample, 0);
        Some(hcrb(scenario, &structure, opts.bound_samples, &mut rng)?)
    } else {
        None
    };
    Ok(PointResult {
        stats,
        bound,
        outcomes,
    })
}

/// Sets every anchor's prior std (and clears any separate true std).
pub fn with_anchor_std(scenario: &Scenario, std: f64) -> Scenario {
    let mut s = scenario.clone();
    for n in s.nodes.iter_mut().filter(|n| n.role == Role::Anchor) {
        n.prior_std = Some(std);
        n.true_std = None;
    }
    s
}

/// Estimator assumes anchor std `factor × σ_a` while the truth keeps `σ_a`.
pub fn with_prior_mismatch(scenario: &Scenario, factor: f64) -> Scenario {
    let mut s = scenario.clone();
    for n in s.nodes.iter_mut().filter(|n| n.role == Role::Anchor) {
        let true_std = n.true_std.or(n.prior_std).expect("validated anchor");
        n.true_std = Some(true_std);
        n.prior_std = Some(n.prior_std.expect("validated anchor") * factor);
    }
    s
}

pub fn with_delay_std(scenario: &Scenario, std: f64) -> Scenario {
    let mut s = scenario.clone();
    s.delay.std = std;
    s.delay.true_std = None;
    s
}

pub fn with_noise_std(scenario: &Scenario, std: f64) -> Scenario {
    let mut s = scenario.clone();
    s.noise_std = std;
    s
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub kind: String,
    pub file: String,
    pub seed: u64,
    pub trials: usize,
    pub rows: usize,
    pub rmse_theta_u_m: Option<f64>,
    pub hcrb_theta_u_m: Option<f64>,
    pub rmse_delta_ns: Option<f64>,
    pub hcrb_delta_ns: Option<f64>,
    pub mean_outer_iters: Option<f64>,
    pub convergence_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outputs: Vec<OutputRecord>,
    /// Largest non-convergence rate over all campaign points.
    pub worst_failure_rate: f64,
    pub points: Vec<(String, PointResult)>,
}

impl RunSummary {
    pub fn exceeds(&self, threshold: f64) -> bool {
        self.worst_failure_rate > threshold
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Missing values are written as empty cells.
fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 10] = [
    "sigma_ns",
    "sigma_a_m",
    "sigma_delta_ns",
    "trials",
    "rmse_theta_u_m",
    "hcrb_theta_u_m",
    "rmse_delta_ns",
    "hcrb_delta_ns",
    "mean_outer_iters",
    "convergence_rate",
];

pub const ELLIPSE_HEADER: [&str; 22] = [
    "node",
    "role",
    "x_m",
    "y_m",
    "bias_x_m",
    "bias_y_m",
    "mse_xx",
    "mse_xy",
    "mse_yy",
    "hcrb_xx",
    "hcrb_xy",
    "hcrb_yy",
    "chi2_scale",
    "mse_major_m",
    "mse_minor_m",
    "mse_angle_rad",
    "hcrb_major_m",
    "hcrb_minor_m",
    "hcrb_angle_rad",
    "trials",
    "converged",
    "confidence",
];

pub const HISTOGRAM_HEADER: [&str; 2] = ["outer_iterations", "count"];

pub const MISMATCH_HEADER: [&str; 11] = [
    "sigma_a_true_m",
    "sigma_a_assumed_m",
    "trials",
    "rmse_theta_u_m",
    "hcrb_theta_u_m",
    "ratio",
    "rmse_delta_ns",
    "hcrb_delta_ns",
    "mean_outer_iters",
    "convergence_rate",
    "sigma_ns",
];

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Anchor => "anchor",
        Role::Auxiliary => "auxiliary",
        Role::Receiver => "receiver",
    }
}

fn anchor_std(scenario: &Scenario) -> f64 {
    let a = scenario.anchors()[0];
    scenario.node(a).prior_std.expect("validated anchor")
}

fn sweep_row(scenario: &Scenario, sigma_ns: f64, p: &PointResult, trials: usize) -> Vec<String> {
    vec![
        fmt(sigma_ns),
        fmt(anchor_std(scenario)),
        fmt(scenario.delay.std * 1e9),
        trials.to_string(),
        fmt(p.rmse_theta_u(scenario)),
        fmt_opt(p.hcrb_theta_u(scenario)),
        fmt(p.stats.delay_rmse() * 1e9),
        fmt_opt(p.hcrb_delta().map(|v| v * 1e9)),
        fmt(p.stats.mean_outer_iterations()),
        fmt(p.stats.convergence_rate()),
    ]
}

fn point_record(kind: ExperimentKind, spec: &ExperimentSpec, scenario: &Scenario, p: &PointResult, rows: usize) -> OutputRecord {
    OutputRecord {
        kind: kind.name().into(),
        file: kind.file_name(),
        seed: spec.seed,
        trials: spec.trials,
        rows,
        rmse_theta_u_m: Some(p.rmse_theta_u(scenario)),
        hcrb_theta_u_m: p.hcrb_theta_u(scenario),
        rmse_delta_ns: Some(p.stats.delay_rmse() * 1e9),
        hcrb_delta_ns: p.hcrb_delta().map(|v| v * 1e9),
        mean_outer_iters: Some(p.stats.mean_outer_iterations()),
        convergence_rate: Some(p.stats.convergence_rate()),
    }
}

/// Per-node ellipse rows for a 2-D scenario.
pub fn ellipse_rows(scenario: &Scenario, p: &PointResult) -> Result<Vec<Vec<String>>> {
    if scenario.dimension != 2 {
        return Err(Error::Config("ellipse experiments need a 2-D scenario".into()));
    }
    let mut rows = Vec::new();
    for node in &scenario.nodes {
        let pos = node.position.as_ref().expect("validated");
        let mse = &p.stats.position_mse[node.id - 1];
        let bias = &p.stats.position_bias[node.id - 1];
        let hb = p.bound.as_ref().map(|b| b.position_block(node.id));
        let me: Ellipse = error_ellipse(mse, ELLIPSE_CONFIDENCE);
        let he = hb.map(|h| error_ellipse(h, ELLIPSE_CONFIDENCE));
        rows.push(vec![
            node.id.to_string(),
            role_name(node.role).into(),
            fmt(pos[0]),
            fmt(pos[1]),
            fmt(bias[0]),
            fmt(bias[1]),
            fmt(mse[(0, 0)]),
            fmt(mse[(0, 1)]),
            fmt(mse[(1, 1)]),
            fmt_opt(hb.map(|h| h[(0, 0)])),
            fmt_opt(hb.map(|h| 0.5 * (h[(0, 1)] + h[(1, 0)]))),
            fmt_opt(hb.map(|h| h[(1, 1)])),
            fmt(me.scale),
            fmt(me.semi_major),
            fmt(me.semi_minor),
            fmt(me.orientation),
            fmt_opt(he.map(|e| e.semi_major)),
            fmt_opt(he.map(|e| e.semi_minor)),
            fmt_opt(he.map(|e| e.orientation)),
            p.stats.trials.to_string(),
            p.stats.converged.to_string(),
            fmt(ELLIPSE_CONFIDENCE),
        ]);
    }
    Ok(rows)
}

/// Runs one experiment kind on a loaded scenario and writes its CSV into
/// `spec.out_dir`. Does not write the summary or manifest.
pub fn run_kind(scenario: &Scenario, kind: ExperimentKind, spec: &ExperimentSpec) -> Result<(Vec<OutputRecord>, Vec<(String, PointResult)>)> {
    let opts = CampaignOptions {
        trials: spec.trials,
        seed: spec.seed,
        bound_samples: spec.bound_samples,
        strict_collision: spec.strict_collision,
    };
    let mut base = scenario.clone();
    if spec.ridge {
        base.estimator.ridge = true;
    }
    let path = spec.out_dir.join(kind.file_name());
    let mut points = Vec::new();
    let records = match kind {
        ExperimentKind::Ellipses | ExperimentKind::MultiAuxiliary => {
            let p = run_point(&base, &opts)?;
            let rows = ellipse_rows(&base, &p)?;
            write_csv(&path, &ELLIPSE_HEADER, &rows)?;
            let rec = point_record(kind, spec, &base, &p, rows.len());
            points.push((kind.name().to_string(), p));
            vec![rec]
        }
        ExperimentKind::RmseVsSigma | ExperimentKind::RmseVsSigmaDelta | ExperimentKind::DelayRmse => {
            let families: Vec<Scenario> = match kind {
                ExperimentKind::RmseVsSigma => ANCHOR_STD_PAIR.iter().map(|&s| with_anchor_std(&base, s)).collect(),
                _ => DELAY_STD_PAIR
                    .iter()
                    .map(|&s| with_delay_std(&with_anchor_std(&base, DELAY_SWEEP_ANCHOR_STD), s))
                    .collect(),
            };
            let mut rows = Vec::new();
            for fam in &families {
                for &sigma_ns in &spec.sweep_ns {
                    let s = with_noise_std(fam, sigma_ns * 1e-9);
                    let p = run_point(&s, &opts)?;
                    rows.push(sweep_row(&s, sigma_ns, &p, spec.trials));
                    points.push((format!("{}:{}", kind.name(), rows.len() - 1), p));
                }
            }
            write_csv(&path, &SWEEP_HEADER, &rows)?;
            vec![OutputRecord {
                kind: kind.name().into(),
                file: kind.file_name(),
                seed: spec.seed,
                trials: spec.trials,
                rows: rows.len(),
                rmse_theta_u_m: None,
                hcrb_theta_u_m: None,
                rmse_delta_ns: None,
                hcrb_delta_ns: None,
                mean_outer_iters: None,
                convergence_rate: None,
            }]
        }
        ExperimentKind::ConvergenceHist => {
            let p = run_point(&base, &opts)?;
            let hist = p.stats.iteration_histogram();
            let rows: Vec<Vec<String>> = hist
                .iter()
                .map(|(k, c)| vec![k.to_string(), c.to_string()])
                .collect();
            write_csv(&path, &HISTOGRAM_HEADER, &rows)?;
            let rec = point_record(kind, spec, &base, &p, rows.len());
            points.push((kind.name().to_string(), p));
            vec![rec]
        }
        ExperimentKind::PriorMismatch => {
            let s = with_prior_mismatch(&base, spec.mismatch_factor);
            let p = run_point(&s, &opts)?;
            let a = s.anchors()[0];
            let true_std = s.node(a).true_std.expect("set above");
            let rmse = p.rmse_theta_u(&s);
            let hcrb_u = p.hcrb_theta_u(&s);
            let row = vec![
                fmt(true_std),
                fmt(anchor_std(&s)),
                spec.trials.to_string(),
                fmt(rmse),
                fmt_opt(hcrb_u),
                fmt_opt(hcrb_u.map(|h| rmse / h)),
                fmt(p.stats.delay_rmse() * 1e9),
                fmt_opt(p.hcrb_delta().map(|v| v * 1e9)),
                fmt(p.stats.mean_outer_iterations()),
                fmt(p.stats.convergence_rate()),
                fmt(s.noise_std * 1e9),
            ];
            write_csv(&path, &MISMATCH_HEADER, &[row])?;
            let rec = point_record(kind, spec, &s, &p, 1);
            points.push((kind.name().to_string(), p));
            vec![rec]
        }
    };
    Ok((records, points))
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    spec: &'a ExperimentSpec,
    scenario: &'a Scenario,
    outputs: &'a [OutputRecord],
}

/// Loads the scenario, runs the experiment, writes `<kind>.csv`,
/// `summary.csv` and `manifest.json` into the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary> {
    spec.validate()?;
    let scenario = load_scenario(&spec.scenario_path)?;
    fs::create_dir_all(&spec.out_dir)?;
    let (outputs, points) = run_kind(&scenario, spec.kind, spec)?;

    let mut w = csv::Writer::from_path(spec.out_dir.join("summary.csv"))?;
    for rec in &outputs {
        w.serialize(rec)?;
    }
    w.flush()?;

    let manifest = Manifest {
        version: VERSION,
        spec,
        scenario: &scenario,
        outputs: &outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(spec.out_dir.join("manifest.json"), json + "\n")?;

    let worst_failure_rate = points
        .iter()
        .map(|(_, p)| p.stats.failure_rate())
        .fold(0.0, f64::max);
    Ok(RunSummary {
        outputs,
        worst_failure_rate,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert_eq!("rmse-vs-sigma".parse::<ExperimentKind>().unwrap(), ExperimentKind::RmseVsSigma);
        assert!("scatter".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = ExperimentSpec::new("x.toml", ExperimentKind::Ellipses, "out");
        assert!(s.validate().is_ok());
        s.trials = 0;
        assert!(s.validate().is_err());
        s.trials = 1;
        s.sweep_ns = vec![1.0, -2.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn mismatch_keeps_truth_spread() {
        let s = Scenario::from_toml(include_str!("../scenarios/nominal.toml")).unwrap();
        let m = with_prior_mismatch(&s, 10.0);
        for id in m.anchors() {
            assert_eq!(m.node(id).true_std, Some(0.2));
            assert!((m.node(id).prior_std.unwrap() - 2.0).abs() < 1e-15);
        }
        let p = PriorSpec::true_prior(&m);
        assert!((p.precision[(0, 0)] - 25.0).abs() < 1e-12);
        let q = PriorSpec::from_scenario(&m);
        assert!((q.precision[(0, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn histogram_and_median() {
        let s = Scenario::from_toml(include_str!("../scenarios/nominal.toml")).unwrap();
        let mut stats = CampaignStats::from_outcomes(&s, &[]);
        stats.outer_iterations = vec![4, 5, 5, 6];
        stats.sigma_hat = vec![3.0, 1.0, 2.0];
        let h = stats.iteration_histogram();
        assert_eq!(h.get(&5), Some(&2));
        assert_eq!(stats.mean_outer_iterations(), 5.0);
        assert_eq!(stats.median_sigma_hat(), 2.0);
    }
}
