//! `adastab` command-line front end.
//!
//! Every subcommand accepts `--config path.json`; flags override entries of
//! the config file, and both use the same field names as the library's JSON.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adastab::dynamics::{Family, OptimizerSpec, ParamName};
use adastab::experiments::{self, SweepSpec};
use adastab::objectives::{self, Builtin, Objective};
use adastab::perturbation;
use adastab::stability;
use adastab::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

const EXIT_FAILURE: u8 = 1;
const EXIT_DOMAIN: u8 = 2;
const EXIT_USAGE: u8 = 64;
/// Upper limit of the automatic Lyapunov horizon search.
const MAX_HORIZON: usize = 1 << 14;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownObjective(_)
            | Error::UnknownPreset(_)
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. } => EXIT_USAGE,
            _ => EXIT_DOMAIN,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError {
            code: EXIT_DOMAIN,
            message: format!("i/o error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "adastab", version, about = "Stability analysis and convergence experiments for adaptive gradient optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed-point eigenvalues, spectral radius and bound verdicts (JSON).
    Analyze(AnalyzeArgs),
    /// Run one optimizer trajectory and write it as CSV or JSON.
    Trajectory(TrajectoryArgs),
    /// Run a hyperparameter sweep from a preset or a config file.
    Sweep(SweepArgs),
    /// Run the sampled perturbation checks (JSON report).
    Verify(VerifyArgs),
    /// Print the smallest ε satisfying the ADAM bound.
    Boundary(BoundaryArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum Check {
    ThetaBound,
    HBound,
    Lyapunov,
    GradientLowerBound,
    Envelope,
}

impl Check {
    const ALL: [Check; 5] = [
        Check::ThetaBound,
        Check::HBound,
        Check::Lyapunov,
        Check::GradientLowerBound,
        Check::Envelope,
    ];

    fn name(&self) -> &'static str {
        match self {
            Check::ThetaBound => "theta_bound",
            Check::HBound => "h_bound",
            Check::Lyapunov => "lyapunov",
            Check::GradientLowerBound => "gradient_lower_bound",
            Check::Envelope => "envelope",
        }
    }
}

#[derive(Args, Serialize, Default)]
struct Common {
    /// JSON file with default values for any flag.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Serialize, Default)]
struct OptimizerFlags {
    /// sgd | rmsprop | adagrad | adadelta | adam
    #[arg(long)]
    family: Option<String>,
    /// ADAM variant: eps2_bias | eps2_nobias | orig_nobias | orig_bias
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    optimizer: OptimizerFlags,
    /// quad1d | quartic | twodim | scaled_quad:<c>
    #[arg(long)]
    objective: Option<String>,
    /// Point to analyze; defaults to the objective's minimum.
    #[arg(long = "w_star", alias = "w-star", value_delimiter = ',', allow_hyphen_values = true)]
    w_star: Option<Vec<f64>>,
}

#[derive(Args, Serialize)]
struct TrajectoryArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    optimizer: OptimizerFlags,
    #[arg(long)]
    objective: Option<String>,
    /// Start weights, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    w0: Option<Vec<f64>>,
    /// Iteration budget (default 10000).
    #[arg(long = "t_max", alias = "t-max")]
    t_max: Option<u64>,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// exp1 | exp2 | exp2_close | exp3 | adadelta_c19 | adadelta_c21 | adadelta_lr | sgd_appendix | rmsprop_appendix
    #[arg(long)]
    preset: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long = "variant")]
    variant: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    w0: Option<Vec<f64>>,
    #[arg(long = "t_max", alias = "t-max")]
    t_max: Option<u64>,
    /// Override the number of points on the first axis.
    #[arg(long = "param1_count", alias = "param1-count")]
    param1_count: Option<usize>,
    #[arg(long = "param2_count", alias = "param2-count")]
    param2_count: Option<usize>,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    optimizer: OptimizerFlags,
    /// Objective (default quad1d).
    #[arg(long)]
    objective: Option<String>,
    /// Run only these checks; all five by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    check: Option<Vec<Check>>,
    /// Sampling radius about the fixed point (default 0.05).
    #[arg(long)]
    radius: Option<f64>,
    /// Samples per check (default 10000).
    #[arg(long = "sample_count", alias = "sample-count")]
    sample_count: Option<usize>,
    /// Lyapunov horizon N; by default the smallest power of two that works.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start of the envelope trajectory; defaults to w⋆ shifted by the radius.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    w0: Option<Vec<f64>>,
    #[arg(long = "t_max", alias = "t-max")]
    t_max: Option<u64>,
}

#[derive(Args, Serialize)]
struct BoundaryArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    /// Largest Hessian eigenvalue; taken from --objective when omitted.
    #[arg(long = "mu_max", alias = "mu-max")]
    mu_max: Option<f64>,
    #[arg(long)]
    objective: Option<String>,
}

/// Reads the config file (if any) and overlays the non-null flags on it.
fn merged(config: Option<&Path>, defaults: Value, flags: &impl Serialize) -> CliResult<Map<String, Value>> {
    let mut map = match defaults {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => map.extend(m),
            Ok(_) => return Err(CliError::usage("config file must hold a JSON object")),
            Err(e) => return Err(CliError::usage(format!("invalid config {}: {e}", path.display()))),
        }
    }
    if let Value::Object(m) = serde_json::to_value(flags).expect("flags serialize") {
        map.extend(m.into_iter().filter(|(_, v)| !v.is_null()));
    }
    Ok(map)
}

fn field<T: DeserializeOwned>(map: &Map<String, Value>, key: &str) -> CliResult<Option<T>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| CliError::usage(format!("invalid value for `{key}`: {e}"))),
    }
}

fn require<T: DeserializeOwned>(map: &Map<String, Value>, key: &str) -> CliResult<T> {
    field(map, key)?.ok_or_else(|| CliError::usage(format!("missing required option --{key}")))
}

fn optimizer(map: &Map<String, Value>) -> CliResult<OptimizerSpec> {
    let family: String = require(map, "family")?;
    family.parse::<Family>().map_err(CliError::from)?;
    let _: f64 = require(map, "alpha")?;
    let spec: OptimizerSpec =
        serde_json::from_value(Value::Object(map.clone())).map_err(|e| CliError::usage(format!("invalid optimizer: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn objective(map: &Map<String, Value>) -> CliResult<Builtin> {
    let id: String = require(map, "objective")?;
    Ok(id.parse::<Builtin>()?)
}

fn sink(path: Option<&PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::usage(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit_json(map: &Map<String, Value>, value: &impl Serialize) -> CliResult<()> {
    let path: Option<PathBuf> = field(map, "output")?;
    let mut out = sink(path.as_ref())?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| io::Error::other(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult<u8> {
    let map = merged(args.common.config.as_deref(), json!({}), &args)?;
    let obj = objective(&map)?;
    let spec = optimizer(&map)?;
    let w_star: Vec<f64> = field(&map, "w_star")?.unwrap_or_else(|| obj.minimizer());
    let report = stability::analyze(&spec, &obj, &w_star)?;
    emit_json(&map, &report)?;
    Ok(0)
}

fn cmd_trajectory(args: TrajectoryArgs) -> CliResult<u8> {
    let map = merged(args.common.config.as_deref(), json!({"t_max": experiments::DEFAULT_T_MAX}), &args)?;
    let obj = objective(&map)?;
    let spec = optimizer(&map)?;
    let w0: Vec<f64> = require(&map, "w0")?;
    let t_max: u64 = require(&map, "t_max")?;
    let traj = experiments::run_trajectory(&spec, &obj, &w0, t_max)?;
    let w_star = obj.minimizer();
    let converged = experiments::classify_convergence(&traj, &w_star);
    let final_dist = traj.w_distances(&w_star).last().copied().unwrap_or(f64::NAN);
    let format: Format = field(&map, "format")?.unwrap_or(Format::Csv);
    let path: Option<PathBuf> = field(&map, "output")?;
    match format {
        Format::Csv => {
            let mut out = sink(path.as_ref())?;
            experiments::write_trajectory_csv(&traj, &w_star, &mut out)?;
            out.flush()?;
        }
        Format::Json => {
            let envelope = perturbation::convergence_envelope(&traj, &w_star).ok();
            let rows: Vec<Value> = traj.states.iter().map(|s| json!({"t": s.t, "x": s.x})).collect();
            let value = json!({
                "objective": traj.objective,
                "spec": traj.spec,
                "w_star": w_star,
                "diverged": traj.diverged,
                "converged": converged,
                "final_dist_to_min": final_dist,
                "envelope": envelope,
                "states": rows,
            });
            emit_json(&map, &value)?;
        }
    }
    eprintln!(
        "{} steps, diverged: {}, converged: {}, final dist_to_min: {}",
        traj.states.len() - 1,
        traj.diverged,
        converged,
        experiments::format_float(final_dist)
    );
    Ok(if traj.diverged { EXIT_FAILURE } else { 0 })
}

fn cmd_sweep(args: SweepArgs) -> CliResult<u8> {
    let map = merged(args.common.config.as_deref(), json!({}), &args)?;
    let mut spec: SweepSpec = match (field::<String>(&map, "preset")?, field::<SweepSpec>(&map, "sweep")?) {
        (Some(id), _) => experiments::preset(&id)?,
        (None, Some(custom)) => custom,
        (None, None) => return Err(CliError::usage("sweep needs --preset or a config file with a `sweep` entry")),
    };
    if let Some(o) = field::<String>(&map, "objective")? {
        spec.objective = o.parse()?;
    }
    if let Some(v) = field::<String>(&map, "variant")? {
        spec.optimizer.variant = v.parse()?;
    }
    for name in [ParamName::Alpha, ParamName::Epsilon, ParamName::Beta1, ParamName::Beta2, ParamName::Beta] {
        if let Some(x) = field::<f64>(&map, &name.to_string())? {
            spec.optimizer.hyper.set(name, x);
        }
    }
    if let Some(w0) = field(&map, "w0")? {
        spec.w0 = w0;
    }
    if let Some(t) = field(&map, "t_max")? {
        spec.t_max = t;
    }
    if let Some(c) = field(&map, "param1_count")? {
        spec.param1.count = c;
    }
    if let Some(c) = field(&map, "param2_count")? {
        spec.param2.count = c;
    }
    let jobs: Option<usize> = field(&map, "jobs")?;
    let grid = experiments::sweep(&spec, jobs)?;
    match field::<Format>(&map, "format")?.unwrap_or(Format::Csv) {
        Format::Csv => {
            let path: Option<PathBuf> = field(&map, "output")?;
            let mut out = sink(path.as_ref())?;
            experiments::write_sweep_csv(&grid, &mut out)?;
            out.flush()?;
        }
        Format::Json => emit_json(&map, &grid)?,
    }
    let counts: Vec<String> = grid.color_counts().iter().map(|(c, n)| format!("{c}={n}")).collect();
    eprintln!("{} cells: {}", grid.cells.len(), counts.join(" "));
    Ok(0)
}

#[derive(Serialize)]
struct CheckOutcome {
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl CheckOutcome {
    fn from<R: Serialize>(result: adastab::Result<R>, passed: impl Fn(&R) -> bool) -> Self {
        match result {
            Ok(r) => CheckOutcome {
                passed: passed(&r),
                report: Some(serde_json::to_value(&r).expect("reports serialize")),
                error: None,
            },
            Err(e) => CheckOutcome {
                passed: false,
                report: None,
                error: Some(e.to_string()),
            },
        }
    }
}

fn run_check(check: Check, map: &Map<String, Value>, spec: &OptimizerSpec, obj: &Builtin) -> CliResult<CheckOutcome> {
    let radius: f64 = require(map, "radius")?;
    let samples: usize = require(map, "sample_count")?;
    let seed: u64 = require(map, "seed")?;
    let needs_adam = || Error::NotApplicable(format!("{} requires the adam family", check.name()));
    Ok(match check {
        Check::ThetaBound => CheckOutcome::from(
            if spec.family == Family::Adam {
                perturbation::verify_theta_bound(obj, &spec.hyper, samples, radius, seed)
            } else {
                Err(needs_adam())
            },
            |r| r.passed(),
        ),
        Check::HBound => CheckOutcome::from(
            if spec.family == Family::Adam {
                perturbation::verify_h_bound(obj, &spec.hyper, samples, radius, seed)
            } else {
                Err(needs_adam())
            },
            |r| r.passed(),
        ),
        Check::Lyapunov => {
            let horizon = match field::<usize>(map, "horizon")? {
                Some(n) => Ok(n),
                None => perturbation::lyapunov_horizon(spec, obj, radius, seed, MAX_HORIZON),
            };
            CheckOutcome::from(
                horizon.and_then(|n| perturbation::lyapunov_certificate(spec, obj, n, samples, radius, seed)),
                |c| c.valid(),
            )
        }
        Check::GradientLowerBound => CheckOutcome::from(
            perturbation::gradient_lower_bound(obj, radius, samples, seed),
            |g| g.verified,
        ),
        Check::Envelope => {
            let w_star = obj.minimizer();
            let w0: Vec<f64> = match field(map, "w0")? {
                Some(w) => w,
                None => {
                    let mut w = w_star.clone();
                    w[0] += radius;
                    w
                }
            };
            let t_max: u64 = require(map, "t_max")?;
            CheckOutcome::from(
                experiments::run_trajectory(spec, obj, &w0, t_max).and_then(|t| perturbation::convergence_envelope(&t, &w_star)),
                |e| e.holds,
            )
        }
    })
}

fn cmd_verify(args: VerifyArgs) -> CliResult<u8> {
    let defaults = json!({
        "objective": "quad1d",
        "family": "adam",
        "variant": "eps2_bias",
        "alpha": 0.01,
        "epsilon": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "radius": 0.05,
        "sample_count": 10000,
        "seed": 0,
        "t_max": experiments::DEFAULT_T_MAX,
    });
    let map = merged(args.common.config.as_deref(), defaults, &args)?;
    let obj = objective(&map)?;
    let spec = optimizer(&map)?;
    let checks: Vec<Check> = field(&map, "check")?.unwrap_or_else(|| Check::ALL.to_vec());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let mut results = Map::new();
    let mut all_passed = true;
    for check in checks {
        let outcome = pool.install(|| run_check(check, &map, &spec, &obj))?;
        all_passed &= outcome.passed;
        results.insert(check.name().into(), serde_json::to_value(outcome).expect("outcome serializes"));
    }
    let report = json!({
        "objective": obj.id(),
        "spec": spec,
        "passed": all_passed,
        "checks": results,
    });
    emit_json(&map, &report)?;
    Ok(if all_passed { 0 } else { EXIT_FAILURE })
}

fn cmd_boundary(args: BoundaryArgs) -> CliResult<u8> {
    let map = merged(args.common.config.as_deref(), json!({}), &args)?;
    let alpha: f64 = require(&map, "alpha")?;
    let beta1: f64 = require(&map, "beta1")?;
    let mu_max = match field::<f64>(&map, "mu_max")? {
        Some(mu) => mu,
        None => {
            let obj = objective(&map).map_err(|_| CliError::usage("boundary needs --mu_max or --objective"))?;
            objectives::hessian_spectrum(&obj, &obj.minimizer())?.max()
        }
    };
    // Only α and β₁ enter the threshold.
    let hp = adastab::dynamics::HyperParams::adam(alpha, 1.0, beta1, 0.999);
    let eps_star = stability::epsilon_boundary(&hp, mu_max);
    match field::<Format>(&map, "format")?.unwrap_or(Format::Csv) {
        Format::Json => emit_json(&map, &json!({"alpha": alpha, "beta1": beta1, "mu_max": mu_max, "epsilon_boundary": eps_star}))?,
        Format::Csv => {
            let path: Option<PathBuf> = field(&map, "output")?;
            let mut out = sink(path.as_ref())?;
            writeln!(out, "{}", experiments::format_float(eps_star))?;
            out.flush()?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Trajectory(a) => cmd_trajectory(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Boundary(a) => cmd_boundary(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
