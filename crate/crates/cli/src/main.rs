//! `itu-match` command-line front end.
//!
//! Every command reads JSON inputs, runs one solver or estimator and writes a
//! deterministic JSON (or CSV) result that embeds the fully resolved run
//! configuration. Exit status: 0 on success, 2 on malformed input (with an
//! error JSON on stderr naming the offending field), 3 when a solver or
//! optimizer fails (the error JSON carries the residual trace).

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use itu_match::compstats::{delta_matching, symmetry_diagnostic};
use itu_match::estimation::{
    fit_mle, read_sample_csv, sample_synthetic, write_sample_csv, FitOptions, ModelFile, ObservedSample,
    ParametricModel,
};
use itu_match::full_assignment::{solve_full, Normalization, Side};
use itu_match::market::MarketFile;
use itu_match::one_to_many::{solve_experimental, OtmEconomy, OtmFile, OtmOutcome};
use itu_match::search::{solve_steady_state, SearchParams};
use itu_match::{solve_ipfp, solve_jacobi, verify, EquilibriumOutcome, Exec, ItuError, Market, SolverOptions};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "itu-match",
    version,
    about = "Matching markets with imperfectly transferable utility"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the equilibrium with singles (or verify a stored outcome).
    Solve(SolveArgs),
    /// Solve the full-assignment (no singles) equilibrium.
    SolveFull(FullArgs),
    /// Maximum-likelihood estimation of a parametric model.
    Estimate(EstimateArgs),
    /// Comparative statics with respect to population masses.
    Compstats(CompstatsArgs),
    /// Steady state of the search-and-matching model.
    Search(SearchArgs),
    /// Experimental one-to-many (firms hiring bundles of workers) solver.
    OneToMany(OtmArgs),
    /// Draw a synthetic sample from a parametric model.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Input file (market, model or economy JSON).
    #[arg(long)]
    input: PathBuf,
    /// Result file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Convergence tolerance (command-specific default).
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration budget.
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Random seed (only `simulate` draws random numbers).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Clone)]
struct MarketOpts {
    /// Override the market's temperature.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Solver {
    Ipfp,
    Jacobi,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    market: MarketOpts,
    #[arg(long, value_enum, default_value_t = Solver::Ipfp)]
    solver: Solver,
    /// Only recompute the residuals of the outcome stored in `--outcome`.
    #[arg(long, requires = "outcome")]
    verify_only: bool,
    /// Result file of an earlier `solve` (or a bare outcome JSON).
    #[arg(long)]
    outcome: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PinSide {
    Men,
    Women,
}

#[derive(Args)]
struct FullArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    market: MarketOpts,
    #[arg(long, value_enum, default_value_t = PinSide::Men)]
    pin_side: PinSide,
    #[arg(long, default_value_t = 0)]
    pin_index: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pin_value: f64,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// Sample file: JSON (a `simulate` result or bare frequencies) or CSV
    /// with columns x_label,y_label,count.
    #[arg(long)]
    sample: PathBuf,
}

#[derive(Args)]
struct CompstatsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    market: MarketOpts,
    /// Comma-separated change in each man type's mass (default zeros).
    #[arg(long, allow_hyphen_values = true)]
    delta_n: Option<String>,
    /// Comma-separated change in each woman type's mass (default zeros).
    #[arg(long, allow_hyphen_values = true)]
    delta_m: Option<String>,
    /// Also report the welfare-derivative symmetry diagnostic.
    #[arg(long)]
    symmetry: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    market: MarketOpts,
    /// Meeting intensity.
    #[arg(long)]
    rho: f64,
    /// Match destruction intensity.
    #[arg(long)]
    delta: f64,
    /// Discount rate.
    #[arg(long)]
    r: f64,
}

#[derive(Args)]
struct OtmArgs {
    #[command(flatten)]
    common: Common,
    /// Largest bundle enumerated (overrides the file; default 3).
    #[arg(long)]
    max_bundle_size: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated parameter vector θ = (λ, u, v).
    #[arg(long, allow_hyphen_values = true)]
    theta: String,
    /// Number of households drawn.
    #[arg(long, default_value_t = 10_000)]
    n_hat: u64,
}

/// Fully resolved configuration, embedded in every result.
#[derive(Serialize)]
struct RunConfig {
    command: &'static str,
    input: String,
    tol: f64,
    max_iter: usize,
    seed: u64,
    format: Format,
    #[serde(flatten)]
    extra: serde_json::Map<String, Value>,
}

/// CLI failure: exit code 2 for input problems, 3 for solver failures.
#[derive(Debug)]
enum Failure {
    Input {
        kind: &'static str,
        field: String,
        message: String,
    },
    Core(ItuError),
    /// A result was produced but reports failure (written before exiting).
    Reported {
        message: String,
        trace: Vec<f64>,
    },
}

impl From<ItuError> for Failure {
    fn from(e: ItuError) -> Self {
        Failure::Core(e)
    }
}

fn input_error(field: impl Into<String>, message: impl Into<String>) -> Failure {
    Failure::Input {
        kind: "validation",
        field: field.into(),
        message: message.into(),
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Input { .. } => 2,
            Failure::Core(ItuError::Validation { .. } | ItuError::Domain(_)) => 2,
            Failure::Core(_) | Failure::Reported { .. } => 3,
        }
    }

    fn to_json(&self) -> Value {
        let body = match self {
            Failure::Input { kind, field, message } => json!({"kind": kind, "field": field, "message": message}),
            Failure::Core(e) => {
                let mut o = json!({"kind": e.kind(), "message": e.to_string()});
                match e {
                    ItuError::Validation { field, message } => {
                        o["field"] = json!(field);
                        o["message"] = json!(message);
                    }
                    ItuError::Convergence {
                        residual,
                        trace,
                        iterations,
                        ..
                    } => {
                        o["residual"] = json!(residual);
                        o["iterations"] = json!(iterations);
                        o["trace"] = json!(trace);
                    }
                    ItuError::Optimization { trace, .. } => o["trace"] = json!(trace),
                    ItuError::Numerical { condition, .. } => o["condition"] = json!(condition),
                    _ => {}
                }
                o
            }
            Failure::Reported { message, trace } => json!({"kind": "convergence", "message": message, "trace": trace}),
        };
        json!({ "error": body })
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path, field: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| input_error(field, format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, field: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| Failure::Input {
        kind: "parse",
        field: field.to_string(),
        message: e.to_string(),
    })
}

fn parse_list(text: &str, field: &str, len: usize) -> CliResult<Vec<f64>> {
    let vals = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| input_error(field, format!("expected comma-separated numbers: {e}")))?;
    if vals.len() != len {
        return Err(input_error(field, format!("expected {len} values, got {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(input_error(field, "values must be finite"));
    }
    Ok(vals)
}

fn load_market(common: &Common, opts: &MarketOpts) -> CliResult<Market> {
    let file: MarketFile = parse_json(&read_text(&common.input, "input")?, "input")?;
    let mut market = Market::try_from(file)?;
    if let Some(s) = opts.sigma {
        market.sigma = s;
        market.validate()?;
    }
    Ok(market)
}

fn resolve(common: &Common, command: &'static str, default_tol: f64) -> CliResult<RunConfig> {
    let tol = common.tol.unwrap_or(default_tol);
    if !(tol.is_finite() && tol > 0.0) {
        return Err(input_error("tol", format!("must be finite and > 0, got {tol}")));
    }
    if common.max_iter == 0 {
        return Err(input_error("max_iter", "must be at least 1"));
    }
    Ok(RunConfig {
        command,
        input: common.input.display().to_string(),
        tol,
        max_iter: common.max_iter,
        seed: common.seed,
        format: common.format,
        extra: serde_json::Map::new(),
    })
}

impl RunConfig {
    fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(
            key.to_string(),
            serde_json::to_value(value).expect("serializable config"),
        );
        self
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions::tol(self.tol)
            .with_max_iter(self.max_iter)
            .with_exec(Exec::Parallel)
    }
}

fn emit(common: &Common, json_body: Value, csv_body: Option<String>) -> CliResult<()> {
    let text = match common.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&json_body).expect("serializable result");
            s.push('\n');
            s
        }
        Format::Csv => csv_body.ok_or_else(|| input_error("format", "csv output is not available for this command"))?,
    };
    match &common.output {
        Some(path) => {
            fs::write(path, text).map_err(|e| input_error("output", format!("cannot write {}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_solve(a: SolveArgs) -> CliResult<()> {
    let market = load_market(&a.common, &a.market)?;
    let cfg = resolve(&a.common, "solve", 1e-10)?
        .with("sigma", market.sigma)
        .with("solver", a.solver)
        .with("verify_only", a.verify_only);
    if a.verify_only {
        let path = a.outcome.as_ref().expect("clap enforces --outcome");
        let raw: Value = parse_json(&read_text(path, "outcome")?, "outcome")?;
        let inner = raw.get("outcome").cloned().unwrap_or(raw);
        let outcome: EquilibriumOutcome = serde_json::from_value(inner).map_err(|e| Failure::Input {
            kind: "parse",
            field: "outcome".into(),
            message: e.to_string(),
        })?;
        let cfg = cfg.with("outcome", path.display().to_string());
        let residuals = verify(&market, &outcome);
        return emit(&a.common, json!({"config": cfg, "residuals": residuals}), None);
    }
    let opts = cfg.solver_options();
    let outcome = match a.solver {
        Solver::Ipfp => solve_ipfp(&market, &opts)?,
        Solver::Jacobi => solve_jacobi(&market, &opts)?,
    };
    let residuals = verify(&market, &outcome);
    let csv = output::matching_csv(&market, &outcome.matching);
    emit(
        &a.common,
        json!({"config": cfg, "market": MarketFile::from(market), "outcome": outcome, "residuals": residuals}),
        Some(csv),
    )
}

fn run_full(a: FullArgs) -> CliResult<()> {
    let market = load_market(&a.common, &a.market)?;
    let side = match a.pin_side {
        PinSide::Men => Side::Men,
        PinSide::Women => Side::Women,
    };
    let norm = Normalization {
        side,
        index: a.pin_index,
        value: a.pin_value,
    };
    let cfg = resolve(&a.common, "solve-full", 1e-10)?
        .with("sigma", market.sigma)
        .with("normalization", norm);
    let result = solve_full(&market, &cfg.solver_options(), norm)?;
    let csv = output::matching_csv(&market, &result.matching);
    emit(&a.common, json!({"config": cfg, "result": result}), Some(csv))
}

fn load_model(common: &Common) -> CliResult<ParametricModel> {
    let file: ModelFile = parse_json(&read_text(&common.input, "input")?, "input")?;
    Ok(ParametricModel::from_file(&file)?)
}

fn run_estimate(a: EstimateArgs) -> CliResult<()> {
    let model = load_model(&a.common)?;
    let cfg = resolve(&a.common, "estimate", 1e-6)?.with("sample", a.sample.display().to_string());
    let text = read_text(&a.sample, "sample")?;
    let is_csv = a.sample.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let sample = if is_csv {
        read_sample_csv(text.as_bytes(), &model).map_err(|e| Failure::Core(e.within("sample")))?
    } else {
        let raw: Value = parse_json(&text, "sample")?;
        let inner = raw.get("sample").cloned().unwrap_or(raw);
        let s: ObservedSample = serde_json::from_value(inner).map_err(|e| Failure::Input {
            kind: "parse",
            field: "sample".into(),
            message: e.to_string(),
        })?;
        s.validate().map_err(|e| e.within("sample"))?;
        s
    };
    let fit = fit_mle(
        &model,
        &sample,
        None,
        FitOptions {
            tol: cfg.tol,
            max_iter: cfg.max_iter,
        },
    )?;
    let csv = output::fit_csv(&model, &fit);
    emit(&a.common, json!({"config": cfg, "fit": fit}), Some(csv))
}

fn run_compstats(a: CompstatsArgs) -> CliResult<()> {
    let market = load_market(&a.common, &a.market)?;
    let dn = match &a.delta_n {
        Some(t) => parse_list(t, "delta_n", market.nx())?,
        None => vec![0.0; market.nx()],
    };
    let dm = match &a.delta_m {
        Some(t) => parse_list(t, "delta_m", market.ny())?,
        None => vec![0.0; market.ny()],
    };
    let cfg = resolve(&a.common, "compstats", 1e-12)?
        .with("sigma", market.sigma)
        .with("delta_n", &dn)
        .with("delta_m", &dm)
        .with("symmetry", a.symmetry);
    let outcome = solve_ipfp(&market, &cfg.solver_options())?;
    let result = delta_matching(&market, &outcome, &DVector::from_vec(dn), &DVector::from_vec(dm))?;
    let symmetry = if a.symmetry {
        Some(symmetry_diagnostic(&market, &outcome, Exec::Parallel)?)
    } else {
        None
    };
    let csv = output::compstats_csv(&market, &result);
    emit(
        &a.common,
        json!({"config": cfg, "outcome": outcome, "compstats": result, "symmetry": symmetry}),
        Some(csv),
    )
}

fn run_search(a: SearchArgs) -> CliResult<()> {
    let market = load_market(&a.common, &a.market)?;
    let params = SearchParams {
        rho: a.rho,
        delta: a.delta,
        r: a.r,
    };
    let cfg = resolve(&a.common, "search", 1e-10)?
        .with("sigma", market.sigma)
        .with("params", params);
    let out = solve_steady_state(&market, &params, &cfg.solver_options(), None)?;
    let csv = output::search_csv(&market, &out);
    emit(&a.common, json!({"config": cfg, "outcome": out}), Some(csv))
}

fn run_otm(a: OtmArgs) -> CliResult<()> {
    let file: OtmFile = parse_json(&read_text(&a.common.input, "input")?, "input")?;
    let econ = OtmEconomy::from_file(&file, a.max_bundle_size)?;
    let cfg = resolve(&a.common, "one-to-many", 1e-10)?.with("max_bundle_size", econ.max_bundle_size);
    let out = solve_experimental(&econ, cfg.tol, cfg.max_iter)?;
    let failure = match &out {
        OtmOutcome::Failed { reason, history, .. } => Some(Failure::Reported {
            message: reason.clone(),
            trace: history.clone(),
        }),
        OtmOutcome::Converged { .. } => None,
    };
    emit(&a.common, json!({"config": cfg, "outcome": out}), None)?;
    failure.map_or(Ok(()), Err)
}

fn run_simulate(a: SimulateArgs) -> CliResult<()> {
    let model = load_model(&a.common)?;
    let theta = parse_list(&a.theta, "theta", model.dim())?;
    let cfg = resolve(&a.common, "simulate", 1e-10)?
        .with("theta", &theta)
        .with("n_hat", a.n_hat);
    let sample = sample_synthetic(&model, &theta, a.n_hat, a.common.seed)?;
    let mut buf = Vec::new();
    write_sample_csv(&mut buf, &model, &sample)?;
    let csv = String::from_utf8(buf).expect("csv output is utf-8");
    emit(&a.common, json!({"config": cfg, "sample": sample}), Some(csv))
}

fn configure_threads() -> CliResult<()> {
    if let Ok(raw) = std::env::var("ITU_MATCH_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| input_error("ITU_MATCH_THREADS", format!("expected a positive integer, got `{raw}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| input_error("ITU_MATCH_THREADS", e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Solve(a) => run_solve(a),
        Command::SolveFull(a) => run_full(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Compstats(a) => run_compstats(a),
        Command::Search(a) => run_search(a),
        Command::OneToMany(a) => run_otm(a),
        Command::Simulate(a) => run_simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f.to_json()).expect("serializable error"));
            ExitCode::from(f.exit_code())
        }
    }
}
