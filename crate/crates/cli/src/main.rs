use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use flownet::analysis::{
    check_monotone, dual_ascent_solve, equilibrium_closed_form, equilibrium_from_zero, MonotoneConfig,
};
use flownet::dynamics::{simulate, DetectorConfig, SimConfig, DEFAULT_DT, DEFAULT_HORIZON};
use flownet::netfile::{load_model, NetfileError};
use flownet::resilience::{empirical_margin, theoretical_margin, upper_bound_min_cut, EmpiricalConfig};
use flownet::{Model, Policy};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "flownet", version, about = "Simulate and analyze dynamical flow networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Network file (JSON).
    file: PathBuf,
    /// Integration step.
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// Simulation horizon.
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    horizon: f64,
    /// Output path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a network file.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Integrate from an initial state and write the trajectory as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated initial state; zero when absent.
        #[arg(long, value_delimiter = ',')]
        x0: Option<Vec<f64>>,
        /// Append per-cell total outflows to each row.
        #[arg(long)]
        record_flows: bool,
    },
    /// Compute the equilibrium.
    Equilibrium {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Auto)]
        method: Method,
    },
    /// Sample the state box and check the Jacobian sign pattern.
    CheckMonotone {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tolerance on the compartmental conditions.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 0.0)]
        lower: f64,
        #[arg(long, default_value_t = 5.0)]
        upper: f64,
        /// Keep only points inside the free-flow region.
        #[arg(long)]
        free_flow_only: bool,
    },
    /// Min-cut residual capacity and its minimizing cut.
    Mincut {
        #[command(flatten)]
        common: Common,
    },
    /// Margin of resilience from the matching formula, optionally
    /// bracketed by simulation.
    Margin {
        #[command(flatten)]
        common: Common,
        /// Bracket the margin by bisection over perturbed simulations.
        #[arg(long)]
        empirical: bool,
        /// Bracket width for the empirical search.
        #[arg(long, default_value_t = 5e-3)]
        tol: f64,
    },
    /// Solve the convex network flow problem by dual ascent.
    DualAscent {
        #[command(flatten)]
        common: Common,
        /// Stop once the conservation residual falls below this.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    /// Closed form for constant routing, the trajectory limit otherwise.
    Auto,
    ClosedForm,
    Trajectory,
}

/// Everything that determines a command's output.
#[derive(Serialize)]
struct RunConfig {
    command: &'static str,
    file: String,
    dt: f64,
    horizon: f64,
    seed: Option<u64>,
    tol: Option<f64>,
    samples: Option<usize>,
    empirical: Option<bool>,
    method: Option<Method>,
    out: Option<String>,
}

impl RunConfig {
    fn new(command: &'static str, common: &Common) -> Self {
        Self {
            command,
            file: common.file.display().to_string(),
            dt: common.dt,
            horizon: common.horizon,
            seed: None,
            tol: None,
            samples: None,
            empirical: None,
            method: None,
            out: common.out.as_ref().map(|p| p.display().to_string()),
        }
    }
}

struct Failure {
    exit: u8,
    kind: String,
    message: String,
}

impl Failure {
    fn domain(e: impl std::error::Error) -> Self {
        Self { exit: 1, kind: variant_name(&format!("{e:?}")), message: e.to_string() }
    }

    fn io(e: io::Error) -> Self {
        Self { exit: 2, kind: "Io".into(), message: e.to_string() }
    }

    fn usage(message: String) -> Self {
        Self { exit: 2, kind: "InvalidArgument".into(), message }
    }
}

impl From<NetfileError> for Failure {
    fn from(e: NetfileError) -> Self {
        if e.is_format_error() {
            Self { exit: 2, kind: variant_name(&format!("{e:?}")), message: e.to_string() }
        } else {
            Self::domain(e)
        }
    }
}

/// Innermost variant name of a nested error's debug form, e.g.
/// `Topology(SelfLoop(2))` gives `SelfLoop`.
fn variant_name(debug: &str) -> String {
    let mut rest = debug;
    loop {
        let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
        let name = &rest[..end];
        let tail = &rest[end..];
        match tail.strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => return name.to_string(),
        }
    }
}

/// Shifts cell indices under the given keys to file numbering.
fn one_based(value: &mut Value, keys: &[&str]) {
    match value {
        Value::Object(map) => {
            for (key, v) in map.iter_mut() {
                if keys.contains(&key.as_str()) {
                    shift(v);
                } else {
                    one_based(v, keys);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| one_based(v, keys)),
        _ => {}
    }
}

fn shift(value: &mut Value) {
    match value {
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                *value = json!(i + 1);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(shift),
        _ => {}
    }
}

fn with_header(config: &RunConfig, result: Value) -> Value {
    let mut doc = json!({ "version": VERSION, "config": config });
    match result {
        Value::Object(fields) => doc.as_object_mut().expect("object").extend(fields),
        other => {
            doc["result"] = other;
        }
    }
    doc
}

fn open_out(out: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(Failure::io)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit(config: &RunConfig, out: &Option<PathBuf>, result: Value) -> Result<(), Failure> {
    let mut w = open_out(out)?;
    let doc = with_header(config, result);
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| Failure::io(e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(Failure::io)
}

fn load(path: &Path) -> Result<Model, Failure> {
    let model = load_model(path)?;
    log::info!("loaded {} with {} cells ({})", path.display(), model.n(), model.policy().kind());
    Ok(model)
}

fn detector(common: &Common) -> DetectorConfig {
    DetectorConfig { horizon: common.horizon, dt: common.dt, ..DetectorConfig::default() }
}

fn check_positive(name: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Failure::usage(format!("--{name} must be positive, got {v}")))
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { common } => {
            let config = RunConfig::new("validate", &common);
            let model = load(&common.file)?;
            let t = model.topology();
            let props = t.line_digraph_properties();
            emit(
                &config,
                &common.out,
                json!({
                    "valid": true,
                    "cells": model.n(),
                    "policy": model.policy().kind(),
                    "outflow_connected": t.outflow_connectivity().all,
                    "inflow_connected": t.inflow_connectivity().all,
                    "acyclic": !t.has_cycle(),
                    "line_digraph_properties": props,
                }),
            )
        }
        Command::Simulate { common, x0, record_flows } => {
            check_positive("dt", common.dt)?;
            check_positive("horizon", common.horizon)?;
            let model = load(&common.file)?;
            let x0 = x0.unwrap_or_else(|| vec![0.0; model.n()]);
            if x0.len() != model.n() {
                return Err(Failure::usage(format!("--x0 has {} entries for {} cells", x0.len(), model.n())));
            }
            let sim = SimConfig { record_flows, ..SimConfig::new(common.horizon, common.dt) };
            let trajectory = simulate(&model, &x0, &sim).map_err(Failure::domain)?;
            let mut w = open_out(&common.out)?;
            trajectory.write_csv(&mut w).and_then(|_| w.flush()).map_err(Failure::io)
        }
        Command::Equilibrium { common, method } => {
            check_positive("dt", common.dt)?;
            check_positive("horizon", common.horizon)?;
            let config = RunConfig { method: Some(method), ..RunConfig::new("equilibrium", &common) };
            let model = load(&common.file)?;
            let closed = match method {
                Method::Auto => matches!(model.policy(), Policy::Constant(_)),
                Method::ClosedForm => true,
                Method::Trajectory => false,
            };
            let result = if closed {
                let e = equilibrium_closed_form(&model).map_err(Failure::domain)?;
                json!({ "outcome": "equilibrium", "equilibrium": e })
            } else {
                match equilibrium_from_zero(&model, &detector(&common)).map_err(Failure::domain)? {
                    flownet::analysis::FromZero::Equilibrium(e) => json!({ "outcome": "equilibrium", "equilibrium": e }),
                    unbounded => serde_json::to_value(unbounded).expect("serializable"),
                }
            };
            emit(&config, &common.out, result)
        }
        Command::CheckMonotone { common, samples, seed, tol, lower, upper, free_flow_only } => {
            if !(lower < upper) {
                return Err(Failure::usage(format!("need --lower < --upper, got {lower} and {upper}")));
            }
            let config = RunConfig {
                seed: Some(seed),
                tol: Some(tol),
                samples: Some(samples),
                ..RunConfig::new("check-monotone", &common)
            };
            let model = load(&common.file)?;
            let mc = MonotoneConfig { lower, upper, samples, seed, tol, free_flow_only };
            let report = check_monotone(&model, &mc).map_err(Failure::domain)?;
            emit(&config, &common.out, serde_json::to_value(report).expect("serializable"))
        }
        Command::Mincut { common } => {
            let config = RunConfig::new("mincut", &common);
            let model = load(&common.file)?;
            let cut = upper_bound_min_cut(&model).map_err(Failure::domain)?;
            let mut value = serde_json::to_value(cut).expect("serializable");
            one_based(&mut value, &["cut", "trapped"]);
            emit(&config, &common.out, value)
        }
        Command::Margin { common, empirical, tol } => {
            check_positive("dt", common.dt)?;
            check_positive("horizon", common.horizon)?;
            let config = RunConfig {
                empirical: Some(empirical),
                tol: empirical.then_some(tol),
                ..RunConfig::new("margin", &common)
            };
            let model = load(&common.file)?;
            let mut value = if empirical {
                let ec = EmpiricalConfig { tol, detector: detector(&common), family: None };
                serde_json::to_value(empirical_margin(&model, &ec).map_err(Failure::domain)?).expect("serializable")
            } else {
                let theoretical = theoretical_margin(&model, &detector(&common)).map_err(Failure::domain)?;
                let bound = upper_bound_min_cut(&model).map_err(Failure::domain)?;
                json!({ "theoretical": theoretical, "upper_bound": bound })
            };
            one_based(&mut value, &["cut", "trapped", "argmin", "cells"]);
            emit(&config, &common.out, value)
        }
        Command::DualAscent { common, tol } => {
            check_positive("dt", common.dt)?;
            check_positive("horizon", common.horizon)?;
            let config = RunConfig { tol: Some(tol), ..RunConfig::new("dual-ascent", &common) };
            let model = load(&common.file)?;
            let Policy::DualAscent(costs) = model.policy() else {
                return Err(Failure {
                    exit: 1,
                    kind: "UnsupportedPolicy".into(),
                    message: format!("dual-ascent needs a dual_ascent policy, got {}", model.policy().kind()),
                });
            };
            let t = model.topology();
            let sol = dual_ascent_solve(t, costs, model.inflow(), common.horizon, common.dt, tol)
                .map_err(Failure::domain)?;
            let links: Vec<Value> =
                t.adjacency().iter().map(|&(i, j)| json!([i + 1, j + 1, sol.flows.f[(i, j)]])).collect();
            let outflow: Vec<Value> = t.outflow_cells().into_iter().map(|k| json!([k + 1, sol.flows.w[k]])).collect();
            emit(
                &config,
                &common.out,
                json!({
                    "prices": sol.x,
                    "links": links,
                    "outflow": outflow,
                    "objective": sol.objective,
                    "mass_residual": sol.mass_residual,
                    "time": sol.time,
                }),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWNET_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let doc = json!({
                "version": VERSION,
                "error": { "kind": f.kind, "message": f.message, "exit_code": f.exit },
            });
            eprintln!("{doc}");
            ExitCode::from(f.exit)
        }
    }
}
