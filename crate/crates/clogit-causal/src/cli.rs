//! Command-line front end: `estimate` fits the two-step model to a subject
//! CSV, `simulate` runs a Monte Carlo study, and `limits` traces the
//! population limits of the estimators over an effect grid.
//!
//! The subject CSV has columns `id, v1..vk, y1, z, x, y2, r1, r2, pz`;
//! missing responses are empty fields with the matching indicator zero, and
//! `pz` may be omitted when a constant assignment probability is supplied
//! with `--pz-constant`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::LimitEngine;
use crate::config::{self, EstimateConfig, LimitsConfig};
use crate::estimator::{self, Dataset, EstimateOptions};
use crate::model::{Parametrization, SubjectRecord};
use crate::simulation::{self, Variant};
use crate::truth::{QuadratureSettings, TrueModelSpec, Truth};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Input or configuration malformed; exit code 2.
    #[error("{0}")]
    Schema(String),
    /// Estimation or quadrature failed; exit code 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

fn schema<E: std::fmt::Display>(err: E) -> CliError {
    CliError::Schema(err.to_string())
}

fn numeric<E: std::fmt::Display>(err: E) -> CliError {
    CliError::Numeric(err.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "clogit-causal",
    version,
    about = "Complier causal effects from two-arm studies with one-sided \
             non-compliance and repeated binary outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Size of the worker thread pool (default: all cores). Outputs do not
    /// depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the two-step estimator to a subject CSV and write a report.
    Estimate {
        /// Subject CSV path.
        #[arg(long)]
        input: PathBuf,
        /// Report CSV path (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        /// TOML settings file with an `[estimate]` table.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable the absent-cell augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Constant assignment probability, for data without a pz column.
        #[arg(long, value_name = "P")]
        pz_constant: Option<f64>,
    },
    /// Run a Monte Carlo study described by a `[scenario]` TOML table.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Report CSV path (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the master seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute population limit curves over an effect grid.
    Limits {
        /// TOML settings file with a `[limits]` table (default grid
        /// otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Curve CSV path (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Quadrature size for the latent-variable integrals.
        #[arg(long, value_name = "N")]
        gh_nodes: Option<usize>,
    },
}

/// Execute a parsed invocation.
pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Schema("--threads must be at least 1".into()));
        }
        // ignore failure: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Estimate {
            input,
            output,
            config,
            no_augment,
            pz_constant,
        } => {
            let data = read_dataset(input, *pz_constant)?;
            let cfg = match config {
                Some(path) => EstimateConfig::load(path).map_err(schema)?,
                None => EstimateConfig::default(),
            };
            let report = run_estimate(&data, &cfg, !no_augment)?;
            write_output(output.as_deref(), &report)
        }
        Command::Simulate {
            config,
            output,
            seed,
        } => {
            let mut scenario = config::load_scenario(config).map_err(schema)?;
            if scenario.n == 0 || scenario.replications == 0 {
                return Err(CliError::Schema(
                    "scenario requires n >= 1 and replications >= 1".into(),
                ));
            }
            if let Some(s) = seed {
                scenario.seed = *s;
            }
            let report = simulation::run_study(&scenario);
            let mut buf = Vec::new();
            report.write_csv(&mut buf).map_err(numeric)?;
            write_output(output.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::Limits {
            config,
            output,
            gh_nodes,
        } => {
            let cfg = match config {
                Some(path) => LimitsConfig::load(path).map_err(schema)?,
                None => LimitsConfig::default(),
            };
            let report = run_limits(&cfg, *gh_nodes)?;
            write_output(output.as_deref(), &report)
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(schema),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(numeric)
        }
    }
}

const BINARY_COLUMNS: [&str; 6] = ["y1", "z", "x", "y2", "r1", "r2"];

/// Read and validate a subject CSV.
pub fn read_dataset(path: &Path, pz_constant: Option<f64>) -> Result<Dataset, CliError> {
    if let Some(p) = pz_constant {
        if !(p > 0.0 && p < 1.0) {
            return Err(CliError::Schema(format!(
                "--pz-constant {p} must lie strictly inside (0, 1)"
            )));
        }
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(schema)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols = headers.iter();
    if cols.next().map(String::as_str) != Some("id") {
        return Err(CliError::Schema("first column must be \"id\"".into()));
    }
    let mut schema_v = Vec::new();
    let mut rest: Vec<&String> = cols.collect();
    while let Some(first) = rest.first() {
        let expected = format!("v{}", schema_v.len() + 1);
        if **first == expected {
            schema_v.push(expected);
            rest.remove(0);
        } else {
            break;
        }
    }
    let mut expected_tail: Vec<&str> = BINARY_COLUMNS.to_vec();
    let has_pz = rest.last().map(|c| c.as_str()) == Some("pz");
    if has_pz {
        expected_tail.push("pz");
    } else if pz_constant.is_none() {
        return Err(CliError::Schema(
            "no \"pz\" column; supply one or pass --pz-constant".into(),
        ));
    }
    let tail: Vec<&str> = rest.iter().map(|c| c.as_str()).collect();
    if tail != expected_tail {
        for (got, want) in tail.iter().zip(&expected_tail) {
            if got != want {
                return Err(CliError::Schema(format!(
                    "unexpected column {got:?} where {want:?} belongs \
                     (schema: id, v1..vk, y1, z, x, y2, r1, r2, pz)"
                )));
            }
        }
        return Err(CliError::Schema(format!(
            "expected columns {:?} after the covariates, found {:?}",
            expected_tail, tail
        )));
    }
    let k = schema_v.len();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(schema)?;
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or((i + 2) as u64);
        records.push(parse_record(&row, line, k, has_pz, pz_constant)?);
    }
    Dataset::new(records, schema_v).map_err(schema)
}

fn parse_record(
    row: &csv::StringRecord,
    line: u64,
    k: usize,
    has_pz: bool,
    pz_constant: Option<f64>,
) -> Result<SubjectRecord, CliError> {
    let expected_len = 1 + k + 6 + has_pz as usize;
    if row.len() != expected_len {
        return Err(CliError::Schema(format!(
            "line {line}: {} fields, expected {expected_len}",
            row.len()
        )));
    }
    let field = |idx: usize| row.get(idx).unwrap_or("").trim();
    let id = field(0).to_string();
    let mut v = Vec::with_capacity(k);
    for j in 0..k {
        let raw = field(1 + j);
        v.push(raw.parse::<f64>().map_err(|_| {
            CliError::Schema(format!("line {line}: covariate v{} = {raw:?} is not a number", j + 1))
        })?);
    }
    let binary = |idx: usize, name: &str| -> Result<bool, CliError> {
        match field(idx) {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(CliError::Schema(format!(
                "line {line}: column {name} = {other:?} is not 0 or 1"
            ))),
        }
    };
    let optional_binary = |idx: usize, name: &str| -> Result<Option<bool>, CliError> {
        if field(idx).is_empty() {
            Ok(None)
        } else {
            binary(idx, name).map(Some)
        }
    };
    let y1 = optional_binary(1 + k, "y1")?;
    let z = binary(2 + k, "z")?;
    let x = binary(3 + k, "x")?;
    let y2 = optional_binary(4 + k, "y2")?;
    let r1 = binary(5 + k, "r1")?;
    let r2 = binary(6 + k, "r2")?;
    if r1 != y1.is_some() || r2 != y2.is_some() {
        return Err(CliError::Schema(format!(
            "line {line}: response indicators must match presence of the \
             responses (r = 0 with an empty field)"
        )));
    }
    let pz = if has_pz {
        let raw = field(7 + k);
        raw.parse::<f64>().map_err(|_| {
            CliError::Schema(format!("line {line}: pz = {raw:?} is not a number"))
        })?
    } else {
        let p = pz_constant.expect("checked before parsing");
        if z {
            p
        } else {
            1.0 - p
        }
    };
    SubjectRecord::new(id, v, y1, z, x, y2, pz, 1.0)
        .map_err(|e| CliError::Schema(format!("line {line}: {e}")))
}

fn two_sided_p(t: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(t.abs()))
}

fn report_row(out: &mut String, name: &str, estimate: f64, se: Option<f64>) {
    match se {
        Some(se) if se > 0.0 => {
            let t = estimate / se;
            out.push_str(&format!(
                "{name},{estimate:.6},{se:.6},{t:.6},{:.6}\n",
                two_sided_p(t)
            ));
        }
        Some(se) => out.push_str(&format!("{name},{estimate:.6},{se:.6},,\n")),
        None => out.push_str(&format!("{name},{estimate:.6},,,\n")),
    }
}

/// Fit the two-step model and the two comparison estimators; the report is
/// a CSV of `parameter, estimate, std_err, t, p_value` rows.
pub fn run_estimate(
    data: &Dataset,
    cfg: &EstimateConfig,
    augment: bool,
) -> Result<String, CliError> {
    let k = data.schema.len();
    let param = match &cfg.m {
        Some(terms) => {
            let (m, p_m) = config::design_from_terms(terms, k).map_err(schema)?;
            Parametrization::simple(m, p_m)
        }
        None => Parametrization::simple_linear_m(k),
    };
    let est = estimator::estimate(data, &param, &EstimateOptions { augment }).map_err(numeric)?;
    let mut v_bar = vec![0.0; k];
    for rec in &data.records {
        for (acc, vi) in v_bar.iter_mut().zip(&rec.v) {
            *acc += vi;
        }
    }
    for acc in &mut v_bar {
        *acc /= data.n().max(1) as f64;
    }
    let mut out = String::from("parameter,estimate,std_err,t,p_value\n");
    for (j, eta) in est.eta_hat.iter().enumerate() {
        let se = est.sigma_hat[(j, j)].max(0.0).sqrt();
        report_row(&mut out, &format!("eta{}", j + 1), *eta, Some(se));
    }
    let sigma_theta = est.sigma_theta();
    let theta = est.theta_hat.theta();
    for j in 0..param.p_theta() {
        let name = if j < param.p_a {
            format!("alpha{}", j + 1)
        } else {
            format!("beta{}", j - param.p_a + 1)
        };
        let se = sigma_theta[(j, j)].max(0.0).sqrt();
        report_row(&mut out, &name, theta[j], Some(se));
    }
    let delta = est.delta(&v_bar).map_err(numeric)?;
    let delta_se = est.delta_se(&v_bar).map_err(numeric)?;
    report_row(&mut out, "delta", delta, Some(delta_se));
    let (itt, itt_se) = estimator::comparison_fit_with_se(data, false).map_err(numeric)?;
    report_row(&mut out, "delta_itt", itt, Some(itt_se));
    let (tr, tr_se) = estimator::comparison_fit_with_se(data, true).map_err(numeric)?;
    report_row(&mut out, "delta_tr", tr, Some(tr_se));
    Ok(out)
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Cov => "cov",
        Variant::Null => "null",
        Variant::Itt => "itt",
        Variant::Tr => "tr",
    }
}

/// Trace the limit curves over the configured grid; rows are
/// `scenario, rho, delta0, beta0, estimator, delta_star`.
pub fn run_limits(cfg: &LimitsConfig, gh_nodes: Option<usize>) -> Result<String, CliError> {
    use rayon::prelude::*;
    let nodes = gh_nodes.unwrap_or(64);
    if nodes < 2 {
        return Err(CliError::Schema("--gh-nodes must be at least 2".into()));
    }
    let settings = QuadratureSettings {
        nodes,
        check_nodes: nodes + nodes / 2,
        rel_tol: 1e-8,
    };
    let mut grid = Vec::new();
    for &rho in &cfg.rho {
        for &delta0 in &cfg.delta0 {
            for &beta0 in &cfg.beta0 {
                grid.push((rho, delta0, beta0));
            }
        }
    }
    let scenario_name = if cfg.missing { "missing" } else { "plain" };
    let rows: Vec<Result<String, CliError>> = grid
        .par_iter()
        .map(|&(rho, delta0, beta0)| {
            let alpha2 = 1.0 + delta0;
            let alpha1 = alpha2 - beta0 - delta0;
            let spec = TrueModelSpec::benchmark_scenario(rho, alpha1, alpha2, beta0, cfg.missing);
            let engine = LimitEngine::new(Truth::new(spec, settings.clone()));
            let limits = engine.limits().map_err(numeric)?;
            let mut chunk = String::new();
            for &variant in &cfg.estimators {
                let value = match variant {
                    Variant::Cov => limits.delta_cov,
                    Variant::Null => limits.delta_null,
                    Variant::Itt => limits.delta_itt,
                    Variant::Tr => limits.delta_tr,
                };
                chunk.push_str(&format!(
                    "{scenario_name},{rho},{delta0},{beta0},{},{value:.6}\n",
                    variant_name(variant)
                ));
            }
            Ok(chunk)
        })
        .collect();
    let mut out = String::from("scenario,rho,delta0,beta0,estimator,delta_star\n");
    for row in rows {
        out.push_str(&row?);
    }
    Ok(out)
}
