//! Configuration files for the command-line front end, plus the tiny term
//! language used to spell out compliance designs `m(v)`.
//!
//! A design is a list of terms, each one of `1`, `vK`, `vK^2` or `vI*vJ`
//! with 1-based covariate indices, e.g. `m = ["1", "v1", "v1^2", "v1*v2"]`.

use serde::Deserialize;
use std::sync::Arc;
use thiserror::Error;

use crate::model::CovariateFn;
use crate::simulation::{Scenario, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unrecognized design term {term:?}; expected 1, vK, vK^2 or vI*vJ")]
    BadTerm { term: String },
    #[error("design term {term:?} refers to covariate v{index}, but the data has {available}")]
    TermOutOfRange {
        term: String,
        index: usize,
        available: usize,
    },
}

/// One multiplicative design term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    One,
    /// `vK`, 0-based index.
    Var(usize),
    /// `vK^2`, 0-based index.
    Square(usize),
    /// `vI*vJ`, 0-based indices.
    Product(usize, usize),
}

impl Term {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::BadTerm { term: s.into() };
        let text = s.trim();
        if text == "1" {
            return Ok(Term::One);
        }
        let var = |t: &str| -> Result<usize, ConfigError> {
            let idx: usize = t
                .strip_prefix('v')
                .and_then(|n| n.parse().ok())
                .ok_or_else(bad)?;
            if idx == 0 {
                return Err(bad());
            }
            Ok(idx - 1)
        };
        if let Some((l, r)) = text.split_once('*') {
            return Ok(Term::Product(var(l.trim())?, var(r.trim())?));
        }
        if let Some(base) = text.strip_suffix("^2") {
            return Ok(Term::Square(var(base.trim())?));
        }
        Ok(Term::Var(var(text)?))
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        match *self {
            Term::One => 1.0,
            Term::Var(i) => v[i],
            Term::Square(i) => v[i] * v[i],
            Term::Product(i, j) => v[i] * v[j],
        }
    }

    fn max_index(&self) -> Option<usize> {
        match *self {
            Term::One => None,
            Term::Var(i) | Term::Square(i) => Some(i),
            Term::Product(i, j) => Some(i.max(j)),
        }
    }
}

/// Parse a term list and build the design function, checking indices
/// against the number of covariates in the data.
pub fn design_from_terms(
    specs: &[String],
    covariates: usize,
) -> Result<(CovariateFn, usize), ConfigError> {
    let mut terms = Vec::with_capacity(specs.len());
    for s in specs {
        let term = Term::parse(s)?;
        if let Some(idx) = term.max_index() {
            if idx >= covariates {
                return Err(ConfigError::TermOutOfRange {
                    term: s.clone(),
                    index: idx + 1,
                    available: covariates,
                });
            }
        }
        terms.push(term);
    }
    let p = terms.len();
    let f: CovariateFn = Arc::new(move |v: &[f64]| terms.iter().map(|t| t.eval(v)).collect());
    Ok((f, p))
}

/// Settings for the `estimate` command.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Compliance design terms; default `["1", "v1", ..., "vk"]`.
    pub m: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateFile {
    #[serde(default)]
    estimate: EstimateConfig,
}

impl EstimateConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str::<EstimateFile>(&text)?.estimate)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenario: Scenario,
}

/// Load a simulation scenario from `[scenario]` in a TOML file.
pub fn load_scenario(path: &std::path::Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    Ok(toml::from_str::<ScenarioFile>(&text)?.scenario)
}

fn default_rho() -> Vec<f64> {
    vec![0.0, 0.75]
}

fn default_delta0() -> Vec<f64> {
    vec![0.0, 1.0]
}

fn default_beta0() -> Vec<f64> {
    (0..9).map(|i| -1.0 + 0.25 * i as f64).collect()
}

fn default_estimators() -> Vec<Variant> {
    vec![Variant::Cov, Variant::Null, Variant::Itt, Variant::Tr]
}

/// Grid specification for the `limits` command. The effect scale fixes
/// `alpha2 = 1 + delta0` and `alpha1 = alpha2 - beta0 - delta0`, matching
/// the benchmark design.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    #[serde(default = "default_delta0")]
    pub delta0: Vec<f64>,
    #[serde(default = "default_beta0")]
    pub beta0: Vec<f64>,
    #[serde(default)]
    pub missing: bool,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Variant>,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            delta0: default_delta0(),
            beta0: default_beta0(),
            missing: false,
            estimators: default_estimators(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LimitsFile {
    limits: LimitsConfig,
}

impl LimitsConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str::<LimitsFile>(&text)?.limits)
    }
}
