//! Population limits of the estimators: the first-step limit `eta*`, the
//! pseudo-true `(alpha*, beta*)` maximizing the expected second-step
//! log-likelihood under the true model, and the corresponding limits of the
//! ITT and TR comparison estimators.
//!
//! Expectations over `(u, v)` are nested Gauss–Hermite quadratures: an
//! outer rule over `v ~ N(0, 1)` and the conditional `u | v` rule of the
//! truth engine; the discrete variables are summed exactly. Every
//! population problem is thereby reduced to a finite weighted logistic
//! likelihood and solved with the same Newton code as the sample versions.

use nalgebra::DVector;
use thiserror::Error;

use crate::estimator::OBSERVABLE_ARMS;
use crate::logistic::{self, FitResult, LogisticError, LogisticProblem};
use crate::model::{self, CausalParams, ComplianceModel, ModelError, Parametrization};
use crate::quadrature::GaussHermite;
use crate::truth::{Truth, TruthError};

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("population fit ({stage}): {source}")]
    Fit {
        stage: &'static str,
        #[source]
        source: LogisticError,
    },
    #[error(transparent)]
    Truth(#[from] TruthError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Limits in probability of the point estimators under one generating model.
#[derive(Debug, Clone)]
pub struct LimitResult {
    pub eta_star: DVector<f64>,
    pub theta_star: CausalParams,
    /// Causal-effect limit of the two-step estimator with the covariate
    /// compliance model; equals `delta_cov`.
    pub delta_star: f64,
    /// Norm of the expected second-step score at `theta_star`.
    pub gradient_norm: f64,
    pub delta_cov: f64,
    /// Two-step limit with an intercept-only compliance model.
    pub delta_null: f64,
    pub delta_itt: f64,
    pub delta_tr: f64,
}

const V_NODES: usize = 64;

pub struct LimitEngine {
    pub truth: Truth,
    v_rule: GaussHermite,
}

impl LimitEngine {
    pub fn new(truth: Truth) -> Self {
        Self {
            truth,
            v_rule: GaussHermite::new(V_NODES),
        }
    }

    /// Outer quadrature nodes and weights for `v ~ N(0, 1)`.
    fn v_nodes(&self) -> Vec<(f64, f64)> {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        self.v_rule
            .nodes
            .iter()
            .zip(&self.v_rule.weights)
            .map(|(&x, &w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi))
            .collect()
    }

    /// The first-step limit: the logistic projection of the compliance rate
    /// `E[pi(1|U, v) | v]` onto `m(v)`. The inverse assignment-probability
    /// weighting cancels `p(z = 1 | v)` from the estimand, so the
    /// projection is taken under the covariate marginal.
    pub fn population_eta_star(
        &self,
        param: &Parametrization,
    ) -> Result<(DVector<f64>, FitResult), AsymptoticsError> {
        let mut problem = LogisticProblem::new(param.p_m);
        for (v, vw) in self.v_nodes() {
            let pibar = self.truth.mean_compliance(v)?;
            let m = param.m(&[v])?;
            problem
                .push(m.clone(), true, vw * pibar)
                .map_err(|source| AsymptoticsError::Fit {
                    stage: "first-step limit",
                    source,
                })?;
            problem
                .push(m, false, vw * (1.0 - pibar))
                .map_err(|source| AsymptoticsError::Fit {
                    stage: "first-step limit",
                    source,
                })?;
        }
        let fit = logistic::fit_default(&problem).map_err(|source| AsymptoticsError::Fit {
            stage: "first-step limit",
            source,
        })?;
        Ok((fit.coef.clone(), fit))
    }

    /// Probability of the discordant cell with second response `y2` in arm
    /// `(z, x)`, restricted to fully observed responses when the model has
    /// a missingness layer.
    fn discordant_cell(&self, z: bool, x: bool, y2: bool, v: f64) -> Result<f64, TruthError> {
        if self.truth.spec.missing.is_some() {
            self.truth
                .cell_probability_missing(Some(!y2), z, x, Some(y2), v)
        } else {
            self.truth.cell_probability(!y2, z, x, y2, v)
        }
    }

    /// The expected second-step likelihood as a finite weighted logistic
    /// problem: one row per (v-node, arm, discordant response).
    pub fn expected_step2_problem(
        &self,
        param: &Parametrization,
        compliance: &ComplianceModel,
    ) -> Result<LogisticProblem, AsymptoticsError> {
        let mut problem = LogisticProblem::new(param.p_theta());
        for (v, vw) in self.v_nodes() {
            for (z, x) in OBSERVABLE_ARMS {
                let row = model::design_row(param, compliance, &[v], z, x)?;
                for y2 in [false, true] {
                    let weight = vw * self.discordant_cell(z, x, y2, v)?;
                    problem
                        .push(row.clone(), y2, weight)
                        .map_err(|source| AsymptoticsError::Fit {
                            stage: "second-step limit",
                            source,
                        })?;
                }
            }
        }
        Ok(problem)
    }

    /// Maximize the expected second-step log-likelihood at a fixed
    /// first-step limit.
    pub fn pseudo_true_theta(
        &self,
        param: &Parametrization,
        eta_star: &DVector<f64>,
    ) -> Result<(CausalParams, FitResult), AsymptoticsError> {
        let compliance = ComplianceModel::new(eta_star.clone(), param);
        let problem = self.expected_step2_problem(param, &compliance)?;
        let fit = logistic::fit_default(&problem).map_err(|source| AsymptoticsError::Fit {
            stage: "second-step limit",
            source,
        })?;
        let theta = CausalParams::from_theta(&fit.coef, param.p_a, param.p_b)?;
        Ok((theta, fit))
    }

    /// Limit of a comparison estimator: the slope of the population
    /// conditional logistic regression of `y2` on `(1, z)` (ITT) or
    /// `(1, x)` (TR) over the discordant cells.
    pub fn comparison_delta(&self, use_x: bool) -> Result<f64, AsymptoticsError> {
        let mut problem = LogisticProblem::new(2);
        for (v, vw) in self.v_nodes() {
            for (z, x) in OBSERVABLE_ARMS {
                let reg = if use_x { x } else { z };
                let row = DVector::from_vec(vec![1.0, if reg { 1.0 } else { 0.0 }]);
                for y2 in [false, true] {
                    let weight = vw * self.discordant_cell(z, x, y2, v)?;
                    problem
                        .push(row.clone(), y2, weight)
                        .map_err(|source| AsymptoticsError::Fit {
                            stage: "comparison limit",
                            source,
                        })?;
                }
            }
        }
        let fit = logistic::fit_default(&problem).map_err(|source| AsymptoticsError::Fit {
            stage: "comparison limit",
            source,
        })?;
        Ok(fit.coef[1])
    }

    /// The same outcome model with an intercept-only compliance design.
    fn null_param(&self) -> Parametrization {
        self.truth
            .spec
            .param
            .with_m(std::sync::Arc::new(|_: &[f64]| vec![1.0]), 1)
    }

    fn two_step_delta(&self, param: &Parametrization) -> Result<(CausalParams, DVector<f64>, f64, f64), AsymptoticsError> {
        let (eta_star, _) = self.population_eta_star(param)?;
        let (theta, fit) = self.pseudo_true_theta(param, &eta_star)?;
        let delta = model::causal_effect(param, &theta, &[0.0])?;
        Ok((theta, eta_star, delta, fit.grad_norm))
    }

    /// All four estimator limits under the generating model.
    pub fn limits(&self) -> Result<LimitResult, AsymptoticsError> {
        let cov_param = self.truth.spec.param.clone();
        let (theta_star, eta_star, delta_cov, gradient_norm) = self.two_step_delta(&cov_param)?;
        let (_, _, delta_null, _) = self.two_step_delta(&self.null_param())?;
        let delta_itt = self.comparison_delta(false)?;
        let delta_tr = self.comparison_delta(true)?;
        Ok(LimitResult {
            eta_star,
            theta_star,
            delta_star: delta_cov,
            gradient_norm,
            delta_cov,
            delta_null,
            delta_itt,
            delta_tr,
        })
    }
}
