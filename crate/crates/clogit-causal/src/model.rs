//! Domain types for the causal model: subject records, design
//! parametrizations, parameter vectors and the causal-effect functional.
//!
//! The observable variables per subject are the covariates `v`, the
//! pre-treatment outcome `y1`, assignment `z`, receipt `x`, the
//! post-treatment outcome `y2` and the response indicators `r1`, `r2`.
//! One-sided non-compliance means `z = 0` forces `x = 0`, so receipt in the
//! treatment arm reveals compliance status directly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numeric::expit;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected vector of length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid subject record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// Vector-valued function of the covariates.
pub type CovariateFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Vector-valued function of the covariates and the received treatment.
pub type TreatmentFn = Arc<dyn Fn(&[f64], bool) -> Vec<f64> + Send + Sync>;

/// The known design functions `a(v, x)`, `b(v)` and `m(v)`.
///
/// `a(v, x)' alpha` is the effect of control on never-takers (`x = 0`) or of
/// treatment on compliers (`x = 1`); `b(v)' beta` is the differential effect
/// of control between compliers and never-takers; `m(v)' eta` is the logit
/// of the probability to comply. In the simplest parametrization
/// `a(v, x) = (1 - x, x)'` and `b(v) = 1`, so the parameters read directly
/// as subpopulation effects.
#[derive(Clone)]
pub struct Parametrization {
    a: TreatmentFn,
    b: CovariateFn,
    m: CovariateFn,
    pub p_a: usize,
    pub p_b: usize,
    pub p_m: usize,
    pub is_simple: bool,
}

impl std::fmt::Debug for Parametrization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parametrization")
            .field("p_a", &self.p_a)
            .field("p_b", &self.p_b)
            .field("p_m", &self.p_m)
            .field("is_simple", &self.is_simple)
            .finish()
    }
}

impl Parametrization {
    pub fn new(
        a: TreatmentFn,
        p_a: usize,
        b: CovariateFn,
        p_b: usize,
        m: CovariateFn,
        p_m: usize,
    ) -> Self {
        Self {
            a,
            b,
            m,
            p_a,
            p_b,
            p_m,
            is_simple: false,
        }
    }

    /// Simple parametrization `a(v,x) = (1-x, x)'`, `b(v) = 1`, with a
    /// caller-supplied compliance design `m(v)`.
    pub fn simple(m: CovariateFn, p_m: usize) -> Self {
        Self {
            a: Arc::new(|_, x| if x { vec![0.0, 1.0] } else { vec![1.0, 0.0] }),
            b: Arc::new(|_| vec![1.0]),
            m,
            p_a: 2,
            p_b: 1,
            p_m,
            is_simple: true,
        }
    }

    /// Simple parametrization with intercept-only compliance model,
    /// `m(v) = 1`.
    pub fn simple_null() -> Self {
        Self::simple(Arc::new(|_| vec![1.0]), 1)
    }

    /// Simple parametrization with `m(v) = (1, v1, ..., vk)'`.
    pub fn simple_linear_m(k: usize) -> Self {
        Self::simple(
            Arc::new(move |v: &[f64]| {
                let mut out = Vec::with_capacity(v.len() + 1);
                out.push(1.0);
                out.extend_from_slice(v);
                out
            }),
            k + 1,
        )
    }

    fn checked(
        what: &'static str,
        raw: Vec<f64>,
        expected: usize,
    ) -> Result<DVector<f64>, ModelError> {
        if raw.len() != expected {
            return Err(ModelError::DimensionMismatch {
                what,
                expected,
                got: raw.len(),
            });
        }
        Ok(DVector::from_vec(raw))
    }

    pub fn a(&self, v: &[f64], x: bool) -> Result<DVector<f64>, ModelError> {
        Self::checked("a(v,x)", (self.a)(v, x), self.p_a)
    }

    pub fn b(&self, v: &[f64]) -> Result<DVector<f64>, ModelError> {
        Self::checked("b(v)", (self.b)(v), self.p_b)
    }

    pub fn m(&self, v: &[f64]) -> Result<DVector<f64>, ModelError> {
        Self::checked("m(v)", (self.m)(v), self.p_m)
    }

    pub fn m_fn(&self) -> CovariateFn {
        Arc::clone(&self.m)
    }

    pub fn a_fn(&self) -> TreatmentFn {
        Arc::clone(&self.a)
    }

    pub fn b_fn(&self) -> CovariateFn {
        Arc::clone(&self.b)
    }

    /// The same outcome design with a different compliance design `m(v)`.
    pub fn with_m(&self, m: CovariateFn, p_m: usize) -> Self {
        Self {
            a: Arc::clone(&self.a),
            b: Arc::clone(&self.b),
            m,
            p_a: self.p_a,
            p_b: self.p_b,
            p_m,
            is_simple: self.is_simple,
        }
    }

    /// Dimension of the stacked second-step parameter `theta = (alpha', beta')'`.
    pub fn p_theta(&self) -> usize {
        self.p_a + self.p_b
    }
}

/// The second-step parameters: `alpha` for the directly identified effects,
/// `beta` for the differential control effect.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalParams {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

impl CausalParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Self {
            alpha: DVector::from_vec(alpha),
            beta: DVector::from_vec(beta),
        }
    }

    /// Stacked vector `theta = (alpha', beta')'`.
    pub fn theta(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.alpha.len() + self.beta.len());
        out.rows_mut(0, self.alpha.len()).copy_from(&self.alpha);
        out.rows_mut(self.alpha.len(), self.beta.len())
            .copy_from(&self.beta);
        out
    }

    pub fn from_theta(theta: &DVector<f64>, p_a: usize, p_b: usize) -> Result<Self, ModelError> {
        if theta.len() != p_a + p_b {
            return Err(ModelError::DimensionMismatch {
                what: "theta",
                expected: p_a + p_b,
                got: theta.len(),
            });
        }
        Ok(Self {
            alpha: theta.rows(0, p_a).into_owned(),
            beta: theta.rows(p_a, p_b).into_owned(),
        })
    }
}

/// Fitted (or assumed) logit model for the probability to comply,
/// `logit[pi(1|v)] = m(v)' eta`.
#[derive(Clone)]
pub struct ComplianceModel {
    pub eta: DVector<f64>,
    m: CovariateFn,
    p_m: usize,
}

impl std::fmt::Debug for ComplianceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComplianceModel")
            .field("eta", &self.eta)
            .finish()
    }
}

impl ComplianceModel {
    pub fn new(eta: DVector<f64>, param: &Parametrization) -> Self {
        Self {
            eta,
            m: param.m_fn(),
            p_m: param.p_m,
        }
    }

    pub fn m(&self, v: &[f64]) -> Result<DVector<f64>, ModelError> {
        Parametrization::checked("m(v)", (self.m)(v), self.p_m)
    }

    /// `pi(1|v) = expit(m(v)' eta)`; this is also the control-arm correction
    /// factor under compliance independent of the latent covariate.
    pub fn pi(&self, v: &[f64]) -> Result<f64, ModelError> {
        Ok(expit(self.m(v)?.dot(&self.eta)))
    }
}

/// One observation of the study.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub v: Vec<f64>,
    pub y1: Option<bool>,
    pub z: bool,
    pub x: bool,
    pub y2: Option<bool>,
    pub r1: bool,
    pub r2: bool,
    /// Known assignment probability `p(Z = z | v)` of the observed arm.
    pub pz: f64,
    pub weight: f64,
    /// True for synthetic rows added by the rule-of-thumb augmentation.
    pub augmented: bool,
}

impl SubjectRecord {
    /// Response indicators are derived from presence of the outcomes, so the
    /// `r = 0 iff y absent` invariant holds by construction.
    pub fn new(
        id: impl Into<String>,
        v: Vec<f64>,
        y1: Option<bool>,
        z: bool,
        x: bool,
        y2: Option<bool>,
        pz: f64,
        weight: f64,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if !z && x {
            return Err(ModelError::InvalidRecord {
                id,
                reason: "z = 0 implies x = 0 under one-sided non-compliance".into(),
            });
        }
        if !(pz > 0.0 && pz < 1.0) {
            return Err(ModelError::InvalidRecord {
                id,
                reason: format!("pz = {pz} not strictly inside (0, 1)"),
            });
        }
        if !(weight >= 0.0) {
            return Err(ModelError::InvalidRecord {
                id,
                reason: format!("weight = {weight} is negative or NaN"),
            });
        }
        Ok(Self {
            id,
            v,
            y1,
            z,
            x,
            y2,
            r1: y1.is_some(),
            r2: y2.is_some(),
            pz,
            weight,
            augmented: false,
        })
    }

    /// Fully observed record.
    pub fn observed(
        id: impl Into<String>,
        v: Vec<f64>,
        y1: bool,
        z: bool,
        x: bool,
        y2: bool,
        pz: f64,
    ) -> Result<Self, ModelError> {
        Self::new(id, v, Some(y1), z, x, Some(y2), pz, 1.0)
    }

    /// Both outcomes observed and discordant (`y1 + y2 = 1`); returns `y2`.
    /// Only these configurations inform the conditional likelihood.
    pub fn discordant(&self) -> Option<bool> {
        match (self.y1, self.y2) {
            (Some(y1), Some(y2)) if y1 != y2 => Some(y2),
            _ => None,
        }
    }
}

/// Row of the second-step design matrix: `(a(v,x)', 0')'` in the treatment
/// arm, `(a(v,0)', pi(1|v) b(v)')'` in the control arm. Treatment-arm rows
/// zero the beta block, which is what makes `alpha` identified there
/// regardless of the compliance model.
pub fn design_row(
    param: &Parametrization,
    compliance: &ComplianceModel,
    v: &[f64],
    z: bool,
    x: bool,
) -> Result<DVector<f64>, ModelError> {
    assert!(z || !x, "z = 0 implies x = 0");
    let mut row = DVector::zeros(param.p_theta());
    if z {
        row.rows_mut(0, param.p_a).copy_from(&param.a(v, x)?);
    } else {
        row.rows_mut(0, param.p_a).copy_from(&param.a(v, false)?);
        let pi = compliance.pi(v)?;
        row.rows_mut(param.p_a, param.p_b)
            .copy_from(&(param.b(v)? * pi));
    }
    Ok(row)
}

/// Causal effect of treatment over control on compliers,
/// `delta(v) = [a(v,1) - a(v,0)]' alpha - b(v)' beta`.
/// Under the simple parametrization this is `alpha_2 - alpha_1 - beta` for
/// every `v`.
pub fn causal_effect(
    param: &Parametrization,
    theta: &CausalParams,
    v: &[f64],
) -> Result<f64, ModelError> {
    let diff = param.a(v, true)? - param.a(v, false)?;
    Ok(diff.dot(&theta.alpha) - param.b(v)?.dot(&theta.beta))
}

/// Gradient of `delta(v)` in `theta`: `([a(v,1) - a(v,0)]', -b(v)')'`.
/// Under the simple parametrization this is the constant `(-1, 1, -1)'`.
pub fn causal_effect_gradient(
    param: &Parametrization,
    v: &[f64],
) -> Result<DVector<f64>, ModelError> {
    let mut g = DVector::zeros(param.p_theta());
    g.rows_mut(0, param.p_a)
        .copy_from(&(param.a(v, true)? - param.a(v, false)?));
    g.rows_mut(param.p_a, param.p_b).copy_from(&(-param.b(v)?));
    Ok(g)
}

/// Convergence and bookkeeping information from a fit.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub step1_iterations: usize,
    pub step2_iterations: usize,
    pub step1_converged: bool,
    pub step2_converged: bool,
    /// Augmented cells as `(z, x, y1, y2)`.
    pub augmentation: Vec<(bool, bool, bool, bool)>,
    /// Number of real (non-augmented) discordant rows used at step 2.
    pub real_discordant_rows: usize,
    /// Step 2 had no real discordant rows; the fit rests on augmentation
    /// alone.
    pub degenerate: bool,
    /// A delta-method quadratic form came out negative and was clamped.
    pub se_clamped: bool,
}

/// The fitted two-step estimate.
#[derive(Debug, Clone)]
pub struct CausalEstimate {
    pub eta_hat: DVector<f64>,
    pub theta_hat: CausalParams,
    /// Sandwich covariance of the stacked `(eta, theta)` estimator.
    pub sigma_hat: DMatrix<f64>,
    pub param: Parametrization,
    pub diagnostics: Diagnostics,
}

impl CausalEstimate {
    /// The `(theta, theta)` block of the sandwich covariance.
    pub fn sigma_theta(&self) -> DMatrix<f64> {
        let p_m = self.eta_hat.len();
        let p_t = self.param.p_theta();
        self.sigma_hat.view((p_m, p_m), (p_t, p_t)).into_owned()
    }

    pub fn delta(&self, v: &[f64]) -> Result<f64, ModelError> {
        causal_effect(&self.param, &self.theta_hat, v)
    }

    /// Delta-method standard error of `delta(v)`; negative quadratic forms
    /// are clamped to zero (see `diagnostics.se_clamped`).
    pub fn delta_se(&self, v: &[f64]) -> Result<f64, ModelError> {
        let (se, _) = crate::variance::delta_se(&self.sigma_theta(), &self.param, v)?;
        Ok(se)
    }
}
