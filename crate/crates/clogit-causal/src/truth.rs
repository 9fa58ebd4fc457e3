//! Exact cell probabilities of the observable data under a fully specified
//! generating model, computed by Gauss–Hermite quadrature over the latent
//! variable. These serve as the reference distribution for the limit
//! calculations and as an oracle in tests.
//!
//! The generating model: `(u, v)` has `u | v ~ N(rho v, 1 - rho^2)`;
//! `logit p(y1 = 1 | u, v) = lambda(u, v)`; compliance probability
//! `pi_c(u, v)`; assignment probability `pz(v)`; receipt `x = z * c`; and
//! `logit p(y2 = 1 | u, v, c, x) = lambda(u, v) + a(v, x)' alpha0 +
//! c (1 - x) b(v)' beta0`. An optional missingness layer adds response
//! indicators with probabilities `r1(u, v)` and `r2(u, v, c, x)`.

use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use crate::model::{ModelError, Parametrization};
use crate::numeric::expit;
use crate::quadrature::GaussHermite;

pub type Surface1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Surface2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Surface4 = Arc<dyn Fn(f64, f64, bool, bool) -> f64 + Send + Sync>;

#[derive(Debug, Error)]
pub enum TruthError {
    #[error(
        "quadrature for {context} did not stabilize: {coarse} vs {fine} \
         (relative gap {gap:.3e})"
    )]
    Precision {
        context: &'static str,
        coarse: f64,
        fine: f64,
        gap: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Probabilities of observing each response at the two occasions.
#[derive(Clone)]
pub struct MissingModel {
    pub r1: Surface2,
    pub r2: Surface4,
}

/// A complete generating model on scalar `v`.
#[derive(Clone)]
pub struct TrueModelSpec {
    pub rho: f64,
    pub alpha0: DVector<f64>,
    pub beta0: DVector<f64>,
    /// `logit p(y1 = 1 | u, v)`, also the latent baseline of the `y2` logit.
    pub lambda: Surface2,
    /// `pi(1 | u, v)`, the compliance probability.
    pub pi_c: Surface2,
    /// `p(z = 1 | v)`.
    pub pz: Surface1,
    pub missing: Option<MissingModel>,
    pub param: Parametrization,
}

impl TrueModelSpec {
    /// The bivariate-normal benchmark family: `lambda = (u + v) / sqrt(1 +
    /// rho^2) - 1`, compliance logit half of `(u + v) / sqrt(1 + rho^2)`,
    /// `p(z = 1 | v) = expit(-v)`, simple parametrization with
    /// `m(v) = (1, v)'`. The missingness layer uses the scaling
    /// `sqrt(1 + rho)` in its latent index.
    pub fn benchmark_scenario(rho: f64, alpha1: f64, alpha2: f64, beta: f64, missing: bool) -> Self {
        let s = (1.0 + rho * rho).sqrt();
        let sm = (1.0 + rho).sqrt();
        Self {
            rho,
            alpha0: DVector::from_vec(vec![alpha1, alpha2]),
            beta0: DVector::from_vec(vec![beta]),
            lambda: Arc::new(move |u, v| (u + v) / s - 1.0),
            pi_c: Arc::new(move |u, v| expit((u + v) / s / 2.0)),
            pz: Arc::new(|v| expit(-v)),
            missing: missing.then(|| MissingModel {
                r1: Arc::new(move |u, v| expit(1.0 + (u + v) / sm / 2.0)),
                r2: Arc::new(move |u, v, c, x| {
                    expit(
                        1.0 + (u + v) / sm / 2.0
                            + if c { 0.5 } else { 0.0 }
                            + if x { 0.5 } else { 0.0 },
                    )
                }),
            }),
            param: Parametrization::simple_linear_m(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadratureSettings {
    pub nodes: usize,
    pub check_nodes: usize,
    pub rel_tol: f64,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            nodes: 64,
            check_nodes: 96,
            rel_tol: 1e-8,
        }
    }
}

/// An observable cell of the missing-response design: each response is
/// `Some(y)` when observed and `None` when its indicator is zero.
pub type MissingCell = (Option<bool>, bool, bool, Option<bool>);

fn bern(y: bool, p: f64) -> f64 {
    if y {
        p
    } else {
        1.0 - p
    }
}

/// The quadrature engine over a [`TrueModelSpec`].
pub struct Truth {
    pub spec: TrueModelSpec,
    pub settings: QuadratureSettings,
    coarse: GaussHermite,
    fine: GaussHermite,
}

impl Truth {
    pub fn new(spec: TrueModelSpec, settings: QuadratureSettings) -> Self {
        let coarse = GaussHermite::new(settings.nodes);
        let fine = GaussHermite::new(settings.check_nodes);
        Self {
            spec,
            settings,
            coarse,
            fine,
        }
    }

    pub fn with_defaults(spec: TrueModelSpec) -> Self {
        Self::new(spec, QuadratureSettings::default())
    }

    fn latent_mean_sd(&self, v: f64) -> (f64, f64) {
        let rho = self.spec.rho;
        (rho * v, (1.0 - rho * rho).sqrt())
    }

    /// Integrate over `u | v`, verifying stability against the finer rule.
    fn checked_expectation(
        &self,
        v: f64,
        context: &'static str,
        f: impl Fn(f64) -> f64,
    ) -> Result<f64, TruthError> {
        let (mean, sd) = self.latent_mean_sd(v);
        let coarse = self.coarse.integrate_normal(mean, sd, &f);
        let fine = self.fine.integrate_normal(mean, sd, &f);
        let gap = (coarse - fine).abs() / fine.abs().max(1e-300);
        if gap > self.settings.rel_tol && (coarse - fine).abs() > 1e-14 {
            return Err(TruthError::Precision {
                context,
                coarse,
                fine,
                gap,
            });
        }
        Ok(coarse)
    }

    /// `logit p(y2 = 1 | u, v, c, x) - lambda(u, v)`.
    fn response_shift(&self, v: f64, c: bool, x: bool) -> Result<f64, TruthError> {
        let a = self.spec.param.a(&[v], x)?;
        let mut t = a.dot(&self.spec.alpha0);
        if c && !x {
            t += self.spec.param.b(&[v])?.dot(&self.spec.beta0);
        }
        Ok(t)
    }

    /// `f(y1, z, x, y2 | v)` for the fully observed design.
    pub fn cell_probability(
        &self,
        y1: bool,
        z: bool,
        x: bool,
        y2: bool,
        v: f64,
    ) -> Result<f64, TruthError> {
        if x && !z {
            return Ok(0.0);
        }
        let mut shifts = [0.0f64; 2];
        for c in [false, true] {
            shifts[c as usize] = self.response_shift(v, c, x)?;
        }
        let spec = &self.spec;
        let pz_term = bern(z, (spec.pz)(v));
        let inner = self.checked_expectation(v, "observable cell probability", |u| {
            let lam = (spec.lambda)(u, v);
            let p1 = bern(y1, expit(lam));
            let pic = (spec.pi_c)(u, v);
            let mut total = 0.0;
            for c in [false, true] {
                // receipt is deterministic: x = z * c
                if x != (z && c) {
                    continue;
                }
                let p2 = bern(y2, expit(lam + shifts[c as usize]));
                total += p1 * p2 * bern(c, pic);
            }
            total
        })?;
        Ok(pz_term * inner)
    }

    /// `f*(y1, z, x, y2, r1, r2 | v)` for the missing-response design;
    /// unobserved responses are marginalized out. Requires a missingness
    /// layer in the spec.
    pub fn cell_probability_missing(
        &self,
        y1: Option<bool>,
        z: bool,
        x: bool,
        y2: Option<bool>,
        v: f64,
    ) -> Result<f64, TruthError> {
        let missing = self
            .spec
            .missing
            .as_ref()
            .expect("missing-response probabilities need a missingness layer");
        if x && !z {
            return Ok(0.0);
        }
        let mut shifts = [0.0f64; 2];
        for c in [false, true] {
            shifts[c as usize] = self.response_shift(v, c, x)?;
        }
        let spec = &self.spec;
        let pz_term = bern(z, (spec.pz)(v));
        let inner = self.checked_expectation(v, "missing-design cell probability", |u| {
            let lam = (spec.lambda)(u, v);
            let p1 = match y1 {
                Some(y) => bern(y, expit(lam)),
                None => 1.0,
            };
            let pr1 = bern(y1.is_some(), (missing.r1)(u, v));
            let pic = (spec.pi_c)(u, v);
            let mut total = 0.0;
            for c in [false, true] {
                if x != (z && c) {
                    continue;
                }
                let p2 = match y2 {
                    Some(y) => bern(y, expit(lam + shifts[c as usize])),
                    None => 1.0,
                };
                let pr2 = bern(y2.is_some(), (missing.r2)(u, v, c, x));
                total += p1 * pr1 * p2 * pr2 * bern(c, pic);
            }
            total
        })?;
        Ok(pz_term * inner)
    }

    /// All observable `(z, x)` arms: `(0,0)`, `(1,0)`, `(1,1)`.
    pub fn observable_arms() -> [(bool, bool); 3] {
        crate::estimator::OBSERVABLE_ARMS
    }

    /// All observable cells of the fully observed design with their
    /// probabilities at `v`. The probabilities sum to one.
    pub fn cell_table(&self, v: f64) -> Result<Vec<((bool, bool, bool, bool), f64)>, TruthError> {
        let mut out = Vec::with_capacity(12);
        for (z, x) in Self::observable_arms() {
            for y1 in [false, true] {
                for y2 in [false, true] {
                    out.push(((y1, z, x, y2), self.cell_probability(y1, z, x, y2, v)?));
                }
            }
        }
        Ok(out)
    }

    /// All observable cells of the missing-response design at `v`.
    pub fn cell_table_missing(&self, v: f64) -> Result<Vec<(MissingCell, f64)>, TruthError> {
        let mut out = Vec::with_capacity(27);
        let levels = [None, Some(false), Some(true)];
        for (z, x) in Self::observable_arms() {
            for y1 in levels {
                for y2 in levels {
                    out.push(((y1, z, x, y2), self.cell_probability_missing(y1, z, x, y2, v)?));
                }
            }
        }
        Ok(out)
    }

    /// `E[pi(1 | U, v) | v]`, the covariate-conditional compliance rate.
    pub fn mean_compliance(&self, v: f64) -> Result<f64, TruthError> {
        let spec = &self.spec;
        self.checked_expectation(v, "mean compliance", |u| (spec.pi_c)(u, v))
    }

    /// The attenuation factor on the control-arm discordant log-odds: the
    /// conditional compliance probability given `(y1, y2) = (0, 1)` in the
    /// control arm at `(v)`, when the compliance effect is evaluated at
    /// `beta0 = 0` in the response part.
    pub fn correction_factor_h(&self, v: f64) -> Result<f64, TruthError> {
        let t0 = self.spec.param.a(&[v], false)?.dot(&self.spec.alpha0);
        let spec = &self.spec;
        let kernel = move |u: f64| {
            let lam = (spec.lambda)(u, v);
            expit(lam) * (1.0 - expit(lam + t0))
        };
        let num =
            self.checked_expectation(v, "correction factor numerator", |u| {
                kernel(u) * (spec.pi_c)(u, v)
            })?;
        let den = self.checked_expectation(v, "correction factor denominator", kernel)?;
        Ok(num / den)
    }

    /// The control-arm discordant log-odds `ln[f(0,0,0,1|v) / f(1,0,0,0|v)]`
    /// and its linear approximation `a(v,0)' alpha0 + h(v) b(v)' beta0`.
    /// Returns `(approx, exact)`.
    pub fn approx_control_logit(&self, v: f64) -> Result<(f64, f64), TruthError> {
        let h = self.correction_factor_h(v)?;
        let a0 = self.spec.param.a(&[v], false)?.dot(&self.spec.alpha0);
        let b = self.spec.param.b(&[v])?.dot(&self.spec.beta0);
        let approx = a0 + h * b;
        let num = self.cell_probability(false, false, false, true, v)?;
        let den = self.cell_probability(true, false, false, false, v)?;
        Ok((approx, (num / den).ln()))
    }

    /// `p(y2 = 1 | y1 + y2 = 1, z = 1, x, v)`; equals
    /// `expit(a(v, x)' alpha0)` exactly, whatever the latent structure.
    pub fn treatment_conditional(&self, x: bool, v: f64) -> Result<f64, TruthError> {
        let up = self.cell_probability(false, true, x, true, v)?;
        let down = self.cell_probability(true, true, x, false, v)?;
        Ok(up / (up + down))
    }
}
