//! The two-step estimator, its missing-response variant, the closed-form
//! treatment-arm estimates, the rule-of-thumb cell augmentation and the
//! ITT/TR comparison estimators.
//!
//! Step 1 fits the compliance model by weighted logistic regression of
//! receipt on `m(v)` over the treatment arm, with inverse assignment
//! probability weights. Step 2 maximizes the conditional log-likelihood of
//! `y2` given `y1 + y2 = 1` over the design rows of [`model::design_row`],
//! restricted to subjects observed at both occasions. With no missing
//! responses the restriction is vacuous and the estimator reduces exactly to
//! the fully observed one.

use nalgebra::DVector;
use thiserror::Error;

use crate::logistic::{self, FitResult, LogisticError, LogisticProblem};
use crate::model::{
    self, CausalEstimate, CausalParams, ComplianceModel, Diagnostics, ModelError, Parametrization,
    SubjectRecord,
};
use crate::variance::{self, VarianceError};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("step 1 (compliance model): {0}")]
    Step1(#[source] LogisticError),
    #[error("step 2 (conditional likelihood): {0}")]
    Step2(#[source] LogisticError),
    #[error("sandwich variance: {0}")]
    Variance(#[from] VarianceError),
    #[error("no treatment-arm records; eta is not estimable")]
    NoTreatmentArm,
    #[error("no discordant fully observed rows; theta is not estimable")]
    NoDiscordantRows,
    #[error("count n_{{{y1}{z}{x}{y2}}} is zero; the closed-form log-ratio is undefined (augment first)")]
    UndefinedRatio { y1: u8, z: u8, x: u8, y2: u8 },
    #[error("comparison estimator ({which}): {source}")]
    Comparison {
        which: &'static str,
        #[source]
        source: LogisticError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A study sample plus its covariate schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub schema: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>, schema: Vec<String>) -> Result<Self, ModelError> {
        for rec in &records {
            if rec.v.len() != schema.len() {
                return Err(ModelError::InvalidRecord {
                    id: rec.id.clone(),
                    reason: format!(
                        "covariate vector of length {} under a schema of length {}",
                        rec.v.len(),
                        schema.len()
                    ),
                });
            }
        }
        Ok(Self { records, schema })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }
}

/// The three observable `(z, x)` configurations under one-sided
/// non-compliance.
pub const OBSERVABLE_ARMS: [(bool, bool); 3] = [(false, false), (true, false), (true, true)];

/// Weighted counts of the discordant response configurations
/// `n_{y1 z x y2}`, `y1 + y2 = 1`, over the observable arms. Augmented
/// records enter with their half weights, so counts are real-valued.
#[derive(Debug, Clone, Default)]
pub struct DiscordantCounts {
    // indexed by arm (index into OBSERVABLE_ARMS) and y2
    counts: [[f64; 2]; 3],
}

fn arm_index(z: bool, x: bool) -> usize {
    match (z, x) {
        (false, false) => 0,
        (true, false) => 1,
        (true, true) => 2,
        (false, true) => unreachable!("z = 0 implies x = 0"),
    }
}

impl DiscordantCounts {
    /// Tally discordant fully observed records.
    pub fn from_dataset(data: &Dataset) -> Self {
        let mut counts = Self::default();
        for rec in &data.records {
            if let Some(y2) = rec.discordant() {
                counts.counts[arm_index(rec.z, rec.x)][y2 as usize] += rec.weight;
            }
        }
        counts
    }

    /// `n_{y1 z x y2}` for a discordant configuration (`y1 = 1 - y2`).
    pub fn n(&self, z: bool, x: bool, y2: bool) -> f64 {
        self.counts[arm_index(z, x)][y2 as usize]
    }
}

/// Closed-form treatment-arm estimates
/// `alpha_1 = log(n_0101 / n_1100)`, `alpha_2 = log(n_0111 / n_1110)`.
pub fn closed_form_alphas(counts: &DiscordantCounts) -> Result<(f64, f64), EstimatorError> {
    let ratio = |x: bool| -> Result<f64, EstimatorError> {
        let num = counts.n(true, x, true);
        let den = counts.n(true, x, false);
        for (count, y2) in [(num, true), (den, false)] {
            if count <= 0.0 {
                return Err(EstimatorError::UndefinedRatio {
                    y1: !y2 as u8,
                    z: 1,
                    x: x as u8,
                    y2: y2 as u8,
                });
            }
        }
        Ok((num / den).ln())
    };
    Ok((ratio(false)?, ratio(true)?))
}

/// Step 1: fit `logit[pi(1|v)] = m(v)' eta` on the treatment arm with
/// weights `weight / pz`. All treatment-arm subjects are used regardless of
/// the response indicators; augmented rows are skipped since they carry no
/// real receipt.
pub fn step1_compliance(
    data: &Dataset,
    param: &Parametrization,
) -> Result<(ComplianceModel, FitResult), EstimatorError> {
    let mut problem = LogisticProblem::new(param.p_m);
    for rec in &data.records {
        if rec.z && !rec.augmented {
            problem
                .push(param.m(&rec.v)?, rec.x, rec.weight / rec.pz)
                .map_err(EstimatorError::Step1)?;
        }
    }
    if problem.is_empty() {
        return Err(EstimatorError::NoTreatmentArm);
    }
    let fit = logistic::fit_default(&problem).map_err(EstimatorError::Step1)?;
    Ok((ComplianceModel::new(fit.coef.clone(), param), fit))
}

/// Rule-of-thumb augmentation: for each observable arm missing a discordant
/// response pair among fully observed records, append one synthetic record
/// with mean covariates and weight 0.5. Returns the augmented dataset and
/// the list of added cells as `(z, x, y1, y2)`.
pub fn augment_discordant(data: &Dataset) -> (Dataset, Vec<(bool, bool, bool, bool)>) {
    let counts = DiscordantCounts::from_dataset(data);
    let k = data.schema.len();
    let mut mean_v = vec![0.0; k];
    if !data.records.is_empty() {
        for rec in &data.records {
            for (acc, vi) in mean_v.iter_mut().zip(&rec.v) {
                *acc += vi;
            }
        }
        for acc in &mut mean_v {
            *acc /= data.records.len() as f64;
        }
    }
    let arm_mean_pz = |z: bool| -> f64 {
        let arm: Vec<f64> = data
            .records
            .iter()
            .filter(|r| r.z == z)
            .map(|r| r.pz)
            .collect();
        if !arm.is_empty() {
            arm.iter().sum::<f64>() / arm.len() as f64
        } else if !data.records.is_empty() {
            data.records.iter().map(|r| r.pz).sum::<f64>() / data.records.len() as f64
        } else {
            0.5
        }
    };
    let mut out = data.clone();
    let mut log = Vec::new();
    for (z, x) in OBSERVABLE_ARMS {
        for y2 in [true, false] {
            if counts.n(z, x, y2) == 0.0 {
                let y1 = !y2;
                let mut rec = SubjectRecord::new(
                    format!("aug-z{}x{}y1{}y2{}", z as u8, x as u8, y1 as u8, y2 as u8),
                    mean_v.clone(),
                    Some(y1),
                    z,
                    x,
                    Some(y2),
                    arm_mean_pz(z).clamp(1e-6, 1.0 - 1e-6),
                    0.5,
                )
                .expect("synthetic record is valid by construction");
                rec.augmented = true;
                out.records.push(rec);
                log.push((z, x, y1, y2));
            }
        }
    }
    (out, log)
}

/// Step 2: maximize the conditional log-likelihood over records with
/// `d * r1 * r2 = 1`, response `y2`, design [`model::design_row`].
pub fn step2_conditional(
    data: &Dataset,
    param: &Parametrization,
    compliance: &ComplianceModel,
) -> Result<(CausalParams, FitResult), EstimatorError> {
    let mut problem = LogisticProblem::new(param.p_theta());
    for rec in &data.records {
        if let Some(y2) = rec.discordant() {
            let row = model::design_row(param, compliance, &rec.v, rec.z, rec.x)?;
            problem.push(row, y2, rec.weight).map_err(EstimatorError::Step2)?;
        }
    }
    if problem.is_empty() {
        return Err(EstimatorError::NoDiscordantRows);
    }
    let fit = logistic::fit_default(&problem).map_err(EstimatorError::Step2)?;
    let params = CausalParams::from_theta(&fit.coef, param.p_a, param.p_b)?;
    Ok((params, fit))
}

fn comparison_problem(data: &Dataset, use_x: bool) -> LogisticProblem {
    let mut problem = LogisticProblem::new(2);
    for rec in &data.records {
        if rec.augmented {
            continue;
        }
        if let Some(y2) = rec.discordant() {
            let reg = if use_x { rec.x } else { rec.z };
            problem
                .push(
                    DVector::from_vec(vec![1.0, if reg { 1.0 } else { 0.0 }]),
                    y2,
                    rec.weight,
                )
                .expect("dimension fixed at 2");
        }
    }
    problem
}

/// ITT and TR comparison estimates: slopes of the conditional logistic
/// regressions of `y2` on `(1, z)` and `(1, x)` over discordant fully
/// observed records.
pub fn itt_tr_estimates(data: &Dataset) -> Result<(f64, f64), EstimatorError> {
    let itt = comparison_fit(data, false)?.coef[1];
    let tr = comparison_fit(data, true)?.coef[1];
    Ok((itt, tr))
}

/// One comparison fit; `use_x` selects TR (`y2` on `(1, x)`) over ITT
/// (`y2` on `(1, z)`).
pub fn comparison_fit(data: &Dataset, use_x: bool) -> Result<FitResult, EstimatorError> {
    let problem = comparison_problem(data, use_x);
    logistic::fit_default(&problem).map_err(|source| EstimatorError::Comparison {
        which: if use_x { "TR" } else { "ITT" },
        source,
    })
}

/// Comparison fit plus its robust standard error for the slope.
pub fn comparison_fit_with_se(
    data: &Dataset,
    use_x: bool,
) -> Result<(f64, f64), EstimatorError> {
    let fit = comparison_fit(data, use_x)?;
    let mut rows = Vec::new();
    for rec in &data.records {
        if rec.augmented {
            continue;
        }
        if let Some(y2) = rec.discordant() {
            let reg = if use_x { rec.x } else { rec.z };
            rows.push((
                DVector::from_vec(vec![1.0, if reg { 1.0 } else { 0.0 }]),
                y2,
                rec.weight,
            ));
        }
    }
    let cov = variance::logistic_sandwich(&rows, &fit.coef)?;
    Ok((fit.coef[1], cov[(1, 1)].max(0.0).sqrt()))
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    /// Apply the rule-of-thumb augmentation before fitting (default true).
    pub augment: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { augment: true }
    }
}

/// The full two-step procedure: optional augmentation, step 1, step 2,
/// sandwich variance.
pub fn estimate(
    data: &Dataset,
    param: &Parametrization,
    options: &EstimateOptions,
) -> Result<CausalEstimate, EstimatorError> {
    let (working, augmentation) = if options.augment {
        augment_discordant(data)
    } else {
        (data.clone(), Vec::new())
    };
    let (compliance, fit1) = step1_compliance(&working, param)?;
    let (theta_hat, fit2) = step2_conditional(&working, param, &compliance)?;
    let parts = variance::assemble(&working, param, &compliance, &theta_hat)?;
    let real_discordant_rows = working
        .records
        .iter()
        .filter(|r| !r.augmented && r.discordant().is_some())
        .count();
    let diagnostics = Diagnostics {
        step1_iterations: fit1.iterations,
        step2_iterations: fit2.iterations,
        step1_converged: fit1.converged,
        step2_converged: fit2.converged,
        augmentation,
        real_discordant_rows,
        degenerate: real_discordant_rows == 0,
        se_clamped: false,
    };
    Ok(CausalEstimate {
        eta_hat: compliance.eta.clone(),
        theta_hat,
        sigma_hat: parts.sigma,
        param: param.clone(),
        diagnostics,
    })
}
