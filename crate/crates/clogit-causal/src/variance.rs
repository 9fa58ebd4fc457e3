//! Sandwich variance of the two-step estimator and the delta-method
//! standard error of the causal effect.
//!
//! The stacked estimating equation `s(eta, theta) = 0` collects the
//! first-step weighted score in `eta` and the second-step conditional score
//! in `theta`. The covariance of the solution is estimated by
//! `Sigma = H^{-1} K (H')^{-1}`, where `H` is the derivative of the stacked
//! score and `K` an outer-product estimate of its covariance. The upper-right
//! block of `H` is exactly zero because the first-step score does not
//! involve `theta`.
//!
//! Row weights (1 for real records, 0.5 for augmented ones) multiply each
//! record's contribution to every sum once, consistent with the weighted
//! likelihoods the point estimates solve. Augmented rows never enter the
//! first-step sums.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::Dataset;
use crate::model::{self, CausalParams, ComplianceModel, ModelError, Parametrization};
use crate::numeric::expit;

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("singular H: smallest pivot {pivot:.3e} at index {index} ({block} block)")]
    SingularH {
        pivot: f64,
        index: usize,
        block: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The assembled sandwich pieces.
#[derive(Debug, Clone)]
pub struct SandwichParts {
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

struct RecordTerms {
    // first step (zero for augmented or control-arm records)
    in_step1: bool,
    w1: f64, // z / pz
    resid1: f64,
    m: DVector<f64>,
    // second step (zero unless d * r1 * r2 = 1)
    in_step2: bool,
    design: DVector<f64>,
    mu: f64,
    resid2: f64,
    dwdeta_col: DVector<f64>, // (0', (1-z) pi (1-pi) b(v)')' ; dw/deta' = col * m'
    weight: f64,
}

fn record_terms(
    data: &Dataset,
    param: &Parametrization,
    compliance: &ComplianceModel,
    theta: &CausalParams,
) -> Result<Vec<RecordTerms>, VarianceError> {
    let theta_vec = theta.theta();
    let mut out = Vec::with_capacity(data.records.len());
    for rec in &data.records {
        let m = compliance.m(&rec.v)?;
        let pi = expit(m.dot(&compliance.eta));
        let in_step1 = rec.z && !rec.augmented;
        let (w1, resid1) = if in_step1 {
            (1.0 / rec.pz, (if rec.x { 1.0 } else { 0.0 }) - pi)
        } else {
            (0.0, 0.0)
        };
        let discordant = rec.discordant();
        let in_step2 = discordant.is_some();
        let (design, mu, resid2, dwdeta_col) = if let Some(y2) = discordant {
            let design = model::design_row(param, compliance, &rec.v, rec.z, rec.x)?;
            let mu = expit(design.dot(&theta_vec));
            let mut col = DVector::zeros(param.p_theta());
            if !rec.z {
                col.rows_mut(param.p_a, param.p_b)
                    .copy_from(&(param.b(&rec.v)? * (pi * (1.0 - pi))));
            }
            (design, mu, (if y2 { 1.0 } else { 0.0 }) - mu, col)
        } else {
            (
                DVector::zeros(param.p_theta()),
                0.0,
                0.0,
                DVector::zeros(param.p_theta()),
            )
        };
        out.push(RecordTerms {
            in_step1,
            w1,
            resid1,
            m,
            in_step2,
            design,
            mu,
            resid2,
            dwdeta_col,
            weight: rec.weight,
        });
    }
    Ok(out)
}

/// Stacked score `s(eta, theta)` summed over the dataset; used by the
/// finite-difference checks of `build_h`.
pub fn stacked_score(
    data: &Dataset,
    param: &Parametrization,
    compliance: &ComplianceModel,
    theta: &CausalParams,
) -> Result<DVector<f64>, VarianceError> {
    let p_m = param.p_m;
    let p_t = param.p_theta();
    let mut s = DVector::zeros(p_m + p_t);
    for t in record_terms(data, param, compliance, theta)? {
        if t.in_step1 {
            s.rows_mut(0, p_m)
                .axpy(t.weight * t.w1 * t.resid1, &t.m, 1.0);
        }
        if t.in_step2 {
            s.rows_mut(p_m, p_t).axpy(t.weight * t.resid2, &t.design, 1.0);
        }
    }
    Ok(s)
}

/// Derivative of the stacked score with respect to `(eta', theta')`, with
/// the three nonzero blocks assembled analytically.
pub fn build_h(
    data: &Dataset,
    param: &Parametrization,
    compliance: &ComplianceModel,
    theta: &CausalParams,
) -> Result<DMatrix<f64>, VarianceError> {
    let p_m = param.p_m;
    let p_t = param.p_theta();
    let n = p_m + p_t;
    let mut h = DMatrix::zeros(n, n);
    let theta_vec = theta.theta();
    for t in record_terms(data, param, compliance, theta)? {
        if t.in_step1 {
            // d^2 l1 / deta deta' = -sum w1 pi (1-pi) m m'
            let pi = expit(t.m.dot(&compliance.eta));
            let coef = -t.weight * t.w1 * pi * (1.0 - pi);
            h.view_mut((0, 0), (p_m, p_m))
                .syger(coef, &t.m, &t.m, 1.0);
        }
        if t.in_step2 {
            // cross block: d^2 l2 / dtheta deta'
            //   = d [resid2 * dw/deta' - mu (1-mu) (theta' dw/deta') w]
            let tdot = theta_vec.dot(&t.dwdeta_col);
            let combined =
                &t.dwdeta_col * t.resid2 - &t.design * (t.mu * (1.0 - t.mu) * tdot);
            h.view_mut((p_m, 0), (p_t, p_m))
                .ger(t.weight, &combined, &t.m, 1.0);
            // d^2 l2 / dtheta dtheta' = -sum d mu (1-mu) w w'
            h.view_mut((p_m, p_m), (p_t, p_t)).syger(
                -t.weight * t.mu * (1.0 - t.mu),
                &t.design,
                &t.design,
                1.0,
            );
        }
    }
    // syger fills lower triangles; mirror the two diagonal blocks.
    for (off, len) in [(0, p_m), (p_m, p_t)] {
        for i in 0..len {
            for j in (i + 1)..len {
                h[(off + i, off + j)] = h[(off + j, off + i)];
            }
        }
    }
    Ok(h)
}

/// Outer-product estimate of the covariance of the stacked score, block by
/// block; records with zero first-step score contribute only to the
/// `(theta, theta)` block.
pub fn build_k(
    data: &Dataset,
    param: &Parametrization,
    compliance: &ComplianceModel,
    theta: &CausalParams,
) -> Result<DMatrix<f64>, VarianceError> {
    let p_m = param.p_m;
    let p_t = param.p_theta();
    let n = p_m + p_t;
    let mut k = DMatrix::zeros(n, n);
    for t in record_terms(data, param, compliance, theta)? {
        if t.in_step1 {
            // K11 = sum z/pz^2 (x - pi)^2 m m'
            k.view_mut((0, 0), (p_m, p_m)).syger(
                t.weight * t.w1 * t.w1 * t.resid1 * t.resid1,
                &t.m,
                &t.m,
                1.0,
            );
        }
        if t.in_step1 && t.in_step2 {
            // K12 = sum d z/pz (x - pi) (y2 - mu) m w'
            k.view_mut((0, p_m), (p_m, p_t)).ger(
                t.weight * t.w1 * t.resid1 * t.resid2,
                &t.m,
                &t.design,
                1.0,
            );
        }
        if t.in_step2 {
            // K22 = sum d (y2 - mu)^2 w w'
            k.view_mut((p_m, p_m), (p_t, p_t)).syger(
                t.weight * t.resid2 * t.resid2,
                &t.design,
                &t.design,
                1.0,
            );
        }
    }
    // mirror diagonal blocks and set K21 = K12'
    for (off, len) in [(0, p_m), (p_m, p_t)] {
        for i in 0..len {
            for j in (i + 1)..len {
                k[(off + i, off + j)] = k[(off + j, off + i)];
            }
        }
    }
    for i in 0..p_t {
        for j in 0..p_m {
            k[(p_m + i, j)] = k[(j, p_m + i)];
        }
    }
    Ok(k)
}

const PIVOT_TOL: f64 = 1e-12;

/// `Sigma = H^{-1} K (H')^{-1}` by factorization-and-solve, symmetrized by
/// averaging with its transpose.
pub fn sandwich_cov(
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    p_m: usize,
) -> Result<DMatrix<f64>, VarianceError> {
    let n = h.nrows();
    let lu = h.clone().lu();
    let u = lu.u();
    let mut min_pivot = f64::INFINITY;
    let mut min_index = 0;
    for i in 0..n {
        let p = u[(i, i)].abs();
        if p < min_pivot {
            min_pivot = p;
            min_index = i;
        }
    }
    if min_pivot < PIVOT_TOL {
        return Err(VarianceError::SingularH {
            pivot: min_pivot,
            index: min_index,
            block: if min_index < p_m { "eta" } else { "theta" },
        });
    }
    // A = H^{-1} K, then Sigma' = H^{-1} A', so Sigma = (H^{-1} A')'.
    let a = lu.solve(k).expect("pivot check passed");
    let sigma_t = lu.solve(&a.transpose()).expect("pivot check passed");
    let sigma = sigma_t.transpose();
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Assemble `H`, `K` and the sandwich covariance in one pass.
pub fn assemble(
    data: &Dataset,
    param: &Parametrization,
    compliance: &ComplianceModel,
    theta: &CausalParams,
) -> Result<SandwichParts, VarianceError> {
    let h = build_h(data, param, compliance, theta)?;
    let k = build_k(data, param, compliance, theta)?;
    let sigma = sandwich_cov(&h, &k, param.p_m)?;
    Ok(SandwichParts { h, k, sigma })
}

/// Delta-method standard error of `delta(v)`: `sqrt(g' Sigma_theta g)` with
/// `g = ([a(v,1) - a(v,0)]', -b(v)')'`. Returns the (possibly clamped)
/// standard error and whether clamping occurred.
pub fn delta_se(
    sigma_theta: &DMatrix<f64>,
    param: &Parametrization,
    v: &[f64],
) -> Result<(f64, bool), ModelError> {
    let g = model::causal_effect_gradient(param, v)?;
    let q = g.dot(&(sigma_theta * &g));
    if q < 0.0 {
        Ok((0.0, true))
    } else {
        Ok((q.sqrt(), false))
    }
}

/// Robust (sandwich) covariance for a plain weighted logistic MLE; used for
/// the standard errors of the ITT/TR comparison estimators.
pub fn logistic_sandwich(
    rows: &[(DVector<f64>, bool, f64)],
    coef: &DVector<f64>,
) -> Result<DMatrix<f64>, VarianceError> {
    let dim = coef.len();
    let mut h = DMatrix::zeros(dim, dim);
    let mut k = DMatrix::zeros(dim, dim);
    for (x, y, w) in rows {
        let mu = expit(x.dot(coef));
        let r = (if *y { 1.0 } else { 0.0 }) - mu;
        h.syger(-w * mu * (1.0 - mu), x, x, 1.0);
        k.syger(w * r * r, x, x, 1.0);
    }
    for m in [&mut h, &mut k] {
        for i in 0..dim {
            for j in (i + 1)..dim {
                m[(i, j)] = m[(j, i)];
            }
        }
    }
    sandwich_cov(&h, &k, 0)
}
