//! Weighted binary-logistic maximum likelihood by Newton iterations with
//! analytic score and Hessian. Both estimation steps, the comparison
//! estimators and the population-limit engine reduce to fits of this form.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numeric::{expit, log1p_exp};

#[derive(Debug, Error)]
pub enum LogisticError {
    #[error("non-finite value while evaluating the likelihood at row {row}")]
    NumericFailure { row: usize },
    #[error("complete or quasi-complete separation detected (|coef| > {COEF_BOUND} with non-vanishing gradient)")]
    Separation,
    #[error("singular Hessian")]
    SingularHessian,
    #[error("problem has no row with positive weight")]
    Empty,
    #[error("design vector of length {got} on a problem of dimension {dim}")]
    Dimension { dim: usize, got: usize },
}

/// Coefficient-norm bound beyond which a non-stationary fit is reported as
/// separation. On the logit scale nothing interpretable lives out there; the
/// rule-of-thumb augmentation is the usual remedy for the empty cells that
/// cause it.
pub const COEF_BOUND: f64 = 30.0;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone)]
struct Row {
    design: DVector<f64>,
    y: bool,
    weight: f64,
}

/// A weighted logistic regression problem.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    rows: Vec<Row>,
    dim: usize,
}

impl LogisticProblem {
    pub fn new(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            dim,
        }
    }

    pub fn push(
        &mut self,
        design: DVector<f64>,
        y: bool,
        weight: f64,
    ) -> Result<(), LogisticError> {
        if design.len() != self.dim {
            return Err(LogisticError::Dimension {
                dim: self.dim,
                got: design.len(),
            });
        }
        self.rows.push(Row { design, y, weight });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coef: DVector<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted log-likelihood, score and Hessian at `coef`:
/// `sum_i w_i [y_i log mu_i + (1 - y_i) log(1 - mu_i)]` with
/// `mu_i = expit(x_i' coef)`, score `sum_i w_i (y_i - mu_i) x_i`, Hessian
/// `-sum_i w_i mu_i (1 - mu_i) x_i x_i'`.
pub fn loglik_grad_hess(
    p: &LogisticProblem,
    coef: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>), LogisticError> {
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p.dim);
    let mut hess = DMatrix::zeros(p.dim, p.dim);
    for (i, row) in p.rows.iter().enumerate() {
        if row.weight == 0.0 {
            continue;
        }
        let s = row.design.dot(coef);
        let mu = expit(s);
        let y = if row.y { 1.0 } else { 0.0 };
        // y*s - log(1 + e^s) in the overflow-free form
        let contrib = row.weight * (y * s - log1p_exp(s));
        if !contrib.is_finite() {
            return Err(LogisticError::NumericFailure { row: i });
        }
        ll += contrib;
        let r = row.weight * (y - mu);
        grad.axpy(r, &row.design, 1.0);
        let w2 = row.weight * mu * (1.0 - mu);
        hess.syger(-w2, &row.design, &row.design, 1.0);
    }
    // syger fills the lower triangle only; mirror it.
    for i in 0..p.dim {
        for j in (i + 1)..p.dim {
            hess[(i, j)] = hess[(j, i)];
        }
    }
    Ok((ll, grad, hess))
}

/// Newton iterations with step-halving until the gradient max-norm falls
/// below `tol` or `max_iter` is reached.
pub fn fit(
    p: &LogisticProblem,
    init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<FitResult, LogisticError> {
    if !p.rows.iter().any(|r| r.weight > 0.0) {
        return Err(LogisticError::Empty);
    }
    let total_weight: f64 = p.rows.iter().map(|r| r.weight).sum();
    let mut coef = init.clone();
    let (mut ll, mut grad, mut hess) = loglik_grad_hess(p, &coef)?;
    let mut iterations = 0;
    loop {
        let grad_norm = grad.amax();
        if grad_norm <= tol {
            // A perfectly fit likelihood (zero deviance) is only reachable
            // in the separation limit; the stationarity test alone can stop
            // there with a finite coefficient.
            if ll > -1e-7 * total_weight {
                return Err(LogisticError::Separation);
            }
            return Ok(FitResult {
                coef,
                loglik: ll,
                grad_norm,
                iterations,
                converged: true,
            });
        }
        if coef.amax() > COEF_BOUND {
            return Err(LogisticError::Separation);
        }
        if iterations >= max_iter {
            return Ok(FitResult {
                coef,
                loglik: ll,
                grad_norm,
                iterations,
                converged: false,
            });
        }
        // Newton direction: (-H) d = g, with -H symmetric positive
        // semidefinite.
        let neg_hess = -&hess;
        let chol = neg_hess
            .cholesky()
            .ok_or(LogisticError::SingularHessian)?;
        let direction = chol.solve(&grad);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &coef + &direction * step;
            let (ll_new, grad_new, hess_new) = loglik_grad_hess(p, &candidate)?;
            // Near the optimum the objective gain is below rounding; still
            // accept steps that shrink the gradient.
            let rounding = 1e-12 * (1.0 + ll.abs());
            if ll_new >= ll || (ll_new >= ll - rounding && grad_new.amax() < grad.amax()) {
                coef = candidate;
                ll = ll_new;
                grad = grad_new;
                hess = hess_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // Line search exhausted: already at numerical stationarity.
            let grad_norm = grad.amax();
            return Ok(FitResult {
                coef,
                loglik: ll,
                grad_norm,
                iterations,
                converged: grad_norm <= tol,
            });
        }
    }
}

/// `fit` from the zero vector with default tolerance and iteration budget.
pub fn fit_default(p: &LogisticProblem) -> Result<FitResult, LogisticError> {
    fit(p, &DVector::zeros(p.dim()), DEFAULT_TOL, DEFAULT_MAX_ITER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::logit;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn intercept_only(successes: usize, failures: usize) -> LogisticProblem {
        let mut p = LogisticProblem::new(1);
        for _ in 0..successes {
            p.push(DVector::from_vec(vec![1.0]), true, 1.0).unwrap();
        }
        for _ in 0..failures {
            p.push(DVector::from_vec(vec![1.0]), false, 1.0).unwrap();
        }
        p
    }

    #[test]
    fn single_row_at_zero() {
        let mut p = LogisticProblem::new(1);
        p.push(DVector::from_vec(vec![1.0]), true, 1.0).unwrap();
        let (ll, g, h) = loglik_grad_hess(&p, &DVector::zeros(1)).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((h[(0, 0)] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_at_zero_is_weighted_residual_sum() {
        let mut p = LogisticProblem::new(2);
        let rows = [
            (vec![1.0, 0.5], true, 1.0),
            (vec![1.0, -1.0], false, 2.0),
            (vec![1.0, 2.0], true, 0.5),
        ];
        let mut expected = DVector::zeros(2);
        for (x, y, w) in rows {
            let xv = DVector::from_vec(x);
            expected.axpy(w * (if y { 1.0 } else { 0.0 } - 0.5), &xv, 1.0);
            p.push(xv, y, w).unwrap();
        }
        let (_, g, _) = loglik_grad_hess(&p, &DVector::zeros(2)).unwrap();
        assert!((g - expected).amax() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let dim = 3;
        let mut p = LogisticProblem::new(dim);
        for _ in 0..5 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            p.push(DVector::from_vec(x), rng.random_bool(0.5), rng.random_range(0.2..2.0))
                .unwrap();
        }
        let coef = DVector::from_vec(vec![0.3, -0.7, 0.1]);
        let (_, g, _) = loglik_grad_hess(&p, &coef).unwrap();
        let step = 1e-5;
        for j in 0..dim {
            let mut up = coef.clone();
            let mut dn = coef.clone();
            up[j] += step;
            dn[j] -= step;
            let (llu, _, _) = loglik_grad_hess(&p, &up).unwrap();
            let (lld, _, _) = loglik_grad_hess(&p, &dn).unwrap();
            let fd = (llu - lld) / (2.0 * step);
            assert!(
                (fd - g[j]).abs() / g[j].abs().max(1.0) < 1e-6,
                "component {j}: fd {fd} vs analytic {}",
                g[j]
            );
        }
    }

    #[test]
    fn intercept_mle_is_logit_of_mean() {
        let fit = fit_default(&intercept_only(3, 1)).unwrap();
        assert!(fit.converged);
        assert!((fit.coef[0] - logit(0.75)).abs() < 1e-8);
    }

    #[test]
    fn balanced_intercept_is_zero() {
        let fit = fit_default(&intercept_only(5, 5)).unwrap();
        assert!(fit.coef[0].abs() < 1e-10);
    }

    #[test]
    fn perfect_separation_reported() {
        let mut p = LogisticProblem::new(1);
        p.push(DVector::from_vec(vec![-1.0]), false, 1.0).unwrap();
        p.push(DVector::from_vec(vec![1.0]), true, 1.0).unwrap();
        match fit_default(&p) {
            Err(LogisticError::Separation) => {}
            other => panic!("expected separation error, got {other:?}"),
        }
    }

    #[test]
    fn loglik_nondecreasing_across_iterations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut p = LogisticProblem::new(2);
        for _ in 0..40 {
            let x = vec![1.0, rng.random_range(-2.0..2.0)];
            let y = rng.random_bool(expit(0.5 * x[1] - 0.2));
            p.push(DVector::from_vec(x), y, 1.0).unwrap();
        }
        // Re-run the Newton path manually, checking monotonicity.
        let mut coef = DVector::zeros(2);
        let mut last = loglik_grad_hess(&p, &coef).unwrap().0;
        for _ in 0..20 {
            let one_step = fit(&p, &coef, 1e-14, 1).unwrap();
            assert!(one_step.loglik >= last - 1e-12);
            last = one_step.loglik;
            coef = one_step.coef;
        }
    }

    #[test]
    fn empty_problem_is_error() {
        let p = LogisticProblem::new(1);
        assert!(matches!(fit_default(&p), Err(LogisticError::Empty)));
    }

    proptest! {
        #[test]
        fn weight_rescaling_leaves_coef_unchanged(c in 0.1f64..10.0, seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p1 = LogisticProblem::new(2);
            let mut p2 = LogisticProblem::new(2);
            for _ in 0..30 {
                let x = vec![1.0, rng.random_range(-1.5..1.5)];
                let y = rng.random_bool(expit(0.3 * x[1]));
                let w = rng.random_range(0.5..2.0);
                p1.push(DVector::from_vec(x.clone()), y, w).unwrap();
                p2.push(DVector::from_vec(x), y, c * w).unwrap();
            }
            let f1 = fit_default(&p1).unwrap();
            let f2 = fit_default(&p2).unwrap();
            prop_assert!((&f1.coef - &f2.coef).amax() < 1e-7);
        }

        #[test]
        fn duplicated_row_equals_doubled_weight(seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let mut dup = LogisticProblem::new(2);
            let mut wtd = LogisticProblem::new(2);
            for i in 0..20 {
                let x = vec![1.0, rng.random_range(-1.5..1.5)];
                let y = rng.random_bool(expit(-0.2 + 0.4 * x[1]));
                let xv = DVector::from_vec(x);
                if i % 3 == 0 {
                    dup.push(xv.clone(), y, 1.0).unwrap();
                    dup.push(xv.clone(), y, 1.0).unwrap();
                    wtd.push(xv, y, 2.0).unwrap();
                } else {
                    dup.push(xv.clone(), y, 1.0).unwrap();
                    wtd.push(xv, y, 1.0).unwrap();
                }
            }
            let init = DVector::zeros(2);
            let fd = fit(&dup, &init, 1e-12, DEFAULT_MAX_ITER).unwrap();
            let fw = fit(&wtd, &init, 1e-12, DEFAULT_MAX_ITER).unwrap();
            prop_assert!((&fd.coef - &fw.coef).amax() < 1e-7);
        }
    }
}
