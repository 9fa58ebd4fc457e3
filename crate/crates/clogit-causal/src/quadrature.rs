//! Gauss–Hermite quadrature for expectations under normal laws.
//!
//! Nodes and weights come from the Golub–Welsch eigendecomposition of the
//! Jacobi matrix of the Hermite polynomials: the symmetric tridiagonal
//! matrix with zero diagonal and off-diagonal entries `sqrt(i / 2)`.

use nalgebra::{DMatrix, SymmetricEigen};

/// A fixed Gauss–Hermite rule for weight function `exp(-x^2)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a quadrature rule needs at least one node");
        let mut jacobi = DMatrix::zeros(n, n);
        for i in 1..n {
            let off = (i as f64 / 2.0).sqrt();
            jacobi[(i, i - 1)] = off;
            jacobi[(i - 1, i)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let first = eig.eigenvectors[(0, j)];
                (eig.eigenvalues[j], sqrt_pi * first * first)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(X)]` for `X ~ N(mean, sd^2)`.
    pub fn integrate_normal(&self, mean: f64, sd: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let scale = std::f64::consts::SQRT_2 * sd;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (w / sqrt_pi) * f(mean + scale * x))
            .sum()
    }
}
