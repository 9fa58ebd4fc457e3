//! Causal inference for two-arm randomized experiments with one-sided
//! non-compliance and repeated binary outcomes.
//!
//! The outcome of interest is observed before and after treatment, only
//! subjects assigned to the treatment arm can actually receive it, and the
//! causal effect of treatment over control on compliers is measured on the
//! logit scale. The crate provides:
//!
//! - a corrected two-step conditional-logistic estimator with a sandwich
//!   variance estimate ([`estimator`], [`variance`]), including the
//!   missing-response variant and the rule-of-thumb cell augmentation;
//! - an exact oracle for the generative model, evaluating joint cell
//!   probabilities and the control-arm correction factor by Gauss-Hermite
//!   quadrature ([`truth`]);
//! - a population-limit engine computing pseudo-true parameters of the
//!   (mis)specified working likelihood ([`asymptotics`]);
//! - a deterministic Monte Carlo study harness ([`simulation`]);
//! - a CLI front end over all of the above ([`cli`]).
//!
//! See the book under `book/` for a guided tour; its code snippets are run
//! as doc-tests.

pub mod asymptotics;
pub mod cli;
pub mod config;
pub mod estimator;
pub mod logistic;
pub mod model;
pub mod numeric;
pub mod quadrature;
pub mod simulation;
pub mod truth;
pub mod variance;

// Keep the book's code snippets compiling against the current API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/variance.md")]
    mod variance {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/asymptotics.md")]
    mod asymptotics {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
