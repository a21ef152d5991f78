//! Bayesian overlapping stochastic block model (OSBM).
//!
//! The crate covers the whole pipeline for directed graphs without self loops:
//! sampling networks from the generative model ([`model`]), variational Bayes
//! EM inference with local logistic bounds ([`vbem`]), selection of the number
//! of classes with the IL_osbm criterion ([`selection`]), the evaluation
//! measurements used in simulation studies ([`metrics`]), and the text formats
//! consumed by the `osbm` command line tool ([`io`]).

pub mod error;
pub mod io;
pub mod mathkit;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod vbem;

pub use error::{OsbmError, Result};
pub use model::{AdjacencyMatrix, Hyperpriors, MembershipMatrix, OsbmParameters};
pub use selection::{select_q, SelectionReport};
pub use vbem::{fit, FitOptions, FitResult, VariationalState};
