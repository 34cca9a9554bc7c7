//! Semiparametric functional mixed models for surface-sampled functional data.
//!
//! The pipeline: transform surface functions into a near-lossless tensor
//! wavelet (or principal-component) basis, select fixed/random model
//! structures per basis coefficient with an information-criterion voting
//! heuristic, fit each coefficient's linear mixed model by MCMC with
//! spike-slab shrinkage on fixed effects, and project posterior draws back to
//! the data space for functional inference (surfaces, credible bands, AUC,
//! derivatives, degrees-of-freedom maps, regional aggregates).

pub mod basis;
pub mod design;
pub mod diagnostics;
pub mod grid;
pub mod inference;
pub mod io;
pub mod lmm;
pub mod mcmc;
pub mod optim;
pub mod select;
pub mod spline;
pub mod wavelet;
