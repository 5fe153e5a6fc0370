//! Bayesian joint models for a longitudinal biomarker and a time-to-event
//! outcome, dynamic individualized predictions, and subject- and
//! time-dependent Bayesian model averaging over association structures.

pub mod basis;
pub mod bma;
pub mod datamodel;
pub mod likelihood;
pub mod longitudinal;
pub mod mcmc;
pub mod model;
pub mod optim;
pub mod prediction;
pub mod quadrature;
pub mod simulation;
pub mod survival;
