//! The linear mixed-effects submodel: `y(t) = x(t)'beta + z(t)'b + e(t)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::quadrature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedParams {
    pub beta: DVector<f64>,
    /// Random-effects covariance.
    pub d: DMatrix<f64>,
    pub sigma2: f64,
}

pub type RandomEffects = DVector<f64>;

fn check_beta(model: &Model, beta: &DVector<f64>) -> Result<(), ModelError> {
    if beta.len() != model.p {
        return Err(ModelError::Spec(format!(
            "beta has length {}, design has {} columns",
            beta.len(),
            model.p
        )));
    }
    Ok(())
}

fn check_b(model: &Model, b: &RandomEffects) -> Result<(), ModelError> {
    if b.len() != model.q {
        return Err(ModelError::Spec(format!(
            "random effects have length {}, design has {} columns",
            b.len(),
            model.q
        )));
    }
    Ok(())
}

/// Fixed-effects design vector `x(t)`.
pub fn design_x(t: f64, w: &[f64], model: &Model) -> Result<DVector<f64>, ModelError> {
    model.x_row(t, w, 0)
}

/// Random-effects design vector `z(t)`.
pub fn design_z(t: f64, model: &Model) -> Result<DVector<f64>, ModelError> {
    model.z_row(t, 0)
}

/// Subject-specific mean trajectory `m(t)`.
pub fn m(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    params: &MixedParams,
    model: &Model,
) -> Result<f64, ModelError> {
    check_beta(model, &params.beta)?;
    check_b(model, b)?;
    Ok(model.x_row(t, w, 0)?.dot(&params.beta) + model.z_row(t, 0)?.dot(b))
}

/// `dm/dt`, from the analytic basis derivatives.
pub fn m_deriv(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    params: &MixedParams,
    model: &Model,
) -> Result<f64, ModelError> {
    check_beta(model, &params.beta)?;
    check_b(model, b)?;
    Ok(model.x_row(t, w, 1)?.dot(&params.beta) + model.z_row(t, 1)?.dot(b))
}

/// `∫_0^t m(s) ds` by 15-point Gauss-Kronrod on each knot interval.
pub fn m_integral(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    params: &MixedParams,
    model: &Model,
) -> Result<f64, ModelError> {
    check_beta(model, &params.beta)?;
    check_b(model, b)?;
    if t < 0.0 {
        return Err(ModelError::Spec(format!("integral upper limit {t} is negative")));
    }
    let mut total = 0.0;
    for (a, c) in model.panels(0.0, t) {
        let (nodes, wts) = quadrature::GK15.scaled(a, c);
        for k in 0..quadrature::N_NODES {
            total += wts[k] * m(nodes[k], w, b, params, model)?;
        }
    }
    Ok(total)
}
