//! The relative-risk submodel
//! `h(t) = h0(t) exp{gamma'w + alpha' f(t, b, M(t))}` under the five
//! association structures, and the survival function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::Association;
use crate::longitudinal::{self, MixedParams, RandomEffects};
use crate::model::{Model, ModelError, TimeGrid};
use crate::quadrature::{GK15, N_NODES};

/// Linear predictors above this overflow `exp`.
const ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvParams {
    pub gamma: DVector<f64>,
    /// Log-baseline spline coefficients, intercept first.
    pub gamma_h0: DVector<f64>,
    pub alpha: DVector<f64>,
    pub weibull_shape: Option<f64>,
}

fn check(model: &Model, surv: &SurvParams) -> Result<(), ModelError> {
    if surv.alpha.len() != model.n_alpha {
        return Err(ModelError::Spec(format!(
            "alpha has length {}, {:?} association needs {}",
            surv.alpha.len(),
            model.assoc(),
            model.n_alpha
        )));
    }
    if surv.gamma.len() != model.n_gamma || surv.gamma_h0.len() != model.n_h0 {
        return Err(ModelError::Spec("survival coefficient length mismatch".into()));
    }
    if model.is_weibull() && surv.weibull_shape.is_none_or(|s| !(s > 0.0)) {
        return Err(ModelError::Spec("Weibull baseline needs a positive shape".into()));
    }
    Ok(())
}

fn shape(surv: &SurvParams) -> f64 {
    surv.weibull_shape.unwrap_or(1.0)
}

pub fn log_baseline_hazard(t: f64, surv: &SurvParams, model: &Model) -> Result<f64, ModelError> {
    check(model, surv)?;
    if model.is_weibull() {
        let s = shape(surv);
        if t == 0.0 {
            if s < 1.0 {
                return Err(ModelError::Singular { shape: s });
            }
            if s > 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
        }
        if s == 1.0 {
            return Ok(s.ln());
        }
        Ok(s.ln() + (s - 1.0) * t.ln())
    } else {
        Ok(model.h0_row(t)?.dot(&surv.gamma_h0))
    }
}

/// `∫_0^t weight(t - s) m(s) ds` with a caller-supplied weight.
pub fn weighted_integral<F: Fn(f64) -> f64>(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    model: &Model,
    weight: F,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (a, c) in model.panels(0.0, t) {
        let (nodes, wts) = GK15.scaled(a, c);
        for k in 0..N_NODES {
            total += wts[k] * weight(t - nodes[k]) * longitudinal::m(nodes[k], w, b, mixed, model)?;
        }
    }
    Ok(total)
}

/// `alpha' f(t, b, M(t))`, evaluated from the trajectory functions.
pub fn assoc_term(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    surv: &SurvParams,
    model: &Model,
) -> Result<f64, ModelError> {
    check(model, surv)?;
    let a = &surv.alpha;
    Ok(match model.assoc() {
        Association::Value => a[0] * longitudinal::m(t, w, b, mixed, model)?,
        Association::ValueSlope => {
            a[0] * longitudinal::m(t, w, b, mixed, model)?
                + a[1] * longitudinal::m_deriv(t, w, b, mixed, model)?
        }
        Association::Cumulative => a[0] * longitudinal::m_integral(t, w, b, mixed, model)?,
        Association::WeightedCumulative => {
            let wf = model.weight_fn();
            a[0] * weighted_integral(t, w, b, mixed, model, |lag| wf.eval(lag))?
        }
        Association::RandomEffects => a.dot(b),
    })
}

fn linear_predictor(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    surv: &SurvParams,
    model: &Model,
) -> Result<f64, ModelError> {
    let lb = log_baseline_hazard(t, surv, model)?;
    let eta = model.w_surv(w).dot(&surv.gamma) + assoc_term(t, w, b, mixed, surv, model)?;
    Ok(lb + eta)
}

pub fn hazard(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    surv: &SurvParams,
    model: &Model,
) -> Result<f64, ModelError> {
    let eta = linear_predictor(t, w, b, mixed, surv, model)?;
    if eta > ETA_MAX || eta.is_nan() {
        return Err(ModelError::Overflow { eta, t });
    }
    Ok(eta.exp())
}

/// `∫_0^t h(s) ds` by 15-point Gauss-Kronrod on each knot interval (nested
/// through the trajectory integral for cumulative structures).
pub fn cumulative_hazard_quadrature(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    surv: &SurvParams,
    model: &Model,
) -> Result<f64, ModelError> {
    check(model, surv)?;
    let (nodes, wts) = model.cum_nodes(0.0, t);
    let mut total = 0.0;
    for (s, c) in nodes.into_iter().zip(wts) {
        total += c * hazard(s, w, b, mixed, surv, model)?;
    }
    Ok(total)
}

/// `∫_0^t h(s) ds`: closed form for random effects with a Weibull
/// baseline, quadrature otherwise.
pub fn cumulative_hazard(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    surv: &SurvParams,
    model: &Model,
) -> Result<f64, ModelError> {
    check(model, surv)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    if model.is_weibull() && model.assoc() == Association::RandomEffects {
        let eta = model.w_surv(w).dot(&surv.gamma) + surv.alpha.dot(b);
        if eta > ETA_MAX {
            return Err(ModelError::Overflow { eta, t });
        }
        return Ok(t.powf(shape(surv)) * eta.exp());
    }
    cumulative_hazard_quadrature(t, w, b, mixed, surv, model)
}

/// `S(t) = exp{-∫_0^t h(s) ds}`.
pub fn survival_fn(
    t: f64,
    w: &[f64],
    b: &RandomEffects,
    mixed: &MixedParams,
    surv: &SurvParams,
    model: &Model,
) -> Result<f64, ModelError> {
    Ok((-cumulative_hazard(t, w, b, mixed, surv, model)?).exp())
}

/// Log hazard over a grid as an affine function of the random effects:
/// `offset + gb * b`.
#[derive(Debug, Clone)]
pub struct GridPredictor {
    pub offset: DVector<f64>,
    pub gb: DMatrix<f64>,
}

impl GridPredictor {
    pub fn new(
        model: &Model,
        grid: &TimeGrid,
        w_surv: &DVector<f64>,
        mixed: &MixedParams,
        surv: &SurvParams,
    ) -> Self {
        let n = grid.times.len();
        let base = w_surv.dot(&surv.gamma);
        let mut offset = if model.is_weibull() {
            let s = shape(surv);
            let ls = s.ln();
            DVector::from_iterator(
                n,
                grid.log_t.iter().map(|lt| {
                    if s == 1.0 {
                        ls + base
                    } else {
                        ls + (s - 1.0) * lt + base
                    }
                }),
            )
        } else {
            let mut o = &grid.h0 * &surv.gamma_h0;
            o.add_scalar_mut(base);
            o
        };
        let mut gb = DMatrix::zeros(n, model.q);
        if model.assoc() == Association::RandomEffects {
            for k in 0..n {
                gb.set_row(k, &surv.alpha.transpose());
            }
        } else {
            for (c, (xa, za)) in grid.xa.iter().zip(&grid.za).enumerate() {
                let a = surv.alpha[c];
                offset.gemv(a, xa, &mixed.beta, 1.0);
                gb += za * a;
            }
        }
        GridPredictor { offset, gb }
    }

    pub fn log_hazard(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut lh = self.offset.clone();
        lh.gemv(1.0, &self.gb, b, 1.0);
        lh
    }
}

/// `Σ_k weight_k exp(lh_k)`, failing on overflow.
pub fn weighted_exp_sum(lh: &DVector<f64>, grid: &TimeGrid) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for k in 0..lh.len() {
        if grid.weights[k] == 0.0 {
            continue;
        }
        let eta = lh[k];
        if eta > ETA_MAX || eta.is_nan() {
            return Err(ModelError::Overflow {
                eta,
                t: grid.times[k],
            });
        }
        total += grid.weights[k] * eta.exp();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{
        Baseline, FixedDesign, JointModelSpec, PriorSpec, RandomDesign, SurvivalDesign, TimeBasis,
    };

    fn model(assoc: Association, time: TimeBasis) -> Model {
        let spec = JointModelSpec {
            fixed_design: FixedDesign {
                time,
                by: vec![],
                covariates: vec![],
            },
            random_design: RandomDesign {
                intercept: true,
                time: false,
            },
            survival_design: SurvivalDesign {
                intercept: true,
                covariates: vec!["x".into()],
            },
            assoc,
            baseline: Baseline::Weibull,
            priors: PriorSpec::default(),
            weight_fn: None,
            fixed_params: Default::default(),
        }
        .with_assoc(assoc);
        Model::new(&spec, &["x".into()]).unwrap()
    }

    fn params(p: usize, alpha: Vec<f64>, shape: f64) -> (MixedParams, SurvParams) {
        (
            MixedParams {
                beta: DVector::from_element(p, 0.0),
                d: DMatrix::identity(1, 1),
                sigma2: 1.0,
            },
            SurvParams {
                gamma: DVector::zeros(2),
                gamma_h0: DVector::zeros(0),
                alpha: DVector::from_vec(alpha),
                weibull_shape: Some(shape),
            },
        )
    }

    #[test]
    fn weibull_baseline_values() {
        let m = model(Association::Value, TimeBasis::Constant);
        let (_, mut s) = params(1, vec![0.0], 1.0);
        for t in [0.0, 0.5, 4.0] {
            assert_eq!(log_baseline_hazard(t, &s, &m).unwrap(), 0.0);
        }
        s.weibull_shape = Some(2.0);
        assert!((log_baseline_hazard(3.0, &s, &m).unwrap() - 6f64.ln()).abs() < 1e-14);
        s.weibull_shape = Some(0.5);
        assert!(matches!(
            log_baseline_hazard(0.0, &s, &m),
            Err(ModelError::Singular { .. })
        ));
    }

    #[test]
    fn value_structure_hazard() {
        let m = model(Association::Value, TimeBasis::Constant);
        let (mut mixed, surv) = params(1, vec![0.5], 1.0);
        mixed.beta[0] = 2.0;
        let b = DVector::zeros(1);
        assert!((assoc_term(1.0, &[0.0], &b, &mixed, &surv, &m).unwrap() - 1.0).abs() < 1e-15);
        let h = hazard(1.0, &[0.0], &b, &mixed, &surv, &m).unwrap();
        assert!((h - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn random_effects_composition() {
        let m = model(Association::RandomEffects, TimeBasis::Constant);
        let (mixed, mut surv) = params(1, vec![0.2], 2.0);
        surv.gamma[0] = 0.3;
        let b = DVector::from_vec(vec![1.0]);
        for t in [0.5, 2.0] {
            let h = hazard(t, &[0.0], &b, &mixed, &surv, &m).unwrap();
            assert!((h - 2.0 * t * 0.5f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_survival() {
        let m = model(Association::Value, TimeBasis::Constant);
        let (mixed, mut surv) = params(1, vec![0.0], 1.0);
        surv.gamma[0] = -0.7;
        let b = DVector::zeros(1);
        assert_eq!(survival_fn(0.0, &[0.0], &b, &mixed, &surv, &m).unwrap(), 1.0);
        for t in [0.3, 1.0, 5.0] {
            let s = survival_fn(t, &[0.0], &b, &mixed, &surv, &m).unwrap();
            assert!((s - (-t * (-0.7f64).exp()).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let m = model(Association::Value, TimeBasis::Constant);
        let (mut mixed, surv) = params(1, vec![1.0], 1.0);
        mixed.beta[0] = 800.0;
        let err = hazard(1.0, &[0.0], &DVector::zeros(1), &mixed, &surv, &m).unwrap_err();
        assert!(matches!(err, ModelError::Overflow { eta, .. } if eta > 700.0));
    }

    #[test]
    fn alpha_length_checked() {
        let m = model(Association::ValueSlope, TimeBasis::Linear);
        let (mixed, surv) = params(2, vec![0.1], 1.0);
        assert!(assoc_term(1.0, &[0.0], &DVector::zeros(1), &mixed, &surv, &m).is_err());
    }
}
