//! Subject- and time-dependent Bayesian model averaging.
//!
//! Model weights combine the dataset evidence `p(D_n | M_k)` with the
//! target's evidence `p(D_j(t) | D_n, M_k)`, both by two-step Laplace
//! approximations: random effects first, then parameters. Parameter-level
//! integrals run in coordinates whitened by the posterior draw covariance.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Dataset, JointModelSpec};
use crate::mcmc::{self, ChainConfig, McmcError};
use crate::likelihood::{ConditionalB, ParamLayout, ThetaFull};
use crate::model::{Model, ModelError, SubjectCache};
use crate::optim::{bfgs_maximize, fd_hessian, newton_maximize};
use crate::prediction::{self, DynamicPrediction, PredictConfig, PredictError, TargetSubject};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum BmaError {
    #[error("evidence error in {step}: {message}")]
    Evidence { step: &'static str, message: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvidence {
    pub model_id: usize,
    pub log_marg_data: f64,
    pub log_marg_subject: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaWeights {
    pub subject_id: String,
    pub origin_time: f64,
    pub weights: Vec<f64>,
}

/// A fitted candidate model with what BMA needs from its fit.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: Model,
    pub draws: Vec<ThetaFull>,
    pub draw_logpost: Vec<f64>,
    pub fingerprint: String,
    pub training_ids: Vec<String>,
    pub log_marg_data: Option<f64>,
}

impl FittedModel {
    /// Fits `spec` to `ds`, with the dataset evidence when `evidence` holds.
    pub fn fit(ds: &Dataset, spec: &JointModelSpec, chain: &ChainConfig, evidence: bool) -> Result<Self, BmaError> {
        let model = Model::new(spec, &ds.covariate_names)?;
        let caches = subject_caches(&model, ds)?;
        let draws = mcmc::fit_model(&model, &caches, chain)?;
        let log_marg_data = if evidence {
            Some(log_marginal_dataset(&model, &caches, &draws.theta_draws, &draws.draw_logpost)?)
        } else {
            None
        };
        Ok(FittedModel {
            model,
            draws: draws.theta_draws,
            draw_logpost: draws.draw_logpost,
            fingerprint: ds.fingerprint(),
            training_ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
            log_marg_data,
        })
    }
}

/// Posterior draws in unconstrained coordinates with their mean and the
/// Cholesky factor of their covariance (ridged when singular).
struct Whitening {
    mean: DVector<f64>,
    l: DMatrix<f64>,
    phis: Vec<DVector<f64>>,
}

impl Whitening {
    fn new(layout: &ParamLayout, draws: &[ThetaFull]) -> Result<Self, BmaError> {
        if draws.is_empty() {
            return Err(BmaError::Input("no posterior draws".into()));
        }
        let phis: Vec<DVector<f64>> = draws.iter().map(|t| layout.pack(t)).collect();
        let d = layout.dim();
        let n = phis.len() as f64;
        let mean = phis.iter().fold(DVector::zeros(d), |a, p| a + p) / n;
        let mut cov = DMatrix::zeros(d, d);
        for p in &phis {
            let c = p - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1.0).max(1.0);
        let ridge = 1e-10 * (cov.trace() / d as f64).max(1e-6);
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        let l = Cholesky::new(cov)
            .ok_or_else(|| BmaError::Evidence {
                step: "posterior moment matching",
                message: "draw covariance is not positive definite".into(),
            })?
            .l();
        Ok(Whitening { mean, l, phis })
    }

    fn phi(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.l * z
    }

    fn z(&self, phi: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(&(phi - &self.mean)).expect("positive diagonal")
    }

    fn log_det(&self) -> f64 {
        self.l.diagonal().iter().map(|v| v.ln()).sum()
    }
}

/// Laplace total at a mode with Hessian `h`; `None` unless `h` is finite and
/// negative definite.
fn laplace_total(h: &DMatrix<f64>, value: f64) -> Option<f64> {
    if !value.is_finite() || h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let d = h.nrows();
    let neg = -(h + h.transpose()) * 0.5;
    let chol = Cholesky::new(neg)?;
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    Some(value + 0.5 * d as f64 * LN_2PI - logdet)
}

/// Sum over subjects of the random-effects Laplace marginals at `theta`.
fn data_laplace(
    model: &Model,
    caches: &[SubjectCache],
    theta: &ThetaFull,
    starts: &[DVector<f64>],
) -> Result<f64, ModelError> {
    let parts: Vec<f64> = caches
        .par_iter()
        .zip(starts.par_iter())
        .map(|(c, s)| ConditionalB::new(model, c, theta, 1.0)?.laplace(s).map(|l| l.log_marginal))
        .collect::<Result<_, _>>()?;
    Ok(parts.iter().sum())
}

/// `log p(D_n | M)`: random effects integrated by Laplace per subject, then
/// parameters by Laplace at the posterior mode, which is located by ascent
/// from the retained draw with the highest log posterior. Falls back to the
/// Laplace-Metropolis form when the Hessian there is unusable.
pub fn log_marginal_dataset(
    model: &Model,
    caches: &[SubjectCache],
    draws: &[ThetaFull],
    draw_logpost: &[f64],
) -> Result<f64, BmaError> {
    let layout = ParamLayout::new(model);
    let white = Whitening::new(&layout, draws)?;
    let best = if draw_logpost.len() == draws.len() {
        (0..draws.len())
            .max_by(|&a, &b| draw_logpost[a].total_cmp(&draw_logpost[b]))
            .unwrap_or(0)
    } else {
        0
    };
    let q = model.q;
    let start_theta = &draws[best];
    let starts: Vec<DVector<f64>> = caches
        .par_iter()
        .map(|c| {
            ConditionalB::new(model, c, start_theta, 1.0)
                .and_then(|cb| cb.mode(&DVector::zeros(q)))
                .map(|m| m.0)
                .unwrap_or_else(|_| DVector::zeros(q))
        })
        .collect();
    let priors = &model.spec.priors;
    let objective = |z: &DVector<f64>| -> Result<f64, ModelError> {
        let phi = white.phi(z);
        let lp = layout.logprior(&phi, priors, model);
        if !lp.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(data_laplace(model, caches, &layout.unpack(&phi), &starts)? + lp)
    };
    let z0 = white.z(&white.phis[best]);
    objective(&z0).map_err(|e| BmaError::Evidence {
        step: "random-effects Laplace",
        message: e.to_string(),
    })?;
    let mut f = |z: &DVector<f64>| objective(z).unwrap_or(f64::NEG_INFINITY);
    let max = bfgs_maximize(&mut f, &z0, 200, 1e-5);
    let h = fd_hessian(&mut f, &max.x, 1e-3);
    let total = match laplace_total(&h, max.value) {
        Some(v) => v,
        // Laplace-Metropolis: the best draw as the mode and the draw
        // covariance as the curvature.
        None => f(&z0) + 0.5 * layout.dim() as f64 * LN_2PI,
    };
    Ok(total + white.log_det())
}

pub fn subject_caches(model: &Model, ds: &Dataset) -> Result<Vec<SubjectCache>, ModelError> {
    ds.subjects.par_iter().map(|s| model.subject_cache(s)).collect()
}

/// `log p(D_j(t) | D_n, M)`: random effects by Laplace at their conditional
/// mode, then parameters by Laplace against a normal approximation of the
/// posterior matched to the draws.
pub fn log_marginal_subject(
    target: &TargetSubject,
    model: &Model,
    draws: &[ThetaFull],
) -> Result<f64, BmaError> {
    let layout = ParamLayout::new(model);
    let white = Whitening::new(&layout, draws)?;
    let cache = model.subject_cache_until(&target.to_subject(), target.t, false)?;
    let d = layout.dim() as f64;
    let q = model.q;
    let start = {
        let th = layout.unpack(&white.mean);
        ConditionalB::new(model, &cache, &th, 1.0)
            .and_then(|c| c.mode(&DVector::zeros(q)))
            .map(|m| m.0)
            .unwrap_or_else(|_| DVector::zeros(q))
    };
    let objective = |z: &DVector<f64>| -> Result<f64, ModelError> {
        let th = layout.unpack(&white.phi(z));
        let lap = ConditionalB::new(model, &cache, &th, 1.0)?.laplace(&start)?;
        Ok(lap.log_marginal - 0.5 * z.norm_squared() - 0.5 * d * LN_2PI)
    };
    let z0 = DVector::zeros(layout.dim());
    objective(&z0).map_err(|e| BmaError::Evidence {
        step: "target random-effects Laplace",
        message: e.to_string(),
    })?;
    let mut f = |z: &DVector<f64>| objective(z).unwrap_or(f64::NEG_INFINITY);
    let max = newton_maximize(&mut f, &z0, 20, 1e-10);
    let h = fd_hessian(&mut f, &max.x, 1e-3);
    Ok(laplace_total(&h, max.value).unwrap_or(max.value + 0.5 * d * LN_2PI))
}

/// Posterior model probabilities from evidences and prior probabilities.
pub fn weights(evidence: &[ModelEvidence], prior_probs: Option<&[f64]>) -> Result<Vec<f64>, BmaError> {
    let k = evidence.len();
    if k == 0 {
        return Err(BmaError::Input("no models".into()));
    }
    let uniform = vec![1.0 / k as f64; k];
    let prior = prior_probs.unwrap_or(&uniform);
    if prior.len() != k || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 || prior.iter().any(|&p| p < 0.0) {
        return Err(BmaError::Input("prior model probabilities must sum to one".into()));
    }
    let scores: Vec<f64> = evidence
        .iter()
        .zip(prior)
        .map(|(e, p)| e.log_marg_subject + e.log_marg_data + p.ln())
        .collect();
    Ok(softmax(&scores))
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Smallest value whose cumulative weight reaches `p` of the total.
fn weighted_quantile(pairs: &mut [(f64, f64)], p: f64) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|x| x.1).sum();
    let mut cum = 0.0;
    for &(v, w) in pairs.iter() {
        cum += w;
        if cum >= p * total {
            return v;
        }
    }
    pairs.last().map_or(f64::NAN, |x| x.0)
}

/// Weighted average of per-model predictions on a common horizon grid;
/// bands from the pooled per-draw values, each model's draws carrying its
/// weight.
pub fn combine(preds: &[&DynamicPrediction], w: &[f64]) -> DynamicPrediction {
    if let Some(k) = w.iter().position(|&x| x == 1.0) {
        return preds[k].clone();
    }
    let first = preds[0];
    let h = first.horizons.len();
    let mut point = vec![0.0; h];
    let mut lower = vec![0.0; h];
    let mut upper = vec![0.0; h];
    for j in 0..h {
        let mut pairs = Vec::new();
        for (p, &wk) in preds.iter().zip(w) {
            if wk == 0.0 {
                continue;
            }
            point[j] += wk * p.point[j];
            let n = p.samples.nrows().max(1) as f64;
            pairs.extend(p.samples.column(j).iter().map(|&v| (v, wk / n)));
        }
        if pairs.is_empty() {
            lower[j] = point[j];
            upper[j] = point[j];
        } else {
            lower[j] = weighted_quantile(&mut pairs, 0.025).min(point[j]);
            upper[j] = weighted_quantile(&mut pairs, 0.975).max(point[j]);
        }
    }
    DynamicPrediction {
        origin: first.origin,
        horizons: first.horizons.clone(),
        point,
        lower,
        upper,
        kind: first.kind,
        n_mc: preds.iter().map(|p| p.n_mc).sum(),
        samples: DMatrix::zeros(0, h),
    }
}

/// Fails unless all models were fitted to one dataset that excludes the
/// target.
pub fn check_consistency(models: &[FittedModel], target_id: &str) -> Result<(), BmaError> {
    let Some(first) = models.first() else {
        return Err(BmaError::Input("no models".into()));
    };
    for m in models {
        if m.fingerprint != first.fingerprint {
            return Err(BmaError::Consistency(format!(
                "models were fitted to different datasets ({} vs {})",
                first.fingerprint, m.fingerprint
            )));
        }
    }
    if first.training_ids.iter().any(|id| id == target_id) {
        return Err(BmaError::Consistency(format!(
            "target subject {target_id} belongs to the training data"
        )));
    }
    Ok(())
}

/// Evidence of every model for one target at its origin.
pub fn evidences(models: &[FittedModel], target: &TargetSubject) -> Result<Vec<ModelEvidence>, BmaError> {
    check_consistency(models, &target.id)?;
    models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let data = m.log_marg_data.ok_or_else(|| {
                BmaError::Input(format!("model {} has no dataset evidence", k + 1))
            })?;
            Ok(ModelEvidence {
                model_id: k,
                log_marg_data: data,
                log_marg_subject: log_marginal_subject(target, &m.model, &m.draws)?,
            })
        })
        .collect()
}

pub fn bma_weights(
    models: &[FittedModel],
    target: &TargetSubject,
    prior_probs: Option<&[f64]>,
) -> Result<BmaWeights, BmaError> {
    let ev = evidences(models, target)?;
    Ok(BmaWeights {
        subject_id: target.id.clone(),
        origin_time: target.t,
        weights: weights(&ev, prior_probs)?,
    })
}

pub fn bma_predict_survival(
    target: &TargetSubject,
    models: &[FittedModel],
    horizons: &[f64],
    cfg: &PredictConfig,
    prior_probs: Option<&[f64]>,
) -> Result<(BmaWeights, DynamicPrediction), BmaError> {
    let w = bma_weights(models, target, prior_probs)?;
    let preds: Vec<DynamicPrediction> = models
        .iter()
        .zip(&w.weights)
        .map(|(m, &wk)| {
            if wk == 0.0 {
                let h = horizons.len();
                Ok(DynamicPrediction::from_samples(
                    target.t,
                    horizons,
                    prediction::PredictionKind::Survival,
                    DMatrix::from_element(1, h, f64::NAN),
                ))
            } else {
                prediction::predict_survival(target, &m.draws, &m.model, horizons, cfg)
            }
        })
        .collect::<Result<_, PredictError>>()?;
    let refs: Vec<&DynamicPrediction> = preds.iter().collect();
    let combined = combine(&refs, &w.weights);
    Ok((w, combined))
}

/// Two-decimal weight with the relative floor: weights below `1e-6` print
/// as `0.00`.
pub fn format_weight(w: f64) -> String {
    if w < 1e-6 {
        "0.00".to_string()
    } else {
        format!("{w:.2}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub subject: String,
    pub origin_time: f64,
    pub last_value: f64,
    pub weights: Vec<f64>,
}

/// Weight report with columns `subject,origin_time,last_value,w1..wK`.
pub fn weight_report_csv(rows: &[WeightRow]) -> String {
    let k = rows.first().map_or(0, |r| r.weights.len());
    let mut out = String::from("subject,origin_time,last_value");
    for j in 1..=k {
        out.push_str(&format!(",w{j}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.1},{:.1}", r.subject, r.origin_time, r.last_value));
        for w in &r.weights {
            out.push(',');
            out.push_str(&format_weight(*w));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplace_total_needs_a_usable_hessian() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -0.5]));
        assert!((laplace_total(&h, -3.0).unwrap() - (-3.0 + LN_2PI)).abs() < 1e-12);
        assert!(laplace_total(&DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, 0.5])), -3.0).is_none());
        assert!(laplace_total(&DMatrix::from_element(2, 2, f64::NAN), -3.0).is_none());
        assert!(laplace_total(&h, f64::NEG_INFINITY).is_none());
    }

    fn ev(s: f64, d: f64) -> ModelEvidence {
        ModelEvidence {
            model_id: 0,
            log_marg_data: d,
            log_marg_subject: s,
        }
    }

    #[test]
    fn weight_algebra() {
        assert_eq!(weights(&[ev(-3.0, -100.0)], None).unwrap(), vec![1.0]);
        let w = weights(&[ev(-1.0, -2.0), ev(-2.0, -1.0)], None).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = weights(&[ev(0.0, 0.0), ev(3f64.ln(), 0.0)], None).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        let shifted = weights(&[ev(1e4, 0.0), ev(1e4 + 3f64.ln(), 0.0)], None).unwrap();
        assert!((shifted[1] - 0.75).abs() < 1e-12);
        assert!(weights(&[ev(0.0, 0.0)], Some(&[0.5])).is_err());
    }

    #[test]
    fn weight_formatting() {
        assert_eq!(format_weight(0.43), "0.43");
        assert_eq!(format_weight(5e-7), "0.00");
        assert_eq!(format_weight(0.004), "0.00");
        assert_eq!(format_weight(1.0), "1.00");
        let csv = weight_report_csv(&[WeightRow {
            subject: "20".into(),
            origin_time: 2.9,
            last_value: 4.0,
            weights: vec![1e-9, 0.43, 0.57, 0.0, 0.0],
        }]);
        assert_eq!(
            csv,
            "subject,origin_time,last_value,w1,w2,w3,w4,w5\n20,2.9,4.0,0.00,0.43,0.57,0.00,0.00\n"
        );
    }

    #[test]
    fn weighted_quantiles() {
        let mut p = vec![(3.0, 1.0), (1.0, 1.0), (2.0, 2.0)];
        assert_eq!(weighted_quantile(&mut p, 0.25), 1.0);
        assert_eq!(weighted_quantile(&mut p, 0.5), 2.0);
        assert_eq!(weighted_quantile(&mut p, 0.9), 3.0);
    }
}
