//! Conditional likelihood of one subject given its random effects, the
//! random-effects density, the prior, and the unconstrained parameter
//! layout shared by the sampler and the Laplace approximations.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::datamodel::{PriorSpec, Subject};
use crate::longitudinal::{self, MixedParams, RandomEffects};
use crate::model::{Model, ModelError, SubjectCache};
use crate::survival::{self, weighted_exp_sum, GridPredictor, SurvParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFull {
    pub mixed: MixedParams,
    pub surv: SurvParams,
}

fn finite(v: f64, term: &'static str, subject: &str) -> Result<f64, ModelError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFinite {
            term,
            subject: subject.to_string(),
        })
    }
}

/// Gaussian longitudinal term of one subject, computed from the trajectory.
pub fn loglik_longitudinal(
    subj: &Subject,
    b: &RandomEffects,
    theta: &ThetaFull,
    model: &Model,
) -> Result<f64, ModelError> {
    let s2 = theta.mixed.sigma2;
    let mut ssr = 0.0;
    for (&t, &y) in subj.times.iter().zip(&subj.y) {
        let r = y - longitudinal::m(t, &subj.w, b, &theta.mixed, model)?;
        ssr += r * r;
    }
    let n = subj.times.len() as f64;
    finite(-0.5 * n * (LN_2PI + s2.ln()) - 0.5 * ssr / s2, "longitudinal", &subj.id)
}

/// Event and cumulative-hazard terms of one subject.
pub fn loglik_survival(
    subj: &Subject,
    b: &RandomEffects,
    theta: &ThetaFull,
    model: &Model,
) -> Result<f64, ModelError> {
    let (mixed, surv) = (&theta.mixed, &theta.surv);
    let mut ev = 0.0;
    if subj.event {
        let h = survival::hazard(subj.event_time, &subj.w, b, mixed, surv, model)?;
        ev = finite(h.ln(), "event", &subj.id)?;
    }
    let cum = survival::cumulative_hazard(subj.event_time, &subj.w, b, mixed, surv, model)?;
    let cum = finite(cum, "cumulative hazard", &subj.id)?;
    Ok(ev - cum)
}

/// Log of the conditional likelihood `p(T, delta, y | b, theta)`.
pub fn loglik_subject(
    subj: &Subject,
    b: &RandomEffects,
    theta: &ThetaFull,
    model: &Model,
) -> Result<f64, ModelError> {
    Ok(loglik_longitudinal(subj, b, theta, model)? + loglik_survival(subj, b, theta, model)?)
}

/// Sum of `loglik_subject` over a dataset, reduced in subject-id order so
/// the total does not depend on how the subjects are listed.
pub fn loglik_dataset(
    subjects: &[Subject],
    b: &[RandomEffects],
    theta: &ThetaFull,
    model: &Model,
) -> Result<f64, ModelError> {
    if subjects.len() != b.len() {
        return Err(ModelError::Spec(format!(
            "{} subjects but {} random-effect vectors",
            subjects.len(),
            b.len()
        )));
    }
    let mut terms = subjects
        .iter()
        .zip(b)
        .map(|(s, bi)| Ok((s.id.as_str(), loglik_subject(s, bi, theta, model)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    terms.sort_by(|a, c| a.0.cmp(c.0).then(a.1.total_cmp(&c.1)));
    Ok(terms.iter().map(|t| t.1).sum())
}

/// Multivariate normal log density `N(b; 0, D)`.
pub fn logdens_re(b: &RandomEffects, d: &DMatrix<f64>) -> Result<f64, ModelError> {
    let chol = Cholesky::new(d.clone()).ok_or_else(|| {
        ModelError::Spec("random-effects covariance is not positive definite".into())
    })?;
    Ok(logdens_chol(b, &chol))
}

pub(crate) fn logdens_chol(b: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let q = b.len();
    let logdet: f64 = (0..q).map(|i| l[(i, i)].ln()).sum();
    let u = l
        .view((0, 0), (q, q))
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal");
    -0.5 * q as f64 * LN_2PI - logdet - 0.5 * u.norm_squared()
}

fn normal_sum(x: &DVector<f64>, sd: f64) -> f64 {
    let c = -0.5 * (LN_2PI + 2.0 * sd.ln());
    x.iter().map(|v| c - 0.5 * (v / sd).powi(2)).sum()
}

fn ln_mvgamma(q: usize, a: f64) -> f64 {
    let q = q as f64;
    0.25 * q * (q - 1.0) * PI.ln() + (0..q as usize).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

pub fn inverse_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

pub fn inverse_wishart_logpdf(d: &DMatrix<f64>, df: f64, scale: &DMatrix<f64>) -> f64 {
    let q = d.nrows();
    let Some(chol) = Cholesky::new(d.clone()) else {
        return f64::NEG_INFINITY;
    };
    let Some(cs) = Cholesky::new(scale.clone()) else {
        return f64::NEG_INFINITY;
    };
    let logdet_d: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(q).map(|v| v.ln()).sum::<f64>();
    let logdet_s: f64 = 2.0 * cs.l_dirty().diagonal().iter().take(q).map(|v| v.ln()).sum::<f64>();
    let tr = (scale * chol.inverse()).trace();
    0.5 * df * logdet_s
        - 0.5 * df * q as f64 * 2f64.ln()
        - ln_mvgamma(q, 0.5 * df)
        - 0.5 * (df + q as f64 + 1.0) * logdet_d
        - 0.5 * tr
}

pub fn wishart_params(priors: &PriorSpec, q: usize) -> (f64, DMatrix<f64>) {
    let df = priors.wishart_df.unwrap_or(q as f64 + 2.0);
    let scale = match &priors.wishart_scale {
        Some(rows) => DMatrix::from_fn(q, q, |i, j| rows[i][j]),
        None => DMatrix::identity(q, q),
    };
    (df, scale)
}

/// Log prior density on the natural scale. Fixed parameter groups do not
/// contribute. The Weibull shape has a log-normal prior.
pub fn logprior(theta: &ThetaFull, priors: &PriorSpec, model: &Model) -> f64 {
    let (m, s) = (&theta.mixed, &theta.surv);
    let mut lp = normal_sum(&m.beta, priors.beta_sd)
        + normal_sum(&s.gamma, priors.gamma_sd)
        + normal_sum(&s.gamma_h0, priors.gamma_h0_sd);
    if model.spec.fixed_params.alpha.is_none() {
        lp += normal_sum(&s.alpha, priors.alpha_sd);
    }
    if model.is_weibull() && model.spec.fixed_params.weibull_shape.is_none() {
        match s.weibull_shape {
            Some(k) if k > 0.0 => {
                let l = k.ln();
                let sd = priors.log_shape_sd;
                lp += -0.5 * (LN_2PI + 2.0 * sd.ln()) - 0.5 * (l / sd).powi(2) - l;
            }
            _ => return f64::NEG_INFINITY,
        }
    }
    lp += inverse_gamma_logpdf(m.sigma2, priors.sigma2_shape, priors.sigma2_rate);
    let (df, scale) = wishart_params(priors, model.q);
    lp + inverse_wishart_logpdf(&m.d, df, &scale)
}

/// Weighted Gaussian log likelihood of `n` measurements from their residual
/// sum of squares.
pub fn long_from_ssr(n: usize, ssr: f64, sigma2: f64, weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    weight * (-0.5 * n as f64 * (LN_2PI + sigma2.ln()) - 0.5 * ssr / sigma2)
}

/// Residual sum of squares and survival log likelihood of a cached subject.
pub fn cached_terms(
    model: &Model,
    cache: &SubjectCache,
    theta: &ThetaFull,
    b: &DVector<f64>,
) -> Result<(f64, f64), ModelError> {
    let mut r = &cache.y - &cache.x * &theta.mixed.beta;
    r.gemv(-1.0, &cache.z, b, 1.0);
    Ok((r.norm_squared(), cached_surv(model, cache, theta, b)?))
}

/// Survival log likelihood (event term minus cumulative hazard) of a cached
/// subject.
pub fn cached_surv(
    model: &Model,
    cache: &SubjectCache,
    theta: &ThetaFull,
    b: &DVector<f64>,
) -> Result<f64, ModelError> {
    let mut v = 0.0;
    if cache.event {
        let end = GridPredictor::new(model, &cache.at_end, &cache.w_surv, &theta.mixed, &theta.surv);
        v += end.log_hazard(b)[0];
    }
    let cum = GridPredictor::new(model, &cache.cum, &cache.w_surv, &theta.mixed, &theta.surv);
    v -= weighted_exp_sum(&cum.log_hazard(b), &cache.cum)?;
    finite(v, "survival", &cache.id)
}

/// `p(y, T, delta | b, theta) p(b | D)` as a function of `b` for fixed
/// `theta`, built from a subject cache. Provides the value, gradient and
/// Hessian in `b`.
#[derive(Debug, Clone)]
pub struct ConditionalB<'a> {
    cache: &'a SubjectCache,
    resid0: DVector<f64>,
    sigma2: f64,
    long_weight: f64,
    end: GridPredictor,
    cum: GridPredictor,
    chol: Cholesky<f64, Dyn>,
    d_inv: DMatrix<f64>,
}

impl<'a> ConditionalB<'a> {
    pub fn new(
        model: &Model,
        cache: &'a SubjectCache,
        theta: &ThetaFull,
        long_weight: f64,
    ) -> Result<Self, ModelError> {
        let chol = Cholesky::new(theta.mixed.d.clone()).ok_or_else(|| {
            ModelError::Spec("random-effects covariance is not positive definite".into())
        })?;
        let d_inv = chol.inverse();
        Ok(ConditionalB {
            cache,
            resid0: &cache.y - &cache.x * &theta.mixed.beta,
            sigma2: theta.mixed.sigma2,
            long_weight,
            end: GridPredictor::new(model, &cache.at_end, &cache.w_surv, &theta.mixed, &theta.surv),
            cum: GridPredictor::new(model, &cache.cum, &cache.w_surv, &theta.mixed, &theta.surv),
            chol,
            d_inv,
        })
    }

    /// Residual sum of squares of the measurements at `b`.
    pub fn ssr(&self, b: &DVector<f64>) -> f64 {
        let mut r = self.resid0.clone();
        r.gemv(-1.0, &self.cache.z, b, 1.0);
        r.norm_squared()
    }

    pub fn loglik_long(&self, b: &DVector<f64>) -> f64 {
        long_from_ssr(self.cache.n_meas(), self.ssr(b), self.sigma2, self.long_weight)
    }

    pub fn loglik_surv(&self, b: &DVector<f64>) -> Result<f64, ModelError> {
        let mut v = 0.0;
        if self.cache.event {
            v += self.end.log_hazard(b)[0];
        }
        let lh = self.cum.log_hazard(b);
        v -= weighted_exp_sum(&lh, &self.cache.cum)?;
        finite(v, "survival", &self.cache.id)
    }

    pub fn logdens_re(&self, b: &DVector<f64>) -> f64 {
        logdens_chol(b, &self.chol)
    }

    /// Full log joint density of `(y, T, delta, b)` at `b`.
    pub fn logpost(&self, b: &DVector<f64>) -> Result<f64, ModelError> {
        Ok(self.loglik_long(b) + self.loglik_surv(b)? + self.logdens_re(b))
    }

    /// Value, gradient and Hessian of `logpost`.
    pub fn derivs(
        &self,
        b: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>), ModelError> {
        let z = &self.cache.z;
        let mut r = self.resid0.clone();
        r.gemv(-1.0, z, b, 1.0);
        let lw = self.long_weight / self.sigma2;
        let mut g = z.tr_mul(&r) * lw - &self.d_inv * b;
        let mut h = &self.cache.ztz * (-lw) - &self.d_inv;
        let mut v = self.loglik_long(b) + self.logdens_re(b);
        if self.cache.event {
            v += self.end.log_hazard(b)[0];
            g += self.end.gb.row(0).transpose();
        }
        let lh = self.cum.log_hazard(b);
        v -= weighted_exp_sum(&lh, &self.cache.cum)?;
        for k in 0..lh.len() {
            if self.cache.cum.weights[k] == 0.0 {
                continue;
            }
            let c = self.cache.cum.weights[k] * lh[k].exp();
            let row = self.cum.gb.row(k);
            g.axpy(-c, &row.transpose(), 1.0);
            h.ger(-c, &row.transpose(), &row.transpose(), 1.0);
        }
        Ok((finite(v, "conditional density", &self.cache.id)?, g, h))
    }

    /// Newton ascent to the mode of `logpost`, with step halving.
    pub fn mode(&self, start: &DVector<f64>) -> Result<(DVector<f64>, f64, DMatrix<f64>), ModelError> {
        let mut b = start.clone();
        let (mut v, mut g, mut h) = self.derivs(&b)?;
        for _ in 0..100 {
            let neg = -&h;
            let step = match Cholesky::new(neg) {
                Some(c) => c.solve(&g),
                None => g.clone() * 0.1,
            };
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let cand = &b + &step * scale;
                if let Ok(nv) = self.logpost(&cand) {
                    if nv >= v - 1e-12 {
                        b = cand;
                        improved = nv - v > 1e-10 || step.norm() * scale < 1e-10;
                        let d = self.derivs(&b)?;
                        v = d.0;
                        g = d.1;
                        h = d.2;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !improved || g.norm() < 1e-9 {
                break;
            }
        }
        Ok((b, v, h))
    }
}

/// Laplace approximation of `∫ p(y, T, delta | b, theta) p(b | D) db`.
#[derive(Debug, Clone)]
pub struct LaplaceB {
    pub mode: DVector<f64>,
    /// Cholesky factor of the negative Hessian at the mode.
    pub precision: Cholesky<f64, Dyn>,
    pub log_marginal: f64,
}

impl LaplaceB {
    /// Lower Cholesky factor of the approximate posterior covariance.
    pub fn cov_chol(&self) -> DMatrix<f64> {
        let cov = self.precision.inverse();
        Cholesky::new(cov).map(|c| c.l()).unwrap_or_else(|| {
            let q = self.mode.len();
            DMatrix::identity(q, q) * 1e-6
        })
    }
}

impl ConditionalB<'_> {
    pub fn laplace(&self, start: &DVector<f64>) -> Result<LaplaceB, ModelError> {
        let (mode, v, h) = self.mode(start)?;
        let precision = Cholesky::new(-h).ok_or_else(|| ModelError::NonFinite {
            term: "random-effects Laplace Hessian",
            subject: self.cache.id.clone(),
        })?;
        let q = mode.len() as f64;
        let logdet: f64 = precision.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        Ok(LaplaceB {
            mode,
            precision,
            log_marginal: v + 0.5 * q * LN_2PI - logdet,
        })
    }
}

/// Fixed-length unconstrained coordinates of `ThetaFull`: beta, gamma,
/// gamma_h0, alpha (unless fixed), log Weibull shape (unless fixed or not
/// Weibull), log sigma2, then the lower Cholesky factor of `D` row by row
/// with log diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub p: usize,
    pub n_gamma: usize,
    pub n_h0: usize,
    pub n_alpha: usize,
    pub shape: bool,
    pub q: usize,
    fixed_alpha: Option<Vec<f64>>,
    fixed_shape: Option<f64>,
    weibull: bool,
}

impl ParamLayout {
    pub fn new(model: &Model) -> Self {
        let fixed = &model.spec.fixed_params;
        ParamLayout {
            p: model.p,
            n_gamma: model.n_gamma,
            n_h0: model.n_h0,
            n_alpha: if fixed.alpha.is_some() { 0 } else { model.n_alpha },
            shape: model.is_weibull() && fixed.weibull_shape.is_none(),
            q: model.q,
            fixed_alpha: fixed.alpha.clone(),
            fixed_shape: fixed.weibull_shape,
            weibull: model.is_weibull(),
        }
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    /// Survival block: gamma, gamma_h0, alpha and log shape.
    pub fn surv(&self) -> std::ops::Range<usize> {
        self.p..self.p + self.n_gamma + self.n_h0 + self.n_alpha + self.shape as usize
    }

    pub fn sigma2(&self) -> usize {
        self.surv().end
    }

    pub fn d(&self) -> std::ops::Range<usize> {
        let s = self.sigma2() + 1;
        s..s + self.q * (self.q + 1) / 2
    }

    pub fn dim(&self) -> usize {
        self.d().end
    }

    pub fn pack(&self, theta: &ThetaFull) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(theta.mixed.beta.iter());
        v.extend(theta.surv.gamma.iter());
        v.extend(theta.surv.gamma_h0.iter());
        if self.n_alpha > 0 {
            v.extend(theta.surv.alpha.iter());
        }
        if self.shape {
            v.push(theta.surv.weibull_shape.unwrap_or(1.0).ln());
        }
        v.push(theta.mixed.sigma2.ln());
        let l = Cholesky::new(theta.mixed.d.clone())
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::identity(self.q, self.q));
        for i in 0..self.q {
            for j in 0..=i {
                v.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
            }
        }
        DVector::from_vec(v)
    }

    pub fn unpack(&self, v: &DVector<f64>) -> ThetaFull {
        let mut k = 0;
        let mut take = |n: usize| {
            let s = v.rows(k, n).into_owned();
            k += n;
            s
        };
        let beta = take(self.p);
        let gamma = take(self.n_gamma);
        let gamma_h0 = take(self.n_h0);
        let alpha = match &self.fixed_alpha {
            Some(a) => DVector::from_vec(a.clone()),
            None => take(self.n_alpha),
        };
        let weibull_shape = if self.shape {
            Some(take(1)[0].exp())
        } else if self.weibull {
            Some(self.fixed_shape.unwrap_or(1.0))
        } else {
            None
        };
        let sigma2 = take(1)[0].exp();
        let l = self.chol_factor(&take(self.q * (self.q + 1) / 2));
        ThetaFull {
            mixed: MixedParams {
                beta,
                d: &l * l.transpose(),
                sigma2,
            },
            surv: SurvParams {
                gamma,
                gamma_h0,
                alpha,
                weibull_shape,
            },
        }
    }

    fn chol_factor(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        let mut k = 0;
        for i in 0..self.q {
            for j in 0..=i {
                l[(i, j)] = if i == j { v[k].exp() } else { v[k] };
                k += 1;
            }
        }
        l
    }

    /// Log absolute Jacobian of `unpack` (natural coordinates with respect
    /// to unconstrained ones).
    pub fn log_jacobian(&self, v: &DVector<f64>) -> f64 {
        let mut lj = v[self.sigma2()];
        if self.shape {
            lj += v[self.surv().end - 1];
        }
        let d = self.d();
        let q = self.q;
        lj += q as f64 * 2f64.ln();
        let mut k = d.start;
        for i in 0..q {
            for j in 0..=i {
                if i == j {
                    lj += (q - i + 1) as f64 * v[k];
                }
                k += 1;
            }
        }
        lj
    }

    /// Log prior on the unconstrained scale.
    pub fn logprior(&self, v: &DVector<f64>, priors: &PriorSpec, model: &Model) -> f64 {
        logprior(&self.unpack(v), priors, model) + self.log_jacobian(v)
    }

    pub fn names(&self, model: &Model) -> Vec<String> {
        theta_names(model)
    }
}

/// Names of the natural-scale scalars produced by `flatten`.
pub fn theta_names(model: &Model) -> Vec<String> {
    let mut n: Vec<String> = (0..model.p).map(|k| format!("beta[{k}]")).collect();
    n.push("sigma2".into());
    for i in 0..model.q {
        for j in 0..=i {
            n.push(format!("D[{i},{j}]"));
        }
    }
    if model.spec.survival_design.intercept {
        n.push("gamma[(Intercept)]".into());
    }
    for c in &model.spec.survival_design.covariates {
        n.push(format!("gamma[{c}]"));
    }
    n.extend((0..model.n_h0).map(|k| format!("gamma_h0[{k}]")));
    n.extend((0..model.n_alpha).map(|k| format!("alpha[{k}]")));
    if model.is_weibull() {
        n.push("weibull_shape".into());
    }
    n
}

/// Natural-scale scalars in the order of `theta_names`.
pub fn flatten(theta: &ThetaFull, model: &Model) -> Vec<f64> {
    let (m, s) = (&theta.mixed, &theta.surv);
    let mut v: Vec<f64> = m.beta.iter().copied().collect();
    v.push(m.sigma2);
    for i in 0..model.q {
        for j in 0..=i {
            v.push(m.d[(i, j)]);
        }
    }
    v.extend(s.gamma.iter());
    v.extend(s.gamma_h0.iter());
    v.extend(s.alpha.iter());
    if model.is_weibull() {
        v.push(s.weibull_shape.unwrap_or(1.0));
    }
    v
}

/// Inverse of `flatten`.
pub fn unflatten(v: &[f64], model: &Model) -> ThetaFull {
    let mut k = 0;
    let mut take = |n: usize| {
        let s = DVector::from_column_slice(&v[k..k + n]);
        k += n;
        s
    };
    let beta = take(model.p);
    let sigma2 = take(1)[0];
    let mut d = DMatrix::zeros(model.q, model.q);
    for i in 0..model.q {
        for j in 0..=i {
            let x = take(1)[0];
            d[(i, j)] = x;
            d[(j, i)] = x;
        }
    }
    let gamma = take(model.n_gamma);
    let gamma_h0 = take(model.n_h0);
    let alpha = take(model.n_alpha);
    let weibull_shape = model.is_weibull().then(|| take(1)[0]);
    ThetaFull {
        mixed: MixedParams { beta, d, sigma2 },
        surv: SurvParams {
            gamma,
            gamma_h0,
            alpha,
            weibull_shape,
        },
    }
}
