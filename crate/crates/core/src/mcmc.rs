//! Adaptive random-walk Metropolis-within-Gibbs sampler for one joint model.
//!
//! Blocks: `beta`; the survival block (`gamma`, `gamma_h0`, `alpha` and the
//! log Weibull shape); `log sigma2`; the Cholesky-log-diagonal coordinates
//! of `D`; and each subject's random effects. Every block has its own
//! ChaCha stream derived from the seed, so the per-subject updates run in
//! parallel with results independent of scheduling.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::quantile;
use crate::datamodel::{Association, Dataset, JointModelSpec};
use crate::likelihood::{
    self, long_from_ssr, logdens_chol, ConditionalB, ParamLayout, ThetaFull,
};
use crate::longitudinal::MixedParams;
use crate::model::{Model, ModelError, SubjectCache};
use crate::optim::{fd_hessian, make_pd_neg};
use crate::survival::SurvParams;

pub const MIN_RETAINED: usize = 100;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("chain configuration error: {0}")]
    Config(String),
    #[error("initialization error: {0}")]
    Init(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Centered,
    NonCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    /// Last adaptation iteration; defaults to the burn-in length.
    #[serde(default)]
    pub adapt_until: Option<usize>,
    /// Multiplier of the longitudinal log likelihood (1 for the joint model).
    #[serde(default = "unit")]
    pub longitudinal_weight: f64,
    #[serde(default)]
    pub parameterization: Parameterization,
    /// Adds moves in the complementary parameterization for `beta` and `D`.
    #[serde(default = "yes")]
    pub interweave: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

impl ChainConfig {
    pub fn new(n_iter: usize, n_burnin: usize, thin: usize, seed: u64) -> Self {
        ChainConfig {
            n_iter,
            n_burnin,
            thin,
            seed,
            adapt_until: None,
            longitudinal_weight: 1.0,
            parameterization: Parameterization::Centered,
            interweave: true,
        }
    }

    pub fn adapt_until(&self) -> usize {
        self.adapt_until.unwrap_or(self.n_burnin)
    }

    pub fn retained(&self) -> usize {
        self.n_iter.saturating_sub(self.n_burnin) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<(), McmcError> {
        if self.thin == 0 {
            return Err(McmcError::Config("thin must be positive".into()));
        }
        if self.n_burnin >= self.n_iter {
            return Err(McmcError::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.n_burnin, self.n_iter
            )));
        }
        if self.retained() < MIN_RETAINED {
            return Err(McmcError::Config(format!(
                "{} retained draws, at least {MIN_RETAINED} required",
                self.retained()
            )));
        }
        if self.adapt_until() > self.n_burnin {
            return Err(McmcError::Config(
                "adaptation must stop before the first retained draw".into(),
            ));
        }
        if !(self.longitudinal_weight >= 0.0) {
            return Err(McmcError::Config("longitudinal weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Adaptive Gaussian random-walk kernel. The proposal is
/// `x + exp(log_scale) * 2.38 / sqrt(d) * L z`; during adaptation the log
/// scale follows a Robbins-Monro recursion toward the target acceptance
/// rate and `L` is refreshed from the empirical covariance of the chain.
#[derive(Debug, Clone)]
pub struct RwBlock {
    dim: usize,
    log_scale: f64,
    target: f64,
    chol: DMatrix<f64>,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    n_hist: usize,
    pub accepted: u64,
    pub proposed: u64,
}

fn chol_or_diag(cov: &DMatrix<f64>) -> DMatrix<f64> {
    match Cholesky::new(cov.clone()) {
        Some(c) => c.l(),
        None => DMatrix::from_diagonal(&cov.diagonal().map(|v| v.abs().max(1e-8).sqrt())),
    }
}

impl RwBlock {
    pub fn new(cov: &DMatrix<f64>) -> Self {
        let dim = cov.nrows();
        RwBlock {
            dim,
            log_scale: 0.0,
            target: if dim == 1 { 0.44 } else { 0.234 },
            chol: chol_or_diag(cov),
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            n_hist: 0,
            accepted: 0,
            proposed: 0,
        }
    }

    pub fn propose<R: Rng>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = self.log_scale.exp() * 2.38 / (self.dim as f64).sqrt();
        x + &self.chol * z * s
    }

    /// Bookkeeping after a proposal at iteration `iter`; `x` is the state
    /// after the accept/reject decision.
    pub fn record(&mut self, accepted: bool, x: &DVector<f64>, iter: usize, adapt_until: usize) {
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
        if iter >= adapt_until {
            return;
        }
        let gain = 1.0 / ((iter + 1) as f64).powf(0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        self.log_scale = (self.log_scale + gain * (a - self.target)).clamp(-15.0, 10.0);
        if iter < 100 {
            return;
        }
        self.n_hist += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n_hist as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
        if self.n_hist >= 20 * self.dim.max(5) && self.n_hist.is_multiple_of(100) {
            let mut cov = &self.m2 / (self.n_hist - 1) as f64;
            let jitter = 1e-10 * cov.diagonal().max().max(1e-12);
            for i in 0..self.dim {
                cov[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(cov) {
                self.chol = c.l();
            }
        }
    }

    /// One Metropolis step against `logp`; returns whether it moved.
    pub fn step<F: FnMut(&DVector<f64>) -> f64, R: Rng>(
        &mut self,
        x: &mut DVector<f64>,
        lp: &mut f64,
        mut logp: F,
        rng: &mut R,
        iter: usize,
        adapt_until: usize,
    ) -> bool {
        let cand = self.propose(x, rng);
        let lc = logp(&cand);
        let u: f64 = rng.gen();
        let acc = lc.is_finite() && u.ln() < lc - *lp;
        if acc {
            *x = cand;
            *lp = lc;
        }
        self.record(acc, x, iter, adapt_until);
        acc
    }

    pub fn acceptance(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub subject_ids: Vec<String>,
    pub theta_draws: Vec<ThetaFull>,
    /// Per subject: retained draws (rows) by random-effect coordinates.
    pub b_draws: Vec<DMatrix<f64>>,
    /// `(block, acceptance fraction)`.
    pub accept_rates: Vec<(String, f64)>,
    /// Natural-scale log posterior at every iteration.
    pub logpost_trace: Vec<f64>,
    /// Log posterior of each retained draw.
    pub draw_logpost: Vec<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.theta_draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_draws.is_empty()
    }

    /// Retained draws as rows of natural-scale scalars.
    pub fn flat(&self, model: &Model) -> DMatrix<f64> {
        let k = likelihood::theta_names(model).len();
        let mut m = DMatrix::zeros(self.len(), k);
        for (r, th) in self.theta_draws.iter().enumerate() {
            for (c, v) in likelihood::flatten(th, model).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn b_mean(&self) -> Vec<DVector<f64>> {
        self.b_draws.iter().map(|m| m.row_mean().transpose()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Block {
    /// `beta` with the random effects held fixed.
    Beta,
    /// `beta` with the subject-level coefficients `A_i beta + b_i` held fixed.
    BetaShift,
    Surv,
    Sigma2,
    /// `D` with the random effects held fixed.
    D,
    /// `D` with the standardized random effects held fixed.
    DWhite,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::Beta => "beta",
            Block::BetaShift => "beta_shift",
            Block::Surv => "survival",
            Block::Sigma2 => "sigma2",
            Block::D => "D",
            Block::DWhite => "D_whitened",
        }
    }
}

struct SubjectState {
    b: DVector<f64>,
    u: DVector<f64>,
    ssr: f64,
    surv: f64,
    rw: RwBlock,
    rng: ChaCha8Rng,
}

struct Proposal {
    phi: DVector<f64>,
    theta: ThetaFull,
    terms: Option<Vec<(f64, f64)>>,
    bs: Option<Vec<DVector<f64>>>,
    total: f64,
    log_ratio_extra: f64,
}

struct Sampler<'a> {
    model: &'a Model,
    caches: &'a [SubjectCache],
    cfg: &'a ChainConfig,
    layout: ParamLayout,
    phi: DVector<f64>,
    theta: ThetaFull,
    subjects: Vec<SubjectState>,
    /// Per subject `A_i` with `x_i(t) = z(t) A_i`, when it exists.
    lift: Option<Vec<DMatrix<f64>>>,
    total: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn log_det_chol(d: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let l = Cholesky::new(d.clone())?.l();
    let ld = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    Some((l, ld))
}

/// Solves `z(t) A = x(t)` over a time grid; `None` when the fixed-effects
/// row is not in the span of the random-effects row.
fn lift_matrix(model: &Model, w: &[f64]) -> Option<DMatrix<f64>> {
    let (lo, hi) = model.support();
    let n = 4 * (model.p + model.q) + 8;
    let mut xs = DMatrix::zeros(n, model.p);
    let mut zs = DMatrix::zeros(n, model.q);
    for k in 0..n {
        let t = lo + (hi - lo) * (k as f64 + 0.5) / n as f64;
        xs.set_row(k, &model.x_row(t, w, 0).ok()?.transpose());
        zs.set_row(k, &model.z_row(t, 0).ok()?.transpose());
    }
    let a = Cholesky::new(zs.transpose() * &zs)?.solve(&(zs.transpose() * &xs));
    let resid = (&zs * &a - &xs).norm();
    (resid <= 1e-9 * xs.norm().max(1.0)).then_some(a)
}

fn initial_theta(model: &Model, caches: &[SubjectCache]) -> ThetaFull {
    let p = model.p;
    let mut xtx = DMatrix::<f64>::identity(p, p) * 1e-8;
    let mut xty = DVector::zeros(p);
    let mut total_time = 0.0;
    let mut events = 0.0;
    for c in caches {
        xtx += c.x.transpose() * &c.x;
        xty += c.x.transpose() * &c.y;
        total_time += c.end;
        events += c.event as u8 as f64;
    }
    let beta = xtx
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&xty))
        .unwrap_or_else(|| DVector::zeros(p));
    let (mut ssr, mut n_obs, mut ss_tot) = (0.0, 0usize, 0.0);
    for c in caches {
        let r = &c.y - &c.x * &beta;
        ss_tot += r.norm_squared();
        n_obs += r.len();
        let a = &c.ztz + DMatrix::identity(model.q, model.q) * 1e-6;
        let b = a.cholesky().map(|ch| ch.solve(&(c.z.transpose() * &r)));
        ssr += match b {
            Some(b) => (&r - &c.z * b).norm_squared(),
            None => r.norm_squared(),
        };
    }
    let dof = n_obs as f64 - p as f64 - (caches.len() * model.q) as f64;
    let var_r = ss_tot / n_obs.max(1) as f64;
    let mut sigma2 = if dof > 0.0 { ssr / dof } else { var_r };
    if !(sigma2 > 1e-8 * var_r.max(1e-300)) {
        sigma2 = var_r.max(1e-6);
    }
    let rate = (events.max(0.5) / total_time.max(1e-12)).ln();
    let mut gamma = DVector::zeros(model.n_gamma);
    let mut gamma_h0 = DVector::zeros(model.n_h0);
    if model.spec.survival_design.intercept {
        gamma[0] = rate;
    } else if model.n_h0 > 0 {
        gamma_h0[0] = rate;
    }
    let fixed = &model.spec.fixed_params;
    let alpha = match &fixed.alpha {
        Some(a) => DVector::from_vec(a.clone()),
        None => DVector::zeros(model.n_alpha),
    };
    ThetaFull {
        mixed: MixedParams {
            beta,
            d: DMatrix::identity(model.q, model.q),
            sigma2,
        },
        surv: SurvParams {
            gamma,
            gamma_h0,
            alpha,
            weibull_shape: model.is_weibull().then(|| fixed.weibull_shape.unwrap_or(1.0)),
        },
    }
}

impl<'a> Sampler<'a> {
    fn new(
        model: &'a Model,
        caches: &'a [SubjectCache],
        cfg: &'a ChainConfig,
    ) -> Result<Self, McmcError> {
        let layout = ParamLayout::new(model);
        let theta0 = initial_theta(model, caches);
        let phi = layout.pack(&theta0);
        let theta = layout.unpack(&phi);
        let lw = cfg.longitudinal_weight;
        let non_centered = cfg.parameterization == Parameterization::NonCentered;
        let l = Cholesky::new(theta.mixed.d.clone()).expect("identity is positive definite").l();
        let subjects = caches
            .par_iter()
            .enumerate()
            .map(|(i, c)| -> Result<SubjectState, McmcError> {
                let cond = ConditionalB::new(model, c, &theta, lw)?;
                let (b, _, h) = cond.mode(&DVector::zeros(model.q))?;
                let mut cov = make_pd_neg(&h, 1e-10)
                    .try_inverse()
                    .unwrap_or_else(|| DMatrix::identity(model.q, model.q));
                let u = l.solve_lower_triangular(&b).expect("positive diagonal");
                if non_centered {
                    let li = l.clone().try_inverse().expect("positive diagonal");
                    cov = &li * cov * li.transpose();
                }
                let (ssr, surv) = likelihood::cached_terms(model, c, &theta, &b)?;
                Ok(SubjectState {
                    b,
                    u,
                    ssr,
                    surv,
                    rw: RwBlock::new(&cov),
                    rng: stream(cfg.seed, 1000 + i as u64),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| McmcError::Init(e.to_string()))?;
        let lift = if cfg.interweave && model.p > 0 {
            let mut groups: Vec<(Vec<u64>, DMatrix<f64>)> = Vec::new();
            let mut out = Vec::with_capacity(caches.len());
            for c in caches {
                let key: Vec<u64> = c.w.iter().map(|v| v.to_bits()).collect();
                let a = match groups.iter().find(|(k, _)| *k == key) {
                    Some((_, a)) => a.clone(),
                    None => match lift_matrix(model, &c.w) {
                        Some(a) => {
                            groups.push((key, a.clone()));
                            a
                        }
                        None => {
                            out.clear();
                            break;
                        }
                    },
                };
                out.push(a);
            }
            (out.len() == caches.len()).then_some(out)
        } else {
            None
        };
        let mut s = Sampler {
            model,
            caches,
            cfg,
            layout,
            phi,
            theta,
            subjects,
            lift,
            total: 0.0,
        };
        s.total = s.total_from_cache();
        if !s.total.is_finite() {
            return Err(McmcError::Init(format!(
                "initial log posterior is not finite ({})",
                s.total
            )));
        }
        Ok(s)
    }

    fn non_centered(&self) -> bool {
        self.cfg.parameterization == Parameterization::NonCentered
    }

    fn re_sum(&self, theta: &ThetaFull, bs: &[&DVector<f64>]) -> f64 {
        match Cholesky::new(theta.mixed.d.clone()) {
            Some(ch) => bs.iter().map(|b| logdens_chol(b, &ch)).sum(),
            None => f64::NEG_INFINITY,
        }
    }

    fn assemble(
        &self,
        phi: &DVector<f64>,
        theta: &ThetaFull,
        terms: &[(f64, f64)],
        bs: &[&DVector<f64>],
    ) -> f64 {
        let lw = self.cfg.longitudinal_weight;
        let mut t = 0.0;
        for (c, (ssr, surv)) in self.caches.iter().zip(terms) {
            t += long_from_ssr(c.n_meas(), *ssr, theta.mixed.sigma2, lw) + surv;
        }
        t + self.re_sum(theta, bs) + self.layout.logprior(phi, &self.model.spec.priors, self.model)
    }

    fn total_from_cache(&self) -> f64 {
        let terms: Vec<(f64, f64)> = self.subjects.iter().map(|s| (s.ssr, s.surv)).collect();
        let bs: Vec<&DVector<f64>> = self.subjects.iter().map(|s| &s.b).collect();
        self.assemble(&self.phi, &self.theta, &terms, &bs)
    }

    fn propose_terms(&self, phi: DVector<f64>, block: Block) -> Option<Proposal> {
        let theta = self.layout.unpack(&phi);
        if !self.layout.logprior(&phi, &self.model.spec.priors, self.model).is_finite() {
            return None;
        }
        let model = self.model;
        let mut log_ratio_extra = 0.0;
        let new_bs: Option<Vec<DVector<f64>>> = match block {
            Block::DWhite => {
                let (l, ld) = log_det_chol(&theta.mixed.d)?;
                let (_, ld0) = log_det_chol(&self.theta.mixed.d)?;
                log_ratio_extra = self.subjects.len() as f64 * (ld - ld0);
                Some(self.subjects.iter().map(|s| &l * &s.u).collect())
            }
            Block::BetaShift => {
                let lift = self.lift.as_ref()?;
                let delta = &theta.mixed.beta - &self.theta.mixed.beta;
                Some(
                    self.subjects
                        .iter()
                        .zip(lift)
                        .map(|(s, a)| &s.b - a * &delta)
                        .collect(),
                )
            }
            _ => None,
        };
        let bs: Vec<&DVector<f64>> = match &new_bs {
            Some(v) => v.iter().collect(),
            None => self.subjects.iter().map(|s| &s.b).collect(),
        };
        let need_long = matches!(block, Block::Beta | Block::BetaShift | Block::DWhite);
        let need_surv = match block {
            Block::Beta => model.assoc() != Association::RandomEffects,
            Block::BetaShift => model.assoc() == Association::RandomEffects,
            Block::Surv | Block::DWhite => true,
            Block::Sigma2 | Block::D => false,
        };
        let terms: Option<Vec<(f64, f64)>> = if need_long || need_surv {
            let v: Result<Vec<(f64, f64)>, ModelError> = self
                .caches
                .par_iter()
                .zip(self.subjects.par_iter())
                .zip(bs.par_iter())
                .map(|((c, s), b)| {
                    let ssr = if need_long {
                        let mut r = &c.y - &c.x * &theta.mixed.beta;
                        r.gemv(-1.0, &c.z, b, 1.0);
                        r.norm_squared()
                    } else {
                        s.ssr
                    };
                    let surv = if need_surv {
                        likelihood::cached_surv(model, c, &theta, b)?
                    } else {
                        s.surv
                    };
                    Ok((ssr, surv))
                })
                .collect();
            Some(v.ok()?)
        } else {
            None
        };
        let total = match &terms {
            Some(t) => self.assemble(&phi, &theta, t, &bs),
            None => {
                let t: Vec<(f64, f64)> = self.subjects.iter().map(|s| (s.ssr, s.surv)).collect();
                self.assemble(&phi, &theta, &t, &bs)
            }
        };
        if !total.is_finite() {
            return None;
        }
        Some(Proposal {
            phi,
            theta,
            terms,
            bs: new_bs,
            total,
            log_ratio_extra,
        })
    }

    fn commit(&mut self, p: Proposal) {
        self.phi = p.phi;
        self.theta = p.theta;
        if let Some(t) = p.terms {
            for (s, (ssr, surv)) in self.subjects.iter_mut().zip(t) {
                s.ssr = ssr;
                s.surv = surv;
            }
        }
        if let Some(bs) = p.bs {
            for (s, b) in self.subjects.iter_mut().zip(bs) {
                s.b = b;
            }
        }
        if let Some((l, _)) = log_det_chol(&self.theta.mixed.d) {
            for s in self.subjects.iter_mut() {
                s.u = l.solve_lower_triangular(&s.b).expect("positive diagonal");
            }
        }
        self.total = p.total;
    }

    fn range(&self, block: Block) -> std::ops::Range<usize> {
        match block {
            Block::Beta | Block::BetaShift => self.layout.beta(),
            Block::Surv => self.layout.surv(),
            Block::Sigma2 => self.layout.sigma2()..self.layout.sigma2() + 1,
            Block::D | Block::DWhite => self.layout.d(),
        }
    }

    /// Proposal covariance from the curvature of the block's conditional log
    /// posterior at the current state.
    fn initial_cov(&self, block: Block) -> DMatrix<f64> {
        let r = self.range(block);
        let x0 = self.phi.rows(r.start, r.len()).into_owned();
        let mut f = |x: &DVector<f64>| {
            let mut phi = self.phi.clone();
            phi.rows_mut(r.start, r.len()).copy_from(x);
            self.propose_terms(phi, block)
                .map_or(-1e300, |p| p.total + p.log_ratio_extra)
        };
        let h = fd_hessian(&mut f, &x0, 1e-4);
        let fallback = DMatrix::identity(r.len(), r.len()) * 0.01;
        if !h.iter().all(|v| v.is_finite()) {
            return fallback;
        }
        make_pd_neg(&h, 1e-8).try_inverse().unwrap_or(fallback)
    }

    fn update_b(&mut self, iter: usize, adapt_until: usize) -> Result<(), McmcError> {
        let model = self.model;
        let theta = &self.theta;
        let lw = self.cfg.longitudinal_weight;
        let non_centered = self.non_centered();
        let l = Cholesky::new(theta.mixed.d.clone())
            .ok_or_else(|| McmcError::Init("D lost positive definiteness".into()))?
            .l();
        self.subjects
            .par_iter_mut()
            .zip(self.caches.par_iter())
            .try_for_each(|(s, c)| -> Result<(), McmcError> {
                let cond = ConditionalB::new(model, c, theta, lw)?;
                let cur_x = if non_centered { s.u.clone() } else { s.b.clone() };
                let cand = s.rw.propose(&cur_x, &mut s.rng);
                let cand_b = if non_centered { &l * &cand } else { cand.clone() };
                let u: f64 = s.rng.gen();
                let mut acc = false;
                if let Ok(surv) = cond.loglik_surv(&cand_b) {
                    let ssr = cond.ssr(&cand_b);
                    let n = c.n_meas();
                    let s2 = theta.mixed.sigma2;
                    let new = long_from_ssr(n, ssr, s2, lw) + surv + cond.logdens_re(&cand_b);
                    let old = long_from_ssr(n, s.ssr, s2, lw) + s.surv + cond.logdens_re(&s.b);
                    if u.ln() < new - old {
                        acc = true;
                        s.ssr = ssr;
                        s.surv = surv;
                        s.u = if non_centered {
                            cand
                        } else {
                            l.solve_lower_triangular(&cand_b).expect("positive diagonal")
                        };
                        s.b = cand_b;
                    }
                }
                let x = if non_centered { &s.u } else { &s.b };
                s.rw.record(acc, x, iter, adapt_until);
                Ok(())
            })?;
        self.total = self.total_from_cache();
        Ok(())
    }

    fn run(mut self) -> Result<PosteriorDraws, McmcError> {
        let cfg = self.cfg;
        let adapt_until = cfg.adapt_until();
        let mut order = vec![Block::Beta];
        if self.lift.is_some() {
            order.push(Block::BetaShift);
        }
        order.extend([Block::Surv, Block::Sigma2]);
        match (cfg.interweave, self.non_centered()) {
            (true, _) => order.extend([Block::D, Block::DWhite]),
            (false, false) => order.push(Block::D),
            (false, true) => order.push(Block::DWhite),
        }
        let blocks: Vec<Block> = order.into_iter().filter(|b| !self.range(*b).is_empty()).collect();
        let mut kernels: Vec<RwBlock> = blocks.iter().map(|b| RwBlock::new(&self.initial_cov(*b))).collect();
        let mut rngs: Vec<ChaCha8Rng> = blocks
            .iter()
            .map(|b| {
                let id = match b {
                    Block::Beta => 0,
                    Block::Surv => 1,
                    Block::Sigma2 => 2,
                    Block::D => 3,
                    Block::DWhite => 4,
                    Block::BetaShift => 5,
                };
                stream(cfg.seed, id)
            })
            .collect();
        let n_sub = self.subjects.len();
        let q = self.model.q;
        let mut theta_draws = Vec::with_capacity(cfg.retained());
        let mut b_buf: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.retained() * q); n_sub];
        let mut trace = Vec::with_capacity(cfg.n_iter);
        let mut draw_logpost = Vec::with_capacity(cfg.retained());
        for iter in 0..cfg.n_iter {
            self.update_b(iter, adapt_until)?;
            for (k, block) in blocks.iter().enumerate() {
                let r = self.range(*block);
                let x = self.phi.rows(r.start, r.len()).into_owned();
                let cand = kernels[k].propose(&x, &mut rngs[k]);
                let mut phi = self.phi.clone();
                phi.rows_mut(r.start, r.len()).copy_from(&cand);
                let u: f64 = rngs[k].gen();
                let mut acc = false;
                if let Some(p) = self.propose_terms(phi, *block) {
                    if u.ln() < p.total - self.total + p.log_ratio_extra {
                        self.commit(p);
                        acc = true;
                    }
                }
                let x = self.phi.rows(r.start, r.len()).into_owned();
                kernels[k].record(acc, &x, iter, adapt_until);
            }
            trace.push(self.total - self.layout.log_jacobian(&self.phi));
            if iter >= cfg.n_burnin && (iter - cfg.n_burnin + 1).is_multiple_of(cfg.thin) {
                theta_draws.push(self.theta.clone());
                draw_logpost.push(*trace.last().expect("pushed above"));
                for (buf, s) in b_buf.iter_mut().zip(&self.subjects) {
                    buf.extend(s.b.iter());
                }
            }
        }
        let mut accept_rates: Vec<(String, f64)> = blocks
            .iter()
            .zip(&kernels)
            .map(|(b, k)| (b.name().to_string(), k.acceptance()))
            .collect();
        let b_acc = self.subjects.iter().map(|s| s.rw.acceptance()).sum::<f64>() / n_sub.max(1) as f64;
        accept_rates.push(("b".into(), b_acc));
        let n_ret = theta_draws.len();
        Ok(PosteriorDraws {
            subject_ids: self.caches.iter().map(|c| c.id.clone()).collect(),
            theta_draws,
            b_draws: b_buf
                .into_iter()
                .map(|v| DMatrix::from_row_slice(n_ret, q, &v))
                .collect(),
            accept_rates,
            logpost_trace: trace,
            draw_logpost,
        })
    }
}

/// Runs one chain on precomputed subject caches.
pub fn fit_model(
    model: &Model,
    caches: &[SubjectCache],
    cfg: &ChainConfig,
) -> Result<PosteriorDraws, McmcError> {
    cfg.validate()?;
    Sampler::new(model, caches, cfg)?.run()
}

pub fn fit(ds: &Dataset, spec: &JointModelSpec, cfg: &ChainConfig) -> Result<PosteriorDraws, McmcError> {
    cfg.validate()?;
    let model = Model::new(spec, &ds.covariate_names)?;
    let caches = ds
        .subjects
        .iter()
        .map(|s| model.subject_cache(s))
        .collect::<Result<Vec<_>, _>>()?;
    fit_model(&model, &caches, cfg)
}

/// Independent chains with seeds `seed, seed + 1, ...`, run concurrently.
pub fn fit_chains(
    ds: &Dataset,
    spec: &JointModelSpec,
    cfg: &ChainConfig,
    n_chains: usize,
) -> Result<Vec<PosteriorDraws>, McmcError> {
    (0..n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let c = ChainConfig {
                seed: cfg.seed.wrapping_add(k),
                ..cfg.clone()
            };
            fit(ds, spec, &c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub ess: f64,
    pub acf1: f64,
}

fn autocorr(x: &[f64], mean: f64, var0: f64, lag: usize) -> f64 {
    let n = x.len();
    let s: f64 = (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum();
    s / (n as f64 * var0)
}

/// Effective sample size by Geyer's initial monotone positive sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var0 <= 0.0 {
        return n as f64;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let g = autocorr(x, mean, var0, 2 * m) + autocorr(x, mean, var0, 2 * m + 1);
        if g <= 0.0 {
            break;
        }
        let g = g.min(prev);
        sum += g;
        prev = g;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    n as f64 / tau
}

pub fn summarize_column(name: &str, x: &[f64]) -> ParamSummary {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let var0 = var * (n - 1.0) / n;
    ParamSummary {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        q025: quantile(&sorted, 0.025),
        q50: quantile(&sorted, 0.5),
        q975: quantile(&sorted, 0.975),
        ess: effective_sample_size(x),
        acf1: if var0 > 0.0 && x.len() > 1 {
            autocorr(x, mean, var0, 1)
        } else {
            f64::NAN
        },
    }
}

/// Posterior summaries of every natural-scale scalar parameter.
pub fn summarize(draws: &PosteriorDraws, model: &Model) -> Vec<ParamSummary> {
    let flat = draws.flat(model);
    likelihood::theta_names(model)
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<f64> = flat.column(c).iter().copied().collect();
            summarize_column(name, &col)
        })
        .collect()
}
