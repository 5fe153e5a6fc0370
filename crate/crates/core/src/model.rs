//! A `JointModelSpec` resolved against a dataset's covariate names, plus
//! per-subject precomputed designs.
//!
//! Every association structure is linear in `(beta, b)` at a fixed time: the
//! current value and slope directly, the cumulative and weighted cumulative
//! effects through integrated design rows. `TimeGrid` stores those rows at
//! quadrature nodes so that log hazards over a grid reduce to a few
//! matrix-vector products.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{BasisError, KnotVector, SplineBasis, SplineKind};
use crate::datamodel::{Association, Baseline, JointModelSpec, Subject, TimeBasis, WeightFn};
use crate::quadrature::{QuadError, GK15, N_NODES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model specification error: {0}")]
    Spec(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("hazard overflow: linear predictor {eta} at t = {t}")]
    Overflow { eta: f64, t: f64 },
    #[error("Weibull baseline hazard is singular at t = 0 for shape {shape} < 1")]
    Singular { shape: f64 },
    #[error("non-finite {term} term for subject {subject}")]
    NonFinite { term: &'static str, subject: String },
}

#[derive(Debug, Clone)]
enum TimeEval {
    Constant,
    Linear,
    Spline(SplineBasis),
}

impl TimeEval {
    fn dim(&self) -> usize {
        match self {
            TimeEval::Constant => 0,
            TimeEval::Linear => 1,
            TimeEval::Spline(b) => b.dim(),
        }
    }

    fn row(&self, t: f64, deriv: usize) -> Result<Vec<f64>, BasisError> {
        match self {
            TimeEval::Constant => Ok(Vec::new()),
            TimeEval::Linear => Ok(vec![match deriv {
                0 => t,
                1 => 1.0,
                _ => 0.0,
            }]),
            TimeEval::Spline(b) => b.row(t, deriv),
        }
    }

    fn support(&self) -> (f64, f64) {
        match self {
            TimeEval::Spline(b) => b.knots().boundary,
            _ => (0.0, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone)]
enum BaselineEval {
    Spline(SplineBasis),
    Weibull,
}

/// Compiled joint model: index resolution, design evaluation and dimensions.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: JointModelSpec,
    pub covariate_names: Vec<String>,
    time: TimeEval,
    by_idx: Vec<usize>,
    cov_idx: Vec<usize>,
    surv_idx: Vec<usize>,
    baseline: BaselineEval,
    weight_fn: WeightFn,
    pub p: usize,
    pub q: usize,
    pub n_gamma: usize,
    pub n_h0: usize,
    pub n_alpha: usize,
}

fn resolve(names: &[String], wanted: &[String]) -> Result<Vec<usize>, ModelError> {
    wanted
        .iter()
        .map(|w| {
            names
                .iter()
                .position(|n| n == w)
                .ok_or_else(|| ModelError::Spec(format!("unknown covariate `{w}`")))
        })
        .collect()
}

impl Model {
    pub fn new(spec: &JointModelSpec, covariate_names: &[String]) -> Result<Self, ModelError> {
        let time = match &spec.fixed_design.time {
            TimeBasis::Constant => TimeEval::Constant,
            TimeBasis::Linear => TimeEval::Linear,
            TimeBasis::NaturalCubic { knots } => {
                TimeEval::Spline(SplineBasis::new(knots.clone(), SplineKind::NaturalCubic)?)
            }
            TimeBasis::Bspline { knots } => {
                TimeEval::Spline(SplineBasis::new(knots.clone(), SplineKind::BSpline)?)
            }
        };
        let by_idx = resolve(covariate_names, &spec.fixed_design.by)?;
        let cov_idx = resolve(covariate_names, &spec.fixed_design.covariates)?;
        let surv_idx = resolve(covariate_names, &spec.survival_design.covariates)?;
        let baseline = match &spec.baseline {
            Baseline::Weibull => {
                if !spec.survival_design.intercept {
                    return Err(ModelError::Spec(
                        "the Weibull baseline needs an intercept in the survival design".into(),
                    ));
                }
                BaselineEval::Weibull
            }
            Baseline::BsplineLogHazard { knots } => {
                if spec.survival_design.intercept {
                    return Err(ModelError::Spec(
                        "the spline baseline carries its own intercept; drop the survival intercept"
                            .into(),
                    ));
                }
                BaselineEval::Spline(SplineBasis::new(knots.clone(), SplineKind::BSpline)?)
            }
        };
        let groups = by_idx.len().max(1);
        let p = (1 + time.dim()) * groups + cov_idx.len();
        let q = usize::from(spec.random_design.intercept)
            + if spec.random_design.time { time.dim() } else { 0 };
        if q == 0 {
            return Err(ModelError::Spec("random design has no columns".into()));
        }
        let n_gamma = usize::from(spec.survival_design.intercept) + surv_idx.len();
        // Intercept plus all but the first B-spline (the full basis sums to one).
        let n_h0 = match &baseline {
            BaselineEval::Spline(b) => b.dim(),
            BaselineEval::Weibull => 0,
        };
        let n_alpha = match spec.assoc {
            Association::ValueSlope => 2,
            Association::RandomEffects => q,
            _ => 1,
        };
        let weight_fn = match (spec.assoc, spec.weight_fn) {
            (Association::WeightedCumulative, None) => {
                return Err(ModelError::Spec(
                    "weighted_cumulative association requires weight_fn".into(),
                ))
            }
            (_, w) => w.unwrap_or_default(),
        };
        if let Some(a) = &spec.fixed_params.alpha {
            if a.len() != n_alpha {
                return Err(ModelError::Spec(format!(
                    "fixed alpha has length {}, association needs {n_alpha}",
                    a.len()
                )));
            }
        }
        if spec.fixed_params.weibull_shape.is_some() && !matches!(baseline, BaselineEval::Weibull) {
            return Err(ModelError::Spec("weibull_shape fixed without Weibull baseline".into()));
        }
        Ok(Model {
            spec: spec.clone(),
            covariate_names: covariate_names.to_vec(),
            time,
            by_idx,
            cov_idx,
            surv_idx,
            baseline,
            weight_fn,
            p,
            q,
            n_gamma,
            n_h0,
            n_alpha,
        })
    }

    pub fn assoc(&self) -> Association {
        self.spec.assoc
    }

    pub fn is_weibull(&self) -> bool {
        matches!(self.baseline, BaselineEval::Weibull)
    }

    pub fn weight_fn(&self) -> WeightFn {
        self.weight_fn
    }

    /// Time range on which the longitudinal design is defined.
    pub fn support(&self) -> (f64, f64) {
        let (lo, hi) = self.time.support();
        match &self.baseline {
            BaselineEval::Spline(b) => {
                let (blo, bhi) = b.knots().boundary;
                (lo.max(blo), hi.min(bhi))
            }
            BaselineEval::Weibull => (lo, hi),
        }
    }

    pub fn baseline_knots(&self) -> Option<&KnotVector> {
        match &self.baseline {
            BaselineEval::Spline(b) => Some(b.knots()),
            BaselineEval::Weibull => None,
        }
    }

    /// Fixed-effects design row `x(t)` or its time derivative.
    pub fn x_row(&self, t: f64, w: &[f64], deriv: usize) -> Result<DVector<f64>, ModelError> {
        let trow = self.time.row(t, deriv)?;
        let mut out = DVector::zeros(self.p);
        let lead = if deriv == 0 { 1.0 } else { 0.0 };
        let mut k = 0;
        for j in 0..=trow.len() {
            let v = if j == 0 { lead } else { trow[j - 1] };
            if self.by_idx.is_empty() {
                out[k] = v;
                k += 1;
            } else {
                for &g in &self.by_idx {
                    out[k] = v * w[g];
                    k += 1;
                }
            }
        }
        for &c in &self.cov_idx {
            out[k] = if deriv == 0 { w[c] } else { 0.0 };
            k += 1;
        }
        Ok(out)
    }

    /// Random-effects design row `z(t)` or its time derivative.
    pub fn z_row(&self, t: f64, deriv: usize) -> Result<DVector<f64>, ModelError> {
        let mut out = DVector::zeros(self.q);
        let mut k = 0;
        if self.spec.random_design.intercept {
            out[0] = if deriv == 0 { 1.0 } else { 0.0 };
            k = 1;
        }
        if self.spec.random_design.time {
            for v in self.time.row(t, deriv)? {
                out[k] = v;
                k += 1;
            }
        }
        Ok(out)
    }

    /// Survival covariate vector (with the intercept column when present).
    pub fn w_surv(&self, w: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_gamma);
        let mut k = 0;
        if self.spec.survival_design.intercept {
            out[0] = 1.0;
            k = 1;
        }
        for &c in &self.surv_idx {
            out[k] = w[c];
            k += 1;
        }
        out
    }

    /// Row of the log-baseline-hazard spline design: `[1, B_2(t), ..., B_Q(t)]`.
    pub fn h0_row(&self, t: f64) -> Result<DVector<f64>, ModelError> {
        match &self.baseline {
            BaselineEval::Spline(b) => {
                let r = b.row(t, 0)?;
                let mut out = DVector::zeros(self.n_h0);
                out[0] = 1.0;
                for k in 1..self.n_h0 {
                    out[k] = r[k];
                }
                Ok(out)
            }
            BaselineEval::Weibull => Ok(DVector::zeros(0)),
        }
    }

    /// Rows `(x_c, z_c)` such that the association input `c` at time `t`
    /// equals `x_c . beta + z_c . b`. Empty for the random-effects structure.
    pub fn assoc_rows(
        &self,
        t: f64,
        w: &[f64],
    ) -> Result<Vec<(DVector<f64>, DVector<f64>)>, ModelError> {
        Ok(match self.spec.assoc {
            Association::Value => vec![(self.x_row(t, w, 0)?, self.z_row(t, 0)?)],
            Association::ValueSlope => vec![
                (self.x_row(t, w, 0)?, self.z_row(t, 0)?),
                (self.x_row(t, w, 1)?, self.z_row(t, 1)?),
            ],
            Association::Cumulative => vec![self.integrated_rows(t, w, |_| 1.0)?],
            Association::WeightedCumulative => {
                let wf = self.weight_fn;
                vec![self.integrated_rows(t, w, |lag| wf.eval(lag))?]
            }
            Association::RandomEffects => Vec::new(),
        })
    }

    fn integrated_rows<F: Fn(f64) -> f64>(
        &self,
        t: f64,
        w: &[f64],
        weight: F,
    ) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
        let mut xs = DVector::zeros(self.p);
        let mut zs = DVector::zeros(self.q);
        for (a, b) in self.panels(0.0, t) {
            let (nodes, wts) = GK15.scaled(a, b);
            for k in 0..N_NODES {
                let c = wts[k] * weight(t - nodes[k]);
                xs.axpy(c, &self.x_row(nodes[k], w, 0)?, 1.0);
                zs.axpy(c, &self.z_row(nodes[k], 0)?, 1.0);
            }
        }
        Ok((xs, zs))
    }

    /// `[a, b]` split at the internal knots of the time basis and of a
    /// spline baseline, where the integrands are only piecewise smooth.
    /// Empty when `b <= a`.
    pub fn panels(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        if !(b > a) {
            return Vec::new();
        }
        let mut cuts = vec![a];
        if let TimeEval::Spline(sb) = &self.time {
            cuts.extend(sb.knots().internal.iter().copied());
        }
        if let Some(k) = self.baseline_knots() {
            cuts.extend(k.internal.iter().copied());
        }
        cuts.retain(|&k| k >= a && k < b);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.push(b);
        cuts.windows(2).map(|p| (p[0], p[1])).collect()
    }

    /// Quadrature nodes and weights for `∫_a^b h(s) ds`: 15 Gauss-Kronrod
    /// nodes per panel. A panel starting at the origin under a Weibull
    /// baseline maps its nodes through `s = c v^3`, which absorbs the
    /// `s^(shape - 1)` endpoint behaviour.
    pub fn cum_nodes(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let mut nodes = Vec::new();
        let mut wts = Vec::new();
        for (lo, hi) in self.panels(a, b) {
            if lo == 0.0 && self.is_weibull() {
                let (v, vw) = GK15.scaled(0.0, 1.0);
                for k in 0..N_NODES {
                    nodes.push(hi * v[k].powi(3));
                    wts.push(vw[k] * 3.0 * hi * v[k] * v[k]);
                }
            } else {
                let (x, c) = GK15.scaled(lo, hi);
                nodes.extend_from_slice(&x);
                wts.extend_from_slice(&c);
            }
        }
        (nodes, wts)
    }

    pub fn grid(&self, times: &[f64], weights: &[f64], w: &[f64]) -> Result<TimeGrid, ModelError> {
        let n = times.len();
        let n_comp = match self.spec.assoc {
            Association::ValueSlope => 2,
            Association::RandomEffects => 0,
            _ => 1,
        };
        let mut xa = vec![DMatrix::zeros(n, self.p); n_comp];
        let mut za = vec![DMatrix::zeros(n, self.q); n_comp];
        let mut h0 = DMatrix::zeros(n, self.n_h0);
        let mut log_t = vec![0.0; n];
        for (k, &t) in times.iter().enumerate() {
            for (c, (xr, zr)) in self.assoc_rows(t, w)?.into_iter().enumerate() {
                xa[c].set_row(k, &xr.transpose());
                za[c].set_row(k, &zr.transpose());
            }
            if self.n_h0 > 0 {
                h0.set_row(k, &self.h0_row(t)?.transpose());
            }
            log_t[k] = t.ln();
        }
        Ok(TimeGrid {
            times: times.to_vec(),
            weights: weights.to_vec(),
            xa,
            za,
            h0,
            log_t,
        })
    }

    /// Grid of the cumulative-hazard nodes on `[a, b]`.
    pub fn quad_grid(&self, a: f64, b: f64, w: &[f64]) -> Result<TimeGrid, ModelError> {
        let (nodes, wts) = self.cum_nodes(a, b);
        self.grid(&nodes, &wts, w)
    }

    pub fn subject_cache(&self, s: &Subject) -> Result<SubjectCache, ModelError> {
        self.subject_cache_until(s, s.event_time, s.event)
    }

    /// Cache for a subject observed up to `t` (measurements at or before `t`),
    /// with the event indicator applying at `t`.
    pub fn subject_cache_until(
        &self,
        s: &Subject,
        t: f64,
        event: bool,
    ) -> Result<SubjectCache, ModelError> {
        let idx: Vec<usize> = (0..s.times.len()).filter(|&l| s.times[l] <= t).collect();
        let n = idx.len();
        let mut x = DMatrix::zeros(n, self.p);
        let mut z = DMatrix::zeros(n, self.q);
        let mut y = DVector::zeros(n);
        for (r, &l) in idx.iter().enumerate() {
            x.set_row(r, &self.x_row(s.times[l], &s.w, 0)?.transpose());
            z.set_row(r, &self.z_row(s.times[l], 0)?.transpose());
            y[r] = s.y[l];
        }
        let ztz = z.transpose() * &z;
        Ok(SubjectCache {
            id: s.id.clone(),
            x,
            z,
            ztz,
            y,
            w_surv: self.w_surv(&s.w),
            w: s.w.clone(),
            event,
            end: t,
            at_end: self.grid(&[t], &[1.0], &s.w)?,
            cum: self.quad_grid(0.0, t, &s.w)?,
        })
    }
}

/// Design rows at a set of time points with quadrature weights.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    /// Per association component: rows `x_c(t_k)` and `z_c(t_k)`.
    pub xa: Vec<DMatrix<f64>>,
    pub za: Vec<DMatrix<f64>>,
    /// Log-baseline spline design (spline baseline only).
    pub h0: DMatrix<f64>,
    pub log_t: Vec<f64>,
}

/// Per-subject designs for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct SubjectCache {
    pub id: String,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub ztz: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w_surv: DVector<f64>,
    pub w: Vec<f64>,
    pub event: bool,
    pub end: f64,
    pub at_end: TimeGrid,
    pub cum: TimeGrid,
}

impl SubjectCache {
    pub fn n_meas(&self) -> usize {
        self.y.len()
    }
}
