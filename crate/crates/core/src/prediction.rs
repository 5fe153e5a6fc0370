//! Dynamic individualized predictions for a subject known to be event-free
//! at the origin `t`: conditional survival `Pr(T* >= u | T* > t, Y(t))` and
//! the expected biomarker at `u`.
//!
//! For each posterior draw of `theta`, the random effects are sampled from
//! `p(b | T* > t, Y(t), theta)` by an independence Metropolis chain whose
//! proposal is the Laplace approximation, then the survival ratio (or the
//! trajectory) is evaluated. Bands are pointwise quantiles over draws.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::quantile;
use crate::datamodel::Subject;
use crate::likelihood::{ConditionalB, ThetaFull};
use crate::model::{Model, ModelError, TimeGrid};
use crate::survival::{weighted_exp_sum, GridPredictor};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid prediction input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("numeric failure at posterior draw {draw}: {message}")]
    Numeric { draw: usize, message: String },
}

/// A subject's history up to the prediction origin `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSubject {
    pub id: String,
    pub w: Vec<f64>,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
}

impl TargetSubject {
    pub fn new(id: &str, w: Vec<f64>, times: Vec<f64>, y: Vec<f64>, t: f64) -> Result<Self, PredictError> {
        if times.is_empty() || times.len() != y.len() {
            return Err(PredictError::Input(format!(
                "subject {id} needs at least one measurement with matching values"
            )));
        }
        if times.windows(2).any(|p| p[1] < p[0]) {
            return Err(PredictError::Input(format!("measurement times of {id} are not sorted")));
        }
        if times.iter().any(|&s| s > t || s < 0.0) || !t.is_finite() {
            return Err(PredictError::Input(format!(
                "measurements of {id} must lie in [0, {t}]"
            )));
        }
        Ok(TargetSubject {
            id: id.to_string(),
            w,
            times,
            y,
            t,
        })
    }

    /// History of `s` up to `t`.
    pub fn from_subject(s: &Subject, t: f64) -> Result<Self, PredictError> {
        let keep: Vec<usize> = (0..s.times.len()).filter(|&l| s.times[l] <= t).collect();
        TargetSubject::new(
            &s.id,
            s.w.clone(),
            keep.iter().map(|&l| s.times[l]).collect(),
            keep.iter().map(|&l| s.y[l]).collect(),
            t,
        )
    }

    /// Appends a measurement taken at `s > t`, which becomes the new origin.
    pub fn update(&self, s: f64, y: f64) -> Result<Self, PredictError> {
        if !(s > self.t) {
            return Err(PredictError::Input(format!(
                "new measurement at {s} does not follow the origin {}",
                self.t
            )));
        }
        let mut next = self.clone();
        next.times.push(s);
        next.y.push(y);
        next.t = s;
        Ok(next)
    }

    /// Event-free subject censored at `t`.
    pub fn to_subject(&self) -> Subject {
        Subject {
            id: self.id.clone(),
            w: self.w.clone(),
            times: self.times.clone(),
            y: self.y.clone(),
            event_time: self.t,
            event: false,
        }
    }

    pub fn last_value(&self) -> f64 {
        *self.y.last().expect("nonempty by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Survival,
    Longitudinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Number of posterior draws used; all retained draws up to 2000 when
    /// absent.
    pub n_mc: Option<usize>,
    pub mh_steps: usize,
    pub seed: u64,
    /// Add measurement error to longitudinal predictions.
    pub add_noise: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            n_mc: None,
            mh_steps: 25,
            seed: 0,
            add_noise: false,
        }
    }
}

pub const DEFAULT_MAX_MC: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicPrediction {
    pub origin: f64,
    pub horizons: Vec<f64>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub kind: PredictionKind,
    pub n_mc: usize,
    /// Per-draw values (draws by horizons).
    #[serde(skip)]
    pub samples: DMatrix<f64>,
}

impl DynamicPrediction {
    /// Mean and pointwise 2.5%/97.5% quantiles of per-draw values.
    pub fn from_samples(origin: f64, horizons: &[f64], kind: PredictionKind, samples: DMatrix<f64>) -> Self {
        let (n, h) = samples.shape();
        let mut point = vec![0.0; h];
        let mut lower = vec![0.0; h];
        let mut upper = vec![0.0; h];
        for k in 0..h {
            let mut col: Vec<f64> = samples.column(k).iter().copied().collect();
            point[k] = col.iter().sum::<f64>() / n as f64;
            col.sort_by(|a, b| a.total_cmp(b));
            lower[k] = quantile(&col, 0.025).min(point[k]);
            upper[k] = quantile(&col, 0.975).max(point[k]);
        }
        DynamicPrediction {
            origin,
            horizons: horizons.to_vec(),
            point,
            lower,
            upper,
            kind,
            n_mc: n,
            samples,
        }
    }
}

/// Equally spaced indices of `n` out of `total` draws.
pub fn thin_indices(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total);
    (0..n).map(|k| k * total / n).collect()
}

fn check_horizons(t: f64, horizons: &[f64]) -> Result<(), PredictError> {
    if horizons.is_empty() {
        return Err(PredictError::Input("no horizons given".into()));
    }
    if horizons[0] <= t || horizons.windows(2).any(|p| p[1] <= p[0]) {
        return Err(PredictError::Input(format!(
            "horizons must be strictly increasing and exceed the origin {t}"
        )));
    }
    Ok(())
}

/// Random-effects draws for one `theta`: the final state of the
/// independence chain and the mean over its states.
fn sample_b<R: Rng>(
    cond: &ConditionalB,
    q: usize,
    steps: usize,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
    let lap = cond.laplace(&DVector::zeros(q))?;
    let l = lap.cov_chol();
    let li = l.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(q, q));
    let log_q = |b: &DVector<f64>| -0.5 * (&li * (b - &lap.mode)).norm_squared();
    let mut cur = lap.mode.clone();
    let mut cur_w = cond.logpost(&cur)? - log_q(&cur);
    let mut sum = DVector::zeros(q);
    for _ in 0..steps {
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cand = &lap.mode + &l * z;
        if let Ok(lp) = cond.logpost(&cand) {
            let w = lp - log_q(&cand);
            let u: f64 = rng.gen();
            if u.ln() < w - cur_w {
                cur = cand;
                cur_w = w;
            }
        }
        sum += &cur;
    }
    let mean = if steps > 0 { sum / steps as f64 } else { cur.clone() };
    Ok((cur, mean))
}

fn draw_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k as u64);
    r
}

fn selected<'a>(draws: &'a [ThetaFull], cfg: &PredictConfig) -> Result<Vec<&'a ThetaFull>, PredictError> {
    if draws.is_empty() {
        return Err(PredictError::Input("no posterior draws".into()));
    }
    let n = cfg.n_mc.unwrap_or(DEFAULT_MAX_MC).max(1);
    Ok(thin_indices(draws.len(), n).into_iter().map(|i| &draws[i]).collect())
}

/// Grids of the consecutive intervals `[t, u1], [u1, u2], ...`.
fn horizon_grids(model: &Model, target: &TargetSubject, horizons: &[f64]) -> Result<Vec<TimeGrid>, ModelError> {
    let mut grids = Vec::with_capacity(horizons.len());
    let mut a = target.t;
    for &u in horizons {
        grids.push(model.quad_grid(a, u, &target.w)?);
        a = u;
    }
    Ok(grids)
}

/// Conditional survival ratios `S(u_k | b) / S(t | b)` for one draw.
pub fn survival_ratios(
    model: &Model,
    grids: &[TimeGrid],
    w_surv: &DVector<f64>,
    theta: &ThetaFull,
    b: &DVector<f64>,
) -> Result<Vec<f64>, ModelError> {
    let mut cum = 0.0;
    let mut out = Vec::with_capacity(grids.len());
    for g in grids {
        let pred = GridPredictor::new(model, g, w_surv, &theta.mixed, &theta.surv);
        cum += weighted_exp_sum(&pred.log_hazard(b), g)?;
        out.push((-cum).exp());
    }
    Ok(out)
}

pub fn predict_survival(
    target: &TargetSubject,
    draws: &[ThetaFull],
    model: &Model,
    horizons: &[f64],
    cfg: &PredictConfig,
) -> Result<DynamicPrediction, PredictError> {
    check_horizons(target.t, horizons)?;
    let chosen = selected(draws, cfg)?;
    let cache = model.subject_cache_until(&target.to_subject(), target.t, false)?;
    let grids = horizon_grids(model, target, horizons)?;
    let rows: Vec<Vec<f64>> = chosen
        .par_iter()
        .enumerate()
        .map(|(k, th)| -> Result<Vec<f64>, PredictError> {
            let numeric = |e: ModelError| PredictError::Numeric {
                draw: k,
                message: e.to_string(),
            };
            let mut rng = draw_rng(cfg.seed, k);
            let cond = ConditionalB::new(model, &cache, th, 1.0).map_err(numeric)?;
            let (b, _) = sample_b(&cond, model.q, cfg.mh_steps, &mut rng).map_err(numeric)?;
            survival_ratios(model, &grids, &cache.w_surv, th, &b).map_err(numeric)
        })
        .collect::<Result<_, _>>()?;
    let samples = DMatrix::from_fn(rows.len(), horizons.len(), |i, j| rows[i][j]);
    Ok(DynamicPrediction::from_samples(target.t, horizons, PredictionKind::Survival, samples))
}

pub fn predict_longitudinal(
    target: &TargetSubject,
    draws: &[ThetaFull],
    model: &Model,
    horizons: &[f64],
    cfg: &PredictConfig,
) -> Result<DynamicPrediction, PredictError> {
    check_horizons(target.t, horizons)?;
    let chosen = selected(draws, cfg)?;
    let cache = model.subject_cache_until(&target.to_subject(), target.t, false)?;
    let rows_x: Vec<DVector<f64>> = horizons
        .iter()
        .map(|&u| model.x_row(u, &target.w, 0))
        .collect::<Result<_, _>>()?;
    let rows_z: Vec<DVector<f64>> = horizons
        .iter()
        .map(|&u| model.z_row(u, 0))
        .collect::<Result<_, _>>()?;
    let rows: Vec<Vec<f64>> = chosen
        .par_iter()
        .enumerate()
        .map(|(k, th)| -> Result<Vec<f64>, PredictError> {
            let numeric = |e: ModelError| PredictError::Numeric {
                draw: k,
                message: e.to_string(),
            };
            let mut rng = draw_rng(cfg.seed, k);
            let cond = ConditionalB::new(model, &cache, th, 1.0).map_err(numeric)?;
            let (_, bbar) = sample_b(&cond, model.q, cfg.mh_steps, &mut rng).map_err(numeric)?;
            let sd = th.mixed.sigma2.sqrt();
            Ok(rows_x
                .iter()
                .zip(&rows_z)
                .map(|(x, z)| {
                    let mean = x.dot(&th.mixed.beta) + z.dot(&bbar);
                    if cfg.add_noise {
                        mean + sd * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        mean
                    }
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let samples = DMatrix::from_fn(rows.len(), horizons.len(), |i, j| rows[i][j]);
    Ok(DynamicPrediction::from_samples(target.t, horizons, PredictionKind::Longitudinal, samples))
}
