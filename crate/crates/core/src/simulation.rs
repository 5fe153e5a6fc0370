//! Simulation of joint longitudinal and survival data under four
//! association scenarios, gold-standard conditional survival, and the
//! held-out-subject study comparing the true model with model averaging.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::KnotVector;
use crate::bma::{self, combine, FittedModel, ModelEvidence};
use crate::datamodel::{
    Association, Baseline, Dataset, FixedDesign, JointModelSpec, PriorSpec, RandomDesign, Subject,
    SurvivalDesign, TimeBasis, WeightFn,
};
use crate::likelihood::ThetaFull;
use crate::longitudinal::{self, MixedParams};
use crate::mcmc::{self, ChainConfig, McmcError};
use crate::model::{Model, ModelError};
use crate::prediction::{self, PredictConfig, PredictError, TargetSubject};
use crate::survival::{self, SurvParams};

const PINNED: &str = include_str!("../config/scenarios.json");

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario configuration: {0}")]
    Config(String),
    #[error("censoring calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Bma(#[from] bma::BmaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
    III,
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    /// Association structure of the data-generating model.
    pub fn assoc(self) -> Association {
        match self {
            Scenario::I => Association::Value,
            Scenario::II => Association::ValueSlope,
            Scenario::III => Association::Cumulative,
            Scenario::IV => Association::RandomEffects,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
            Scenario::IV => "IV",
        }
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            "IV" | "4" => Ok(Scenario::IV),
            other => Err(SimError::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct PinnedScenario {
    gamma: Vec<f64>,
    alpha: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct Pinned {
    n_subjects: usize,
    followup: f64,
    n_meas: usize,
    censoring_target: f64,
    n_datasets: usize,
    knots: KnotVector,
    beta: Vec<f64>,
    sigma2: f64,
    d_diag: Vec<f64>,
    weibull_shape: f64,
    scenarios: std::collections::HashMap<String, PinnedScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub followup: f64,
    pub n_meas: usize,
    pub weibull_shape: f64,
    pub true_params: ThetaFull,
    pub censoring_target: f64,
    pub n_datasets: usize,
    pub seed: u64,
    pub knots: KnotVector,
    /// Upper limit of the uniform censoring distribution; calibrated when
    /// absent.
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "pilot")]
    pub pilot_size: usize,
}

fn pilot() -> usize {
    10_000
}

impl ScenarioConfig {
    /// The pinned default configuration of a scenario.
    pub fn pinned(scenario: Scenario, seed: u64) -> Self {
        let p: Pinned = serde_json::from_str(PINNED).expect("pinned scenario file parses");
        let s = &p.scenarios[scenario.label()];
        ScenarioConfig {
            scenario,
            n_subjects: p.n_subjects,
            followup: p.followup,
            n_meas: p.n_meas,
            weibull_shape: p.weibull_shape,
            true_params: ThetaFull {
                mixed: MixedParams {
                    beta: DVector::from_vec(p.beta.clone()),
                    d: DMatrix::from_diagonal(&DVector::from_vec(p.d_diag.clone())),
                    sigma2: p.sigma2,
                },
                surv: SurvParams {
                    gamma: DVector::from_vec(s.gamma.clone()),
                    gamma_h0: DVector::zeros(0),
                    alpha: DVector::from_vec(s.alpha.clone()),
                    weibull_shape: Some(p.weibull_shape),
                },
            },
            censoring_target: p.censoring_target,
            n_datasets: p.n_datasets,
            seed,
            knots: p.knots,
            t_max: None,
            pilot_size: pilot(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.censoring_target > 0.0 && self.censoring_target < 1.0) {
            return Err(SimError::Config("censoring target must lie in (0, 1)".into()));
        }
        if self.n_meas < 2 {
            return Err(SimError::Config("at least two planned measurements are needed".into()));
        }
        if self.n_subjects == 0 || !(self.followup > 0.0) || !(self.weibull_shape > 0.0) {
            return Err(SimError::Config("subjects, follow-up and shape must be positive".into()));
        }
        Ok(())
    }

    /// Parameters with the configured Weibull shape.
    pub fn theta(&self) -> ThetaFull {
        let mut th = self.true_params.clone();
        th.surv.weibull_shape = Some(self.weibull_shape);
        th
    }

    /// Joint model with the simulation design and association `assoc`.
    pub fn model_spec(&self, assoc: Association) -> JointModelSpec {
        JointModelSpec {
            fixed_design: FixedDesign {
                time: TimeBasis::NaturalCubic {
                    knots: self.knots.clone(),
                },
                by: vec!["Trt0".into(), "Trt1".into()],
                covariates: vec![],
            },
            random_design: RandomDesign {
                intercept: true,
                time: true,
            },
            survival_design: SurvivalDesign {
                intercept: true,
                covariates: vec!["Trt1".into()],
            },
            assoc,
            baseline: Baseline::Weibull,
            priors: PriorSpec::default(),
            weight_fn: (assoc == Association::WeightedCumulative).then(WeightFn::default),
            fixed_params: Default::default(),
        }
    }

    pub fn true_model(&self) -> Result<Model, SimError> {
        Ok(Model::new(&self.model_spec(self.scenario.assoc()), &covariate_names())?)
    }
}

pub fn covariate_names() -> Vec<String> {
    vec!["Trt0".into(), "Trt1".into()]
}

/// A simulated dataset with the hidden truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub b: Vec<DVector<f64>>,
    /// True event times, infinite beyond follow-up.
    pub event_times: Vec<f64>,
    pub uniforms: Vec<f64>,
    pub t_max: f64,
}

impl SimulatedData {
    pub fn censoring_fraction(&self) -> f64 {
        let n = self.dataset.len() as f64;
        self.dataset.subjects.iter().filter(|s| !s.event).count() as f64 / n
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Solves `H(t) = -log u` on `[0, upper]` by a safeguarded secant
/// (Illinois) iteration; `None` when the event falls beyond `upper`.
pub fn solve_event_time<F: FnMut(f64) -> Result<f64, ModelError>>(
    mut cum_hazard: F,
    u: f64,
    upper: f64,
) -> Result<Option<f64>, ModelError> {
    let target = -u.ln();
    let mut g = |t: f64| -> Result<f64, ModelError> {
        match cum_hazard(t) {
            Ok(h) => Ok(h - target),
            Err(ModelError::Overflow { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };
    let (mut a, mut b) = (0.0, upper);
    let (mut fa, mut fb) = (-target, g(upper)?);
    if fb < 0.0 {
        return Ok(None);
    }
    let tol = 1e-11 * (1.0 + target);
    let mut side = 0;
    for _ in 0..200 {
        let mut c = if fb.is_finite() { b - fb * (b - a) / (fb - fa) } else { 0.5 * (a + b) };
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let fc = g(c)?;
        if fc.abs() <= tol || (b - a) < 1e-14 * upper {
            return Ok(Some(c));
        }
        if fc > 0.0 {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 && fb.is_finite() {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

fn group(i: usize) -> Vec<f64> {
    if i.is_multiple_of(2) {
        vec![1.0, 0.0]
    } else {
        vec![0.0, 1.0]
    }
}

/// Random effects, uniforms and true event times of `n` subjects.
fn draw_event_times(
    cfg: &ScenarioConfig,
    model: &Model,
    theta: &ThetaFull,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DVector<f64>>, Vec<f64>, Vec<f64>), SimError> {
    let q = model.q;
    let l = theta
        .mixed
        .d
        .clone()
        .cholesky()
        .ok_or_else(|| SimError::Config("D is not positive definite".into()))?
        .l();
    let mut bs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        bs.push(&l * z);
        let u: f64 = rng.gen();
        us.push(u.max(f64::MIN_POSITIVE));
    }
    let times: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64, ModelError> {
            let w = group(i);
            let t = solve_event_time(
                |t| survival::cumulative_hazard(t, &w, &bs[i], &theta.mixed, &theta.surv, model),
                us[i],
                cfg.followup,
            )?;
            Ok(t.unwrap_or(f64::INFINITY))
        })
        .collect::<Result<_, _>>()?;
    Ok((bs, us, times))
}

/// `t_max` whose uniform censoring gives the target expected censoring
/// fraction for the given true event times (infinite beyond follow-up).
pub fn calibrate_from_times(times: &[f64], followup: f64, target: f64) -> Result<f64, SimError> {
    let n = times.len() as f64;
    let frac = |t_max: f64| {
        1.0 - times
            .iter()
            .filter(|&&t| t <= followup)
            .map(|&t| (1.0 - t / t_max).max(0.0))
            .sum::<f64>()
            / n
    };
    let limit = 1.0 - times.iter().filter(|&&t| t <= followup).count() as f64 / n;
    if target <= limit + 1e-9 {
        return Err(SimError::Calibration(format!(
            "target {target} is below the censoring {limit:.4} that remains without random censoring"
        )));
    }
    let (mut lo, mut hi) = ((1e-9 * followup).ln(), (1e9 * followup).ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Calibrates `t_max` on a pilot sample of true event times.
pub fn calibrate_censoring(cfg: &ScenarioConfig) -> Result<f64, SimError> {
    cfg.validate()?;
    let model = cfg.true_model()?;
    let mut rng = stream(cfg.seed, u64::MAX);
    let n = cfg.pilot_size.max(cfg.n_subjects);
    let (_, _, times) = draw_event_times(cfg, &model, &cfg.theta(), n, &mut rng)?;
    calibrate_from_times(&times, cfg.followup, cfg.censoring_target)
}

/// Simulates one dataset from the stream `stream_id` of the seed.
pub fn simulate_dataset(cfg: &ScenarioConfig, t_max: f64, stream_id: u64) -> Result<SimulatedData, SimError> {
    cfg.validate()?;
    let model = cfg.true_model()?;
    let theta = cfg.theta();
    let mut rng = stream(cfg.seed, stream_id);
    let n = cfg.n_subjects;
    let (bs, us, times) = draw_event_times(cfg, &model, &theta, n, &mut rng)?;
    let sd = theta.mixed.sigma2.sqrt();
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let c: f64 = rng.gen::<f64>() * t_max;
        let stop = c.min(cfg.followup);
        let (obs, event) = if times[i] <= stop { (times[i], true) } else { (stop, false) };
        let mut planned: Vec<f64> = (1..cfg.n_meas).map(|_| rng.gen::<f64>() * cfg.followup).collect();
        planned.sort_by(|a, b| a.total_cmp(b));
        let mut mt = vec![0.0];
        mt.extend(planned.into_iter().filter(|&s| s <= obs));
        let w = group(i);
        let mut y = Vec::with_capacity(mt.len());
        for &s in &mt {
            let e: f64 = rng.sample(StandardNormal);
            y.push(longitudinal::m(s, &w, &bs[i], &theta.mixed, &model)? + sd * e);
        }
        subjects.push(Subject {
            id: (i + 1).to_string(),
            w,
            times: mt,
            y,
            event_time: obs,
            event,
        });
    }
    Ok(SimulatedData {
        dataset: Dataset::new(subjects, covariate_names()),
        b: bs,
        event_times: times,
        uniforms: us,
        t_max,
    })
}

/// `S(u | b) / S(t | b)` at the true parameters, integrating the hazard over
/// `[t, u]` in panels split at the internal knots.
pub fn gold_standard(
    model: &Model,
    w: &[f64],
    b: &DVector<f64>,
    theta: &ThetaFull,
    u: f64,
    t: f64,
) -> Result<f64, ModelError> {
    if u <= t {
        return Ok(1.0);
    }
    let (nodes, wts) = model.cum_nodes(t, u);
    let mut total = 0.0;
    for (s, c) in nodes.into_iter().zip(wts) {
        total += c * survival::hazard(s, w, b, &theta.mixed, &theta.surv, model)?;
    }
    Ok((-total).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TrueModel,
    BmaWithTrue,
    BmaWithoutTrue,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::TrueModel => "true_model",
            Method::BmaWithTrue => "bma_with_true",
            Method::BmaWithoutTrue => "bma_without_true",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub replicate: usize,
    pub subject: String,
    pub method: Method,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateInfo {
    pub replicate: usize,
    pub stream: u64,
    pub regenerated: usize,
    pub censoring_fraction: f64,
    pub weights: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub n_holdout: usize,
    /// Candidate association structures, fitted with the scenario design.
    pub models: Vec<Association>,
    pub predict: PredictConfig,
    pub max_regenerate: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            n_holdout: 10,
            models: Association::ALL.to_vec(),
            predict: PredictConfig::default(),
            max_regenerate: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub t_max: f64,
    pub records: Vec<EvalRecord>,
    pub replicates: Vec<ReplicateInfo>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Equally spaced horizons after the last measurement up to follow-up end.
pub fn study_horizons(last: f64, followup: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| last + (followup - last) * k as f64 / n as f64).collect()
}

/// One replicate of the held-out-subject study.
pub fn run_replicate(
    cfg: &ScenarioConfig,
    fit_cfg: &ChainConfig,
    opts: &StudyOptions,
    t_max: f64,
    replicate: usize,
) -> Result<(Vec<EvalRecord>, ReplicateInfo), SimError> {
    let mut regenerated = 0;
    let (sim, stream_id) = loop {
        let id = ((replicate as u64) << 16) | regenerated as u64;
        let sim = simulate_dataset(cfg, t_max, id)?;
        let censored = sim.dataset.subjects.iter().filter(|s| !s.event).count();
        if censored >= opts.n_holdout {
            break (sim, id);
        }
        regenerated += 1;
        if regenerated > opts.max_regenerate {
            return Err(SimError::Config(format!(
                "replicate {replicate}: fewer than {} censored subjects after {regenerated} attempts",
                opts.n_holdout
            )));
        }
    };
    let mut rng = stream(cfg.seed ^ 0x05ee_d0f4_01d0_u64, stream_id);
    let censored: Vec<usize> = (0..sim.dataset.len()).filter(|&i| !sim.dataset.subjects[i].event).collect();
    let mut held: Vec<usize> = index::sample(&mut rng, censored.len(), opts.n_holdout)
        .into_iter()
        .map(|k| censored[k])
        .collect();
    held.sort_unstable();
    let training = Dataset::new(
        sim.dataset
            .subjects
            .iter()
            .enumerate()
            .filter(|(i, _)| !held.contains(i))
            .map(|(_, s)| s.clone())
            .collect(),
        covariate_names(),
    );
    let fingerprint = training.fingerprint();
    let training_ids: Vec<String> = training.subjects.iter().map(|s| s.id.clone()).collect();
    let k_models = opts.models.len();
    let fitted: Vec<FittedModel> = opts
        .models
        .par_iter()
        .enumerate()
        .map(|(k, &assoc)| -> Result<FittedModel, SimError> {
            let spec = cfg.model_spec(assoc);
            let model = Model::new(&spec, &training.covariate_names)?;
            let caches = bma::subject_caches(&model, &training)?;
            let chain = ChainConfig {
                seed: fit_cfg
                    .seed
                    .wrapping_add((replicate * k_models + k) as u64 * 0x9e37_79b9),
                ..fit_cfg.clone()
            };
            let draws = mcmc::fit_model(&model, &caches, &chain)?;
            let lmd = bma::log_marginal_dataset(&model, &caches, &draws.theta_draws, &draws.draw_logpost)?;
            Ok(FittedModel {
                model,
                draws: draws.theta_draws,
                draw_logpost: draws.draw_logpost,
                fingerprint: fingerprint.clone(),
                training_ids: training_ids.clone(),
                log_marg_data: Some(lmd),
            })
        })
        .collect::<Result<_, _>>()?;
    let true_k = opts.models.iter().position(|&a| a == cfg.scenario.assoc());
    let truth_model = cfg.true_model()?;
    let theta = cfg.theta();
    let mut records = Vec::new();
    let mut weight_log = Vec::new();
    for &i in &held {
        let s = &sim.dataset.subjects[i];
        let last = *s.times.last().expect("baseline measurement");
        let target = TargetSubject::from_subject(s, last)?;
        let horizons = study_horizons(last, cfg.followup, 10);
        let gold: Vec<f64> = horizons
            .iter()
            .map(|&u| gold_standard(&truth_model, &s.w, &sim.b[i], &theta, u, last))
            .collect::<Result<_, _>>()?;
        let pcfg = PredictConfig {
            seed: opts.predict.seed ^ ((replicate as u64) << 20) ^ i as u64,
            ..opts.predict.clone()
        };
        let preds: Vec<_> = fitted
            .iter()
            .map(|m| prediction::predict_survival(&target, &m.draws, &m.model, &horizons, &pcfg))
            .collect::<Result<_, _>>()?;
        let ev: Vec<ModelEvidence> = bma::evidences(&fitted, &target)?;
        let w_all = bma::weights(&ev, None)?;
        weight_log.push((s.id.clone(), w_all.clone()));
        let all_refs: Vec<_> = preds.iter().collect();
        let with = combine(&all_refs, &w_all);
        records.push(EvalRecord {
            replicate,
            subject: s.id.clone(),
            method: Method::BmaWithTrue,
            rmse: rmse(&with.point, &gold),
        });
        if let Some(tk) = true_k {
            records.push(EvalRecord {
                replicate,
                subject: s.id.clone(),
                method: Method::TrueModel,
                rmse: rmse(&preds[tk].point, &gold),
            });
            if k_models > 1 {
                let rest: Vec<usize> = (0..k_models).filter(|&k| k != tk).collect();
                let ev_rest: Vec<ModelEvidence> = rest.iter().map(|&k| ev[k].clone()).collect();
                let w_rest = bma::weights(&ev_rest, None)?;
                let refs: Vec<_> = rest.iter().map(|&k| &preds[k]).collect();
                let without = combine(&refs, &w_rest);
                records.push(EvalRecord {
                    replicate,
                    subject: s.id.clone(),
                    method: Method::BmaWithoutTrue,
                    rmse: rmse(&without.point, &gold),
                });
            }
        }
    }
    let info = ReplicateInfo {
        replicate,
        stream: stream_id,
        regenerated,
        censoring_fraction: sim.censoring_fraction(),
        weights: weight_log,
    };
    Ok((records, info))
}

/// The held-out-subject study over `cfg.n_datasets` replicates.
pub fn run_study(cfg: &ScenarioConfig, fit_cfg: &ChainConfig, opts: &StudyOptions) -> Result<StudyResult, SimError> {
    cfg.validate()?;
    fit_cfg.validate()?;
    let t_max = match cfg.t_max {
        Some(t) => t,
        None => calibrate_censoring(cfg)?,
    };
    let out: Vec<(Vec<EvalRecord>, ReplicateInfo)> = (0..cfg.n_datasets)
        .into_par_iter()
        .map(|r| run_replicate(cfg, fit_cfg, opts, t_max, r))
        .collect::<Result<_, _>>()?;
    let mut records = Vec::new();
    let mut replicates = Vec::new();
    for (r, info) in out {
        records.extend(r);
        replicates.push(info);
    }
    Ok(StudyResult {
        t_max,
        records,
        replicates,
    })
}
