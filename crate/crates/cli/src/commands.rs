use std::path::{Path, PathBuf};

use jmbma::bma::{self, weight_report_csv, FittedModel, WeightRow};
use jmbma::datamodel::{load_dataset, validate, write_dataset_csv, IngestConfig, JointModelSpec, Subject};
use jmbma::mcmc::{self, ChainConfig};
use jmbma::model::Model;
use jmbma::prediction::{self, DynamicPrediction, PredictConfig, TargetSubject};
use jmbma::simulation::{self, Scenario, ScenarioConfig, StudyOptions};
use serde_json::json;

use crate::artifacts::{
    load_fit, load_targets, make_dir, num, prediction_csv, read_json, sanitize, summary_csv, write_draws,
    write_json, write_text, FitRecord, ManifestBuilder,
};
use crate::{BmaArgs, CliError, FitArgs, Kind, PredictArgs, SimulateArgs};

const DEFAULT_SIM_SEED: u64 = 20_240_601;

pub fn fit(a: &FitArgs, seed: Option<u64>, threads: usize) -> Result<(), CliError> {
    let spec: JointModelSpec = read_json(&a.model)?;
    let ingest: IngestConfig = match &a.ingest {
        Some(p) => read_json(p)?,
        None => IngestConfig::default(),
    };
    let mut chain = match &a.chain {
        Some(p) => read_json(p)?,
        None => ChainConfig::new(20_000, 5_000, 1, 0),
    };
    if let Some(s) = seed {
        chain.seed = s;
    }
    chain.validate()?;
    let manifest = ManifestBuilder::start(
        "fit",
        json!({"spec": spec, "chain": chain, "ingest": ingest,
               "data_long": a.data_long, "data_surv": a.data_surv, "evidence": !a.no_evidence}),
        Some(chain.seed),
        threads,
    );
    let ds = load_dataset(&a.data_long, &a.data_surv, &ingest)?;
    let report = validate(&ds);
    if !report.is_valid() {
        return Err(CliError::User(format!("invalid dataset: {}", report.violations.join("; "))));
    }
    let model = Model::new(&spec, &ds.covariate_names)?;
    let caches = bma::subject_caches(&model, &ds)?;
    let draws = mcmc::fit_model(&model, &caches, &chain)?;
    let log_marg_data = if a.no_evidence {
        None
    } else {
        Some(bma::log_marginal_dataset(&model, &caches, &draws.theta_draws, &draws.draw_logpost)?)
    };
    make_dir(&a.out)?;
    let draws_path = a.out.join("draws.csv");
    write_draws(&draws_path, &model, &draws.theta_draws, &draws.draw_logpost, chain.n_burnin, chain.thin)?;
    let summary_path = a.out.join("summary.csv");
    write_text(&summary_path, &summary_csv(&mcmc::summarize(&draws, &model)))?;
    let re_path = a.out.join("random_effects.csv");
    let mut re = String::from("id");
    for j in 0..model.q {
        re.push_str(&format!(",b{j}"));
    }
    re.push('\n');
    for (id, m) in draws.subject_ids.iter().zip(draws.b_mean()) {
        re.push_str(id);
        for v in m.iter() {
            re.push(',');
            re.push_str(&num(*v));
        }
        re.push('\n');
    }
    write_text(&re_path, &re)?;
    let record = FitRecord {
        spec,
        chain: chain.clone(),
        seed: chain.seed,
        ingest,
        fingerprint: ds.fingerprint(),
        covariate_names: ds.covariate_names.clone(),
        training_ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
        data_long: a.data_long.clone(),
        data_surv: a.data_surv.clone(),
        log_marg_data,
        accept_rates: draws.accept_rates.clone(),
    };
    let fit_path = a.out.join("fit.json");
    write_json(&fit_path, &record)?;
    manifest.finish(&a.out, &[draws_path, summary_path, re_path, fit_path])
}

/// Histories truncated after each measurement, in time order.
fn origins(s: &Subject) -> Result<Vec<TargetSubject>, CliError> {
    (1..=s.times.len())
        .map(|k| {
            TargetSubject::new(&s.id, s.w.clone(), s.times[..k].to_vec(), s.y[..k].to_vec(), s.times[k - 1])
                .map_err(CliError::from)
        })
        .collect()
}

fn check_horizons(s: &Subject, horizons: &[f64]) -> Result<(), CliError> {
    let last = s.times.last().copied().unwrap_or(0.0);
    if let Some(h) = horizons.iter().find(|&&h| !(h > last)) {
        return Err(CliError::User(format!(
            "horizon {h} is not after the prediction origin {last} of subject {}",
            s.id
        )));
    }
    if horizons.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CliError::User("horizons must be strictly increasing".into()));
    }
    Ok(())
}

fn origin_seed(base: u64, subject: usize, origin: usize) -> u64 {
    base ^ ((subject as u64) << 32) ^ origin as u64
}

fn write_prediction(dir: &Path, stem: &str, p: &DynamicPrediction, outputs: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&csv, &prediction_csv(p))?;
    let js = dir.join(format!("{stem}.json"));
    write_json(&js, p)?;
    outputs.push(csv);
    outputs.push(js);
    Ok(())
}

pub fn predict(a: &PredictArgs, seed: Option<u64>, threads: usize) -> Result<(), CliError> {
    let (rec, fitted) = load_fit(&a.fit_dir)?;
    let targets = load_targets(&a.target, a.data_surv.as_deref(), &rec.ingest, &rec.covariate_names)?;
    for s in &targets {
        check_horizons(s, &a.horizons)?;
    }
    let base = seed.unwrap_or(rec.seed);
    let manifest = ManifestBuilder::start(
        "predict",
        json!({"fit": a.fit_dir, "fingerprint": rec.fingerprint, "target": a.target, "data_surv": a.data_surv,
               "horizons": a.horizons, "kind": format!("{:?}", a.kind).to_lowercase(), "n_mc": a.n_mc}),
        Some(base),
        threads,
    );
    make_dir(&a.out)?;
    let mut outputs = Vec::new();
    for (i, s) in targets.iter().enumerate() {
        for (k, t) in origins(s)?.iter().enumerate() {
            let cfg = PredictConfig {
                n_mc: a.n_mc,
                seed: origin_seed(base, i, k),
                ..Default::default()
            };
            let p = match a.kind {
                Kind::Survival => prediction::predict_survival(t, &fitted.draws, &fitted.model, &a.horizons, &cfg)?,
                Kind::Longitudinal => {
                    prediction::predict_longitudinal(t, &fitted.draws, &fitted.model, &a.horizons, &cfg)?
                }
            };
            write_prediction(&a.out, &format!("prediction_{}_{}", sanitize(&s.id), k + 1), &p, &mut outputs)?;
        }
    }
    manifest.finish(&a.out, &outputs)
}

pub fn bma(a: &BmaArgs, seed: Option<u64>, threads: usize) -> Result<(), CliError> {
    let loaded: Vec<(FitRecord, FittedModel)> = a.fit_dirs.iter().map(|d| load_fit(d)).collect::<Result<_, _>>()?;
    let first = &loaded[0].0;
    if let Some((r, _)) = loaded.iter().find(|(r, _)| r.fingerprint != first.fingerprint) {
        return Err(CliError::Consistency(format!(
            "models were fitted to different datasets ({} vs {})",
            first.fingerprint, r.fingerprint
        )));
    }
    if let Some(p) = &a.prior {
        if p.len() != loaded.len() {
            return Err(CliError::User(format!(
                "{} prior probabilities for {} models",
                p.len(),
                loaded.len()
            )));
        }
    }
    let targets = load_targets(&a.target, a.data_surv.as_deref(), &first.ingest, &first.covariate_names)?;
    for s in &targets {
        check_horizons(s, &a.horizons)?;
    }
    let base = seed.unwrap_or(first.seed);
    let manifest = ManifestBuilder::start(
        "bma",
        json!({"fits": a.fit_dirs, "fingerprint": first.fingerprint, "target": a.target, "data_surv": a.data_surv,
               "horizons": a.horizons, "prior": a.prior, "n_mc": a.n_mc}),
        Some(base),
        threads,
    );
    let transform = first.ingest.transform;
    let models: Vec<FittedModel> = loaded.into_iter().map(|(_, m)| m).collect();
    make_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut full = Vec::new();
    for (i, s) in targets.iter().enumerate() {
        for (k, t) in origins(s)?.iter().enumerate() {
            let cfg = PredictConfig {
                n_mc: a.n_mc,
                seed: origin_seed(base, i, k),
                ..Default::default()
            };
            let (w, p) = bma::bma_predict_survival(t, &models, &a.horizons, &cfg, a.prior.as_deref())?;
            rows.push(WeightRow {
                subject: s.id.clone(),
                origin_time: t.t,
                last_value: transform.invert(t.last_value()),
                weights: w.weights.clone(),
            });
            full.push(w);
            write_prediction(&a.out, &format!("bma_{}_{}", sanitize(&s.id), k + 1), &p, &mut outputs)?;
        }
    }
    let report = a.out.join("weights.csv");
    write_text(&report, &weight_report_csv(&rows))?;
    let wjson = a.out.join("weights.json");
    write_json(&wjson, &full)?;
    outputs.insert(0, wjson);
    outputs.insert(0, report);
    manifest.finish(&a.out, &outputs)
}

fn scenario_config(a: &SimulateArgs, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let scenario: Scenario = a.scenario.parse()?;
    let mut cfg = match &a.config {
        Some(p) => {
            let c: ScenarioConfig = read_json(p)?;
            if c.scenario != scenario {
                return Err(CliError::User(format!(
                    "configuration is for scenario {} but --scenario is {}",
                    c.scenario.label(),
                    scenario.label()
                )));
            }
            c
        }
        None => ScenarioConfig::pinned(scenario, DEFAULT_SIM_SEED),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.n_datasets = r;
    }
    if let Some(n) = a.n_subjects {
        cfg.n_subjects = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn truth_csv(sim: &simulation::SimulatedData) -> String {
    let q = sim.b.first().map_or(0, |b| b.len());
    let mut out = String::from("id,true_event_time,uniform");
    for j in 0..q {
        out.push_str(&format!(",b{j}"));
    }
    out.push('\n');
    for (i, s) in sim.dataset.subjects.iter().enumerate() {
        let t = sim.event_times[i];
        out.push_str(&format!(
            "{},{},{}",
            s.id,
            if t.is_finite() { num(t) } else { "inf".into() },
            num(sim.uniforms[i])
        ));
        for v in sim.b[i].iter() {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

pub fn simulate(a: &SimulateArgs, seed: Option<u64>, threads: usize) -> Result<(), CliError> {
    let cfg = scenario_config(a, seed)?;
    let chain = match &a.chain {
        Some(p) => read_json(p)?,
        None => ChainConfig::new(10_000, 5_000, 1, cfg.seed),
    };
    let mut chain: ChainConfig = chain;
    if let Some(s) = seed {
        chain.seed = s;
    }
    if !a.simulate_only {
        chain.validate()?;
    }
    let manifest = ManifestBuilder::start(
        "simulate",
        json!({"scenario": cfg, "chain": chain, "n_holdout": a.n_holdout, "simulate_only": a.simulate_only}),
        Some(cfg.seed),
        threads,
    );
    make_dir(&a.out)?;
    let mut outputs = Vec::new();
    let t_max = match cfg.t_max {
        Some(t) => t,
        None => simulation::calibrate_censoring(&cfg)?,
    };
    if a.simulate_only {
        for r in 0..cfg.n_datasets {
            let sim = simulation::simulate_dataset(&cfg, t_max, (r as u64) << 16)?;
            let dir = a.out.join(format!("replicate_{:03}", r + 1));
            make_dir(&dir)?;
            let (l, s) = (dir.join("longitudinal.csv"), dir.join("survival.csv"));
            write_dataset_csv(&sim.dataset, &l, &s)?;
            let t = dir.join("truth.csv");
            write_text(&t, &truth_csv(&sim))?;
            outputs.extend([l, s, t]);
        }
    } else {
        let opts = StudyOptions {
            n_holdout: a.n_holdout,
            predict: PredictConfig {
                seed: cfg.seed,
                ..Default::default()
            },
            ..Default::default()
        };
        let fixed = ScenarioConfig {
            t_max: Some(t_max),
            ..cfg.clone()
        };
        let res = simulation::run_study(&fixed, &chain, &opts)?;
        let mut rmse = String::from("replicate,subject,method,rmse\n");
        for r in &res.records {
            rmse.push_str(&format!("{},{},{},{}\n", r.replicate + 1, r.subject, r.method.label(), num(r.rmse)));
        }
        let rmse_path = a.out.join("rmse.csv");
        write_text(&rmse_path, &rmse)?;
        let mut reps = String::from("replicate,stream,regenerated,censoring_fraction\n");
        let mut weights = String::from("replicate,subject");
        for j in 1..=opts.models.len() {
            weights.push_str(&format!(",w{j}"));
        }
        weights.push('\n');
        for r in &res.replicates {
            reps.push_str(&format!(
                "{},{},{},{}\n",
                r.replicate + 1,
                r.stream,
                r.regenerated,
                num(r.censoring_fraction)
            ));
            for (id, w) in &r.weights {
                weights.push_str(&format!("{},{}", r.replicate + 1, id));
                for v in w {
                    weights.push(',');
                    weights.push_str(&num(*v));
                }
                weights.push('\n');
            }
        }
        let reps_path = a.out.join("replicates.csv");
        write_text(&reps_path, &reps)?;
        let w_path = a.out.join("weights.csv");
        write_text(&w_path, &weights)?;
        let mut summary = String::from("method,n,median,q25,q75,mean\n");
        for m in [
            simulation::Method::TrueModel,
            simulation::Method::BmaWithTrue,
            simulation::Method::BmaWithoutTrue,
        ] {
            let mut v: Vec<f64> = res.records.iter().filter(|r| r.method == m).map(|r| r.rmse).collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(|x, y| x.total_cmp(y));
            summary.push_str(&format!(
                "{},{},{:.3},{:.3},{:.3},{:.3}\n",
                m.label(),
                v.len(),
                quantile_sorted(&v, 0.5),
                quantile_sorted(&v, 0.25),
                quantile_sorted(&v, 0.75),
                v.iter().sum::<f64>() / v.len() as f64
            ));
        }
        let s_path = a.out.join("summary.csv");
        write_text(&s_path, &summary)?;
        outputs.extend([rmse_path, reps_path, w_path, s_path]);
    }
    let sim_path = a.out.join("simulation.json");
    write_json(&sim_path, &json!({"config": cfg, "t_max": t_max}))?;
    outputs.push(sim_path);
    manifest.finish(&a.out, &outputs)
}
