//! Files written and read by the commands.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use jmbma::bma::FittedModel;
use jmbma::datamodel::{load_longitudinal_csv, load_survival_csv, IngestConfig, JointModelSpec, Subject};
use jmbma::likelihood::{flatten, theta_names, unflatten, ThetaFull};
use jmbma::mcmc::{ChainConfig, ParamSummary};
use jmbma::model::Model;
use jmbma::prediction::DynamicPrediction;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::User(format!("invalid JSON in {}: {e}", path.display())))
}

pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(path, &(body + "\n"))
}

pub fn make_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::User(format!("cannot create output directory {}: {e}", path.display())))
}

/// Sidecar describing one fit, enough to reload its draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub spec: JointModelSpec,
    pub chain: ChainConfig,
    pub seed: u64,
    pub ingest: IngestConfig,
    pub fingerprint: String,
    pub covariate_names: Vec<String>,
    pub training_ids: Vec<String>,
    pub data_long: PathBuf,
    pub data_surv: PathBuf,
    pub log_marg_data: Option<f64>,
    pub accept_rates: Vec<(String, f64)>,
}

pub fn write_draws(path: &Path, model: &Model, draws: &[ThetaFull], logpost: &[f64], first_iter: usize, thin: usize) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::Internal(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    let mut header = vec!["iter".to_string(), "logpost".to_string()];
    header.extend(theta_names(model));
    w.write_record(&header).map_err(fail)?;
    for (r, (th, lp)) in draws.iter().zip(logpost).enumerate() {
        let mut rec = vec![(first_iter + (r + 1) * thin - 1).to_string(), num(*lp)];
        rec.extend(flatten(th, model).into_iter().map(num));
        w.write_record(&rec).map_err(fail)?;
    }
    w.flush()
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Draws and their log posteriors from `draws.csv`.
pub fn read_draws(path: &Path, model: &Model) -> Result<(Vec<ThetaFull>, Vec<f64>), CliError> {
    let bad = |m: String| CliError::User(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let names = theta_names(model);
    let expected: Vec<&str> = ["iter", "logpost"].into_iter().chain(names.iter().map(String::as_str)).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(bad("columns do not match the fitted model".into()));
    }
    let mut draws = Vec::new();
    let mut lps = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        lps.push(vals[0]);
        draws.push(unflatten(&vals[1..], model));
    }
    if draws.is_empty() {
        return Err(bad("no draws".into()));
    }
    Ok((draws, lps))
}

pub fn summary_csv(rows: &[ParamSummary]) -> String {
    let mut out = String::from("parameter,mean,sd,q2.5,q50,q97.5,ess,acf1\n");
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{:.3},{:.3},{:.3},{:.3},{:.3},{:.1},{:.3}\n",
            r.name, r.mean, r.sd, r.q025, r.q50, r.q975, r.ess, r.acf1
        ));
    }
    out
}

/// Reloads a fitted model directory.
pub fn load_fit(dir: &Path) -> Result<(FitRecord, FittedModel), CliError> {
    let rec: FitRecord = read_json(&dir.join("fit.json"))?;
    let model = Model::new(&rec.spec, &rec.covariate_names)?;
    let draws_path = dir.join("draws.csv");
    if !draws_path.exists() {
        return Err(CliError::User(format!("missing draws file {}", draws_path.display())));
    }
    let (draws, draw_logpost) = read_draws(&draws_path, &model)?;
    let fitted = FittedModel {
        model,
        draws,
        draw_logpost,
        fingerprint: rec.fingerprint.clone(),
        training_ids: rec.training_ids.clone(),
        log_marg_data: rec.log_marg_data,
    };
    Ok((rec, fitted))
}

/// Target subjects from a longitudinal file and optional covariates, with
/// covariates ordered as in the fit.
pub fn load_targets(
    long: &Path,
    surv: Option<&Path>,
    ingest: &IngestConfig,
    covariate_names: &[String],
) -> Result<Vec<Subject>, CliError> {
    let l = load_longitudinal_csv(long, ingest)?;
    let covs = match surv {
        Some(p) => Some(load_survival_csv(p, ingest)?),
        None if covariate_names.is_empty() => None,
        None => {
            return Err(CliError::User(format!(
                "the model uses covariates {covariate_names:?}; pass --data-surv with the targets' covariates"
            )))
        }
    };
    let mut out = Vec::new();
    for (id, meas) in l.records {
        let w = match &covs {
            None => vec![],
            Some(s) => {
                let k = s
                    .ids
                    .iter()
                    .position(|x| *x == id)
                    .ok_or_else(|| CliError::User(format!("no covariates for target subject {id}")))?;
                covariate_names
                    .iter()
                    .map(|n| {
                        s.covariate_names
                            .iter()
                            .position(|c| c == n)
                            .map(|j| s.w[k][j])
                            .ok_or_else(|| CliError::User(format!("covariate column `{n}` missing for targets")))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let last = meas.last().map_or(0.0, |m| m.0);
        out.push(Subject {
            id,
            w,
            times: meas.iter().map(|m| m.0).collect(),
            y: meas.iter().map(|m| m.1).collect(),
            event_time: last,
            event: false,
        });
    }
    if out.is_empty() {
        return Err(CliError::User(format!("no target measurements in {}", long.display())));
    }
    Ok(out)
}

pub fn prediction_csv(p: &DynamicPrediction) -> String {
    let mut out = String::from("origin,horizon,point,lower,upper\n");
    for k in 0..p.horizons.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            num(p.origin),
            num(p.horizons[k]),
            num(p.point[k]),
            num(p.lower[k]),
            num(p.upper[k])
        ));
    }
    out
}

pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// SHA-256 of the canonical JSON text (sorted keys) of `config`.
pub fn digest(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

pub struct ManifestBuilder {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    threads: usize,
    started: String,
}

impl ManifestBuilder {
    pub fn start(command: &'static str, config: serde_json::Value, seed: Option<u64>, threads: usize) -> Self {
        ManifestBuilder {
            command,
            config,
            seed,
            threads,
            started: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        }
    }

    pub fn finish(self, dir: &Path, outputs: &[PathBuf]) -> Result<(), CliError> {
        let body = serde_json::json!({
            "command": self.command,
            "config_digest": digest(&self.config),
            "config": self.config,
            "seed": self.seed,
            "threads": self.threads,
            "versions": crate::version_info(),
            "started": self.started,
            "finished": Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        write_json(&dir.join("manifest.json"), &body)
    }
}
