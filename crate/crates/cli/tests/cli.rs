use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use jmbma::datamodel::Association;
use jmbma::simulation::{Scenario, ScenarioConfig};
use serde_json::Value;
use tempfile::TempDir;

fn jmbma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jmbma"))
        .args(args)
        .env_remove("JMBMA_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(o.stderr.trim_ascii()).expect("error JSON on stderr")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn scenario_config(n: usize, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::pinned(Scenario::I, seed);
    cfg.n_subjects = n;
    cfg.n_datasets = 1;
    cfg.t_max = Some(30.0);
    cfg
}

fn fit(fx: &Fixture, data: &str, model: &str, out: &str, seed: &str) -> Output {
    jmbma(&[
        "--threads",
        "1",
        "--seed",
        seed,
        "fit",
        "--data-long",
        s(&fx.path(&format!("{data}/replicate_001/longitudinal.csv"))),
        "--data-surv",
        s(&fx.path(&format!("{data}/replicate_001/survival.csv"))),
        "--model",
        s(&fx.path(model)),
        "--chain",
        s(&fx.path("chain.json")),
        "--out",
        s(&fx.path(out)),
    ])
}

/// Two simulated datasets and a Value-model fit to the first.
fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let fx = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        for (name, seed) in [("data_a", 5u64), ("data_b", 6)] {
            let cfg_path = fx.path(&format!("{name}.json"));
            write_json(&cfg_path, &scenario_config(40, seed));
            let o = jmbma(&[
                "simulate",
                "--scenario",
                "I",
                "--config",
                s(&cfg_path),
                "--simulate-only",
                "--out",
                s(&fx.path(name)),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        let cfg = scenario_config(40, 5);
        write_json(&fx.path("value.json"), &cfg.model_spec(Association::Value));
        write_json(&fx.path("slope.json"), &cfg.model_spec(Association::ValueSlope));
        fs::write(fx.path("chain.json"), r#"{"n_iter": 400, "n_burnin": 150}"#).unwrap();
        let o = fit(&fx, "data_a", "value.json", "fit_value", "11");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::write(
            fx.path("target.csv"),
            "id,time,value\nnew,0.0,5.1\nnew,1.5,4.6\nnew,3.0,4.0\n",
        )
        .unwrap();
        fs::write(
            fx.path("target_surv.csv"),
            "id,event_time,event_indicator,Trt0,Trt1\nnew,3.0,0,0,1\n",
        )
        .unwrap();
        fx
    })
}

fn prediction_files(dir: &Path, prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with(prefix) && n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn fit_writes_draws_summary_and_manifest() {
    let fx = fixture();
    let out = fx.path("fit_value");
    for f in ["draws.csv", "summary.csv", "random_effects.csv", "fit.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let draws = fs::read_to_string(out.join("draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 1 + 250);
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "fit");
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn fit_is_deterministic_and_leaves_inputs_untouched() {
    let fx = fixture();
    let long = fx.path("data_a/replicate_001/longitudinal.csv");
    let before = fs::read(&long).unwrap();
    let o = fit(fx, "data_a", "value.json", "fit_value_again", "11");
    assert!(o.status.success());
    for f in ["draws.csv", "summary.csv", "random_effects.csv"] {
        assert_eq!(
            fs::read(fx.path("fit_value").join(f)).unwrap(),
            fs::read(fx.path("fit_value_again").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(fs::read(&long).unwrap(), before);
    let digest = |d: &str| {
        let m: Value = serde_json::from_str(&fs::read_to_string(fx.path(d).join("manifest.json")).unwrap()).unwrap();
        m["config_digest"].clone()
    };
    assert_eq!(digest("fit_value"), digest("fit_value_again"));
}

#[test]
fn missing_config_is_a_user_error_naming_the_path() {
    let fx = fixture();
    let missing = fx.path("no_such_model.json");
    let o = jmbma(&[
        "fit",
        "--data-long",
        s(&fx.path("data_a/replicate_001/longitudinal.csv")),
        "--data-surv",
        s(&fx.path("data_a/replicate_001/survival.csv")),
        "--model",
        s(&missing),
        "--out",
        s(&fx.path("never")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["code"], 2);
    assert!(e["error"]["message"].as_str().unwrap().contains(s(&missing)));
}

#[test]
fn predict_writes_one_file_per_origin() {
    let fx = fixture();
    let out = fx.path("pred");
    let o = jmbma(&[
        "predict",
        "--fit",
        s(&fx.path("fit_value")),
        "--target",
        s(&fx.path("target.csv")),
        "--data-surv",
        s(&fx.path("target_surv.csv")),
        "--horizons",
        "5,8",
        "--n-mc",
        "100",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = prediction_files(&out, "prediction_new_");
    assert_eq!(files, ["prediction_new_1.csv", "prediction_new_2.csv", "prediction_new_3.csv"]);
    for f in &files {
        let body = fs::read_to_string(out.join(f)).unwrap();
        let rows: Vec<Vec<f64>> = body
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[2])));
        assert!(rows[1][2] <= rows[0][2]);
    }
    let js: Value = serde_json::from_str(&fs::read_to_string(out.join("prediction_new_2.json")).unwrap()).unwrap();
    assert_eq!(js["kind"], "survival");
    assert_eq!(js["origin"], 1.5);
}

#[test]
fn longitudinal_kind_writes_trajectory_predictions() {
    let fx = fixture();
    let out = fx.path("pred_long");
    let o = jmbma(&[
        "predict",
        "--fit",
        s(&fx.path("fit_value")),
        "--target",
        s(&fx.path("target.csv")),
        "--data-surv",
        s(&fx.path("target_surv.csv")),
        "--horizons",
        "5",
        "--kind",
        "longitudinal",
        "--n-mc",
        "50",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let js: Value = serde_json::from_str(&fs::read_to_string(out.join("prediction_new_3.json")).unwrap()).unwrap();
    assert_eq!(js["kind"], "longitudinal");
}

#[test]
fn horizon_not_after_origin_is_rejected() {
    let fx = fixture();
    let o = jmbma(&[
        "predict",
        "--fit",
        s(&fx.path("fit_value")),
        "--target",
        s(&fx.path("target.csv")),
        "--data-surv",
        s(&fx.path("target_surv.csv")),
        "--horizons",
        "3",
        "--out",
        s(&fx.path("pred_bad")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_draws_file_is_a_user_error() {
    let fx = fixture();
    let broken = fx.path("fit_broken");
    fs::create_dir_all(&broken).unwrap();
    fs::copy(fx.path("fit_value/fit.json"), broken.join("fit.json")).unwrap();
    let o = jmbma(&[
        "predict",
        "--fit",
        s(&broken),
        "--target",
        s(&fx.path("target.csv")),
        "--data-surv",
        s(&fx.path("target_surv.csv")),
        "--horizons",
        "5",
        "--out",
        s(&fx.path("pred_broken")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("draws"));
}

#[test]
fn single_model_bma_has_unit_weights() {
    let fx = fixture();
    let out = fx.path("bma_single");
    let o = jmbma(&[
        "bma",
        "--fit",
        s(&fx.path("fit_value")),
        "--target",
        s(&fx.path("target.csv")),
        "--data-surv",
        s(&fx.path("target_surv.csv")),
        "--horizons",
        "5",
        "--n-mc",
        "50",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("weights.csv")).unwrap();
    assert_eq!(
        report,
        "subject,origin_time,last_value,w1\nnew,0.0,5.1,1.00\nnew,1.5,4.6,1.00\nnew,3.0,4.0,1.00\n"
    );
    assert_eq!(prediction_files(&out, "bma_new_").len(), 3);
}

#[test]
fn bma_over_different_datasets_is_a_consistency_error() {
    let fx = fixture();
    let o = fit(fx, "data_b", "slope.json", "fit_slope_b", "12");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = jmbma(&[
        "bma",
        "--fit",
        s(&fx.path("fit_value")),
        "--fit",
        s(&fx.path("fit_slope_b")),
        "--target",
        s(&fx.path("target.csv")),
        "--data-surv",
        s(&fx.path("target_surv.csv")),
        "--horizons",
        "5",
        "--out",
        s(&fx.path("bma_bad")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"]["kind"], "consistency");
}

#[test]
fn unknown_scenario_is_a_user_error() {
    let fx = fixture();
    let o = jmbma(&["simulate", "--scenario", "V", "--out", s(&fx.path("sim_v"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_only_is_deterministic_and_honours_the_seed_variable() {
    let fx = fixture();
    let run = |out: &str, env_seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_jmbma"));
        c.args(["--threads", "1", "simulate", "--scenario", "II", "--config"])
            .arg(fx.path("data_ii.json"))
            .args(["--simulate-only", "--replicates", "2", "--out", s(&fx.path(out))])
            .env_remove("JMBMA_SEED");
        if let Some(v) = env_seed {
            c.env("JMBMA_SEED", v);
        }
        c.output().unwrap()
    };
    let mut cfg = ScenarioConfig::pinned(Scenario::II, 5);
    cfg.n_subjects = 30;
    cfg.t_max = Some(30.0);
    write_json(&fx.path("data_ii.json"), &cfg);
    for (out, seed) in [("sim_1", Some("77")), ("sim_2", Some("77")), ("sim_3", Some("78"))] {
        let o = run(out, seed);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str, r: usize| fs::read(fx.path(d).join(format!("replicate_{r:03}/longitudinal.csv"))).unwrap();
    assert_eq!(read("sim_1", 1), read("sim_2", 1));
    assert_eq!(read("sim_1", 2), read("sim_2", 2));
    assert_ne!(read("sim_1", 1), read("sim_3", 1));
    assert_ne!(read("sim_1", 1), read("sim_1", 2));
    let m: Value = serde_json::from_str(&fs::read_to_string(fx.path("sim_1/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 77);
}

#[test]
fn simulation_study_runs_on_shrunken_sizes() {
    let fx = fixture();
    let mut cfg = ScenarioConfig::pinned(Scenario::I, 9);
    cfg.n_subjects = 40;
    cfg.t_max = Some(30.0);
    write_json(&fx.path("study.json"), &cfg);
    fs::write(fx.path("study_chain.json"), r#"{"n_iter": 300, "n_burnin": 100}"#).unwrap();
    let out = fx.path("study");
    let o = jmbma(&[
        "--threads",
        "1",
        "simulate",
        "--scenario",
        "I",
        "--config",
        s(&fx.path("study.json")),
        "--chain",
        s(&fx.path("study_chain.json")),
        "--replicates",
        "2",
        "--n-holdout",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reps = fs::read_to_string(out.join("replicates.csv")).unwrap();
    let ids: Vec<&str> = reps.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["1", "2"]);
    let rmse = fs::read_to_string(out.join("rmse.csv")).unwrap();
    assert_eq!(rmse.lines().count(), 1 + 2 * 2 * 3);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(out.join("manifest.json").exists());
}
