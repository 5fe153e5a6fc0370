mod common;

use common::{model, simpson, theta};
use jmbma::datamodel::Association;
use jmbma::likelihood::ThetaFull;
use jmbma::prediction::{predict_longitudinal, predict_survival, PredictConfig, TargetSubject};
use jmbma::survival::survival_fn;
use jmbma::longitudinal;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cfg(n_mc: usize, seed: u64) -> PredictConfig {
    PredictConfig {
        n_mc: Some(n_mc),
        seed,
        ..PredictConfig::default()
    }
}

fn target() -> TargetSubject {
    TargetSubject::new("j", vec![0.0, 1.0], vec![0.0, 1.0, 2.2, 3.5], vec![4.2, 4.9, 5.6, 5.4], 3.5).unwrap()
}

fn repeated(th: &ThetaFull, n: usize) -> Vec<ThetaFull> {
    vec![th.clone(); n]
}

/// Slightly dispersed parameter draws around `th`.
fn dispersed(th: &ThetaFull, n: usize) -> Vec<ThetaFull> {
    (0..n)
        .map(|k| {
            let mut t = th.clone();
            let e = ((k as f64) * 0.618_034).fract() - 0.5;
            t.mixed.beta.add_scalar_mut(0.1 * e);
            t.surv.gamma[0] += 0.2 * e;
            t.surv.alpha *= 1.0 + 0.3 * e;
            t
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn survival_predictions_are_bounded_and_decreasing(k in 0usize..5, seed in 0u64..1000, gaps in prop::collection::vec(0.05f64..3.0, 1..6)) {
        let m = model(Association::ALL[k], true, true);
        let th = theta(&m);
        let tg = target();
        let mut horizons = Vec::new();
        let mut u = tg.t;
        for g in gaps {
            u += g;
            horizons.push(u);
        }
        let p = predict_survival(&tg, &dispersed(&th, 60), &m, &horizons, &cfg(60, seed)).unwrap();
        for k in 0..horizons.len() {
            prop_assert!(p.point[k] >= 0.0 && p.point[k] <= 1.0);
            prop_assert!(p.lower[k] <= p.point[k] && p.point[k] <= p.upper[k]);
            if k > 0 {
                prop_assert!(p.point[k] <= p.point[k - 1]);
                for r in 0..p.samples.nrows() {
                    prop_assert!(p.samples[(r, k)] <= p.samples[(r, k - 1)]);
                }
            }
        }
    }
}

#[test]
fn survival_is_continuous_at_the_origin() {
    for assoc in Association::ALL {
        let m = model(assoc, true, true);
        let th = theta(&m);
        let tg = target();
        let p = predict_survival(&tg, &repeated(&th, 50), &m, &[tg.t + 1e-9], &cfg(50, 3)).unwrap();
        assert!(p.point[0] >= 0.999_999, "{assoc:?}: {}", p.point[0]);
    }
}

#[test]
fn memoryless_case_matches_exponential() {
    let m = model(Association::Value, true, true);
    let mut th = theta(&m);
    let lambda: f64 = 0.15;
    th.surv.alpha.fill(0.0);
    th.surv.gamma.fill(0.0);
    th.surv.gamma[0] = lambda.ln();
    th.surv.weibull_shape = Some(1.0);
    let tg = target();
    let horizons = [4.0, 6.0, 9.0, 14.0];
    let p = predict_survival(&tg, &repeated(&th, 2000), &m, &horizons, &cfg(2000, 8)).unwrap();
    for (k, &u) in horizons.iter().enumerate() {
        let want = (-lambda * (u - tg.t)).exp();
        assert!((p.point[k] - want).abs() < 0.01, "u={u}: {} vs {want}", p.point[k]);
    }
}

/// `π(u | t)` for a random-intercept model at fixed `theta`, by dense
/// integration over the random intercept.
fn intercept_oracle(m: &jmbma::model::Model, th: &ThetaFull, tg: &TargetSubject, u: f64) -> f64 {
    let d = th.mixed.d[(0, 0)];
    let sd = d.sqrt();
    let weight = |b: f64, upto: f64| -> f64 {
        let bv = DVector::from_vec(vec![b]);
        let mut ll = -0.5 * b * b / d;
        for (&s, &y) in tg.times.iter().zip(&tg.y) {
            let mu = longitudinal::m(s, &tg.w, &bv, &th.mixed, m).unwrap();
            ll -= 0.5 * (y - mu).powi(2) / th.mixed.sigma2;
        }
        ll.exp() * survival_fn(upto, &tg.w, &bv, &th.mixed, &th.surv, m).unwrap()
    };
    let num = simpson(|b| weight(b, u), -10.0 * sd, 10.0 * sd, 4000);
    let den = simpson(|b| weight(b, tg.t), -10.0 * sd, 10.0 * sd, 4000);
    num / den
}

#[test]
fn random_intercept_prediction_matches_quadrature_oracle() {
    for assoc in [Association::Value, Association::Cumulative] {
        let m = model(assoc, false, true);
        let mut th = theta(&m);
        th.surv.alpha[0] = if assoc == Association::Value { 0.6 } else { 0.08 };
        th.mixed.d = DMatrix::from_element(1, 1, 0.8);
        let tg = target();
        let horizons = [5.0, 8.0, 12.0];
        let p = predict_survival(&tg, &repeated(&th, 2000), &m, &horizons, &cfg(2000, 17)).unwrap();
        for (k, &u) in horizons.iter().enumerate() {
            let want = intercept_oracle(&m, &th, &tg, u);
            assert!((p.point[k] - want).abs() < 0.01, "{assoc:?} u={u}: {} vs {want}", p.point[k]);
        }
    }
}

#[test]
fn predictions_compose_over_intermediate_origins() {
    let m = model(Association::ValueSlope, true, true);
    let th = theta(&m);
    let tg = target();
    let (v, u) = (6.0, 10.0);
    let draws = repeated(&th, 5000);
    let c = cfg(5000, 23);
    let direct = predict_survival(&tg, &draws, &m, &[v, u], &c).unwrap();
    let later = TargetSubject { t: v, ..tg.clone() };
    let second = predict_survival(&later, &draws, &m, &[u], &c).unwrap();
    let composed = direct.point[0] * second.point[0];
    assert!((direct.point[1] - composed).abs() < 0.02, "{} vs {composed}", direct.point[1]);
}

#[test]
fn seeded_predictions_are_reproducible() {
    let m = model(Association::WeightedCumulative, true, true);
    let th = theta(&m);
    let tg = target();
    let draws = dispersed(&th, 80);
    let a = predict_survival(&tg, &draws, &m, &[5.0, 7.0], &cfg(80, 99)).unwrap();
    let b = predict_survival(&tg, &draws, &m, &[5.0, 7.0], &cfg(80, 99)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples, b.samples);
    let c = predict_longitudinal(&tg, &draws, &m, &[5.0, 7.0], &cfg(80, 99)).unwrap();
    let d = predict_longitudinal(&tg, &draws, &m, &[5.0, 7.0], &cfg(80, 99)).unwrap();
    assert_eq!(c, d);
}

#[test]
fn degenerate_random_effects_give_the_fixed_trajectory() {
    let m = model(Association::Value, true, true);
    let mut th = theta(&m);
    th.mixed.d = DMatrix::identity(m.q, m.q) * 1e-14;
    let tg = target();
    let horizons = [4.0, 9.0];
    let p = predict_longitudinal(&tg, &repeated(&th, 20), &m, &horizons, &cfg(20, 1)).unwrap();
    for (k, &u) in horizons.iter().enumerate() {
        let want = m.x_row(u, &tg.w, 0).unwrap().dot(&th.mixed.beta);
        assert!((p.point[k] - want).abs() < 1e-5, "{} vs {want}", p.point[k]);
    }
}

#[test]
fn single_measurement_longitudinal_prediction_shrinks() {
    let m = model(Association::Value, false, true);
    let mut th = theta(&m);
    th.surv.alpha.fill(0.0);
    let (d, s2) = (0.9, 0.4);
    th.mixed.d = DMatrix::from_element(1, 1, d);
    th.mixed.sigma2 = s2;
    let tg = TargetSubject::new("one", vec![1.0, 0.0], vec![1.0], vec![6.1], 1.0).unwrap();
    let n = 4000;
    let p = predict_longitudinal(&tg, &repeated(&th, n), &m, &[3.0], &cfg(n, 5)).unwrap();
    let x1 = m.x_row(1.0, &tg.w, 0).unwrap().dot(&th.mixed.beta);
    let x3 = m.x_row(3.0, &tg.w, 0).unwrap().dot(&th.mixed.beta);
    let post_mean = d / (d + s2) * (6.1 - x1);
    let post_sd = (d * s2 / (d + s2)).sqrt();
    let want = x3 + post_mean;
    assert!((p.point[0] - want).abs() < 4.0 * post_sd / (n as f64).sqrt(), "{} vs {want}", p.point[0]);
}

#[test]
fn dense_precise_data_pin_the_trajectory() {
    let m = model(Association::Value, true, true);
    let mut th = theta(&m);
    th.mixed.sigma2 = 1e-4;
    let b_true = DVector::from_fn(m.q, |i, _| 0.3 - 0.2 * i as f64);
    let times: Vec<f64> = (0..25).map(|k| 0.25 * k as f64).collect();
    let w = vec![0.0, 1.0];
    let y: Vec<f64> = times
        .iter()
        .map(|&s| longitudinal::m(s, &w, &b_true, &th.mixed, &m).unwrap())
        .collect();
    let tg = TargetSubject::new("dense", w.clone(), times.clone(), y.clone(), 6.0).unwrap();
    let draws = repeated(&th, 200);
    let p = predict_longitudinal(&tg, &draws, &m, &[6.0 + 1e-9], &cfg(200, 2)).unwrap();
    let spread = (p.upper[0] - p.lower[0]) / 4.0;
    let last = *y.last().unwrap();
    assert!((p.point[0] - last).abs() <= 2.0 * spread.max(th.mixed.sigma2.sqrt()), "{} vs {last}", p.point[0]);
}
