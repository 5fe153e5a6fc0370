#![allow(dead_code)]

pub mod evidence;

use jmbma::basis::KnotVector;
use jmbma::datamodel::{
    Association, Baseline, FixedDesign, JointModelSpec, PriorSpec, RandomDesign, Subject, SurvivalDesign,
    TimeBasis, WeightFn,
};
use jmbma::likelihood::ThetaFull;
use jmbma::longitudinal::MixedParams;
use jmbma::model::Model;
use jmbma::survival::SurvParams;
use nalgebra::{DMatrix, DVector};

pub fn knots() -> KnotVector {
    KnotVector::cubic(0.0, 19.0, &[2.1, 5.5]).unwrap()
}

pub fn covariates() -> Vec<String> {
    vec!["Trt0".into(), "Trt1".into()]
}

/// Group-specific natural-spline curves, random intercept (and spline
/// slopes when `random_time`), Weibull or spline baseline.
pub fn spec(assoc: Association, random_time: bool, weibull: bool) -> JointModelSpec {
    JointModelSpec {
        fixed_design: FixedDesign {
            time: TimeBasis::NaturalCubic { knots: knots() },
            by: covariates(),
            covariates: vec![],
        },
        random_design: RandomDesign {
            intercept: true,
            time: random_time,
        },
        survival_design: SurvivalDesign {
            intercept: weibull,
            covariates: vec!["Trt1".into()],
        },
        assoc,
        baseline: if weibull {
            Baseline::Weibull
        } else {
            Baseline::BsplineLogHazard {
                knots: KnotVector::cubic(0.0, 19.0, &[3.0, 8.0, 13.0]).unwrap(),
            }
        },
        priors: PriorSpec::default(),
        weight_fn: (assoc == Association::WeightedCumulative).then(WeightFn::default),
        fixed_params: Default::default(),
    }
}

pub fn model(assoc: Association, random_time: bool, weibull: bool) -> Model {
    Model::new(&spec(assoc, random_time, weibull), &covariates()).unwrap()
}

pub fn theta(model: &Model) -> ThetaFull {
    let beta = DVector::from_fn(model.p, |i, _| [4.0, 4.3, 1.5, 1.8, 3.5, 4.2, 2.0, 2.6][i % 8]);
    let q = model.q;
    let mut d = DMatrix::from_fn(q, q, |i, j| if i == j { 0.5 + 0.2 * i as f64 } else { 0.05 });
    d = (&d + d.transpose()) * 0.5;
    let n_alpha = model.n_alpha;
    let mut gamma = DVector::zeros(model.n_gamma);
    if model.spec.survival_design.intercept {
        gamma[0] = -5.0;
    }
    let last = gamma.len() - 1;
    gamma[last] = 0.3;
    let mut gamma_h0 = DVector::zeros(model.n_h0);
    if model.n_h0 > 0 {
        gamma_h0[0] = -4.0;
        for k in 1..model.n_h0 {
            gamma_h0[k] = 0.1 * k as f64;
        }
    }
    ThetaFull {
        mixed: MixedParams {
            beta,
            d,
            sigma2: 0.3,
        },
        surv: SurvParams {
            gamma,
            gamma_h0,
            alpha: DVector::from_fn(n_alpha, |i, _| 0.3 / (i + 1) as f64),
            weibull_shape: model.is_weibull().then_some(1.4),
        },
    }
}

pub fn subject(id: &str, group: usize, times: &[f64], y: &[f64], end: f64, event: bool) -> Subject {
    Subject {
        id: id.into(),
        w: if group == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
        times: times.to_vec(),
        y: y.to_vec(),
        event_time: end,
        event,
    }
}

/// Composite trapezoid rule on `n` panels.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for k in 1..n {
        s += f(a + k as f64 * h);
    }
    s * h
}

/// Composite Simpson rule on `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    s * h / 3.0
}
