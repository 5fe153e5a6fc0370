//! Brute-force evidence of a random-intercept joint model with no
//! association: Gauss-Hermite over each random intercept and dense grids
//! over the parameters.

use jmbma::datamodel::{
    Association, Baseline, Dataset, FixedDesign, FixedParams, JointModelSpec, PriorSpec, RandomDesign, Subject,
    SurvivalDesign, TimeBasis,
};
use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Nodes and weights of the `n`-point Gauss-Hermite rule (weight `e^{-x^2}`)
/// from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = off;
        j[(k - 1, k)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

pub fn priors() -> PriorSpec {
    PriorSpec {
        beta_sd: 1.0,
        gamma_sd: 2.0,
        sigma2_shape: 8.0,
        sigma2_rate: 4.0,
        wishart_df: Some(10.0),
        wishart_scale: Some(vec![vec![6.4]]),
        ..PriorSpec::default()
    }
}

/// Intercept-only longitudinal model, random intercept, exponential
/// survival with no association.
pub fn spec() -> JointModelSpec {
    JointModelSpec {
        fixed_design: FixedDesign {
            time: TimeBasis::Constant,
            by: vec![],
            covariates: vec![],
        },
        random_design: RandomDesign {
            intercept: true,
            time: false,
        },
        survival_design: SurvivalDesign {
            intercept: true,
            covariates: vec![],
        },
        assoc: Association::Value,
        baseline: Baseline::Weibull,
        priors: priors(),
        weight_fn: None,
        fixed_params: FixedParams {
            alpha: Some(vec![0.0]),
            weibull_shape: Some(1.0),
        },
    }
}

pub fn dataset(n: usize) -> Dataset {
    let b = [0.6, -0.5, 0.9, -0.2, 0.1, 0.4, -0.7];
    let noise = [0.21, -0.28, 0.07];
    let ends = [2.5, 3.1, 4.0, 2.2, 5.0, 3.6, 1.9];
    let events = [true, false, true, true, false, true, false];
    let subjects = (0..n)
        .map(|i| {
            let times = vec![0.0, 0.8, 1.7];
            let y = (0..3).map(|l| 0.4 + b[i % 7] + noise[(l + i) % 3] * (1.0 + 0.1 * i as f64)).collect();
            Subject {
                id: format!("o{i}"),
                w: vec![],
                times,
                y,
                event_time: ends[i % 7] + 0.01 * (i / 7) as f64,
                event: events[i % 7],
            }
        })
        .collect();
    Dataset::new(subjects, vec![])
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn grid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    ((0..n).map(|k| lo + h * k as f64).collect(), h)
}

/// Log trapezoid weights (halved at the ends).
fn end_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k == n - 1 {
        0.5f64.ln()
    } else {
        0.0
    }
}

/// `log ∫ p(y | β0, σ², D) p(β0) p(σ²) p(D)`, random intercepts by
/// 50-node Gauss-Hermite, parameters on a grid in `(β0, log σ², log D)`.
pub fn longitudinal_evidence(ds: &Dataset, pr: &PriorSpec) -> f64 {
    let (x, w) = gauss_hermite(50);
    let lw: Vec<f64> = w.iter().map(|v| (v / std::f64::consts::PI.sqrt()).ln()).collect();
    let n = 90;
    let (bs, hb) = grid(-2.5, 3.0, n);
    let (ss, hs) = grid(0.05f64.ln(), 4f64.ln(), n);
    let (ds_, hd) = grid(0.03f64.ln(), 8f64.ln(), n);
    let nu = pr.wishart_df.unwrap();
    let psi = pr.wishart_scale.as_ref().unwrap()[0][0];
    let (a, r) = (pr.sigma2_shape, pr.sigma2_rate);
    let mut terms = Vec::with_capacity(n * n * n);
    let mut node_terms = vec![0.0; x.len()];
    for (ib, &b0) in bs.iter().enumerate() {
        let lp_b = -0.5 * (LN_2PI + 2.0 * pr.beta_sd.ln()) - 0.5 * (b0 / pr.beta_sd).powi(2);
        for (is, &ls) in ss.iter().enumerate() {
            let s2 = ls.exp();
            let lp_s = a * r.ln() - ln_gamma(a) - (a + 1.0) * ls - r / s2 + ls;
            for (id, &ld) in ds_.iter().enumerate() {
                let d = ld.exp();
                let lp_d = 0.5 * nu * (0.5 * psi).ln() - ln_gamma(0.5 * nu) - (0.5 * nu + 1.0) * ld - 0.5 * psi / d + ld;
                let mut total = lp_b + lp_s + lp_d;
                for s in &ds.subjects {
                    for (k, &xk) in x.iter().enumerate() {
                        let bi = (2.0 * d).sqrt() * xk;
                        let mut ll = lw[k];
                        for &y in &s.y {
                            ll += -0.5 * (LN_2PI + ls) - 0.5 * (y - b0 - bi).powi(2) / s2;
                        }
                        node_terms[k] = ll;
                    }
                    total += logsumexp(&node_terms);
                }
                terms.push(total + end_weight(ib, n) + end_weight(is, n) + end_weight(id, n));
            }
        }
    }
    logsumexp(&terms) + (hb * hs * hd).ln()
}

/// `log ∫ Π_i λ^{δ_i} e^{-λ T_i} p(log λ) d log λ` on a dense grid.
pub fn survival_evidence(ds: &Dataset, pr: &PriorSpec) -> f64 {
    let n = 20_001;
    let (gs, h) = grid(-12.0, 6.0, n);
    let events = ds.subjects.iter().filter(|s| s.event).count() as f64;
    let exposure: f64 = ds.subjects.iter().map(|s| s.event_time).sum();
    let terms: Vec<f64> = gs
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let lp = -0.5 * (LN_2PI + 2.0 * pr.gamma_sd.ln()) - 0.5 * (g / pr.gamma_sd).powi(2);
            lp + events * g - g.exp() * exposure + end_weight(k, n)
        })
        .collect();
    logsumexp(&terms) + h.ln()
}

pub fn brute_force_evidence(ds: &Dataset) -> f64 {
    let pr = priors();
    longitudinal_evidence(ds, &pr) + survival_evidence(ds, &pr)
}
