//! Fixed 15-point Gauss-Kronrod quadrature.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("integrand is not finite at node {node} (x = {x}): {value}")]
    NonFinite { node: usize, x: f64, value: f64 },
    #[error("invalid interval [{a}, {b}]")]
    Interval { a: f64, b: f64 },
}

/// Positive Kronrod abscissae, largest first; the 15 nodes are these, their
/// negatives, and zero.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];

pub const N_NODES: usize = 15;

/// The 15-point Kronrod extension of the 7-point Gauss rule on [-1, 1].
#[derive(Debug, Clone, Copy)]
pub struct QuadratureRule {
    pub nodes: [f64; N_NODES],
    pub weights: [f64; N_NODES],
}

impl QuadratureRule {
    pub fn gauss_kronrod_15() -> Self {
        let mut nodes = [0.0; N_NODES];
        let mut weights = [0.0; N_NODES];
        for k in 0..7 {
            nodes[k] = -XGK[k];
            weights[k] = WGK[k];
            nodes[N_NODES - 1 - k] = XGK[k];
            weights[N_NODES - 1 - k] = WGK[k];
        }
        nodes[7] = 0.0;
        weights[7] = WGK[7];
        QuadratureRule { nodes, weights }
    }

    /// Nodes and weights mapped affinely onto [a, b].
    pub fn scaled(&self, a: f64, b: f64) -> ([f64; N_NODES], [f64; N_NODES]) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut x = [0.0; N_NODES];
        let mut w = [0.0; N_NODES];
        for k in 0..N_NODES {
            x[k] = mid + half * self.nodes[k];
            w[k] = half * self.weights[k];
        }
        (x, w)
    }
}

pub const GK15: QuadratureRule = QuadratureRule {
    nodes: [
        -XGK[0], -XGK[1], -XGK[2], -XGK[3], -XGK[4], -XGK[5], -XGK[6], 0.0, XGK[6], XGK[5],
        XGK[4], XGK[3], XGK[2], XGK[1], XGK[0],
    ],
    weights: [
        WGK[0], WGK[1], WGK[2], WGK[3], WGK[4], WGK[5], WGK[6], WGK[7], WGK[6], WGK[5], WGK[4],
        WGK[3], WGK[2], WGK[1], WGK[0],
    ],
};

/// Integral of `f` over [a, b] with the 15-point Gauss-Kronrod rule.
pub fn integrate<F>(f: F, a: f64, b: f64) -> Result<f64, QuadError>
where
    F: Fn(f64) -> f64,
{
    if !(a <= b) {
        return Err(QuadError::Interval { a, b });
    }
    if a == b {
        return Ok(0.0);
    }
    let (x, w) = GK15.scaled(a, b);
    let mut sum = 0.0;
    for k in 0..N_NODES {
        let v = f(x[k]);
        if !v.is_finite() {
            return Err(QuadError::NonFinite {
                node: k,
                x: x[k],
                value: v,
            });
        }
        sum += w[k] * v;
    }
    Ok(sum)
}

/// `∫_a^b ∫_0^t g(t, s) ds dt`: the outer rule's integrand is itself a
/// 15-point rule from 0 to the outer node.
pub fn integrate_nested<G>(g: G, a: f64, b: f64) -> Result<f64, QuadError>
where
    G: Fn(f64, f64) -> f64,
{
    if !(a <= b) {
        return Err(QuadError::Interval { a, b });
    }
    if a == b {
        return Ok(0.0);
    }
    let (x, w) = GK15.scaled(a, b);
    let mut sum = 0.0;
    for k in 0..N_NODES {
        let outer = x[k];
        let inner = integrate(|s| g(outer, s), 0.0, outer.max(0.0))?;
        sum += w[k] * inner;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_invariants() {
        let r = QuadratureRule::gauss_kronrod_15();
        assert!((r.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        for k in 0..N_NODES {
            assert_eq!(r.nodes[k], -r.nodes[N_NODES - 1 - k]);
            assert!(r.weights[k] > 0.0);
            assert_eq!(r.nodes[k], GK15.nodes[k]);
            assert_eq!(r.weights[k], GK15.weights[k]);
        }
    }

    #[test]
    fn small_cases() {
        assert!((integrate(|x| x * x, 0.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-14);
        assert_eq!(integrate(|x| x, 2.0, 2.0).unwrap(), 0.0);
        let e = integrate(f64::exp, 0.0, 3.0).unwrap();
        assert!((e - (3f64.exp() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn nested_small_cases() {
        assert!((integrate_nested(|_, _| 1.0, 0.0, 2.0).unwrap() - 2.0).abs() < 1e-13);
        assert!((integrate_nested(|_, s| s, 0.0, 1.0).unwrap() - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn non_finite_reports_node() {
        let err = integrate(|x| if x > 0.99 { f64::NAN } else { x }, 0.0, 1.0).unwrap_err();
        match err {
            QuadError::NonFinite { node, x, .. } => {
                assert_eq!(node, 14);
                assert!(x > 0.99);
            }
            other => panic!("{other:?}"),
        }
        assert!(integrate(|x| x, 1.0, 0.0).is_err());
    }
}
