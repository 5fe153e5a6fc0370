use serde::{Deserialize, Serialize};

use crate::basis::KnotVector;

/// Time-dependent columns of the mixed-model design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeBasis {
    /// No time dependence.
    Constant,
    /// A single column `t`.
    Linear,
    NaturalCubic { knots: KnotVector },
    Bspline { knots: KnotVector },
}

/// Fixed-effects design: an intercept plus the time basis, each multiplied
/// by every dummy in `by` (group-specific curves) when `by` is nonempty,
/// followed by time-constant covariate main effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedDesign {
    pub time: TimeBasis,
    #[serde(default)]
    pub by: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// Random-effects design: optional intercept plus, optionally, the same
/// time basis as the fixed part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDesign {
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub time: bool,
}

fn yes() -> bool {
    true
}

/// Baseline covariates of the relative-risk model. `intercept` adds a
/// constant column, needed for the Weibull baseline (whose scale lives in
/// that coefficient) and not allowed with the spline baseline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalDesign {
    #[serde(default)]
    pub intercept: bool,
    #[serde(default)]
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    Value,
    ValueSlope,
    Cumulative,
    WeightedCumulative,
    RandomEffects,
}

impl Association {
    pub const ALL: [Association; 5] = [
        Association::Value,
        Association::ValueSlope,
        Association::Cumulative,
        Association::WeightedCumulative,
        Association::RandomEffects,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Association::Value => "value",
            Association::ValueSlope => "value_slope",
            Association::Cumulative => "cumulative",
            Association::WeightedCumulative => "weighted_cumulative",
            Association::RandomEffects => "random_effects",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Normal,
    StudentT { df: f64 },
    Logistic,
}

/// Weight function of the weighted cumulative effect, a density evaluated
/// at the lag `t - s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFn {
    pub kind: WeightKind,
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn {
            kind: WeightKind::Normal,
            scale: 1.0,
        }
    }
}

impl WeightFn {
    pub fn eval(&self, lag: f64) -> f64 {
        let z = lag / self.scale;
        let d = match self.kind {
            WeightKind::Normal => (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            WeightKind::StudentT { df } => {
                use statrs::function::gamma::ln_gamma;
                let c = ln_gamma(0.5 * (df + 1.0))
                    - ln_gamma(0.5 * df)
                    - 0.5 * (df * std::f64::consts::PI).ln();
                (c - 0.5 * (df + 1.0) * (1.0 + z * z / df).ln()).exp()
            }
            WeightKind::Logistic => {
                let e = (-z.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        };
        d / self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    /// `log h0(t) = g0 + sum_q g_q B_q(t)` with a B-spline basis.
    BsplineLogHazard { knots: KnotVector },
    /// `h0(t) = s t^(s-1)` with shape `s` estimated.
    Weibull,
}

/// Diffuse prior scales. The normal prior on the log Weibull shape has sd
/// `log_shape_sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub beta_sd: f64,
    pub gamma_sd: f64,
    pub gamma_h0_sd: f64,
    pub alpha_sd: f64,
    pub log_shape_sd: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    /// Degrees of freedom of the inverse-Wishart prior; `dim(b) + 2` when
    /// absent.
    pub wishart_df: Option<f64>,
    /// Scale matrix (rows); identity when absent.
    pub wishart_scale: Option<Vec<Vec<f64>>>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            beta_sd: 100.0,
            gamma_sd: 100.0,
            gamma_h0_sd: 10.0,
            alpha_sd: 100.0,
            log_shape_sd: 10.0,
            sigma2_shape: 0.01,
            sigma2_rate: 0.01,
            wishart_df: None,
            wishart_scale: None,
        }
    }
}

/// Parameter groups held at given values instead of being sampled.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedParams {
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub weibull_shape: Option<f64>,
}

impl FixedParams {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_none() && self.weibull_shape.is_none()
    }
}

/// Complete description of one candidate joint model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointModelSpec {
    pub fixed_design: FixedDesign,
    pub random_design: RandomDesign,
    #[serde(default)]
    pub survival_design: SurvivalDesign,
    pub assoc: Association,
    pub baseline: Baseline,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub weight_fn: Option<WeightFn>,
    #[serde(default, skip_serializing_if = "FixedParams::is_empty")]
    pub fixed_params: FixedParams,
}

impl JointModelSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn with_assoc(&self, assoc: Association) -> Self {
        let mut s = self.clone();
        s.assoc = assoc;
        if assoc == Association::WeightedCumulative && s.weight_fn.is_none() {
            s.weight_fn = Some(WeightFn::default());
        }
        s
    }
}
