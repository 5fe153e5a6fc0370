//! B-spline and natural cubic spline bases.
//!
//! B-splines use a clamped knot sequence: each boundary knot is repeated
//! `degree + 1` times around the internal knots. The natural cubic basis is
//! derived from the cubic B-spline basis by dropping the first column (so
//! every function vanishes at the lower boundary) and projecting onto the
//! null space of the second-derivative constraints at both boundaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("time {t} outside spline support [{low}, {high}]")]
    OutOfRange { t: f64, low: f64, high: f64 },
    #[error("invalid knot specification: {0}")]
    Specification(String),
}

/// Boundary and internal knots of a spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotVector {
    pub boundary: (f64, f64),
    #[serde(default)]
    pub internal: Vec<f64>,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_degree() -> usize {
    3
}

impl KnotVector {
    pub fn new(boundary: (f64, f64), internal: Vec<f64>, degree: usize) -> Result<Self, BasisError> {
        let kv = KnotVector {
            boundary,
            internal,
            degree,
        };
        kv.check()?;
        Ok(kv)
    }

    pub fn cubic(low: f64, high: f64, internal: &[f64]) -> Result<Self, BasisError> {
        Self::new((low, high), internal.to_vec(), 3)
    }

    pub fn check(&self) -> Result<(), BasisError> {
        let (low, high) = self.boundary;
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(BasisError::Specification(format!(
                "boundary ({low}, {high}) must be finite and increasing"
            )));
        }
        if self.internal.len() + 2 < self.degree + 1 {
            return Err(BasisError::Specification(format!(
                "{} knots are too few for degree {}",
                self.internal.len() + 2,
                self.degree
            )));
        }
        let mut prev = low;
        for &k in &self.internal {
            if !(k > prev) {
                return Err(BasisError::Specification(format!(
                    "internal knots must be strictly increasing inside the boundary, got {k} after {prev}"
                )));
            }
            prev = k;
        }
        if !(prev < high) {
            return Err(BasisError::Specification(format!(
                "internal knot {prev} not below upper boundary {high}"
            )));
        }
        Ok(())
    }

    /// Number of B-spline basis functions.
    pub fn n_bspline(&self) -> usize {
        self.internal.len() + self.degree + 1
    }

    /// Number of natural cubic spline basis functions.
    pub fn n_natural(&self) -> usize {
        self.internal.len() + 1
    }

    fn augmented(&self) -> Vec<f64> {
        let p = self.degree;
        let mut t = Vec::with_capacity(self.internal.len() + 2 * (p + 1));
        t.extend(std::iter::repeat_n(self.boundary.0, p + 1));
        t.extend_from_slice(&self.internal);
        t.extend(std::iter::repeat_n(self.boundary.1, p + 1));
        t
    }

    fn check_range(&self, t: f64) -> Result<(), BasisError> {
        let (low, high) = self.boundary;
        if t.is_nan() || t < low || t > high {
            return Err(BasisError::OutOfRange { t, low, high });
        }
        Ok(())
    }
}

/// Evaluation of a spline basis at time points: rows are times, columns
/// basis functions.
pub type BasisMatrix = DMatrix<f64>;

/// Values of the `degree`-th order B-splines at `x` over the augmented
/// knots, or their `deriv`-th derivative. Returns a full-length row.
fn bspline_row(aug: &[f64], degree: usize, x: f64, deriv: usize) -> Vec<f64> {
    let n_funcs = aug.len() - degree - 1;
    let mut out = vec![0.0; n_funcs];
    if deriv > degree {
        return out;
    }
    // Knot span index: largest mu with aug[mu] <= x < aug[mu+1]; the
    // upper boundary is folded into the last nonempty span.
    let last = aug.len() - degree - 2;
    let mut mu = degree;
    while mu < last && x >= aug[mu + 1] {
        mu += 1;
    }

    // Nonzero basis functions of degree d are indices mu-d..=mu.
    let low_degree = degree - deriv;
    let mut vals = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for d in 1..=low_degree {
        let mut next = vec![0.0; degree + 1];
        for r in 0..=d {
            let i = mu + r - d;
            let mut v = 0.0;
            if r >= 1 {
                let denom = aug[i + d] - aug[i];
                if denom > 0.0 {
                    v += (x - aug[i]) / denom * vals[r - 1];
                }
            }
            if r < d {
                let denom = aug[i + d + 1] - aug[i + 1];
                if denom > 0.0 {
                    v += (aug[i + d + 1] - x) / denom * vals[r];
                }
            }
            next[r] = v;
        }
        vals = next;
    }
    // Raise back to full degree through the derivative recursion
    // dB_{i,d}/dx = d [B_{i,d-1}/(t_{i+d}-t_i) - B_{i+1,d-1}/(t_{i+d+1}-t_{i+1})].
    for d in (low_degree + 1)..=degree {
        let mut next = vec![0.0; degree + 1];
        for r in 0..=d {
            let i = mu + r - d;
            let mut v = 0.0;
            if r >= 1 {
                let denom = aug[i + d] - aug[i];
                if denom > 0.0 {
                    v += d as f64 / denom * vals[r - 1];
                }
            }
            if r < d {
                let denom = aug[i + d + 1] - aug[i + 1];
                if denom > 0.0 {
                    v -= d as f64 / denom * vals[r];
                }
            }
            next[r] = v;
        }
        vals = next;
    }
    for r in 0..=degree {
        let idx = mu + r - degree;
        if idx < n_funcs {
            out[idx] = vals[r];
        }
    }
    out
}

fn bspline_matrix(t: &[f64], knots: &KnotVector, deriv: usize) -> Result<BasisMatrix, BasisError> {
    knots.check()?;
    let aug = knots.augmented();
    let n = knots.n_bspline();
    let mut m = DMatrix::zeros(t.len(), n);
    for (row, &x) in t.iter().enumerate() {
        knots.check_range(x)?;
        let vals = bspline_row(&aug, knots.degree, x, deriv);
        for (col, v) in vals.into_iter().enumerate() {
            m[(row, col)] = v;
        }
    }
    Ok(m)
}

/// B-spline basis values `B_q(t_l)`.
pub fn bspline_eval(t: &[f64], knots: &KnotVector) -> Result<BasisMatrix, BasisError> {
    bspline_matrix(t, knots, 0)
}

/// Derivative of order `order` of the B-spline basis.
pub fn bspline_deriv(t: &[f64], knots: &KnotVector, order: usize) -> Result<BasisMatrix, BasisError> {
    bspline_matrix(t, knots, order)
}

/// Orthonormal basis of the null space of the boundary second-derivative
/// constraints, as an `(n_bspline - 1) x n_natural` matrix.
fn natural_projection(knots: &KnotVector) -> Result<DMatrix<f64>, BasisError> {
    if knots.degree != 3 {
        return Err(BasisError::Specification(format!(
            "natural splines are cubic, got degree {}",
            knots.degree
        )));
    }
    let (low, high) = knots.boundary;
    let constraint = bspline_matrix(&[low, high], knots, 2)?;
    let n = constraint.ncols() - 1;
    // Transposed constraints with the first column dropped, n x 2.
    let c = constraint.columns(1, n).transpose();
    // Full orthogonal factor of the QR of [C | I]: the leading two columns
    // span the constraint space, the remainder its complement.
    let mut aug = DMatrix::zeros(n, n + 2);
    aug.columns_mut(0, 2).copy_from(&c);
    aug.columns_mut(2, n).fill_with_identity();
    let q = aug.qr().q();
    Ok(q.columns(2, n - 2).into_owned())
}

fn natural_matrix(t: &[f64], knots: &KnotVector, deriv: usize) -> Result<BasisMatrix, BasisError> {
    let proj = natural_projection(knots)?;
    let full = bspline_matrix(t, knots, deriv)?;
    let n = full.ncols() - 1;
    Ok(full.columns(1, n) * proj)
}

/// Natural cubic spline basis of dimension `internal + 1`, zero at the
/// lower boundary.
pub fn natural_cubic_eval(t: &[f64], knots: &KnotVector) -> Result<BasisMatrix, BasisError> {
    natural_matrix(t, knots, 0)
}

/// Derivative of order `order` of the natural cubic basis.
pub fn natural_cubic_deriv(
    t: &[f64],
    knots: &KnotVector,
    order: usize,
) -> Result<BasisMatrix, BasisError> {
    natural_matrix(t, knots, order)
}

/// Which basis family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineKind {
    BSpline,
    NaturalCubic,
}

/// First derivative of the chosen basis, computed analytically.
pub fn basis_deriv(t: &[f64], knots: &KnotVector, kind: SplineKind) -> Result<BasisMatrix, BasisError> {
    match kind {
        SplineKind::BSpline => bspline_deriv(t, knots, 1),
        SplineKind::NaturalCubic => natural_cubic_deriv(t, knots, 1),
    }
}

/// A basis with its knot sequence and natural-spline projection resolved
/// once, for repeated row evaluation.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    knots: KnotVector,
    kind: SplineKind,
    aug: Vec<f64>,
    proj: Option<DMatrix<f64>>,
}

impl SplineBasis {
    pub fn new(knots: KnotVector, kind: SplineKind) -> Result<Self, BasisError> {
        knots.check()?;
        let proj = match kind {
            SplineKind::BSpline => None,
            SplineKind::NaturalCubic => Some(natural_projection(&knots)?),
        };
        let aug = knots.augmented();
        Ok(SplineBasis {
            knots,
            kind,
            aug,
            proj,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn kind(&self) -> SplineKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            SplineKind::BSpline => self.knots.n_bspline(),
            SplineKind::NaturalCubic => self.knots.n_natural(),
        }
    }

    /// Basis values (or derivative of order `deriv`) at a single time.
    pub fn row(&self, t: f64, deriv: usize) -> Result<Vec<f64>, BasisError> {
        self.knots.check_range(t)?;
        let full = bspline_row(&self.aug, self.knots.degree, t, deriv);
        Ok(match &self.proj {
            None => full,
            Some(p) => {
                let mut out = vec![0.0; p.ncols()];
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (0..p.nrows()).map(|i| full[i + 1] * p[(i, j)]).sum();
                }
                out
            }
        })
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Internal knots at equally spaced percentiles of `times`. Ties are broken
/// by nudging the later knot upward.
pub fn percentile_knots(times: &[f64], n_internal: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
    if sorted.is_empty() || n_internal == 0 {
        return Vec::new();
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut knots: Vec<f64> = (1..=n_internal)
        .map(|k| quantile(&sorted, k as f64 / (n_internal + 1) as f64))
        .collect();
    for k in 1..knots.len() {
        if knots[k] <= knots[k - 1] {
            let bump = f64::EPSILON * knots[k - 1].abs().max(1.0) * 16.0;
            knots[k] = knots[k - 1] + bump;
        }
    }
    knots
}

/// Number of internal knots for a cubic log-baseline-hazard spline such that
/// the total survival parameter count is near `n_events / 15` (midway in the
/// 1/10 to 1/20 events-per-parameter band). `other_params` counts the
/// covariate and association coefficients.
pub fn rule_of_thumb_internal_knots(n_events: usize, other_params: usize, degree: usize) -> usize {
    let budget = (n_events as f64 / 15.0).round() as usize;
    // Spline coefficients: intercept + internal + degree + 1.
    let fixed = other_params + 1 + degree + 1;
    budget.saturating_sub(fixed).min(10)
}
