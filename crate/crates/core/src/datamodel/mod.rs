//! Subjects, datasets, ingestion and model configuration.

mod config;
mod csv_io;

pub use config::{
    Association, Baseline, FixedDesign, FixedParams, JointModelSpec, PriorSpec, RandomDesign,
    SurvivalDesign, TimeBasis, WeightFn, WeightKind,
};
pub use csv_io::{
    load_dataset, load_longitudinal_csv, load_survival_csv, merge, write_dataset_csv,
    Categorical, IngestConfig, IngestError, LongitudinalData, SurvivalData,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Declared transform of the longitudinal outcome, applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    Sqrt,
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::None => v,
            Transform::Sqrt => v.sqrt(),
        }
    }

    pub fn invert(self, v: f64) -> f64 {
        match self {
            Transform::None => v,
            Transform::Sqrt => v * v,
        }
    }
}

/// One individual: baseline covariates, biomarker history and the observed
/// event time with its indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub w: Vec<f64>,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub event_time: f64,
    pub event: bool,
}

impl Subject {
    pub fn n_meas(&self) -> usize {
        self.times.len()
    }

    fn violations(&self, n_cov: usize, out: &mut Vec<String>) {
        let id = &self.id;
        if self.times.len() != self.y.len() {
            out.push(format!(
                "subject {id}: {} times but {} values",
                self.times.len(),
                self.y.len()
            ));
        }
        if self.times.is_empty() {
            out.push(format!("subject {id}: no measurements"));
        }
        if self.w.len() != n_cov {
            out.push(format!(
                "subject {id}: {} covariates, expected {n_cov}",
                self.w.len()
            ));
        }
        for (k, v) in self.w.iter().enumerate() {
            if !v.is_finite() {
                out.push(format!("subject {id}: covariate {k} missing or non-finite"));
            }
        }
        if !(self.event_time.is_finite() && self.event_time > 0.0) {
            out.push(format!(
                "subject {id}: event time {} must be positive",
                self.event_time
            ));
        }
        for pair in self.times.windows(2) {
            if !(pair[1] > pair[0]) {
                out.push(format!(
                    "subject {id}: measurement times not strictly increasing at {}",
                    pair[1]
                ));
            }
        }
        for &t in &self.times {
            if !(t >= 0.0) || t > self.event_time {
                out.push(format!(
                    "subject {id}: measurement time {t} outside [0, {}]",
                    self.event_time
                ));
            }
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            out.push(format!("subject {id}: non-finite biomarker value"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub covariate_names: Vec<String>,
    #[serde(default)]
    pub transform: Transform,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>, covariate_names: Vec<String>) -> Self {
        Dataset {
            subjects,
            covariate_names,
            transform: Transform::None,
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    /// Dataset restricted to subjects for which `keep` holds.
    pub fn filter<F: Fn(&Subject) -> bool>(&self, keep: F) -> Dataset {
        Dataset {
            subjects: self.subjects.iter().filter(|s| keep(s)).cloned().collect(),
            covariate_names: self.covariate_names.clone(),
            transform: self.transform,
        }
    }

    /// SHA-256 over the exact bit patterns of every stored value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}\n", self.transform));
        for name in &self.covariate_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for s in &self.subjects {
            h.update(b"\x01");
            h.update(s.id.as_bytes());
            h.update([0u8, s.event as u8]);
            h.update(s.event_time.to_bits().to_le_bytes());
            for v in &s.w {
                h.update(v.to_bits().to_le_bytes());
            }
            for (t, y) in s.times.iter().zip(&s.y) {
                h.update(t.to_bits().to_le_bytes());
                h.update(y.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Summary counts and every invariant violation found in a dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_subjects: usize,
    pub n_measurements: usize,
    pub n_events: usize,
    pub n_censored: usize,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport {
        n_subjects: ds.subjects.len(),
        ..Default::default()
    };
    if ds.subjects.is_empty() {
        report.warnings.push("dataset has no subjects".into());
    }
    let mut seen = std::collections::HashSet::new();
    for s in &ds.subjects {
        if !seen.insert(s.id.as_str()) {
            report.violations.push(format!("duplicate subject id {}", s.id));
        }
        report.n_measurements += s.times.len();
        if s.event {
            report.n_events += 1;
        } else {
            report.n_censored += 1;
        }
        s.violations(ds.covariate_names.len(), &mut report.violations);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, n: usize, event: bool) -> Subject {
        Subject {
            id: id.into(),
            w: vec![1.0],
            times: (0..n).map(|k| k as f64).collect(),
            y: vec![1.0; n],
            event_time: n as f64,
            event,
        }
    }

    #[test]
    fn counts_match_cohort_shape() {
        // 286 subjects, 1241 measurements, 125 events.
        let subjects: Vec<Subject> = (0..286)
            .map(|i| subject(&format!("s{i}"), if i < 97 { 5 } else { 4 }, i < 125))
            .collect();
        let ds = Dataset::new(subjects, vec!["x".into()]);
        let r = validate(&ds);
        assert_eq!(r.n_subjects, 286);
        assert_eq!(r.n_measurements, 1241);
        assert_eq!(r.n_events, 125);
        assert_eq!(r.n_censored, 161);
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn empty_dataset_warns() {
        let r = validate(&Dataset::new(vec![], vec![]));
        assert_eq!(r.n_subjects, 0);
        assert_eq!(r.n_measurements, 0);
        assert!(!r.warnings.is_empty());
        assert!(r.is_valid());
    }

    #[test]
    fn missing_covariate_is_violation() {
        let mut a = subject("a", 2, false);
        let b = subject("b", 2, true);
        a.w = vec![f64::NAN];
        let r = validate(&Dataset::new(vec![a, b], vec!["x".into()]));
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].contains("subject a"));
    }

    #[test]
    fn fingerprint_sensitive_to_values() {
        let ds = Dataset::new(vec![subject("a", 2, false)], vec!["x".into()]);
        let mut ds2 = ds.clone();
        assert_eq!(ds.fingerprint(), ds2.fingerprint());
        ds2.subjects[0].y[1] += 1e-15;
        assert_ne!(ds.fingerprint(), ds2.fingerprint());
    }
}
