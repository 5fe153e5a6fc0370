use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, Subject, Transform};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: u64,
        column: String,
        value: String,
    },
    #[error("row {row}: duplicate measurement for subject {id} at time {time}")]
    Duplicate { row: u64, id: String, time: f64 },
    #[error("row {row}: {message}")]
    Domain { row: u64, message: String },
    #[error("subject ids do not match: missing from survival file {missing_survival:?}, missing from longitudinal file {missing_longitudinal:?}")]
    Join {
        missing_survival: Vec<String>,
        missing_longitudinal: Vec<String>,
    },
    #[error("subject {id}: measurement at {time} after event time {event_time}")]
    AfterEvent {
        id: String,
        time: f64,
        event_time: f64,
    },
}

/// A categorical covariate expanded into dummy columns named
/// `<column><level>`, omitting the reference level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Categorical {
    pub column: String,
    pub reference: String,
    /// Non-reference levels in column order; observed levels (sorted) when
    /// absent.
    #[serde(default)]
    pub levels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    #[serde(default)]
    pub transform: Transform,
    #[serde(default)]
    pub categorical: Vec<Categorical>,
}

/// Measurements grouped by subject, in order of first appearance, each
/// sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalData {
    pub records: Vec<(String, Vec<(f64, f64)>)>,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalData {
    pub ids: Vec<String>,
    pub event_time: Vec<f64>,
    pub event: Vec<bool>,
    pub w: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IngestError::MissingColumn(name.into()))
}

fn number(rec: &csv::StringRecord, idx: usize, name: &str, row: u64) -> Result<f64, IngestError> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::Parse {
            row,
            column: name.into(),
            value: raw.into(),
        })
}

fn row_number(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

/// Reads `id,time,value,...`. Extra columns are accepted and ignored;
/// baseline covariates come from the survival file.
pub fn load_longitudinal_csv(
    path: impl AsRef<Path>,
    cfg: &IngestConfig,
) -> Result<LongitudinalData, IngestError> {
    let mut rdr = open(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let (i_id, i_t, i_v) = (
        column(&headers, "id")?,
        column(&headers, "time")?,
        column(&headers, "value")?,
    );
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(f64, f64, u64)>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_number(&rec);
        let id = rec.get(i_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(IngestError::Domain {
                row,
                message: "empty subject id".into(),
            });
        }
        let t = number(&rec, i_t, "time", row)?;
        if t < 0.0 {
            return Err(IngestError::Domain {
                row,
                message: format!("negative measurement time {t}"),
            });
        }
        let v = number(&rec, i_v, "value", row)?;
        let v = cfg.transform.apply(v);
        if !v.is_finite() {
            return Err(IngestError::Domain {
                row,
                message: format!("value outside the domain of the {:?} transform", cfg.transform),
            });
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        entry.push((t, v, row));
    }
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let mut meas = groups.remove(&id).unwrap_or_default();
        meas.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.2.cmp(&b.2)));
        for pair in meas.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(IngestError::Duplicate {
                    row: pair[1].2.max(pair[0].2),
                    id,
                    time: pair[1].0,
                });
            }
        }
        records.push((id, meas.into_iter().map(|(t, v, _)| (t, v)).collect()));
    }
    Ok(LongitudinalData {
        records,
        transform: cfg.transform,
    })
}

/// Reads `id,event_time,event_indicator,<covariates...>`. Numeric covariate
/// cells left empty load as NaN and are reported by `validate`.
pub fn load_survival_csv(
    path: impl AsRef<Path>,
    cfg: &IngestConfig,
) -> Result<SurvivalData, IngestError> {
    let mut rdr = open(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let i_id = column(&headers, "id")?;
    let i_t = column(&headers, "event_time")?;
    let i_d = column(&headers, "event_indicator")?;
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != i_id && *i != i_t && *i != i_d)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    for c in &cfg.categorical {
        if !cov_cols.iter().any(|(_, h)| *h == c.column) {
            return Err(IngestError::MissingColumn(c.column.clone()));
        }
    }

    let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;

    // Resolve categorical levels before encoding.
    let mut levels: HashMap<&str, Vec<String>> = HashMap::new();
    for c in &cfg.categorical {
        let lv = match &c.levels {
            Some(l) => l.iter().filter(|l| **l != c.reference).cloned().collect(),
            None => {
                let idx = cov_cols.iter().find(|(_, h)| *h == c.column).unwrap().0;
                let set: BTreeSet<String> = rows
                    .iter()
                    .map(|r| r.get(idx).unwrap_or("").to_string())
                    .filter(|v| !v.is_empty() && *v != c.reference)
                    .collect();
                set.into_iter().collect()
            }
        };
        levels.insert(c.column.as_str(), lv);
    }

    let mut covariate_names = Vec::new();
    for (_, h) in &cov_cols {
        match levels.get(h.as_str()) {
            Some(lv) => covariate_names.extend(lv.iter().map(|l| format!("{h}{l}"))),
            None => covariate_names.push(h.clone()),
        }
    }

    let mut out = SurvivalData {
        ids: Vec::new(),
        event_time: Vec::new(),
        event: Vec::new(),
        w: Vec::new(),
        covariate_names,
    };
    let mut seen = std::collections::HashSet::new();
    for rec in &rows {
        let row = row_number(rec);
        let id = rec.get(i_id).unwrap_or("").to_string();
        if !seen.insert(id.clone()) {
            return Err(IngestError::Domain {
                row,
                message: format!("subject {id} appears more than once"),
            });
        }
        let t = number(rec, i_t, "event_time", row)?;
        if t <= 0.0 {
            return Err(IngestError::Domain {
                row,
                message: format!("event time {t} must be positive"),
            });
        }
        let d = match rec.get(i_d).unwrap_or("") {
            "0" => false,
            "1" => true,
            other => {
                return Err(IngestError::Domain {
                    row,
                    message: format!("event indicator must be 0 or 1, got `{other}`"),
                })
            }
        };
        let mut w = Vec::with_capacity(out.covariate_names.len());
        for (idx, name) in &cov_cols {
            let raw = rec.get(*idx).unwrap_or("");
            match levels.get(name.as_str()) {
                Some(lv) => {
                    let reference = &cfg
                        .categorical
                        .iter()
                        .find(|c| c.column == *name)
                        .unwrap()
                        .reference;
                    if raw != reference && !lv.iter().any(|l| l == raw) {
                        return Err(IngestError::Domain {
                            row,
                            message: format!("unknown level `{raw}` for `{name}`"),
                        });
                    }
                    w.extend(lv.iter().map(|l| if l == raw { 1.0 } else { 0.0 }));
                }
                None if raw.is_empty() => w.push(f64::NAN),
                None => w.push(number(rec, *idx, name, row)?),
            }
        }
        out.ids.push(id);
        out.event_time.push(t);
        out.event.push(d);
        out.w.push(w);
    }
    Ok(out)
}

/// Joins longitudinal and survival records by id, in survival-file order.
pub fn merge(long: LongitudinalData, surv: SurvivalData) -> Result<Dataset, IngestError> {
    let mut by_id: HashMap<String, Vec<(f64, f64)>> = long.records.into_iter().collect();
    let missing_survival: Vec<String> = {
        let surv_ids: std::collections::HashSet<&String> = surv.ids.iter().collect();
        let mut m: Vec<String> = by_id.keys().filter(|k| !surv_ids.contains(k)).cloned().collect();
        m.sort();
        m
    };
    let missing_longitudinal: Vec<String> =
        surv.ids.iter().filter(|id| !by_id.contains_key(*id)).cloned().collect();
    if !missing_survival.is_empty() || !missing_longitudinal.is_empty() {
        return Err(IngestError::Join {
            missing_survival,
            missing_longitudinal,
        });
    }
    let mut subjects = Vec::with_capacity(surv.ids.len());
    for (k, id) in surv.ids.into_iter().enumerate() {
        let meas = by_id.remove(&id).unwrap();
        let event_time = surv.event_time[k];
        if let Some(&(t, _)) = meas.iter().find(|(t, _)| *t > event_time) {
            return Err(IngestError::AfterEvent {
                id,
                time: t,
                event_time,
            });
        }
        subjects.push(Subject {
            id,
            w: surv.w[k].clone(),
            times: meas.iter().map(|m| m.0).collect(),
            y: meas.iter().map(|m| m.1).collect(),
            event_time,
            event: surv.event[k],
        });
    }
    Ok(Dataset {
        subjects,
        covariate_names: surv.covariate_names,
        transform: long.transform,
    })
}

pub fn load_dataset(
    long_path: impl AsRef<Path>,
    surv_path: impl AsRef<Path>,
    cfg: &IngestConfig,
) -> Result<Dataset, IngestError> {
    let long = load_longitudinal_csv(long_path, cfg)?;
    let surv = load_survival_csv(surv_path, cfg)?;
    merge(long, surv)
}

/// Decimal text with 17 significant digits; parses back bit-identically.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the two ingestion files. Values are written as stored (already
/// transformed), covariates as their encoded numeric columns.
pub fn write_dataset_csv(
    ds: &Dataset,
    long_path: impl AsRef<Path>,
    surv_path: impl AsRef<Path>,
) -> Result<(), IngestError> {
    let lp = long_path.as_ref();
    let mut w = csv::Writer::from_path(lp)?;
    w.write_record(["id", "time", "value"])?;
    for s in &ds.subjects {
        for (t, y) in s.times.iter().zip(&s.y) {
            w.write_record([s.id.clone(), fmt17(*t), fmt17(*y)])?;
        }
    }
    w.flush().map_err(|source| IngestError::Io {
        path: lp.display().to_string(),
        source,
    })?;

    let sp = surv_path.as_ref();
    let mut w = csv::Writer::from_path(sp)?;
    let mut header = vec![
        "id".to_string(),
        "event_time".to_string(),
        "event_indicator".to_string(),
    ];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.subjects {
        let mut rec = vec![
            s.id.clone(),
            fmt17(s.event_time),
            if s.event { "1".into() } else { "0".into() },
        ];
        rec.extend(s.w.iter().map(|v| if v.is_nan() { String::new() } else { fmt17(*v) }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: sp.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn groups_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "id,time,value\na,2,3\na,0,1\na,1,2\n");
        let l = load_longitudinal_csv(&p, &IngestConfig::default()).unwrap();
        assert_eq!(l.records.len(), 1);
        assert_eq!(l.records[0].1, vec![(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]);
    }

    #[test]
    fn duplicate_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "id,time,value\na,0,1\nb,0,1\na,0,2\n");
        match load_longitudinal_csv(&p, &IngestConfig::default()) {
            Err(IngestError::Duplicate { row, id, .. }) => {
                assert_eq!(row, 4);
                assert_eq!(id, "a");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "id,time\na,0\n");
        assert!(matches!(
            load_longitudinal_csv(&p, &IngestConfig::default()),
            Err(IngestError::MissingColumn(c)) if c == "value"
        ));
        let p = write(&dir, "l2.csv", "id,time,value\na,zero,1\n");
        assert!(matches!(
            load_longitudinal_csv(&p, &IngestConfig::default()),
            Err(IngestError::Parse { row: 2, .. })
        ));
        let p = write(&dir, "l3.csv", "id,time,value\na,0,\n");
        assert!(matches!(
            load_longitudinal_csv(&p, &IngestConfig::default()),
            Err(IngestError::Parse { .. })
        ));
    }

    #[test]
    fn merge_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(&dir, "l.csv", "id,time,value\na,0,1\na,5,2\nb,0,1\n");
        let s = write(&dir, "s.csv", "id,event_time,event_indicator,age\na,6,1,50\nb,3,0,40\n");
        let ds = load_dataset(&l, &s, &IngestConfig::default()).unwrap();
        assert_eq!(ds.subjects.len(), 2);
        assert_eq!(ds.covariate_names, vec!["age"]);
        assert_eq!(ds.subjects[0].w, vec![50.0]);

        let s = write(&dir, "s2.csv", "id,event_time,event_indicator\na,4,1\nb,3,0\n");
        assert!(matches!(
            load_dataset(&l, &s, &IngestConfig::default()),
            Err(IngestError::AfterEvent { .. })
        ));
        let s = write(&dir, "s3.csv", "id,event_time,event_indicator\na,6,2\nb,3,0\n");
        assert!(matches!(
            load_dataset(&l, &s, &IngestConfig::default()),
            Err(IngestError::Domain { .. })
        ));
        let s = write(&dir, "s4.csv", "id,event_time,event_indicator\na,6,1\nc,3,0\n");
        match load_dataset(&l, &s, &IngestConfig::default()) {
            Err(IngestError::Join {
                missing_survival,
                missing_longitudinal,
            }) => {
                assert_eq!(missing_survival, vec!["b"]);
                assert_eq!(missing_longitudinal, vec!["c"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn categorical_and_transform() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(&dir, "l.csv", "id,time,value\na,0,16\nb,0,9\n");
        let s = write(
            &dir,
            "s.csv",
            "id,event_time,event_indicator,op,age\na,6,1,SI,50\nb,3,0,RR,40\n",
        );
        let cfg = IngestConfig {
            transform: Transform::Sqrt,
            categorical: vec![Categorical {
                column: "op".into(),
                reference: "SI".into(),
                levels: None,
            }],
        };
        let ds = load_dataset(&l, &s, &cfg).unwrap();
        assert_eq!(ds.covariate_names, vec!["opRR", "age"]);
        assert_eq!(ds.subjects[0].w, vec![0.0, 50.0]);
        assert_eq!(ds.subjects[1].w, vec![1.0, 40.0]);
        assert_eq!(ds.subjects[0].y, vec![4.0]);
        assert_eq!(ds.transform, Transform::Sqrt);
    }
}
