use jmbma::datamodel::{load_dataset, validate, write_dataset_csv, Dataset, IngestConfig, Subject};
use proptest::prelude::*;

fn subject_strategy(idx: usize) -> impl Strategy<Value = Subject> {
    (
        proptest::collection::btree_set(0u32..100_000, 1..6),
        proptest::collection::vec(-1e3f64..1e3, 6),
        0.0f64..5.0,
        any::<bool>(),
        -10.0f64..10.0,
    )
        .prop_map(move |(ticks, ys, extra, event, w)| {
            let times: Vec<f64> = ticks.iter().map(|&t| t as f64 / 7919.0).collect();
            let n = times.len();
            let end = times[n - 1] + extra + 1e-3;
            Subject {
                id: format!("s{idx}"),
                w: vec![w],
                y: ys[..n].to_vec(),
                times,
                event_time: end,
                event,
            }
        })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..6)
        .prop_flat_map(|n| (0..n).map(subject_strategy).collect::<Vec<_>>())
        .prop_map(|subjects| Dataset::new(subjects, vec!["x".into()]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn write_then_load_is_exact(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let (l, s) = (dir.path().join("l.csv"), dir.path().join("s.csv"));
        write_dataset_csv(&ds, &l, &s).unwrap();
        let back = load_dataset(&l, &s, &IngestConfig::default()).unwrap();
        prop_assert_eq!(&back.covariate_names, &ds.covariate_names);
        prop_assert_eq!(back.subjects.len(), ds.subjects.len());
        for (a, b) in back.subjects.iter().zip(&ds.subjects) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert!(a.times.iter().zip(&b.times).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(a.y.iter().zip(&b.y).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(a.event_time.to_bits(), b.event_time.to_bits());
            prop_assert_eq!(a.event, b.event);
            prop_assert_eq!(&a.w, &b.w);
        }
        prop_assert_eq!(back.fingerprint(), ds.fingerprint());
        prop_assert!(validate(&back).is_valid(), "{:?}", validate(&back).violations);
    }
}

#[test]
fn measurement_after_event_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (l, s) = (dir.path().join("l.csv"), dir.path().join("s.csv"));
    std::fs::write(&l, "id,time,value\n1,0,1.0\n1,3,2.0\n").unwrap();
    std::fs::write(&s, "id,event_time,event_indicator\n1,2.5,1\n").unwrap();
    assert!(load_dataset(&l, &s, &IngestConfig::default()).is_err());
}
