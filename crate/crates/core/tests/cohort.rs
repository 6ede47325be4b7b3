use rtnag::cohort::{
    generate_cohort, inject_missingness, shifted_cohort, subject_folds, Cohort, CohortConfig, Diagnosis, Payload,
    MIN_VISITS, VISIT_GRID,
};
use rtnag::dataset::{read_cohort, read_dataset, write_cohort, write_dataset};
use std::collections::BTreeSet;

fn cohort(n: usize, seed: u64) -> Cohort {
    generate_cohort(&CohortConfig {
        n_subjects: n,
        seed,
        ..CohortConfig::default()
    })
    .unwrap()
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(cohort(40, 7), cohort(40, 7));
    assert_ne!(cohort(40, 7), cohort(40, 8));
}

#[test]
fn sequences_are_well_formed() {
    let c = cohort(200, 1);
    assert_eq!(c.subjects.len(), 200);
    for s in &c.subjects {
        s.validate().unwrap();
        assert!(s.visits.len() >= MIN_VISITS);
        assert_eq!(s.visits[0].month, 0);
        for v in &s.visits {
            assert_eq!(v.age, s.baseline_age + f64::from(v.month) / 12.0);
            assert!(VISIT_GRID.contains(&v.month));
            assert!(v.scores.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!(matches!(&v.payload, Payload::Vector { values } if values.len() == 16));
        }
        assert!(s.visits.windows(2).all(|w| w[0].month < w[1].month));
    }
}

#[test]
fn missing_rate_is_calibrated() {
    // averaged over seeds to keep sampling noise well inside the band
    let rates: Vec<f64> = (0..5).map(|s| cohort(200, s).missing_rate()).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!((mean - 0.392).abs() <= 0.03, "{rates:?}");
}

#[test]
fn mci_is_most_common_at_baseline() {
    let c = cohort(1000, 3);
    let mut counts = [0usize; 3];
    for s in &c.subjects {
        counts[s.visits[0].label.index()] += 1;
    }
    assert!(counts[1] > counts[0] && counts[1] > counts[2], "{counts:?}");
}

#[test]
fn scores_track_diagnosis() {
    let c = cohort(300, 4);
    let mut sums = [[0.0f64; 3]; 3];
    let mut ns = [[0usize; 3]; 3];
    for v in c.subjects.iter().flat_map(|s| &s.visits) {
        for r in 0..3 {
            if v.score_mask[r] {
                sums[v.label.index()][r] += v.scores[r];
                ns[v.label.index()][r] += 1;
            }
        }
    }
    let mean = |l: usize, r: usize| sums[l][r] / ns[l][r] as f64;
    for l in 0..2 {
        assert!(mean(l, 0) > mean(l + 1, 0), "MMSE should fall");
        assert!(mean(l, 1) < mean(l + 1, 1), "ADAS11 should rise");
        assert!(mean(l, 2) < mean(l + 1, 2), "ADAS13 should rise");
    }
    assert_eq!(Diagnosis::from_severity(0.1), Diagnosis::Cn);
}

#[test]
fn injected_missingness_hits_the_requested_rate() {
    let c = cohort(1400, 5);
    assert!(c.num_visits() >= 10_000);
    let before: usize = c.subjects.iter().map(|s| s.visits.len() - 1).sum();
    for rate in [0.1, 0.3, 0.5] {
        let d = inject_missingness(&c, rate, 9).unwrap();
        let after: usize = d.subjects.iter().map(|s| s.visits.len() - 1).sum();
        let dropped = 1.0 - after as f64 / before as f64;
        assert!((dropped - rate).abs() <= 0.03, "rate {rate}: dropped {dropped}");
        for (a, b) in c.subjects.iter().zip(&d.subjects) {
            assert_eq!(a.visits[0], b.visits[0]);
            assert!(b.visits.len() >= MIN_VISITS);
            assert!(b.visits.iter().all(|v| a.visits.contains(v)));
        }
    }
    assert_eq!(inject_missingness(&c, 0.3, 9).unwrap(), inject_missingness(&c, 0.3, 9).unwrap());
}

#[test]
fn shifted_cohort_progresses_faster() {
    let cfg = CohortConfig {
        n_subjects: 300,
        seed: 2,
        ..CohortConfig::default()
    };
    let base = generate_cohort(&cfg).unwrap();
    let shifted = shifted_cohort(&cfg).unwrap();
    let ad = |c: &Cohort| c.label_counts()[2] as f64 / c.num_visits() as f64;
    assert!(ad(&shifted) > ad(&base));
}

#[test]
fn folds_partition_subjects() {
    let c = cohort(53, 6);
    let folds = subject_folds(&c, 5, 1).unwrap();
    assert_eq!(folds.len(), 5);
    let all: Vec<u32> = folds.iter().flatten().copied().collect();
    let unique: BTreeSet<u32> = all.iter().copied().collect();
    assert_eq!(all.len(), 53);
    assert_eq!(unique.len(), 53);
    assert!(folds.iter().all(|f| f.len() >= 10));
    assert_eq!(folds, subject_folds(&c, 5, 1).unwrap());
    assert!(subject_folds(&c, 1, 1).is_err());
}

#[test]
fn volume_payloads_have_the_requested_extent() {
    let c = generate_cohort(&CohortConfig {
        n_subjects: 10,
        volume_extent: 8,
        ..CohortConfig::default()
    })
    .unwrap();
    for v in c.subjects.iter().flat_map(|s| &s.visits) {
        assert_eq!(v.payload.shape(), vec![1, 8, 8, 8]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        CohortConfig {
            n_subjects: 3,
            ..CohortConfig::default()
        },
        CohortConfig {
            visit_drop: 1.5,
            ..CohortConfig::default()
        },
        CohortConfig {
            rho_range: (2.0, 1.0),
            ..CohortConfig::default()
        },
    ] {
        assert!(generate_cohort(&cfg).is_err());
    }
    assert!(inject_missingness(&cohort(10, 0), -0.1, 0).is_err());
}

#[test]
fn dataset_roundtrips_through_a_file() {
    let c = cohort(25, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    write_dataset(&c, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), c);
    assert!(read_dataset(dir.path().join("absent.jsonl")).is_err());
}

fn first_line(c: &Cohort) -> serde_json::Value {
    let mut bytes = Vec::new();
    write_cohort(c, &mut bytes).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn parse(v: &serde_json::Value) -> String {
    let line = serde_json::to_string(v).unwrap();
    match read_cohort(line.as_bytes()) {
        Ok(_) => String::new(),
        Err(e) => e.to_string(),
    }
}

#[test]
fn malformed_lines_are_reported() {
    let c = cohort(10, 12);
    let good = first_line(&c);
    assert_eq!(parse(&good), "");

    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("score_mask");
    let msg = parse(&missing);
    assert!(msg.contains("line 1") && msg.contains("score_mask"), "{msg}");

    let mut version = good.clone();
    version["schema_version"] = serde_json::json!(99);
    assert!(parse(&version).contains("schema"));

    let mut extra = good.clone();
    extra["surprise"] = serde_json::json!(1);
    assert!(!parse(&extra).is_empty());

    let mut label = good;
    label["label"] = serde_json::json!("XYZ");
    assert!(!parse(&label).is_empty());
}
