//! JSON-lines cohort files.
//!
//! One visit per line, subjects contiguous and visits in month order:
//!
//! ```text
//! {"schema_version":1,"subject_id":0,"baseline_age":71.2,"month":0,"age":71.2,
//!  "label":"MCI","label_mask":true,"scores":[0.7,0.4,0.45],
//!  "score_mask":[true,false,true],"payload":{"kind":"vector","values":[...]}}
//! ```
//!
//! `payload.kind` is `vector` or `volume`; volumes also carry `extent` and
//! store `extent³` values in `i, j, k` order. Floats are written with the
//! shortest representation that reads back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Diagnosis, Payload, SubjectSequence, VisitRecord, NUM_SCORES};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    schema_version: u32,
    subject_id: u32,
    baseline_age: f64,
    month: u32,
    age: f64,
    label: Diagnosis,
    label_mask: bool,
    scores: [f64; NUM_SCORES],
    score_mask: [bool; NUM_SCORES],
    payload: Payload,
}

pub fn write_cohort<W: Write>(cohort: &Cohort, mut out: W) -> Result<()> {
    for subj in &cohort.subjects {
        for v in &subj.visits {
            let line = Line {
                schema_version: SCHEMA_VERSION,
                subject_id: subj.subject_id,
                baseline_age: subj.baseline_age,
                month: v.month,
                age: v.age,
                label: v.label,
                label_mask: v.label_mask,
                scores: v.scores,
                score_mask: v.score_mask,
                payload: v.payload.clone(),
            };
            let text = serde_json::to_string(&line).map_err(|e| Error::Dataset {
                line: 0,
                msg: e.to_string(),
            })?;
            writeln!(out, "{text}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_cohort<R: BufRead>(input: R) -> Result<Cohort> {
    let mut subjects: Vec<SubjectSequence> = Vec::new();
    for (i, text) in input.lines().enumerate() {
        let lineno = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Dataset { line: lineno, msg };
        let line: Line = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if line.schema_version != SCHEMA_VERSION {
            return Err(err(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                line.schema_version
            )));
        }
        if let Payload::Volume { extent, values } = &line.payload {
            if values.len() != extent * extent * extent {
                return Err(err(format!("volume of extent {extent} holds {} values", values.len())));
            }
        }
        let visit = VisitRecord {
            subject_id: line.subject_id,
            month: line.month,
            age: line.age,
            payload: line.payload,
            scores: line.scores,
            score_mask: line.score_mask,
            label: line.label,
            label_mask: line.label_mask,
        };
        match subjects.last_mut() {
            Some(s) if s.subject_id == line.subject_id => {
                let prev = s.visits.last().map_or(0, |v| v.month);
                if visit.month <= prev {
                    return Err(err(format!("month {} does not follow month {prev}", visit.month)));
                }
                s.visits.push(visit);
            }
            _ => {
                if subjects.iter().any(|s| s.subject_id == line.subject_id) {
                    return Err(err(format!("subject {} is not contiguous", line.subject_id)));
                }
                subjects.push(SubjectSequence {
                    subject_id: line.subject_id,
                    baseline_age: line.baseline_age,
                    visits: vec![visit],
                });
            }
        }
    }
    Ok(Cohort { subjects })
}

pub fn write_dataset(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    write_cohort(cohort, BufWriter::new(File::create(path)?))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Cohort> {
    read_cohort(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortConfig};

    #[test]
    fn roundtrip_and_stable_bytes() {
        let cfg = CohortConfig {
            n_subjects: 12,
            seed: 5,
            ..CohortConfig::default()
        };
        let c = generate_cohort(&cfg).unwrap();
        let mut a = Vec::new();
        write_cohort(&c, &mut a).unwrap();
        let mut b = Vec::new();
        write_cohort(&c, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(read_cohort(a.as_slice()).unwrap(), c);
    }

    #[test]
    fn errors_name_key_and_line() {
        let good = r#"{"schema_version":1,"subject_id":0,"baseline_age":70.0,"month":0,"age":70.0,"label":"CN","label_mask":true,"scores":[0.9,0.1,0.2],"score_mask":[true,true,true],"payload":{"kind":"vector","values":[0.1]}}"#;
        read_cohort(good.as_bytes()).unwrap();
        let missing = good.replace(r#""age":70.0,"#, "");
        let text = format!("{good}\n{missing}\n");
        match read_cohort(text.as_bytes()) {
            Err(Error::Dataset { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("age"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let v2 = good.replace(r#""schema_version":1"#, r#""schema_version":2"#);
        assert!(matches!(read_cohort(v2.as_bytes()), Err(Error::Dataset { line: 1, .. })));
    }
}
