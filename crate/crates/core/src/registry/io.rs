//! Line-delimited interchange format and tabular export.
//!
//! Each line is one JSON object tagged by `type`:
//!
//! ```text
//! {"type":"patient","patient_id":"P1","diagnosis_date":"2009-01-10","birth_year":1935,"marital":"partnered","nordic_born":true,"education":"secondary"}
//! {"type":"visit","patient_id":"P1","admission_date":"2009-02-01","discharge_date":"2009-02-03","icd10_codes":["C795"]}
//! {"type":"prescription","patient_id":"P1","dispense_date":"2009-02-04","atc_code":"L02BB03","ddd_count":90.0}
//! {"type":"ses","patient_id":"P1","values":{"LoneInk":0.0,"DispInk":182000.0}}
//! {"type":"death","patient_id":"P1","death_date":"2012-05-30"}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    ses_names, Demographics, Education, InpatientVisit, Marital, PatientId, PatientRecord,
    Prescription, Registry, SocioPanel,
};
use crate::codes::{normalize_atc, normalize_icd10};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub patient_id: String,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: patient {}: {}", self.line, self.patient_id, self.message)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{} invalid row(s); first: {}", .0.len(), .0[0])]
    Rows(Vec<RowError>),
    #[error("duplicate patient_id {patient_id} at line {line}")]
    DuplicatePatient { patient_id: String, line: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RegistryError {
    pub fn row_errors(&self) -> &[RowError] {
        match self {
            RegistryError::Rows(rows) => rows,
            _ => &[],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Patient {
        patient_id: String,
        diagnosis_date: String,
        birth_year: i32,
        marital: Marital,
        nordic_born: bool,
        #[serde(default)]
        education: Option<Education>,
    },
    Visit {
        patient_id: String,
        admission_date: String,
        discharge_date: String,
        icd10_codes: Vec<String>,
    },
    Prescription {
        patient_id: String,
        dispense_date: String,
        atc_code: String,
        ddd_count: f64,
    },
    Ses {
        patient_id: String,
        values: BTreeMap<String, Option<f64>>,
    },
    Death {
        patient_id: String,
        death_date: String,
    },
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| format!("malformed date {s:?}"))
}

struct Builder {
    record: PatientRecord,
    line: usize,
    death_line: Option<usize>,
}

/// Reads and validates a registry from the line-delimited interchange format.
///
/// Rows may appear in any order. All row-level problems are collected and
/// reported together; a duplicated patient line aborts immediately.
pub fn load_registry<R: BufRead>(source: R) -> Result<Registry, RegistryError> {
    let names = ses_names();
    let name_pos: HashMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut builders: BTreeMap<String, Builder> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut pending: Vec<(usize, Line)> = Vec::new();
    let mut errors: Vec<RowError> = Vec::new();

    for (i, raw) in source.lines().enumerate() {
        let lineno = i + 1;
        let raw = raw?;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = match serde_json::from_str(&raw) {
            Ok(l) => l,
            Err(e) => {
                let pid = serde_json::from_str::<serde_json::Value>(&raw)
                    .ok()
                    .and_then(|v| v.get("patient_id").and_then(|p| p.as_str()).map(String::from))
                    .unwrap_or_else(|| "?".into());
                errors.push(RowError {
                    line: lineno,
                    patient_id: pid,
                    message: format!("unparseable row: {e}"),
                });
                continue;
            }
        };
        match parsed {
            Line::Patient {
                patient_id,
                diagnosis_date,
                birth_year,
                marital,
                nordic_born,
                education,
            } => {
                if builders.contains_key(&patient_id) {
                    return Err(RegistryError::DuplicatePatient {
                        patient_id,
                        line: lineno,
                    });
                }
                let dx = match parse_date(&diagnosis_date) {
                    Ok(d) => d,
                    Err(message) => {
                        errors.push(RowError {
                            line: lineno,
                            patient_id,
                            message,
                        });
                        continue;
                    }
                };
                order.push(patient_id.clone());
                builders.insert(
                    patient_id.clone(),
                    Builder {
                        record: PatientRecord {
                            patient_id: PatientId(patient_id),
                            diagnosis_date: dx,
                            death_date: None,
                            visits: Vec::new(),
                            prescriptions: Vec::new(),
                            ses_panel: SocioPanel::default(),
                            demographics: Demographics {
                                birth_year,
                                marital,
                                nordic_born,
                                education,
                            },
                        },
                        line: lineno,
                        death_line: None,
                    },
                );
            }
            other => pending.push((lineno, other)),
        }
    }

    for (lineno, line) in pending {
        let pid = match &line {
            Line::Visit { patient_id, .. }
            | Line::Prescription { patient_id, .. }
            | Line::Ses { patient_id, .. }
            | Line::Death { patient_id, .. } => patient_id.clone(),
            Line::Patient { .. } => unreachable!(),
        };
        let err = |message: String| RowError {
            line: lineno,
            patient_id: pid.clone(),
            message,
        };
        let Some(b) = builders.get_mut(&pid) else {
            errors.push(err("entity references unknown patient".into()));
            continue;
        };
        let result: Result<(), String> = (|| {
            match line {
                Line::Visit {
                    admission_date,
                    discharge_date,
                    icd10_codes,
                    ..
                } => {
                    let adm = parse_date(&admission_date)?;
                    let dis = parse_date(&discharge_date)?;
                    if dis < adm {
                        return Err("interval inverted: discharge before admission".into());
                    }
                    if icd10_codes.is_empty() {
                        return Err("visit without diagnosis codes".into());
                    }
                    let codes = icd10_codes
                        .iter()
                        .map(|c| normalize_icd10(c).ok_or_else(|| format!("invalid ICD-10 code {c:?}")))
                        .collect::<Result<Vec<_>, _>>()?;
                    b.record.visits.push(InpatientVisit {
                        admission_date: adm,
                        discharge_date: dis,
                        icd10_codes: codes,
                    });
                }
                Line::Prescription {
                    dispense_date,
                    atc_code,
                    ddd_count,
                    ..
                } => {
                    let date = parse_date(&dispense_date)?;
                    let atc = normalize_atc(&atc_code)
                        .ok_or_else(|| format!("invalid ATC code {atc_code:?}"))?;
                    if !(ddd_count >= 0.0) || !ddd_count.is_finite() {
                        return Err(format!("invalid ddd_count {ddd_count}"));
                    }
                    b.record.prescriptions.push(Prescription {
                        dispense_date: date,
                        atc_code: atc,
                        ddd_count,
                    });
                }
                Line::Ses { values, .. } => {
                    for (name, v) in values {
                        let pos = name_pos
                            .get(name.as_str())
                            .ok_or_else(|| format!("unknown socioeconomic variable {name:?}"))?;
                        if let Some(x) = v {
                            if !x.is_finite() {
                                return Err(format!("non-finite value for {name}"));
                            }
                        }
                        b.record.ses_panel.values[*pos] = v;
                    }
                }
                Line::Death { death_date, .. } => {
                    let d = parse_date(&death_date)?;
                    if b.death_line.is_some() {
                        return Err("multiple death rows".into());
                    }
                    if d < b.record.diagnosis_date {
                        return Err("death_date precedes diagnosis_date".into());
                    }
                    b.record.death_date = Some(d);
                    b.death_line = Some(lineno);
                }
                Line::Patient { .. } => unreachable!(),
            }
            Ok(())
        })();
        if let Err(m) = result {
            errors.push(err(m));
        }
    }

    let mut patients = Vec::with_capacity(order.len());
    for id in order {
        let mut b = builders.remove(&id).expect("builder exists");
        b.record.sort_events();
        if let Err(message) = b.record.validate() {
            errors.push(RowError {
                line: b.line,
                patient_id: id,
                message,
            });
            continue;
        }
        patients.push(b.record);
    }

    if !errors.is_empty() {
        errors.sort_by_key(|e| e.line);
        return Err(RegistryError::Rows(errors));
    }
    Registry::new(patients)
}

/// Writes the registry in the interchange format, one patient block at a time.
pub fn write_registry<W: Write>(registry: &Registry, mut out: W) -> Result<(), RegistryError> {
    let names = ses_names();
    for p in registry.patients() {
        let id = p.patient_id.0.clone();
        let mut lines = vec![Line::Patient {
            patient_id: id.clone(),
            diagnosis_date: p.diagnosis_date.to_string(),
            birth_year: p.demographics.birth_year,
            marital: p.demographics.marital,
            nordic_born: p.demographics.nordic_born,
            education: p.demographics.education,
        }];
        lines.push(Line::Ses {
            patient_id: id.clone(),
            values: names
                .iter()
                .cloned()
                .zip(p.ses_panel.values.iter().copied())
                .collect(),
        });
        for v in &p.visits {
            lines.push(Line::Visit {
                patient_id: id.clone(),
                admission_date: v.admission_date.to_string(),
                discharge_date: v.discharge_date.to_string(),
                icd10_codes: v.icd10_codes.clone(),
            });
        }
        for rx in &p.prescriptions {
            lines.push(Line::Prescription {
                patient_id: id.clone(),
                dispense_date: rx.dispense_date.to_string(),
                atc_code: rx.atc_code.clone(),
                ddd_count: rx.ddd_count,
            });
        }
        if let Some(d) = p.death_date {
            lines.push(Line::Death {
                patient_id: id.clone(),
                death_date: d.to_string(),
            });
        }
        for l in lines {
            serde_json::to_writer(&mut out, &l).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn education_label(e: Option<Education>) -> &'static str {
    match e {
        None => "",
        Some(Education::BelowSecondary) => "below_secondary",
        Some(Education::Secondary) => "secondary",
        Some(Education::AboveSecondary) => "above_secondary",
    }
}

/// Writes one comma-separated table per entity type into `dir`.
pub fn export_csv(registry: &Registry, dir: &Path) -> Result<(), RegistryError> {
    std::fs::create_dir_all(dir)?;
    let mut patients = csv::Writer::from_path(dir.join("patients.csv"))?;
    patients.write_record([
        "patient_id",
        "diagnosis_date",
        "birth_year",
        "marital",
        "nordic_born",
        "education",
    ])?;
    let mut visits = csv::Writer::from_path(dir.join("visits.csv"))?;
    visits.write_record(["patient_id", "admission_date", "discharge_date", "icd10_codes"])?;
    let mut rx = csv::Writer::from_path(dir.join("prescriptions.csv"))?;
    rx.write_record(["patient_id", "dispense_date", "atc_code", "ddd_count"])?;
    let mut deaths = csv::Writer::from_path(dir.join("deaths.csv"))?;
    deaths.write_record(["patient_id", "death_date"])?;
    let mut ses = csv::Writer::from_path(dir.join("ses.csv"))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(ses_names());
    ses.write_record(&header)?;

    for p in registry.patients() {
        let id = p.patient_id.0.as_str();
        patients.write_record([
            id,
            &p.diagnosis_date.to_string(),
            &p.demographics.birth_year.to_string(),
            match p.demographics.marital {
                Marital::Partnered => "partnered",
                Marital::Single => "single",
            },
            if p.demographics.nordic_born { "1" } else { "0" },
            education_label(p.demographics.education),
        ])?;
        for v in &p.visits {
            visits.write_record([
                id,
                &v.admission_date.to_string(),
                &v.discharge_date.to_string(),
                &v.icd10_codes.join(";"),
            ])?;
        }
        for r in &p.prescriptions {
            rx.write_record([id, &r.dispense_date.to_string(), &r.atc_code, &r.ddd_count.to_string()])?;
        }
        if let Some(d) = p.death_date {
            deaths.write_record([id, &d.to_string()])?;
        }
        let mut row = vec![id.to_string()];
        row.extend(
            p.ses_panel
                .values
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        ses.write_record(&row)?;
    }
    patients.flush()?;
    visits.flush()?;
    rx.flush()?;
    deaths.flush()?;
    ses.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"{"type":"patient","patient_id":"A","diagnosis_date":"2009-01-10","birth_year":1935,"marital":"partnered","nordic_born":true,"education":"secondary"}
{"type":"patient","patient_id":"B","diagnosis_date":"2013-02-01","birth_year":1945,"marital":"single","nordic_born":false}
{"type":"visit","patient_id":"A","admission_date":"2009-03-01","discharge_date":"2009-03-04","icd10_codes":["c61.9","C79.5"]}
{"type":"prescription","patient_id":"B","dispense_date":"2014-01-01","atc_code":"L02BX03","ddd_count":30}
{"type":"visit","patient_id":"A","admission_date":"2009-02-01","discharge_date":"2009-02-01","icd10_codes":["I500"]}
{"type":"patient","patient_id":"C","diagnosis_date":"2008-07-01","birth_year":1930,"marital":"single","nordic_born":true,"education":null}
{"type":"death","patient_id":"C","death_date":"2010-01-01"}
{"type":"ses","patient_id":"C","values":{"DispInk":150000.0,"AldPens":null}}
"#;

    #[test]
    fn loads_three_patients_and_normalizes_codes() {
        let reg = load_registry(THREE.as_bytes()).unwrap();
        assert_eq!(reg.len(), 3);
        let a = reg.get(&"A".into()).unwrap();
        assert_eq!(a.visits.len(), 2);
        assert_eq!(a.visits[0].icd10_codes, vec!["I500"]);
        assert_eq!(a.visits[1].icd10_codes, vec!["C619", "C795"]);
        let c = reg.get(&"C".into()).unwrap();
        assert_eq!(c.death_date, Some("2010-01-01".parse().unwrap()));
        assert_eq!(c.ses_panel.get(3, 0), Some(150000.0));
        assert_eq!(c.demographics.education, None);
    }

    #[test]
    fn inverted_visit_is_a_row_error() {
        let src = r#"{"type":"patient","patient_id":"A","diagnosis_date":"2009-01-10","birth_year":1935,"marital":"partnered","nordic_born":true}
{"type":"visit","patient_id":"A","admission_date":"2009-03-05","discharge_date":"2009-03-01","icd10_codes":["C619"]}
"#;
        let err = load_registry(src.as_bytes()).unwrap_err();
        let rows = err.row_errors();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].line, 2);
        assert_eq!(rows[0].patient_id, "A");
        assert!(rows[0].message.contains("interval inverted"));
    }

    #[test]
    fn malformed_date_and_code_report_line_and_patient() {
        let src = r#"{"type":"patient","patient_id":"A","diagnosis_date":"2009-01-10","birth_year":1935,"marital":"partnered","nordic_born":true}
{"type":"prescription","patient_id":"A","dispense_date":"2009-13-01","atc_code":"L02BB03","ddd_count":1}
{"type":"visit","patient_id":"A","admission_date":"2009-03-01","discharge_date":"2009-03-01","icd10_codes":["XX"]}
"#;
        let err = load_registry(src.as_bytes()).unwrap_err();
        let rows = err.row_errors();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].line, rows[0].patient_id.as_str()), (2, "A"));
        assert!(rows[0].message.contains("malformed date"));
        assert!(rows[1].message.contains("ICD-10"));
    }

    #[test]
    fn duplicate_patient_is_fatal() {
        let src = r#"{"type":"patient","patient_id":"A","diagnosis_date":"2009-01-10","birth_year":1935,"marital":"partnered","nordic_born":true}
{"type":"patient","patient_id":"A","diagnosis_date":"2009-01-10","birth_year":1935,"marital":"partnered","nordic_born":true}
"#;
        match load_registry(src.as_bytes()) {
            Err(RegistryError::DuplicatePatient { patient_id, line }) => {
                assert_eq!(patient_id, "A");
                assert_eq!(line, 2);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_preserves_registry() {
        let reg = load_registry(THREE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_registry(&reg, &mut buf).unwrap();
        let again = load_registry(buf.as_slice()).unwrap();
        assert_eq!(reg.patients(), again.patients());
    }

    #[test]
    fn csv_export_writes_each_entity() {
        let reg = load_registry(THREE.as_bytes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(&reg, dir.path()).unwrap();
        let visits = std::fs::read_to_string(dir.path().join("visits.csv")).unwrap();
        assert!(visits.contains("A,2009-03-01,2009-03-04,C619;C795"));
        let ses = std::fs::read_to_string(dir.path().join("ses.csv")).unwrap();
        assert_eq!(ses.lines().next().unwrap().split(',').count(), 43);
    }
}
