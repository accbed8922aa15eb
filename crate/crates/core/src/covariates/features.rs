//! Named covariate columns and per-stratum feature matrices.
//!
//! Pre-diagnosis columns use fixed names (`ALDER`, `VISITS_BFD_1`, ...).
//! Trajectory columns are `<FIELD>_<t>` where `t` is an absolute month,
//! `LAST` (month `w-1` in stratum `w`) or `MID` (month `(w-1)/2`).
//! `SEV_<t>` columns read the latent severity oracle when it was supplied.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use super::prediag::PREDIAG_COLUMNS;
use super::trajectory::AdtStatus;
use super::{CovariateTable, PatientCovariates};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajField {
    Score,
    Visits,
    SumVisMetas,
    SumSkMetas,
    Metas,
    MedsDays,
    BikaOnly,
    BikaGnrh,
    BikaOut,
    SumDays,
}

impl TrajField {
    pub const ALL: [TrajField; 10] = [
        TrajField::Score,
        TrajField::Visits,
        TrajField::SumVisMetas,
        TrajField::SumSkMetas,
        TrajField::Metas,
        TrajField::MedsDays,
        TrajField::BikaOnly,
        TrajField::BikaGnrh,
        TrajField::BikaOut,
        TrajField::SumDays,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            TrajField::Score => "SCORE",
            TrajField::Visits => "VISITS",
            TrajField::SumVisMetas => "SUM_VIS_METAS",
            TrajField::SumSkMetas => "SUM_SK_METAS",
            TrajField::Metas => "METAS",
            TrajField::MedsDays => "MEDS_DAYS",
            TrajField::BikaOnly => "BIKA_ONLY",
            TrajField::BikaGnrh => "BIKA_GNRH",
            TrajField::BikaOut => "BIKA_OUT",
            TrajField::SumDays => "SUM_DAYS",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TrajField::Score => "Elixhauser group count, 60-month look-back ending with month t",
            TrajField::Visits => "cumulative inpatient admissions from diagnosis through month t",
            TrajField::SumVisMetas => "months with visceral metastases (C78) through month t",
            TrajField::SumSkMetas => "months with skeletal metastases (C79) through month t",
            TrajField::Metas => "any metastasis code (C77-C79) through month t, 0/1",
            TrajField::MedsDays => "cumulative ADT defined daily doses from diagnosis through month t",
            TrajField::BikaOnly => "only bicalutamide dispensed through month t, 0/1",
            TrajField::BikaGnrh => "bicalutamide and a GnRH analogue dispensed through month t, 0/1",
            TrajField::BikaOut => "ADT status code: 1 bicalutamide only, 2 with GnRH, 3 neither",
            TrajField::SumDays => "inpatient care days from diagnosis through month t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Pre(usize),
    Traj(TrajField, u32),
    Severity(u32),
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Pre(i) => f.write_str(PREDIAG_COLUMNS[*i]),
            Column::Traj(field, t) => write!(f, "{}_{t}", field.prefix()),
            Column::Severity(t) => write!(f, "SEV_{t}"),
        }
    }
}

fn month_token(token: &str, w: u32) -> Option<u32> {
    match token {
        "LAST" => Some(w - 1),
        "MID" => Some((w - 1) / 2),
        "DX" => Some(0),
        _ => token.parse().ok(),
    }
}

/// Resolves a column name for stratum `w`. Trajectory months must be `< w`.
pub fn resolve(name: &str, w: u32) -> Result<Column> {
    if w == 0 {
        return Err(Error::InvalidInput("stratum 0 has no trajectory".into()));
    }
    if let Some(i) = PREDIAG_COLUMNS.iter().position(|c| *c == name) {
        return Ok(Column::Pre(i));
    }
    let (stem, token) = name
        .rsplit_once('_')
        .ok_or_else(|| Error::Config(format!("unknown covariate {name}")))?;
    let month = month_token(token, w).ok_or_else(|| Error::Config(format!("unknown covariate {name}")))?;
    if month >= w {
        return Err(Error::Config(format!(
            "covariate {name} refers to month {month}, not observed before treatment in stratum {w}"
        )));
    }
    if stem == "SEV" {
        return Ok(Column::Severity(month));
    }
    TrajField::ALL
        .iter()
        .find(|f| f.prefix() == stem)
        .map(|f| Column::Traj(*f, month))
        .ok_or_else(|| Error::Config(format!("unknown covariate {name}")))
}

/// Value of `col` for one patient; `None` when not observed.
pub fn value(row: &PatientCovariates, col: Column) -> Option<f64> {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    match col {
        Column::Pre(i) => Some(row.pre.to_row()[i]),
        Column::Severity(t) => row.severity.as_ref()?.get(t as usize).copied(),
        Column::Traj(field, t) => {
            let v = row.trajectory.get(t as usize)?;
            Some(match field {
                TrajField::Score => f64::from(v.elix_score),
                TrajField::Visits => f64::from(v.cum_visits),
                TrajField::SumVisMetas => f64::from(v.months_visceral_mets),
                TrajField::SumSkMetas => f64::from(v.months_skeletal_mets),
                TrajField::Metas => b(v.any_mets),
                TrajField::MedsDays => v.cum_add_ddd,
                TrajField::BikaOnly => b(v.adt_status == AdtStatus::BicalutamideOnly),
                TrajField::BikaGnrh => b(v.adt_status == AdtStatus::BicaPlusGnrh),
                TrajField::BikaOut => f64::from(v.adt_status.code()),
                TrajField::SumDays => f64::from(v.sum_inpatient_days),
            })
        }
    }
}

/// Row-major matrix of the named columns for the given patients in stratum `w`.
pub fn stratum_matrix(rows: &[&PatientCovariates], names: &[String], w: u32) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<Column> = names.iter().map(|n| resolve(n, w)).collect::<Result<_>>()?;
    rows.iter()
        .map(|r| {
            cols.iter()
                .zip(names)
                .map(|(&c, n)| {
                    value(r, c).ok_or_else(|| {
                        Error::InvalidInput(format!("covariate {n} unavailable for patient {}", r.patient_id))
                    })
                })
                .collect()
        })
        .collect()
}

/// Covariate set of stratum `w`: all pre-diagnosis columns plus every
/// trajectory field summarized through month `w-1` (`BIKA_OUT` enters through
/// its two indicators).
pub fn diagnostic_columns(_w: u32) -> Vec<String> {
    let mut out: Vec<String> = PREDIAG_COLUMNS.iter().map(|s| s.to_string()).collect();
    for f in TrajField::ALL.iter().filter(|f| **f != TrajField::BikaOut) {
        out.push(format!("{}_LAST", f.prefix()));
    }
    out
}

/// Every trajectory field at each month `0..w`, for detailed diagnostics.
pub fn history_columns(w: u32) -> Vec<String> {
    let mut out = Vec::new();
    for t in 0..w {
        for f in TrajField::ALL.iter().filter(|f| **f != TrajField::BikaOut) {
            out.push(Column::Traj(*f, t).to_string());
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct ManifestColumn {
    pub name: String,
    pub description: String,
}

fn pre_description(name: &str) -> &'static str {
    match name {
        "ALDER" => "age at diagnosis, years",
        "VISITS_BFD_1" => "admissions in the month before diagnosis",
        "VISITS_BFD_6" => "admissions 1-6 months before diagnosis",
        "VISITS_BFD_12" => "admissions 6-12 months before diagnosis",
        "VISITS_BFD_60" => "admissions 1-60 months before diagnosis",
        "ELIX_DX_1_4" => "Elixhauser count 1-4 at diagnosis, 0/1",
        "ELIX_DX_5" => "Elixhauser count >= 5 at diagnosis, 0/1",
        "ELIX_12M_1_4" => "Elixhauser count 1-4 twelve months before diagnosis, 0/1",
        "ELIX_12M_5" => "Elixhauser count >= 5 twelve months before diagnosis, 0/1",
        "UTBNFORGYMN" => "education below secondary school, 0/1",
        "UTBNGYMN" => "secondary school education, 0/1",
        "CIVIL" => "living with a partner, 0/1",
        "NORDIC" => "born in a Nordic country, 0/1",
        "ELIX_DX" => "Elixhauser group count at diagnosis",
        _ => "socioeconomic factor score (regression method)",
    }
}

/// Writes the full covariate matrix (trajectory months `0..months`) as CSV and
/// returns the column manifest. Unobserved trajectory cells are left empty.
pub fn write_covariates_csv<W: Write>(table: &CovariateTable, months: u32, out: W) -> Result<Vec<ManifestColumn>> {
    let mut manifest = vec![
        ManifestColumn { name: "patient_id".into(), description: "patient identifier".into() },
        ManifestColumn { name: "arm".into(), description: "treated or comparison".into() },
        ManifestColumn { name: "dtp_months".into(), description: "months from diagnosis to first NAM dispense".into() },
        ManifestColumn { name: "education_imputed".into(), description: "education level imputed, 0/1".into() },
    ];
    let mut cols = Vec::new();
    for (i, name) in PREDIAG_COLUMNS.iter().enumerate() {
        cols.push(Column::Pre(i));
        manifest.push(ManifestColumn { name: name.to_string(), description: pre_description(name).into() });
    }
    for t in 0..months {
        for f in TrajField::ALL {
            cols.push(Column::Traj(f, t));
            manifest.push(ManifestColumn {
                name: Column::Traj(f, t).to_string(),
                description: f.description().replace("month t", &format!("month {t}")),
            });
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(manifest.iter().map(|c| c.name.as_str())).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![
            r.patient_id.to_string(),
            match r.arm {
                crate::registry::Arm::Treated => "treated".into(),
                crate::registry::Arm::Comparison => "comparison".into(),
            },
            r.dtp_months.map(|d| d.to_string()).unwrap_or_default(),
            u8::from(r.education_imputed).to_string(),
        ];
        rec.extend(cols.iter().map(|&c| value(r, c).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(manifest)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_names() {
        assert_eq!(resolve("ALDER", 6).unwrap(), Column::Pre(0));
        assert_eq!(resolve("VISITS_LAST", 6).unwrap(), Column::Traj(TrajField::Visits, 5));
        assert_eq!(resolve("VISITS_MID", 6).unwrap(), Column::Traj(TrajField::Visits, 2));
        assert_eq!(resolve("SUM_SK_METAS_3", 6).unwrap(), Column::Traj(TrajField::SumSkMetas, 3));
        assert_eq!(resolve("SEV_DX", 6).unwrap(), Column::Severity(0));
        assert_eq!(resolve("SEV_LAST", 6).unwrap(), Column::Severity(5));
        assert_eq!(resolve("ELIX_DX_5", 6).unwrap(), Column::Pre(6));
        assert!(resolve("VISITS_6", 6).is_err());
        assert!(resolve("NOPE_1", 6).is_err());
    }

    #[test]
    fn names_round_trip() {
        for f in TrajField::ALL {
            let c = Column::Traj(f, 4);
            assert_eq!(resolve(&c.to_string(), 10).unwrap(), c);
        }
    }

    #[test]
    fn diagnostic_set_size() {
        assert_eq!(diagnostic_columns(4).len(), PREDIAG_COLUMNS.len() + 9);
        assert_eq!(history_columns(4).len(), 4 * 9);
    }
}
