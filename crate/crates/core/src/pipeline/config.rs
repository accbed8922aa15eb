//! Run configuration: one TOML file, dotted-name overrides, and a content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::balance::BalanceConfig;
use crate::covariates::CovariateConfig;
use crate::error::{Error, Result};
use crate::estimate::cll::CllConfig;
use crate::estimate::{EstimatorConfig, Horizons};
use crate::registry::EligibilityConfig;
use crate::synth::ScenarioConfig;

/// Environment variable that replaces `paths.out_dir`.
pub const OUT_DIR_ENV: &str = "HISTCTL_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Registry in the line-delimited interchange format.
    pub registry: PathBuf,
    /// Ground-truth sidecar written by `generate`; read when the balancing
    /// spec uses severity oracle columns.
    pub truth: PathBuf,
    /// Placebo covariates (`patient_id,psa_level,gleason_score,metastasis_at_diagnosis`).
    pub placebo: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            registry: "data/registry.jsonl".into(),
            truth: "data/truth.jsonl".into(),
            placebo: "data/placebo.csv".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Analyses {
    pub bounds: bool,
    pub subgroups: bool,
    pub placebo: bool,
    pub cll: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Analyses {
            bounds: true,
            subgroups: true,
            placebo: true,
            cll: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; the only source of randomness (used by `generate`).
    pub seed: u64,
    pub paths: Paths,
    /// Generator settings. Its seed and eligibility windows are taken from
    /// `seed` and `eligibility`.
    pub scenario: ScenarioConfig,
    pub eligibility: EligibilityConfig,
    pub covariates: CovariateConfig,
    pub balance: BalanceConfig,
    pub horizons: Horizons,
    pub estimator: EstimatorConfig,
    pub cll: CllConfig,
    pub analyses: Analyses,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        PipelineConfig {
            seed: scenario.seed,
            paths: Paths::default(),
            eligibility: scenario.windows.clone(),
            scenario,
            covariates: CovariateConfig::default(),
            balance: BalanceConfig::default(),
            horizons: Horizons::default(),
            estimator: EstimatorConfig::default(),
            cll: CllConfig::default(),
            analyses: Analyses::default(),
        }
    }
}

fn parse_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Rejects keys of `given` that the default configuration does not have.
/// Empty tables in the default (free-form maps) accept any key.
fn check_keys(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    if known.is_empty() {
        return Ok(());
    }
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => return Err(Error::Config(format!("unknown config key {path}"))),
            Some(Value::Table(kt)) => {
                if let Value::Table(gt) = v {
                    check_keys(gt, kt, &path)?;
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn default_table() -> toml::Table {
    match Value::try_from(PipelineConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("default config serializes to a table"),
    }
}

/// Deep merge: tables merge key by key, anything else replaces.
fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
/// A string-valued key always receives the raw text.
fn parse_value(raw: &str, current: Option<&Value>) -> Value {
    if matches!(current, Some(Value::String(_))) {
        return Value::String(raw.to_string());
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `dotted = raw` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {dotted:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{dotted}: {p} is not a table"))),
        };
    }
    let last = parts[parts.len() - 1];
    let v = parse_value(raw, cur.get(last));
    cur.insert(last.to_string(), v);
    Ok(())
}

impl PipelineConfig {
    /// Parses a TOML document, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        check_keys(&table, &default_table(), "")?;
        let cfg: PipelineConfig = Value::Table(table).try_into().map_err(parse_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(parse_err)
    }

    /// Loads the file (or defaults), applies `key=value` overrides in order,
    /// then the output-directory environment variable.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let defaults = default_table();
        let mut table = defaults.clone();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file: toml::Table = toml::from_str(&text).map_err(parse_err)?;
            check_keys(&file, &defaults, "")?;
            merge(&mut table, file);
        }
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                set_dotted(&mut table, "paths.out_dir", &dir)?;
            }
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.horizons.validate()?;
        self.generator().validate()?;
        let b = &self.balance;
        if b.min_stratum < 1 || b.min_stratum > b.max_stratum || b.max_stratum > crate::balance::MAX_STRATUM {
            return Err(Error::Config(format!(
                "balance strata {}..={} outside 1..={}",
                b.min_stratum,
                b.max_stratum,
                crate::balance::MAX_STRATUM
            )));
        }
        if b.solver.max_iter == 0 {
            return Err(Error::Config("balance.solver.max_iter must be positive".into()));
        }
        if !(b.spec.tolerance > 0.0) {
            return Err(Error::Config("balance.spec.tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Generator settings with the master seed and eligibility windows.
    pub fn generator(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            windows: self.eligibility.clone(),
            ..self.scenario.clone()
        }
    }

    /// SHA-256 of the canonical TOML form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Whether the balancing spec reads the latent severity oracle.
    pub fn uses_severity_oracle(&self) -> bool {
        self.balance
            .spec
            .columns()
            .iter()
            .chain(&self.balance.extra_diagnostics)
            .any(|c| c.starts_with("SEV_"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = PipelineConfig::default();
        c.seed = 7;
        c.balance.spec.tolerances.insert("ALDER".into(), 1e-6);
        c.analyses.cll = false;
        let text = c.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn dotted_overrides() {
        let c = PipelineConfig::load(
            None,
            &[
                ("balance.solver.max_iter".into(), "300".into()),
                ("paths.registry".into(), "x/123".into()),
                ("analyses.placebo".into(), "false".into()),
                ("balance.spec.variance".into(), "[\"ALDER\"]".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.balance.solver.max_iter, 300);
        assert_eq!(c.paths.registry, PathBuf::from("x/123"));
        assert!(!c.analyses.placebo);
        assert_eq!(c.balance.spec.variance, ["ALDER"]);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = PipelineConfig::load(None, &[("balance.solvr.max_iter".into(), "3".into())]).unwrap_err();
        assert!(e.to_string().contains("balance.solvr"));
        assert!(PipelineConfig::from_toml("[analyses]\nplacebos = true\n").is_err());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn zero_comparisons_is_fatal() {
        let e = PipelineConfig::load(None, &[("scenario.n_comparison_target".into(), "0".into())]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
