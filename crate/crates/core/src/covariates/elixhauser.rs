//! Elixhauser comorbidity groups from ICD-10 codes.
//!
//! The ICD-10 map is a bundled tabular data file (group, description, code
//! prefix). A code belongs to a group when one of the group's prefixes is a
//! prefix of the dot-free code. The score is the unweighted number of distinct
//! groups matched.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const MAP_SOURCE: &str = include_str!("../../data/elixhauser_icd10.csv");

#[derive(Debug)]
pub struct ElixhauserMap {
    pub version: String,
    pub checksum: String,
    pub groups: Vec<String>,
    prefixes: HashMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElixCategory {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1-4")]
    OneToFour,
    #[serde(rename = ">=5")]
    FiveOrMore,
}

impl ElixCategory {
    pub fn from_count(count: u32) -> Self {
        match count {
            0 => ElixCategory::Zero,
            1..=4 => ElixCategory::OneToFour,
            _ => ElixCategory::FiveOrMore,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ElixCategory::Zero => "0",
            ElixCategory::OneToFour => "1-4",
            ElixCategory::FiveOrMore => ">=5",
        }
    }
}

impl ElixhauserMap {
    fn parse(src: &str) -> Self {
        let mut version = String::from("unversioned");
        let mut groups: Vec<String> = Vec::new();
        let mut prefixes: HashMap<String, u32> = HashMap::new();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(src.as_bytes());
        for line in src.lines() {
            if let Some(v) = line.strip_prefix("# version:") {
                version = v.trim().to_string();
            }
        }
        for rec in rdr.records() {
            let rec = rec.expect("bundled Elixhauser map is well-formed");
            let group = rec[0].to_string();
            let idx = match groups.iter().position(|g| *g == group) {
                Some(i) => i,
                None => {
                    groups.push(group);
                    groups.len() - 1
                }
            };
            *prefixes.entry(rec[2].to_string()).or_default() |= 1 << idx;
        }
        assert!(groups.len() <= 32);
        let checksum = hex::encode(Sha256::digest(src.as_bytes()));
        ElixhauserMap {
            version,
            checksum,
            groups,
            prefixes,
        }
    }

    /// Bit mask of the groups matched by one normalized code.
    pub fn group_mask(&self, code: &str) -> u32 {
        (3..=code.len().min(5))
            .filter_map(|n| self.prefixes.get(&code[..n]))
            .fold(0, |acc, m| acc | m)
    }

    pub fn mask_of<'a, I: IntoIterator<Item = &'a str>>(&self, codes: I) -> u32 {
        codes.into_iter().fold(0, |acc, c| acc | self.group_mask(c))
    }
}

pub fn elixhauser_map() -> &'static ElixhauserMap {
    static MAP: OnceLock<ElixhauserMap> = OnceLock::new();
    MAP.get_or_init(|| ElixhauserMap::parse(MAP_SOURCE))
}

/// Number of distinct comorbidity groups matched by `codes` and its bucket.
pub fn elixhauser<'a, I: IntoIterator<Item = &'a str>>(codes: I) -> (u32, ElixCategory) {
    let count = elixhauser_map().mask_of(codes).count_ones();
    (count, ElixCategory::from_count(count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn map_has_31_groups() {
        let m = elixhauser_map();
        assert_eq!(m.groups.len(), 31);
        assert_eq!(m.version, "quan2005-31g-v1");
        assert_eq!(m.checksum.len(), 64);
    }

    #[test]
    fn empty_set_scores_zero() {
        assert_eq!(elixhauser(std::iter::empty()), (0, ElixCategory::Zero));
    }

    #[test]
    fn chf_and_uncomplicated_diabetes() {
        let m = elixhauser_map();
        let chf = m.groups.iter().position(|g| g == "chf").unwrap();
        let diab = m.groups.iter().position(|g| g == "diabunc").unwrap();
        assert_eq!(m.group_mask("I500"), 1 << chf);
        assert_eq!(m.group_mask("E119"), 1 << diab);
        assert_eq!(elixhauser(["I500", "E119"]), (2, ElixCategory::OneToFour));
    }

    #[test]
    fn five_distinct_groups_bucket_high() {
        // chf, cpd, rf, obes, metacanc
        let codes = ["I500", "J449", "N185", "E669", "C795"];
        assert_eq!(elixhauser(codes), (5, ElixCategory::FiveOrMore));
    }

    #[test]
    fn duplicates_within_group_count_once() {
        // I110 is in both the heart-failure and complicated-hypertension groups.
        assert_eq!(elixhauser(["I500", "I509", "I110"]).0, 2);
        assert_eq!(elixhauser(["I500", "I509"]).0, 1);
        assert_eq!(elixhauser(["Z000", "C619"]).0, 1);
    }

    proptest! {
        #[test]
        fn set_monotone(a in proptest::collection::vec(0usize..40, 0..8), b in proptest::collection::vec(0usize..40, 0..8)) {
            const POOL: [&str; 40] = [
                "I500", "I110", "I10", "E119", "E112", "J449", "N185", "E669", "C795", "C619",
                "C787", "C773", "F329", "F101", "K703", "G35", "D500", "D509", "E871", "R634",
                "M069", "C833", "B20", "K259", "E039", "I739", "I48", "I350", "I269", "G819",
                "Z000", "S720", "A099", "M844", "G550", "I10X", "E668", "F200", "F204", "Z992",
            ];
            let sa: Vec<&str> = a.iter().map(|&i| POOL[i]).collect();
            let mut sb = sa.clone();
            sb.extend(b.iter().map(|&i| POOL[i]));
            prop_assert!(elixhauser(sb.iter().copied()).0 >= elixhauser(sa.iter().copied()).0);
        }
    }
}
