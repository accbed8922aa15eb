//! ICD-10 / ATC code normalization and the fixed code lists used by the protocol.

/// Abiraterone and enzalutamide.
pub const NAM_ATC: &[&str] = &["L02BX03", "L02BB04"];

pub const BICALUTAMIDE: &str = "L02BB03";
/// GnRH agonist (degarelix) and analogs (buserelin, leuprorelin, goserelin, triptorelin).
pub const GNRH_ATC: &[&str] = &["L02BX02", "L02AE01", "L02AE02", "L02AE03", "L02AE04"];

/// Opiates (prefix match), tramadol and paracetamol.
pub const PAIN_ATC_PREFIXES: &[&str] = &["N02AA", "N02AX02", "N02BE01"];

/// Pathologic fracture and spinal cord compression diagnoses.
pub const SRE_ICD: &[&str] = &[
    "M485", "M495", "M844", "M907", "G550", "G834", "G952", "G958", "G959", "G992",
];

pub const PROSTATE_CANCER_ICD: &str = "C619";

pub fn is_adt(atc: &str) -> bool {
    atc == BICALUTAMIDE || GNRH_ATC.contains(&atc)
}

pub fn is_gnrh(atc: &str) -> bool {
    GNRH_ATC.contains(&atc)
}

pub fn is_pain(atc: &str) -> bool {
    PAIN_ATC_PREFIXES.iter().any(|p| atc.starts_with(p))
}

pub fn is_sre(icd: &str) -> bool {
    SRE_ICD.contains(&icd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetastasisSite {
    Node,
    Visceral,
    Skeletal,
}

/// C77 lymph node, C78 visceral, C79 other sites (bone counted as skeletal).
pub fn metastasis_site(icd: &str) -> Option<MetastasisSite> {
    if icd.starts_with("C77") {
        Some(MetastasisSite::Node)
    } else if icd.starts_with("C78") {
        Some(MetastasisSite::Visceral)
    } else if icd.starts_with("C79") {
        Some(MetastasisSite::Skeletal)
    } else {
        None
    }
}

fn squash(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_whitespace() && *c != '.')
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

/// Normalizes an ICD-10 code to the dot-free uppercase form (`c61.9` -> `C619`).
/// Returns `None` when the result does not match `[A-Z][0-9]{2,3}[0-9A-Z]?`.
pub fn normalize_icd10(raw: &str) -> Option<String> {
    let code = squash(raw);
    let b = code.as_bytes();
    if !(3..=5).contains(&b.len()) || !b[0].is_ascii_uppercase() {
        return None;
    }
    if !b[1].is_ascii_digit() || !b[2].is_ascii_digit() {
        return None;
    }
    let ok = match b.len() {
        3 => true,
        4 => b[3].is_ascii_alphanumeric(),
        _ => b[3].is_ascii_digit() && b[4].is_ascii_alphanumeric(),
    };
    ok.then_some(code)
}

/// Normalizes an ATC code; valid codes match `[A-Z][0-9]{2}[A-Z]{2}[0-9]{2}`.
pub fn normalize_atc(raw: &str) -> Option<String> {
    let code = squash(raw);
    let b = code.as_bytes();
    let ok = b.len() == 7
        && b[0].is_ascii_uppercase()
        && b[1].is_ascii_digit()
        && b[2].is_ascii_digit()
        && b[3].is_ascii_uppercase()
        && b[4].is_ascii_uppercase()
        && b[5].is_ascii_digit()
        && b[6].is_ascii_digit();
    ok.then_some(code)
}
