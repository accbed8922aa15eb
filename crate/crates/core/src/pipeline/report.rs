//! Run report: everything a run produced, as one serializable document plus a
//! plain-text rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::balance::{SkippedStratum, SpecLevel, StratumBalance};
use crate::covariates::descriptive::{render_descriptive, DescriptiveRow};
use crate::covariates::factor::DISPLAY_THRESHOLD;
use crate::covariates::FactorModel;
use crate::estimate::cll::HazardFit;
use crate::estimate::{EffectEstimate, MorbidityBounds, PlaceboResult, SubgroupEstimates};
use crate::registry::{Arm, AttritionStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum_w: u32,
    pub level: SpecLevel,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub n_constraints: usize,
    pub n_dropped_constraints: usize,
    pub converged: bool,
    pub iterations: usize,
    pub max_constraint_violation: f64,
    pub max_abs_smd_after: f64,
    pub share_above_001: f64,
    pub effective_comparisons: f64,
}

impl From<&StratumBalance> for StratumSummary {
    fn from(s: &StratumBalance) -> Self {
        StratumSummary {
            stratum_w: s.stratum_w,
            level: s.level,
            n_treated: s.report.n_treated,
            n_comparison: s.report.n_comparison,
            n_constraints: s.constraint_labels.len(),
            n_dropped_constraints: s.dropped.len(),
            converged: s.solution.converged,
            iterations: s.solution.iterations,
            max_constraint_violation: s.solution.max_constraint_violation,
            max_abs_smd_after: s.report.max_abs_smd_after,
            share_above_001: s.report.share_above_001,
            effective_comparisons: s.report.effective_comparisons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub outcome: String,
    pub month: u32,
    pub result: SubgroupEstimates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: PipelineConfig,
    /// Per arm, each step's output is the next step's input.
    pub attrition: Vec<AttritionStep>,
    pub descriptive: Vec<DescriptiveRow>,
    pub factor_model: FactorModel,
    pub strata: Vec<StratumSummary>,
    pub skipped_strata: Vec<SkippedStratum>,
    pub estimates: Vec<EffectEstimate>,
    pub bounds: Vec<MorbidityBounds>,
    pub subgroups: Vec<SubgroupRow>,
    pub placebo: Option<PlaceboResult>,
    pub cll: Option<HazardFit>,
    pub warnings: Vec<String>,
}

/// Whether every arm's attrition chain telescopes.
pub fn attrition_telescopes(steps: &[AttritionStep]) -> bool {
    [Arm::Treated, Arm::Comparison].iter().all(|arm| {
        let chain: Vec<&AttritionStep> = steps.iter().filter(|s| s.arm == *arm).collect();
        chain.windows(2).all(|p| p[0].output == p[1].input) && chain.iter().all(|s| s.output <= s.input)
    })
}

fn estimate_line(s: &mut String, e: &EffectEstimate) {
    let _ = writeln!(
        s,
        "{:<10} {:>5} {:>10.4} {:>9.4} {:>10.4} {:>10.4} {:>9.4} {:>4} {}",
        e.outcome,
        e.month,
        e.beta,
        e.se,
        e.ci_lo,
        e.ci_hi,
        e.p,
        if e.significant { "*" } else { "" },
        e.tag.name()
    );
}

fn estimate_header(s: &mut String) {
    let _ = writeln!(
        s,
        "{:<10} {:>5} {:>10} {:>9} {:>10} {:>10} {:>9} {:>4} tag",
        "outcome", "month", "beta", "se", "ci_lo", "ci_hi", "p", "sig"
    );
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config hash {}", self.config_hash);

        s.push_str("\n== Attrition ==\n");
        for a in &self.attrition {
            let arm = match a.arm {
                Arm::Treated => "treated",
                Arm::Comparison => "comparison",
            };
            let _ = writeln!(s, "{arm:<10} {:<44} {:>7} -> {:>7}", a.step, a.input, a.output);
        }

        s.push_str("\n== Pre-diagnosis covariates ==\n");
        s.push_str(&render_descriptive(&self.descriptive));

        s.push_str("\n== Factor model ==\n");
        s.push_str(&self.factor_model.render(DISPLAY_THRESHOLD));

        s.push_str("\n== Balance ==\n");
        let _ = writeln!(
            s,
            "{:>7} {:>9} {:>5} {:>6} {:>5} {:>5} {:>9} {:>9} {:>8} {:>8}",
            "stratum", "level", "n_t", "n_c", "r", "conv", "max_viol", "max_smd", ">0.01", "ess"
        );
        for st in &self.strata {
            let _ = writeln!(
                s,
                "{:>7} {:>9} {:>5} {:>6} {:>5} {:>5} {:>9.1e} {:>9.4} {:>8.4} {:>8.1}",
                st.stratum_w,
                match st.level {
                    SpecLevel::Full => "full",
                    SpecLevel::MeansOnly => "means",
                },
                st.n_treated,
                st.n_comparison,
                st.n_constraints,
                if st.converged { "yes" } else { "no" },
                st.max_constraint_violation,
                st.max_abs_smd_after,
                st.share_above_001,
                st.effective_comparisons
            );
        }
        for k in &self.skipped_strata {
            let _ = writeln!(s, "{:>7} skipped: {}", k.stratum_w, k.reason);
        }

        s.push_str("\n== Effect estimates ==\n");
        estimate_header(&mut s);
        for e in &self.estimates {
            estimate_line(&mut s, e);
        }

        if !self.bounds.is_empty() {
            s.push_str("\n== Morbidity bounds ==\n");
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>10} {:>10} {:>10} {:>10}",
                "outcome", "month", "lower", "complete", "upper", "mort_diff"
            );
            for b in &self.bounds {
                let _ = writeln!(
                    s,
                    "{:<10} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    b.lower.outcome, b.lower.month, b.lower.beta, b.complete_case.beta, b.upper.beta, b.mortality_contrast
                );
            }
        }

        if !self.subgroups.is_empty() {
            s.push_str("\n== DTP subgroups ==\n");
            estimate_header(&mut s);
            for g in &self.subgroups {
                estimate_line(&mut s, &g.result.lower);
                estimate_line(&mut s, &g.result.upper);
            }
        }

        if let Some(p) = &self.placebo {
            s.push_str("\n== Placebo test ==\n");
            let _ = writeln!(s, "threshold {:.7}", p.threshold);
            estimate_header(&mut s);
            for e in &p.estimates {
                estimate_line(&mut s, e);
            }
            let _ = writeln!(s, "hidden bias flagged: {}", if p.hidden_bias { "yes" } else { "no" });
        }

        if let Some(c) = &self.cll {
            s.push_str("\n== Discrete-time hazard (complementary log-log) ==\n");
            let _ = writeln!(
                s,
                "tau {:.4} (se {:.4})  hazard ratio {:.4}  converged {}  iterations {}",
                c.tau,
                c.tau_se,
                c.tau.exp(),
                c.converged,
                c.iterations
            );
        }

        if !self.warnings.is_empty() {
            s.push_str("\n== Warnings ==\n");
            for w in &self.warnings {
                let _ = writeln!(s, "- {w}");
            }
        }
        s
    }
}
