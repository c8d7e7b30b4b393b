//! Experiment runner: config parsing, replica fan-out with per-replica
//! seed streams, JSONL record persistence with resume, and CSV summaries.

pub mod runner;

use crate::analytics::Regime;
use crate::distributions::{DistributionError, OffspringLaw};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DistributionError> for CliError {
    fn from(e: DistributionError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    WalkScaling,
    ExcursionLaw,
    DeepTrapCount,
    ReturnTimeCheck,
    SupercriticalTail,
    PhaseSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawSpec {
    Geometric {
        a: f64,
    },
    FinitePmf {
        pmf: Vec<f64>,
    },
    /// Either `p0` or the target `mean` must be given, not both.
    PowerTail {
        alpha: f64,
        #[serde(default)]
        p0: Option<f64>,
        #[serde(default)]
        mean: Option<f64>,
    },
}

impl LawSpec {
    pub fn build(&self) -> Result<OffspringLaw, CliError> {
        match self {
            LawSpec::Geometric { a } => Ok(OffspringLaw::geometric(*a)?),
            LawSpec::FinitePmf { pmf } => Ok(OffspringLaw::finite_pmf(pmf.clone())?),
            LawSpec::PowerTail { alpha, p0, mean } => match (p0, mean) {
                (Some(p0), None) => Ok(OffspringLaw::power_tail(*alpha, *p0)?),
                (None, Some(mean)) => Ok(OffspringLaw::power_tail_with_mean(*alpha, *mean)?),
                _ => Err(CliError::Config(
                    "power-tail law needs exactly one of p0 or mean".into(),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid {
    pub laws: Vec<LawSpec>,
    pub betas: Vec<f64>,
}

fn default_step_budget() -> u64 {
    1_000_000_000
}
fn default_node_budget() -> u64 {
    100_000_000
}
fn default_true() -> bool {
    true
}
fn default_out() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub law: LawSpec,
    pub beta: f64,
    /// Refuse to run when the (law, beta) pair sits on a regime boundary.
    #[serde(default = "default_true")]
    pub check_regime: bool,
    /// Dyadic exponent: walks run to level 2^levels; trap-depth threshold
    /// for deep-trap-count; backbone generations for supercritical-tail.
    pub levels: u32,
    pub replicas: u64,
    #[serde(default = "default_step_budget")]
    pub step_budget: u64,
    #[serde(default = "default_node_budget")]
    pub node_budget: u64,
    pub master_seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: String,
    #[serde(default)]
    pub phase_grid: Option<PhaseGrid>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.replicas < 1 {
            return Err(CliError::Config("replicas must be at least 1".into()));
        }
        if self.step_budget == 0 || self.node_budget == 0 {
            return Err(CliError::Config("budgets must be positive".into()));
        }
        self.law.build()?;
        match self.experiment {
            ExperimentKind::PhaseSweep => {
                if self.phase_grid.is_none() {
                    return Err(CliError::Config(
                        "phase-sweep needs a phase_grid".into(),
                    ));
                }
            }
            _ => {
                if self.beta <= 1.0 {
                    return Err(CliError::Config(format!(
                        "walk experiments need beta > 1, got {}",
                        self.beta
                    )));
                }
                if self.levels == 0 || self.levels > 40 {
                    return Err(CliError::Config(format!(
                        "levels must lie in 1..=40, got {}",
                        self.levels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable content hash carried by every record so merged files stay
    /// self-describing.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canonical.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// Everything one replica produces; fields irrelevant to the experiment
/// kind stay at their empty/null defaults so the schema is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub replica: u64,
    pub stream: u64,
    pub regime: Regime,
    /// (level, first hitting time), null when censored by the budget.
    pub delta: Vec<(u32, Option<u64>)>,
    /// (step count, walk depth at that step).
    pub depth_at: Vec<(u64, Option<u32>)>,
    /// Excursion counts of completed single-trap branches.
    pub excursion_entries: Vec<u64>,
    /// Completed excursion durations across all traps.
    pub excursion_durations: Vec<u64>,
    /// Deep-trap multiplicity draw (conditioned on at least one).
    pub deep_trap_count: Option<u64>,
    pub return_formula: Option<f64>,
    pub return_oracle: Option<f64>,
    pub branch_heights: Vec<u32>,
    pub censored: bool,
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn new(config_hash: String, replica: u64, regime: Regime) -> Self {
        Self {
            config_hash,
            replica,
            stream: replica,
            regime,
            delta: Vec::new(),
            depth_at: Vec::new(),
            excursion_entries: Vec::new(),
            excursion_durations: Vec::new(),
            deep_trap_count: None,
            return_formula: None,
            return_oracle: None,
            branch_heights: Vec::new(),
            censored: false,
            wall_ms: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "experiment": "walk-scaling",
            "law": {"variant": "geometric", "a": 0.3333333333333333},
            "beta": 3.0,
            "levels": 8,
            "replicas": 4,
            "master_seed": 1
        }"#
        .into()
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::from_json(&minimal_json()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.step_budget, 1_000_000_000);
    }

    #[test]
    fn config_rejections() {
        let bad = minimal_json().replace("\"replicas\": 4", "\"replicas\": 0");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = minimal_json().replace("\"beta\": 3.0", "\"beta\": 0.5");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = minimal_json().replace("\"a\": 0.3333333333333333", "\"a\": 1.5");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = minimal_json().replace("\"levels\": 8", "\"levels\": 8, \"bogus\": 1");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        // power-tail needs exactly one of p0/mean
        let bad = minimal_json().replace(
            r#"{"variant": "geometric", "a": 0.3333333333333333}"#,
            r#"{"variant": "power-tail", "alpha": 1.5}"#,
        );
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json(&minimal_json()).unwrap();
        let mut b = a.clone();
        b.master_seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn record_round_trips() {
        let mut r = RunRecord::new("abc".into(), 3, Regime::Fvie);
        r.delta = vec![(0, Some(0)), (8, None)];
        r.censored = true;
        let line = serde_json::to_string(&r).unwrap();
        // nulls are explicit, fields never dropped
        assert!(line.contains("\"deep_trap_count\":null"));
        let back: RunRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(r, back);
    }
}
