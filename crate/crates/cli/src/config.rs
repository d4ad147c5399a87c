//! Run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use pionm::fbsde::FixedConfig;
use pionm::mfg::CrowdSettings;
use pionm::operator::OperatorTrainConfig;
use pionm::oracle::OracleConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainFixed,
    TrainOperator,
    Infer,
    Oracle,
    Eval,
    Plot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Crowd2d,
    Toy1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    Nf,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Cells per axis.
    pub points: usize,
    /// Grid levels per time step.
    pub levels_per_step: usize,
    pub solver: OracleConfig,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            points: 128,
            levels_per_step: 20,
            solver: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub sampler: SamplerKind,
    pub teacher: TeacherKind,
    /// Horizon of sampled planar problems.
    pub horizon: f64,
    pub settings: CrowdSettings,
    pub train: OperatorTrainConfig,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Crowd2d,
            teacher: TeacherKind::Nf,
            horizon: 2.0,
            settings: CrowdSettings::default(),
            train: OperatorTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub agents: usize,
    pub pair_radius: f64,
    /// Quadrature cells per axis for the volume measure.
    pub quadrature: usize,
    /// Inference lattice points per axis.
    pub lattice: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            agents: 1000,
            pair_radius: pionm::metrics::DEFAULT_PAIR_RADIUS,
            quadrature: 200,
            lattice: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    pub agents: usize,
    /// Panel edge in pixels.
    pub panel: u32,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { agents: 1000, panel: 240 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub scenario: Option<PathBuf>,
    pub family: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub fixed: FixedConfig,
    pub operator: OperatorSection,
    pub oracle: OracleSection,
    pub eval: EvalSection,
    pub plot: PlotSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that do not touch the file system.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        if let Some(c) = self.command {
            if c != command {
                return Err(CliError::Schema(format!("config is for {c:?}, invoked {command:?}")));
            }
        }
        if self.scenario.is_some() && self.family.is_some() {
            return Err(CliError::Schema("give either a scenario file or a family, not both".into()));
        }
        let needs_scenario = !matches!(command, Command::TrainOperator);
        if needs_scenario && self.scenario.is_none() && self.family.is_none() {
            return Err(CliError::Schema("a scenario file or family id is required".into()));
        }
        if let Some(f) = &self.family {
            if pionm::scenarios::FamilyId::parse(f).is_none() {
                return Err(CliError::Schema(format!("unknown family {f:?}")));
            }
        }
        let needs_checkpoint = matches!(command, Command::Infer | Command::Eval | Command::Plot);
        if needs_checkpoint && self.checkpoint.is_none() {
            return Err(CliError::Schema("--checkpoint is required".into()));
        }
        if !(self.eval.pair_radius >= 0.0) || self.eval.agents == 0 || self.plot.agents == 0 || self.plot.panel < 16 {
            return Err(CliError::Schema("eval/plot sections out of range".into()));
        }
        if self.oracle.points < 3 || self.oracle.levels_per_step == 0 {
            return Err(CliError::Schema("oracle section out of range".into()));
        }
        Ok(())
    }
}
