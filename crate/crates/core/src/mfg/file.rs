//! JSON scenario files.
//!
//! ```json
//! {
//!   "init_mean": [-7, 0], "init_std": 0.2, "target": [7, 0],
//!   "obstacles": [{"center": [0, 0], "radius": 2}],
//!   "sigma": 0.3, "T": 2.0, "N": 20, "s_safe": 0.5, "f_in": 0.0
//! }
//! ```
//!
//! Obstacles take either `radius` (circle) or `axes` (ellipse semi-axes).
//! Optional keys: `obstacle_weight`, `congestion`, `mean_attraction`,
//! `hamiltonian_scale`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boundary::{BoundaryCode, CodeLayout, Scenario};
use super::geometry::Obstacle;
use super::problem::{build_crowd_motion_with, CrowdSettings, MfgProblem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleEntry {
    center: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenarioFile {
    init_mean: Vec<f64>,
    init_std: f64,
    target: Vec<f64>,
    #[serde(default)]
    obstacles: Vec<ObstacleEntry>,
    sigma: f64,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "N")]
    steps: usize,
    #[serde(default = "default_s_safe")]
    s_safe: f64,
    #[serde(default)]
    f_in: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    obstacle_weight: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    congestion: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    mean_attraction: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    hamiltonian_scale: f64,
}

fn default_s_safe() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn is_one(v: &f64) -> bool {
    *v == 1.0
}
fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// A scenario plus the problem settings stored alongside it on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub horizon: f64,
    pub steps: usize,
    pub settings: CrowdSettings,
}

impl ScenarioFile {
    pub fn new(scenario: Scenario, horizon: f64, steps: usize, settings: CrowdSettings) -> Self {
        Self {
            scenario,
            horizon,
            steps,
            settings,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawScenarioFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidScenario(format!("scenario schema: {e}")))?;
        let mut obstacles = Vec::with_capacity(raw.obstacles.len());
        for (i, o) in raw.obstacles.into_iter().enumerate() {
            let obstacle = match (o.radius, o.axes) {
                (Some(radius), None) => Obstacle::Circle {
                    center: o.center,
                    radius,
                },
                (None, Some(axes)) => Obstacle::Ellipse {
                    center: o.center,
                    axes,
                },
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidScenario(format!(
                        "obstacles[{i}]: give either \"radius\" or \"axes\", not both"
                    )))
                }
                (None, None) => {
                    return Err(Error::InvalidScenario(format!(
                        "obstacles[{i}]: missing \"radius\" or \"axes\""
                    )))
                }
            };
            obstacles.push(obstacle);
        }
        let scenario = Scenario {
            init_mean: raw.init_mean,
            init_std: raw.init_std,
            target: raw.target,
            obstacles,
            sigma: raw.sigma,
        };
        scenario.validate()?;
        if !(raw.horizon.is_finite() && raw.horizon > 0.0) {
            return Err(Error::InvalidScenario(format!("\"T\" must be > 0, got {}", raw.horizon)));
        }
        if raw.steps < 2 {
            return Err(Error::InvalidScenario(format!("\"N\" must be >= 2, got {}", raw.steps)));
        }
        for (name, v) in [
            ("s_safe", raw.s_safe),
            ("f_in", raw.f_in),
            ("obstacle_weight", raw.obstacle_weight),
            ("congestion", raw.congestion),
            ("mean_attraction", raw.mean_attraction),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidScenario(format!("\"{name}\" must be finite")));
            }
        }
        if !(raw.hamiltonian_scale.is_finite() && raw.hamiltonian_scale > 0.0) {
            return Err(Error::InvalidScenario("\"hamiltonian_scale\" must be > 0".into()));
        }
        let settings = CrowdSettings {
            s_safe: raw.s_safe,
            f_in: raw.f_in,
            obstacle_weight: raw.obstacle_weight,
            congestion: raw.congestion,
            mean_attraction: raw.mean_attraction,
            hamiltonian_scale: raw.hamiltonian_scale,
            ..CrowdSettings::default()
        };
        Ok(Self {
            scenario,
            horizon: raw.horizon,
            steps: raw.steps,
            settings,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let raw = RawScenarioFile {
            init_mean: self.scenario.init_mean.clone(),
            init_std: self.scenario.init_std,
            target: self.scenario.target.clone(),
            obstacles: self
                .scenario
                .obstacles
                .iter()
                .map(|o| match o {
                    Obstacle::Circle { center, radius } => ObstacleEntry {
                        center: center.clone(),
                        radius: Some(*radius),
                        axes: None,
                    },
                    Obstacle::Ellipse { center, axes } => ObstacleEntry {
                        center: center.clone(),
                        radius: None,
                        axes: Some(axes.clone()),
                    },
                })
                .collect(),
            sigma: self.scenario.sigma,
            horizon: self.horizon,
            steps: self.steps,
            s_safe: self.settings.s_safe,
            f_in: self.settings.f_in,
            obstacle_weight: self.settings.obstacle_weight,
            congestion: self.settings.congestion,
            mean_attraction: self.settings.mean_attraction,
            hamiltonian_scale: self.settings.hamiltonian_scale,
        };
        serde_json::to_string_pretty(&raw).expect("scenario serializes")
    }

    /// Smallest circle or ellipse layout that holds this scenario.
    pub fn natural_layout(&self) -> CodeLayout {
        let n = self.scenario.obstacles.len();
        match self.scenario.obstacles.first() {
            Some(Obstacle::Ellipse { .. }) => CodeLayout::ellipses(self.scenario.dim(), n),
            _ => CodeLayout::circles(self.scenario.dim(), n),
        }
    }

    pub fn problem(&self, layout: CodeLayout) -> Result<(BoundaryCode, MfgProblem)> {
        let code = BoundaryCode::encode(&self.scenario, layout)?;
        let problem = build_crowd_motion_with(&code, self.steps, self.horizon, &self.settings)?;
        Ok((code, problem))
    }
}
