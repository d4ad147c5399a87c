use serde::{Deserialize, Serialize};

use super::boundary::{BoundaryCode, Scenario};
use super::costs::{Hamiltonian, RunningCost, TerminalCost};
use super::geometry::WorkingBox;
use crate::error::{Error, Result};

/// Isotropic Gaussian `N(mean, std² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Gaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let r2: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(a, m)| ((a - m) / self.std).powi(2))
            .sum();
        -0.5 * r2 - d * (self.std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
    }

    /// `∇ log pdf` at `x`.
    pub fn score(&self, x: &[f64], out: &mut [f64]) {
        let v = self.std * self.std;
        for ((o, a), m) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = -(a - m) / v;
        }
    }
}

/// Knobs of the crowd-motion cost that are not part of the boundary code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrowdSettings {
    /// Safety-shell offset in the obstacle penalty.
    pub s_safe: f64,
    /// Constant interaction term of the running cost.
    pub f_in: f64,
    pub obstacle_weight: f64,
    /// Weight `c` of the optional congestion term `c μ(x)`.
    pub congestion: f64,
    /// Weight `κ` of the optional mean-attraction term `κ/2 |x - mean(μ)|²`.
    pub mean_attraction: f64,
    pub hamiltonian_scale: f64,
    /// Box margin in units of the larger of init std and `σ √T`.
    pub box_margin: f64,
}

impl Default for CrowdSettings {
    fn default() -> Self {
        Self {
            s_safe: 0.5,
            f_in: 0.0,
            obstacle_weight: 1.0,
            congestion: 0.0,
            mean_attraction: 0.0,
            hamiltonian_scale: 1.0,
            box_margin: 6.0,
        }
    }
}

/// A fixed-coefficient mean-field game instance.
///
/// The state follows `dX = α dt + σ dW`; the value function solves
/// `-∂_t u - ν Δu + H(∇u) = f(x, μ_t)` with `ν = σ²/2` and `u(T) = g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfgProblem {
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub sigma: f64,
    pub hamiltonian: Hamiltonian,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub initial: Gaussian,
    pub working_box: WorkingBox,
}

impl MfgProblem {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidScenario("dimension must be positive".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidScenario(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidScenario("steps must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidScenario(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.initial.std.is_finite() && self.initial.std > 0.0) {
            return Err(Error::InvalidScenario(format!(
                "initial std must be > 0, got {}",
                self.initial.std
            )));
        }
        if self.initial.dim() != self.dim || self.terminal.target().len() != self.dim {
            return Err(Error::InvalidScenario("dimension mismatch between costs".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }

    /// Viscosity of the HJB/FPK pair matching the SDE volatility.
    pub fn viscosity(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    /// Copy of this problem with a different number of time steps.
    pub fn with_steps(&self, steps: usize) -> Self {
        Self {
            steps,
            ..self.clone()
        }
    }
}

/// Box covering the initial mean, target and obstacles, padded by
/// `margin * max(σ_0, σ √T)` on every side.
pub fn working_box(scenario: &Scenario, horizon: f64, margin: f64) -> WorkingBox {
    let d = scenario.dim();
    let pad = margin * scenario.init_std.max(scenario.sigma * horizon.sqrt());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut grow = |c: &[f64], ext: &dyn Fn(usize) -> f64| {
        for k in 0..d {
            lo[k] = lo[k].min(c[k] - ext(k));
            hi[k] = hi[k].max(c[k] + ext(k));
        }
    };
    grow(&scenario.init_mean, &|_| 0.0);
    grow(&scenario.target, &|_| 0.0);
    for o in &scenario.obstacles {
        grow(o.center(), &|k| o.extent(k));
    }
    WorkingBox::new(
        lo.iter().map(|v| v - pad).collect(),
        hi.iter().map(|v| v + pad).collect(),
    )
}

pub fn build_crowd_motion(code: &BoundaryCode, steps: usize, horizon: f64) -> Result<MfgProblem> {
    build_crowd_motion_with(code, steps, horizon, &CrowdSettings::default())
}

/// Crowd-motion instance: obstacle penalty running cost, quadratic distance
/// to the target as terminal cost, Gaussian initial density.
pub fn build_crowd_motion_with(
    code: &BoundaryCode,
    steps: usize,
    horizon: f64,
    settings: &CrowdSettings,
) -> Result<MfgProblem> {
    if steps < 2 {
        return Err(Error::InvalidScenario(format!("need at least 2 time steps, got {steps}")));
    }
    let scenario = code.decode()?;
    if code.layout().min_obstacles > scenario.obstacles.len() {
        return Err(Error::LayoutMismatch {
            expected: format!("at least {} obstacles", code.layout().min_obstacles),
            found: format!("{} obstacles", scenario.obstacles.len()),
        });
    }
    let problem = MfgProblem {
        dim: scenario.dim(),
        horizon,
        steps,
        sigma: scenario.sigma,
        hamiltonian: Hamiltonian::Quadratic {
            scale: settings.hamiltonian_scale,
        },
        running: RunningCost {
            constant: settings.f_in,
            obstacles: scenario.obstacles.clone(),
            safety_margin: settings.s_safe,
            obstacle_weight: settings.obstacle_weight,
            congestion: settings.congestion,
            mean_attraction: settings.mean_attraction,
        },
        terminal: TerminalCost::Quadratic {
            target: scenario.target.clone(),
        },
        initial: Gaussian {
            mean: scenario.init_mean.clone(),
            std: scenario.init_std,
        },
        working_box: working_box(&scenario, horizon, settings.box_margin),
    };
    problem.validate()?;
    Ok(problem)
}
