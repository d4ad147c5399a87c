//! Experiment families and random boundary-condition samplers.
//!
//! * obstacle change: `μ_0 = N((-7,0), 0.2²)`, target `(7,0)`, one circle
//!   `(x_o, y_o, R)` from `(0,0,2), (0,1,2), (0,-2,2), (0,-2,3), (0,-2,4)`;
//! * diffusion change: `μ_0 = N((-10,0), 1)`, target `(10,0)`, two ellipses
//!   forming a narrow passage, `σ ∈ {0.2, 1, 2}`;
//! * initial/terminal change: four `(x_0, y_0, σ_0, x_T, y_T)` settings with
//!   fixed diffusion and obstacle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mfg::{
    build_crowd_motion_with, BoundaryCode, CodeLayout, CrowdSettings, MfgProblem, Obstacle, Scenario, ScenarioFile,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyId {
    ObstacleChange,
    DiffusionChange,
    InitTerminalChange,
}

impl FamilyId {
    pub const ALL: [FamilyId; 3] = [FamilyId::ObstacleChange, FamilyId::DiffusionChange, FamilyId::InitTerminalChange];

    pub fn name(self) -> &'static str {
        match self {
            FamilyId::ObstacleChange => "obstacle-change",
            FamilyId::DiffusionChange => "diffusion-change",
            FamilyId::InitTerminalChange => "init-terminal-change",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn build(self) -> ScenarioFamily {
        match self {
            FamilyId::ObstacleChange => obstacle_family(),
            FamilyId::DiffusionChange => diffusion_family(),
            FamilyId::InitTerminalChange => init_terminal_family(),
        }
    }
}

/// Members of one family plus the problem settings they share.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFamily {
    pub id: FamilyId,
    pub codes: Vec<BoundaryCode>,
    /// Slot names that vary across members.
    pub swept: Vec<String>,
    pub horizon: f64,
    pub steps: usize,
    pub settings: CrowdSettings,
}

impl ScenarioFamily {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn layout(&self) -> CodeLayout {
        *self.codes[0].layout()
    }

    pub fn problem(&self, i: usize) -> Result<MfgProblem> {
        build_crowd_motion_with(&self.codes[i], self.steps, self.horizon, &self.settings)
    }

    /// Scenario files for every member.
    pub fn files(&self) -> Result<Vec<ScenarioFile>> {
        self.codes
            .iter()
            .map(|c| Ok(ScenarioFile::new(c.decode()?, self.horizon, self.steps, self.settings.clone())))
            .collect()
    }
}

pub const FAMILY_HORIZON: f64 = 2.0;
pub const FAMILY_STEPS: usize = 20;

fn encode_all(scenarios: Vec<Scenario>, layout: CodeLayout) -> Vec<BoundaryCode> {
    scenarios
        .iter()
        .map(|s| BoundaryCode::encode(s, layout).expect("family member is valid"))
        .collect()
}

fn swept_slots(codes: &[BoundaryCode]) -> Vec<String> {
    let names = codes[0].layout().slot_names();
    (0..names.len())
        .filter(|&i| codes.iter().any(|c| c.as_slice()[i] != codes[0].as_slice()[i]))
        .map(|i| names[i].clone())
        .collect()
}

fn family(id: FamilyId, codes: Vec<BoundaryCode>) -> ScenarioFamily {
    ScenarioFamily {
        id,
        swept: swept_slots(&codes),
        codes,
        horizon: FAMILY_HORIZON,
        steps: FAMILY_STEPS,
        settings: CrowdSettings::default(),
    }
}

pub const OBSTACLE_FAMILY_SIGMA: f64 = 0.3;

pub fn obstacle_family() -> ScenarioFamily {
    let settings = [(0.0, 0.0, 2.0), (0.0, 1.0, 2.0), (0.0, -2.0, 2.0), (0.0, -2.0, 3.0), (0.0, -2.0, 4.0)];
    let scenarios = settings
        .iter()
        .map(|&(x, y, r)| Scenario {
            init_mean: vec![-7.0, 0.0],
            init_std: 0.2,
            target: vec![7.0, 0.0],
            obstacles: vec![Obstacle::circle(&[x, y], r)],
            sigma: OBSTACLE_FAMILY_SIGMA,
        })
        .collect();
    family(FamilyId::ObstacleChange, encode_all(scenarios, CodeLayout::circles(2, 2)))
}

/// Two ellipses mirrored about `y = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PassageGeometry {
    /// Ellipse centers are `(0, ±offset)`.
    pub offset: f64,
    pub axes: [f64; 2],
}

impl Default for PassageGeometry {
    fn default() -> Self {
        Self {
            offset: 3.0,
            axes: [1.5, 2.5],
        }
    }
}

impl PassageGeometry {
    pub fn gap(&self) -> f64 {
        2.0 * (self.offset - self.axes[1])
    }

    pub fn obstacles(&self) -> Vec<Obstacle> {
        vec![
            Obstacle::ellipse(&[0.0, self.offset], &self.axes),
            Obstacle::ellipse(&[0.0, -self.offset], &self.axes),
        ]
    }
}

pub fn diffusion_family() -> ScenarioFamily {
    diffusion_family_with(PassageGeometry::default())
}

pub fn diffusion_family_with(geometry: PassageGeometry) -> ScenarioFamily {
    let scenarios = [0.2, 1.0, 2.0]
        .iter()
        .map(|&sigma| Scenario {
            init_mean: vec![-10.0, 0.0],
            init_std: 1.0,
            target: vec![10.0, 0.0],
            obstacles: geometry.obstacles(),
            sigma,
        })
        .collect();
    family(FamilyId::DiffusionChange, encode_all(scenarios, CodeLayout::ellipses(2, 2)))
}

pub const INIT_TERMINAL_SIGMA: f64 = 0.3;

pub fn init_terminal_family() -> ScenarioFamily {
    let columns = [
        ([-5.0, -5.0], 1.0, [3.0, 0.0]),
        ([-10.0, 5.0], 0.2, [10.0, -5.0]),
        ([-10.0, -5.0], 0.2, [10.0, -5.0]),
        ([-10.0, 5.0], 0.2, [5.0, 5.0]),
    ];
    let scenarios = columns
        .iter()
        .map(|(m, s, t)| Scenario {
            init_mean: m.to_vec(),
            init_std: *s,
            target: t.to_vec(),
            obstacles: vec![Obstacle::circle(&[0.0, 0.0], 2.0)],
            sigma: INIT_TERMINAL_SIGMA,
        })
        .collect();
    family(FamilyId::InitTerminalChange, encode_all(scenarios, CodeLayout::circles(2, 2)))
}

/// Source of random boundary codes for operator training.
pub trait ScenarioSampler: Sync {
    fn layout(&self) -> CodeLayout;
    fn draw(&self, rng: &mut ChaCha8Rng) -> BoundaryCode;
}

/// Independent uniform draws over per-slot ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSampler {
    pub layout: CodeLayout,
    /// Per-axis `[lo, hi]` of the initial mean.
    pub init_mean: Vec<[f64; 2]>,
    pub init_std: [f64; 2],
    pub target: Vec<[f64; 2]>,
    pub sigma: [f64; 2],
    /// Inclusive range of the obstacle count.
    pub obstacles: [usize; 2],
    pub obstacle_center: Vec<[f64; 2]>,
    pub radius: [f64; 2],
}

fn draw_in(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl UniformSampler {
    /// Planar crowd motion: init mean in `[-10,-5]×[-5,5]`, `σ_0 ∈ [0.2,1]`,
    /// target in `[3,10]×[-5,5]`, 0–2 circles with centers in `[-3,3]²` and
    /// `R ∈ [1,4]`, `σ ∈ [0.2,2]`.
    pub fn crowd_2d() -> Self {
        Self {
            layout: CodeLayout::circles(2, 2),
            init_mean: vec![[-10.0, -5.0], [-5.0, 5.0]],
            init_std: [0.2, 1.0],
            target: vec![[3.0, 10.0], [-5.0, 5.0]],
            sigma: [0.2, 2.0],
            obstacles: [0, 2],
            obstacle_center: vec![[-3.0, 3.0], [-3.0, 3.0]],
            radius: [1.0, 4.0],
        }
    }

    /// Obstacle-free line problems used for operator studies:
    /// init mean in `[-2,-0.5]`, `σ_0 ∈ [0.3,0.8]`, target in `[0.5,2]`,
    /// `σ ∈ [0.3,1]`.
    pub fn toy_1d() -> Self {
        Self {
            layout: CodeLayout::circles(1, 0),
            init_mean: vec![[-2.0, -0.5]],
            init_std: [0.3, 0.8],
            target: vec![[0.5, 2.0]],
            sigma: [0.3, 1.0],
            obstacles: [0, 0],
            obstacle_center: vec![[0.0, 0.0]],
            radius: [1.0, 1.0],
        }
    }
}

impl ScenarioSampler for UniformSampler {
    fn layout(&self) -> CodeLayout {
        self.layout
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> BoundaryCode {
        let d = self.layout.dim;
        let count = rng.random_range(self.obstacles[0]..=self.obstacles[1].min(self.layout.max_obstacles));
        let obstacles = (0..count)
            .map(|_| {
                let c: Vec<f64> = (0..d).map(|k| draw_in(rng, self.obstacle_center[k])).collect();
                Obstacle::circle(&c, draw_in(rng, self.radius))
            })
            .collect();
        let s = Scenario {
            init_mean: (0..d).map(|k| draw_in(rng, self.init_mean[k])).collect(),
            init_std: draw_in(rng, self.init_std),
            target: (0..d).map(|k| draw_in(rng, self.target[k])).collect(),
            obstacles,
            sigma: draw_in(rng, self.sigma),
        };
        BoundaryCode::encode(&s, self.layout).expect("sampler ranges give valid scenarios")
    }
}

/// Settings and time grid of the line problems drawn by
/// [`UniformSampler::toy_1d`].
pub fn toy_1d_settings() -> (CrowdSettings, f64, usize) {
    let settings = CrowdSettings {
        mean_attraction: 1.0,
        ..CrowdSettings::default()
    };
    (settings, 1.0, 10)
}
