//! Mean-field game problem data: costs, Hamiltonian, boundary-condition
//! encoding and the crowd-motion problem builder.

mod boundary;
mod costs;
mod file;
mod geometry;
mod problem;

pub use boundary::{BoundaryCode, CodeLayout, ObstacleShape, Scenario, SENTINEL};
pub use costs::{
    obstacle_penalty, obstacle_penalty_grad, sample_mean, DensityFn, Hamiltonian, MeasureView,
    RunningCost, TerminalCost,
};
pub use file::ScenarioFile;
pub use geometry::{Obstacle, WorkingBox};
pub use problem::{
    build_crowd_motion, build_crowd_motion_with, working_box, CrowdSettings, Gaussian, MfgProblem,
};
