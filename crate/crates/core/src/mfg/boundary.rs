//! Fixed-length encoding of boundary conditions.
//!
//! Slot map for a layout of dimension `d` holding up to `K` obstacles:
//!
//! ```text
//! [0, d)            initial mean
//! d                 initial standard deviation
//! [d+1, 2d+1)       target point
//! 2d+1              diffusion coefficient
//! 2d+2 + k*s ..     obstacle k: center (d) then radius (1) for circles,
//!                   or center (d) then semi-axes (d) for ellipses
//! ```
//!
//! Absent obstacles occupy their slots with [`SENTINEL`]. Present obstacles are
//! packed first; a zero radius can never be valid, so the sentinel is
//! unambiguous.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::Obstacle;
use crate::error::{Error, Result};

pub const SENTINEL: f64 = 0.0;

/// Structured description of one crowd-motion instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub init_mean: Vec<f64>,
    pub init_std: f64,
    pub target: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    pub sigma: f64,
}

impl Scenario {
    pub fn dim(&self) -> usize {
        self.init_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidScenario("init_mean must be non-empty".into()));
        }
        if self.target.len() != d {
            return Err(Error::InvalidScenario(format!(
                "target has dimension {}, init_mean has {d}",
                self.target.len()
            )));
        }
        if !self.init_mean.iter().chain(&self.target).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("init_mean/target".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::InvalidScenario(format!(
                "init_std must be finite and > 0, got {}",
                self.init_std
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidScenario(format!(
                "sigma must be finite and > 0, got {}",
                self.sigma
            )));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if o.dim() != d {
                return Err(Error::InvalidScenario(format!(
                    "obstacle {i} has dimension {}, expected {d}",
                    o.dim()
                )));
            }
            if !o.is_valid() {
                return Err(Error::InvalidScenario(format!(
                    "obstacle {i} must have a finite center and positive finite size"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleShape {
    Circle,
    Ellipse,
}

/// Declared slot layout of a boundary code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeLayout {
    pub dim: usize,
    pub max_obstacles: usize,
    #[serde(default)]
    pub min_obstacles: usize,
    pub shape: ObstacleShape,
    /// Sort obstacles into canonical order when encoding.
    #[serde(default)]
    pub canonical: bool,
}

impl CodeLayout {
    pub fn circles(dim: usize, max_obstacles: usize) -> Self {
        Self {
            dim,
            max_obstacles,
            min_obstacles: 0,
            shape: ObstacleShape::Circle,
            canonical: false,
        }
    }

    pub fn ellipses(dim: usize, max_obstacles: usize) -> Self {
        Self {
            shape: ObstacleShape::Ellipse,
            ..Self::circles(dim, max_obstacles)
        }
    }

    pub fn with_canonical(mut self, canonical: bool) -> Self {
        self.canonical = canonical;
        self
    }

    pub fn with_min_obstacles(mut self, min: usize) -> Self {
        self.min_obstacles = min;
        self
    }

    pub fn slot_len(&self) -> usize {
        match self.shape {
            ObstacleShape::Circle => self.dim + 1,
            ObstacleShape::Ellipse => 2 * self.dim,
        }
    }

    fn header_len(&self) -> usize {
        2 * self.dim + 2
    }

    pub fn len(&self) -> usize {
        self.header_len() + self.max_obstacles * self.slot_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable name of every slot, in vector order.
    pub fn slot_names(&self) -> Vec<String> {
        let d = self.dim;
        let mut names: Vec<String> = (0..d).map(|k| format!("init_mean[{k}]")).collect();
        names.push("init_std".into());
        names.extend((0..d).map(|k| format!("target[{k}]")));
        names.push("sigma".into());
        for j in 0..self.max_obstacles {
            names.extend((0..d).map(|k| format!("obstacle[{j}].center[{k}]")));
            match self.shape {
                ObstacleShape::Circle => names.push(format!("obstacle[{j}].radius")),
                ObstacleShape::Ellipse => {
                    names.extend((0..d).map(|k| format!("obstacle[{j}].axes[{k}]")))
                }
            }
        }
        names
    }

    pub fn describe(&self) -> String {
        format!(
            "dim={} shape={:?} max_obstacles={} canonical={}",
            self.dim, self.shape, self.max_obstacles, self.canonical
        )
    }
}

/// Flat, fixed-length encoding of a [`Scenario`] under a [`CodeLayout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCode {
    layout: CodeLayout,
    values: Vec<f64>,
}

impl BoundaryCode {
    pub fn encode(scenario: &Scenario, layout: CodeLayout) -> Result<Self> {
        scenario.validate()?;
        if scenario.dim() != layout.dim {
            return Err(Error::LayoutMismatch {
                expected: layout.describe(),
                found: format!("scenario of dimension {}", scenario.dim()),
            });
        }
        let count = scenario.obstacles.len();
        if count > layout.max_obstacles {
            return Err(Error::CapacityExceeded {
                count,
                capacity: layout.max_obstacles,
            });
        }
        if count < layout.min_obstacles {
            return Err(Error::LayoutMismatch {
                expected: format!("at least {} obstacles", layout.min_obstacles),
                found: format!("{count} obstacles"),
            });
        }
        let mut obstacles = scenario.obstacles.clone();
        if layout.canonical {
            obstacles.sort_by(|a, b| obstacle_key(a).partial_cmp(&obstacle_key(b)).unwrap());
        }
        let mut values = Vec::with_capacity(layout.len());
        values.extend_from_slice(&scenario.init_mean);
        values.push(scenario.init_std);
        values.extend_from_slice(&scenario.target);
        values.push(scenario.sigma);
        for o in &obstacles {
            match (o, layout.shape) {
                (Obstacle::Circle { center, radius }, ObstacleShape::Circle) => {
                    values.extend_from_slice(center);
                    values.push(*radius);
                }
                (Obstacle::Ellipse { center, axes }, ObstacleShape::Ellipse) => {
                    values.extend_from_slice(center);
                    values.extend_from_slice(axes);
                }
                _ => {
                    return Err(Error::LayoutMismatch {
                        expected: layout.describe(),
                        found: format!("obstacle {o:?}"),
                    })
                }
            }
        }
        values.resize(layout.len(), SENTINEL);
        Ok(Self { layout, values })
    }

    /// Rebuilds a code from a raw vector, validating it by decoding.
    pub fn from_values(layout: CodeLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch {
                expected: format!("{} slots ({})", layout.len(), layout.describe()),
                found: format!("{} slots", values.len()),
            });
        }
        let code = Self { layout, values };
        code.decode()?;
        Ok(code)
    }

    pub fn decode(&self) -> Result<Scenario> {
        let l = &self.layout;
        let d = l.dim;
        let v = &self.values;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("boundary code".into()));
        }
        let init_mean = v[0..d].to_vec();
        let init_std = v[d];
        let target = v[d + 1..2 * d + 1].to_vec();
        let sigma = v[2 * d + 1];
        let mut obstacles = Vec::new();
        let mut seen_absent = false;
        for j in 0..l.max_obstacles {
            let slot = &v[l.header_len() + j * l.slot_len()..l.header_len() + (j + 1) * l.slot_len()];
            if slot.iter().all(|x| *x == SENTINEL) {
                seen_absent = true;
                continue;
            }
            if seen_absent {
                return Err(Error::InvalidScenario(format!(
                    "obstacle slot {j} is filled after an empty slot"
                )));
            }
            let center = slot[..d].to_vec();
            let o = match l.shape {
                ObstacleShape::Circle => Obstacle::Circle {
                    center,
                    radius: slot[d],
                },
                ObstacleShape::Ellipse => Obstacle::Ellipse {
                    center,
                    axes: slot[d..].to_vec(),
                },
            };
            obstacles.push(o);
        }
        let s = Scenario {
            init_mean,
            init_std,
            target,
            obstacles,
            sigma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn layout(&self) -> &CodeLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Short stable digest of the layout and slot values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.layout.describe().as_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn obstacle_key(o: &Obstacle) -> Vec<f64> {
    let mut k = o.center().to_vec();
    match o {
        Obstacle::Circle { radius, .. } => k.push(*radius),
        Obstacle::Ellipse { axes, .. } => k.extend_from_slice(axes),
    }
    k
}
