//! Hamiltonian, running cost and terminal cost of the crowd-motion family.
//!
//! All costs are evaluated pointwise at an agent state `x`; the population
//! enters through a [`MeasureView`] of the current marginal. The aggregate
//! costs of the control problem are the population averages of these
//! pointwise values.

use serde::{Deserialize, Serialize};

use super::geometry::Obstacle;

/// Quadratic Hamiltonian `H(x, p) = scale/2 |p|²`.
///
/// The optimal feedback is `α̂ = -∇_p H(∇u) = -scale ∇u` and the matching
/// running control cost is `|α|² / (2 scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Hamiltonian {
    Quadratic { scale: f64 },
}

impl Default for Hamiltonian {
    fn default() -> Self {
        Hamiltonian::Quadratic { scale: 1.0 }
    }
}

impl Hamiltonian {
    pub fn scale(&self) -> f64 {
        match self {
            Hamiltonian::Quadratic { scale } => *scale,
        }
    }

    pub fn value(&self, _x: &[f64], p: &[f64]) -> f64 {
        0.5 * self.scale() * p.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) {
        let c = self.scale();
        for (o, v) in out.iter_mut().zip(p) {
            *o = c * v;
        }
    }

    /// Control cost of playing drift `alpha`.
    pub fn lagrangian(&self, alpha: &[f64]) -> f64 {
        alpha.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.scale())
    }
}

/// `exp(-|x-x_o|²) + exp(-||x-x_o|² - s_safe|²)`.
pub fn obstacle_penalty(x: &[f64], obstacle: &Obstacle, safety_margin: f64) -> f64 {
    let r2 = dist2(x, obstacle.center());
    (-r2).exp() + (-(r2 - safety_margin).powi(2)).exp()
}

/// Gradient of [`obstacle_penalty`] with respect to `x`, accumulated into `out`.
pub fn obstacle_penalty_grad(x: &[f64], obstacle: &Obstacle, safety_margin: f64, scale: f64, out: &mut [f64]) {
    let c = obstacle.center();
    let r2 = dist2(x, c);
    let shell = r2 - safety_margin;
    let dr2 = -(-r2).exp() - 2.0 * shell * (-shell * shell).exp();
    for k in 0..x.len() {
        out[k] += scale * dr2 * 2.0 * (x[k] - c[k]);
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Density callback: returns `μ(x)` and writes `∇μ(x)` into the slice.
pub type DensityFn<'a> = dyn Fn(&[f64], &mut [f64]) -> f64 + Sync + 'a;

/// What the running cost may read from the current population marginal.
#[derive(Clone, Copy)]
pub struct MeasureView<'a> {
    pub mean: &'a [f64],
    pub density: Option<&'a DensityFn<'a>>,
}

impl<'a> MeasureView<'a> {
    pub fn from_mean(mean: &'a [f64]) -> Self {
        Self { mean, density: None }
    }
}

/// Sample mean of a set of points in ℝ^d.
pub fn sample_mean(samples: &[f64], dim: usize) -> Vec<f64> {
    let n = samples.len() / dim;
    let mut m = vec![0.0; dim];
    if n == 0 {
        return m;
    }
    for k in 0..dim {
        m[k] = crate::exec::compensated_sum(samples.iter().skip(k).step_by(dim).copied()) / n as f64;
    }
    m
}

/// Running cost
/// `f(x, μ) = f_in + w Σ_o penalty(x, o) + c μ(x) + κ/2 |x - mean(μ)|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningCost {
    pub constant: f64,
    pub obstacles: Vec<Obstacle>,
    pub safety_margin: f64,
    pub obstacle_weight: f64,
    pub congestion: f64,
    pub mean_attraction: f64,
}

impl Default for RunningCost {
    fn default() -> Self {
        Self {
            constant: 0.0,
            obstacles: Vec::new(),
            safety_margin: 0.5,
            obstacle_weight: 1.0,
            congestion: 0.0,
            mean_attraction: 0.0,
        }
    }
}

impl RunningCost {
    pub fn needs_density(&self) -> bool {
        self.congestion != 0.0
    }

    pub fn value(&self, x: &[f64], mu: &MeasureView<'_>) -> f64 {
        let mut f = self.constant;
        for o in &self.obstacles {
            f += self.obstacle_weight * obstacle_penalty(x, o, self.safety_margin);
        }
        if self.congestion != 0.0 {
            if let Some(density) = mu.density {
                let mut g = vec![0.0; x.len()];
                f += self.congestion * density(x, &mut g);
            }
        }
        if self.mean_attraction != 0.0 {
            f += 0.5 * self.mean_attraction * dist2(x, mu.mean);
        }
        f
    }

    /// Writes `∇_x f(x, μ)` into `out` (measure held fixed).
    pub fn grad(&self, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for o in &self.obstacles {
            obstacle_penalty_grad(x, o, self.safety_margin, self.obstacle_weight, out);
        }
        if self.congestion != 0.0 {
            if let Some(density) = mu.density {
                let mut g = vec![0.0; x.len()];
                density(x, &mut g);
                for k in 0..x.len() {
                    out[k] += self.congestion * g[k];
                }
            }
        }
        if self.mean_attraction != 0.0 {
            for k in 0..x.len() {
                out[k] += self.mean_attraction * (x[k] - mu.mean[k]);
            }
        }
    }
}

/// Terminal cost `g(x) = |x - x_T|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TerminalCost {
    Quadratic { target: Vec<f64> },
}

impl TerminalCost {
    pub fn target(&self) -> &[f64] {
        match self {
            TerminalCost::Quadratic { target } => target,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        dist2(x, self.target())
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), t) in out.iter_mut().zip(x).zip(self.target()) {
            *o = 2.0 * (a - t);
        }
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        2.0 * x.len() as f64
    }

    /// Hessian-vector product `∇²g v`.
    pub fn hess_vec(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(v) {
            *o = 2.0 * a;
        }
    }
}
