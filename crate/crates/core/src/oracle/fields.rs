//! Field dumps and flow-versus-grid comparison.
//!
//! A dump is a CSV whose first line is a `#` header carrying the grid:
//!
//! ```text
//! # dim=1 lo=-4 hi=4 points=128 levels=400 horizon=1
//! level,t,x0,u,mu
//! ```

use std::path::Path;

use serde::Serialize;

use super::{GridSpec, OracleSolution};
use crate::error::{Error, Result};
use crate::fbsde::{ValueField, ValuePath};
use crate::flow::DensityFlow;
use crate::io::write_atomic;
use crate::mfg::WorkingBox;

/// Error of one flow marginal against the matching grid level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelError {
    pub step: usize,
    pub time: f64,
    /// `Σ |μ_flow - μ_grid| · cell volume`.
    pub l1: f64,
    /// Root mean square of `u_vp - u_grid` weighted by `μ_grid`.
    pub value_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub levels: Vec<LevelError>,
}

impl Comparison {
    pub fn max_l1(&self) -> f64 {
        self.levels.iter().map(|l| l.l1).fold(0.0, f64::max)
    }

    pub fn max_value_rmse(&self) -> f64 {
        self.levels.iter().map(|l| l.value_rmse).fold(0.0, f64::max)
    }
}

/// Compares flow marginals and value heads with the grid fields at every
/// flow step `n`, using grid level `n N_t / N`.
pub fn compare_to_flow(solution: &OracleSolution, flow: &DensityFlow, vp: &ValuePath) -> Result<Comparison> {
    let grid = &solution.grid;
    if (vp.horizon() - solution.horizon).abs() > 1e-12 * solution.horizon.max(1.0) {
        return Err(Error::Incompatible(format!(
            "horizon {} of the value path differs from the grid horizon {}",
            vp.horizon(),
            solution.horizon
        )));
    }
    if flow.dim() != grid.dim() || vp.dim() != grid.dim() {
        return Err(Error::Incompatible(format!(
            "dimensions: flow {}, value path {}, grid {}",
            flow.dim(),
            vp.dim(),
            grid.dim()
        )));
    }
    let steps = flow.steps();
    if vp.steps() != steps {
        return Err(Error::Incompatible(format!("flow has {steps} steps, value path {}", vp.steps())));
    }
    if grid.levels % steps != 0 {
        return Err(Error::Incompatible(format!(
            "{} grid levels are not a multiple of {steps} flow steps",
            grid.levels
        )));
    }
    let ratio = grid.levels / steps;
    let vol = grid.cell_volume();
    let centers = grid.working_box.lattice(&grid.points);
    let mut g = vec![0.0; grid.dim()];
    let mut levels = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let k = n * ratio;
        let (mut l1, mut se, mut mass) = (0.0, 0.0, 0.0);
        for (i, x) in centers.iter().enumerate() {
            let m = solution.mu[k][i];
            l1 += (flow.log_density(x, n)?.exp() - m).abs();
            let (u, _) = vp.eval(n, x, &mut g);
            se += m * (u - solution.u[k][i]).powi(2);
            mass += m;
        }
        levels.push(LevelError {
            step: n,
            time: solution.time(k),
            l1: l1 * vol,
            value_rmse: (se / mass).sqrt(),
        });
    }
    Ok(Comparison { levels })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(":")
}

impl OracleSolution {
    /// Field dump as CSV text.
    pub fn to_csv(&self) -> String {
        let grid = &self.grid;
        let d = grid.dim();
        let mut out = format!(
            "# dim={d} lo={} hi={} points={} levels={} horizon={}\n",
            join(&grid.working_box.lo),
            join(&grid.working_box.hi),
            grid.points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(":"),
            grid.levels,
            self.horizon
        );
        out.push_str("level,t");
        for k in 0..d {
            out.push_str(&format!(",x{k}"));
        }
        out.push_str(",u,mu\n");
        let centers = grid.working_box.lattice(&grid.points);
        for k in 0..=grid.levels {
            let t = self.time(k);
            for (i, x) in centers.iter().enumerate() {
                out.push_str(&format!("{k},{t}"));
                for v in x {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{},{}\n", self.u[k][i], self.mu[k][i]));
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Reads a field dump. Solver diagnostics are not stored and come back
    /// empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("field dump: {m}"));
        let mut lines = text.lines();
        let head = lines.next().and_then(|l| l.strip_prefix('#')).ok_or_else(|| bad("missing header"))?;
        let mut dim = None;
        let (mut lo, mut hi, mut points, mut levels, mut horizon) = (None, None, None, None, None);
        let floats = |v: &str| v.split(':').map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
        for kv in head.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed header"))?;
            match k {
                "dim" => dim = v.parse::<usize>().ok(),
                "lo" => lo = floats(v).ok(),
                "hi" => hi = floats(v).ok(),
                "points" => points = v.split(':').map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().ok(),
                "levels" => levels = v.parse::<usize>().ok(),
                "horizon" => horizon = v.parse::<f64>().ok(),
                _ => return Err(bad(&format!("unknown header key {k}"))),
            }
        }
        let (Some(dim), Some(lo), Some(hi), Some(points), Some(levels), Some(horizon)) =
            (dim, lo, hi, points, levels, horizon)
        else {
            return Err(bad("incomplete header"));
        };
        if lo.len() != dim || hi.len() != dim {
            return Err(bad("bounds do not match dim"));
        }
        let grid = GridSpec::unchecked(WorkingBox::new(lo, hi), points, levels)?;
        lines.next().ok_or_else(|| bad("missing column row"))?;
        let cells = grid.cells();
        let mut u = vec![vec![0.0; cells]; levels + 1];
        let mut mu = vec![vec![0.0; cells]; levels + 1];
        let mut count = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 4 {
                return Err(bad("wrong column count"));
            }
            let k: usize = f[0].parse().map_err(|_| bad("bad level"))?;
            let x: Vec<f64> = f[2..2 + dim]
                .iter()
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad coordinate"))?;
            if k > levels {
                return Err(bad("level out of range"));
            }
            let i = grid.locate(&x);
            u[k][i] = f[dim + 2].parse().map_err(|_| bad("bad u"))?;
            mu[k][i] = f[dim + 3].parse().map_err(|_| bad("bad mu"))?;
            count += 1;
        }
        if count != cells * (levels + 1) {
            return Err(bad(&format!("expected {} rows, found {count}", cells * (levels + 1))));
        }
        Ok(Self {
            grid,
            horizon,
            u,
            mu,
            residuals: Vec::new(),
            converged: true,
            mass_drift: 0.0,
            boundary_mass: 0.0,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Grid fields built from a flow and a value path, scaled to unit
    /// discrete mass per level.
    pub fn from_flow(grid: GridSpec, horizon: f64, flow: &DensityFlow, vp: &ValuePath) -> Result<Self> {
        let steps = flow.steps();
        if grid.levels != steps || vp.steps() != steps {
            return Err(Error::Incompatible("grid levels must equal flow steps".into()));
        }
        let vol = grid.cell_volume();
        let centers = grid.working_box.lattice(&grid.points);
        let mut g = vec![0.0; grid.dim()];
        let mut u = Vec::with_capacity(steps + 1);
        let mut mu = Vec::with_capacity(steps + 1);
        for n in 0..=steps {
            let mut m = Vec::with_capacity(centers.len());
            for x in &centers {
                m.push(flow.log_density(x, n)?.exp());
            }
            let mass = m.iter().sum::<f64>() * vol;
            m.iter_mut().for_each(|v| *v /= mass);
            mu.push(m);
            u.push(centers.iter().map(|x| vp.eval(n, x, &mut g).0).collect());
        }
        Ok(Self {
            grid,
            horizon,
            u,
            mu,
            residuals: Vec::new(),
            converged: true,
            mass_drift: 0.0,
            boundary_mass: 0.0,
        })
    }
}
