//! Finite-volume fixed-point solver for small HJB–FPK systems.
//!
//! On a cell-centered lattice with `N_t` time levels the coupled pair
//!
//! ```text
//! -∂_t u - ν Δu + c/2 |∇u|² = f(x, μ_t),   u(T) = g
//!  ∂_t μ - ν Δμ + ∇·(μ α) = 0,            α = -c ∇u,  μ(0) = μ_0
//! ```
//!
//! is solved by alternating a backward HJB sweep and a forward FPK sweep,
//! `μ ← (1-ω) μ + ω FPK(HJB(μ))`.
//!
//! HJB steps are implicit in `u^k`, with the Hamiltonian linearized around
//! `∇u^{k+1}` and upwinded transport. FPK steps are implicit with
//! Scharfetter–Gummel fluxes
//!
//! ```text
//! J_{i+½} = ν/h [ B(-P) μ_i - B(P) μ_{i+1} ],   P = α_{i+½} h / ν,   B(z) = z / (e^z - 1),
//! ```
//!
//! and zero flux through the box faces, so every column of the system sums
//! to `1/Δt` and mass is conserved to round-off. In 2D both sweeps use Lie
//! splitting over the axes.

mod fields;

pub use fields::{compare_to_flow, Comparison, LevelError};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::{MeasureView, MfgProblem, WorkingBox};

pub const MAX_POINTS_1D: usize = 128;
pub const MAX_POINTS_2D: usize = 64;

/// Lattice and time levels of an oracle solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub working_box: WorkingBox,
    pub points: Vec<usize>,
    /// Number of time steps `N_t`; fields hold `N_t + 1` levels.
    pub levels: usize,
}

impl GridSpec {
    /// Builds a grid for `problem` and checks the transport CFL bound
    /// `Δt · v_max / Δx ≤ 1`, where `v_max` bounds the optimal speed `c |∇u|`.
    pub fn new(problem: &MfgProblem, working_box: WorkingBox, points: Vec<usize>, levels: usize) -> Result<Self> {
        problem.validate()?;
        let grid = Self::unchecked(working_box, points, levels)?;
        if grid.dim() != problem.dim {
            return Err(Error::Incompatible(format!(
                "grid dimension {} vs problem dimension {}",
                grid.dim(),
                problem.dim
            )));
        }
        let v = speed_bound(problem, &grid);
        let dt = problem.horizon / levels as f64;
        let h = (0..grid.dim()).map(|k| grid.spacing(k)).fold(f64::INFINITY, f64::min);
        let courant = dt * v / h;
        if !(courant <= 1.0) {
            return Err(Error::Stability(format!(
                "courant number {courant:.3} > 1 (dt {dt:.3e}, dx {h:.3e}, speed bound {v:.3}); raise the number of time levels"
            )));
        }
        Ok(grid)
    }

    /// Shape checks only.
    pub fn unchecked(working_box: WorkingBox, points: Vec<usize>, levels: usize) -> Result<Self> {
        let d = working_box.dim();
        if points.len() != d {
            return Err(Error::Incompatible(format!("{} point counts for a {d}-d box", points.len())));
        }
        let cap = match d {
            1 => MAX_POINTS_1D,
            2 => MAX_POINTS_2D,
            _ => return Err(Error::Incompatible(format!("grid oracle supports d ≤ 2, got {d}"))),
        };
        if points.iter().any(|&p| p < 3 || p > cap) {
            return Err(Error::Incompatible(format!("points per axis must lie in 3..={cap}, got {points:?}")));
        }
        if (0..d).any(|k| !(working_box.width(k) > 0.0)) {
            return Err(Error::Incompatible("degenerate box".into()));
        }
        if levels == 0 {
            return Err(Error::Incompatible("at least one time step required".into()));
        }
        Ok(Self {
            working_box,
            points,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn cells(&self) -> usize {
        self.points.iter().product()
    }

    pub fn spacing(&self, k: usize) -> f64 {
        self.working_box.width(k) / self.points[k] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.working_box.cell_volume(&self.points)
    }

    /// Cell centers, row-major with the last axis fastest, flattened.
    pub fn centers(&self) -> Vec<f64> {
        self.working_box.lattice(&self.points).concat()
    }

    fn stride(&self, k: usize) -> usize {
        self.points[k + 1..].iter().product()
    }

    /// Index of the cell containing `x`, clamped to the box.
    pub fn locate(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for k in 0..self.dim() {
            let i = ((x[k] - self.working_box.lo[k]) / self.spacing(k)).floor();
            let i = (i.max(0.0) as usize).min(self.points[k] - 1);
            idx += i * self.stride(k);
        }
        idx
    }

    /// Calls `f` with the flat indices of every lattice line along axis `k`.
    fn for_each_line(&self, k: usize, mut f: impl FnMut(&[usize])) {
        let n = self.points[k];
        let stride = self.stride(k);
        let lines = self.cells() / n;
        let mut idx = vec![0usize; n];
        for line in 0..lines {
            let base = (line / stride) * stride * n + line % stride;
            for (i, v) in idx.iter_mut().enumerate() {
                *v = base + i * stride;
            }
            f(&idx);
        }
    }
}

fn speed_bound(problem: &MfgProblem, grid: &GridSpec) -> f64 {
    let c = problem.hamiltonian.scale();
    let d = grid.dim();
    let diag = (0..d).map(|k| grid.working_box.width(k).powi(2)).sum::<f64>().sqrt();
    let centre = grid.working_box.center();
    let mut static_cost = problem.running.clone();
    static_cost.mean_attraction = 0.0;
    static_cost.congestion = 0.0;
    let view = MeasureView::from_mean(&centre);
    let mut g = vec![0.0; d];
    let (mut gmax, mut fmax) = (0.0f64, 0.0f64);
    for x in grid.working_box.lattice(&grid.points) {
        problem.terminal.grad(&x, &mut g);
        gmax = gmax.max(norm(&g));
        static_cost.grad(&x, &view, &mut g);
        fmax = fmax.max(norm(&g));
    }
    let fmax = fmax + problem.running.mean_attraction * diag;
    c * (gmax + problem.horizon * fmax)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Converged (or last) iterate of the fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub grid: GridSpec,
    pub horizon: f64,
    /// `u[k][cell]` for `k = 0..=N_t`.
    pub u: Vec<Vec<f64>>,
    /// `μ[k][cell]` for `k = 0..=N_t`, a density (mass = Σ μ · cell volume).
    pub mu: Vec<Vec<f64>>,
    /// Successive-μ L1 change per iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Largest per-step mass change of the final forward sweep.
    pub mass_drift: f64,
    /// Largest mass found in the outermost cell layer.
    pub boundary_mass: f64,
}

impl OracleSolution {
    pub fn time(&self, level: usize) -> f64 {
        self.horizon * level as f64 / self.grid.levels as f64
    }

    pub fn mass(&self, level: usize) -> f64 {
        self.mu[level].iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn mean(&self, level: usize) -> Vec<f64> {
        grid_mean(&self.grid, &self.mu[level])
    }

    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    /// Multilinear interpolation of `μ` at level `level` between cell
    /// centers; zero outside the box.
    pub fn density_at(&self, level: usize, x: &[f64]) -> f64 {
        let grid = &self.grid;
        if !grid.working_box.contains(x) {
            return 0.0;
        }
        let d = grid.dim();
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for k in 0..d {
            let s = (x[k] - grid.working_box.lo[k]) / grid.spacing(k) - 0.5;
            let i = s.floor().clamp(0.0, (grid.points[k] - 2) as f64);
            base[k] = i as usize;
            frac[k] = (s - i).clamp(0.0, 1.0);
        }
        let mut value = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..d {
                let up = (corner >> k) & 1;
                w *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
                idx += (base[k] + up) * grid.stride(k);
            }
            value += w * self.mu[level][idx];
        }
        value
    }
}

/// Fixed-point controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

/// Damped fixed-point iteration `μ ← (1-ω) μ + ω FPK(HJB(μ))` until the L1
/// change of μ (max over levels) drops below `tol`. Non-convergence is
/// reported through [`OracleSolution::converged`].
pub fn solve_fixed_point(problem: &MfgProblem, grid: &GridSpec, cfg: &OracleConfig) -> Result<OracleSolution> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::Incompatible(format!("damping must lie in (0, 1], got {}", cfg.damping)));
    }
    let grid = GridSpec::new(problem, grid.working_box.clone(), grid.points.clone(), grid.levels)?;
    let vol = grid.cell_volume();
    let mu0 = initial_density(problem, &grid);
    let mut mu = vec![mu0; grid.levels + 1];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut drift = 0.0;
    for _ in 0..cfg.max_iter {
        let u = hjb_sweep(problem, &grid, &mu);
        let (next, d) = fpk_sweep(problem, &grid, &u, &mu[0]);
        drift = d;
        let mut change = 0.0f64;
        for (m, n) in mu.iter_mut().zip(&next) {
            let mut l1 = 0.0;
            for (a, b) in m.iter_mut().zip(n) {
                l1 += (b - *a).abs();
                *a += cfg.damping * (b - *a);
            }
            change = change.max(l1 * vol);
        }
        if !change.is_finite() {
            return Err(Error::NonFinite("oracle density iterate".into()));
        }
        residuals.push(change);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let u = hjb_sweep(problem, &grid, &mu);
    let boundary_mass = mu.iter().map(|m| boundary_layer_mass(&grid, m)).fold(0.0, f64::max);
    Ok(OracleSolution {
        horizon: problem.horizon,
        grid,
        u,
        mu,
        residuals,
        converged,
        mass_drift: drift,
        boundary_mass,
    })
}

/// `μ_0` at the cell centers, scaled to unit discrete mass.
pub fn initial_density(problem: &MfgProblem, grid: &GridSpec) -> Vec<f64> {
    let mut mu: Vec<f64> = grid
        .working_box
        .lattice(&grid.points)
        .iter()
        .map(|x| problem.initial.log_pdf(x).exp())
        .collect();
    let mass = mu.iter().sum::<f64>() * grid.cell_volume();
    mu.iter_mut().for_each(|m| *m /= mass);
    mu
}

fn grid_mean(grid: &GridSpec, mu: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let mut mean = vec![0.0; d];
    let mut mass = 0.0;
    for (x, m) in grid.working_box.lattice(&grid.points).iter().zip(mu) {
        mass += m;
        for k in 0..d {
            mean[k] += m * x[k];
        }
    }
    mean.iter_mut().for_each(|v| *v /= mass);
    mean
}

fn boundary_layer_mass(grid: &GridSpec, mu: &[f64]) -> f64 {
    let d = grid.dim();
    let mut total = 0.0;
    for (i, m) in mu.iter().enumerate() {
        let on_edge = (0..d).any(|k| {
            let j = (i / grid.stride(k)) % grid.points[k];
            j == 0 || j + 1 == grid.points[k]
        });
        if on_edge {
            total += m;
        }
    }
    total * grid.cell_volume()
}

/// Running cost at every cell for the measure `mu`.
fn running_field(problem: &MfgProblem, grid: &GridSpec, centers: &[Vec<f64>], mu: &[f64]) -> Vec<f64> {
    let mean = grid_mean(grid, mu);
    let lookup = |x: &[f64], g: &mut [f64]| {
        g.iter_mut().for_each(|v| *v = 0.0);
        mu[grid.locate(x)]
    };
    let view = MeasureView {
        mean: &mean,
        density: Some(&lookup),
    };
    centers.iter().map(|x| problem.running.value(x, &view)).collect()
}

/// Backward HJB sweep for a frozen density path.
pub(crate) fn hjb_sweep(problem: &MfgProblem, grid: &GridSpec, mu: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let centers = grid.working_box.lattice(&grid.points);
    let dt = problem.horizon / grid.levels as f64;
    let nu = problem.viscosity();
    let c = problem.hamiltonian.scale();
    let cells = grid.cells();
    let d = grid.dim();
    let mut u = vec![Vec::new(); grid.levels + 1];
    u[grid.levels] = centers.iter().map(|x| problem.terminal.value(x)).collect();
    let mut sys = Tridiag::new(grid.points.iter().copied().max().unwrap_or(0));
    for k in (0..grid.levels).rev() {
        let next = &u[k + 1];
        let f = running_field(problem, grid, &centers, &mu[k]);
        let grad: Vec<Vec<f64>> = (0..d).map(|a| central_grad(grid, next, a)).collect();
        let mut w: Vec<f64> = (0..cells)
            .map(|i| {
                let p2: f64 = (0..d).map(|a| grad[a][i] * grad[a][i]).sum();
                next[i] + dt * (f[i] + 0.5 * c * p2)
            })
            .collect();
        for (a, ga) in grad.iter().enumerate() {
            let h = grid.spacing(a);
            let diff = nu * dt / (h * h);
            let mut line_rhs = Vec::new();
            grid.for_each_line(a, |idx| {
                let n = idx.len();
                sys.resize(n);
                line_rhs.clear();
                for (i, &j) in idx.iter().enumerate() {
                    let b = c * ga[j] * dt / h;
                    let lo = if i > 0 { diff + b.max(0.0) } else { 0.0 };
                    let up = if i + 1 < n { diff + (-b).max(0.0) } else { 0.0 };
                    sys.lower[i] = -lo;
                    sys.upper[i] = -up;
                    sys.diag[i] = 1.0 + lo + up;
                    line_rhs.push(w[j]);
                }
                sys.solve(&mut line_rhs);
                for (i, &j) in idx.iter().enumerate() {
                    w[j] = line_rhs[i];
                }
            });
        }
        u[k] = w;
    }
    u
}

/// Central differences with reflected ghost cells.
fn central_grad(grid: &GridSpec, u: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.spacing(axis);
    let mut g = vec![0.0; u.len()];
    grid.for_each_line(axis, |idx| {
        let n = idx.len();
        for i in 0..n {
            let l = u[idx[i.saturating_sub(1)]];
            let r = u[idx[(i + 1).min(n - 1)]];
            g[idx[i]] = (r - l) / (2.0 * h);
        }
    });
    g
}

fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Forward FPK sweep for the feedback `α = -c ∇u`; returns the density path
/// and the largest per-step mass change.
pub(crate) fn fpk_sweep(problem: &MfgProblem, grid: &GridSpec, u: &[Vec<f64>], mu0: &[f64]) -> (Vec<Vec<f64>>, f64) {
    let dt = problem.horizon / grid.levels as f64;
    let nu = problem.viscosity();
    let c = problem.hamiltonian.scale();
    let vol = grid.cell_volume();
    let mut out = Vec::with_capacity(grid.levels + 1);
    out.push(mu0.to_vec());
    let mut drift = 0.0f64;
    let mut sys = Tridiag::new(grid.points.iter().copied().max().unwrap_or(0));
    let mut line_rhs = Vec::new();
    for k in 0..grid.levels {
        let mut m = out[k].clone();
        let before = m.iter().sum::<f64>() * vol;
        for a in 0..grid.dim() {
            let h = grid.spacing(a);
            let diff = nu * dt / (h * h);
            grid.for_each_line(a, |idx| {
                let n = idx.len();
                sys.resize(n);
                line_rhs.clear();
                for (i, &j) in idx.iter().enumerate() {
                    // Péclet numbers of the faces i-½ and i+½
                    let pl = (i > 0).then(|| -c * (u[k][j] - u[k][idx[i - 1]]) / nu);
                    let pr = (i + 1 < n).then(|| -c * (u[k][idx[i + 1]] - u[k][j]) / nu);
                    let mut dg = 1.0;
                    sys.lower[i] = 0.0;
                    sys.upper[i] = 0.0;
                    if let Some(p) = pl {
                        dg += diff * bernoulli(p);
                        sys.lower[i] = -diff * bernoulli(-p);
                    }
                    if let Some(p) = pr {
                        dg += diff * bernoulli(-p);
                        sys.upper[i] = -diff * bernoulli(p);
                    }
                    sys.diag[i] = dg;
                    line_rhs.push(m[j]);
                }
                sys.solve(&mut line_rhs);
                for (i, &j) in idx.iter().enumerate() {
                    m[j] = line_rhs[i].max(0.0);
                }
            });
        }
        let after = m.iter().sum::<f64>() * vol;
        drift = drift.max((after - before).abs());
        out.push(m);
    }
    (out, drift)
}

/// Tridiagonal system solved by the Thomas algorithm.
struct Tridiag {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    work: Vec<f64>,
}

impl Tridiag {
    fn new(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            work: vec![0.0; n],
        }
    }

    fn resize(&mut self, n: usize) {
        for v in [&mut self.lower, &mut self.diag, &mut self.upper, &mut self.work] {
            v.resize(n, 0.0);
        }
    }

    fn solve(&mut self, rhs: &mut [f64]) {
        let n = rhs.len();
        let mut denom = self.diag[0];
        rhs[0] /= denom;
        for i in 1..n {
            self.work[i] = self.upper[i - 1] / denom;
            denom = self.diag[i] - self.lower[i] * self.work[i];
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.work[i + 1] * rhs[i + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::{Gaussian, Hamiltonian, RunningCost, TerminalCost};

    pub(crate) fn diffusion_problem(sigma: f64, init: f64, std: f64, horizon: f64) -> MfgProblem {
        MfgProblem {
            dim: 1,
            horizon,
            steps: 10,
            sigma,
            hamiltonian: Hamiltonian::Quadratic { scale: 0.0 },
            running: RunningCost::default(),
            terminal: TerminalCost::Quadratic { target: vec![0.0] },
            initial: Gaussian {
                mean: vec![init],
                std,
            },
            working_box: WorkingBox::new(vec![-4.0], vec![4.0]),
        }
    }

    pub(crate) fn lq_problem() -> MfgProblem {
        MfgProblem {
            dim: 1,
            horizon: 1.0,
            steps: 20,
            sigma: 0.5,
            hamiltonian: Hamiltonian::Quadratic { scale: 1.0 },
            running: RunningCost {
                mean_attraction: 1.0,
                ..RunningCost::default()
            },
            terminal: TerminalCost::Quadratic { target: vec![1.0] },
            initial: Gaussian {
                mean: vec![-1.0],
                std: 0.5,
            },
            working_box: WorkingBox::new(vec![-4.0], vec![4.0]),
        }
    }

    fn heat_l1(points: usize, levels: usize) -> f64 {
        let p = diffusion_problem(0.5, 0.3, 0.4, 1.0);
        let grid = GridSpec::new(&p, p.working_box.clone(), vec![points], levels).unwrap();
        let sol = solve_fixed_point(&p, &grid, &OracleConfig::default()).unwrap();
        let var = 0.4f64.powi(2) + 0.25;
        let exact = Gaussian {
            mean: vec![0.3],
            std: var.sqrt(),
        };
        let h = grid.spacing(0);
        grid.working_box
            .lattice(&grid.points)
            .iter()
            .zip(&sol.mu[levels])
            .map(|(x, m)| (m - exact.log_pdf(x).exp()).abs() * h)
            .sum()
    }

    #[test]
    fn tridiagonal_solve_matches_dense_product() {
        let mut t = Tridiag::new(4);
        t.lower.copy_from_slice(&[0.0, -1.0, 0.5, -0.3]);
        t.diag.copy_from_slice(&[4.0, 3.0, 5.0, 2.0]);
        t.upper.copy_from_slice(&[1.0, -0.7, 0.2, 0.0]);
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut b: Vec<f64> = (0..4)
            .map(|i| {
                let mut v = t.diag[i] * x[i];
                if i > 0 {
                    v += t.lower[i] * x[i - 1];
                }
                if i < 3 {
                    v += t.upper[i] * x[i + 1];
                }
                v
            })
            .collect();
        t.solve(&mut b);
        for (a, e) in b.iter().zip(x) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn bernoulli_is_continuous_at_zero() {
        assert!((bernoulli(1e-9) - bernoulli(-1e-9)).abs() < 1e-8);
        assert!((bernoulli(2.0) - 2.0 / (2f64.exp() - 1.0)).abs() < 1e-15);
        assert!((bernoulli(-3.0) - bernoulli(3.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pure_diffusion_matches_the_heat_kernel() {
        let e = heat_l1(128, 400);
        assert!(e <= 1e-2, "L1 {e}");
    }

    #[test]
    fn halving_the_cell_size_reduces_the_heat_error() {
        let coarse = heat_l1(32, 800);
        let fine = heat_l1(64, 800);
        assert!(coarse / fine >= 1.5, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn zero_hamiltonian_leaves_the_backward_heat_solution() {
        let p = diffusion_problem(0.5, 0.0, 0.4, 1.0);
        let grid = GridSpec::new(&p, p.working_box.clone(), vec![128], 200).unwrap();
        let sol = solve_fixed_point(&p, &grid, &OracleConfig::default()).unwrap();
        // g = x², so u(0, x) = x² + σ² T away from the reflecting faces
        for (x, u) in grid.working_box.lattice(&grid.points).iter().zip(&sol.u[0]) {
            if x[0].abs() < 1.0 {
                assert!((u - x[0] * x[0] - 0.25).abs() < 1e-2, "x {} u {u}", x[0]);
            }
        }
    }

    #[test]
    fn mass_is_conserved_every_step() {
        let p = lq_problem();
        let grid = GridSpec::new(&p, p.working_box.clone(), vec![128], 400).unwrap();
        let sol = solve_fixed_point(&p, &grid, &OracleConfig::default()).unwrap();
        assert!(sol.mass_drift <= 1e-12, "drift {}", sol.mass_drift);
        for k in 0..=grid.levels {
            assert!((sol.mass(k) - 1.0).abs() <= 1e-6);
            assert!(sol.mu[k].iter().all(|m| *m >= 0.0));
        }
        assert!(sol.boundary_mass < 1e-8, "edge mass {}", sol.boundary_mass);
    }

    #[test]
    fn undamped_lq_iteration_converges_monotonically() {
        let p = lq_problem();
        let grid = GridSpec::new(&p, p.working_box.clone(), vec![128], 400).unwrap();
        let cfg = OracleConfig {
            damping: 1.0,
            ..OracleConfig::default()
        };
        let sol = solve_fixed_point(&p, &grid, &cfg).unwrap();
        assert!(sol.converged, "trace {:?}", sol.residuals);
        let r = &sol.residuals;
        for w in r[2..].windows(2) {
            assert!(w[1] <= w[0], "trace {r:?}");
        }
        let end = sol.mean(grid.levels)[0];
        assert!(end > -1.0 && end < 1.0, "terminal mean {end}");
    }

    #[test]
    fn mirror_symmetric_setup_gives_a_symmetric_density() {
        let mut p = lq_problem();
        p.dim = 2;
        p.sigma = 1.0;
        p.running.mean_attraction = 0.0;
        p.initial.mean = vec![-1.5, 0.0];
        p.terminal = TerminalCost::Quadratic { target: vec![1.5, 0.0] };
        p.working_box = WorkingBox::new(vec![-5.0, -4.0], vec![5.0, 4.0]);
        let grid = GridSpec::new(&p, p.working_box.clone(), vec![32, 32], 150).unwrap();
        let cfg = OracleConfig {
            max_iter: 5,
            ..OracleConfig::default()
        };
        let sol = solve_fixed_point(&p, &grid, &cfg).unwrap();
        for level in &sol.mu {
            for i in 0..32 {
                for j in 0..16 {
                    let a = level[i * 32 + j];
                    let b = level[i * 32 + 31 - j];
                    assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn coarse_time_stepping_fails_the_stability_check() {
        let p = lq_problem();
        let err = GridSpec::new(&p, p.working_box.clone(), vec![128], 20).unwrap_err();
        assert!(matches!(err, Error::Stability(_)));
    }

    #[test]
    fn grid_shape_limits_are_enforced() {
        let b = WorkingBox::new(vec![-1.0], vec![1.0]);
        assert!(GridSpec::unchecked(b.clone(), vec![129], 10).is_err());
        assert!(GridSpec::unchecked(b, vec![128], 10).is_ok());
        let b2 = WorkingBox::new(vec![-1.0; 2], vec![1.0; 2]);
        assert!(GridSpec::unchecked(b2.clone(), vec![65, 64], 10).is_err());
        assert!(GridSpec::unchecked(b2, vec![64, 64], 10).is_ok());
        let b3 = WorkingBox::new(vec![-1.0; 3], vec![1.0; 3]);
        assert!(GridSpec::unchecked(b3, vec![8; 3], 10).is_err());
    }

    #[test]
    fn interpolation_reproduces_cell_values_and_linear_fields() {
        let grid = GridSpec::unchecked(WorkingBox::new(vec![0.0, 0.0], vec![4.0, 2.0]), vec![4, 4], 1).unwrap();
        let centers = grid.working_box.lattice(&grid.points);
        let field: Vec<f64> = centers.iter().map(|x| 1.0 + 2.0 * x[0] - x[1]).collect();
        let sol = OracleSolution {
            grid,
            horizon: 1.0,
            u: vec![field.clone(); 2],
            mu: vec![field.clone(); 2],
            residuals: vec![],
            converged: true,
            mass_drift: 0.0,
            boundary_mass: 0.0,
        };
        for (x, v) in centers.iter().zip(&field) {
            assert!((sol.density_at(1, x) - v).abs() < 1e-12);
        }
        let x = [1.3, 0.9];
        assert!((sol.density_at(0, &x) - (1.0 + 2.6 - 0.9)).abs() < 1e-12);
        assert_eq!(sol.density_at(0, &[5.0, 1.0]), 0.0);
    }

    #[test]
    fn lines_cover_every_cell_once() {
        let g = GridSpec::unchecked(WorkingBox::new(vec![0.0; 2], vec![1.0; 2]), vec![3, 5], 1).unwrap();
        for axis in 0..2 {
            let mut seen = vec![0; 15];
            g.for_each_line(axis, |idx| {
                assert_eq!(idx.len(), g.points[axis]);
                idx.iter().for_each(|&i| seen[i] += 1);
            });
            assert!(seen.iter().all(|&s| s == 1));
        }
        assert_eq!(g.locate(&[0.99, 0.01]), 2 * 5);
    }
}
