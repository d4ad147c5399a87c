//! Euler–Maruyama simulation of the forward-backward system
//!
//! ```text
//! X_{n+1} = X_n + α_n Δt + σ ΔW_n,
//! Y_{n+1} = Y_n + [H(p_n) − f(X_n, μ_n) + α_n·p_n] Δt + Z_n·ΔW_n,
//! ```
//!
//! with `p_n = ∇u_n(X_n)`, `Z_n = σ p_n`, `α_n` the clipped feedback and
//! `Y_0 = u_0(X_0)`. For the unclipped feedback the drift of `Y` reduces to
//! `−f − |α|²/(2c)`.

use rand_distr::{Distribution, StandardNormal};

use super::value::{feedback, ValueField, ValuePath};
use crate::error::{Error, Result};
use crate::exec::{compensated_sum, derive_seed, reduce_into, stream_rng, Exec};
use crate::flow::DensityFlow;
use crate::mfg::{MeasureView, MfgProblem};

/// Simulated paths, each array flattened in path-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    /// `M × (N+1) × d`
    pub x: Vec<f64>,
    /// `M × (N+1)`
    pub y: Vec<f64>,
    /// `M × N × d`, variance `T/N` per coordinate.
    pub dw: Vec<f64>,
    pub seed: u64,
}

impl PathBatch {
    pub fn state(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * (self.steps + 1) + n) * self.dim;
        &self.x[o..o + self.dim]
    }

    pub fn value(&self, i: usize, n: usize) -> f64 {
        self.y[i * (self.steps + 1) + n]
    }

    pub fn increment(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * self.steps + n) * self.dim;
        &self.dw[o..o + self.dim]
    }

    /// States at step `n`, flattened `M × d`.
    pub fn states_at(&self, n: usize) -> Vec<f64> {
        (0..self.paths).flat_map(|i| self.state(i, n).iter().copied()).collect()
    }
}

/// Population statistics of the flow marginals read by the running cost.
pub struct StepMeasures<'a> {
    pub means: Vec<Vec<f64>>,
    flow: Option<&'a DensityFlow>,
}

impl<'a> StepMeasures<'a> {
    /// Marginal means from `m` flow samples per step.
    pub fn from_flow(problem: &MfgProblem, flow: &'a DensityFlow, m: usize, seed: u64) -> Self {
        let base = flow.sample_base(m, seed);
        let traj = flow.trajectories(&base);
        let d = problem.dim;
        let means = (0..=flow.steps())
            .map(|n| crate::mfg::sample_mean(&traj[n * m * d..(n + 1) * m * d], d))
            .collect();
        Self {
            means,
            flow: problem.running.needs_density().then_some(flow),
        }
    }

    /// Means of explicit point sets, laid out `[(N+1)][M][d]`.
    pub fn from_points(problem: &MfgProblem, flow: &'a DensityFlow, points: &[f64], m: usize) -> Self {
        let d = problem.dim;
        let means = (0..=flow.steps())
            .map(|n| crate::mfg::sample_mean(&points[n * m * d..(n + 1) * m * d], d))
            .collect();
        Self {
            means,
            flow: problem.running.needs_density().then_some(flow),
        }
    }

    /// Running cost and its gradient at step `n`.
    pub fn running(&self, problem: &MfgProblem, n: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let density = self.flow.map(|flow| {
            move |y: &[f64], g: &mut [f64]| -> f64 {
                let l = flow.log_density_grad(y, n, g).expect("step in range");
                let e = l.exp();
                g.iter_mut().for_each(|v| *v *= e);
                e
            }
        });
        let view = MeasureView {
            mean: &self.means[n],
            density: density.as_ref().map(|f| f as &crate::mfg::DensityFn),
        };
        if let Some(g) = grad {
            problem.running.grad(x, &view, g);
        }
        problem.running.value(x, &view)
    }
}

pub(crate) fn check_dims(problem: &MfgProblem, flow: &DensityFlow, vp: &ValuePath) -> Result<()> {
    if flow.dim() != problem.dim || vp.dim() != problem.dim {
        return Err(Error::Incompatible("flow, value path and problem dimensions differ".into()));
    }
    if flow.steps() != problem.steps || vp.steps() != problem.steps {
        return Err(Error::Incompatible("flow, value path and problem step counts differ".into()));
    }
    Ok(())
}

/// Simulates `m` paths; the running cost reads the flow marginals.
pub fn simulate_paths(
    problem: &MfgProblem,
    flow: &DensityFlow,
    vp: &ValuePath,
    m: usize,
    seed: u64,
    alpha_max: f64,
) -> Result<PathBatch> {
    check_dims(problem, flow, vp)?;
    let measures = StepMeasures::from_flow(problem, flow, m.max(256), derive_seed(seed, 1));
    simulate_with(problem, &measures, vp, m, seed, alpha_max, flow.exec(), flow.param_norm())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_with(
    problem: &MfgProblem,
    measures: &StepMeasures<'_>,
    vp: &ValuePath,
    m: usize,
    seed: u64,
    alpha_max: f64,
    exec: Exec,
    phi_norm: f64,
) -> Result<PathBatch> {
    let d = problem.dim;
    let n_steps = problem.steps;
    let dt = problem.dt();
    let sq = dt.sqrt();
    let sigma = problem.sigma;
    let c = problem.hamiltonian.scale();
    let rows = exec.map(m, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let mut xs = Vec::with_capacity((n_steps + 1) * d);
        let mut ys = Vec::with_capacity(n_steps + 1);
        let mut dws = Vec::with_capacity(n_steps * d);
        let mut x: Vec<f64> = (0..d)
            .map(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                problem.initial.mean[k] + problem.initial.std * z
            })
            .collect();
        let mut y = vp.u0(&x);
        let mut p = vec![0.0; d];
        let mut alpha = vec![0.0; d];
        let mut bad = None;
        for n in 0..n_steps {
            xs.extend_from_slice(&x);
            ys.push(y);
            vp.eval(n, &x, &mut p);
            alpha.copy_from_slice(&p);
            feedback(&mut alpha, c, alpha_max);
            let f = measures.running(problem, n, &x, None);
            let h = problem.hamiltonian.value(&x, &p);
            let ap: f64 = alpha.iter().zip(&p).map(|(a, b)| a * b).sum();
            let mut zdw = 0.0;
            for k in 0..d {
                let w: f64 = StandardNormal.sample(&mut rng);
                let dw = sq * w;
                dws.push(dw);
                zdw += sigma * p[k] * dw;
                x[k] += alpha[k] * dt + sigma * dw;
            }
            y += (h - f + ap) * dt + zdw;
            if bad.is_none() && (!y.is_finite() || x.iter().any(|v| !v.is_finite())) {
                bad = Some(n + 1);
            }
        }
        xs.extend_from_slice(&x);
        ys.push(y);
        (xs, ys, dws, bad)
    });
    if let Some(step) = rows.iter().filter_map(|r| r.3).min() {
        return Err(Error::Diverged {
            step,
            theta_norm: vp.param_norm(),
            phi_norm,
        });
    }
    let mut batch = PathBatch {
        paths: m,
        steps: n_steps,
        dim: d,
        x: Vec::with_capacity(m * (n_steps + 1) * d),
        y: Vec::with_capacity(m * (n_steps + 1)),
        dw: Vec::with_capacity(m * n_steps * d),
        seed,
    };
    for (xs, ys, dws, _) in rows {
        batch.x.extend(xs);
        batch.y.extend(ys);
        batch.dw.extend(dws);
    }
    Ok(batch)
}

/// `(1/M) Σ_i |g(X_N^i, μ̂_T) − Y_N^i|²`.
pub fn loss_mkv(batch: &PathBatch, _flow: &DensityFlow, problem: &MfgProblem) -> f64 {
    mkv_residuals(batch, problem).iter().map(|r| r * r).sum::<f64>() / batch.paths.max(1) as f64
}

fn mkv_residuals(batch: &PathBatch, problem: &MfgProblem) -> Vec<f64> {
    (0..batch.paths)
        .map(|i| batch.value(i, batch.steps) - problem.terminal.value(batch.state(i, batch.steps)))
        .collect()
}

/// `l_MKV` on the batch and its gradient in the value parameters, with the
/// states and drifts of the batch held fixed.
pub(crate) fn mkv_grad(
    batch: &PathBatch,
    problem: &MfgProblem,
    vp: &ValuePath,
    alpha_max: f64,
    exec: Exec,
    grad: &mut [f64],
) -> f64 {
    let d = batch.dim;
    let dt = problem.dt();
    let c = problem.hamiltonian.scale();
    let sigma = problem.sigma;
    let res = mkv_residuals(batch, problem);
    let m = batch.paths as f64;
    let parts = exec.map_chunks(batch.paths, |r| {
        let mut gp = vec![0.0; vp.param_len()];
        let mut p = vec![0.0; d];
        let mut alpha = vec![0.0; d];
        let mut dir = vec![0.0; d];
        for i in r {
            let e = 2.0 * res[i] / m;
            let x0 = batch.state(i, 0);
            let r0 = vp.head_range(0);
            vp.head(0).value_vjp(x0, e, &mut gp[r0]);
            for n in 0..batch.steps {
                let x = batch.state(i, n);
                vp.eval(n, x, &mut p);
                alpha.copy_from_slice(&p);
                feedback(&mut alpha, c, alpha_max);
                let dw = batch.increment(i, n);
                for k in 0..d {
                    dir[k] = (c * p[k] + alpha[k]) * dt + sigma * dw[k];
                }
                let rn = vp.head_range(n);
                vp.head(n).grad_dot_vjp(x, &dir, e, &mut gp[rn]);
            }
        }
        gp
    });
    reduce_into(grad, &parts);
    compensated_sum(res.iter().map(|r| r * r)) / m
}
