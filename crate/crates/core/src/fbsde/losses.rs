//! Flow-side losses.
//!
//! ```text
//! l_HJB = 1/(NM) Σ_{n=1}^{N} Σ_i | ∂_t u + ν Δu − H(∇u) + f |²(x_i^n, t_n),   x_i^n ~ μ_{t_n},
//! l_T   = 1/M Σ_i g(x_i^N),                                                     x_i^N ~ μ̂_T,
//! ```
//!
//! with `∂_t u(t_n) ≈ (u_n − u_{n−1})/Δt`. The samples `x_i^n` are one base
//! batch pushed through the flow, so both losses are differentiable in the
//! flow parameters via the trajectory VJP.

use super::paths::StepMeasures;
use super::value::ValueField;
use crate::error::{Error, Result};
use crate::exec::{compensated_sum, derive_seed};
use crate::flow::DensityFlow;
use crate::mfg::MfgProblem;

/// `l_HJB` on `m` flow samples per step.
pub fn loss_hjb<V: ValueField>(v: &V, flow: &DensityFlow, problem: &MfgProblem, m: usize, seed: u64) -> Result<f64> {
    check(v, flow, problem)?;
    let base = flow.sample_base(m, derive_seed(seed, 2));
    let traj = flow.trajectories(&base);
    Ok(hjb_terms(v, flow, problem, &traj, m, None))
}

/// `l_T` on `m` terminal samples.
pub fn loss_terminal(flow: &DensityFlow, problem: &MfgProblem, m: usize, seed: u64) -> Result<f64> {
    if flow.steps() != problem.steps || flow.dim() != problem.dim {
        return Err(Error::Incompatible("flow and problem differ in shape".into()));
    }
    let xs = flow.push_samples(flow.steps(), m, derive_seed(seed, 3))?;
    Ok(terminal_terms(problem, &xs, m, None))
}

fn check<V: ValueField>(v: &V, flow: &DensityFlow, problem: &MfgProblem) -> Result<()> {
    if v.dim() != problem.dim || flow.dim() != problem.dim || v.steps() != problem.steps || flow.steps() != problem.steps {
        return Err(Error::Incompatible("value field, flow and problem differ in shape".into()));
    }
    Ok(())
}

/// `l_HJB` on trajectories laid out `[(N+1)][M][d]`; if `cot` is given,
/// adds `weight ∂l_HJB/∂x` into it (same layout).
pub(crate) fn hjb_terms<V: ValueField>(
    v: &V,
    flow: &DensityFlow,
    problem: &MfgProblem,
    traj: &[f64],
    m: usize,
    cot: Option<(&mut [f64], f64)>,
) -> f64 {
    let d = problem.dim;
    let n_steps = problem.steps;
    let dt = problem.dt();
    let nu = problem.viscosity();
    let c = problem.hamiltonian.scale();
    let measures = StepMeasures::from_points(problem, flow, traj, m);
    let want = cot.is_some();
    let norm = 1.0 / (n_steps * m) as f64;
    let rows = flow.exec().map(n_steps * m, |idx| {
        let n = 1 + idx / m;
        let i = idx % m;
        let x = &traj[(n * m + i) * d..(n * m + i + 1) * d];
        let mut g_now = vec![0.0; d];
        let mut g_prev = vec![0.0; d];
        let mut f_grad = vec![0.0; d];
        let (u_now, lap) = v.eval(n, x, &mut g_now);
        let (u_prev, _) = v.eval(n - 1, x, &mut g_prev);
        let f = measures.running(problem, n, x, want.then_some(&mut f_grad[..]));
        let h = problem.hamiltonian.value(x, &g_now);
        let r = (u_now - u_prev) / dt + nu * lap - h + f;
        if !want {
            return (r * r, Vec::new());
        }
        let mut gl = vec![0.0; d];
        let mut hv = vec![0.0; d];
        v.grad_laplacian(n, x, &mut gl);
        let hp: Vec<f64> = g_now.iter().map(|p| c * p).collect();
        v.hess_vec(n, x, &hp, &mut hv);
        let grad_r: Vec<f64> = (0..d)
            .map(|k| (g_now[k] - g_prev[k]) / dt + nu * gl[k] - hv[k] + f_grad[k])
            .map(|gk| 2.0 * r * norm * gk)
            .collect();
        (r * r, grad_r)
    });
    let loss = compensated_sum(rows.iter().map(|r| r.0)) * norm;
    if let Some((cot, weight)) = cot {
        for (idx, (_, g)) in rows.iter().enumerate() {
            let o = (m + idx) * d;
            for k in 0..d {
                cot[o + k] += weight * g[k];
            }
        }
    }
    loss
}

/// `l_T` on terminal points (flattened `M × d`); if `cot` is given, adds
/// `weight ∂l_T/∂x` into it.
pub(crate) fn terminal_terms(problem: &MfgProblem, xs: &[f64], m: usize, cot: Option<(&mut [f64], f64)>) -> f64 {
    let d = problem.dim;
    let loss = compensated_sum((0..m).map(|i| problem.terminal.value(&xs[i * d..(i + 1) * d]))) / m as f64;
    if let Some((cot, weight)) = cot {
        let mut g = vec![0.0; d];
        for i in 0..m {
            problem.terminal.grad(&xs[i * d..(i + 1) * d], &mut g);
            for k in 0..d {
                cot[i * d + k] += weight * g[k] / m as f64;
            }
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, FlowScale, TransitionMap};
    use crate::mfg::{
        build_crowd_motion_with, BoundaryCode, CodeLayout, CrowdSettings, Gaussian, Hamiltonian, Scenario,
    };

    fn problem(d: usize, steps: usize, sigma: f64, f_in: f64) -> MfgProblem {
        let s = Scenario {
            init_mean: vec![0.0; d],
            init_std: 0.5,
            target: vec![1.0; d],
            obstacles: vec![],
            sigma,
        };
        let code = BoundaryCode::encode(&s, CodeLayout::circles(d, 0)).unwrap();
        let settings = CrowdSettings {
            f_in,
            ..CrowdSettings::default()
        };
        build_crowd_motion_with(&code, steps, 1.0, &settings).unwrap()
    }

    /// Closed-form field given by a function of `(t, x)` with hand-coded
    /// derivatives.
    struct Analytic<F> {
        dim: usize,
        steps: usize,
        dt: f64,
        f: F,
    }

    impl<F> ValueField for Analytic<F>
    where
        F: Fn(f64, &[f64], &mut [f64]) -> (f64, f64) + Sync,
    {
        fn dim(&self) -> usize {
            self.dim
        }
        fn steps(&self) -> usize {
            self.steps
        }
        fn eval(&self, n: usize, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
            (self.f)(n as f64 * self.dt, x, grad)
        }
        fn grad_laplacian(&self, _: usize, _: &[f64], out: &mut [f64]) {
            out.iter_mut().for_each(|o| *o = 0.0);
        }
        fn hess_vec(&self, _: usize, _: &[f64], _: &[f64], out: &mut [f64]) {
            out.iter_mut().for_each(|o| *o = 0.0);
        }
    }

    #[test]
    fn zero_field_and_zero_cost_give_zero() {
        let p = problem(2, 10, 0.5, 0.0);
        let flow = DensityFlow::for_problem(&p, FlowConfig::default(), 0);
        let zero = Analytic {
            dim: 2,
            steps: 10,
            dt: 0.1,
            f: |_: f64, _: &[f64], g: &mut [f64]| {
                g.iter_mut().for_each(|v| *v = 0.0);
                (0.0, 0.0)
            },
        };
        assert!(loss_hjb(&zero, &flow, &p, 64, 1).unwrap().abs() <= 1e-10);
        let p2 = problem(2, 10, 0.5, 1.7);
        let l = loss_hjb(&zero, &flow, &p2, 64, 1).unwrap();
        assert!((l - 1.7 * 1.7).abs() <= 1e-10);
    }

    /// Backward heat kernel `u = s^{-1/2} exp(−x²/(4νs))`, `s = 2 − t`, solves
    /// `∂_t u + ν u_xx = 0`; with `H ≡ 0`, `f ≡ 0` the residual is the
    /// backward-difference truncation error only.
    #[test]
    fn heat_kernel_has_small_residual() {
        let steps = 1000;
        let mut p = problem(1, steps, 0.5, 0.0);
        p.hamiltonian = Hamiltonian::Quadratic { scale: 0.0 };
        let nu = p.viscosity();
        let flow = DensityFlow::for_problem(&p, FlowConfig::default(), 0);
        let field = Analytic {
            dim: 1,
            steps,
            dt: p.dt(),
            f: move |t: f64, x: &[f64], g: &mut [f64]| {
                let s = 2.0 - t;
                let u = s.powf(-0.5) * (-x[0] * x[0] / (4.0 * nu * s)).exp();
                let ux = -x[0] / (2.0 * nu * s) * u;
                let uxx = (x[0] * x[0] / (4.0 * nu * nu * s * s) - 1.0 / (2.0 * nu * s)) * u;
                g[0] = ux;
                (u, uxx)
            },
        };
        let l = loss_hjb(&field, &flow, &p, 64, 2).unwrap();
        assert!(l.sqrt() <= 1e-3, "rms residual {}", l.sqrt());
    }

    #[test]
    fn terminal_loss_of_a_gaussian_is_twice_the_variance() {
        let p = problem(2, 4, 0.5, 0.0);
        let s = 0.3;
        let scale = FlowScale {
            center: vec![0.0, 0.0],
            length: 1.0,
            clamp: 2.0,
        };
        let id = TransitionMap::affine(&[0.0, 0.0], &[0.0, 0.0], scale.clone());
        let mut maps = vec![id.clone(); 3];
        maps.push(TransitionMap::affine(&[0.0, 0.0], &[1.0, 1.0], scale));
        let flow = DensityFlow::from_maps(
            Gaussian {
                mean: vec![0.0, 0.0],
                std: s,
            },
            maps,
            FlowConfig::default(),
        );
        let m = 40_000;
        let l = loss_terminal(&flow, &p, m, 5).unwrap();
        let se = 2.0 * s * s / (m as f64).sqrt();
        assert!((l - 2.0 * s * s).abs() < 4.0 * se, "{l} vs {}", 2.0 * s * s);

        let point = DensityFlow::from_maps(
            Gaussian {
                mean: vec![1.0, 1.0],
                std: 1e-12,
            },
            vec![id; 4],
            FlowConfig::default(),
        );
        assert!(loss_terminal(&point, &p, 100, 0).unwrap() < 1e-20);
    }

    #[test]
    fn terminal_loss_standard_error_halves_with_quadruple_samples() {
        let p = problem(2, 4, 0.5, 0.0);
        let flow = DensityFlow::for_problem(&p, FlowConfig::default(), 0);
        let reps = 300;
        let spread = |m: usize, offset: u64| {
            let v: Vec<f64> = (0..reps).map(|s| loss_terminal(&flow, &p, m, offset + s).unwrap()).collect();
            let mean = v.iter().sum::<f64>() / reps as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        };
        let ratio = spread(100, 0) / spread(400, 10_000);
        assert!((1.6..2.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn flow_gradients_of_both_losses_match_finite_differences() {
        let mut p = problem(2, 3, 0.7, 0.2);
        p.running.mean_attraction = 0.0;
        p.running.obstacles = vec![crate::mfg::Obstacle::circle(&[0.5, 0.5], 1.0)];
        let mut flow = DensityFlow::for_problem(
            &p,
            FlowConfig {
                width: 4,
                ..FlowConfig::default()
            },
            1,
        );
        let mut rng = crate::exec::stream_rng(2, 2);
        let q: Vec<f64> = flow.params().iter().map(|v| v + 0.1 * rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        flow.set_params(&q).unwrap();
        let mut vp = super::super::value::ValuePath::new(&p, 3, 0);
        for v in vp.params_mut() {
            *v += 0.1 * rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        let m = 7;
        let base = flow.sample_base(m, 3);
        let total = |fl: &DensityFlow| {
            let traj = fl.trajectories(&base);
            let xs = &traj[3 * m * 2..];
            hjb_terms(&vp, fl, &p, &traj, m, None) + 0.5 * terminal_terms(&p, xs, m, None)
        };
        let traj = flow.trajectories(&base);
        let mut cot = vec![0.0; traj.len()];
        hjb_terms(&vp, &flow, &p, &traj, m, Some((&mut cot, 1.0)));
        terminal_terms(&p, &traj[3 * m * 2..], m, Some((&mut cot[3 * m * 2..], 0.5)));
        let mut grad = vec![0.0; flow.param_len()];
        flow.trajectory_vjp(&base, &cot, &mut grad);
        let h = 1e-6;
        let params = flow.params();
        for k in (0..params.len()).step_by(4) {
            let mut fp = flow.clone();
            let mut fm = flow.clone();
            let mut pp = params.clone();
            pp[k] += h;
            fp.set_params(&pp).unwrap();
            pp[k] -= 2.0 * h;
            fm.set_params(&pp).unwrap();
            let fd = (total(&fp) - total(&fm)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-4 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }
}
