//! Alternating training of value heads (θ) and flow maps (φ).
//!
//! Each round takes `K_θ` optimizer steps on `l_MKV` with freshly simulated
//! paths, refits the head constants to the simulated values, then takes
//! `K_φ` steps on
//!
//! ```text
//! l_NF = w_hjb l_HJB + w_T l_T + w_fit l_fit + w_warm(r) l_warm,
//! l_fit = −1/|S| Σ_{n∈S} 1/M Σ_i log μ_{t_n}(X_n^i),
//! ```
//!
//! where `X_n^i` are the simulated states, so the flow marginals track the
//! law of the controlled state. `l_warm` is the same likelihood on points
//! drawn from supplied reference densities, with a weight decaying linearly
//! to zero over the burn-in.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{hjb_terms, terminal_terms};
use super::paths::{mkv_grad, simulate_with, PathBatch, StepMeasures};
use super::value::{ValueField, ValuePath};
use crate::error::{Error, Result};
use crate::exec::{compensated_mean, derive_seed, stream_rng, Exec};
use crate::flow::{DensityFlow, FlowConfig};
use crate::mfg::{MfgProblem, WorkingBox};
use crate::nn::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedConfig {
    pub seed: u64,
    /// Simulated paths per θ-step (and for evaluation).
    pub paths: usize,
    /// Flow samples per step for `l_HJB` and `l_T`.
    pub hjb_samples: usize,
    /// Simulated states per step entering `l_fit`.
    pub fit_samples: usize,
    /// Steps entering `l_fit` per φ-step; 0 uses all.
    pub fit_steps: usize,
    /// Flow samples used for marginal statistics in the running cost.
    pub measure_samples: usize,
    pub theta_steps: usize,
    pub phi_steps: usize,
    pub lr_theta: f64,
    pub lr_phi: f64,
    /// Rounds after which both step sizes have halved (`lr / (1 + r/h)`).
    pub lr_half_life: f64,
    pub w_hjb: f64,
    pub w_terminal: f64,
    pub w_fit: f64,
    pub tol: f64,
    pub patience: usize,
    pub max_rounds: usize,
    pub alpha_max: f64,
    /// Hidden units per value head.
    pub hidden: usize,
    pub flow: FlowConfig,
    pub warm_weight: f64,
    /// Fraction of `max_rounds` over which the warm-start weight decays.
    pub burn_in: f64,
    pub exec: Exec,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: 1024,
            hjb_samples: 256,
            fit_samples: 256,
            fit_steps: 8,
            measure_samples: 256,
            theta_steps: 5,
            phi_steps: 5,
            lr_theta: 1e-2,
            lr_phi: 1e-2,
            lr_half_life: 100.0,
            w_hjb: 1e-2,
            w_terminal: 1e-2,
            w_fit: 1.0,
            tol: 1e-4,
            patience: 20,
            max_rounds: 2000,
            alpha_max: 100.0,
            hidden: 16,
            flow: FlowConfig::default(),
            warm_weight: 1.0,
            burn_in: 0.05,
            exec: Exec::default(),
        }
    }
}

/// Reference densities on a cell-centered lattice, one field per step
/// `n = 1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub working_box: WorkingBox,
    pub points_per_axis: Vec<usize>,
    /// Flattened lattice, `K × d`.
    pub points: Vec<f64>,
    /// `densities[n-1][j]` at lattice point `j`.
    pub densities: Vec<Vec<f64>>,
    /// Multiplier in `[0, 1]` on the configured warm-start weight.
    pub strength: f64,
    cdf: Vec<Vec<f64>>,
}

impl WarmStart {
    pub fn new(working_box: WorkingBox, points_per_axis: Vec<usize>, densities: Vec<Vec<f64>>, strength: f64) -> Result<Self> {
        let points: Vec<f64> = working_box.lattice(&points_per_axis).concat();
        let k: usize = points_per_axis.iter().product();
        let mut cdf = Vec::with_capacity(densities.len());
        for (n, field) in densities.iter().enumerate() {
            if field.len() != k {
                return Err(Error::Incompatible(format!("warm-start field {} has {} values, lattice has {k}", n + 1, field.len())));
            }
            let mut acc = 0.0;
            let mut c = Vec::with_capacity(k);
            for &v in field {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::NonFinite(format!("warm-start density at step {}", n + 1)));
                }
                acc += v;
                c.push(acc);
            }
            cdf.push(c);
        }
        Ok(Self {
            working_box,
            points_per_axis,
            points,
            densities,
            strength,
            cdf,
        })
    }

    /// Lattice of `working_box` with `per_axis` points per axis, filled by
    /// `density(n, x)` for `n = 1..=steps`.
    pub fn from_fn(
        working_box: &WorkingBox,
        per_axis: usize,
        steps: usize,
        strength: f64,
        density: impl Fn(usize, &[f64]) -> f64,
    ) -> Result<Self> {
        let pts = vec![per_axis; working_box.dim()];
        let lattice = working_box.lattice(&pts);
        let densities = (1..=steps).map(|n| lattice.iter().map(|x| density(n, x)).collect()).collect();
        Self::new(working_box.clone(), pts, densities, strength)
    }

    pub fn steps(&self) -> usize {
        self.densities.len()
    }

    /// `m` points drawn from the reference density of step `n`, jittered
    /// uniformly within their cells.
    fn draw(&self, n: usize, m: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
        let cdf = &self.cdf[n - 1];
        let total = *cdf.last()?;
        if !(total > 0.0) {
            return None;
        }
        let d = self.working_box.dim();
        let mut out = Vec::with_capacity(m * d);
        for _ in 0..m {
            let u = rng.random::<f64>() * total;
            let j = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            for k in 0..d {
                let h = self.working_box.width(k) / self.points_per_axis[k] as f64;
                out.push(self.points[j * d + k] + h * (rng.random::<f64>() - 0.5));
            }
        }
        Some(out)
    }
}

/// One evaluated training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub l_mkv: f64,
    pub l_hjb: f64,
    pub l_t: f64,
    /// Negative log-likelihood of the evaluation paths under the flow.
    pub l_fit: f64,
    /// `w_hjb l_HJB + w_T l_T + w_fit l_fit`.
    pub l_nf: f64,
    pub seconds: f64,
}

impl RoundRecord {
    /// Quantity monitored for convergence.
    pub fn total(&self) -> f64 {
        self.l_mkv + self.l_nf
    }

    pub const CSV_HEADER: &'static str = "round,l_mkv,l_hjb,l_t,seconds";

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.round.to_string(),
            format!("{:.12e}", self.l_mkv),
            format!("{:.12e}", self.l_hjb),
            format!("{:.12e}", self.l_t),
            format!("{:.3}", self.seconds),
        ]
    }
}

/// Result of a fixed-coefficient solve: the best checkpoint and the trace.
#[derive(Debug, Clone)]
pub struct FixedSolution {
    pub flow: DensityFlow,
    pub value: ValuePath,
    pub trace: Vec<RoundRecord>,
    pub converged: bool,
    pub best_round: usize,
}

impl FixedSolution {
    pub fn rounds(&self) -> usize {
        self.trace.len()
    }

    /// `l_NF` of the returned checkpoint.
    pub fn best_l_nf(&self) -> f64 {
        self.trace[self.best_round].l_nf
    }

    /// Mean monitored total over the last `window` rounds.
    pub fn final_level(&self, window: usize) -> f64 {
        let k = window.clamp(1, self.trace.len());
        let tail: Vec<f64> = self.trace[self.trace.len() - k..].iter().map(RoundRecord::total).collect();
        compensated_mean(&tail)
    }

    /// First round (1-based count) whose monitored total is at or below `level`.
    pub fn rounds_to_reach(&self, level: f64) -> Option<usize> {
        self.trace.iter().position(|r| r.total() <= level).map(|i| i + 1)
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\"flow\":{},\"value\":{},\"converged\":{},\"best_round\":{}}}",
            self.flow.to_json(),
            self.value.to_json(),
            self.converged,
            self.best_round
        )
    }

    /// Loads the flow and value path of a solution checkpoint.
    pub fn parts_from_json(text: &str) -> Result<(DensityFlow, ValuePath)> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("solution: {e}")))?;
        let flow = v.get("flow").ok_or_else(|| Error::Checkpoint("solution has no flow".into()))?;
        let value = v.get("value").ok_or_else(|| Error::Checkpoint("solution has no value path".into()))?;
        Ok((DensityFlow::from_json(&flow.to_string())?, ValuePath::from_json(&value.to_string())?))
    }
}

/// Relative change between the means of the last two `patience` windows.
fn window_change(totals: &[f64], patience: usize) -> Option<f64> {
    if patience == 0 || totals.len() < 2 * patience {
        return None;
    }
    let k = totals.len();
    let a = compensated_mean(&totals[k - patience..]);
    let b = compensated_mean(&totals[k - 2 * patience..k - patience]);
    Some((a - b).abs() / b.abs().max(1e-300))
}

fn fit_step_set(n_steps: usize, fit_steps: usize, rng: &mut impl Rng) -> Vec<usize> {
    if fit_steps == 0 || fit_steps >= n_steps {
        (1..=n_steps).collect()
    } else {
        let mut s: Vec<usize> = sample_indices(rng, n_steps, fit_steps).into_iter().map(|i| i + 1).collect();
        s.sort_unstable();
        s
    }
}

pub fn train_fixed(problem: &MfgProblem, warm_start: Option<&WarmStart>, config: &FixedConfig) -> Result<FixedSolution> {
    train_fixed_with(problem, warm_start, config, &mut |_| Ok(()))
}

/// [`train_fixed`] reporting every evaluated round to `observer`.
pub fn train_fixed_with(
    problem: &MfgProblem,
    warm_start: Option<&WarmStart>,
    config: &FixedConfig,
    observer: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<FixedSolution> {
    problem.validate()?;
    if let Some(w) = warm_start {
        if w.steps() != problem.steps || w.working_box.dim() != problem.dim {
            return Err(Error::Incompatible("warm start does not match the problem".into()));
        }
    }
    let exec = config.exec;
    let seed = config.seed;
    let mut flow = DensityFlow::for_problem(problem, config.flow.clone(), derive_seed(seed, 10)).with_exec(exec);
    let mut vp = ValuePath::new(problem, config.hidden, derive_seed(seed, 11));
    let mut opt_theta = Adam::new(vp.param_len(), config.lr_theta);
    let mut opt_phi = Adam::new(flow.param_len(), config.lr_phi);
    let burn_rounds = (config.burn_in * config.max_rounds as f64).ceil().max(1.0);
    let eval_seed = derive_seed(seed, 12);
    let start = Instant::now();

    let mut trace: Vec<RoundRecord> = Vec::new();
    let mut totals: Vec<f64> = Vec::new();
    let mut best: Option<(f64, usize, DensityFlow, ValuePath)> = None;
    let mut converged = false;

    for round in 0..config.max_rounds {
        let rseed = derive_seed(seed, 1000 + round as u64);
        let decay = 1.0 / (1.0 + round as f64 / config.lr_half_life.max(1e-12));
        opt_theta.lr = config.lr_theta * decay;
        opt_phi.lr = config.lr_phi * decay;
        let measures = StepMeasures::from_flow(problem, &flow, config.measure_samples, derive_seed(rseed, 0));

        let mut batch: Option<PathBatch> = None;
        for j in 0..config.theta_steps.max(1) {
            let b = simulate_with(
                problem,
                &measures,
                &vp,
                config.paths,
                derive_seed(rseed, 1 + j as u64),
                config.alpha_max,
                exec,
                flow.param_norm(),
            )?;
            if j < config.theta_steps {
                let mut grad = vec![0.0; vp.param_len()];
                mkv_grad(&b, problem, &vp, config.alpha_max, exec, &mut grad);
                opt_theta.step(vp.params_mut(), &grad);
            }
            batch = Some(b);
        }
        let batch = batch.expect("at least one batch");
        fit_constants(&mut vp, &batch);

        let warm_w = warm_start
            .map(|w| config.warm_weight * w.strength * (1.0 - round as f64 / burn_rounds).max(0.0))
            .unwrap_or(0.0);
        for j in 0..config.phi_steps {
            let pseed = derive_seed(rseed, 100 + j as u64);
            let mut grad = vec![0.0; flow.param_len()];
            let m = config.hjb_samples;
            let d = problem.dim;
            let base = flow.sample_base(m, pseed);
            let traj = flow.trajectories(&base);
            let mut cot = vec![0.0; traj.len()];
            if config.w_hjb != 0.0 {
                hjb_terms(&vp, &flow, problem, &traj, m, Some((&mut cot, config.w_hjb)));
            }
            if config.w_terminal != 0.0 {
                let o = problem.steps * m * d;
                terminal_terms(problem, &traj[o..], m, Some((&mut cot[o..], config.w_terminal)));
            }
            flow.trajectory_vjp(&base, &cot, &mut grad);

            let mut rng = stream_rng(pseed, 7);
            if config.w_fit != 0.0 {
                let steps = fit_step_set(problem.steps, config.fit_steps, &mut rng);
                let mf = config.fit_samples.min(batch.paths);
                let weights = vec![-config.w_fit / (mf * steps.len()) as f64; mf];
                for &n in &steps {
                    let pts: Vec<f64> = (0..mf).flat_map(|i| batch.state(i, n).iter().copied()).collect();
                    flow.weighted_log_density_grad(&pts, &weights, n, &mut grad)?;
                }
            }
            if warm_w > 0.0 {
                if let Some(w) = warm_start {
                    let steps = fit_step_set(problem.steps, config.fit_steps, &mut rng);
                    let mf = config.fit_samples;
                    let weights = vec![-warm_w / (mf * steps.len()) as f64; mf];
                    for &n in &steps {
                        if let Some(pts) = w.draw(n, mf, &mut rng) {
                            flow.weighted_log_density_grad(&pts, &weights, n, &mut grad)?;
                        }
                    }
                }
            }
            let mut phi = flow.params();
            opt_phi.step(&mut phi, &grad);
            flow.set_params(&phi)?;
        }

        let record = evaluate(problem, &flow, &vp, config, eval_seed, round, start)?;
        observer(&record)?;
        let total = record.total();
        if !total.is_finite() || !record.l_nf.is_finite() {
            return Err(Error::Diverged {
                step: problem.steps,
                theta_norm: vp.param_norm(),
                phi_norm: flow.param_norm(),
            });
        }
        if best.as_ref().is_none_or(|b| record.l_nf < b.0) {
            best = Some((record.l_nf, round, flow.clone(), vp.clone()));
        }
        totals.push(total);
        trace.push(record);
        if window_change(&totals, config.patience).is_some_and(|c| c < config.tol) {
            converged = true;
            break;
        }
    }

    let (flow, value, best_round) = match best {
        Some((_, r, f, v)) => (f, v, r),
        None => (flow, vp, 0),
    };
    Ok(FixedSolution {
        flow,
        value,
        trace,
        converged,
        best_round,
    })
}

/// Sets each interior head constant so `u_n` matches the simulated values on
/// average along the batch.
fn fit_constants(vp: &mut ValuePath, batch: &PathBatch) {
    let d = batch.dim;
    let mut g = vec![0.0; d];
    for n in 1..batch.steps {
        let diffs: Vec<f64> = (0..batch.paths)
            .map(|i| batch.value(i, n) - vp.eval(n, batch.state(i, n), &mut g).0)
            .collect();
        vp.shift_head(n, compensated_mean(&diffs));
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    problem: &MfgProblem,
    flow: &DensityFlow,
    vp: &ValuePath,
    config: &FixedConfig,
    eval_seed: u64,
    round: usize,
    start: Instant,
) -> Result<RoundRecord> {
    let measures = StepMeasures::from_flow(problem, flow, config.measure_samples, derive_seed(eval_seed, 0));
    let batch = simulate_with(
        problem,
        &measures,
        vp,
        config.paths,
        derive_seed(eval_seed, 1),
        config.alpha_max,
        config.exec,
        flow.param_norm(),
    )?;
    let l_mkv = super::paths::loss_mkv(&batch, flow, problem);
    let m = config.hjb_samples;
    let base = flow.sample_base(m, derive_seed(eval_seed, 2));
    let traj = flow.trajectories(&base);
    let l_hjb = hjb_terms(vp, flow, problem, &traj, m, None);
    let l_t = terminal_terms(problem, &traj[problem.steps * m * problem.dim..], m, None);
    let mf = config.fit_samples.min(batch.paths);
    let mut nll = Vec::with_capacity(problem.steps);
    for n in 1..=problem.steps {
        let pts: Vec<f64> = (0..mf).flat_map(|i| batch.state(i, n).iter().copied()).collect();
        nll.push(-compensated_mean(&flow.log_density_batch(&pts, n)?));
    }
    let l_fit = compensated_mean(&nll);
    let l_nf = config.w_hjb * l_hjb + config.w_terminal * l_t + config.w_fit * l_fit;
    Ok(RoundRecord {
        round,
        l_mkv,
        l_hjb,
        l_t,
        l_fit,
        l_nf,
        seconds: start.elapsed().as_secs_f64(),
    })
}
