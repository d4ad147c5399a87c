//! Outer loop: sampled boundary codes, teacher solves, and `l_PINO` updates
//!
//! ```text
//! l_PINO = 1/(NM) Σ_i Σ_n ( G_θ(code, x_i)_n − μ_{t_n}(x_i) )²
//! ```

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, stream_rng, Exec};
use crate::fbsde::{train_fixed, FixedConfig, WarmStart};
use crate::flow::DensityFlow;
use crate::io::write_atomic;
use crate::mfg::{BoundaryCode, MfgProblem, WorkingBox};
use crate::nn::Adam;
use crate::oracle::{solve_fixed_point, GridSpec, OracleConfig, OracleSolution, MAX_POINTS_1D, MAX_POINTS_2D};
use crate::scenarios::ScenarioSampler;

use super::model::{OperatorArch, OperatorModel};

/// Query points of one code with target densities at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub code: BoundaryCode,
    /// `M × d`.
    pub queries: Vec<f64>,
    /// `M × N`, row `i` holds `μ_{t_1..t_N}(x_i)`.
    pub targets: Vec<f64>,
    pub steps: usize,
}

impl TrainSample {
    pub fn new(code: BoundaryCode, queries: Vec<f64>, targets: Vec<f64>, steps: usize) -> Result<Self> {
        let d = code.layout().dim;
        if steps == 0 || queries.len() % d != 0 || targets.len() != queries.len() / d * steps {
            return Err(Error::Incompatible(format!(
                "{} query values and {} targets for dimension {d} and {steps} steps",
                queries.len(),
                targets.len()
            )));
        }
        if queries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training queries".into()));
        }
        if targets.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("training targets".into()));
        }
        Ok(Self {
            code,
            queries,
            targets,
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len() / self.code.layout().dim
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Targets from a converged flow. A fraction `uniform` of the `m` queries is
    /// uniform on the box; the rest follow `μ_{t_n}` at uniformly drawn `n`,
    /// rejected outside the box.
    pub fn from_flow(
        code: &BoundaryCode,
        flow: &DensityFlow,
        working_box: &WorkingBox,
        m: usize,
        uniform: f64,
        seed: u64,
    ) -> Result<Self> {
        let n_steps = flow.steps();
        let d = flow.dim();
        let mut rng = stream_rng(seed, 0);
        let mut queries = Vec::with_capacity(m * d);
        let mut count = 0;
        let mut attempt = 0u64;
        while count < m {
            attempt += 1;
            if attempt > 64 * (m as u64 + 1) {
                return Err(Error::Incompatible("flow mass lies outside the working box".into()));
            }
            if rng.random::<f64>() < uniform {
                queries.extend(uniform_point(working_box, &mut rng));
                count += 1;
                continue;
            }
            let n = rng.random_range(1..=n_steps);
            let x = flow.push_samples(n, 1, rng.random())?;
            if working_box.contains(&x) {
                queries.extend(x);
                count += 1;
            }
        }
        let mut targets = vec![0.0; m * n_steps];
        for n in 1..=n_steps {
            let logs = flow.log_density_batch(&queries, n)?;
            for (i, l) in logs.iter().enumerate() {
                targets[i * n_steps + n - 1] = l.exp();
            }
        }
        Self::new(code.clone(), queries, targets, n_steps)
    }

    /// Targets from a grid fixed point whose levels refine `steps` evenly.
    pub fn from_oracle(code: &BoundaryCode, sol: &OracleSolution, steps: usize, m: usize, uniform: f64, seed: u64) -> Result<Self> {
        let levels = sol.grid.levels;
        if steps == 0 || levels % steps != 0 {
            return Err(Error::Incompatible(format!("{levels} grid levels do not refine {steps} steps")));
        }
        let stride = levels / steps;
        let grid = &sol.grid;
        let d = grid.dim();
        let centers = grid.centers();
        let cdfs: Vec<Vec<f64>> = (1..=steps)
            .map(|n| {
                let mut acc = 0.0;
                sol.mu[n * stride]
                    .iter()
                    .map(|v| {
                        acc += v.max(0.0);
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut rng = stream_rng(seed, 0);
        let mut queries = Vec::with_capacity(m * d);
        for _ in 0..m {
            if rng.random::<f64>() < uniform {
                queries.extend(uniform_point(&grid.working_box, &mut rng));
                continue;
            }
            let cdf = &cdfs[rng.random_range(0..steps)];
            let u = rng.random::<f64>() * cdf.last().copied().unwrap_or(0.0);
            let j = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            for k in 0..d {
                queries.push(centers[j * d + k] + grid.spacing(k) * (rng.random::<f64>() - 0.5));
            }
        }
        let mut targets = Vec::with_capacity(m * steps);
        for x in queries.chunks(d) {
            targets.extend((1..=steps).map(|n| sol.density_at(n * stride, x)));
        }
        Self::new(code.clone(), queries, targets, steps)
    }
}

fn uniform_point(b: &WorkingBox, rng: &mut impl Rng) -> Vec<f64> {
    (0..b.dim()).map(|k| b.lo[k] + b.width(k) * rng.random::<f64>()).collect()
}

/// Mean squared density error over every query and step of `sample`.
pub fn loss_pino(model: &OperatorModel, sample: &TrainSample) -> Result<f64> {
    check_steps(model, sample)?;
    model.squared_error(&sample.code, &sample.queries, &sample.targets, None)
}

/// [`loss_pino`] with its parameter gradient added into `grad`.
pub fn loss_pino_grad(model: &OperatorModel, sample: &TrainSample, grad: &mut [f64]) -> Result<f64> {
    check_steps(model, sample)?;
    if grad.len() != model.param_len() {
        return Err(Error::Incompatible(format!("gradient of length {} for {} parameters", grad.len(), model.param_len())));
    }
    model.squared_error(&sample.code, &sample.queries, &sample.targets, Some(grad))
}

/// Mean of [`loss_pino`] over a held-out set.
pub fn held_out_loss(model: &OperatorModel, samples: &[TrainSample]) -> Result<f64> {
    let losses = samples.iter().map(|s| loss_pino(model, s)).collect::<Result<Vec<_>>>()?;
    Ok(crate::exec::compensated_mean(&losses))
}

fn check_steps(model: &OperatorModel, sample: &TrainSample) -> Result<()> {
    if sample.steps != model.steps() {
        return Err(Error::Incompatible(format!("sample has {} steps, operator emits {}", sample.steps, model.steps())));
    }
    Ok(())
}

/// Per-step `∫|G − μ|` against a grid solution, by midpoint quadrature on its cells.
pub fn oracle_l1(model: &OperatorModel, code: &BoundaryCode, sol: &OracleSolution) -> Result<Vec<f64>> {
    let n_steps = model.steps();
    let levels = sol.grid.levels;
    if levels % n_steps != 0 {
        return Err(Error::Incompatible(format!("{levels} grid levels do not refine {n_steps} steps")));
    }
    let stride = levels / n_steps;
    let out = model.eval(code, &sol.grid.centers())?;
    let vol = sol.grid.cell_volume();
    Ok((1..=n_steps)
        .map(|n| {
            let mu = &sol.mu[n * stride];
            crate::exec::compensated_sum(mu.iter().enumerate().map(|(j, m)| (out[j * n_steps + n - 1] - m).abs())) * vol
        })
        .collect())
}

/// Outcome of one inner solve.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub sample: TrainSample,
    pub inner_rounds: usize,
    pub converged: bool,
}

/// Produces density targets for a boundary code.
pub trait Teacher: Sync {
    fn solve(
        &self,
        problem: &MfgProblem,
        code: &BoundaryCode,
        warm_start: Option<&WarmStart>,
        queries: usize,
        seed: u64,
    ) -> Result<TeacherOutput>;
}

/// Converged normalizing-flow solves from [`train_fixed`].
#[derive(Debug, Clone, Default)]
pub struct NfTeacher {
    pub config: FixedConfig,
    /// Fraction of queries drawn uniformly on the working box.
    pub uniform: f64,
}

impl Teacher for NfTeacher {
    fn solve(
        &self,
        problem: &MfgProblem,
        code: &BoundaryCode,
        warm_start: Option<&WarmStart>,
        queries: usize,
        seed: u64,
    ) -> Result<TeacherOutput> {
        let config = FixedConfig {
            seed,
            ..self.config.clone()
        };
        let sol = train_fixed(problem, warm_start, &config)?;
        let sample = TrainSample::from_flow(code, &sol.flow, &problem.working_box, queries, self.uniform, derive_seed(seed, 1))?;
        Ok(TeacherOutput {
            sample,
            inner_rounds: sol.rounds(),
            converged: sol.converged,
        })
    }
}

/// Grid fixed points from [`solve_fixed_point`]; warm starts are ignored.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    /// Cells per axis, capped at the oracle limits.
    pub points: usize,
    pub levels_per_step: usize,
    pub config: OracleConfig,
    pub uniform: f64,
}

impl Default for OracleTeacher {
    fn default() -> Self {
        Self {
            points: MAX_POINTS_1D,
            levels_per_step: 20,
            config: OracleConfig::default(),
            uniform: 0.2,
        }
    }
}

impl OracleTeacher {
    /// Grid on the problem box; the level count doubles (up to 16×) until
    /// the stability check passes.
    pub fn grid(&self, problem: &MfgProblem) -> Result<GridSpec> {
        let cap = if problem.dim == 1 { MAX_POINTS_1D } else { MAX_POINTS_2D };
        let p = self.points.min(cap);
        let mut per_step = self.levels_per_step.max(1);
        loop {
            match GridSpec::new(problem, problem.working_box.clone(), vec![p; problem.dim], problem.steps * per_step) {
                Err(Error::Stability(_)) if per_step < 16 * self.levels_per_step.max(1) => per_step *= 2,
                other => return other,
            }
        }
    }

    pub fn solve_grid(&self, problem: &MfgProblem) -> Result<OracleSolution> {
        solve_fixed_point(problem, &self.grid(problem)?, &self.config)
    }
}

impl Teacher for OracleTeacher {
    fn solve(
        &self,
        problem: &MfgProblem,
        code: &BoundaryCode,
        _warm_start: Option<&WarmStart>,
        queries: usize,
        seed: u64,
    ) -> Result<TeacherOutput> {
        let sol = self.solve_grid(problem)?;
        let sample = TrainSample::from_oracle(code, &sol, problem.steps, queries, self.uniform, seed)?;
        Ok(TeacherOutput {
            sample,
            inner_rounds: sol.iterations(),
            converged: sol.converged,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorTrainConfig {
    pub seed: u64,
    pub arch: OperatorArch,
    /// Number of sampled codes.
    pub codes: usize,
    /// θ-steps after each accepted code; the newest sample goes first, the
    /// rest draw uniformly from the buffer.
    pub updates_per_code: usize,
    pub queries: usize,
    pub lr: f64,
    /// Codes after which the step size has halved.
    pub lr_half_life: f64,
    /// Warm-start lattice points per axis; 0 disables warm starts.
    pub warm_points: usize,
    /// Codes over which the warm-start strength ramps from 0 to 1.
    pub warm_ramp: usize,
    /// Retained samples; 0 keeps all.
    pub buffer: usize,
    pub exec: Exec,
}

impl Default for OperatorTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: OperatorArch::default(),
            codes: 64,
            updates_per_code: 2,
            queries: 96,
            lr: 1e-2,
            lr_half_life: 1e9,
            warm_points: 32,
            warm_ramp: 16,
            buffer: 0,
            exec: Exec::default(),
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub iteration: usize,
    pub code_digest: String,
    pub inner_rounds: usize,
    /// `l_PINO` of the new sample before the update; NaN when skipped.
    pub l_pino: f64,
    pub status: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub records: Vec<SessionRecord>,
    pub seconds: f64,
}

impl SessionReport {
    pub const CSV_HEADER: &'static str = "iteration,code_digest,inner_rounds,l_pino,status";

    /// Per-iteration `l_PINO` of the accepted samples.
    pub fn trace(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.status == "ok").map(|r| r.l_pino).collect()
    }

    /// `l_PINO` of the best checkpoint after each accepted sample.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace()
            .into_iter()
            .map(|l| {
                best = best.min(l);
                best
            })
            .collect()
    }

    pub fn skipped(&self) -> usize {
        self.records.iter().filter(|r| r.status != "ok").count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{},{:.12e},{}\n", r.iteration, r.code_digest, r.inner_rounds, r.l_pino, r.status));
        }
        s
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Final operator, the best checkpoint, and the session log.
#[derive(Debug, Clone)]
pub struct OperatorSession {
    pub model: OperatorModel,
    /// Parameters with the lowest pre-update `l_PINO`.
    pub best: OperatorModel,
    pub report: SessionReport,
    pub samples: Vec<TrainSample>,
}

/// Model densities on a lattice of the problem box, for warm starts.
pub fn warm_start_from(model: &OperatorModel, problem: &MfgProblem, code: &BoundaryCode, per_axis: usize, strength: f64) -> Result<WarmStart> {
    let b = &problem.working_box;
    let pts = vec![per_axis; b.dim()];
    let lattice = b.lattice(&pts).concat();
    let out = model.eval(code, &lattice)?;
    let n_steps = model.steps();
    if n_steps != problem.steps {
        return Err(Error::Incompatible(format!("operator emits {n_steps} steps, problem has {}", problem.steps)));
    }
    let k = lattice.len() / b.dim();
    let densities = (0..n_steps).map(|n| (0..k).map(|j| out[j * n_steps + n]).collect()).collect();
    WarmStart::new(b.clone(), pts, densities, strength)
}

/// Runs the outer loop for `config.codes` sampled codes.
pub fn train_pionm(
    sampler: &dyn ScenarioSampler,
    build: &dyn Fn(&BoundaryCode) -> Result<MfgProblem>,
    teacher: &dyn Teacher,
    config: &OperatorTrainConfig,
) -> Result<OperatorSession> {
    train_pionm_with(sampler, build, teacher, config, &mut |_| Ok(()))
}

/// [`train_pionm`] reporting every outer iteration to `observer`.
pub fn train_pionm_with(
    sampler: &dyn ScenarioSampler,
    build: &dyn Fn(&BoundaryCode) -> Result<MfgProblem>,
    teacher: &dyn Teacher,
    config: &OperatorTrainConfig,
    observer: &mut dyn FnMut(&SessionRecord) -> Result<()>,
) -> Result<OperatorSession> {
    let start = Instant::now();
    let mut model = OperatorModel::new(sampler.layout(), config.arch, derive_seed(config.seed, 0))?.with_exec(config.exec);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut adam = Adam::new(model.param_len(), config.lr);
    let mut code_rng = stream_rng(config.seed, 1);
    let mut pick_rng = stream_rng(config.seed, 2);
    let mut buffer: Vec<TrainSample> = Vec::new();
    let mut report = SessionReport::default();
    let mut grad = vec![0.0; model.param_len()];
    for it in 0..config.codes {
        let code = sampler.draw(&mut code_rng);
        let inner_seed = derive_seed(config.seed, 1000 + it as u64);
        let mut record = SessionRecord {
            iteration: it,
            code_digest: code.digest(),
            inner_rounds: 0,
            l_pino: f64::NAN,
            status: "ok".into(),
        };
        match solve_one(&model, build, teacher, config, &code, it, inner_seed) {
            Err(e) => record.status = format!("skipped: {}", e.to_string().replace(',', ";")),
            Ok(out) if !out.converged => {
                record.inner_rounds = out.inner_rounds;
                record.status = "skipped: inner solve did not converge".into();
            }
            Ok(out) => {
                record.inner_rounds = out.inner_rounds;
                record.l_pino = loss_pino(&model, &out.sample)?;
                if record.l_pino < best_loss {
                    best_loss = record.l_pino;
                    best = model.clone();
                }
                if config.buffer > 0 && buffer.len() == config.buffer {
                    buffer.remove(0);
                }
                buffer.push(out.sample);
                adam.lr = config.lr / (1.0 + it as f64 / config.lr_half_life);
                for u in 0..config.updates_per_code {
                    let s = if u == 0 {
                        buffer.last().expect("sample just pushed")
                    } else {
                        buffer.choose(&mut pick_rng).expect("buffer is non-empty")
                    };
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    model.squared_error(&s.code, &s.queries, &s.targets, Some(&mut grad))?;
                    if grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFinite(format!("operator gradient at iteration {it}")));
                    }
                    adam.step(model.params_mut(), &grad);
                }
            }
        }
        observer(&record)?;
        report.records.push(record);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(OperatorSession {
        model,
        best,
        report,
        samples: buffer,
    })
}

fn solve_one(
    model: &OperatorModel,
    build: &dyn Fn(&BoundaryCode) -> Result<MfgProblem>,
    teacher: &dyn Teacher,
    config: &OperatorTrainConfig,
    code: &BoundaryCode,
    it: usize,
    seed: u64,
) -> Result<TeacherOutput> {
    let problem = build(code)?;
    let warm = if config.warm_points > 0 {
        let strength = if config.warm_ramp == 0 { 1.0 } else { (it as f64 / config.warm_ramp as f64).min(1.0) };
        Some(warm_start_from(model, &problem, code, config.warm_points, strength)?)
    } else {
        None
    };
    let out = teacher.solve(&problem, code, warm.as_ref(), config.queries, seed)?;
    check_steps(model, &out.sample)?;
    Ok(out)
}

/// Draws `count` codes and their teacher samples with a private stream, for
/// held-out evaluation.
pub fn held_out_samples(
    sampler: &dyn ScenarioSampler,
    build: &dyn Fn(&BoundaryCode) -> Result<MfgProblem>,
    teacher: &dyn Teacher,
    count: usize,
    queries: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let mut rng: ChaCha8Rng = stream_rng(seed, 7);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let code = sampler.draw(&mut rng);
        let problem = build(&code)?;
        let t = teacher.solve(&problem, &code, None, queries, derive_seed(seed, i as u64))?;
        if t.converged {
            out.push(t.sample);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::{build_crowd_motion_with, CodeLayout, Scenario};
    use crate::scenarios::{toy_1d_settings, UniformSampler};

    fn tiny_arch(steps: usize) -> OperatorArch {
        OperatorArch {
            width: 6,
            layers: 2,
            modes: 3,
            steps,
            feature_scale: 2.0,
        }
    }

    fn code() -> BoundaryCode {
        let s = Scenario {
            init_mean: vec![-1.0],
            init_std: 0.5,
            target: vec![1.0],
            obstacles: vec![],
            sigma: 0.5,
        };
        BoundaryCode::encode(&s, CodeLayout::circles(1, 0)).unwrap()
    }

    fn model(steps: usize) -> OperatorModel {
        OperatorModel::new(CodeLayout::circles(1, 0), tiny_arch(steps), 5).unwrap()
    }

    fn toy_build(code: &BoundaryCode) -> Result<MfgProblem> {
        let (settings, horizon, steps) = toy_1d_settings();
        build_crowd_motion_with(code, steps, horizon, &settings)
    }

    #[test]
    fn exact_targets_give_zero_loss() {
        let m = model(4);
        let q = vec![-1.0, 0.0, 0.5];
        let t = m.eval(&code(), &q).unwrap();
        let s = TrainSample::new(code(), q, t, 4).unwrap();
        assert_eq!(loss_pino(&m, &s).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_gives_unit_loss() {
        let m = model(4);
        let q = vec![-1.0, 0.0, 0.5];
        let t: Vec<f64> = m.eval(&code(), &q).unwrap().iter().map(|v| v + 1.0).collect();
        let s = TrainSample::new(code(), q, t, 4).unwrap();
        assert!((loss_pino(&m, &s).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn loss_equals_a_straight_line_double_mean() {
        let m = model(5);
        let mut rng = stream_rng(2, 0);
        let q: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..35).map(|_| rng.random::<f64>()).collect();
        let s = TrainSample::new(code(), q.clone(), t.clone(), 5).unwrap();
        let mut direct = 0.0;
        for i in 0..7 {
            let out = m.eval(&code(), &q[i..i + 1]).unwrap();
            for n in 0..5 {
                direct += (out[n] - t[i * 5 + n]).powi(2);
            }
        }
        direct /= 35.0;
        assert!((loss_pino(&m, &s).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn negative_targets_and_bad_shapes_are_rejected() {
        assert!(TrainSample::new(code(), vec![0.0], vec![-1.0, 0.0], 2).is_err());
        assert!(TrainSample::new(code(), vec![0.0], vec![1.0], 2).is_err());
        let s = TrainSample::new(code(), vec![0.0], vec![1.0; 3], 3).unwrap();
        assert!(loss_pino(&model(4), &s).is_err());
    }

    #[test]
    fn zero_budget_returns_the_untrained_model() {
        let cfg = OperatorTrainConfig {
            codes: 0,
            arch: tiny_arch(10),
            ..Default::default()
        };
        let s = train_pionm(&UniformSampler::toy_1d(), &toy_build, &OracleTeacher::default(), &cfg).unwrap();
        assert!(s.report.records.is_empty());
        let fresh = OperatorModel::new(CodeLayout::circles(1, 0), tiny_arch(10), derive_seed(0, 0)).unwrap();
        assert_eq!(s.model, fresh);
    }

    struct Failing;
    impl Teacher for Failing {
        fn solve(&self, problem: &MfgProblem, code: &BoundaryCode, _: Option<&WarmStart>, q: usize, seed: u64) -> Result<TeacherOutput> {
            let mut out = OracleTeacher::default().solve(problem, code, None, q, seed)?;
            out.converged = false;
            Ok(out)
        }
    }

    #[test]
    fn non_converged_solves_are_skipped_and_logged() {
        let cfg = OperatorTrainConfig {
            codes: 2,
            arch: tiny_arch(10),
            queries: 16,
            warm_points: 8,
            ..Default::default()
        };
        let s = train_pionm(&UniformSampler::toy_1d(), &toy_build, &Failing, &cfg).unwrap();
        assert_eq!(s.report.skipped(), 2);
        assert!(s.report.trace().is_empty());
        assert!(s.samples.is_empty());
        assert!(s.report.to_csv().lines().nth(1).unwrap().contains("skipped"));
    }

    #[test]
    fn short_session_logs_a_non_increasing_best_trace() {
        let cfg = OperatorTrainConfig {
            codes: 4,
            arch: tiny_arch(10),
            queries: 64,
            updates_per_code: 4,
            warm_points: 8,
            lr: 1e-2,
            ..Default::default()
        };
        let teacher = OracleTeacher {
            points: 48,
            levels_per_step: 8,
            ..Default::default()
        };
        let s = train_pionm(&UniformSampler::toy_1d(), &toy_build, &teacher, &cfg).unwrap();
        assert_eq!(s.report.records.len(), 4);
        let best = s.report.best_trace();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(loss_pino(&s.best, &s.samples[0]).unwrap().is_finite());
        let again = train_pionm(&UniformSampler::toy_1d(), &toy_build, &teacher, &cfg).unwrap();
        assert_eq!(again.report.trace(), s.report.trace());
        assert_eq!(again.model, s.model);
    }

    #[test]
    fn oracle_samples_hold_positive_targets_that_match_the_grid() {
        let problem = toy_build(&code()).unwrap();
        let teacher = OracleTeacher {
            points: 64,
            levels_per_step: 10,
            ..Default::default()
        };
        let sol = teacher.solve_grid(&problem).unwrap();
        let s = TrainSample::from_oracle(&code(), &sol, 10, 200, 0.2, 3).unwrap();
        assert_eq!(s.len(), 200);
        for (i, x) in s.queries.iter().enumerate() {
            assert!(problem.working_box.contains(&[*x]));
            assert_eq!(s.targets[i * 10 + 9], sol.density_at(sol.grid.levels, &[*x]));
        }
    }
}
