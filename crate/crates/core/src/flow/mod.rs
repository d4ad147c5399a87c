//! Discrete-time normalizing flow for the population marginals.
//!
//! With base density `μ_0` and invertible transition maps `r_1, …, r_N`,
//!
//! ```text
//! μ_{t_n} = (r_n ∘ r_{n-1} ∘ ⋯ ∘ r_1)_# μ_0,
//! log μ_{t_n}(y) = log μ_0(x_0) − Σ_{k=1}^{n} log |det ∂r_k(x_{k-1})|,
//! ```
//!
//! where `x_0 = r_1^{-1} ∘ ⋯ ∘ r_n^{-1}(y)`. Samples are pushed forward
//! through the maps; exact densities are obtained by inversion.

mod bijector;

use std::path::Path;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use bijector::{Block, BlockKind, FlowScale, Scratch};

use crate::error::{Error, Result};
use crate::exec::{reduce_into, stream_rng, Exec};
use crate::mfg::{Gaussian, MfgProblem, WorkingBox};

const SCHEMA_VERSION: u32 = 1;

/// Architecture of each transition map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Coupling blocks per map (ignored in one dimension).
    pub coupling_blocks: usize,
    /// Hidden width of each coupling conditioner.
    pub width: usize,
    /// Bound on the coupling log-scales.
    pub clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            coupling_blocks: 2,
            width: 16,
            clamp: 2.0,
        }
    }
}

/// One invertible transition `r_n : ℝ^d → ℝ^d`: an elementwise affine block
/// followed by affine couplings with alternating masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMap {
    pub blocks: Vec<Block>,
    pub params: Vec<f64>,
    pub scale: FlowScale,
}

impl TransitionMap {
    pub fn identity(dim: usize, config: &FlowConfig, scale: FlowScale, mut draw: impl FnMut() -> f64) -> Self {
        let mut blocks = vec![Block::affine(dim)];
        if dim >= 2 {
            let half = dim / 2;
            let a: Vec<usize> = (0..half).collect();
            let b: Vec<usize> = (half..dim).collect();
            for i in 0..config.coupling_blocks {
                let (cond, trans) = if i % 2 == 0 { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                blocks.push(Block::coupling(dim, cond, trans, config.width));
            }
        }
        let mut params = Vec::new();
        for b in &blocks {
            params.extend(b.init_params(&mut draw));
        }
        Self { blocks, params, scale }
    }

    /// `x ↦ exp(log_scale) ⊙ x + shift`.
    pub fn affine(log_scale: &[f64], shift: &[f64], scale: FlowScale) -> Self {
        let mut params = log_scale.to_vec();
        params.extend(shift.iter().map(|s| s / scale.length));
        Self {
            blocks: vec![Block::affine(log_scale.len())],
            params,
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.center.len()
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    fn block_params(&self) -> impl Iterator<Item = (&Block, std::ops::Range<usize>)> {
        let mut off = 0;
        self.blocks.iter().map(move |b| {
            let r = off..off + b.param_len();
            off = r.end;
            (b, r)
        })
    }

    /// Applies the map; returns `log |det ∂r(x)|`.
    pub fn forward(&self, x: &[f64], y: &mut [f64], sc: &mut Scratch) -> f64 {
        let mut buf = x.to_vec();
        let mut ld = 0.0;
        for (b, r) in self.block_params() {
            ld += b.forward(&self.params[r], &self.scale, &buf, y, sc);
            buf.copy_from_slice(y);
        }
        ld
    }

    /// Inverts the map; returns `log |det ∂r|` at the recovered point.
    pub fn inverse(&self, y: &[f64], x: &mut [f64], sc: &mut Scratch) -> f64 {
        let mut buf = y.to_vec();
        let mut ld = 0.0;
        let ranges: Vec<_> = self.block_params().collect();
        for (b, r) in ranges.into_iter().rev() {
            ld += b.inverse(&self.params[r], &self.scale, &buf, x, sc);
            buf.copy_from_slice(x);
        }
        ld
    }
}

/// Population marginals `μ_{t_0}, …, μ_{t_N}` as a normalizing flow.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFlow {
    base: Gaussian,
    maps: Vec<TransitionMap>,
    config: FlowConfig,
    offsets: Vec<usize>,
    exec: Exec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowCheckpoint {
    schema_version: u32,
    kind: String,
    dim: usize,
    steps: usize,
    base: Gaussian,
    config: FlowConfig,
    maps: Vec<TransitionMap>,
}

impl DensityFlow {
    /// Flow whose maps are all the identity, so every marginal equals `base`.
    pub fn new(base: Gaussian, working_box: &WorkingBox, steps: usize, config: FlowConfig, seed: u64) -> Self {
        let dim = base.dim();
        let scale = FlowScale {
            center: working_box.center(),
            length: working_box.half_extent(),
            clamp: config.clamp,
        };
        let mut rng = stream_rng(seed, u64::MAX);
        let maps = (0..steps)
            .map(|_| {
                TransitionMap::identity(dim, &config, scale.clone(), || rand::Rng::sample(&mut rng, StandardNormal))
            })
            .collect();
        Self::from_maps(base, maps, config)
    }

    pub fn for_problem(problem: &MfgProblem, config: FlowConfig, seed: u64) -> Self {
        Self::new(problem.initial.clone(), &problem.working_box, problem.steps, config, seed)
    }

    pub fn from_maps(base: Gaussian, maps: Vec<TransitionMap>, config: FlowConfig) -> Self {
        let mut offsets = Vec::with_capacity(maps.len() + 1);
        let mut off = 0;
        for m in &maps {
            offsets.push(off);
            off += m.param_len();
        }
        offsets.push(off);
        Self {
            base,
            maps,
            config,
            offsets,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn steps(&self) -> usize {
        self.maps.len()
    }

    pub fn base(&self) -> &Gaussian {
        &self.base
    }

    pub fn maps(&self) -> &[TransitionMap] {
        &self.maps
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn param_len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// All map parameters, concatenated in step order.
    pub fn params(&self) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.params.iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::Incompatible(format!(
                "flow expects {} parameters, got {}",
                self.param_len(),
                params.len()
            )));
        }
        for (k, m) in self.maps.iter_mut().enumerate() {
            m.params.copy_from_slice(&params[self.offsets[k]..self.offsets[k + 1]]);
        }
        Ok(())
    }

    pub fn param_norm(&self) -> f64 {
        crate::nn::norm(&self.params())
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n > self.steps() {
            return Err(Error::StepOutOfRange { step: n, max: self.steps() });
        }
        Ok(())
    }

    /// `M` base draws, flattened `M × d`; draw `i` uses its own random stream.
    pub fn sample_base(&self, m: usize, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let rows = self.exec.map(m, |i| {
            let mut rng = stream_rng(seed, i as u64);
            (0..d)
                .map(|k| {
                    let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                    self.base.mean[k] + self.base.std * z
                })
                .collect::<Vec<f64>>()
        });
        rows.concat()
    }

    /// Pushes one point through maps `from+1..=to`.
    pub fn transport(&self, x: &[f64], from: usize, to: usize, sc: &mut Scratch) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = vec![0.0; x.len()];
        for map in &self.maps[from..to] {
            map.forward(&cur, &mut next, sc);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// `M` samples from `μ_{t_n}`, flattened `M × d`.
    pub fn push_samples(&self, n: usize, m: usize, seed: u64) -> Result<Vec<f64>> {
        self.check_step(n)?;
        let base = self.sample_base(m, seed);
        Ok(self.push_points(&base, n))
    }

    /// Pushes flattened base points to step `n`.
    pub fn push_points(&self, base: &[f64], n: usize) -> Vec<f64> {
        let d = self.dim();
        let m = base.len() / d;
        let rows = self.exec.map_chunks(m, |r| {
            let mut sc = Scratch::default();
            let mut out = Vec::with_capacity(r.len() * d);
            for i in r {
                out.extend(self.transport(&base[i * d..(i + 1) * d], 0, n, &mut sc));
            }
            out
        });
        rows.concat()
    }

    /// Positions of the flattened base points at every step, laid out
    /// `[(N+1)][M][d]`.
    pub fn trajectories(&self, base: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let m = base.len() / d;
        let n_steps = self.steps();
        let per_chunk = self.exec.map_chunks(m, |r| {
            let mut sc = Scratch::default();
            let mut out = Vec::with_capacity(r.len() * (n_steps + 1) * d);
            let mut next = vec![0.0; d];
            for i in r {
                let mut cur = base[i * d..(i + 1) * d].to_vec();
                out.extend_from_slice(&cur);
                for map in &self.maps {
                    map.forward(&cur, &mut next, &mut sc);
                    std::mem::swap(&mut cur, &mut next);
                    out.extend_from_slice(&cur);
                }
            }
            out
        });
        let mut traj = vec![0.0; (n_steps + 1) * m * d];
        let mut i = 0;
        for chunk in per_chunk {
            for point in chunk.chunks(d * (n_steps + 1)) {
                for n in 0..=n_steps {
                    let dst = (n * m + i) * d;
                    traj[dst..dst + d].copy_from_slice(&point[n * d..(n + 1) * d]);
                }
                i += 1;
            }
        }
        traj
    }

    /// Inverts maps `n, …, 1`; returns `(x_0, Σ log-dets)`.
    fn pull_back(&self, y: &[f64], n: usize, sc: &mut Scratch) -> (Vec<f64>, f64) {
        let mut cur = y.to_vec();
        let mut prev = vec![0.0; y.len()];
        let mut ld = 0.0;
        for map in self.maps[..n].iter().rev() {
            ld += map.inverse(&cur, &mut prev, sc);
            std::mem::swap(&mut cur, &mut prev);
        }
        (cur, ld)
    }

    /// `log μ_{t_n}(x)`.
    pub fn log_density(&self, x: &[f64], n: usize) -> Result<f64> {
        self.check_step(n)?;
        let (x0, ld) = self.pull_back(x, n, &mut Scratch::default());
        Ok(self.base.log_pdf(&x0) - ld)
    }

    /// `log μ_{t_n}` at each row of the flattened points.
    pub fn log_density_batch(&self, points: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_step(n)?;
        let d = self.dim();
        let m = points.len() / d;
        let parts = self.exec.map_chunks(m, |r| {
            let mut sc = Scratch::default();
            r.map(|i| {
                let (x0, ld) = self.pull_back(&points[i * d..(i + 1) * d], n, &mut sc);
                self.base.log_pdf(&x0) - ld
            })
            .collect::<Vec<f64>>()
        });
        Ok(parts.concat())
    }

    /// `log μ_{t_n}(x)` with its gradient in `x` written to `grad_x`.
    pub fn log_density_grad(&self, x: &[f64], n: usize, grad_x: &mut [f64]) -> Result<f64> {
        self.check_step(n)?;
        let mut sc = Scratch::default();
        let mut gp = vec![0.0; self.param_len()];
        Ok(self.log_density_vjp(x, n, 1.0, grad_x, &mut gp, &mut sc))
    }

    /// Evaluates `log μ_{t_n}(y)` and accumulates `w ∂/∂φ log μ_{t_n}(y)` into
    /// `gp`; writes `w ∇_y log μ_{t_n}(y)` into `ybar`.
    fn log_density_vjp(&self, y: &[f64], n: usize, w: f64, ybar: &mut [f64], gp: &mut [f64], sc: &mut Scratch) -> f64 {
        let d = y.len();
        // Tape of block inputs in application order: maps n..1, blocks reversed.
        let mut tape: Vec<f64> = Vec::new();
        let mut cur = y.to_vec();
        let mut prev = vec![0.0; d];
        let mut ld = 0.0;
        for k in (0..n).rev() {
            let map = &self.maps[k];
            let ranges: Vec<_> = map.block_params().collect();
            for (b, r) in ranges.into_iter().rev() {
                tape.extend_from_slice(&cur);
                ld += b.inverse(&map.params[r], &map.scale, &cur, &mut prev, sc);
                std::mem::swap(&mut cur, &mut prev);
            }
        }
        let value = self.base.log_pdf(&cur) - ld;

        let mut xbar = vec![0.0; d];
        self.base.score(&cur, &mut xbar);
        xbar.iter_mut().for_each(|v| *v *= w);
        let mut above = vec![0.0; d];
        let mut slot = tape.len() / d.max(1);
        for k in 0..n {
            let map = &self.maps[k];
            let off = self.offsets[k];
            for (b, r) in map.block_params() {
                slot -= 1;
                let input = &tape[slot * d..(slot + 1) * d];
                let g = &mut gp[off + r.start..off + r.end];
                b.inverse_vjp(&map.params[r], &map.scale, input, &xbar, -w, &mut above, g, sc);
                std::mem::swap(&mut xbar, &mut above);
            }
        }
        ybar.copy_from_slice(&xbar);
        value
    }

    /// `Σ_i w_i log μ_{t_n}(x_i)` over flattened points; its parameter
    /// gradient is added to `grad`.
    pub fn weighted_log_density_grad(&self, points: &[f64], weights: &[f64], n: usize, grad: &mut [f64]) -> Result<f64> {
        self.check_step(n)?;
        let d = self.dim();
        let m = points.len() / d;
        assert_eq!(weights.len(), m);
        assert_eq!(grad.len(), self.param_len());
        let parts = self.exec.map_chunks(m, |r| {
            let mut sc = Scratch::default();
            let mut gp = vec![0.0; self.param_len()];
            let mut ybar = vec![0.0; d];
            let mut vals = Vec::with_capacity(r.len());
            for i in r {
                let v = self.log_density_vjp(&points[i * d..(i + 1) * d], n, weights[i], &mut ybar, &mut gp, &mut sc);
                vals.push(weights[i] * v);
            }
            (gp, crate::exec::compensated_sum(vals))
        });
        let total = crate::exec::compensated_sum(parts.iter().map(|p| p.1));
        let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.0).collect();
        reduce_into(grad, &grads);
        Ok(total)
    }

    /// Backpropagates cotangents on [`DensityFlow::trajectories`] (same
    /// layout) to the map parameters, adding into `grad`.
    pub fn trajectory_vjp(&self, base: &[f64], cot: &[f64], grad: &mut [f64]) {
        let d = self.dim();
        let m = base.len() / d;
        let n_steps = self.steps();
        assert_eq!(cot.len(), (n_steps + 1) * m * d);
        assert_eq!(grad.len(), self.param_len());
        let parts = self.exec.map_chunks(m, |r| {
            let mut sc = Scratch::default();
            let mut gp = vec![0.0; self.param_len()];
            let mut tape: Vec<f64> = Vec::new();
            let mut next = vec![0.0; d];
            let mut xbar = vec![0.0; d];
            let mut below = vec![0.0; d];
            for i in r {
                tape.clear();
                let mut cur = base[i * d..(i + 1) * d].to_vec();
                for map in &self.maps {
                    for (b, rr) in map.block_params() {
                        tape.extend_from_slice(&cur);
                        b.forward(&map.params[rr], &map.scale, &cur, &mut next, &mut sc);
                        std::mem::swap(&mut cur, &mut next);
                    }
                }
                let c = |n: usize| &cot[(n * m + i) * d..(n * m + i + 1) * d];
                xbar.copy_from_slice(c(n_steps));
                let mut slot = tape.len() / d;
                for k in (0..n_steps).rev() {
                    let map = &self.maps[k];
                    let off = self.offsets[k];
                    let ranges: Vec<_> = map.block_params().collect();
                    for (b, rr) in ranges.into_iter().rev() {
                        slot -= 1;
                        let input = &tape[slot * d..(slot + 1) * d];
                        let g = &mut gp[off + rr.start..off + rr.end];
                        b.forward_vjp(&map.params[rr], &map.scale, input, &xbar, 0.0, &mut below, g, &mut sc);
                        std::mem::swap(&mut xbar, &mut below);
                    }
                    for (a, v) in xbar.iter_mut().zip(c(k)) {
                        *a += v;
                    }
                }
            }
            gp
        });
        reduce_into(grad, &parts);
    }

    /// Handle on `μ_{t_n}`.
    pub fn marginal(&self, n: usize) -> Result<Marginal<'_>> {
        self.check_step(n)?;
        Ok(Marginal { flow: self, step: n })
    }

    /// Handle on the terminal marginal `μ̂_T`.
    pub fn terminal_density(&self) -> Marginal<'_> {
        Marginal {
            flow: self,
            step: self.steps(),
        }
    }

    /// Riemann sum of `μ_{t_n}` on a cell-centered lattice of `working_box`.
    pub fn quadrature_mass(&self, n: usize, working_box: &WorkingBox, points_per_axis: usize) -> Result<f64> {
        let d = self.dim();
        let pts = vec![points_per_axis; d];
        let lattice: Vec<f64> = working_box.lattice(&pts).concat();
        let logs = self.log_density_batch(&lattice, n)?;
        Ok(crate::exec::compensated_sum(logs.iter().map(|l| l.exp())) * working_box.cell_volume(&pts))
    }

    pub fn to_json(&self) -> String {
        let ck = FlowCheckpoint {
            schema_version: SCHEMA_VERSION,
            kind: "density_flow".into(),
            dim: self.dim(),
            steps: self.steps(),
            base: self.base.clone(),
            config: self.config.clone(),
            maps: self.maps.clone(),
        };
        serde_json::to_string(&ck).expect("flow serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: FlowCheckpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("flow: {e}")))?;
        if ck.schema_version != SCHEMA_VERSION || ck.kind != "density_flow" {
            return Err(Error::Checkpoint(format!(
                "unsupported flow checkpoint {} v{}",
                ck.kind, ck.schema_version
            )));
        }
        if ck.maps.len() != ck.steps || ck.base.dim() != ck.dim {
            return Err(Error::Checkpoint("flow checkpoint header disagrees with its maps".into()));
        }
        for (k, m) in ck.maps.iter().enumerate() {
            let expected: usize = m.blocks.iter().map(Block::param_len).sum();
            if m.params.len() != expected || m.dim() != ck.dim || m.blocks.iter().any(|b| b.dim != ck.dim) {
                return Err(Error::Checkpoint(format!("map {k} has an inconsistent layout")));
            }
        }
        Ok(Self::from_maps(ck.base, ck.maps, ck.config))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Borrowed view of one marginal of a [`DensityFlow`].
#[derive(Clone, Copy)]
pub struct Marginal<'a> {
    flow: &'a DensityFlow,
    step: usize,
}

impl Marginal<'_> {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.flow.log_density(x, self.step).expect("step checked at construction")
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    pub fn sample(&self, m: usize, seed: u64) -> Vec<f64> {
        self.flow.push_samples(self.step, m, seed).expect("step checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_box() -> WorkingBox {
        WorkingBox::new(vec![-4.0, -4.0], vec![4.0, 4.0])
    }

    fn std_base(d: usize) -> Gaussian {
        Gaussian {
            mean: vec![0.0; d],
            std: 1.0,
        }
    }

    /// Flow with randomized (non-identity) parameters.
    fn random_flow(steps: usize, seed: u64) -> DensityFlow {
        let mut f = DensityFlow::new(
            Gaussian {
                mean: vec![0.5, -0.3],
                std: 0.7,
            },
            &test_box(),
            steps,
            FlowConfig {
                width: 6,
                ..FlowConfig::default()
            },
            seed,
        );
        let mut rng = stream_rng(seed, 99);
        let p: Vec<f64> = f.params().iter().map(|v| v + 0.15 * rng.random_range(-1.0..1.0)).collect();
        f.set_params(&p).unwrap();
        f
    }

    #[test]
    fn identity_flow_at_origin_gives_standard_gaussian_mode() {
        let f = DensityFlow::new(std_base(2), &test_box(), 5, FlowConfig::default(), 1);
        for n in 0..=5 {
            let l = f.log_density(&[0.0, 0.0], n).unwrap();
            assert!((l + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        }
        assert!((f.log_density(&[0.0, 0.0], 0).unwrap() + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn doubling_map_halves_the_density() {
        let scale = FlowScale {
            center: vec![0.0],
            length: 1.0,
            clamp: 2.0,
        };
        let map = TransitionMap::affine(&[2f64.ln()], &[0.0], scale);
        let f = DensityFlow::from_maps(std_base(1), vec![map], FlowConfig::default());
        let expected = (1.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt())).ln();
        assert!((f.log_density(&[0.0], 1).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn maps_invert_within_tolerance() {
        let f = random_flow(3, 7);
        let mut rng = stream_rng(3, 0);
        let mut sc = Scratch::default();
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            for map in f.maps() {
                let mut y = [0.0; 2];
                let mut back = [0.0; 2];
                map.forward(&x, &mut y, &mut sc);
                map.inverse(&y, &mut back, &mut sc);
                worst = worst.max((back[0] - x[0]).abs().max((back[1] - x[1]).abs()));
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn log_det_matches_finite_difference_jacobian() {
        let f = random_flow(2, 11);
        let mut rng = stream_rng(4, 0);
        let mut sc = Scratch::default();
        let h = 1e-6;
        for _ in 0..100 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            for map in f.maps() {
                let mut y = [0.0; 2];
                let ld = map.forward(&x, &mut y, &mut sc);
                let mut jac = [[0.0; 2]; 2];
                for j in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    let mut yp = [0.0; 2];
                    let mut ym = [0.0; 2];
                    map.forward(&xp, &mut yp, &mut sc);
                    map.forward(&xm, &mut ym, &mut sc);
                    for i in 0..2 {
                        jac[i][j] = (yp[i] - ym[i]) / (2.0 * h);
                    }
                }
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                let rel = (det.abs() - ld.exp()).abs() / ld.exp();
                assert!(rel <= 1e-3, "{rel}");
            }
        }
    }

    #[test]
    fn every_marginal_integrates_to_one() {
        let f = random_flow(3, 5);
        let wide = WorkingBox::new(vec![-8.0, -8.0], vec![8.0, 8.0]);
        for n in 0..=3 {
            let mass = f.quadrature_mass(n, &wide, 200).unwrap();
            assert!((mass - 1.0).abs() <= 10f64.powf(-1.25), "step {n}: {mass}");
        }
    }

    #[test]
    fn full_inversion_equals_incremental_accumulation() {
        let f = random_flow(4, 9);
        let mut sc = Scratch::default();
        let y = [0.8, -1.1];
        let full = f.log_density(&y, 4).unwrap();
        let mut cur = y.to_vec();
        let mut acc = 0.0;
        for map in f.maps().iter().rev() {
            let mut prev = vec![0.0; 2];
            acc += map.inverse(&cur, &mut prev, &mut sc);
            cur = prev;
        }
        let incremental = f.base().log_pdf(&cur) - acc;
        assert!((full - incremental).abs() < 1e-12);
    }

    #[test]
    fn step_zero_is_the_base_and_seeds_are_deterministic() {
        let f = random_flow(3, 2);
        let s0 = f.push_samples(0, 50, 17).unwrap();
        assert_eq!(s0, f.sample_base(50, 17));
        let a = f.push_samples(3, 50, 17).unwrap();
        let b = f.push_samples(3, 50, 17).unwrap();
        assert_eq!(a, b);
        assert!(f.push_samples(4, 5, 0).is_err());
        let x = [0.3, 0.2];
        assert!((f.log_density(&x, 0).unwrap() - f.base().log_pdf(&x)).abs() == 0.0);
    }

    #[test]
    fn base_sample_mean_is_close_to_zero() {
        let f = DensityFlow::new(std_base(2), &test_box(), 1, FlowConfig::default(), 0);
        let s = f.push_samples(0, 100_000, 3).unwrap();
        let m = crate::mfg::sample_mean(&s, 2);
        assert!(m[0].abs() < 0.02 && m[1].abs() < 0.02, "{m:?}");
    }

    #[test]
    fn identity_maps_keep_the_base_law() {
        let f = DensityFlow::new(std_base(2), &test_box(), 4, FlowConfig::default(), 0);
        let a = f.push_samples(4, 2000, 8).unwrap();
        let b = f.push_samples(0, 2000, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_and_trajectories_agree() {
        let f = random_flow(3, 4);
        let base = f.sample_base(10, 1);
        let traj = f.trajectories(&base);
        for n in 0..=3 {
            let pushed = f.push_points(&base, n);
            assert_eq!(&traj[n * 20..(n + 1) * 20], &pushed[..]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let f = random_flow(2, 21);
        let points = [0.4, -0.2, -1.0, 0.9, 1.5, 0.3];
        let weights = [0.5, 1.0, -0.7];
        let base = [0.1, 0.2, -0.6, 0.4];
        let cot: Vec<f64> = (0..3 * 2 * 2).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();

        let nll = |fl: &DensityFlow| {
            let mut g = vec![0.0; fl.param_len()];
            fl.weighted_log_density_grad(&points, &weights, 2, &mut g).unwrap()
        };
        let pushed = |fl: &DensityFlow| {
            fl.trajectories(&base).iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g1 = vec![0.0; f.param_len()];
        f.weighted_log_density_grad(&points, &weights, 2, &mut g1).unwrap();
        let mut g2 = vec![0.0; f.param_len()];
        f.trajectory_vjp(&base, &cot, &mut g2);

        let p = f.params();
        let h = 1e-6;
        for k in (0..p.len()).step_by(3) {
            let mut fp = f.clone();
            let mut fm = f.clone();
            let mut pp = p.clone();
            pp[k] += h;
            fp.set_params(&pp).unwrap();
            pp[k] -= 2.0 * h;
            fm.set_params(&pp).unwrap();
            let fd1 = (nll(&fp) - nll(&fm)) / (2.0 * h);
            let fd2 = (pushed(&fp) - pushed(&fm)) / (2.0 * h);
            assert!((fd1 - g1[k]).abs() < 1e-5 * (1.0 + fd1.abs()), "nll param {k}: {fd1} vs {}", g1[k]);
            assert!((fd2 - g2[k]).abs() < 1e-5 * (1.0 + fd2.abs()), "push param {k}: {fd2} vs {}", g2[k]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let f = random_flow(3, 13);
        let x = [0.3, -0.8];
        let mut g = [0.0; 2];
        f.log_density_grad(&x, 3, &mut g).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (f.log_density(&xp, 3).unwrap() - f.log_density(&xm, 3).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let f = random_flow(3, 6);
        let s = f.clone().with_exec(Exec::Sequential);
        let p = f.clone().with_exec(Exec::Parallel);
        assert_eq!(s.push_samples(3, 300, 2).unwrap(), p.push_samples(3, 300, 2).unwrap());
        let pts = s.push_samples(2, 300, 4).unwrap();
        let w = vec![1.0; 300];
        let mut gs = vec![0.0; f.param_len()];
        let mut gpar = vec![0.0; f.param_len()];
        let vs = s.weighted_log_density_grad(&pts, &w, 3, &mut gs).unwrap();
        let vp = p.weighted_log_density_grad(&pts, &w, 3, &mut gpar).unwrap();
        assert_eq!(vs.to_bits(), vp.to_bits());
        assert_eq!(gs, gpar);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let f = random_flow(3, 8);
        let g = DensityFlow::from_json(&f.to_json()).unwrap();
        let x = [0.1, 0.7];
        assert_eq!(f.log_density(&x, 3).unwrap().to_bits(), g.log_density(&x, 3).unwrap().to_bits());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.json");
        f.save(&path).unwrap();
        assert_eq!(DensityFlow::load(&path).unwrap(), f);
        let broken = f.to_json().replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(DensityFlow::from_json(&broken).is_err());
    }
}
