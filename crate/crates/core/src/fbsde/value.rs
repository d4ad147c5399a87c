//! Value heads `u(t_n, ·)` with closed-form derivatives.
//!
//! Each head is
//!
//! ```text
//! u_n(x) = V [ k + b·ξ + ½ ξᵀAξ + Σ_j a_j tanh(w_j·ξ + β_j) ],   ξ = (x − c)/L,  V = L²,
//! ```
//!
//! so `Z_n = σ ∇u_n`, the Laplacian and `∇Δu_n` are all exact. The terminal
//! head is the terminal cost itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::{MfgProblem, TerminalCost};
use crate::nn::tanh_derivs;

const SCHEMA_VERSION: u32 = 1;

/// Access to `u(t_n, x)` and its spatial derivatives for `n = 0..=N`.
pub trait ValueField: Sync {
    fn dim(&self) -> usize;
    fn steps(&self) -> usize;
    /// Returns `(u, Δu)` and writes `∇u` into `grad`.
    fn eval(&self, n: usize, x: &[f64], grad: &mut [f64]) -> (f64, f64);
    /// Writes `∇Δu` into `out`.
    fn grad_laplacian(&self, n: usize, x: &[f64], out: &mut [f64]);
    /// Writes `∇²u v` into `out`.
    fn hess_vec(&self, n: usize, x: &[f64], v: &[f64], out: &mut [f64]);
}

/// Parameter layout of one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub dim: usize,
    pub hidden: usize,
}

impl HeadLayout {
    fn sym_len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn len(&self) -> usize {
        1 + self.dim + self.sym_len() + self.hidden * (self.dim + 2)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn b(&self) -> usize {
        1
    }

    fn a(&self) -> usize {
        1 + self.dim
    }

    fn hidden_off(&self) -> usize {
        1 + self.dim + self.sym_len()
    }

    /// Index of `A_{kl}` (`k ≤ l`) in the packed upper triangle.
    fn sym(&self, k: usize, l: usize) -> usize {
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        k * self.dim - k * (k + 1) / 2 + l
    }
}

/// Read-only view of a head's parameters.
pub struct Head<'a> {
    pub layout: HeadLayout,
    pub p: &'a [f64],
    pub center: &'a [f64],
    pub length: f64,
}

impl Head<'_> {
    fn xi(&self, x: &[f64], xi: &mut [f64]) {
        for k in 0..self.layout.dim {
            xi[k] = (x[k] - self.center[k]) / self.length;
        }
    }

    fn a_mat(&self, k: usize, l: usize) -> f64 {
        self.p[self.layout.a() + self.layout.sym(k, l)]
    }

    fn unit(&self, j: usize) -> (&[f64], f64, f64) {
        let d = self.layout.dim;
        let off = self.layout.hidden_off() + j * (d + 2);
        (&self.p[off..off + d], self.p[off + d], self.p[off + d + 1])
    }

    /// Returns `(u, Δu)`, writes `∇u`.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        let d = self.layout.dim;
        let l = self.length;
        let mut xi = [0.0; 8];
        let xi = &mut xi[..d];
        self.xi(x, xi);
        let b = &self.p[self.layout.b()..self.layout.b() + d];
        let mut u = self.p[0];
        let mut lap = 0.0;
        for k in 0..d {
            u += b[k] * xi[k];
            let mut axi = 0.0;
            for m in 0..d {
                axi += self.a_mat(k, m) * xi[m];
            }
            u += 0.5 * xi[k] * axi;
            grad[k] = b[k] + axi;
            lap += self.a_mat(k, k);
        }
        for j in 0..self.layout.hidden {
            let (w, beta, a) = self.unit(j);
            let z = beta + w.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>();
            let (t, s, s1, _) = tanh_derivs(z);
            u += a * t;
            let w2: f64 = w.iter().map(|v| v * v).sum();
            lap += a * s1 * w2;
            for k in 0..d {
                grad[k] += a * s * w[k];
            }
        }
        for g in grad.iter_mut() {
            *g *= l;
        }
        (l * l * u, lap)
    }

    pub fn grad_laplacian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.layout.dim;
        let mut xi = [0.0; 8];
        let xi = &mut xi[..d];
        self.xi(x, xi);
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..self.layout.hidden {
            let (w, beta, a) = self.unit(j);
            let z = beta + w.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>();
            let (_, _, _, s2) = tanh_derivs(z);
            let w2: f64 = w.iter().map(|v| v * v).sum();
            for k in 0..d {
                out[k] += a * s2 * w2 * w[k] / self.length;
            }
        }
    }

    pub fn hess_vec(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.layout.dim;
        let mut xi = [0.0; 8];
        let xi = &mut xi[..d];
        self.xi(x, xi);
        for k in 0..d {
            out[k] = (0..d).map(|m| self.a_mat(k, m) * v[m]).sum();
        }
        for j in 0..self.layout.hidden {
            let (w, beta, a) = self.unit(j);
            let z = beta + w.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>();
            let (_, _, s1, _) = tanh_derivs(z);
            let wv: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
            for k in 0..d {
                out[k] += a * s1 * wv * w[k];
            }
        }
    }

    /// Adds `scale ∂u(x)/∂p` into `gp`.
    pub fn value_vjp(&self, x: &[f64], scale: f64, gp: &mut [f64]) {
        let d = self.layout.dim;
        let v = scale * self.length * self.length;
        let mut xi = [0.0; 8];
        let xi = &mut xi[..d];
        self.xi(x, xi);
        gp[0] += v;
        for k in 0..d {
            gp[self.layout.b() + k] += v * xi[k];
            for m in k..d {
                let f = if k == m { 0.5 } else { 1.0 };
                gp[self.layout.a() + self.layout.sym(k, m)] += v * f * xi[k] * xi[m];
            }
        }
        for j in 0..self.layout.hidden {
            let off = self.layout.hidden_off() + j * (d + 2);
            let (w, beta, a) = self.unit(j);
            let z = beta + w.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>();
            let (t, s, _, _) = tanh_derivs(z);
            for k in 0..d {
                gp[off + k] += v * a * s * xi[k];
            }
            gp[off + d] += v * a * s;
            gp[off + d + 1] += v * t;
        }
    }

    /// Adds `scale ∂(dir·∇u(x))/∂p` into `gp`.
    pub fn grad_dot_vjp(&self, x: &[f64], dir: &[f64], scale: f64, gp: &mut [f64]) {
        let d = self.layout.dim;
        let c = scale * self.length;
        let mut xi = [0.0; 8];
        let xi = &mut xi[..d];
        self.xi(x, xi);
        for k in 0..d {
            gp[self.layout.b() + k] += c * dir[k];
            for m in k..d {
                let g = if k == m {
                    dir[k] * xi[k]
                } else {
                    dir[k] * xi[m] + dir[m] * xi[k]
                };
                gp[self.layout.a() + self.layout.sym(k, m)] += c * g;
            }
        }
        for j in 0..self.layout.hidden {
            let off = self.layout.hidden_off() + j * (d + 2);
            let (w, beta, a) = self.unit(j);
            let z = beta + w.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>();
            let (_, s, s1, _) = tanh_derivs(z);
            let wv: f64 = w.iter().zip(dir).map(|(a, b)| a * b).sum();
            for k in 0..d {
                gp[off + k] += c * a * (s1 * wv * xi[k] + s * dir[k]);
            }
            gp[off + d] += c * a * s1 * wv;
            gp[off + d + 1] += c * s * wv;
        }
    }
}

/// Value heads for `t_0, …, t_{N-1}`; the head at `t_N` is the terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePath {
    layout: HeadLayout,
    steps: usize,
    horizon: f64,
    pub sigma: f64,
    center: Vec<f64>,
    length: f64,
    terminal: TerminalCost,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueCheckpoint {
    schema_version: u32,
    kind: String,
    layout: HeadLayout,
    steps: usize,
    horizon: f64,
    sigma: f64,
    center: Vec<f64>,
    length: f64,
    terminal: TerminalCost,
    params: Vec<f64>,
}

impl ValuePath {
    /// Heads initialized at the solution of the problem with `f ≡ 0`,
    /// `u(t, x) = a(t)|x − x_T|² + (νd/c) ln(1 + 2c(T−t))` with
    /// `a(t) = 1/(1 + 2c(T−t))`; hidden units start with zero output weight.
    pub fn new(problem: &MfgProblem, hidden: usize, seed: u64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let d = problem.dim;
        assert!(d <= 8, "value heads support up to 8 dimensions");
        let layout = HeadLayout { dim: d, hidden };
        let center = problem.working_box.center();
        let length = problem.working_box.half_extent();
        let c = problem.hamiltonian.scale();
        let nu = problem.viscosity();
        let target = problem.terminal.target();
        let delta: Vec<f64> = (0..d).map(|k| (target[k] - center[k]) / length).collect();
        let mut rng = crate::exec::stream_rng(seed, 0);
        let mut params = Vec::with_capacity(layout.len() * problem.steps);
        for n in 0..problem.steps {
            let tau = problem.horizon - problem.time(n);
            let a = 1.0 / (1.0 + 2.0 * c * tau);
            let k = nu * d as f64 / c * (1.0 + 2.0 * c * tau).ln();
            let mut p = vec![0.0; layout.len()];
            p[0] = a * delta.iter().map(|v| v * v).sum::<f64>() + k / (length * length);
            for i in 0..d {
                p[layout.b() + i] = -2.0 * a * delta[i];
                p[layout.a() + layout.sym(i, i)] = 2.0 * a;
            }
            for j in 0..hidden {
                let off = layout.hidden_off() + j * (d + 2);
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p[off + i] = 2.0 * z / (d as f64).sqrt();
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                p[off + d] = z;
            }
            params.extend(p);
        }
        Self {
            layout,
            steps: problem.steps,
            horizon: problem.horizon,
            sigma: problem.sigma,
            center,
            length,
            terminal: problem.terminal.clone(),
            params,
        }
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn param_norm(&self) -> f64 {
        crate::nn::norm(&self.params)
    }

    /// Normalization volume `V = L²` of every head.
    pub fn value_scale(&self) -> f64 {
        self.length * self.length
    }

    pub fn head_range(&self, n: usize) -> std::ops::Range<usize> {
        n * self.layout.len()..(n + 1) * self.layout.len()
    }

    /// Head `n < N`.
    pub fn head(&self, n: usize) -> Head<'_> {
        Head {
            layout: self.layout,
            p: &self.params[self.head_range(n)],
            center: &self.center,
            length: self.length,
        }
    }

    /// `u(0, x)`.
    pub fn u0(&self, x: &[f64]) -> f64 {
        let mut g = [0.0; 8];
        self.head(0).eval(x, &mut g[..self.layout.dim]).0
    }

    /// `Z_n = σ ∇u_n(x)`.
    pub fn z(&self, n: usize, x: &[f64], out: &mut [f64]) {
        self.eval(n, x, out);
        for o in out.iter_mut() {
            *o *= self.sigma;
        }
    }

    /// Feedback control `α̂ = −c ∇u` clipped to norm `alpha_max`.
    pub fn control(&self, n: usize, x: &[f64], scale: f64, alpha_max: f64, out: &mut [f64]) {
        self.eval(n, x, out);
        feedback(out, scale, alpha_max);
    }

    /// Shifts the constant of head `n` so `u_n` moves by `delta`.
    pub fn shift_head(&mut self, n: usize, delta: f64) {
        let r = self.head_range(n);
        let v = self.value_scale();
        self.params[r.start] += delta / v;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ValueCheckpoint {
            schema_version: SCHEMA_VERSION,
            kind: "value_path".into(),
            layout: self.layout,
            steps: self.steps,
            horizon: self.horizon,
            sigma: self.sigma,
            center: self.center.clone(),
            length: self.length,
            terminal: self.terminal.clone(),
            params: self.params.clone(),
        })
        .expect("value path serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: ValueCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("value path: {e}")))?;
        if ck.schema_version != SCHEMA_VERSION || ck.kind != "value_path" {
            return Err(Error::Checkpoint(format!(
                "unsupported value checkpoint {} v{}",
                ck.kind, ck.schema_version
            )));
        }
        if ck.params.len() != ck.layout.len() * ck.steps || ck.center.len() != ck.layout.dim {
            return Err(Error::Checkpoint("value checkpoint has an inconsistent layout".into()));
        }
        Ok(Self {
            layout: ck.layout,
            steps: ck.steps,
            horizon: ck.horizon,
            sigma: ck.sigma,
            center: ck.center,
            length: ck.length,
            terminal: ck.terminal,
            params: ck.params,
        })
    }
}

/// Turns `∇u` in `p` into the clipped feedback `−c ∇u` in place.
pub(crate) fn feedback(p: &mut [f64], scale: f64, alpha_max: f64) {
    let mut n2 = 0.0;
    for v in p.iter_mut() {
        *v *= -scale;
        n2 += *v * *v;
    }
    let n = n2.sqrt();
    if n > alpha_max {
        let r = alpha_max / n;
        p.iter_mut().for_each(|v| *v *= r);
    }
}

impl ValueField for ValuePath {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn eval(&self, n: usize, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        if n == self.steps {
            self.terminal.grad(x, grad);
            (self.terminal.value(x), self.terminal.laplacian(x))
        } else {
            self.head(n).eval(x, grad)
        }
    }

    fn grad_laplacian(&self, n: usize, x: &[f64], out: &mut [f64]) {
        if n == self.steps {
            out.iter_mut().for_each(|o| *o = 0.0);
        } else {
            self.head(n).grad_laplacian(x, out)
        }
    }

    fn hess_vec(&self, n: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        if n == self.steps {
            self.terminal.hess_vec(x, v, out)
        } else {
            self.head(n).hess_vec(x, v, out)
        }
    }
}
