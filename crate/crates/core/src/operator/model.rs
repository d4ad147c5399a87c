//! Spectral operator `G_θ(code, x) ∈ ℝ^N_{≥0}`.
//!
//! For a query `x` the input is the time-indexed feature sequence
//! `f_j = (code/s, x/s, t_{j+1}/T)`, `j = 0..N`. It is lifted to width `W`,
//! mixed by `L` layers
//!
//! ```text
//! v ← tanh( W_l v + b_l + F⁻¹[ R_l · F[v] ]_{k < K} )
//! ```
//!
//! where `F` is the real DFT along the time axis truncated to `K` modes and
//! `R_l` are complex `W × W` weights per mode, and projected per step to
//! `μ = exp(q₂·tanh(Q₁ v + q₁) + q₀)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{reduce_into, stream_rng, Exec};
use crate::io::write_atomic;
use crate::mfg::{BoundaryCode, CodeLayout};
use crate::nn::fill_normal;

const SCHEMA_VERSION: u32 = 1;
const RAW_MAX: f64 = 40.0;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorArch {
    pub width: usize,
    pub layers: usize,
    /// Retained frequency modes; capped at `N/2 + 1`.
    pub modes: usize,
    /// Output length `N`.
    pub steps: usize,
    /// Common length scale dividing code slots and query coordinates.
    pub feature_scale: f64,
}

impl Default for OperatorArch {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 4,
            modes: 12,
            steps: 20,
            feature_scale: 10.0,
        }
    }
}

impl OperatorArch {
    fn kept_modes(&self) -> usize {
        self.modes.min(self.steps / 2 + 1).max(1)
    }
}

/// Offsets of the parameter blocks.
#[derive(Debug, Clone, Copy)]
struct Shape {
    n: usize,
    w: usize,
    k: usize,
    input: usize,
    layers: usize,
}

impl Shape {
    fn new(arch: &OperatorArch, input: usize) -> Self {
        Self {
            n: arch.steps,
            w: arch.width,
            k: arch.kept_modes(),
            input,
            layers: arch.layers,
        }
    }

    fn lift(&self) -> usize {
        self.w * self.input + self.w
    }

    fn layer(&self) -> usize {
        self.w * self.w + self.w + 2 * self.k * self.w * self.w
    }

    fn layer_off(&self, l: usize) -> usize {
        self.lift() + l * self.layer()
    }

    fn proj_off(&self) -> usize {
        self.layer_off(self.layers)
    }

    fn len(&self) -> usize {
        self.proj_off() + self.w * self.w + self.w + self.w + 1
    }
}

/// Cosine/sine table `θ_{jk} = 2π jk/N` and inverse weights.
#[derive(Debug, Clone)]
struct Dft {
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// `w_k / N` with `w_0 = w_{N/2} = 1`, otherwise 2.
    inv: Vec<f64>,
}

impl Dft {
    fn new(n: usize, k: usize) -> Self {
        let mut cos = vec![0.0; n * k];
        let mut sin = vec![0.0; n * k];
        for j in 0..n {
            for m in 0..k {
                let th = 2.0 * std::f64::consts::PI * (j * m) as f64 / n as f64;
                cos[j * k + m] = th.cos();
                sin[j * k + m] = th.sin();
            }
        }
        let inv = (0..k)
            .map(|m| {
                let w = if m == 0 || 2 * m == n { 1.0 } else { 2.0 };
                w / n as f64
            })
            .collect();
        Self { cos, sin, inv }
    }
}

/// Trainable operator with a fixed code layout.
#[derive(Debug, Clone)]
pub struct OperatorModel {
    arch: OperatorArch,
    layout: CodeLayout,
    params: Vec<f64>,
    shape: Shape,
    dft: Dft,
    exec: Exec,
}

impl PartialEq for OperatorModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layout == other.layout && self.params == other.params
    }
}

/// Activations of one query kept for the backward pass.
struct Tape {
    feats: Vec<f64>,
    /// `v_0 … v_L`, each `N × W`.
    v: Vec<Vec<f64>>,
    /// DFT coefficients of `v_l`: real then imaginary, each `K × W`.
    a: Vec<(Vec<f64>, Vec<f64>)>,
    h: Vec<f64>,
    out: Vec<f64>,
}

impl OperatorModel {
    pub fn new(layout: CodeLayout, arch: OperatorArch, seed: u64) -> Result<Self> {
        if arch.width == 0 || arch.steps == 0 || !(arch.feature_scale > 0.0) {
            return Err(Error::Incompatible(format!("invalid operator architecture {arch:?}")));
        }
        let input = layout.len() + layout.dim + 1;
        let shape = Shape::new(&arch, input);
        let mut params = vec![0.0; shape.len()];
        let mut rng = stream_rng(seed, 0);
        let w = shape.w;
        fill_normal(&mut rng, &mut params[..w * input], (1.0 / input as f64).sqrt());
        for l in 0..shape.layers {
            let o = shape.layer_off(l);
            fill_normal(&mut rng, &mut params[o..o + w * w], (1.0 / w as f64).sqrt());
            let r = o + w * w + w;
            let scale = 1.0 / (w as f64 * (shape.k as f64).sqrt());
            for p in &mut params[r..r + 2 * shape.k * w * w] {
                *p = scale * (rng.random::<f64>() - 0.5);
            }
        }
        let o = shape.proj_off();
        fill_normal(&mut rng, &mut params[o..o + w * w], (1.0 / w as f64).sqrt());
        let q2 = o + w * w + w;
        fill_normal(&mut rng, &mut params[q2..q2 + w], 2.0 / (w as f64).sqrt());
        params[q2 + w] = -6.0;
        Ok(Self {
            arch,
            layout,
            params,
            dft: Dft::new(shape.n, shape.k),
            shape,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn arch(&self) -> &OperatorArch {
        &self.arch
    }

    pub fn layout(&self) -> &CodeLayout {
        &self.layout
    }

    pub fn steps(&self) -> usize {
        self.arch.steps
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
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

    pub(crate) fn check_code(&self, code: &BoundaryCode) -> Result<()> {
        if code.layout() != &self.layout {
            return Err(Error::LayoutMismatch {
                expected: self.layout.describe(),
                found: code.layout().describe(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_queries(&self, queries: &[f64]) -> Result<usize> {
        let d = self.dim();
        if queries.len() % d != 0 {
            return Err(Error::Incompatible(format!("{} query values for dimension {d}", queries.len())));
        }
        if queries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator query".into()));
        }
        Ok(queries.len() / d)
    }

    /// Densities `μ_{t_1..t_N}` at each query, row-major `M × N`.
    pub fn eval(&self, code: &BoundaryCode, queries: &[f64]) -> Result<Vec<f64>> {
        self.check_code(code)?;
        let m = self.check_queries(queries)?;
        let d = self.dim();
        let rows = self.exec.map(m, |i| self.forward(code.as_slice(), &queries[i * d..(i + 1) * d]).out);
        Ok(rows.concat())
    }

    fn features(&self, code: &[f64], x: &[f64]) -> Vec<f64> {
        let s = self.shape;
        let inv = 1.0 / self.arch.feature_scale;
        let mut f = Vec::with_capacity(s.n * s.input);
        for j in 0..s.n {
            f.extend(code.iter().map(|v| v * inv));
            f.extend(x.iter().map(|v| v * inv));
            f.push((j + 1) as f64 / s.n as f64);
        }
        f
    }

    fn forward(&self, code: &[f64], x: &[f64]) -> Tape {
        let s = self.shape;
        let (n, w, k) = (s.n, s.w, s.k);
        let p = &self.params;
        let feats = self.features(code, x);
        let mut v0 = vec![0.0; n * w];
        let pb = w * s.input;
        for j in 0..n {
            let f = &feats[j * s.input..(j + 1) * s.input];
            for o in 0..w {
                let row = &p[o * s.input..(o + 1) * s.input];
                v0[j * w + o] = p[pb + o] + row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut vs = vec![v0];
        let mut coefs = Vec::with_capacity(s.layers);
        for l in 0..s.layers {
            let v = vs.last().expect("lifted input");
            let off = s.layer_off(l);
            let (wl, rest) = p[off..off + s.layer()].split_at(w * w);
            let (bl, r) = rest.split_at(w);
            let (rre, rim) = r.split_at(k * w * w);
            let mut are = vec![0.0; k * w];
            let mut aim = vec![0.0; k * w];
            for j in 0..n {
                for m in 0..k {
                    let (c, sn) = (self.dft.cos[j * k + m], self.dft.sin[j * k + m]);
                    for ch in 0..w {
                        are[m * w + ch] += v[j * w + ch] * c;
                        aim[m * w + ch] -= v[j * w + ch] * sn;
                    }
                }
            }
            let mut cre = vec![0.0; k * w];
            let mut cim = vec![0.0; k * w];
            for m in 0..k {
                for o in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for ch in 0..w {
                        let idx = (m * w + o) * w + ch;
                        let (ar, ai) = (are[m * w + ch], aim[m * w + ch]);
                        sr += rre[idx] * ar - rim[idx] * ai;
                        si += rre[idx] * ai + rim[idx] * ar;
                    }
                    cre[m * w + o] = sr * self.dft.inv[m];
                    cim[m * w + o] = si * self.dft.inv[m];
                }
            }
            let mut next = vec![0.0; n * w];
            for j in 0..n {
                let vj = &v[j * w..(j + 1) * w];
                for o in 0..w {
                    let mut z = bl[o] + wl[o * w..(o + 1) * w].iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    for m in 0..k {
                        z += cre[m * w + o] * self.dft.cos[j * k + m] - cim[m * w + o] * self.dft.sin[j * k + m];
                    }
                    next[j * w + o] = z.tanh();
                }
            }
            coefs.push((are, aim));
            vs.push(next);
        }
        let po = s.proj_off();
        let (q1, rest) = p[po..].split_at(w * w);
        let (q1b, rest) = rest.split_at(w);
        let (q2, q0) = rest.split_at(w);
        let vl = vs.last().expect("layers");
        let mut h = vec![0.0; n * w];
        let mut out = vec![0.0; n];
        for j in 0..n {
            let vj = &vl[j * w..(j + 1) * w];
            let mut raw = q0[0];
            for o in 0..w {
                let z = q1b[o] + q1[o * w..(o + 1) * w].iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                let t = z.tanh();
                h[j * w + o] = t;
                raw += q2[o] * t;
            }
            out[j] = raw.min(RAW_MAX).exp();
        }
        Tape {
            feats,
            v: vs,
            a: coefs,
            h,
            out,
        }
    }

    /// Adds `Σ_j g_j ∂μ_j/∂θ` into `grad`.
    fn backward(&self, tape: &Tape, g_out: &[f64], grad: &mut [f64]) {
        let s = self.shape;
        let (n, w, k) = (s.n, s.w, s.k);
        let p = &self.params;
        let po = s.proj_off();
        let q1 = &p[po..po + w * w];
        let q2 = &p[po + w * w + w..po + w * w + 2 * w];
        let vl = tape.v.last().expect("layers");
        let mut dv = vec![0.0; n * w];
        for j in 0..n {
            let out = tape.out[j];
            if out >= RAW_MAX.exp() {
                continue;
            }
            let draw = g_out[j] * out;
            grad[po + w * w + 2 * w] += draw;
            for o in 0..w {
                let t = tape.h[j * w + o];
                grad[po + w * w + w + o] += draw * t;
                let dz = draw * q2[o] * (1.0 - t * t);
                grad[po + w * w + o] += dz;
                for c in 0..w {
                    grad[po + o * w + c] += dz * vl[j * w + c];
                    dv[j * w + c] += dz * q1[o * w + c];
                }
            }
        }
        for l in (0..s.layers).rev() {
            let off = s.layer_off(l);
            let wl = &p[off..off + w * w];
            let rre = &p[off + w * w + w..off + w * w + w + k * w * w];
            let rim = &p[off + w * w + w + k * w * w..off + s.layer()];
            let v = &tape.v[l];
            let next = &tape.v[l + 1];
            let (are, aim) = &tape.a[l];
            let mut dz = vec![0.0; n * w];
            for i in 0..n * w {
                dz[i] = dv[i] * (1.0 - next[i] * next[i]);
            }
            let mut dprev = vec![0.0; n * w];
            let mut dcre = vec![0.0; k * w];
            let mut dcim = vec![0.0; k * w];
            for j in 0..n {
                for o in 0..w {
                    let d = dz[j * w + o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[off + w * w + o] += d;
                    for c in 0..w {
                        grad[off + o * w + c] += d * v[j * w + c];
                        dprev[j * w + c] += d * wl[o * w + c];
                    }
                    for m in 0..k {
                        dcre[m * w + o] += d * self.dft.cos[j * k + m];
                        dcim[m * w + o] -= d * self.dft.sin[j * k + m];
                    }
                }
            }
            let mut dare = vec![0.0; k * w];
            let mut daim = vec![0.0; k * w];
            let gr = off + w * w + w;
            let gi = gr + k * w * w;
            for m in 0..k {
                let inv = self.dft.inv[m];
                for o in 0..w {
                    let (dr, di) = (dcre[m * w + o] * inv, dcim[m * w + o] * inv);
                    for c in 0..w {
                        let idx = (m * w + o) * w + c;
                        let (ar, ai) = (are[m * w + c], aim[m * w + c]);
                        grad[gr + idx] += dr * ar + di * ai;
                        grad[gi + idx] += -dr * ai + di * ar;
                        dare[m * w + c] += rre[idx] * dr + rim[idx] * di;
                        daim[m * w + c] += -rim[idx] * dr + rre[idx] * di;
                    }
                }
            }
            for j in 0..n {
                for m in 0..k {
                    let (c, sn) = (self.dft.cos[j * k + m], self.dft.sin[j * k + m]);
                    for ch in 0..w {
                        dprev[j * w + ch] += dare[m * w + ch] * c - daim[m * w + ch] * sn;
                    }
                }
            }
            dv = dprev;
        }
        let pb = w * s.input;
        for j in 0..n {
            let f = &tape.feats[j * s.input..(j + 1) * s.input];
            for o in 0..w {
                let d = dv[j * w + o];
                grad[pb + o] += d;
                for (i, fi) in f.iter().enumerate() {
                    grad[o * s.input + i] += d * fi;
                }
            }
        }
    }

    /// `(1/NM) Σ_i Σ_n (G(code, x_i)_n − target_{in})²` and, when `grad` is
    /// given, its gradient added into it.
    pub(crate) fn squared_error(
        &self,
        code: &BoundaryCode,
        queries: &[f64],
        targets: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_code(code)?;
        let m = self.check_queries(queries)?;
        let n = self.steps();
        if targets.len() != m * n {
            return Err(Error::Incompatible(format!("{} targets for {m} queries × {n} steps", targets.len())));
        }
        if m == 0 {
            return Ok(0.0);
        }
        let d = self.dim();
        let scale = 1.0 / (m * n) as f64;
        let want_grad = grad.is_some();
        let parts = self.exec.map_chunks(m, |range| {
            let mut g = if want_grad { vec![0.0; self.params.len()] } else { Vec::new() };
            let mut errs = Vec::with_capacity(range.len() * n);
            for i in range {
                let tape = self.forward(code.as_slice(), &queries[i * d..(i + 1) * d]);
                let t = &targets[i * n..(i + 1) * n];
                let resid: Vec<f64> = tape.out.iter().zip(t).map(|(a, b)| a - b).collect();
                errs.extend(resid.iter().map(|r| r * r));
                if want_grad {
                    let go: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
                    self.backward(&tape, &go, &mut g);
                }
            }
            (crate::exec::compensated_sum(errs), g)
        });
        let loss = crate::exec::compensated_sum(parts.iter().map(|p| p.0)) * scale;
        if let Some(grad) = grad {
            let gs: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
            let mut total = vec![0.0; grad.len()];
            reduce_into(&mut total, &gs);
            for (a, b) in grad.iter_mut().zip(&total) {
                *a += b;
            }
        }
        Ok(loss)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&OperatorCheckpoint {
            schema_version: SCHEMA_VERSION,
            kind: "operator".into(),
            layout: self.layout,
            arch: self.arch,
            params: self.params.clone(),
        })
        .expect("operator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: OperatorCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("operator: {e}")))?;
        if ck.schema_version != SCHEMA_VERSION || ck.kind != "operator" {
            return Err(Error::Checkpoint(format!("unsupported operator checkpoint {} v{}", ck.kind, ck.schema_version)));
        }
        let mut model = Self::new(ck.layout, ck.arch, 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "operator checkpoint holds {} parameters, architecture needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        if ck.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator checkpoint".into()));
        }
        model.params = ck.params;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    /// Loads a checkpoint, refusing one trained for a different code layout.
    pub fn load(path: &std::path::Path, layout: &CodeLayout) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model = Self::from_json(&text)?;
        if model.layout != *layout {
            return Err(Error::LayoutMismatch {
                expected: layout.describe(),
                found: model.layout.describe(),
            });
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct OperatorCheckpoint {
    schema_version: u32,
    kind: String,
    layout: CodeLayout,
    arch: OperatorArch,
    params: Vec<f64>,
}
