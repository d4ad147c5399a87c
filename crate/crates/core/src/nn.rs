//! Small numerical building blocks shared by the trainable models.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(10.0),
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        let scale = match self.clip {
            Some(c) => {
                let n = norm(grad);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            if !g.is_finite() {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fills `out` with N(0, scale²) draws.
pub fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64], scale: f64) {
    for o in out {
        let z: f64 = rng.sample(StandardNormal);
        *o = z * scale;
    }
}

/// tanh and its first three derivatives at `z`: (t, t', t'', t''').
#[inline]
pub fn tanh_derivs(z: f64) -> (f64, f64, f64, f64) {
    let t = z.tanh();
    let s = 1.0 - t * t;
    let s1 = -2.0 * t * s;
    let s2 = -2.0 * s * s + 4.0 * t * t * s;
    (t, s, s1, s2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_derivatives_match_finite_differences() {
        let h = 1e-5;
        for &z in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let (_, s, s1, s2) = tanh_derivs(z);
            let fd1 = ((z + h).tanh() - (z - h).tanh()) / (2.0 * h);
            let fd2 = (tanh_derivs(z + h).1 - tanh_derivs(z - h).1) / (2.0 * h);
            let fd3 = (tanh_derivs(z + h).2 - tanh_derivs(z - h).2) / (2.0 * h);
            assert!((s - fd1).abs() < 1e-8);
            assert!((s1 - fd2).abs() < 1e-8);
            assert!((s2 - fd3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 4.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(norm(&p) < 1e-2, "{p:?}");
    }
}
