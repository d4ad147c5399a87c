use serde::{Deserialize, Serialize};

/// Obstacle with an analytic shape. Collisions are judged against the shape;
/// the running cost only sees the soft penalty around its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obstacle {
    Circle { center: Vec<f64>, radius: f64 },
    Ellipse { center: Vec<f64>, axes: Vec<f64> },
}

impl Obstacle {
    pub fn circle(center: &[f64], radius: f64) -> Self {
        Obstacle::Circle {
            center: center.to_vec(),
            radius,
        }
    }

    pub fn ellipse(center: &[f64], axes: &[f64]) -> Self {
        Obstacle::Ellipse {
            center: center.to_vec(),
            axes: axes.to_vec(),
        }
    }

    pub fn center(&self) -> &[f64] {
        match self {
            Obstacle::Circle { center, .. } | Obstacle::Ellipse { center, .. } => center,
        }
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    /// Half-extent of the shape along axis `k`.
    pub fn extent(&self, k: usize) -> f64 {
        match self {
            Obstacle::Circle { radius, .. } => *radius,
            Obstacle::Ellipse { axes, .. } => axes[k],
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite_center = self.center().iter().all(|c| c.is_finite());
        let sizes_ok = match self {
            Obstacle::Circle { radius, .. } => radius.is_finite() && *radius > 0.0,
            Obstacle::Ellipse { center, axes } => {
                axes.len() == center.len() && axes.iter().all(|a| a.is_finite() && *a > 0.0)
            }
        };
        finite_center && sizes_ok
    }

    /// Strict interior test against the analytic shape.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Obstacle::Circle { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                r2 < radius * radius
            }
            Obstacle::Ellipse { center, axes } => {
                let q: f64 = x
                    .iter()
                    .zip(center)
                    .zip(axes)
                    .map(|((a, c), s)| ((a - c) / s).powi(2))
                    .sum();
                q < 1.0
            }
        }
    }
}

/// Axis-aligned box used for quadrature, plotting and input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl WorkingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Largest half-width over the axes.
    pub fn half_extent(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(0.0, f64::max)
    }

    pub fn width(&self, k: usize) -> f64 {
        self.hi[k] - self.lo[k]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Cell-centered lattice with `points` cells per axis, row-major with the
    /// last axis fastest.
    pub fn lattice(&self, points: &[usize]) -> Vec<Vec<f64>> {
        let d = self.dim();
        assert_eq!(points.len(), d);
        let total: usize = points.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            out.push(
                (0..d)
                    .map(|k| {
                        let h = self.width(k) / points[k] as f64;
                        self.lo[k] + (idx[k] as f64 + 0.5) * h
                    })
                    .collect(),
            );
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < points[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }

    pub fn cell_volume(&self, points: &[usize]) -> f64 {
        (0..self.dim())
            .map(|k| self.width(k) / points[k] as f64)
            .product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment_is_exact_for_analytic_shapes() {
        let c = Obstacle::circle(&[0.0, 0.0], 2.0);
        assert!(c.contains(&[1.99, 0.0]));
        assert!(!c.contains(&[2.0, 0.0]));
        let e = Obstacle::ellipse(&[0.0, 3.0], &[1.5, 2.5]);
        assert!(e.contains(&[0.0, 0.51]));
        assert!(!e.contains(&[0.0, 0.5]));
        assert!(!e.contains(&[1.5, 3.0]));
    }

    #[test]
    fn lattice_is_cell_centered_row_major() {
        let b = WorkingBox::new(vec![0.0, 0.0], vec![2.0, 4.0]);
        let l = b.lattice(&[2, 2]);
        assert_eq!(l, vec![vec![0.5, 1.0], vec![0.5, 3.0], vec![1.5, 1.0], vec![1.5, 3.0]]);
        assert_eq!(b.cell_volume(&[2, 2]), 2.0);
    }
}
