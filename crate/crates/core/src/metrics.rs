//! Evaluation measures: wall-clock solve time, collision-avoidance success
//! rate, and mass invariance `log₁₀ max_n |∫μ_{t_n} − 1|`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{compensated_mean, compensated_sum, Exec};
use crate::flow::DensityFlow;
use crate::io::write_atomic;
use crate::mfg::{Obstacle, WorkingBox};

pub const DEFAULT_PAIR_RADIUS: f64 = 0.1;

/// Deviations below this floor are reported at the floor.
pub const DEVIATION_FLOOR: f64 = 1e-16;

/// Fraction of agents that never enter an obstacle and never come within
/// `pair_radius` of another agent.
///
/// `traj` is laid out `[(N+1)][M][d]`, as returned by
/// [`DensityFlow::trajectories`].
pub fn collision_success_rate(traj: &[f64], agents: usize, dim: usize, obstacles: &[Obstacle], pair_radius: f64, exec: Exec) -> Result<f64> {
    if agents == 0 || dim == 0 || traj.len() % (agents * dim) != 0 {
        return Err(Error::Incompatible(format!("{} trajectory values for {agents} agents in dimension {dim}", traj.len())));
    }
    if traj.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trajectories".into()));
    }
    let levels = traj.len() / (agents * dim);
    let failed_per_level = exec.map(levels, |n| {
        let pts = &traj[n * agents * dim..(n + 1) * agents * dim];
        let mut failed = vec![false; agents];
        for (i, x) in pts.chunks(dim).enumerate() {
            if obstacles.iter().any(|o| o.contains(x)) {
                failed[i] = true;
            }
        }
        // sweep along the first axis
        let mut order: Vec<usize> = (0..agents).collect();
        order.sort_by(|&a, &b| pts[a * dim].total_cmp(&pts[b * dim]));
        let r2 = pair_radius * pair_radius;
        for (k, &i) in order.iter().enumerate() {
            let xi = &pts[i * dim..(i + 1) * dim];
            for &j in &order[k + 1..] {
                let xj = &pts[j * dim..(j + 1) * dim];
                if xj[0] - xi[0] > pair_radius {
                    break;
                }
                let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < r2 || (pair_radius > 0.0 && d2 == 0.0) {
                    failed[i] = true;
                    failed[j] = true;
                }
            }
        }
        failed
    });
    let mut failed = vec![false; agents];
    for level in failed_per_level {
        for (f, g) in failed.iter_mut().zip(level) {
            *f |= g;
        }
    }
    Ok(failed.iter().filter(|f| !**f).count() as f64 / agents as f64)
}

/// Per-level quadrature masses and the aggregated deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub masses: Vec<f64>,
    /// `log₁₀ max_n |mass_n − 1|`, floored at [`DEVIATION_FLOOR`].
    pub log10_max: f64,
}

impl VolumeReport {
    pub fn from_masses(masses: Vec<f64>) -> Self {
        let worst = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
        let log10_max = if worst.is_finite() { worst.max(DEVIATION_FLOOR).log10() } else { f64::MAX };
        Self { masses, log10_max }
    }
}

fn check_resolution(working_box: &WorkingBox, per_axis: usize, init_std: f64) -> Result<()> {
    let limit = init_std / 2.0;
    let cell = (0..working_box.dim()).map(|k| working_box.width(k) / per_axis.max(1) as f64).fold(0.0, f64::max);
    if per_axis == 0 || cell > limit {
        return Err(Error::CoarseGrid { cell, limit });
    }
    Ok(())
}

/// Midpoint quadrature of `density(n, x)` for `n` in `levels` on a
/// `per_axis^d` lattice. Cells wider than `init_std / 2` are rejected.
pub fn volume_invariance(
    density: impl Fn(usize, &[f64]) -> f64 + Sync,
    levels: &[usize],
    working_box: &WorkingBox,
    per_axis: usize,
    init_std: f64,
    exec: Exec,
) -> Result<VolumeReport> {
    check_resolution(working_box, per_axis, init_std)?;
    let pts = vec![per_axis; working_box.dim()];
    let lattice = working_box.lattice(&pts);
    let vol = working_box.cell_volume(&pts);
    let masses = levels
        .iter()
        .map(|&n| {
            let parts = exec.map_chunks(lattice.len(), |r| compensated_sum(r.map(|j| density(n, &lattice[j]))));
            compensated_sum(parts) * vol
        })
        .collect();
    Ok(VolumeReport::from_masses(masses))
}

/// [`volume_invariance`] of every marginal `n = 0..=N` of a flow.
pub fn flow_volume_invariance(flow: &DensityFlow, working_box: &WorkingBox, per_axis: usize) -> Result<VolumeReport> {
    let levels: Vec<usize> = (0..=flow.steps()).collect();
    let seq = flow.clone().with_exec(Exec::Sequential);
    volume_invariance(
        |n, x| seq.log_density(x, n).map(f64::exp).unwrap_or(f64::NAN),
        &levels,
        working_box,
        per_axis,
        flow.base().std,
        flow.exec(),
    )
}

/// Deviation of precomputed lattice fields given their cell volume.
pub fn fields_volume_invariance(fields: &[Vec<f64>], cell_volume: f64) -> VolumeReport {
    VolumeReport::from_masses(fields.iter().map(|f| compensated_sum(f.iter().copied()) * cell_volume).collect())
}

/// Runs `f` and returns its result with the monotonic wall time in seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Mean and sample standard deviation of `reps` timings of `f`.
pub fn timing_spread(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    let t: Vec<f64> = (0..reps).map(|_| timed(&mut f).1).collect();
    let mean = compensated_mean(&t);
    let var = if t.len() > 1 {
        t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t.len() - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Table row for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub success_rate: f64,
    pub pair_radius: f64,
    pub agents: usize,
    pub volume_diff: f64,
    pub volume: VolumeReport,
    pub solve_seconds: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "scenario,success_rate,pair_radius,agents,volume_diff,solve_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{:.6},{:.3}",
            self.scenario, self.success_rate, self.pair_radius, self.agents, self.volume_diff, self.solve_seconds
        )
    }

    pub fn to_csv(reports: &[MetricsReport]) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn save_all(reports: &[MetricsReport], csv: &Path, json: &Path) -> Result<()> {
        write_atomic(csv, Self::to_csv(reports).as_bytes())?;
        write_atomic(json, serde_json::to_string_pretty(reports)?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::Gaussian;
    use proptest::prelude::*;

    fn lattice_traj(m: usize, levels: usize, spacing: f64) -> Vec<f64> {
        let mut t = Vec::new();
        for n in 0..levels {
            for i in 0..m {
                t.extend([i as f64 * spacing, n as f64 * 0.01]);
            }
        }
        t
    }

    #[test]
    fn far_apart_agents_without_obstacles_all_succeed() {
        let t = lattice_traj(10, 4, 1.0);
        assert_eq!(collision_success_rate(&t, 10, 2, &[], 0.1, Exec::Sequential).unwrap(), 1.0);
    }

    #[test]
    fn one_agent_through_an_obstacle_fails_alone() {
        let mut t = lattice_traj(10, 4, 1.0);
        // agent 3 passes the obstacle center at step 2
        t[(2 * 10 + 3) * 2] = 20.0;
        t[(2 * 10 + 3) * 2 + 1] = 20.0;
        let obs = [Obstacle::circle(&[20.0, 20.0], 0.5)];
        assert_eq!(collision_success_rate(&t, 10, 2, &obs, 0.1, Exec::Sequential).unwrap(), 0.9);
    }

    #[test]
    fn coincident_agents_both_fail() {
        let mut t = lattice_traj(10, 4, 1.0);
        t[(10 + 7) * 2] = t[(10 + 2) * 2];
        t[(10 + 7) * 2 + 1] = t[(10 + 2) * 2 + 1];
        assert_eq!(collision_success_rate(&t, 10, 2, &[], 0.1, Exec::Sequential).unwrap(), 0.8);
    }

    proptest! {
        #[test]
        fn success_rate_ignores_agent_order(seed in 0u64..1000, radius in 0.05f64..0.6) {
            use rand::{Rng, seq::SliceRandom};
            let mut rng = crate::exec::stream_rng(seed, 0);
            let (m, levels) = (30, 3);
            let t: Vec<f64> = (0..m * levels * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let mut p = vec![0.0; t.len()];
            for n in 0..levels {
                for (i, &j) in perm.iter().enumerate() {
                    p[(n * m + i) * 2..(n * m + i) * 2 + 2].copy_from_slice(&t[(n * m + j) * 2..(n * m + j) * 2 + 2]);
                }
            }
            let obs = [Obstacle::circle(&[0.0, 0.0], 0.5)];
            let a = collision_success_rate(&t, m, 2, &obs, radius, Exec::Sequential).unwrap();
            let b = collision_success_rate(&p, m, 2, &obs, radius, Exec::Sequential).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn sweep_matches_brute_force_pairs() {
        use rand::Rng;
        let mut rng = crate::exec::stream_rng(5, 0);
        let m = 200;
        let t: Vec<f64> = (0..m * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = 0.05;
        let mut ok = vec![true; m];
        for i in 0..m {
            for j in 0..m {
                if i != j && (t[2 * i] - t[2 * j]).hypot(t[2 * i + 1] - t[2 * j + 1]) < r {
                    ok[i] = false;
                }
            }
        }
        let want = ok.iter().filter(|o| **o).count() as f64 / m as f64;
        assert_eq!(collision_success_rate(&t, m, 2, &[], r, Exec::Sequential).unwrap(), want);
    }

    fn std_normal() -> Gaussian {
        Gaussian {
            mean: vec![0.0, 0.0],
            std: 1.0,
        }
    }

    #[test]
    fn standard_gaussian_quadrature_is_nearly_exact() {
        let g = std_normal();
        let b = WorkingBox::new(vec![-6.0, -6.0], vec![6.0, 6.0]);
        let r = volume_invariance(|_, x| g.log_pdf(x).exp(), &[0], &b, 200, 1.0, Exec::Sequential).unwrap();
        assert!(r.log10_max <= -6.0, "{}", r.log10_max);
    }

    #[test]
    fn scaled_density_reports_its_excess() {
        let g = std_normal();
        let b = WorkingBox::new(vec![-6.0, -6.0], vec![6.0, 6.0]);
        let r = volume_invariance(|_, x| 1.1 * g.log_pdf(x).exp(), &[0, 1], &b, 200, 1.0, Exec::Sequential).unwrap();
        assert!((r.log10_max + 1.0).abs() < 1e-4, "{}", r.log10_max);
    }

    #[test]
    fn coarse_grids_are_rejected() {
        let b = WorkingBox::new(vec![-6.0, -6.0], vec![6.0, 6.0]);
        let err = volume_invariance(|_, _| 0.0, &[0], &b, 20, 1.0, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::CoarseGrid { .. }));
    }

    #[test]
    fn refinement_does_not_worsen_the_deviation() {
        let g = Gaussian {
            mean: vec![0.3, -0.2],
            std: 0.7,
        };
        let b = WorkingBox::new(vec![-5.0, -5.0], vec![5.0, 5.0]);
        let f = |_: usize, x: &[f64]| g.log_pdf(x).exp();
        let mut prev = f64::INFINITY;
        for p in [30, 60, 120, 240] {
            let r = volume_invariance(f, &[0], &b, p, g.std, Exec::Sequential).unwrap();
            let dev = (r.masses[0] - 1.0).abs();
            assert!(dev <= 2.0 * prev + 1e-15, "{p}: {dev} vs {prev}");
            prev = dev;
        }
    }

    #[test]
    fn zero_work_is_timed_near_zero() {
        let ((), s) = timed(|| ());
        assert!(s < 0.01);
        let (mean, sd) = timing_spread(5, || {});
        assert!(mean < 0.01 && sd >= 0.0);
    }

    #[test]
    fn csv_has_one_row_per_scenario() {
        let r = MetricsReport {
            scenario: "a".into(),
            success_rate: 0.5,
            pair_radius: 0.1,
            agents: 2,
            volume_diff: -3.0,
            volume: VolumeReport::from_masses(vec![1.001]),
            solve_seconds: 1.0,
        };
        let csv = MetricsReport::to_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
        assert!((VolumeReport::from_masses(vec![1.001]).log10_max + 3.0).abs() < 1e-9);
    }
}
