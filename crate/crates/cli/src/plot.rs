//! Static agent-cloud snapshots at `t ∈ {0, 0.2, 0.4, 0.6, 0.8, 1}·T`,
//! three panels per row.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use pionm::mfg::{MfgProblem, Obstacle};

use crate::error::CliError;

pub const FRACTIONS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
const COLUMNS: u32 = 3;
const GAP: u32 = 6;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([120, 120, 120]);
const OBSTACLE: Rgb<u8> = Rgb([205, 205, 205]);
const AGENT: Rgb<u8> = Rgb([31, 90, 180]);
const TARGET: Rgb<u8> = Rgb([200, 30, 30]);

/// Step index nearest to `fraction · N`.
pub fn snapshot_step(fraction: f64, steps: usize) -> usize {
    ((fraction * steps as f64).round() as usize).min(steps)
}

/// Square view of the working box: `(center, half width)`.
fn view(problem: &MfgProblem) -> ([f64; 2], f64) {
    let b = &problem.working_box;
    if problem.dim == 1 {
        return ([0.5 * (b.lo[0] + b.hi[0]), 0.0], 0.5 * b.width(0));
    }
    let c = [0.5 * (b.lo[0] + b.hi[0]), 0.5 * (b.lo[1] + b.hi[1])];
    (c, 0.5 * b.width(0).max(b.width(1)))
}

/// Renders trajectories laid out `[(N+1)][M][d]`. Line problems put the
/// agent index on the vertical axis.
pub fn snapshot_grid(traj: &[f64], agents: usize, problem: &MfgProblem, obstacles: &[Obstacle], panel: u32) -> Result<RgbImage, CliError> {
    let d = problem.dim;
    if d > 2 {
        return Err(CliError::Schema(format!("plots cover 1-d and 2-d problems, got {d}-d")));
    }
    let n_steps = problem.steps;
    if traj.len() != (n_steps + 1) * agents * d {
        return Err(CliError::Schema("trajectory shape does not match the problem".into()));
    }
    let rows = (FRACTIONS.len() as u32).div_ceil(COLUMNS);
    let width = COLUMNS * panel + (COLUMNS + 1) * GAP;
    let height = rows * panel + (rows + 1) * GAP;
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let (c, half) = view(problem);
    let scale = panel as f64 / (2.0 * half);
    let to_world = |px: u32, py: u32| -> [f64; 2] {
        [c[0] - half + (px as f64 + 0.5) / scale, c[1] + half - (py as f64 + 0.5) / scale]
    };
    let to_pixel = |x: f64, y: f64| -> Option<(u32, u32)> {
        let px = ((x - (c[0] - half)) * scale).floor();
        let py = (((c[1] + half) - y) * scale).floor();
        (px >= 0.0 && py >= 0.0 && px < panel as f64 && py < panel as f64).then_some((px as u32, py as u32))
    };
    let target = problem.terminal.target().to_vec();
    for (k, &frac) in FRACTIONS.iter().enumerate() {
        let ox = GAP + (k as u32 % COLUMNS) * (panel + GAP);
        let oy = GAP + (k as u32 / COLUMNS) * (panel + GAP);
        let mut put = |px: u32, py: u32, color: Rgb<u8>| {
            if px < panel && py < panel {
                img.put_pixel(ox + px, oy + py, color);
            }
        };
        if d == 2 {
            for py in 0..panel {
                for px in 0..panel {
                    let w = to_world(px, py);
                    if obstacles.iter().any(|o| o.contains(&w)) {
                        put(px, py, OBSTACLE);
                    }
                }
            }
        }
        for i in 0..panel {
            put(i, 0, FRAME);
            put(i, panel - 1, FRAME);
            put(0, i, FRAME);
            put(panel - 1, i, FRAME);
        }
        let n = snapshot_step(frac, n_steps);
        let layer = &traj[n * agents * d..(n + 1) * agents * d];
        for i in 0..agents {
            let (x, y) = if d == 2 {
                (layer[2 * i], layer[2 * i + 1])
            } else {
                (layer[i], c[1] + half * (1.0 - 2.0 * (i as f64 + 0.5) / agents as f64))
            };
            if let Some((px, py)) = to_pixel(x, y) {
                for dy in 0..2 {
                    for dx in 0..2 {
                        put(px + dx, py + dy, AGENT);
                    }
                }
            }
        }
        let ty = if d == 2 { target[1] } else { c[1] };
        if let Some((px, py)) = to_pixel(target[0], ty) {
            for s in 0..7u32 {
                put((px + s).saturating_sub(3), py, TARGET);
                put(px, (py + s).saturating_sub(3), TARGET);
            }
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, CliError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| CliError::Io(format!("png encoding: {e}")))?;
    Ok(buf.into_inner())
}
