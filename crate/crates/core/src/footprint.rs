//! Ego footprint rasterization shared by the planner cost, the collision
//! loss and the collision-rate metric.

use crate::gridworld::WorldConfig;

/// Rectangular ego footprint aligned to the travel heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub length_m: f64,
    pub width_m: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Footprint {
            length_m: 4.0,
            width_m: 2.0,
        }
    }
}

/// Cells whose centers lie inside the footprint rectangle centered at
/// `center` (meters) with its long axis along `heading`. Cells outside the
/// window are dropped; `fully_outside` reports whether the rectangle missed
/// the window entirely.
pub struct FootprintCells {
    pub cells: Vec<(usize, usize)>,
    pub fully_outside: bool,
}

pub fn footprint_cells(
    cfg: &WorldConfig,
    center: [f64; 2],
    heading: [f64; 2],
    fp: &Footprint,
) -> FootprintCells {
    let norm = (heading[0] * heading[0] + heading[1] * heading[1]).sqrt();
    let h = if norm > 1e-12 {
        [heading[0] / norm, heading[1] / norm]
    } else {
        [1.0, 0.0]
    };
    let half_l = fp.length_m / 2.0;
    let half_w = fp.width_m / 2.0;
    // Conservative bounding box in cells.
    let radius = (half_l * half_l + half_w * half_w).sqrt();
    let (cu, cv) = cfg.meters_to_cells(center);
    let r_cells = radius / cfg.cell_size + 1.0;
    let x_lo = ((cu - r_cells).floor().max(0.0)) as i64;
    let x_hi = ((cu + r_cells).ceil().min(cfg.bev_w as f64 - 1.0)) as i64;
    let y_lo = ((cv - r_cells).floor().max(0.0)) as i64;
    let y_hi = ((cv + r_cells).ceil().min(cfg.bev_h as f64 - 1.0)) as i64;
    let mut cells = Vec::new();
    if x_lo <= x_hi && y_lo <= y_hi {
        for row in y_lo..=y_hi {
            for col in x_lo..=x_hi {
                let p = cfg.cell_center(row as usize, col as usize);
                let d = [p[0] - center[0], p[1] - center[1]];
                let along = d[0] * h[0] + d[1] * h[1];
                let across = -d[0] * h[1] + d[1] * h[0];
                if along.abs() <= half_l && across.abs() <= half_w {
                    cells.push((row as usize, col as usize));
                }
            }
        }
    }
    // The rectangle missed the window when its center-side bounding box
    // holds no cell at all.
    let fully_outside = {
        let margin = radius;
        center[0] + margin < -(cfg.bev_w as f64) * cfg.cell_size / 2.0
            || center[0] - margin > (cfg.bev_w as f64) * cfg.cell_size / 2.0
            || center[1] + margin < -(cfg.bev_h as f64) * cfg.cell_size / 2.0
            || center[1] - margin > (cfg.bev_h as f64) * cfg.cell_size / 2.0
    };
    FootprintCells {
        cells,
        fully_outside,
    }
}

/// Heading for each waypoint of a trajectory: the direction of arrival,
/// falling back to the previous heading (or +x) for degenerate steps.
pub fn waypoint_headings(start: [f64; 2], waypoints: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut prev = start;
    let mut heading = [1.0, 0.0];
    let mut out = Vec::with_capacity(waypoints.len());
    for wp in waypoints {
        let d = [wp[0] - prev[0], wp[1] - prev[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n > 1e-9 {
            heading = [d[0] / n, d[1] / n];
        }
        out.push(heading);
        prev = *wp;
    }
    out
}
