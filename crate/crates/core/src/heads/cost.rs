//! Safety-oriented candidate filtering against decoded occupancy.

use serde::{Deserialize, Serialize};

use super::sampler::Candidate;
use crate::error::ModelError;
use crate::footprint::{footprint_cells, waypoint_headings, Footprint};
use crate::gridworld::{Command, Pose, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Weight of the command-deviation penalty.
    pub deviation_weight: f64,
    /// Nominal curvature magnitude a turn command prefers.
    pub nominal_turn: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            deviation_weight: 0.1,
            nominal_turn: 0.1,
        }
    }
}

/// Transforms a local candidate waypoint into the window frame given the
/// planning pose.
pub fn to_window_frame(pose: &Pose, p: [f64; 2]) -> [f64; 2] {
    let (hx, hy) = (pose.heading[0], pose.heading[1]);
    [
        pose.pos[0] + hx * p[0] - hy * p[1],
        pose.pos[1] + hy * p[0] + hx * p[1],
    ]
}

/// Sum over steps of the occupied-probability mass inside the ego
/// footprint, plus the command-deviation penalty.
pub fn candidate_cost(
    cand: &Candidate,
    occupied: &[f64],
    command: Command,
    pose: &Pose,
    world: &WorldConfig,
    fp: &Footprint,
    cfg: &CostConfig,
) -> f64 {
    let wps: Vec<[f64; 2]> = cand
        .waypoints
        .iter()
        .map(|&p| to_window_frame(pose, p))
        .collect();
    let headings = waypoint_headings(pose.pos, &wps);
    let mut cost = 0.0;
    for (wp, hd) in wps.iter().zip(&headings) {
        let cells = footprint_cells(world, *wp, *hd, fp);
        for (r, c) in cells.cells {
            cost += occupied[r * world.bev_w + c];
        }
    }
    let nominal = match command {
        Command::Left => cfg.nominal_turn,
        Command::Right => -cfg.nominal_turn,
        Command::Straight => 0.0,
    };
    cost + cfg.deviation_weight * (cand.curvature - nominal).abs()
}

/// Picks the lowest-cost candidate (lowest index wins ties). `occupied` is
/// the per-column occupied probability map, row-major `[h*w]`.
pub fn cost_filter(
    candidates: &[Candidate],
    occupied: &[f64],
    command: Command,
    pose: &Pose,
    world: &WorldConfig,
    fp: &Footprint,
    cfg: &CostConfig,
) -> Result<(usize, Vec<f64>), ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::InvalidArgument(
            "cost_filter needs at least one candidate".into(),
        ));
    }
    if occupied.len() != world.cells() {
        return Err(ModelError::ShapeMismatch {
            context: "cost_filter occupancy",
            expected: format!("{}", world.cells()),
            got: format!("{}", occupied.len()),
        });
    }
    let costs: Vec<f64> = candidates
        .iter()
        .map(|c| candidate_cost(c, occupied, command, pose, world, fp, cfg))
        .collect();
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    Ok((best, costs))
}
