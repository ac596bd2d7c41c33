//! Domain types and procedural scene generation.
//!
//! The world is a fixed window of `bev_h x bev_w` columns with `z_bins`
//! vertical bins, expressed in the ego frame at t = 0 (meters origin at the
//! window center). Ground-truth occupancy for every frame is stored in this
//! one window; ego motion is represented separately by the trajectory.

mod gen;
mod obs;
mod io;

pub use gen::generate_episode;
pub use io::{load_episode, save_episode};
pub use obs::{bev_class_map, render_observation, render_observation_any, top_surface_class};

use serde::{Deserialize, Serialize};

use crate::error::EpisodeError;

/// Class ids used by the synthetic world. Class 0 is always free space.
pub mod class {
    pub const FREE: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const OBSTACLE: u8 = 2;
    pub const VEHICLE: u8 = 3;
    pub const PEDESTRIAN: u8 = 4;

    pub fn name(id: u8) -> &'static str {
        match id {
            FREE => "free",
            ROAD => "road",
            OBSTACLE => "static_obstacle",
            VEHICLE => "vehicle",
            PEDESTRIAN => "pedestrian",
            _ => "extra_movable",
        }
    }
}

/// Grid and horizon configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub bev_h: usize,
    pub bev_w: usize,
    pub z_bins: usize,
    /// Meters per cell.
    pub cell_size: f64,
    /// Number of semantic classes including free.
    pub num_classes: usize,
    /// Past frames (current frame excluded).
    pub h_past: usize,
    /// Future frames.
    pub f_future: usize,
    /// Seconds per frame.
    pub dt: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bev_h: 32,
            bev_w: 32,
            z_bins: 4,
            cell_size: 1.0,
            num_classes: 5,
            h_past: 2,
            f_future: 4,
            dt: 0.5,
        }
    }
}

impl WorldConfig {
    /// The full-scale grid preset; retained for configuration parity, not
    /// meant to be trained on a laptop.
    pub fn full_scale() -> Self {
        WorldConfig {
            bev_h: 512,
            bev_w: 512,
            z_bins: 40,
            cell_size: 0.2,
            num_classes: 5,
            h_past: 2,
            f_future: 4,
            dt: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.bev_h == 0 || self.bev_w == 0 || self.z_bins == 0 || self.num_classes == 0 {
            return Err(EpisodeError::InvalidConfig(
                "grid dimensions and class count must be at least 1".into(),
            ));
        }
        if self.cell_size <= 0.0 || !self.cell_size.is_finite() {
            return Err(EpisodeError::InvalidConfig("cell_size must be > 0".into()));
        }
        if self.f_future == 0 {
            return Err(EpisodeError::InvalidConfig("f_future must be >= 1".into()));
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(EpisodeError::InvalidConfig("dt must be > 0".into()));
        }
        Ok(())
    }

    /// Total frames, covering t in [-h_past, f_future].
    pub fn n_frames(&self) -> usize {
        self.h_past + self.f_future + 1
    }

    pub fn first_frame(&self) -> i32 {
        -(self.h_past as i32)
    }

    pub fn frame_index(&self, t: i32) -> Option<usize> {
        if t < self.first_frame() || t > self.f_future as i32 {
            None
        } else {
            Some((t + self.h_past as i32) as usize)
        }
    }

    pub fn cells(&self) -> usize {
        self.bev_h * self.bev_w
    }

    /// Continuous cell coordinates (x right, y up in row direction) of a
    /// point in meters; integer values land on cell centers.
    pub fn meters_to_cells(&self, p: [f64; 2]) -> (f64, f64) {
        let u = p[0] / self.cell_size + self.bev_w as f64 / 2.0 - 0.5;
        let v = p[1] / self.cell_size + self.bev_h as f64 / 2.0 - 0.5;
        (u, v)
    }

    /// Cell containing a point in meters, if inside the window.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let c = (p[0] / self.cell_size + self.bev_w as f64 / 2.0).floor();
        let r = (p[1] / self.cell_size + self.bev_h as f64 / 2.0).floor();
        if c < 0.0 || r < 0.0 || c >= self.bev_w as f64 || r >= self.bev_h as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Center of a cell in meters.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5 - self.bev_w as f64 / 2.0) * self.cell_size,
            (row as f64 + 0.5 - self.bev_h as f64 / 2.0) * self.cell_size,
        ]
    }
}

/// Dense voxel grid of class labels at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOccGrid {
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub timestamp: i32,
    /// Row-major (y, x, z).
    pub labels: Vec<u8>,
}

impl SemanticOccGrid {
    pub fn free(h: usize, w: usize, z: usize, timestamp: i32) -> Self {
        SemanticOccGrid {
            h,
            w,
            z,
            timestamp,
            labels: vec![class::FREE; h * w * z],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, z: usize) -> usize {
        (y * self.w + x) * self.z + z
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, z: usize) -> u8 {
        self.labels[self.idx(y, x, z)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, z: usize, v: u8) {
        let i = self.idx(y, x, z);
        self.labels[i] = v;
    }

    pub fn validate_labels(&self, num_classes: usize) -> Result<(), EpisodeError> {
        for &l in &self.labels {
            if l as usize >= num_classes {
                return Err(EpisodeError::InvalidLabel(l, num_classes));
            }
        }
        Ok(())
    }

    /// True when any z bin of the column carries a class from `set`.
    pub fn column_has_class(&self, y: usize, x: usize, set: &[u8]) -> bool {
        (0..self.z).any(|z| set.contains(&self.at(y, x, z)))
    }
}

/// Ego positions in meters over consecutive frames, ego-centric at t = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoTrajectory {
    pub start_frame: i32,
    pub positions: Vec<[f64; 2]>,
}

impl EgoTrajectory {
    pub fn position(&self, t: i32) -> Option<[f64; 2]> {
        let i = t - self.start_frame;
        if i < 0 {
            return None;
        }
        self.positions.get(i as usize).copied()
    }

    pub fn last_frame(&self) -> i32 {
        self.start_frame + self.positions.len() as i32 - 1
    }
}

/// Relative ego motion between consecutive frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoMotion {
    pub translation: [f64; 2],
    /// Heading change in radians, in (-pi, pi].
    pub yaw: f64,
}

impl EgoMotion {
    pub fn zero() -> Self {
        EgoMotion {
            translation: [0.0, 0.0],
            yaw: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.yaw.is_finite()
    }
}

/// Displacement threshold below which headings are considered undefined.
pub const MOTION_EPS: f64 = 1e-9;

/// Ego motion from frame t-1 to frame t. Yaw is the turn between the two
/// consecutive displacement directions and is zero when either displacement
/// is degenerate or the earlier one does not exist.
pub fn ego_delta(traj: &EgoTrajectory, t: i32) -> Result<EgoMotion, EpisodeError> {
    let cur = traj
        .position(t)
        .ok_or(EpisodeError::FrameOutOfRange(t, traj.start_frame, traj.last_frame()))?;
    let prev = traj
        .position(t - 1)
        .ok_or(EpisodeError::FrameOutOfRange(t - 1, traj.start_frame, traj.last_frame()))?;
    let translation = [cur[0] - prev[0], cur[1] - prev[1]];
    let yaw = match traj.position(t - 2) {
        Some(pp) => {
            let d_prev = [prev[0] - pp[0], prev[1] - pp[1]];
            heading_change(d_prev, translation)
        }
        None => 0.0,
    };
    Ok(EgoMotion { translation, yaw })
}

/// Signed angle from `a` to `b`, zero when either vector is near zero.
pub fn heading_change(a: [f64; 2], b: [f64; 2]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    if na < MOTION_EPS || nb < MOTION_EPS {
        return 0.0;
    }
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    let mut yaw = cross.atan2(dot);
    if yaw <= -std::f64::consts::PI {
        yaw = std::f64::consts::PI;
    }
    yaw
}

/// Ego pose: position in meters plus a unit heading vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub pos: [f64; 2],
    pub heading: [f64; 2],
}

impl Pose {
    pub fn yaw(&self) -> f64 {
        self.heading[1].atan2(self.heading[0])
    }
}

/// Derives per-frame poses from a trajectory. Headings come from
/// displacements; degenerate displacements inherit the previous heading and
/// the default heading is +x.
pub fn poses_from_trajectory(traj: &EgoTrajectory) -> Vec<Pose> {
    let n = traj.positions.len();
    let mut heading = [1.0, 0.0];
    // Seed with the first non-degenerate displacement so early frames of a
    // moving trajectory point the right way.
    for i in 1..n {
        let d = [
            traj.positions[i][0] - traj.positions[i - 1][0],
            traj.positions[i][1] - traj.positions[i - 1][1],
        ];
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if norm > MOTION_EPS {
            heading = [d[0] / norm, d[1] / norm];
            break;
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let d = [
                traj.positions[i][0] - traj.positions[i - 1][0],
                traj.positions[i][1] - traj.positions[i - 1][1],
            ];
            let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if norm > MOTION_EPS {
                heading = [d[0] / norm, d[1] / norm];
            }
        }
        out.push(Pose {
            pos: traj.positions[i],
            heading,
        });
    }
    out
}

/// High-level driving command for a future frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub fn as_u8(self) -> u8 {
        match self {
            Command::Left => 0,
            Command::Straight => 1,
            Command::Right => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, EpisodeError> {
        match v {
            0 => Ok(Command::Left),
            1 => Ok(Command::Straight),
            2 => Ok(Command::Right),
            _ => Err(EpisodeError::Manifest(format!("invalid command id {v}"))),
        }
    }
}

/// Noisy, partially masked top-down rendering of the true occupancy.
/// Channels are a one-hot class encoding followed by one "unobserved" flag
/// channel set on masked columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub timestamp: i32,
    /// Row-major (y, x, channel).
    pub values: Vec<f64>,
}

/// Observation noise parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    /// Additive noise scale (standard-normal shaped draws times this).
    pub scale: f64,
    /// Fraction of columns masked as unobserved.
    pub mask_fraction: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            scale: 0.05,
            mask_fraction: 0.1,
        }
    }
}

/// Dynamic agent counts, speeds and static structure density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    /// Inclusive count range of vehicles.
    pub vehicles: [usize; 2],
    pub pedestrians: [usize; 2],
    /// Cells per frame, inclusive.
    pub vehicle_speed: [i32; 2],
    pub pedestrian_speed: [i32; 2],
    /// Inclusive count range of static obstacle blocks.
    pub static_blocks: [usize; 2],
    /// Hard cap on per-frame agent motion in cells.
    pub max_speed_cells: i32,
    /// Ego speed range in meters per frame.
    pub ego_speed: [f64; 2],
    /// Frames between ego speed/turn-rate changes.
    pub ego_segment_len: usize,
    /// Half width of the road band in cells.
    pub road_half_width: usize,
    /// Noise applied to the stored observations.
    pub noise: NoiseParams,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            vehicles: [2, 4],
            pedestrians: [2, 4],
            vehicle_speed: [2, 2],
            pedestrian_speed: [1, 1],
            static_blocks: [3, 6],
            max_speed_cells: 3,
            ego_speed: [0.8, 1.6],
            ego_segment_len: 2,
            road_half_width: 5,
            noise: NoiseParams::default(),
        }
    }
}

/// One synthetic drive: ground-truth occupancy per frame, ego trajectory,
/// future commands, and observations for the past and current frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEpisode {
    pub config: WorldConfig,
    pub seed: u64,
    /// One grid per frame for t in [-h_past, f_future].
    pub occ: Vec<SemanticOccGrid>,
    pub ego: EgoTrajectory,
    /// One command per future frame t in [1, f_future].
    pub commands: Vec<Command>,
    /// Observations for t in [-h_past, 0].
    pub observations: Vec<Observation>,
}

impl SceneEpisode {
    pub fn occ_at(&self, t: i32) -> Option<&SemanticOccGrid> {
        self.config.frame_index(t).map(|i| &self.occ[i])
    }

    pub fn observation_at(&self, t: i32) -> Option<&Observation> {
        if t < self.config.first_frame() || t > 0 {
            return None;
        }
        self.observations
            .get((t + self.config.h_past as i32) as usize)
    }

    pub fn obs_channels(&self) -> usize {
        self.config.num_classes + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ego_delta_matches_stated_cases() {
        let stationary = EgoTrajectory {
            start_frame: 0,
            positions: vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        };
        let d = ego_delta(&stationary, 2).unwrap();
        assert_eq!(d.translation, [0.0, 0.0]);
        assert_eq!(d.yaw, 0.0);

        let straight = EgoTrajectory {
            start_frame: 0,
            positions: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        };
        let d = ego_delta(&straight, 2).unwrap();
        assert_eq!(d.translation, [1.0, 0.0]);
        assert_eq!(d.yaw, 0.0);

        let turn = EgoTrajectory {
            start_frame: 0,
            positions: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        };
        let d = ego_delta(&turn, 2).unwrap();
        assert_eq!(d.translation, [0.0, 1.0]);
        assert!((d.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn ego_delta_missing_frame_errors() {
        let traj = EgoTrajectory {
            start_frame: 0,
            positions: vec![[0.0, 0.0], [1.0, 0.0]],
        };
        assert!(ego_delta(&traj, 0).is_err());
        assert!(ego_delta(&traj, 2).is_err());
        assert!(ego_delta(&traj, 1).is_ok());
    }

    #[test]
    fn frame_indexing_covers_span() {
        let cfg = WorldConfig::default();
        assert_eq!(cfg.n_frames(), 7);
        assert_eq!(cfg.frame_index(-2), Some(0));
        assert_eq!(cfg.frame_index(0), Some(2));
        assert_eq!(cfg.frame_index(4), Some(6));
        assert_eq!(cfg.frame_index(5), None);
        assert_eq!(cfg.frame_index(-3), None);
    }

    #[test]
    fn meters_cell_round_trip() {
        let cfg = WorldConfig::default();
        let p = cfg.cell_center(10, 20);
        assert_eq!(cfg.cell_of(p), Some((10, 20)));
        let (u, v) = cfg.meters_to_cells(p);
        assert!((u - 20.0).abs() < 1e-12);
        assert!((v - 10.0).abs() < 1e-12);
    }
}
