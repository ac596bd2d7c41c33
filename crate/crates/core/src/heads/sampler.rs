//! Constant-curvature candidate trajectory sampling.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::gridworld::Command;

/// Speed and curvature grids for candidate generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Meters per second.
    pub speeds: Vec<f64>,
    /// Non-negative curvature magnitudes (1/m); the command fixes the sign.
    pub curvature_mags: Vec<f64>,
    /// Curvature magnitude treated as "straight".
    pub straight_band: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            speeds: vec![1.0, 2.0, 3.0],
            curvature_mags: vec![0.0, 0.05, 0.12],
            straight_band: 0.06,
        }
    }
}

/// One candidate in the heading-aligned local frame (start at the origin,
/// initial heading +x).
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub waypoints: Vec<[f64; 2]>,
    pub curvature: f64,
    pub speed: f64,
}

/// Samples constant-curvature, constant-speed rollouts over `f` steps of
/// `dt` seconds. LEFT restricts curvature to non-negative values, RIGHT to
/// non-positive; STRAIGHT clamps magnitudes into the straight band with
/// alternating signs. The candidate count is always
/// `speeds.len() * curvature_mags.len()`.
pub fn sample_candidates(
    command: Command,
    cfg: &SamplerConfig,
    dt: f64,
    f: usize,
) -> Result<Vec<Candidate>, ModelError> {
    if cfg.speeds.is_empty() || cfg.curvature_mags.is_empty() {
        return Err(ModelError::InvalidArgument(
            "sampler speed and curvature grids must be non-empty".into(),
        ));
    }
    if cfg.curvature_mags.iter().any(|&m| m < 0.0) {
        return Err(ModelError::InvalidArgument(
            "curvature magnitudes must be non-negative".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.speeds.len() * cfg.curvature_mags.len());
    for &speed in &cfg.speeds {
        for (mi, &mag) in cfg.curvature_mags.iter().enumerate() {
            let curvature = match command {
                Command::Left => mag,
                Command::Right => -mag,
                Command::Straight => {
                    let clamped = mag.min(cfg.straight_band);
                    if mi % 2 == 0 {
                        clamped
                    } else {
                        -clamped
                    }
                }
            };
            out.push(roll_arc(speed, curvature, dt, f));
        }
    }
    Ok(out)
}

fn roll_arc(speed: f64, curvature: f64, dt: f64, f: usize) -> Candidate {
    let mut theta: f64 = 0.0;
    let mut pos = [0.0f64, 0.0f64];
    let step = speed * dt;
    let mut waypoints = Vec::with_capacity(f);
    for _ in 0..f {
        // Midpoint heading keeps the polyline on the circular arc.
        let mid = theta + curvature * step / 2.0;
        pos[0] += step * mid.cos();
        pos[1] += step * mid.sin();
        theta += curvature * step;
        waypoints.push(pos);
    }
    Candidate {
        waypoints,
        curvature,
        speed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_unit_case_matches_kinematics() {
        let cfg = SamplerConfig {
            speeds: vec![2.0],
            curvature_mags: vec![0.0],
            straight_band: 0.05,
        };
        let c = sample_candidates(Command::Straight, &cfg, 0.5, 4).unwrap();
        assert_eq!(c.len(), 1);
        let expect = [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        for (got, want) in c[0].waypoints.iter().zip(&expect) {
            assert!((got[0] - want[0]).abs() < 1e-12);
            assert!((got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn left_command_yields_non_negative_curvature() {
        let cfg = SamplerConfig::default();
        let c = sample_candidates(Command::Left, &cfg, 0.5, 4).unwrap();
        assert!(c.iter().all(|cand| cand.curvature >= 0.0));
        let r = sample_candidates(Command::Right, &cfg, 0.5, 4).unwrap();
        assert!(r.iter().all(|cand| cand.curvature <= 0.0));
        let s = sample_candidates(Command::Straight, &cfg, 0.5, 4).unwrap();
        assert!(s.iter().all(|cand| cand.curvature.abs() <= cfg.straight_band));
    }

    #[test]
    fn count_is_grid_product() {
        let cfg = SamplerConfig {
            speeds: vec![1.0, 2.0, 3.0],
            curvature_mags: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            straight_band: 0.06,
        };
        for cmd in [Command::Left, Command::Straight, Command::Right] {
            assert_eq!(sample_candidates(cmd, &cfg, 0.5, 4).unwrap().len(), 15);
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let cfg = SamplerConfig {
            speeds: vec![],
            curvature_mags: vec![0.0],
            straight_band: 0.05,
        };
        assert!(sample_candidates(Command::Straight, &cfg, 0.5, 4).is_err());
    }
}
