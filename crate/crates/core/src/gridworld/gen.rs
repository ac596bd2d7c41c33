//! Procedural episode generation.
//!
//! All randomness flows from the episode seed through named substreams and
//! all stored floats are produced by +, -, *, / on exactly representable
//! values, so generated episodes are bit-identical across platforms.

use rand_chacha::ChaCha12Rng;

use super::obs::render_frame;
use super::{
    class, Command, EgoTrajectory, GeneratorParams, SceneEpisode, SemanticOccGrid, WorldConfig,
};
use crate::error::EpisodeError;
use crate::rng::{substream, uniform, uniform_int};

/// Per-frame ego turn options as exact (cos, sin) pairs for
/// 0, +/-2, +/-5 and +/-10 degrees. Embedding the constants keeps the
/// integration free of libm calls.
const TURN_TABLE: [(f64, f64); 7] = [
    (1.0, 0.0),
    (0.9993908270190958, 0.03489949670250097),
    (0.9993908270190958, -0.03489949670250097),
    (0.9961946980917455, 0.08715574274765817),
    (0.9961946980917455, -0.08715574274765817),
    (0.984807753012208, 0.17364817766693033),
    (0.984807753012208, -0.17364817766693033),
];

/// tan(15 degrees); command classification threshold.
const TAN_COMMAND_THRESHOLD: f64 = 0.2679491924311227;

pub const VEHICLE_SIZE: usize = 3;
pub const VEHICLE_HEIGHT: usize = 2;

struct Agent {
    class: u8,
    size: usize,
    height: usize,
    /// Anchor (top-left) cell per frame.
    track: Vec<(i32, i32)>,
}

struct Block {
    row: usize,
    col: usize,
    size: usize,
    height: usize,
}

/// Generates one episode. Deterministic for a given (seed, cfg, gen).
pub fn generate_episode(
    seed: u64,
    cfg: &WorldConfig,
    gen: &GeneratorParams,
) -> Result<SceneEpisode, EpisodeError> {
    cfg.validate()?;
    validate_gen(cfg, gen)?;

    let frames = cfg.n_frames();
    let ego = generate_ego(seed, cfg, gen);
    let road_rows = road_band(cfg, gen);
    let blocks = generate_blocks(seed, cfg, gen, &road_rows);
    let agents = generate_agents(seed, cfg, gen, &road_rows, frames)?;

    let mut occ = Vec::with_capacity(frames);
    for fi in 0..frames {
        let t = cfg.first_frame() + fi as i32;
        let mut grid = SemanticOccGrid::free(cfg.bev_h, cfg.bev_w, cfg.z_bins, t);
        for &r in &road_rows {
            for c in 0..cfg.bev_w {
                grid.set(r, c, 0, class::ROAD);
            }
        }
        for b in &blocks {
            for dy in 0..b.size {
                for dx in 0..b.size {
                    for z in 0..b.height.min(cfg.z_bins) {
                        grid.set(b.row + dy, b.col + dx, z, class::OBSTACLE);
                    }
                }
            }
        }
        for a in &agents {
            let (ar, ac) = a.track[fi];
            for dy in 0..a.size {
                for dx in 0..a.size {
                    let (y, x) = ((ar + dy as i32) as usize, (ac + dx as i32) as usize);
                    for z in 0..a.height.min(cfg.z_bins) {
                        grid.set(y, x, z, a.class);
                    }
                }
            }
        }
        occ.push(grid);
    }

    let commands = derive_commands(cfg, &ego);

    let mut episode = SceneEpisode {
        config: cfg.clone(),
        seed,
        occ,
        ego,
        commands,
        observations: Vec::new(),
    };
    let mut observations = Vec::with_capacity(cfg.h_past + 1);
    for t in cfg.first_frame()..=0 {
        observations.push(render_frame(&episode, t, &gen.noise)?);
    }
    episode.observations = observations;
    Ok(episode)
}

fn validate_gen(cfg: &WorldConfig, gen: &GeneratorParams) -> Result<(), EpisodeError> {
    if cfg.num_classes < 5 {
        return Err(EpisodeError::InvalidConfig(
            "the generator needs at least 5 classes (free, road, obstacle, vehicle, pedestrian)"
                .into(),
        ));
    }
    let max_speed = gen.vehicle_speed[1].max(gen.pedestrian_speed[1]);
    if max_speed > gen.max_speed_cells {
        return Err(EpisodeError::InvalidConfig(format!(
            "agent speed range exceeds max_speed_cells ({} > {})",
            max_speed, gen.max_speed_cells
        )));
    }
    if gen.vehicles[0] > gen.vehicles[1]
        || gen.pedestrians[0] > gen.pedestrians[1]
        || gen.static_blocks[0] > gen.static_blocks[1]
    {
        return Err(EpisodeError::InvalidConfig("count range inverted".into()));
    }
    // Vehicles need the road band plus one cell of travel margin each side.
    let needed = VEHICLE_SIZE + 2 * gen.max_speed_cells as usize + 2;
    if gen.vehicles[1] > 0 && (cfg.bev_h < needed || cfg.bev_w < needed) {
        return Err(EpisodeError::DoesNotFit(format!(
            "vehicle footprint {VEHICLE_SIZE}x{VEHICLE_SIZE} plus travel margin needs at least \
             {needed} cells per side, grid is {}x{}",
            cfg.bev_h, cfg.bev_w
        )));
    }
    if 2 * gen.road_half_width + 1 > cfg.bev_h {
        return Err(EpisodeError::DoesNotFit(
            "road band wider than the grid".into(),
        ));
    }
    // Ego must stay strictly inside the window over the episode.
    let horizon = cfg.h_past.max(cfg.f_future) as f64;
    let reach = gen.ego_speed[1] * horizon;
    let half_extent = cfg.bev_w.min(cfg.bev_h) as f64 * cfg.cell_size / 2.0;
    if reach >= half_extent {
        return Err(EpisodeError::DoesNotFit(format!(
            "ego travel {reach:.1} m can exit the {half_extent:.1} m half window"
        )));
    }
    Ok(())
}

fn road_band(cfg: &WorldConfig, gen: &GeneratorParams) -> Vec<usize> {
    let center = cfg.bev_h / 2;
    let lo = center.saturating_sub(gen.road_half_width);
    let hi = (center + gen.road_half_width).min(cfg.bev_h - 1);
    (lo..=hi).collect()
}

fn generate_ego(seed: u64, cfg: &WorldConfig, gen: &GeneratorParams) -> EgoTrajectory {
    let mut rng = substream(seed, "ego", 0);
    let frames = cfg.n_frames();
    let seg = gen.ego_segment_len.max(1);
    let n_segments = frames / seg + 2;
    let mut speeds = Vec::with_capacity(frames);
    let mut turns = Vec::with_capacity(frames);
    for _ in 0..n_segments {
        let speed = uniform(&mut rng, gen.ego_speed[0], gen.ego_speed[1]);
        let turn = *crate::rng::choose(&mut rng, &TURN_TABLE);
        for _ in 0..seg {
            speeds.push(speed);
            turns.push(turn);
        }
    }
    speeds.truncate(frames);
    turns.truncate(frames);

    // Integrate forward from the anchored t=0 pose (origin, +x heading) and
    // backward for the past frames, reusing the same per-frame schedule.
    let i0 = cfg.h_past;
    let mut positions = vec![[0.0f64, 0.0f64]; frames];
    let mut heading = [1.0f64, 0.0f64];
    for i in i0 + 1..frames {
        let (c, s) = turns[i];
        heading = [
            heading[0] * c - heading[1] * s,
            heading[0] * s + heading[1] * c,
        ];
        positions[i] = [
            positions[i - 1][0] + speeds[i] * heading[0],
            positions[i - 1][1] + speeds[i] * heading[1],
        ];
    }
    heading = [1.0, 0.0];
    for i in (0..i0).rev() {
        // Undo frame i+1's step: rotate heading back, subtract displacement.
        let (c, s) = turns[i + 1];
        let prev = [
            heading[0] * c + heading[1] * s,
            -heading[0] * s + heading[1] * c,
        ];
        positions[i] = [
            positions[i + 1][0] - speeds[i + 1] * heading[0],
            positions[i + 1][1] - speeds[i + 1] * heading[1],
        ];
        heading = prev;
    }
    EgoTrajectory {
        start_frame: cfg.first_frame(),
        positions,
    }
}

fn generate_blocks(
    seed: u64,
    cfg: &WorldConfig,
    gen: &GeneratorParams,
    road_rows: &[usize],
) -> Vec<Block> {
    let mut rng = substream(seed, "static", 0);
    let count = uniform_int(&mut rng, gen.static_blocks[0] as i64, gen.static_blocks[1] as i64)
        as usize;
    let mut blocks = Vec::with_capacity(count);
    let mut off_road_rows: Vec<usize> = (0..cfg.bev_h).filter(|r| !road_rows.contains(r)).collect();
    if off_road_rows.is_empty() {
        off_road_rows = (0..cfg.bev_h).collect();
    }
    for _ in 0..count {
        let size = uniform_int(&mut rng, 2, 3) as usize;
        let height = uniform_int(&mut rng, 1, cfg.z_bins as i64) as usize;
        let row_pick = *crate::rng::choose(&mut rng, &off_road_rows);
        let row = row_pick.min(cfg.bev_h - size);
        let col = uniform_int(&mut rng, 0, (cfg.bev_w - size) as i64) as usize;
        blocks.push(Block {
            row,
            col,
            size,
            height,
        });
    }
    blocks
}

fn generate_agents(
    seed: u64,
    cfg: &WorldConfig,
    gen: &GeneratorParams,
    road_rows: &[usize],
    frames: usize,
) -> Result<Vec<Agent>, EpisodeError> {
    let mut rng = substream(seed, "agents", 0);
    let n_vehicles =
        uniform_int(&mut rng, gen.vehicles[0] as i64, gen.vehicles[1] as i64) as usize;
    let n_peds =
        uniform_int(&mut rng, gen.pedestrians[0] as i64, gen.pedestrians[1] as i64) as usize;
    let mut agents = Vec::with_capacity(n_vehicles + n_peds);
    for _ in 0..n_vehicles {
        agents.push(spawn_agent(
            &mut rng,
            cfg,
            frames,
            class::VEHICLE,
            VEHICLE_SIZE,
            VEHICLE_HEIGHT,
            gen.vehicle_speed,
            Some(road_rows),
        )?);
    }
    for _ in 0..n_peds {
        agents.push(spawn_agent(
            &mut rng,
            cfg,
            frames,
            class::PEDESTRIAN,
            1,
            1,
            gen.pedestrian_speed,
            None,
        )?);
    }
    Ok(agents)
}

#[allow(clippy::too_many_arguments)]
fn spawn_agent(
    rng: &mut ChaCha12Rng,
    cfg: &WorldConfig,
    frames: usize,
    cls: u8,
    size: usize,
    height: usize,
    speed_range: [i32; 2],
    row_band: Option<&[usize]>,
) -> Result<Agent, EpisodeError> {
    if size > cfg.bev_h || size > cfg.bev_w {
        return Err(EpisodeError::DoesNotFit(format!(
            "agent footprint {size}x{size} exceeds the grid"
        )));
    }
    let max_row = cfg.bev_h - size;
    let max_col = cfg.bev_w - size;
    let row = match row_band {
        Some(band) => (*crate::rng::choose(rng, band)).min(max_row) as i32,
        None => uniform_int(rng, 0, max_row as i64) as i32,
    };
    let col = uniform_int(rng, 0, max_col as i64) as i32;
    let speed = uniform_int(rng, speed_range[0] as i64, speed_range[1] as i64) as i32;
    // Vehicles travel along the road (+/-x); pedestrians pick any of the
    // four axis directions, so some cross the road band.
    let mut vel: (i32, i32) = if row_band.is_some() {
        let sign = if uniform_int(rng, 0, 1) == 0 { 1 } else { -1 };
        (0, sign * speed)
    } else {
        match uniform_int(rng, 0, 3) {
            0 => (speed, 0),
            1 => (-speed, 0),
            2 => (0, speed),
            _ => (0, -speed),
        }
    };
    // Velocity stays piecewise constant: it only flips on window contact.
    let mut track = Vec::with_capacity(frames);
    let mut pos = (row, col);
    track.push(pos);
    for _ in 1..frames {
        let mut next = (pos.0 + vel.0, pos.1 + vel.1);
        if next.0 < 0 || next.0 > max_row as i32 {
            vel.0 = -vel.0;
            next.0 = pos.0 + vel.0;
        }
        if next.1 < 0 || next.1 > max_col as i32 {
            vel.1 = -vel.1;
            next.1 = pos.1 + vel.1;
        }
        next.0 = next.0.clamp(0, max_row as i32);
        next.1 = next.1.clamp(0, max_col as i32);
        pos = next;
        track.push(pos);
    }
    Ok(Agent {
        class: cls,
        size,
        height,
        track,
    })
}

fn derive_commands(cfg: &WorldConfig, ego: &EgoTrajectory) -> Vec<Command> {
    let poses = super::poses_from_trajectory(ego);
    let i0 = cfg.h_past;
    let h0 = poses[i0].heading;
    let mut commands = Vec::with_capacity(cfg.f_future);
    for t in 1..=cfg.f_future {
        let ht = poses[i0 + t].heading;
        let cross = h0[0] * ht[1] - h0[1] * ht[0];
        let dot = h0[0] * ht[0] + h0[1] * ht[1];
        let cmd = if cross > TAN_COMMAND_THRESHOLD * dot {
            Command::Left
        } else if cross < -TAN_COMMAND_THRESHOLD * dot {
            Command::Right
        } else {
            Command::Straight
        };
        commands.push(cmd);
    }
    commands
}
