//! Scene encoder: observations plus ego history to BEV latent states.

use crate::ad::{ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::gridworld::{EgoMotion, EgoTrajectory, Observation, Pose, WorldConfig};
use crate::model::ModelConfig;
use crate::predictor::{warp_bev, window_motion};

/// A BEV latent state on the tape with its frame metadata.
#[derive(Clone, Copy, Debug)]
pub struct BevStateVar {
    /// `[h*w, dim]` features.
    pub features: Var,
    pub timestamp: i32,
    pub pose: Pose,
}

/// Encodes the observation window [-h_past, 0] into one BEV state per
/// frame. Past frames are warped into the t=0 window through the shared
/// warp primitive before the conv stack; the ego embedding for each frame
/// joins before the final conv layer so a zeroed final layer yields exactly
/// zero features.
pub fn encode_scene(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    observations: &[&Observation],
    poses: &[Pose],
) -> Result<Vec<BevStateVar>, ModelError> {
    let expect = world.h_past + 1;
    if observations.len() != expect || poses.len() != expect {
        return Err(ModelError::LengthMismatch {
            context: "encode_scene window",
            expected: expect,
            got: observations.len().min(poses.len()),
        });
    }
    let mut out = Vec::with_capacity(expect);
    let target_pose = poses[expect - 1];
    for (obs, pose) in observations.iter().zip(poses) {
        out.push(encode_frame(tape, store, world, model, obs, pose, &target_pose)?);
    }
    Ok(out)
}

/// Encodes one observation frame into a BEV state.
pub fn encode_frame(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    obs: &Observation,
    pose: &Pose,
    target_pose: &Pose,
) -> Result<BevStateVar, ModelError> {
    let n = world.cells();
    let obs_ch = world.num_classes + 1;
    if obs.h != world.bev_h || obs.w != world.bev_w || obs.channels != obs_ch {
        return Err(ModelError::ShapeMismatch {
            context: "encode_frame observation",
            expected: format!("{}x{}x{}", world.bev_h, world.bev_w, obs_ch),
            got: format!("{}x{}x{}", obs.h, obs.w, obs.channels),
        });
    }
    if obs.values.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("encode_frame observation"));
    }
    let raw = tape.constant(obs.values.clone(), n, obs_ch);
    let motion = window_motion(pose, target_pose);
    let warped = warp_bev(tape, raw, world, &motion)?;
    let mut x = warped;
    for i in 0..model.encoder_layers {
        if i == model.encoder_layers - 1 {
            let ego = ego_frame_embedding(tape, store, pose);
            x = tape.add_broadcast_row(x, ego);
        }
        let w = tape.param(store, &format!("enc.conv{i}.w"));
        let b = tape.param(store, &format!("enc.conv{i}.b"));
        x = tape.conv3x3(x, w, b, world.bev_h, world.bev_w);
        if i + 1 < model.encoder_layers {
            x = tape.silu(x);
        }
    }
    Ok(BevStateVar {
        features: x,
        timestamp: obs.timestamp,
        pose: *pose,
    })
}

/// Per-frame ego embedding from the absolute pose in the t=0 window.
fn ego_frame_embedding(tape: &mut Tape, store: &ParamStore, pose: &Pose) -> Var {
    let inp = tape.constant(
        vec![pose.pos[0], pose.pos[1], pose.heading[0], pose.heading[1]],
        1,
        4,
    );
    let w = tape.param(store, "enc.ego.w");
    let b = tape.param(store, "enc.ego.b");
    tape.linear(inp, w, Some(b))
}

/// Embeds consecutive ego motions; one `[1, act_dim]` vector per delta.
pub fn embed_motions(tape: &mut Tape, store: &ParamStore, motions: &[EgoMotion]) -> Vec<Var> {
    let w1 = tape.param(store, "act.l1.w");
    let b1 = tape.param(store, "act.l1.b");
    let w2 = tape.param(store, "act.l2.w");
    let b2 = tape.param(store, "act.l2.b");
    motions
        .iter()
        .map(|m| {
            let inp = tape.constant(vec![m.translation[0], m.translation[1], m.yaw], 1, 3);
            let h = tape.linear(inp, w1, Some(b1));
            let h = tape.silu(h);
            tape.linear(h, w2, Some(b2))
        })
        .collect()
}

/// Embeds a trajectory window: one embedding per consecutive frame delta.
pub fn embed_actions(
    tape: &mut Tape,
    store: &ParamStore,
    window: &EgoTrajectory,
) -> Result<Vec<Var>, ModelError> {
    if window.positions.len() < 2 {
        return Err(ModelError::LengthMismatch {
            context: "embed_actions window",
            expected: 2,
            got: window.positions.len(),
        });
    }
    let motions: Result<Vec<EgoMotion>, _> = (window.start_frame + 1
        ..=window.last_frame())
        .map(|t| crate::gridworld::ego_delta(window, t))
        .collect();
    let motions = motions.map_err(|_| ModelError::LengthMismatch {
        context: "embed_actions deltas",
        expected: window.positions.len() - 1,
        got: 0,
    })?;
    Ok(embed_motions(tape, store, &motions))
}
