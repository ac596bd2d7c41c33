//! Autoregressive future predictor: residual prediction over a streaming
//! memory, state composition, feature alignment, and multi-step rollout.

mod align;
mod attention;
mod memory;
mod warp;

pub use align::{align_features, AlignOut};
pub use attention::ffn as ffn_block;
pub use memory::{MemSlot, StreamMemory};
pub use warp::{warp_bev, warp_taps, window_motion};

use crate::ad::{ParamStore, Tape, Var};
use crate::encoder::{embed_motions, BevStateVar};
use crate::error::ModelError;
use crate::gridworld::{heading_change, EgoMotion, Pose, WorldConfig};
use crate::model::{Conditioning, ModelConfig, WorldMode};

/// Relative motion between two poses (translation plus heading change).
pub fn pose_delta(from: &Pose, to: &Pose) -> EgoMotion {
    EgoMotion {
        translation: [to.pos[0] - from.pos[0], to.pos[1] - from.pos[1]],
        yaw: heading_change(from.heading, to.heading),
    }
}

/// Predicts the feature change for the next frame from the streaming
/// memory and the action embedding sequence (one embedding per window
/// delta, the last being the action into the target frame).
pub fn predict_residual(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    memory: &StreamMemory,
    action_embeds: &[Var],
    target: (i32, Pose),
) -> Result<BevStateVar, ModelError> {
    if memory.is_empty() {
        return Err(ModelError::EmptyMemory);
    }
    if action_embeds.len() != memory.len() {
        return Err(ModelError::LengthMismatch {
            context: "predict_residual actions",
            expected: memory.len(),
            got: action_embeds.len(),
        });
    }
    let (target_ts, target_pose) = target;
    // Pre-align memory states into the target window.
    let mut maps = Vec::with_capacity(memory.len());
    for slot in memory.slots() {
        let motion = window_motion(&slot.pose, &target_pose);
        maps.push(warp_bev(tape, slot.features, world, &motion)?);
    }
    let mut x = tape.param(store, "pred.query");
    for l in 0..model.layers {
        let p = format!("pred.l{l}");
        let own = [x];
        x = if model.dense_attention {
            attention::dense_attn(tape, store, &format!("{p}.self"), x, &own, model)
        } else {
            attention::deform_attn(tape, store, &format!("{p}.self"), x, &own, world, model, 1)
        };
        x = if model.dense_attention {
            attention::dense_attn(tape, store, &format!("{p}.cross"), x, &maps, model)
        } else {
            attention::deform_attn(
                tape,
                store,
                &format!("{p}.cross"),
                x,
                &maps,
                world,
                model,
                model.memory,
            )
        };
        x = match model.conditioning {
            Conditioning::Add => attention::condition_add(tape, store, &p, x, action_embeds),
            Conditioning::CrossAttention => {
                attention::condition_cross_attn(tape, store, &p, x, action_embeds, model)
            }
        };
        x = attention::ffn(tape, store, &p, x, model);
    }
    let out_w = tape.param(store, "pred.out.w");
    let out_b = tape.param(store, "pred.out.b");
    let delta = tape.linear(x, out_w, Some(out_b));
    Ok(BevStateVar {
        features: delta,
        timestamp: target_ts,
        pose: target_pose,
    })
}

/// Residual composition: next state = change + previous state.
pub fn compose_state(
    tape: &mut Tape,
    delta: &BevStateVar,
    prev: &BevStateVar,
) -> Result<BevStateVar, ModelError> {
    let (dr, dc) = tape.shape(delta.features);
    let (pr, pc) = tape.shape(prev.features);
    if (dr, dc) != (pr, pc) {
        return Err(ModelError::ShapeMismatch {
            context: "compose_state",
            expected: format!("{pr}x{pc}"),
            got: format!("{dr}x{dc}"),
        });
    }
    if delta.timestamp != prev.timestamp + 1 {
        return Err(ModelError::InvalidArgument(format!(
            "compose_state timestamps not consecutive: {} after {}",
            delta.timestamp, prev.timestamp
        )));
    }
    let features = tape.add(delta.features, prev.features);
    Ok(BevStateVar {
        features,
        timestamp: prev.timestamp + 1,
        pose: delta.pose,
    })
}

/// One rolled future state plus its alignment byproducts.
pub struct RolloutStep {
    pub state: BevStateVar,
    pub aux_logits: Option<Var>,
    pub aux_probs: Option<Var>,
}

pub struct RolloutOptions<'a> {
    /// Apply the feature-alignment module (off disables it entirely).
    pub feature_alignment: bool,
    pub world_mode: WorldMode,
    /// Leave the memory advanced past the rolled frames instead of
    /// restoring it.
    pub advance_memory: bool,
    /// Per-step replacement features pushed to memory instead of the
    /// model's own output (teacher forcing / scheduled sampling).
    pub push_overrides: &'a [Option<Var>],
}

impl Default for RolloutOptions<'_> {
    fn default() -> Self {
        RolloutOptions {
            feature_alignment: true,
            world_mode: WorldMode::Residual,
            advance_memory: false,
            push_overrides: &[],
        }
    }
}

/// Rolls the predictor `steps` frames forward. `future` provides, per step,
/// the ego motion into the target frame and the target pose.
pub fn rollout(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    memory: &mut StreamMemory,
    future: &[(EgoMotion, Pose)],
    steps: usize,
    opts: &RolloutOptions,
) -> Result<Vec<RolloutStep>, ModelError> {
    if steps == 0 {
        return Err(ModelError::InvalidArgument("rollout steps must be >= 1".into()));
    }
    if future.len() < steps {
        return Err(ModelError::LengthMismatch {
            context: "rollout future actions",
            expected: steps,
            got: future.len(),
        });
    }
    let snapshot = (!opts.advance_memory).then(|| memory.clone());
    let mut out = Vec::with_capacity(steps);
    for (step, (motion, pose)) in future.iter().take(steps).enumerate() {
        let prev = *memory.newest().ok_or(ModelError::EmptyMemory)?;
        let target_ts = prev.timestamp + 1;
        // Action window: deltas between consecutive memory frames, then the
        // action into the target frame.
        let mut motions: Vec<EgoMotion> = Vec::with_capacity(memory.len());
        let slots: Vec<&MemSlot> = memory.slots().collect();
        for pair in slots.windows(2) {
            motions.push(pose_delta(&pair[0].pose, &pair[1].pose));
        }
        motions.push(*motion);
        let embeds = embed_motions(tape, store, &motions);

        let delta = predict_residual(tape, store, world, model, memory, &embeds, (target_ts, *pose))?;
        let composed = match opts.world_mode {
            WorldMode::Residual => {
                let prev_state = BevStateVar {
                    features: prev.features,
                    timestamp: prev.timestamp,
                    pose: prev.pose,
                };
                compose_state(tape, &delta, &prev_state)?
            }
            WorldMode::FullReconstruction => delta,
        };
        let (final_feat, aux_logits, aux_probs) = if opts.feature_alignment {
            let a = align_features(tape, store, model, composed.features, motion)?;
            (a.aligned, Some(a.aux_logits), Some(a.aux_probs))
        } else {
            (composed.features, None, None)
        };
        let push_feat = opts
            .push_overrides
            .get(step)
            .copied()
            .flatten()
            .unwrap_or(final_feat);
        memory.push(MemSlot {
            features: push_feat,
            pose: *pose,
            timestamp: target_ts,
        });
        out.push(RolloutStep {
            state: BevStateVar {
                features: final_feat,
                timestamp: target_ts,
                pose: *pose,
            },
            aux_logits,
            aux_probs,
        });
    }
    if let Some(snap) = snapshot {
        *memory = snap;
    }
    Ok(out)
}
