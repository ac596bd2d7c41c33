//! Task decoders: occupancy head, planning head, and the three
//! forecasting/planning coupling schemes.

mod cost;
mod occ;
mod plan;
mod sampler;

pub use cost::{candidate_cost, cost_filter, to_window_frame, CostConfig};
pub use occ::{decode_occupancy, OccLogits};
pub use plan::{integrate_deltas, plan_all_from_current, plan_step};
pub use sampler::{sample_candidates, Candidate, SamplerConfig};

use std::time::Instant;

use crate::ad::{ParamStore, Tape, Var};
use crate::encoder::BevStateVar;
use crate::error::ModelError;
use crate::footprint::Footprint;
use crate::gridworld::{Command, EgoMotion, Pose, WorldConfig};
use crate::model::{CouplingMode, ModelConfig};
use crate::predictor::{rollout, RolloutOptions, StreamMemory};

/// Everything the planner needs besides the states themselves.
pub struct PlanContext<'a> {
    pub store: &'a ParamStore,
    pub world: &'a WorldConfig,
    pub model: &'a ModelConfig,
    pub commands: &'a [Command],
    /// Future ego motions and poses conditioning the internal rollout
    /// (tight and semi coupling).
    pub future: &'a [(EgoMotion, Pose)],
    pub sampler: &'a SamplerConfig,
    pub footprint: Footprint,
    pub cost: CostConfig,
}

/// Planner output: predicted translations and trajectory, optional
/// candidate filtering byproducts (tight coupling only), and wall-clock
/// phase timings.
#[derive(Clone, Debug)]
pub struct PlanResult {
    /// Absolute positions for t in [1, f_future], window frame, meters.
    pub trajectory: Vec<[f64; 2]>,
    pub deltas: Vec<[f64; 2]>,
    pub candidates: Option<Vec<Vec<Candidate>>>,
    pub costs: Option<Vec<Vec<f64>>>,
    pub selected: Option<Vec<usize>>,
    pub latency_ms: f64,
    /// Named phase timings; "rollout" appears only when a rollout ran.
    pub phases: Vec<(String, f64)>,
    pub rollout_calls: usize,
}

pub(crate) struct PlannedDeltas {
    pub deltas: Var,
    pub candidates: Option<Vec<Vec<Candidate>>>,
    pub costs: Option<Vec<Vec<f64>>>,
    pub selected: Option<Vec<usize>>,
    pub decode_ms: f64,
    pub filter_ms: f64,
    pub plan_ms: f64,
}

/// Plans one translation per future step over the given states
/// (length f for tight/semi, length 1 for decoupled). Shared by training
/// and evaluation so both paths stay identical.
pub(crate) fn plan_over_states(
    tape: &mut Tape,
    ctx: &PlanContext,
    states: &[BevStateVar],
    mode: CouplingMode,
) -> Result<PlannedDeltas, ModelError> {
    let f = ctx.world.f_future;
    if ctx.commands.len() != f {
        return Err(ModelError::LengthMismatch {
            context: "plan_over_states commands",
            expected: f,
            got: ctx.commands.len(),
        });
    }
    let mut decode_ms = 0.0;
    let mut filter_ms = 0.0;
    let mut plan_ms = 0.0;
    match mode {
        CouplingMode::Decoupled => {
            let t0 = Instant::now();
            let deltas =
                plan_all_from_current(tape, ctx.store, ctx.world, ctx.model, states[0].features, ctx.commands)?;
            plan_ms += ms_since(t0);
            Ok(PlannedDeltas {
                deltas,
                candidates: None,
                costs: None,
                selected: None,
                decode_ms,
                filter_ms,
                plan_ms,
            })
        }
        CouplingMode::Semi | CouplingMode::Tight => {
            if states.len() != f {
                return Err(ModelError::LengthMismatch {
                    context: "plan_over_states rolled states",
                    expected: f,
                    got: states.len(),
                });
            }
            let tight = mode == CouplingMode::Tight;
            let mut delta_vars = Vec::with_capacity(f);
            let mut cands_all = Vec::new();
            let mut costs_all = Vec::new();
            let mut selected_all = Vec::new();
            let mut planning_pose = states[0].pose;
            for (s, state) in states.iter().enumerate() {
                let cmd = ctx.commands[s];
                let tau: Option<Vec<[f64; 2]>> = if tight {
                    let t0 = Instant::now();
                    let occ =
                        decode_occupancy(tape, ctx.store, ctx.world, ctx.model, state.features)?;
                    let occupied = occ.occupied_map(tape);
                    decode_ms += ms_since(t0);
                    let t1 = Instant::now();
                    let cands = sample_candidates(cmd, ctx.sampler, ctx.world.dt, f)?;
                    let (best, costs) = cost_filter(
                        &cands,
                        &occupied,
                        cmd,
                        &planning_pose,
                        ctx.world,
                        &ctx.footprint,
                        &ctx.cost,
                    )?;
                    filter_ms += ms_since(t1);
                    let token: Vec<[f64; 2]> = cands[best]
                        .waypoints
                        .iter()
                        .map(|&p| to_window_frame(&planning_pose, p))
                        .collect();
                    costs_all.push(costs);
                    selected_all.push(best);
                    cands_all.push(cands);
                    Some(token)
                } else {
                    None
                };
                let t2 = Instant::now();
                let delta = plan_step(
                    tape,
                    ctx.store,
                    ctx.world,
                    ctx.model,
                    state.features,
                    cmd,
                    tau.as_deref(),
                )?;
                plan_ms += ms_since(t2);
                // Track the pose from predicted values for the next step's
                // candidate generation.
                let dv = tape.value(delta);
                let d = [dv[0], dv[1]];
                planning_pose = advance_pose(&planning_pose, d);
                delta_vars.push(delta);
            }
            let deltas = tape.concat_rows(&delta_vars);
            Ok(PlannedDeltas {
                deltas,
                candidates: tight.then_some(cands_all),
                costs: tight.then_some(costs_all),
                selected: tight.then_some(selected_all),
                decode_ms,
                filter_ms,
                plan_ms,
            })
        }
    }
}

fn advance_pose(pose: &Pose, delta: [f64; 2]) -> Pose {
    let pos = [pose.pos[0] + delta[0], pose.pos[1] + delta[1]];
    let n = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    let heading = if n > 1e-9 {
        [delta[0] / n, delta[1] / n]
    } else {
        pose.heading
    };
    Pose { pos, heading }
}

/// Runs one full planning pass in the requested coupling mode. Tight and
/// semi coupling roll future states internally (conditioned on
/// `ctx.future`); decoupled planning reads only the current state and
/// never invokes the predictor.
pub fn plan_episode(
    tape: &mut Tape,
    ctx: &PlanContext,
    enc_states: &[BevStateVar],
    mode: CouplingMode,
) -> Result<PlanResult, ModelError> {
    if enc_states.is_empty() {
        return Err(ModelError::LengthMismatch {
            context: "plan_episode encoder states",
            expected: 1,
            got: 0,
        });
    }
    let f = ctx.world.f_future;
    let start = Instant::now();
    let current = *enc_states.last().unwrap();
    let mut phases: Vec<(String, f64)> = Vec::new();
    let mut rollout_calls = 0usize;

    let states: Vec<BevStateVar> = match mode {
        CouplingMode::Decoupled => vec![current],
        _ => {
            if ctx.future.len() < f.saturating_sub(1) {
                return Err(ModelError::LengthMismatch {
                    context: "plan_episode rolled states (future actions)",
                    expected: f - 1,
                    got: ctx.future.len(),
                });
            }
            let t0 = Instant::now();
            let mut memory = StreamMemory::seeded(ctx.model.memory, enc_states);
            let mut states = vec![current];
            if f > 1 {
                let opts = RolloutOptions {
                    feature_alignment: ctx.model.feature_alignment,
                    world_mode: ctx.model.world_mode,
                    advance_memory: false,
                    push_overrides: &[],
                };
                let rolled = rollout(
                    tape,
                    ctx.store,
                    ctx.world,
                    ctx.model,
                    &mut memory,
                    ctx.future,
                    f - 1,
                    &opts,
                )?;
                rollout_calls += 1;
                states.extend(rolled.into_iter().map(|r| r.state));
            }
            phases.push(("rollout".into(), ms_since(t0)));
            states
        }
    };

    let planned = plan_over_states(tape, ctx, &states, mode)?;
    if planned.decode_ms > 0.0 {
        phases.push(("decode".into(), planned.decode_ms));
        phases.push(("filter".into(), planned.filter_ms));
    }
    phases.push(("plan".into(), planned.plan_ms));

    let dv = tape.value(planned.deltas);
    let deltas: Vec<[f64; 2]> = dv.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let mut trajectory = Vec::with_capacity(f);
    let mut pos = current.pose.pos;
    for d in &deltas {
        pos = [pos[0] + d[0], pos[1] + d[1]];
        trajectory.push(pos);
    }
    Ok(PlanResult {
        trajectory,
        deltas,
        candidates: planned.candidates,
        costs: planned.costs,
        selected: planned.selected,
        latency_ms: ms_since(start),
        phases,
        rollout_calls,
    })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}
