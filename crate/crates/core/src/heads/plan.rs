//! Planning head: plan/command queries cross-attend the (adapter-enhanced)
//! BEV features and emit per-step ego translations.

use crate::ad::{ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::gridworld::{Command, WorldConfig};
use crate::model::ModelConfig;

/// Builds the decoder input tokens: one row per plan query, each the
/// projected concatenation of (plan query, command embedding[, candidate
/// token]).
fn build_queries(
    tape: &mut Tape,
    store: &ParamStore,
    rows: &[(usize, Command)],
    tau_token: Option<Var>,
) -> Var {
    let query_grid = tape.param(store, "plan.query");
    let cmd_table = tape.param(store, "plan.cmd");
    let in_w = tape.param(store, "plan.in.w");
    let in_b = tape.param(store, "plan.in.b");
    let parts: Vec<Var> = rows
        .iter()
        .map(|&(qi, cmd)| {
            let qrows = tape.shape(query_grid).0;
            let mut sel = vec![0.0; qrows];
            sel[qi] = 1.0;
            let sel = tape.constant(sel, 1, qrows);
            let q = tape.matmul(sel, query_grid);
            let mut csel = vec![0.0; 3];
            csel[cmd.as_u8() as usize] = 1.0;
            let csel = tape.constant(csel, 1, 3);
            let c = tape.matmul(csel, cmd_table);
            let cat = match tau_token {
                Some(tau) => tape.concat_cols(&[q, c, tau]),
                None => tape.concat_cols(&[q, c]),
            };
            tape.linear(cat, in_w, Some(in_b))
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    }
}

/// Adapter-enhanced features: `S + Adapter(S)` with a two-layer conv stack.
fn enhance(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    features: Var,
) -> Var {
    let c0_w = tape.param(store, "plan.adapter.c0.w");
    let c0_b = tape.param(store, "plan.adapter.c0.b");
    let c1_w = tape.param(store, "plan.adapter.c1.w");
    let c1_b = tape.param(store, "plan.adapter.c1.b");
    let h = tape.conv3x3(features, c0_w, c0_b, world.bev_h, world.bev_w);
    let h = tape.silu(h);
    let adapted = tape.conv3x3(h, c1_w, c1_b, world.bev_h, world.bev_w);
    tape.add(features, adapted)
}

/// Runs the plan decoder for a batch of query rows against one state,
/// returning `[rows, 2]` translations.
fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    features: Var,
    queries: Var,
) -> Var {
    let enhanced = enhance(tape, store, world, features);
    let xn = tape.layer_norm(queries, model.ln_eps);
    let q_w = tape.param(store, "plan.attn.q.w");
    let q_b = tape.param(store, "plan.attn.q.b");
    let k_w = tape.param(store, "plan.attn.k.w");
    let k_b = tape.param(store, "plan.attn.k.b");
    let v_w = tape.param(store, "plan.attn.v.w");
    let v_b = tape.param(store, "plan.attn.v.b");
    let o_w = tape.param(store, "plan.attn.o.w");
    let o_b = tape.param(store, "plan.attn.o.b");
    let q = tape.linear(xn, q_w, Some(q_b));
    let k = tape.linear(enhanced, k_w, Some(k_b));
    let v = tape.linear(enhanced, v_w, Some(v_b));
    let s = tape.matmul_nt(q, k);
    let s = tape.scale(s, 1.0 / (model.dim as f64).sqrt());
    let p = tape.softmax_rows(s);
    let ctx = tape.matmul(p, v);
    let att = tape.linear(ctx, o_w, Some(o_b));
    let x = tape.add(queries, att);
    let x = crate::predictor::ffn_block(tape, store, "plan", x, model);
    let w1 = tape.param(store, "plan.out.l1.w");
    let b1 = tape.param(store, "plan.out.l1.b");
    let w2 = tape.param(store, "plan.out.l2.w");
    let b2 = tape.param(store, "plan.out.l2.b");
    let h = tape.linear(x, w1, Some(b1));
    let h = tape.silu(h);
    tape.linear(h, w2, Some(b2))
}

/// One planning step: the plan query joined with the command embedding
/// (and, in tight coupling, the encoded filtered candidate) attends over
/// the state and yields the next translation `[1, 2]`.
pub fn plan_step(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    features: Var,
    command: Command,
    tau_star: Option<&[[f64; 2]]>,
) -> Result<Var, ModelError> {
    let (n, d) = tape.shape(features);
    if n != world.cells() || d != model.dim {
        return Err(ModelError::ShapeMismatch {
            context: "plan_step features",
            expected: format!("{}x{}", world.cells(), model.dim),
            got: format!("{n}x{d}"),
        });
    }
    let tau_token = match tau_star {
        Some(wps) => {
            if wps.len() != world.f_future {
                return Err(ModelError::LengthMismatch {
                    context: "plan_step candidate token",
                    expected: world.f_future,
                    got: wps.len(),
                });
            }
            let flat: Vec<f64> = wps.iter().flat_map(|p| [p[0], p[1]]).collect();
            let t = tape.constant(flat, 1, 2 * world.f_future);
            let w = tape.param(store, "plan.tau.w");
            let b = tape.param(store, "plan.tau.b");
            Some(tape.linear(t, w, Some(b)))
        }
        None => None,
    };
    let queries = build_queries(tape, store, &[(0, command)], tau_token);
    Ok(decode(tape, store, world, model, features, queries))
}

/// Decoupled decoding: all `f_future` plan queries attend the current state
/// in one pass, producing `[f_future, 2]` translations.
pub fn plan_all_from_current(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    features: Var,
    commands: &[Command],
) -> Result<Var, ModelError> {
    if commands.len() != world.f_future {
        return Err(ModelError::LengthMismatch {
            context: "plan_all commands",
            expected: world.f_future,
            got: commands.len(),
        });
    }
    let rows: Vec<(usize, Command)> = commands.iter().copied().enumerate().collect();
    let queries = build_queries(tape, store, &rows, None);
    Ok(decode(tape, store, world, model, features, queries))
}

/// Accumulates per-step translations into absolute positions (the pose
/// update is exactly additive): `positions = L * deltas` with `L` the
/// lower-triangular ones matrix.
pub fn integrate_deltas(tape: &mut Tape, deltas: Var) -> Var {
    let (f, two) = tape.shape(deltas);
    debug_assert_eq!(two, 2);
    let mut tri = vec![0.0; f * f];
    for r in 0..f {
        for c in 0..=r {
            tri[r * f + c] = 1.0;
        }
    }
    let l = tape.constant(tri, f, f);
    tape.matmul(l, deltas)
}
