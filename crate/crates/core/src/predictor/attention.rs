//! Attention blocks of the future predictor: deformable sampling by
//! default, dense attention behind a config switch, plus the two action
//! conditioning interfaces.

use crate::ad::{DeformGeom, ParamStore, Tape, Var};
use crate::gridworld::WorldConfig;
use crate::model::ModelConfig;

/// Deformable attention with a residual connection: learned per-query
/// sampling offsets around the query's own reference point, bilinear
/// feature sampling, per-head softmax weights over (map, point).
pub fn deform_attn(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    maps: &[Var],
    world: &WorldConfig,
    model: &ModelConfig,
    max_maps: usize,
) -> Var {
    let n = world.cells();
    let (heads, points) = (model.heads, model.points);
    let m_used = maps.len();
    debug_assert!(m_used >= 1 && m_used <= max_maps);
    let xn = tape.layer_norm(x, model.ln_eps);

    let off_w = tape.param(store, &format!("{prefix}.off.w"));
    let off_b = tape.param(store, &format!("{prefix}.off.b"));
    let att_w = tape.param(store, &format!("{prefix}.attw.w"));
    let att_b = tape.param(store, &format!("{prefix}.attw.b"));
    let mut offsets = tape.linear(xn, off_w, Some(off_b));
    let mut att = tape.linear(xn, att_w, Some(att_b));
    if m_used < max_maps {
        // Keep the per-head chunks for the maps that exist; within one head
        // the map index is the middle axis, so the kept columns are the head
        // block's prefix.
        let mut off_parts = Vec::with_capacity(heads);
        let mut att_parts = Vec::with_capacity(heads);
        for h in 0..heads {
            off_parts.push(tape.slice_cols(
                offsets,
                h * max_maps * points * 2,
                m_used * points * 2,
            ));
            att_parts.push(tape.slice_cols(att, h * max_maps * points, m_used * points));
        }
        offsets = tape.concat_cols(&off_parts);
        att = tape.concat_cols(&att_parts);
    }
    let samples = heads * m_used * points;
    // Reference points: each query samples around its own cell.
    let mut refs = Vec::with_capacity(n * samples * 2);
    for r in 0..world.bev_h {
        for c in 0..world.bev_w {
            for _ in 0..samples {
                refs.push(c as f64);
                refs.push(r as f64);
            }
        }
    }
    let refs = tape.constant(refs, n, samples * 2);
    let coords = tape.add(offsets, refs);
    let att_rows = tape.reshape(att, n * heads, m_used * points);
    let att_sm = tape.softmax_rows(att_rows);
    let weights = tape.reshape(att_sm, n, samples);

    let v_w = tape.param(store, &format!("{prefix}.v.w"));
    let v_b = tape.param(store, &format!("{prefix}.v.b"));
    let vmaps: Vec<Var> = maps
        .iter()
        .map(|&m| tape.linear(m, v_w, Some(v_b)))
        .collect();
    let geom = DeformGeom {
        n,
        heads,
        maps: m_used,
        points,
        map_h: world.bev_h,
        map_w: world.bev_w,
        dh: model.dim / heads,
    };
    let agg = tape.deform_agg(&vmaps, coords, weights, geom);
    let o_w = tape.param(store, &format!("{prefix}.o.w"));
    let o_b = tape.param(store, &format!("{prefix}.o.b"));
    let out = tape.linear(agg, o_w, Some(o_b));
    tape.add(x, out)
}

/// Dense single-head attention over whole maps with a residual connection;
/// substitutes for deformable sampling on small grids.
pub fn dense_attn(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    maps: &[Var],
    model: &ModelConfig,
) -> Var {
    let xn = tape.layer_norm(x, model.ln_eps);
    let q_w = tape.param(store, &format!("{prefix}.q.w"));
    let q_b = tape.param(store, &format!("{prefix}.q.b"));
    let k_w = tape.param(store, &format!("{prefix}.k.w"));
    let k_b = tape.param(store, &format!("{prefix}.k.b"));
    let v_w = tape.param(store, &format!("{prefix}.v.w"));
    let v_b = tape.param(store, &format!("{prefix}.v.b"));
    let q = tape.linear(xn, q_w, Some(q_b));
    let scale = 1.0 / (model.dim as f64).sqrt();
    let mut score_parts = Vec::with_capacity(maps.len());
    let mut values = Vec::with_capacity(maps.len());
    for &m in maps {
        let k = tape.linear(m, k_w, Some(k_b));
        let s = tape.matmul_nt(q, k);
        score_parts.push(tape.scale(s, scale));
        values.push(tape.linear(m, v_w, Some(v_b)));
    }
    let scores = if score_parts.len() == 1 {
        score_parts[0]
    } else {
        tape.concat_cols(&score_parts)
    };
    let probs = tape.softmax_rows(scores);
    let mut ctx_parts = Vec::with_capacity(maps.len());
    let mut off = 0;
    for (i, &v) in values.iter().enumerate() {
        let cols = tape.shape(score_parts[i]).1;
        let p = tape.slice_cols(probs, off, cols);
        ctx_parts.push(tape.matmul(p, v));
        off += cols;
    }
    let ctx = if ctx_parts.len() == 1 {
        ctx_parts[0]
    } else {
        tape.add_n(&ctx_parts)
    };
    let o_w = tape.param(store, &format!("{prefix}.o.w"));
    let o_b = tape.param(store, &format!("{prefix}.o.b"));
    let out = tape.linear(ctx, o_w, Some(o_b));
    tape.add(x, out)
}

/// Additive action conditioning: a projection of (mean embedding, final
/// embedding) broadcast over the plane.
pub fn condition_add(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    action_embeds: &[Var],
) -> Var {
    let tokens = tape.concat_rows(action_embeds);
    let mean = tape.mean_rows(tokens);
    let last = *action_embeds.last().expect("conditioning needs actions");
    let cat = tape.concat_cols(&[mean, last]);
    let w = tape.param(store, &format!("{prefix}.cond.w"));
    let b = tape.param(store, &format!("{prefix}.cond.b"));
    let cond = tape.linear(cat, w, Some(b));
    tape.add_broadcast_row(x, cond)
}

/// Cross-attention conditioning over the action embedding tokens
/// (ablation interface).
pub fn condition_cross_attn(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    action_embeds: &[Var],
    model: &ModelConfig,
) -> Var {
    let tokens = tape.concat_rows(action_embeds);
    let xn = tape.layer_norm(x, model.ln_eps);
    let q_w = tape.param(store, &format!("{prefix}.cond.q.w"));
    let q_b = tape.param(store, &format!("{prefix}.cond.q.b"));
    let k_w = tape.param(store, &format!("{prefix}.cond.k.w"));
    let k_b = tape.param(store, &format!("{prefix}.cond.k.b"));
    let v_w = tape.param(store, &format!("{prefix}.cond.v.w"));
    let v_b = tape.param(store, &format!("{prefix}.cond.v.b"));
    let o_w = tape.param(store, &format!("{prefix}.cond.o.w"));
    let o_b = tape.param(store, &format!("{prefix}.cond.o.b"));
    let q = tape.linear(xn, q_w, Some(q_b));
    let k = tape.linear(tokens, k_w, Some(k_b));
    let v = tape.linear(tokens, v_w, Some(v_b));
    let s = tape.matmul_nt(q, k);
    let s = tape.scale(s, 1.0 / (model.act_dim as f64).sqrt());
    let p = tape.softmax_rows(s);
    let ctx = tape.matmul(p, v);
    let out = tape.linear(ctx, o_w, Some(o_b));
    tape.add(x, out)
}

/// Pre-norm feed-forward block with a residual connection.
pub fn ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, model: &ModelConfig) -> Var {
    let xn = tape.layer_norm(x, model.ln_eps);
    let w1 = tape.param(store, &format!("{prefix}.ffn.l1.w"));
    let b1 = tape.param(store, &format!("{prefix}.ffn.l1.b"));
    let w2 = tape.param(store, &format!("{prefix}.ffn.l2.w"));
    let b2 = tape.param(store, &format!("{prefix}.ffn.l2.b"));
    let h = tape.linear(xn, w1, Some(b1));
    let h = tape.silu(h);
    let out = tape.linear(h, w2, Some(b2));
    tape.add(x, out)
}
