//! Model hyperparameters and parameter-block construction.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{xavier_uniform, ParamStore};
use crate::gridworld::WorldConfig;
use crate::rng::substream;

/// How ego actions condition the future predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Broadcast-added projection of the action embeddings (default).
    Add,
    /// Cross-attention over the action embedding tokens.
    CrossAttention,
}

/// Whether the trunk predicts residual changes or whole states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    Residual,
    /// Baseline that regenerates each state from scratch with the same
    /// trunk and parameter count.
    FullReconstruction,
}

/// Forecasting/planning coupling scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Candidate trajectories filtered by decoded occupancy condition the
    /// planner, which runs on rolled future states.
    Tight,
    /// Planner runs on rolled future states only (default).
    Semi,
    /// Planner reads only the current state; one decoder pass emits every
    /// future step.
    Decoupled,
}

impl CouplingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CouplingMode::Tight => "tight",
            CouplingMode::Semi => "semi",
            CouplingMode::Decoupled => "decoupled",
        }
    }
}

/// Width, depth and switches of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent feature width.
    pub dim: usize,
    /// Predictor transformer layers.
    pub layers: usize,
    pub heads: usize,
    /// Sampling points per (head, memory frame).
    pub points: usize,
    /// Streaming memory depth m.
    pub memory: usize,
    /// FFN hidden width = ffn_mult * dim.
    pub ffn_mult: usize,
    pub encoder_layers: usize,
    /// Action embedding width.
    pub act_dim: usize,
    pub occ_hidden: usize,
    pub align_hidden: usize,
    /// Plan-head adapter mid channels.
    pub adapter_channels: usize,
    pub plan_hidden: usize,
    /// Swap deformable sampling for dense attention (small grids only).
    pub dense_attention: bool,
    pub conditioning: Conditioning,
    /// Feature alignment on composed states.
    pub feature_alignment: bool,
    pub world_mode: WorldMode,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            points: 4,
            memory: 3,
            ffn_mult: 2,
            encoder_layers: 2,
            act_dim: 32,
            occ_hidden: 128,
            align_hidden: 32,
            adapter_channels: 16,
            plan_hidden: 64,
            dense_attention: false,
            conditioning: Conditioning::Add,
            feature_alignment: true,
            world_mode: WorldMode::Residual,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        self.ffn_mult * self.dim
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.points == 0 {
            return Err("dim, layers, heads and points must be >= 1".into());
        }
        if self.dim % self.heads != 0 {
            return Err(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.memory == 0 {
            return Err("memory depth must be >= 1".into());
        }
        if self.encoder_layers < 2 || self.encoder_layers > 4 {
            return Err("encoder_layers must be in [2, 4]".into());
        }
        if self.ln_eps <= 0.0 || !self.ln_eps.is_finite() {
            return Err("ln_eps must be > 0".into());
        }
        Ok(())
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Spread pattern for sampling-offset biases: distinct non-integer offsets
/// per (head, map, point) keep bilinear sampling away from grid-line kinks
/// at initialization.
fn offset_bias(heads: usize, maps: usize, points: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(heads * maps * points * 2);
    for i in 0..heads * maps * points {
        let angle = GOLDEN_ANGLE * (i as f64 + 1.0);
        let radius = 0.55 + 0.45 * ((i % points) as f64) / points.max(1) as f64;
        out.push(radius * angle.cos());
        out.push(radius * angle.sin());
    }
    out
}

fn linear_block(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    name: &str,
    rows: usize,
    cols: usize,
    gain: f64,
) {
    store.insert(
        &format!("{name}.w"),
        rows,
        cols,
        xavier_uniform(rng, rows, cols, gain),
    );
    store.insert(&format!("{name}.b"), 1, cols, vec![0.0; cols]);
}

fn zero_block(store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
    store.insert(&format!("{name}.w"), rows, cols, vec![0.0; rows * cols]);
    store.insert(&format!("{name}.b"), 1, cols, vec![0.0; cols]);
}

fn uniform_block(rng: &mut ChaCha12Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| crate::rng::uniform(rng, -scale, scale))
        .collect()
}

/// Builds every parameter block for the given configuration. Block presence
/// depends on the attention kind, the conditioning interface, and the
/// coupling mode; the residual and full-reconstruction world modes share an
/// identical layout (and therefore an identical parameter count).
pub fn build_params(
    world: &WorldConfig,
    model: &ModelConfig,
    coupling: CouplingMode,
    seed: u64,
) -> ParamStore {
    let mut rng = substream(seed, "init", 0);
    let rng = &mut rng;
    let mut store = ParamStore::new();
    let s = &mut store;
    let d = model.dim;
    let n = world.cells();
    let obs_ch = world.num_classes + 1;
    let classes = world.num_classes;

    // Scene encoder: conv stack with the ego embedding joined before the
    // final layer.
    for i in 0..model.encoder_layers {
        let ci = if i == 0 { obs_ch } else { d };
        linear_block(s, rng, &format!("enc.conv{i}"), 9 * ci, d, 1.0);
    }
    linear_block(s, rng, "enc.ego", 4, d, 1.0);

    // Action embedder.
    linear_block(s, rng, "act.l1", 3, model.act_dim, 1.0);
    linear_block(s, rng, "act.l2", model.act_dim, model.act_dim, 1.0);

    // Future predictor.
    s.insert("pred.query", n, d, uniform_block(rng, n * d, 0.1));
    for l in 0..model.layers {
        let p = format!("pred.l{l}");
        for (site, maps) in [("self", 1usize), ("cross", model.memory)] {
            if model.dense_attention {
                linear_block(s, rng, &format!("{p}.{site}.q"), d, d, 1.0);
                linear_block(s, rng, &format!("{p}.{site}.k"), d, d, 1.0);
            } else {
                let samples = model.heads * maps * model.points;
                s.insert(
                    &format!("{p}.{site}.off.w"),
                    d,
                    samples * 2,
                    xavier_uniform(rng, d, samples * 2, 0.1),
                );
                s.insert(
                    &format!("{p}.{site}.off.b"),
                    1,
                    samples * 2,
                    offset_bias(model.heads, maps, model.points),
                );
                linear_block(s, rng, &format!("{p}.{site}.attw"), d, samples, 0.5);
            }
            linear_block(s, rng, &format!("{p}.{site}.v"), d, d, 1.0);
            linear_block(s, rng, &format!("{p}.{site}.o"), d, d, 1.0);
        }
        match model.conditioning {
            Conditioning::Add => {
                linear_block(s, rng, &format!("{p}.cond"), 2 * model.act_dim, d, 1.0);
            }
            Conditioning::CrossAttention => {
                linear_block(s, rng, &format!("{p}.cond.q"), d, model.act_dim, 1.0);
                linear_block(s, rng, &format!("{p}.cond.k"), model.act_dim, model.act_dim, 1.0);
                linear_block(s, rng, &format!("{p}.cond.v"), model.act_dim, model.act_dim, 1.0);
                linear_block(s, rng, &format!("{p}.cond.o"), model.act_dim, d, 1.0);
            }
        }
        linear_block(s, rng, &format!("{p}.ffn.l1"), d, model.ffn(), 1.0);
        linear_block(s, rng, &format!("{p}.ffn.l2"), model.ffn(), d, 1.0);
    }
    // Residual output projection starts at zero so a fresh model is the
    // frozen-world map.
    zero_block(s, "pred.out", d, d);

    // Feature alignment: aux semantic head plus two modulation generators
    // initialized to the identity-equivalent LN pass (gamma halves 0.5,
    // beta 0).
    linear_block(s, rng, "align.aux.l1", d, model.align_hidden, 1.0);
    linear_block(s, rng, "align.aux.l2", model.align_hidden, classes, 1.0);
    let mut mod_bias = vec![0.5; d];
    mod_bias.resize(2 * d, 0.0);
    s.insert("align.occmod.w", classes, 2 * d, vec![0.0; classes * 2 * d]);
    s.insert("align.occmod.b", 1, 2 * d, mod_bias.clone());
    linear_block(s, rng, "align.egomod.l1", 3, model.align_hidden, 1.0);
    s.insert(
        "align.egomod.l2.w",
        model.align_hidden,
        2 * d,
        vec![0.0; model.align_hidden * 2 * d],
    );
    s.insert("align.egomod.l2.b", 1, 2 * d, mod_bias);

    // Occupancy head (channel-to-height).
    linear_block(s, rng, "occ.l1", d, model.occ_hidden, 1.0);
    linear_block(s, rng, "occ.l2", model.occ_hidden, world.z_bins * classes, 1.0);

    // Planning head.
    let plan_queries = match coupling {
        CouplingMode::Decoupled => world.f_future,
        _ => 1,
    };
    s.insert("plan.query", plan_queries, d, uniform_block(rng, plan_queries * d, 0.1));
    s.insert("plan.cmd", 3, d, uniform_block(rng, 3 * d, 0.1));
    let in_parts = if coupling == CouplingMode::Tight {
        // Filtered-candidate token starts silent: zero-initialized encoder.
        zero_block(s, "plan.tau", 2 * world.f_future, d);
        3
    } else {
        2
    };
    linear_block(s, rng, "plan.in", in_parts * d, d, 1.0);
    linear_block(s, rng, "plan.adapter.c0", 9 * d, model.adapter_channels, 1.0);
    linear_block(s, rng, "plan.adapter.c1", 9 * model.adapter_channels, d, 1.0);
    for nm in ["q", "k", "v", "o"] {
        linear_block(s, rng, &format!("plan.attn.{nm}"), d, d, 1.0);
    }
    linear_block(s, rng, "plan.ffn.l1", d, model.ffn(), 1.0);
    linear_block(s, rng, "plan.ffn.l2", model.ffn(), d, 1.0);
    linear_block(s, rng, "plan.out.l1", d, model.plan_hidden, 1.0);
    linear_block(s, rng, "plan.out.l2", model.plan_hidden, 2, 0.1);

    store
}

/// Zeroes a linear block's weight and bias (used by tests and ablations).
pub fn zero_out_block(store: &mut ParamStore, name: &str) {
    for suffix in [".w", ".b"] {
        let key = format!("{name}{suffix}");
        if store.contains(&key) {
            store.get_mut(&key).data.fill(0.0);
        }
    }
}
