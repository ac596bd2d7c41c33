//! Training loop: per-episode forward/backward over the joint objective,
//! batched across episodes, with teacher forcing scheduled into
//! autoregressive rollout.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{AdamW, AdamWConfig, ParamStore, Tape, Var};
use crate::encoder::{encode_frame, encode_scene, BevStateVar};
use crate::gridworld::{
    bev_class_map, ego_delta, poses_from_trajectory, render_observation_any, EgoMotion,
    Observation, Pose, SceneEpisode,
};
use crate::heads::{decode_occupancy, plan_over_states, PlanContext};
use crate::model::{build_params, CouplingMode};
use crate::objectives::{align_loss, occ_loss, plan_loss, total_loss, tss_loss};
use crate::predictor::{rollout, RolloutOptions, StreamMemory};
use crate::rng::{substream, uniform01};

use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::dataset::{obtain_split, Split};
use super::HarnessError;

/// One training-log record; the log is line-delimited JSON with these keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub occ: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub bce: f64,
    pub align: Option<f64>,
    pub plan: f64,
    pub l2: f64,
    pub collision: f64,
    pub tss: Option<f64>,
    /// Fraction of rollout frames fed ground-truth-encoded states.
    pub tf_gt_fraction: f64,
    pub out_of_window_steps: usize,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<TrainRecord>,
    pub dataset_hash: u64,
}

impl TrainOutcome {
    /// Trailing-window mean of the total loss over the first `k` steps.
    pub fn smoothed_first(&self, k: usize) -> f64 {
        let k = k.min(self.records.len()).max(1);
        self.records[..k].iter().map(|r| r.total).sum::<f64>() / k as f64
    }

    pub fn smoothed_last(&self, k: usize) -> f64 {
        let k = k.min(self.records.len()).max(1);
        let n = self.records.len();
        self.records[n - k..].iter().map(|r| r.total).sum::<f64>() / k as f64
    }
}

pub(crate) struct EpisodeLosses {
    pub total: f64,
    pub occ: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub bce: f64,
    pub align: Option<f64>,
    pub plan: f64,
    pub l2: f64,
    pub collision: f64,
    pub tss: Option<f64>,
    pub out_of_window: usize,
}

/// Ground-truth future motion/pose pairs for rollout conditioning.
pub(crate) fn future_actions(
    episode: &SceneEpisode,
    poses: &[Pose],
) -> Result<Vec<(EgoMotion, Pose)>, HarnessError> {
    let cfg = &episode.config;
    (1..=cfg.f_future)
        .map(|t| {
            let m = ego_delta(&episode.ego, t as i32).map_err(HarnessError::Episode)?;
            Ok((m, poses[cfg.h_past + t]))
        })
        .collect()
}

/// Builds the full training graph for one episode and returns loss values
/// plus parameter gradients (store block layout).
pub(crate) fn forward_episode(
    cfg: &RunConfig,
    store: &ParamStore,
    episode: &SceneEpisode,
    use_gt_state: &[bool],
) -> Result<(EpisodeLosses, Vec<Vec<f64>>), HarnessError> {
    let world = &cfg.world;
    let model = &cfg.model;
    let f = world.f_future;
    let mut tape = Tape::new();
    let poses = poses_from_trajectory(&episode.ego);
    let obs: Vec<&Observation> = (world.first_frame()..=0)
        .map(|t| {
            episode
                .observation_at(t)
                .ok_or_else(|| HarnessError::Config(format!("missing observation at {t}")))
        })
        .collect::<Result<_, _>>()?;
    let window_poses = &poses[..world.h_past + 1];
    let enc_states = encode_scene(&mut tape, store, world, model, &obs, window_poses)?;
    let current = *enc_states.last().unwrap();
    let mut memory = StreamMemory::seeded(model.memory, &enc_states);
    let future = future_actions(episode, &poses)?;

    // Ground-truth-encoded future states for teacher forcing and TSS. The
    // teacher-forced memory entries are detached constants: gradients do
    // not flow back through them, which truncates backpropagation at the
    // forced frames exactly as teacher forcing intends.
    let need_future_enc: Vec<bool> = (0..f)
        .map(|s| cfg.loss.tss || use_gt_state.get(s).copied().unwrap_or(false))
        .collect();
    let mut future_enc: Vec<Option<BevStateVar>> = vec![None; f];
    for s in 0..f {
        if need_future_enc[s] {
            let t = (s + 1) as i32;
            let fobs = render_observation_any(episode, t, &cfg.gen.noise)
                .map_err(HarnessError::Episode)?;
            let pose = poses[world.h_past + s + 1];
            future_enc[s] = Some(encode_frame(
                &mut tape, store, world, model, &fobs, &pose, &pose,
            )?);
        }
    }
    let push_overrides: Vec<Option<Var>> = (0..f)
        .map(|s| {
            if use_gt_state.get(s).copied().unwrap_or(false) {
                future_enc[s].map(|st| {
                    let vals = tape.value(st.features).to_vec();
                    let (r, c) = tape.shape(st.features);
                    tape.constant(vals, r, c)
                })
            } else {
                None
            }
        })
        .collect();

    let opts = RolloutOptions {
        feature_alignment: model.feature_alignment,
        world_mode: model.world_mode,
        advance_memory: false,
        push_overrides: &push_overrides,
    };
    let rolled = rollout(
        &mut tape, store, world, model, &mut memory, &future, f, &opts,
    )?;

    // Occupancy supervision over the current and all future frames.
    let mut occ_frames = Vec::with_capacity(f + 1);
    let cur_logits = decode_occupancy(&mut tape, store, world, model, current.features)?;
    occ_frames.push((cur_logits, episode.occ_at(0).unwrap()));
    for (s, step) in rolled.iter().enumerate() {
        let logits = decode_occupancy(&mut tape, store, world, model, step.state.features)?;
        occ_frames.push((logits, episode.occ_at((s + 1) as i32).unwrap()));
    }
    let occ_parts = occ_loss(&mut tape, &occ_frames)?;

    // Alignment supervision on the auxiliary semantic maps.
    let align_var = if model.feature_alignment {
        let mut per_step = Vec::with_capacity(f);
        for (s, step) in rolled.iter().enumerate() {
            let aux = step.aux_logits.expect("alignment enabled");
            let target = bev_class_map(episode.occ_at((s + 1) as i32).unwrap());
            per_step.push(align_loss(&mut tape, aux, &target)?);
        }
        let sum = tape.add_n(&per_step);
        Some(tape.scale(sum, 1.0 / f as f64))
    } else {
        None
    };

    // Planning supervision.
    let sampler = cfg.plan.sampler.clone();
    let ctx = PlanContext {
        store,
        world,
        model,
        commands: &episode.commands,
        future: &future,
        sampler: &sampler,
        footprint: cfg.plan.footprint.footprint(),
        cost: cfg.plan.cost,
    };
    let plan_states: Vec<BevStateVar> = match cfg.plan.mode {
        CouplingMode::Decoupled => vec![current],
        _ => {
            let mut v = vec![current];
            v.extend(rolled.iter().take(f - 1).map(|r| r.state));
            v
        }
    };
    let planned = plan_over_states(&mut tape, &ctx, &plan_states, cfg.plan.mode)?;
    let positions = crate::heads::integrate_deltas(&mut tape, planned.deltas);
    let gt_future: Vec<[f64; 2]> = (1..=f)
        .map(|t| episode.ego.position(t as i32).unwrap())
        .collect();
    let gt_frames: Vec<&crate::gridworld::SemanticOccGrid> =
        (1..=f).map(|t| episode.occ_at(t as i32).unwrap()).collect();
    let fp = cfg.plan.footprint.footprint();
    let plan_parts = plan_loss(
        &mut tape,
        positions,
        &gt_future,
        &gt_frames,
        world,
        &fp,
        &cfg.loss.weights(),
    )?;

    // Optional temporal self-supervision.
    let tss_var = if cfg.loss.tss {
        let preds: Vec<Var> = rolled.iter().map(|r| r.state.features).collect();
        let encs: Vec<Var> = future_enc
            .iter()
            .map(|o| o.expect("tss requires future encodings").features)
            .collect();
        Some(tss_loss(&mut tape, &preds, &encs)?)
    } else {
        None
    };

    let parts = total_loss(
        &mut tape,
        align_var,
        occ_parts.total,
        plan_parts.total,
        tss_var,
        &cfg.loss.weights(),
    );
    let total_value = tape.scalar(parts.total);
    let grads = tape.backward(parts.total);
    let mut sink = store.zero_grads();
    tape.accumulate_param_grads(&grads, &mut sink);
    Ok((
        EpisodeLosses {
            total: total_value,
            occ: parts.occ,
            ce: occ_parts.ce,
            lovasz: occ_parts.lovasz,
            bce: occ_parts.bce,
            align: parts.align,
            plan: parts.plan,
            l2: plan_parts.l2,
            collision: plan_parts.collision,
            tss: parts.tss,
            out_of_window: plan_parts.diagnostics.out_of_window_steps,
        },
        sink,
    ))
}

/// Runs the optimization loop and writes the checkpoint and training log
/// under `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;
    let dataset = obtain_split(cfg, Split::Train)?;
    let mut store = build_params(&cfg.world, &cfg.model, cfg.plan.mode, cfg.seed);
    let mut optimizer = AdamW::new(
        AdamWConfig {
            lr: cfg.optim.lr,
            lr_min: cfg.optim.lr_min,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: 1e-8,
            weight_decay: cfg.optim.weight_decay,
            total_steps: cfg.optim.steps,
        },
        &store,
    );
    let mut sampling_rng = substream(cfg.seed, "sampling", 0);
    let mut tf_rng = substream(cfg.seed, "tf", 0);
    let n_episodes = dataset.episodes.len();
    let mut order: Vec<usize> = (0..n_episodes).collect();
    let mut cursor = n_episodes; // trigger an initial shuffle
    let f = cfg.world.f_future;

    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    use std::io::Write;
    writeln!(
        log,
        "{}",
        serde_json::json!({
            "config_hash": format!("{:016x}", cfg.config_hash()),
            "arch_hash": format!("{:016x}", cfg.arch_hash()),
            "dataset_hash": format!("{:016x}", dataset.hash),
            "params": store.total_params(),
        })
    )?;

    let mut records = Vec::with_capacity(cfg.optim.steps);
    for step in 0..cfg.optim.steps {
        // Epoch-shuffled batch sampling.
        let mut batch_idx = Vec::with_capacity(cfg.optim.batch);
        for _ in 0..cfg.optim.batch {
            if cursor >= n_episodes {
                shuffle(&mut order, &mut sampling_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        // Teacher-forcing schedule: full ground-truth memory early, then
        // per-frame scheduled sampling toward model states.
        let progress = step as f64 / cfg.optim.steps.max(1) as f64;
        let p_model = if progress < cfg.optim.tf_fraction || cfg.optim.tf_fraction >= 1.0 {
            0.0
        } else {
            ((progress - cfg.optim.tf_fraction) / (1.0 - cfg.optim.tf_fraction)).clamp(0.0, 1.0)
        };
        let tf_flags: Vec<Vec<bool>> = (0..cfg.optim.batch)
            .map(|_| (0..f).map(|_| uniform01(&mut tf_rng) >= p_model).collect())
            .collect();
        let gt_frames_used: usize = tf_flags
            .iter()
            .flat_map(|v| v.iter())
            .filter(|&&b| b)
            .count();

        let results: Result<Vec<(EpisodeLosses, Vec<Vec<f64>>)>, HarnessError> = batch_idx
            .par_iter()
            .zip(tf_flags.par_iter())
            .map(|(&ei, flags)| forward_episode(cfg, &store, &dataset.episodes[ei], flags))
            .collect();
        let results = results?;

        let inv_batch = 1.0 / cfg.optim.batch as f64;
        let mut grads = store.zero_grads();
        let mut acc = BatchAcc::default();
        for (losses, g) in &results {
            for (dst, src) in grads.iter_mut().zip(g) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
            acc.add(losses);
        }
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv_batch;
            }
        }
        let record = acc.record(
            step,
            cfg.optim.batch,
            gt_frames_used as f64 / (cfg.optim.batch * f) as f64,
        );
        if !record.total.is_finite() {
            let dump = serde_json::json!({
                "step": step,
                "batch_episodes": batch_idx,
                "episode_seeds": batch_idx
                    .iter()
                    .map(|&i| dataset.episodes[i].seed)
                    .collect::<Vec<_>>(),
                "losses": results.iter().map(|(l, _)| l.total).collect::<Vec<_>>(),
            });
            std::fs::write(
                cfg.out_dir.join("divergence.json"),
                serde_json::to_string_pretty(&dump).unwrap(),
            )?;
            return Err(HarnessError::Diverged { step });
        }
        let lr = optimizer.apply(&mut store, &grads);
        let record = TrainRecord { lr, ..record };
        writeln!(log, "{}", serde_json::to_string(&record).unwrap())?;
        records.push(record);
    }
    log.flush()?;
    let ckpt_path = cfg.out_dir.join("ckpt.bin");
    save_checkpoint(
        &ckpt_path,
        cfg,
        &store,
        Some(&optimizer),
        cfg.optim.steps as u64,
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        records,
        dataset_hash: dataset.hash,
    })
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = (crate::rng::uniform01(rng) * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};

    fn tiny_cfg(seed: u64, out: &str) -> RunConfig {
        let text = "\
            [world]\nbev_h = 16\nbev_w = 16\n\
            [gen]\nroad_half_width = 4\n\
            [model]\ndim = 16\nact_dim = 8\nocc_hidden = 16\nalign_hidden = 8\nadapter_channels = 4\nplan_hidden = 8\n\
            [optim]\nsteps = 4\nbatch = 2\n\
            [data]\ntrain_episodes = 4\neval_episodes = 2\n";
        let mut cfg = RunConfig::from_toml(text, &[], Some(seed)).unwrap();
        cfg.out_dir = std::env::temp_dir().join(format!("rwm_train_{out}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&cfg.out_dir);
        cfg
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_cfg(5, "zerolr");
        cfg.optim.lr = 0.0;
        cfg.optim.lr_min = 0.0;
        cfg.optim.steps = 1;
        let before = build_params(&cfg.world, &cfg.model, cfg.plan.mode, cfg.seed);
        let outcome = train(&cfg).unwrap();
        let ckpt = load_checkpoint(&outcome.checkpoint).unwrap();
        for (a, b) in before.blocks().iter().zip(ckpt.store.blocks()) {
            assert_eq!(a.data, b.data, "block {} changed under lr 0", a.name);
        }
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }

    #[test]
    fn same_seed_reproduces_the_training_log() {
        let cfg_a = tiny_cfg(9, "det_a");
        let cfg_b = {
            let mut c = tiny_cfg(9, "det_b");
            c.seed = 9;
            c
        };
        let a = train(&cfg_a).unwrap();
        let b = train(&cfg_b).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.plan.to_bits(), rb.plan.to_bits());
        }
        std::fs::remove_dir_all(&cfg_a.out_dir).unwrap();
        std::fs::remove_dir_all(&cfg_b.out_dir).unwrap();
    }

    #[test]
    fn checkpoint_reload_reproduces_forward_bitwise() {
        let cfg = tiny_cfg(11, "fwd");
        let store = build_params(&cfg.world, &cfg.model, cfg.plan.mode, cfg.seed);
        let ds = obtain_split(&cfg, Split::Train).unwrap();
        let flags = vec![false; cfg.world.f_future];
        let (before, _) = forward_episode(&cfg, &store, &ds.episodes[0], &flags).unwrap();
        let path = cfg.out_dir.join("ckpt.bin");
        save_checkpoint(&path, &cfg, &store, None, 0).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let (after, _) = forward_episode(&cfg, &ckpt.store, &ds.episodes[0], &flags).unwrap();
        assert_eq!(before.total.to_bits(), after.total.to_bits());
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }

    #[test]
    fn alternate_paths_train_and_stay_finite() {
        // Dense attention, cross-attention conditioning and temporal
        // self-supervision together in one short run.
        let mut cfg = tiny_cfg(15, "alt");
        cfg.model.dense_attention = true;
        cfg.model.conditioning = crate::model::Conditioning::CrossAttention;
        cfg.loss.tss = true;
        cfg.optim.steps = 2;
        let outcome = train(&cfg).unwrap();
        assert!(outcome.records.iter().all(|r| r.total.is_finite()));
        assert!(outcome.records[0].tss.is_some());
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let mut cfg = tiny_cfg(13, "diverge");
        // Runaway negative decay inflates parameters exponentially until
        // the forward pass overflows.
        cfg.optim.weight_decay = -1e8;
        cfg.optim.steps = 30;
        match train(&cfg) {
            Err(HarnessError::Diverged { .. }) => {
                assert!(cfg.out_dir.join("divergence.json").is_file());
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }
}

#[derive(Default)]
struct BatchAcc {
    total: f64,
    occ: f64,
    ce: f64,
    lovasz: f64,
    bce: f64,
    align: f64,
    align_any: bool,
    plan: f64,
    l2: f64,
    collision: f64,
    tss: f64,
    tss_any: bool,
    out_of_window: usize,
    n: usize,
}

impl BatchAcc {
    fn add(&mut self, l: &EpisodeLosses) {
        self.total += l.total;
        self.occ += l.occ;
        self.ce += l.ce;
        self.lovasz += l.lovasz;
        self.bce += l.bce;
        if let Some(a) = l.align {
            self.align += a;
            self.align_any = true;
        }
        self.plan += l.plan;
        self.l2 += l.l2;
        self.collision += l.collision;
        if let Some(t) = l.tss {
            self.tss += t;
            self.tss_any = true;
        }
        self.out_of_window += l.out_of_window;
        self.n += 1;
    }

    fn record(&self, step: usize, batch: usize, tf_gt_fraction: f64) -> TrainRecord {
        let inv = 1.0 / batch as f64;
        TrainRecord {
            step,
            lr: 0.0,
            total: self.total * inv,
            occ: self.occ * inv,
            ce: self.ce * inv,
            lovasz: self.lovasz * inv,
            bce: self.bce * inv,
            align: self.align_any.then_some(self.align * inv),
            plan: self.plan * inv,
            l2: self.l2 * inv,
            collision: self.collision * inv,
            tss: self.tss_any.then_some(self.tss * inv),
            tf_gt_fraction,
            out_of_window_steps: self.out_of_window,
        }
    }
}

