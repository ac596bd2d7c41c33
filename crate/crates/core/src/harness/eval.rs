//! Evaluation: end-to-end rollout, decoding, planning and metric
//! aggregation over a split, plus the copy-last-frame baseline.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{ParamStore, Tape};
use crate::encoder::encode_scene;
use crate::gridworld::{ego_delta, poses_from_trajectory, Observation, SceneEpisode, SemanticOccGrid};
use crate::heads::{decode_occupancy, plan_episode, PlanContext};
use crate::metrics::{
    collision_rate, forecast_iou, group_classes, horizon_frames, l2_planning,
    latency_from_samples, IouTriple, L2Report, LatencyStats, MetricReport,
};
use crate::model::CouplingMode;
use crate::predictor::{rollout, RolloutOptions, StreamMemory};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::future_actions;
use super::HarnessError;

/// Wall-clock statistics of the planning pass; kept out of the
/// deterministic metric report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalLatency {
    pub plan_total: LatencyStats,
    pub phases: BTreeMap<String, LatencyStats>,
}

pub struct EvalOutput {
    pub report: MetricReport,
    pub latency: EvalLatency,
}

struct EpisodeEval {
    gmo: IouTriple,
    gso: IouTriple,
    per_class: Vec<(String, f64)>,
    l2: L2Report,
    trajectory: Vec<[f64; 2]>,
    latency_ms: f64,
    phases: Vec<(String, f64)>,
}

/// Refuses a checkpoint whose architecture-shape keys disagree with the
/// evaluating configuration.
pub fn check_arch(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    if cfg.arch_hash() != ckpt.arch_hash {
        return Err(HarnessError::ArchMismatch {
            expected: format!("{:016x}", cfg.arch_hash()),
            got: format!("{:016x}", ckpt.arch_hash),
        });
    }
    Ok(())
}

/// Evaluates a trained parameter store over episodes: forecast IoU from a
/// ground-truth-action rollout, planning metrics from the requested
/// coupling mode.
pub fn evaluate(
    cfg: &RunConfig,
    store: &ParamStore,
    episodes: &[SceneEpisode],
    mode: CouplingMode,
) -> Result<EvalOutput, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::Config("evaluation split is empty".into()));
    }
    let groups = group_classes(&cfg.world);
    let per_episode: Result<Vec<EpisodeEval>, HarnessError> = episodes
        .par_iter()
        .map(|ep| eval_episode(cfg, store, ep, mode))
        .collect();
    let per_episode = per_episode?;
    let horizons = horizon_frames(&cfg.world);
    let n = per_episode.len() as f64;

    let mut gmo = IouTriple::default();
    let mut gso = IouTriple::default();
    let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
    let mut l2_per: Vec<f64> = vec![0.0; horizons.len()];
    let mut l2_avg = 0.0;
    let mut latency_samples = Vec::with_capacity(per_episode.len());
    let mut phase_samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in &per_episode {
        add_triple(&mut gmo, &e.gmo);
        add_triple(&mut gso, &e.gso);
        for (name, v) in &e.per_class {
            *per_class.entry(name.clone()).or_insert(0.0) += v;
        }
        for (i, (_, v)) in e.l2.per_horizon.iter().enumerate() {
            l2_per[i] += v;
        }
        l2_avg += e.l2.avg;
        latency_samples.push(e.latency_ms);
        for (name, ms) in &e.phases {
            phase_samples.entry(name.clone()).or_default().push(*ms);
        }
    }
    scale_triple(&mut gmo, 1.0 / n);
    scale_triple(&mut gso, 1.0 / n);
    for v in per_class.values_mut() {
        *v /= n;
    }
    let mean = IouTriple {
        current: (gmo.current + gso.current) / 2.0,
        future: (gmo.future + gso.future) / 2.0,
        future_weighted: (gmo.future_weighted + gso.future_weighted) / 2.0,
    };

    // Collision rate over all (trajectory, step) pairs.
    let trajs: Vec<Vec<[f64; 2]>> = per_episode.iter().map(|e| e.trajectory.clone()).collect();
    let gt_frames: Vec<Vec<&SemanticOccGrid>> = episodes
        .iter()
        .map(|ep| {
            (1..=cfg.world.f_future)
                .map(|t| ep.occ_at(t as i32).unwrap())
                .collect()
        })
        .collect();
    let coll = collision_rate(
        &trajs,
        &gt_frames,
        &cfg.world,
        &cfg.plan.footprint.footprint(),
        &groups.gmo,
    )?;

    let mut group_map = BTreeMap::new();
    group_map.insert("gmo".to_string(), gmo);
    group_map.insert("gso".to_string(), gso);
    group_map.insert("mean".to_string(), mean);
    let report = MetricReport {
        groups: group_map,
        per_class_future: per_class,
        l2: L2Report {
            per_horizon: horizons
                .iter()
                .enumerate()
                .map(|(i, (label, _))| (label.clone(), l2_per[i] / n))
                .collect(),
            avg: l2_avg / n,
        },
        collision_rate_pct: coll,
        episodes: per_episode.len(),
    };
    let latency = EvalLatency {
        plan_total: latency_from_samples(&latency_samples),
        phases: phase_samples
            .into_iter()
            .map(|(k, v)| (k, latency_from_samples(&v)))
            .collect(),
    };
    Ok(EvalOutput { report, latency })
}

fn eval_episode(
    cfg: &RunConfig,
    store: &ParamStore,
    episode: &SceneEpisode,
    mode: CouplingMode,
) -> Result<EpisodeEval, HarnessError> {
    let world = &cfg.world;
    let model = &cfg.model;
    let f = world.f_future;
    let groups = group_classes(world);
    let mut tape = Tape::inference();
    let poses = poses_from_trajectory(&episode.ego);
    let obs: Vec<&Observation> = (world.first_frame()..=0)
        .map(|t| episode.observation_at(t).unwrap())
        .collect();
    let enc_states = encode_scene(&mut tape, store, world, model, &obs, &poses[..world.h_past + 1])?;
    let current = *enc_states.last().unwrap();
    let future = future_actions(episode, &poses)?;

    // Ground-truth-action rollout for forecasting metrics.
    let mut memory = StreamMemory::seeded(model.memory, &enc_states);
    let opts = RolloutOptions {
        feature_alignment: model.feature_alignment,
        world_mode: model.world_mode,
        advance_memory: false,
        push_overrides: &[],
    };
    let rolled = rollout(
        &mut tape, store, world, model, &mut memory, &future, f, &opts,
    )?;
    let mut pred_grids = Vec::with_capacity(f + 1);
    let cur_occ = decode_occupancy(&mut tape, store, world, model, current.features)?;
    pred_grids.push(cur_occ.to_grid(&tape, 0));
    for (s, step) in rolled.iter().enumerate() {
        let logits = decode_occupancy(&mut tape, store, world, model, step.state.features)?;
        pred_grids.push(logits.to_grid(&tape, (s + 1) as i32));
    }
    let pred_refs: Vec<&SemanticOccGrid> = pred_grids.iter().collect();
    let gt_refs: Vec<&SemanticOccGrid> = (0..=f)
        .map(|t| episode.occ_at(t as i32).unwrap())
        .collect();
    let gmo = forecast_iou(&pred_refs, &gt_refs, &groups.gmo, None)?;
    let gso = forecast_iou(&pred_refs, &gt_refs, &groups.gso, None)?;
    let per_class: Vec<(String, f64)> = groups
        .per_class
        .iter()
        .map(|(name, id)| {
            forecast_iou(&pred_refs, &gt_refs, &[*id], None).map(|t| (name.clone(), t.future))
        })
        .collect::<Result<_, _>>()?;

    // Planning pass in the requested coupling mode.
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
    let plan = plan_episode(&mut tape, &ctx, &enc_states, mode)?;
    let gt_future: Vec<[f64; 2]> = (1..=f)
        .map(|t| episode.ego.position(t as i32).unwrap())
        .collect();
    let l2 = l2_planning(&plan.trajectory, &gt_future, &horizon_frames(world))?;
    Ok(EpisodeEval {
        gmo,
        gso,
        per_class,
        l2,
        trajectory: plan.trajectory,
        latency_ms: plan.latency_ms,
        phases: plan.phases,
    })
}

/// Data-only floor: the last observed ground-truth frame is the prediction
/// for every future frame, and planning extrapolates the current ego
/// velocity.
pub fn evaluate_baseline(
    cfg: &RunConfig,
    episodes: &[SceneEpisode],
) -> Result<MetricReport, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::Config("evaluation split is empty".into()));
    }
    let world = &cfg.world;
    let f = world.f_future;
    let groups = group_classes(world);
    let horizons = horizon_frames(world);
    let n = episodes.len() as f64;
    let mut gmo = IouTriple::default();
    let mut gso = IouTriple::default();
    let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
    let mut l2_per: Vec<f64> = vec![0.0; horizons.len()];
    let mut l2_avg = 0.0;
    let mut trajs = Vec::with_capacity(episodes.len());
    let mut gt_frames: Vec<Vec<&SemanticOccGrid>> = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let last = ep.occ_at(0).unwrap();
        let pred_refs: Vec<&SemanticOccGrid> = (0..=f).map(|_| last).collect();
        let gt_refs: Vec<&SemanticOccGrid> = (0..=f).map(|t| ep.occ_at(t as i32).unwrap()).collect();
        add_triple(&mut gmo, &forecast_iou(&pred_refs, &gt_refs, &groups.gmo, None)?);
        add_triple(&mut gso, &forecast_iou(&pred_refs, &gt_refs, &groups.gso, None)?);
        for (name, id) in &groups.per_class {
            *per_class.entry(name.clone()).or_insert(0.0) +=
                forecast_iou(&pred_refs, &gt_refs, &[*id], None)?.future;
        }
        // Constant-velocity ego extrapolation.
        let delta = ego_delta(&ep.ego, 0).map_err(HarnessError::Episode)?;
        let traj: Vec<[f64; 2]> = (1..=f as i32)
            .map(|t| {
                [
                    delta.translation[0] * t as f64,
                    delta.translation[1] * t as f64,
                ]
            })
            .collect();
        let gt_future: Vec<[f64; 2]> = (1..=f)
            .map(|t| ep.ego.position(t as i32).unwrap())
            .collect();
        let l2 = l2_planning(&traj, &gt_future, &horizons)?;
        for (i, (_, v)) in l2.per_horizon.iter().enumerate() {
            l2_per[i] += v;
        }
        l2_avg += l2.avg;
        trajs.push(traj);
        gt_frames.push((1..=f).map(|t| ep.occ_at(t as i32).unwrap()).collect());
    }
    scale_triple(&mut gmo, 1.0 / n);
    scale_triple(&mut gso, 1.0 / n);
    for v in per_class.values_mut() {
        *v /= n;
    }
    let mean = IouTriple {
        current: (gmo.current + gso.current) / 2.0,
        future: (gmo.future + gso.future) / 2.0,
        future_weighted: (gmo.future_weighted + gso.future_weighted) / 2.0,
    };
    let coll = collision_rate(
        &trajs,
        &gt_frames,
        world,
        &cfg.plan.footprint.footprint(),
        &groups.gmo,
    )?;
    let mut group_map = BTreeMap::new();
    group_map.insert("gmo".to_string(), gmo);
    group_map.insert("gso".to_string(), gso);
    group_map.insert("mean".to_string(), mean);
    Ok(MetricReport {
        groups: group_map,
        per_class_future: per_class,
        l2: L2Report {
            per_horizon: horizons
                .iter()
                .enumerate()
                .map(|(i, (label, _))| (label.clone(), l2_per[i] / n))
                .collect(),
            avg: l2_avg / n,
        },
        collision_rate_pct: coll,
        episodes: episodes.len(),
    })
}

fn add_triple(acc: &mut IouTriple, x: &IouTriple) {
    acc.current += x.current;
    acc.future += x.future;
    acc.future_weighted += x.future_weighted;
}

fn scale_triple(acc: &mut IouTriple, k: f64) {
    acc.current *= k;
    acc.future *= k;
    acc.future_weighted *= k;
}
