//! Evaluation metrics: IoU families over class groups, planning L2,
//! collision rate, and latency profiling.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::footprint::{footprint_cells, waypoint_headings, Footprint};
use crate::gridworld::{class, SemanticOccGrid, WorldConfig};

/// Intersection-over-union of the voxels carrying any class from `set`,
/// defined as 1 when both grids are empty of those classes.
pub fn iou(pred: &SemanticOccGrid, gt: &SemanticOccGrid, set: &[u8]) -> f64 {
    debug_assert_eq!(pred.labels.len(), gt.labels.len(), "iou shape mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let pin = set.contains(&p);
        let gin = set.contains(&g);
        if pin && gin {
            inter += 1;
        }
        if pin || gin {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Current-frame, future-mean and time-weighted future IoU for one class
/// set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouTriple {
    pub current: f64,
    pub future: f64,
    pub future_weighted: f64,
}

/// Default time weights, proportional to (f - t + 1) for t in [1, f].
pub fn default_time_weights(f: usize) -> Vec<f64> {
    let total: f64 = (1..=f).map(|t| (f - t + 1) as f64).sum();
    (1..=f).map(|t| (f - t + 1) as f64 / total).collect()
}

/// IoU triple over a frame sequence holding the current frame first, then
/// the f future frames.
pub fn forecast_iou(
    pred: &[&SemanticOccGrid],
    gt: &[&SemanticOccGrid],
    set: &[u8],
    weights: Option<&[f64]>,
) -> Result<IouTriple, ModelError> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(ModelError::LengthMismatch {
            context: "forecast_iou frames",
            expected: gt.len().max(2),
            got: pred.len(),
        });
    }
    let f = pred.len() - 1;
    let default_w;
    let w = match weights {
        Some(w) => {
            if w.len() != f {
                return Err(ModelError::LengthMismatch {
                    context: "forecast_iou weights",
                    expected: f,
                    got: w.len(),
                });
            }
            w
        }
        None => {
            default_w = default_time_weights(f);
            &default_w
        }
    };
    let current = iou(pred[0], gt[0], set);
    let per_step: Vec<f64> = (1..=f).map(|t| iou(pred[t], gt[t], set)).collect();
    let future = per_step.iter().sum::<f64>() / f as f64;
    let future_weighted = per_step.iter().zip(w).map(|(v, wt)| v * wt).sum();
    Ok(IouTriple {
        current,
        future,
        future_weighted,
    })
}

/// Class grouping: movable (GMO), static (GSO), and the per-class map.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGroups {
    pub gmo: Vec<u8>,
    pub gso: Vec<u8>,
    /// (name, class id) for every non-free class.
    pub per_class: Vec<(String, u8)>,
}

/// Deterministic grouping of the synthetic classes: vehicles, pedestrians
/// and any extra classes are movable; road and static obstacles are
/// static; free belongs to neither group.
pub fn group_classes(world: &WorldConfig) -> ClassGroups {
    let mut gmo = Vec::new();
    let mut gso = Vec::new();
    let mut per_class = Vec::new();
    for c in 1..world.num_classes as u8 {
        match c {
            class::ROAD | class::OBSTACLE => gso.push(c),
            _ => gmo.push(c),
        }
        per_class.push((class::name(c).to_string(), c));
    }
    ClassGroups {
        gmo,
        gso,
        per_class,
    }
}

/// Planning L2 report: per labelled horizon and averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Report {
    pub per_horizon: Vec<(String, f64)>,
    pub avg: f64,
}

impl Default for L2Report {
    fn default() -> Self {
        L2Report {
            per_horizon: Vec::new(),
            avg: 0.0,
        }
    }
}

/// Horizon labels for the configured frame step. Whole-second horizons are
/// used when the future span covers at least two of them; otherwise every
/// future frame is labelled by its actual time so short horizons are
/// reported honestly rather than renamed.
pub fn horizon_frames(world: &WorldConfig) -> Vec<(String, usize)> {
    let targets = [1.0f64, 2.0, 3.0];
    let mut out = Vec::new();
    for &sec in &targets {
        let frame = (sec / world.dt).round() as usize;
        if frame >= 1 && frame <= world.f_future && (frame as f64 * world.dt - sec).abs() < 1e-9 {
            out.push((format!("{sec}s"), frame));
        }
    }
    if out.len() < 2 {
        out = (1..=world.f_future)
            .map(|t| (format!("{}s", t as f64 * world.dt), t))
            .collect();
    }
    out
}

/// Euclidean error between predicted and ground-truth positions at the
/// given horizons (1-based future frame indices), plus their mean.
pub fn l2_planning(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    horizons: &[(String, usize)],
) -> Result<L2Report, ModelError> {
    if pred.len() != gt.len() {
        return Err(ModelError::LengthMismatch {
            context: "l2_planning trajectories",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let mut per_horizon = Vec::with_capacity(horizons.len());
    let mut sum = 0.0;
    for (label, frame) in horizons {
        if *frame == 0 || *frame > pred.len() {
            return Err(ModelError::InvalidArgument(format!(
                "horizon frame {frame} outside trajectory of length {}",
                pred.len()
            )));
        }
        let p = pred[frame - 1];
        let g = gt[frame - 1];
        let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        per_horizon.push((label.clone(), d));
        sum += d;
    }
    Ok(L2Report {
        avg: sum / horizons.len() as f64,
        per_horizon,
    })
}

/// Fraction (percent) of (trajectory, step) pairs whose footprint overlaps
/// at least one movable-object cell of the ground truth.
pub fn collision_rate(
    trajectories: &[Vec<[f64; 2]>],
    gt_frames: &[Vec<&SemanticOccGrid>],
    world: &WorldConfig,
    fp: &Footprint,
    gmo: &[u8],
) -> Result<f64, ModelError> {
    if trajectories.is_empty() {
        return Err(ModelError::LengthMismatch {
            context: "collision_rate trajectories",
            expected: 1,
            got: 0,
        });
    }
    if trajectories.len() != gt_frames.len() {
        return Err(ModelError::LengthMismatch {
            context: "collision_rate frames",
            expected: trajectories.len(),
            got: gt_frames.len(),
        });
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (traj, frames) in trajectories.iter().zip(gt_frames) {
        if traj.len() != frames.len() {
            return Err(ModelError::LengthMismatch {
                context: "collision_rate steps",
                expected: traj.len(),
                got: frames.len(),
            });
        }
        let headings = waypoint_headings([0.0, 0.0], traj);
        for ((wp, hd), occ) in traj.iter().zip(&headings).zip(frames) {
            total += 1;
            let cells = footprint_cells(world, *wp, *hd, fp);
            if cells
                .cells
                .iter()
                .any(|&(r, c)| occ.column_has_class(r, c, gmo))
            {
                hits += 1;
            }
        }
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Latency statistics in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub samples: usize,
}

/// Profiles a callable: `warmup` unrecorded runs, then `repeats` timed
/// single-threaded runs; reports median and p90 by nearest rank.
pub fn latency_profile(mut f: impl FnMut(), warmup: usize, repeats: usize) -> LatencyStats {
    assert!(repeats >= 1, "latency_profile needs at least one repeat");
    for _ in 0..warmup {
        f();
    }
    let samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    latency_from_samples(&samples)
}

/// Summarizes already-collected latency samples.
pub fn latency_from_samples(samples: &[f64]) -> LatencyStats {
    if samples.is_empty() {
        return LatencyStats::default();
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    LatencyStats {
        median_ms: nearest_rank(&s, 0.5),
        p90_ms: nearest_rank(&s, 0.9),
        samples: samples.len(),
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Full evaluation report. IoU values are fractions in [0, 1] and are
/// conventionally printed x100.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed by group name ("gmo", "gso", "mean").
    pub groups: BTreeMap<String, IouTriple>,
    /// Per-class future IoU.
    pub per_class_future: BTreeMap<String, f64>,
    pub l2: L2Report,
    pub collision_rate_pct: f64,
    pub episodes: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, uniform, uniform_int};

    fn grid(labels: Vec<u8>) -> SemanticOccGrid {
        SemanticOccGrid {
            h: 3,
            w: 3,
            z: 1,
            timestamp: 0,
            labels,
        }
    }

    #[test]
    fn iou_basic_cases() {
        let a = grid(vec![1, 1, 0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(iou(&a, &a, &[1]), 1.0);
        let b = grid(vec![0, 0, 1, 1, 0, 1, 1, 1, 0]);
        assert_eq!(iou(&a, &b, &[1]), 0.0);
        let p = grid(vec![1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let g = grid(vec![1, 1, 0, 0, 1, 1, 0, 0, 0]);
        assert!((iou(&p, &g, &[1]) - 2.0 / 6.0).abs() < 1e-12);
        let e = grid(vec![0; 9]);
        assert_eq!(iou(&e, &e, &[1]), 1.0);
    }

    #[test]
    fn iou_matches_exhaustive_set_counting() {
        let target: Vec<u8> = vec![1, 0, 0, 1, 1, 0, 0, 0, 1];
        let gt = grid(target.clone());
        for mask in 0u32..512 {
            let pred: Vec<u8> = (0..9).map(|i| ((mask >> i) & 1) as u8).collect();
            let pg = grid(pred.clone());
            let inter = pred
                .iter()
                .zip(&target)
                .filter(|&(p, t)| *p == 1 && *t == 1)
                .count();
            let uni = pred
                .iter()
                .zip(&target)
                .filter(|&(p, t)| *p == 1 || *t == 1)
                .count();
            let expect = if uni == 0 {
                1.0
            } else {
                inter as f64 / uni as f64
            };
            assert_eq!(iou(&pg, &gt, &[1]), expect, "mask {mask}");
            assert_eq!(iou(&pg, &gt, &[1]), iou(&gt, &pg, &[1]));
        }
    }

    #[test]
    fn forecast_iou_perfect_and_convexity() {
        let a = grid(vec![1; 9]);
        let frames: Vec<&SemanticOccGrid> = vec![&a; 5];
        let t = forecast_iou(&frames, &frames, &[1], None).unwrap();
        assert_eq!(t.current, 1.0);
        assert_eq!(t.future, 1.0);
        assert!((t.future_weighted - 1.0).abs() < 1e-12);
        let mut rng = substream(7, "met.test", 0);
        for _ in 0..1000 {
            let f = uniform_int(&mut rng, 1, 6) as usize;
            let vals: Vec<f64> = (0..f).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
            let w = default_time_weights(f);
            let tw: f64 = vals.iter().zip(&w).map(|(v, wt)| v * wt).sum();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(tw >= lo - 1e-12 && tw <= hi + 1e-12);
        }
    }

    #[test]
    fn weighted_sum_example_and_default_weights() {
        assert_eq!(default_time_weights(2), vec![2.0 / 3.0, 1.0 / 3.0]);
        let tw: f64 = [0.6, 0.3]
            .iter()
            .zip(&default_time_weights(2))
            .map(|(v, wt)| v * wt)
            .sum();
        assert!((tw - 0.5).abs() < 1e-12);
        let w4 = default_time_weights(4);
        for (a, b) in w4.iter().zip(&[0.4, 0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_groups_cover_every_non_free_class_once() {
        let world = WorldConfig::default();
        let g = group_classes(&world);
        assert!(g.gmo.contains(&class::VEHICLE));
        assert!(g.gmo.contains(&class::PEDESTRIAN));
        assert!(g.gso.contains(&class::ROAD));
        assert!(g.gso.contains(&class::OBSTACLE));
        assert!(!g.gmo.contains(&class::FREE) && !g.gso.contains(&class::FREE));
        let mut all: Vec<u8> = g.gmo.iter().chain(&g.gso).copied().collect();
        all.sort_unstable();
        let expect: Vec<u8> = (1..world.num_classes as u8).collect();
        assert_eq!(all, expect);
        assert_eq!(g.per_class.len(), world.num_classes - 1);
    }

    #[test]
    fn l2_planning_cases() {
        let horizons = vec![("1s".to_string(), 2usize), ("2s".to_string(), 4)];
        let gt = vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        let r = l2_planning(&gt, &gt, &horizons).unwrap();
        assert_eq!(r.avg, 0.0);
        let mut pred = gt.clone();
        pred[1] = [2.3, 0.4];
        let r = l2_planning(&pred, &gt, &horizons).unwrap();
        assert!((r.per_horizon[0].1 - 0.5).abs() < 1e-12);
        assert!((r.avg - 0.25).abs() < 1e-12);
        let mut rng = substream(8, "met.l2", 0);
        let pred: Vec<[f64; 2]> = (0..4)
            .map(|_| [uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, -3.0, 3.0)])
            .collect();
        let r = l2_planning(&pred, &gt, &horizons).unwrap();
        for (label, frame) in &horizons {
            let d = ((pred[frame - 1][0] - gt[frame - 1][0]).powi(2)
                + (pred[frame - 1][1] - gt[frame - 1][1]).powi(2))
            .sqrt();
            let got = r.per_horizon.iter().find(|(l, _)| l == label).unwrap().1;
            assert!((got - d).abs() < 1e-12);
        }
    }

    #[test]
    fn collision_rate_cases_and_monotonicity() {
        let world = WorldConfig::default();
        let fp = Footprint::default();
        let gmo = vec![class::VEHICLE, class::PEDESTRIAN];
        let free = SemanticOccGrid::free(world.bev_h, world.bev_w, world.z_bins, 1);
        let traj = vec![vec![[2.0, 0.0], [4.0, 0.0], [6.0, 0.0], [8.0, 0.0]]];
        let frames = vec![vec![&free; 4]];
        assert_eq!(
            collision_rate(&traj, &frames, &world, &fp, &gmo).unwrap(),
            0.0
        );

        let mut hit = free.clone();
        for r in 0..world.bev_h {
            for c in 0..world.bev_w {
                let p = world.cell_center(r, c);
                if (3.0..=5.0).contains(&p[0]) && (-1.0..=1.0).contains(&p[1]) {
                    hit.set(r, c, 0, class::VEHICLE);
                }
            }
        }
        let frames = vec![vec![&free, &hit, &free, &free]];
        let rate = collision_rate(&traj, &frames, &world, &fp, &gmo).unwrap();
        assert!((rate - 25.0).abs() < 1e-9);

        let mut more = hit.clone();
        for r in 0..world.bev_h {
            for c in 0..world.bev_w {
                let p = world.cell_center(r, c);
                if (7.0..=9.0).contains(&p[0]) && (-1.0..=1.0).contains(&p[1]) {
                    more.set(r, c, 0, class::PEDESTRIAN);
                }
            }
        }
        let frames2 = vec![vec![&free, &hit, &free, &more]];
        let rate2 = collision_rate(&traj, &frames2, &world, &fp, &gmo).unwrap();
        assert!(rate2 >= rate);

        assert!(collision_rate(&[], &[], &world, &fp, &gmo).is_err());
    }

    #[test]
    fn latency_profile_cases() {
        let s = latency_profile(|| {}, 1, 5);
        assert!(s.median_ms < 1.0, "no-op median {} ms", s.median_ms);
        let s1 = latency_profile(|| {}, 0, 1);
        assert_eq!(s1.median_ms, s1.p90_ms);
        let work = |n: u64| {
            let mut acc = 0u64;
            for i in 0..n {
                acc = acc.wrapping_add(i).wrapping_mul(2654435761);
            }
            std::hint::black_box(acc);
        };
        let sb = latency_profile(|| work(80_000), 2, 9);
        let sa = latency_profile(
            || {
                work(80_000);
                work(80_000)
            },
            2,
            9,
        );
        assert!(sa.median_ms >= sb.median_ms);
    }

    #[test]
    fn horizon_labels_follow_dt() {
        let world = WorldConfig::default();
        let h = horizon_frames(&world);
        assert_eq!(h, vec![("1s".into(), 2), ("2s".into(), 4)]);
        let world6 = WorldConfig {
            f_future: 6,
            ..WorldConfig::default()
        };
        let h6 = horizon_frames(&world6);
        assert_eq!(
            h6,
            vec![("1s".into(), 2), ("2s".into(), 4), ("3s".into(), 6)]
        );
    }
}
