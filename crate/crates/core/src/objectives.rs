//! Training losses: semantic occupancy supervision (cross-entropy, Lovász,
//! binary occupancy), planning supervision (imitation plus collision),
//! alignment supervision, optional temporal self-supervision, and the joint
//! objective.

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::error::ModelError;
use crate::footprint::{footprint_cells, waypoint_headings, Footprint};
use crate::gridworld::{class, SemanticOccGrid, WorldConfig};
use crate::heads::OccLogits;

/// Objective weights; both default to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_plan: f64,
    pub lambda_coll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_plan: 1.0,
            lambda_coll: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_plan.is_finite() && self.lambda_plan >= 0.0) {
            return Err("lambda_plan must be finite and >= 0".into());
        }
        if !(self.lambda_coll.is_finite() && self.lambda_coll >= 0.0) {
            return Err("lambda_coll must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Mean voxel-wise negative log-likelihood.
pub fn ce_loss(tape: &mut Tape, logits: Var, target: &[u8]) -> Result<Var, ModelError> {
    let (n, c) = tape.shape(logits);
    if target.len() != n {
        return Err(ModelError::LengthMismatch {
            context: "ce_loss target",
            expected: n,
            got: target.len(),
        });
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(ModelError::InvalidArgument(format!(
            "ce_loss target label {bad} out of range for {c} classes"
        )));
    }
    Ok(tape.cross_entropy_rows(logits, target))
}

/// Lovász-softmax over per-voxel class probabilities, averaged over the
/// classes present in the target.
pub fn lovasz_loss(tape: &mut Tape, probs: Var, target: &[u8]) -> Result<Var, ModelError> {
    let (n, c) = tape.shape(probs);
    if target.len() != n {
        return Err(ModelError::LengthMismatch {
            context: "lovasz_loss target",
            expected: n,
            got: target.len(),
        });
    }
    for row in tape.value(probs).chunks_exact(c) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(-1e-9..=1.0 + 1e-9).contains(&p)) {
            return Err(ModelError::InvalidArgument(
                "lovasz_loss expects normalized probabilities".into(),
            ));
        }
    }
    Ok(tape.lovasz_softmax(probs, target))
}

/// Mean binary cross-entropy of an occupied-space logit column against the
/// occupied mask.
pub fn bce_occ_loss(tape: &mut Tape, occupied_logit: Var, mask: &[f64]) -> Result<Var, ModelError> {
    let (n, c) = tape.shape(occupied_logit);
    if c != 1 || n != mask.len() {
        return Err(ModelError::ShapeMismatch {
            context: "bce_occ_loss",
            expected: format!("{}x1", mask.len()),
            got: format!("{n}x{c}"),
        });
    }
    Ok(tape.bce_with_logit(occupied_logit, mask))
}

/// Occupied-space logit per voxel derived from class logits: the log-odds
/// of (1 - p_free), i.e. logsumexp over non-free classes minus the free
/// logit.
pub fn occupied_logit(tape: &mut Tape, logits: Var) -> Var {
    let lse = tape.logsumexp_skip0(logits);
    let free = tape.slice_cols(logits, 0, 1);
    tape.sub(lse, free)
}

/// Per-frame components of the occupancy objective.
pub struct OccLossParts {
    pub total: Var,
    pub ce: f64,
    pub lovasz: f64,
    pub bce: f64,
}

/// Occupancy objective: mean over frames of (cross-entropy + Lovász +
/// binary occupancy).
pub fn occ_loss(
    tape: &mut Tape,
    frames: &[(OccLogits, &SemanticOccGrid)],
) -> Result<OccLossParts, ModelError> {
    if frames.is_empty() {
        return Err(ModelError::LengthMismatch {
            context: "occ_loss frames",
            expected: 1,
            got: 0,
        });
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    let (mut ce_sum, mut lv_sum, mut bce_sum) = (0.0, 0.0, 0.0);
    for (logits, target) in frames {
        let expect_rows = target.h * target.w * target.z;
        let (rows, _) = tape.shape(logits.var);
        if rows != expect_rows {
            return Err(ModelError::ShapeMismatch {
                context: "occ_loss frame",
                expected: format!("{expect_rows} voxels"),
                got: format!("{rows} voxels"),
            });
        }
        let ce = ce_loss(tape, logits.var, &target.labels)?;
        let probs = tape.softmax_rows(logits.var);
        let lv = lovasz_loss(tape, probs, &target.labels)?;
        let occ_log = occupied_logit(tape, logits.var);
        let mask: Vec<f64> = target
            .labels
            .iter()
            .map(|&l| if l == class::FREE { 0.0 } else { 1.0 })
            .collect();
        let bce = bce_occ_loss(tape, occ_log, &mask)?;
        ce_sum += tape.scalar(ce);
        lv_sum += tape.scalar(lv);
        bce_sum += tape.scalar(bce);
        let s = tape.add(ce, lv);
        per_frame.push(tape.add(s, bce));
    }
    let sum = tape.add_n(&per_frame);
    let total = tape.scale(sum, 1.0 / frames.len() as f64);
    let inv = 1.0 / frames.len() as f64;
    Ok(OccLossParts {
        total,
        ce: ce_sum * inv,
        lovasz: lv_sum * inv,
        bce: bce_sum * inv,
    })
}

/// Classes an ego footprint may not overlap: everything except free space
/// and the road surface.
pub fn obstacle_classes(world: &WorldConfig) -> Vec<u8> {
    (0..world.num_classes as u8)
        .filter(|&c| c != class::FREE && c != class::ROAD)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CollisionDiagnostics {
    /// Waypoints whose footprint left the grid window entirely (treated as
    /// free space).
    pub out_of_window_steps: usize,
}

/// Mean over steps of the obstacle-occupied fraction of the ego footprint
/// at each waypoint (columns max-pooled over z). Piecewise constant in the
/// waypoints.
pub fn collision_loss(
    waypoints: &[[f64; 2]],
    target_occ: &[&SemanticOccGrid],
    world: &WorldConfig,
    fp: &Footprint,
) -> Result<(f64, CollisionDiagnostics), ModelError> {
    if waypoints.len() != target_occ.len() {
        return Err(ModelError::LengthMismatch {
            context: "collision_loss frames",
            expected: waypoints.len(),
            got: target_occ.len(),
        });
    }
    if waypoints.is_empty() {
        return Err(ModelError::LengthMismatch {
            context: "collision_loss waypoints",
            expected: 1,
            got: 0,
        });
    }
    let obstacles = obstacle_classes(world);
    let headings = waypoint_headings([0.0, 0.0], waypoints);
    let mut diag = CollisionDiagnostics::default();
    let mut total = 0.0;
    for ((wp, hd), occ) in waypoints.iter().zip(&headings).zip(target_occ) {
        let cells = footprint_cells(world, *wp, *hd, fp);
        if cells.fully_outside {
            diag.out_of_window_steps += 1;
            continue;
        }
        if cells.cells.is_empty() {
            continue;
        }
        let occupied = cells
            .cells
            .iter()
            .filter(|&&(r, c)| occ.column_has_class(r, c, &obstacles))
            .count();
        total += occupied as f64 / cells.cells.len() as f64;
    }
    Ok((total / waypoints.len() as f64, diag))
}

pub struct PlanLossParts {
    pub total: Var,
    pub l2: f64,
    pub collision: f64,
    pub diagnostics: CollisionDiagnostics,
}

/// Planning objective: mean over steps of the squared position error plus
/// the weighted collision term. The collision term is piecewise constant in
/// the prediction and enters the objective as a value.
pub fn plan_loss(
    tape: &mut Tape,
    pred_positions: Var,
    gt_positions: &[[f64; 2]],
    target_occ: &[&SemanticOccGrid],
    world: &WorldConfig,
    fp: &Footprint,
    weights: &LossWeights,
) -> Result<PlanLossParts, ModelError> {
    let (f, two) = tape.shape(pred_positions);
    if two != 2 || f != gt_positions.len() {
        return Err(ModelError::ShapeMismatch {
            context: "plan_loss trajectories",
            expected: format!("{}x2", gt_positions.len()),
            got: format!("{f}x{two}"),
        });
    }
    let gt_flat: Vec<f64> = gt_positions.iter().flat_map(|p| [p[0], p[1]]).collect();
    let gt = tape.constant(gt_flat, f, 2);
    let diff = tape.sub(pred_positions, gt);
    let sq = tape.square(diff);
    let sum = tape.sum_all(sq);
    let l2_term = tape.scale(sum, 1.0 / f as f64);

    let pred_vals: Vec<[f64; 2]> = tape
        .value(pred_positions)
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let (coll, diagnostics) = collision_loss(&pred_vals, target_occ, world, fp)?;
    let coll_term = tape.constant_scalar(weights.lambda_coll * coll);
    let total = tape.add(l2_term, coll_term);
    Ok(PlanLossParts {
        total,
        l2: tape.scalar(l2_term),
        collision: coll,
        diagnostics,
    })
}

/// Alignment supervision: cross-entropy of the auxiliary BEV semantic map
/// against the per-column top-surface class.
pub fn align_loss(tape: &mut Tape, aux_logits: Var, bev_target: &[u8]) -> Result<Var, ModelError> {
    ce_loss(tape, aux_logits, bev_target)
}

/// Temporal self-supervision: mean squared difference between predicted
/// states and encoder states from future observations.
pub fn tss_loss(tape: &mut Tape, predicted: &[Var], encoded: &[Var]) -> Result<Var, ModelError> {
    if predicted.len() != encoded.len() || predicted.is_empty() {
        return Err(ModelError::LengthMismatch {
            context: "tss_loss frames",
            expected: predicted.len().max(1),
            got: encoded.len(),
        });
    }
    let mut per_frame = Vec::with_capacity(predicted.len());
    for (&p, &e) in predicted.iter().zip(encoded) {
        if tape.shape(p) != tape.shape(e) {
            return Err(ModelError::ShapeMismatch {
                context: "tss_loss frame",
                expected: format!("{:?}", tape.shape(p)),
                got: format!("{:?}", tape.shape(e)),
            });
        }
        let d = tape.sub(p, e);
        let sq = tape.square(d);
        per_frame.push(tape.mean_all(sq));
    }
    let sum = tape.add_n(&per_frame);
    Ok(tape.scale(sum, 1.0 / predicted.len() as f64))
}

pub struct TotalLossParts {
    pub total: Var,
    pub align: Option<f64>,
    pub occ: f64,
    pub plan: f64,
    pub tss: Option<f64>,
}

/// Joint objective: align + occ + lambda_plan * plan (+ tss when enabled).
pub fn total_loss(
    tape: &mut Tape,
    align: Option<Var>,
    occ: Var,
    plan: Var,
    tss: Option<Var>,
    weights: &LossWeights,
) -> TotalLossParts {
    let mut acc = occ;
    if let Some(a) = align {
        acc = tape.add(acc, a);
    }
    let weighted_plan = tape.scale(plan, weights.lambda_plan);
    acc = tape.add(acc, weighted_plan);
    if let Some(t) = tss {
        acc = tape.add(acc, t);
    }
    TotalLossParts {
        total: acc,
        align: align.map(|a| tape.scalar(a)),
        occ: tape.scalar(occ),
        plan: tape.scalar(plan),
        tss: tss.map(|t| tape.scalar(t)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, uniform};

    #[test]
    fn ce_perfect_margin_and_uniform_cases() {
        let mut tape = Tape::new();
        // Large-margin correct logits drive the loss to zero.
        let mut data = vec![0.0; 3 * 4];
        for (r, t) in [0usize, 2, 3].iter().enumerate() {
            data[r * 4 + t] = 100.0;
        }
        let logits = tape.constant(data, 3, 4);
        let loss = ce_loss(&mut tape, logits, &[0, 2, 3]).unwrap();
        assert!(tape.scalar(loss) < 1e-6);

        let uniform_logits = tape.constant(vec![0.0; 3 * 4], 3, 4);
        let loss = ce_loss(&mut tape, uniform_logits, &[1, 0, 3]).unwrap();
        assert!((tape.scalar(loss) - (4.0f64).ln()).abs() < 1e-12);

        assert!(ce_loss(&mut tape, uniform_logits, &[1, 9, 3]).is_err());
    }

    #[test]
    fn ce_two_voxel_scalar_oracle() {
        // 2x1x1 grid with hand logits; oracle computed per voxel.
        let mut tape = Tape::new();
        let data = vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0];
        let logits = tape.constant(data.clone(), 2, 3);
        let loss = ce_loss(&mut tape, logits, &[2, 1]).unwrap();
        let mut expect = 0.0;
        for (r, &t) in [2usize, 1].iter().enumerate() {
            let row = &data[r * 3..(r + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[t].exp() / z).ln();
        }
        expect /= 2.0;
        assert!((tape.scalar(loss) - expect).abs() < 1e-8);
    }

    fn hard_probs(pred: &[u8], classes: usize) -> Vec<f64> {
        let mut p = vec![0.0; pred.len() * classes];
        for (i, &c) in pred.iter().enumerate() {
            p[i * classes + c as usize] = 1.0;
        }
        p
    }

    #[test]
    fn lovasz_zero_at_perfect_prediction() {
        let mut tape = Tape::new();
        let target = vec![0u8, 1, 1, 0, 1];
        let probs = tape.constant(hard_probs(&target, 2), 5, 2);
        let loss = lovasz_loss(&mut tape, probs, &target).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn lovasz_exhaustive_binary_3x3_equals_one_minus_iou() {
        // Every hard prediction against a fixed mixed target; oracle is
        // per-class set counting, averaged over present classes with the
        // same float operations the loss uses.
        let target: Vec<u8> = vec![1, 0, 0, 1, 1, 0, 0, 0, 1];
        for mask in 0u32..512 {
            let pred: Vec<u8> = (0..9).map(|i| ((mask >> i) & 1) as u8).collect();
            let mut tape = Tape::new();
            let probs = tape.constant(hard_probs(&pred, 2), 9, 2);
            let loss = lovasz_loss(&mut tape, probs, &target).unwrap();
            let mut oracle_sum = 0.0;
            for cls in [0u8, 1] {
                let inter = pred
                    .iter()
                    .zip(&target)
                    .filter(|&(p, t)| *p == cls && *t == cls)
                    .count() as f64;
                let uni = pred
                    .iter()
                    .zip(&target)
                    .filter(|&(p, t)| *p == cls || *t == cls)
                    .count() as f64;
                oracle_sum += 1.0 - inter / uni;
            }
            let oracle = oracle_sum * 0.5;
            assert_eq!(
                tape.scalar(loss),
                oracle,
                "prediction mask {mask} disagrees with set counting"
            );
        }
    }

    #[test]
    fn lovasz_rejects_unnormalized_probabilities() {
        let mut tape = Tape::new();
        let probs = tape.constant(vec![0.7, 0.7, 0.2, 0.8], 2, 2);
        assert!(lovasz_loss(&mut tape, probs, &[0, 1]).is_err());
    }

    #[test]
    fn lovasz_tie_gradient_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            // Multiple identical probability rows create sorting ties.
            let x = tape.leaf_grad(vec![0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.9, 0.1], 4, 2);
            let loss = lovasz_loss(&mut tape, x, &[1, 0, 1, 0]).unwrap();
            let g = tape.backward(loss);
            g.get(x).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bce_cases_and_scalar_oracle() {
        let mut tape = Tape::new();
        let perfect = tape.constant(vec![100.0, -100.0, 100.0], 3, 1);
        let loss = bce_occ_loss(&mut tape, perfect, &[1.0, 0.0, 1.0]).unwrap();
        assert!(tape.scalar(loss) < 1e-6);

        let zeros = tape.constant(vec![0.0; 4], 4, 1);
        let loss = bce_occ_loss(&mut tape, zeros, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((tape.scalar(loss) - (2.0f64).ln()).abs() < 1e-12);

        // Four-voxel hand case.
        let logits = vec![0.3, -1.2, 2.0, 0.7];
        let mask = [1.0, 0.0, 1.0, 0.0];
        let l = tape.constant(logits.clone(), 4, 1);
        let loss = bce_occ_loss(&mut tape, l, &mask).unwrap();
        let mut expect = 0.0;
        for (lv, m) in logits.iter().zip(&mask) {
            let p = 1.0 / (1.0 + (-lv).exp());
            expect -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
        }
        expect /= 4.0;
        assert!((tape.scalar(loss) - expect).abs() < 1e-8);
    }

    #[test]
    fn occupied_logit_is_log_odds_of_not_free() {
        let mut tape = Tape::new();
        let data = vec![0.5, 1.0, -0.3, 2.0, -1.0, 0.0];
        let logits = tape.constant(data.clone(), 2, 3);
        let ol = occupied_logit(&mut tape, logits);
        for (r, row) in data.chunks_exact(3).enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let p_free = row[0].exp() / z;
            let expect = ((1.0 - p_free) / p_free).ln();
            assert!((tape.value(ol)[r] - expect).abs() < 1e-9);
        }
    }

    fn grid_from(labels: Vec<u8>, h: usize, w: usize, z: usize) -> SemanticOccGrid {
        SemanticOccGrid {
            h,
            w,
            z,
            timestamp: 0,
            labels,
        }
    }

    fn occ_logits_from(tape: &mut Tape, data: Vec<f64>, h: usize, w: usize, z: usize, c: usize) -> OccLogits {
        let var = tape.constant(data, h * w * z, c);
        OccLogits {
            var,
            h,
            w,
            z,
            classes: c,
        }
    }

    #[test]
    fn occ_loss_linearity_over_frames_and_oracle() {
        let mut rng = substream(41, "obj.test", 0);
        let (h, w, z, c) = (2usize, 2usize, 2usize, 3usize);
        let n = h * w * z;
        let data1: Vec<f64> = (0..n * c).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let data2: Vec<f64> = (0..n * c).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let t1: Vec<u8> = (0..n).map(|_| uniform(&mut rng, 0.0, 3.0) as u8).collect();
        let t2: Vec<u8> = (0..n).map(|_| uniform(&mut rng, 0.0, 3.0) as u8).collect();
        let g1 = grid_from(t1, h, w, z);
        let g2 = grid_from(t2, h, w, z);

        let single = |data: &Vec<f64>, g: &SemanticOccGrid| -> f64 {
            let mut tape = Tape::new();
            let l = occ_logits_from(&mut tape, data.clone(), h, w, z, c);
            let parts = occ_loss(&mut tape, &[(l, g)]).unwrap();
            tape.scalar(parts.total)
        };
        let a = single(&data1, &g1);
        let b = single(&data2, &g2);

        let mut tape = Tape::new();
        let l1 = occ_logits_from(&mut tape, data1.clone(), h, w, z, c);
        let l2 = occ_logits_from(&mut tape, data2.clone(), h, w, z, c);
        let parts = occ_loss(&mut tape, &[(l1, &g1), (l2, &g2)]).unwrap();
        let both = tape.scalar(parts.total);
        assert!((both - 0.5 * (a + b)).abs() < 1e-12);

        // Single-frame total equals the sum of its three parts.
        let mut tape = Tape::new();
        let l = occ_logits_from(&mut tape, data1.clone(), h, w, z, c);
        let parts = occ_loss(&mut tape, &[(l, &g1)]).unwrap();
        assert!(
            (tape.scalar(parts.total) - (parts.ce + parts.lovasz + parts.bce)).abs() < 1e-9
        );
    }

    #[test]
    fn collision_loss_free_full_and_half_cases() {
        let world = WorldConfig::default();
        let fp = Footprint::default();
        let free = SemanticOccGrid::free(world.bev_h, world.bev_w, world.z_bins, 1);
        let frames: Vec<&SemanticOccGrid> = vec![&free; 4];
        let wps = [[2.0, 0.0], [4.0, 0.0], [6.0, 0.0], [8.0, 0.0]];
        let (loss, diag) = collision_loss(&wps, &frames, &world, &fp).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(diag.out_of_window_steps, 0);

        // A block fully covering one waypoint footprint.
        let mut blocked = free.clone();
        for r in 0..world.bev_h {
            for c in 0..world.bev_w {
                let p = world.cell_center(r, c);
                if (0.0..=8.0).contains(&p[0]) && (-4.0..=4.0).contains(&p[1]) {
                    blocked.set(r, c, 0, class::OBSTACLE);
                }
            }
        }
        let frames = [&blocked];
        let (loss, _) = collision_loss(&[[4.0, 0.0]], &frames, &world, &fp).unwrap();
        assert_eq!(loss, 1.0);

        // Footprint half inside the block: 4 m long footprint centered at
        // the block's leading edge.
        let mut half = free.clone();
        for r in 0..world.bev_h {
            for c in 0..world.bev_w {
                let p = world.cell_center(r, c);
                if p[0] >= 6.0 && (-4.0..=4.0).contains(&p[1]) {
                    half.set(r, c, 0, class::OBSTACLE);
                }
            }
        }
        let frames = [&half];
        let (loss, _) = collision_loss(&[[6.0, 0.0]], &frames, &world, &fp).unwrap();
        assert!((0.4..=0.6).contains(&loss), "half overlap loss {loss}");

        // Out-of-window waypoint is treated as free and flagged.
        let frames = [&blocked];
        let (loss, diag) = collision_loss(&[[60.0, 0.0]], &frames, &world, &fp).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(diag.out_of_window_steps, 1);

        // Road surface does not count as an obstacle.
        let mut road = free.clone();
        for r in 0..world.bev_h {
            for c in 0..world.bev_w {
                road.set(r, c, 0, class::ROAD);
            }
        }
        let frames = [&road];
        let (loss, _) = collision_loss(&[[4.0, 0.0]], &frames, &world, &fp).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn plan_loss_analytic_cases() {
        let world = WorldConfig::default();
        let fp = Footprint::default();
        let free = SemanticOccGrid::free(world.bev_h, world.bev_w, world.z_bins, 1);
        let frames: Vec<&SemanticOccGrid> = vec![&free; 1];

        // pred == gt in free space -> 0.
        let mut tape = Tape::new();
        let pred = tape.constant(vec![3.0, 1.0], 1, 2);
        let w = LossWeights::default();
        let parts =
            plan_loss(&mut tape, pred, &[[3.0, 1.0]], &frames, &world, &fp, &w).unwrap();
        assert_eq!(tape.scalar(parts.total), 0.0);

        // Single step offset (3, 4) with lambda_coll = 0 gives 25.
        let mut tape = Tape::new();
        let pred = tape.constant(vec![3.0, 4.0], 1, 2);
        let w0 = LossWeights {
            lambda_coll: 0.0,
            ..LossWeights::default()
        };
        let parts =
            plan_loss(&mut tape, pred, &[[0.0, 0.0]], &frames, &world, &fp, &w0).unwrap();
        assert!((tape.scalar(parts.total) - 25.0).abs() < 1e-12);

        // Random case against a scalar oracle.
        let mut rng = substream(42, "obj.plan", 0);
        let mut tape = Tape::new();
        let f = 4usize;
        let pred_vals: Vec<f64> = (0..2 * f).map(|_| uniform(&mut rng, -4.0, 4.0)).collect();
        let gt: Vec<[f64; 2]> = (0..f)
            .map(|_| [uniform(&mut rng, -4.0, 4.0), uniform(&mut rng, -4.0, 4.0)])
            .collect();
        let frames: Vec<&SemanticOccGrid> = vec![&free; f];
        let pred = tape.constant(pred_vals.clone(), f, 2);
        let parts = plan_loss(&mut tape, pred, &gt, &frames, &world, &fp, &w).unwrap();
        let mut expect = 0.0;
        for t in 0..f {
            let dx = pred_vals[2 * t] - gt[t][0];
            let dy = pred_vals[2 * t + 1] - gt[t][1];
            expect += dx * dx + dy * dy;
        }
        expect /= f as f64;
        assert!((tape.scalar(parts.total) - expect).abs() < 1e-9);
    }

    #[test]
    fn tss_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.5; 12], 3, 4);
        let loss = tss_loss(&mut tape, &[a], &[a]).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);

        let mut data = vec![0.0; 12];
        data[5] = 1.0;
        let b = tape.constant(data, 3, 4);
        let z = tape.constant(vec![0.0; 12], 3, 4);
        let loss = tss_loss(&mut tape, &[b], &[z]).unwrap();
        assert!((tape.scalar(loss) - 1.0 / 12.0).abs() < 1e-12);

        let mut rng = substream(43, "obj.tss", 0);
        let xd: Vec<f64> = (0..12).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let yd: Vec<f64> = (0..12).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let x = tape.constant(xd.clone(), 3, 4);
        let y = tape.constant(yd.clone(), 3, 4);
        let loss = tss_loss(&mut tape, &[x], &[y]).unwrap();
        let expect: f64 =
            xd.iter().zip(&yd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 12.0;
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition_and_lambda_linearity() {
        let weights = |lp: f64| LossWeights {
            lambda_plan: lp,
            lambda_coll: 1.0,
        };
        let eval = |lp: f64| -> f64 {
            let mut tape = Tape::new();
            let align = tape.constant_scalar(0.7);
            let occ = tape.constant_scalar(1.3);
            let plan = tape.constant_scalar(0.9);
            let parts = total_loss(&mut tape, Some(align), occ, plan, None, &weights(lp));
            tape.scalar(parts.total)
        };
        assert!((eval(0.0) - 2.0).abs() < 1e-12);
        assert!((eval(1.0) - 2.9).abs() < 1e-12);
        // Linear in lambda_plan.
        let l0 = eval(0.0);
        let l1 = eval(1.0);
        let l2 = eval(2.0);
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12);

        let mut tape = Tape::new();
        let z = tape.constant_scalar(0.0);
        let parts = total_loss(&mut tape, Some(z), z, z, Some(z), &weights(1.0));
        assert_eq!(tape.scalar(parts.total), 0.0);
    }

    #[test]
    fn every_loss_gradient_matches_finite_differences() {
        // CE, Lovász (via softmax), BCE and the plan L2 term on small
        // probes.
        let mut rng = substream(44, "obj.grad", 0);
        let target = vec![0u8, 2, 1, 1];
        let base: Vec<f64> = (0..12).map(|_| uniform(&mut rng, -1.5, 1.5)).collect();
        let run_ce = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf_grad(p.to_vec(), 4, 3);
            let loss = ce_loss(&mut tape, x, &target).unwrap();
            let g = tape.backward(loss);
            (tape.scalar(loss), g.get(x).unwrap().to_vec())
        };
        let (_, ga) = run_ce(&base);
        let mut f = |p: &[f64]| run_ce(p).0;
        let gn = crate::ad::central_diff(&mut f, &base, 1e-6);
        assert!(crate::ad::rel_err(&ga, &gn) < 1e-4);

        let run_lv = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf_grad(p.to_vec(), 4, 3);
            let sm = tape.softmax_rows(x);
            let loss = lovasz_loss(&mut tape, sm, &target).unwrap();
            let g = tape.backward(loss);
            (tape.scalar(loss), g.get(x).unwrap().to_vec())
        };
        let (_, ga) = run_lv(&base);
        let mut f = |p: &[f64]| run_lv(p).0;
        let gn = crate::ad::central_diff(&mut f, &base, 1e-6);
        assert!(crate::ad::rel_err(&ga, &gn) < 1e-4);

        let mask = vec![1.0, 0.0, 1.0, 0.0];
        let base_l: Vec<f64> = (0..4).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let run_bce = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf_grad(p.to_vec(), 4, 1);
            let loss = bce_occ_loss(&mut tape, x, &mask).unwrap();
            let g = tape.backward(loss);
            (tape.scalar(loss), g.get(x).unwrap().to_vec())
        };
        let (_, ga) = run_bce(&base_l);
        let mut f = |p: &[f64]| run_bce(p).0;
        let gn = crate::ad::central_diff(&mut f, &base_l, 1e-6);
        assert!(crate::ad::rel_err(&ga, &gn) < 1e-4);
    }
}
